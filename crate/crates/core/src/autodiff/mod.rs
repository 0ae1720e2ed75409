//! Minimal reverse-mode automatic differentiation over dense volumes.
//!
//! A [`Graph`] records every operation eagerly: each node stores its forward
//! value and the op that produced it, appended in topological order, so the
//! backward pass is a single reverse sweep. Network parameters enter the
//! graph as shared slots keyed by an external id; two forward passes through
//! the same network inside one graph therefore accumulate gradients into the
//! same slot, which is exactly what the perturbed-and-unperturbed loss terms
//! need.
//!
//! Tensors are one channel group of cubes: shape (channels, t, rows, cols)
//! with the per-pixel time histogram contiguous, matching the cube layout.

pub mod net;

pub use net::{
    load_checkpoint, save_checkpoint, NearestNeighborUpsampler, NetConfig, Parameter,
    ReconstructionNet, Reconstructor,
};

use crate::cube::{CubeDims, PhotonCountingCube};
use crate::error::{Error, Result};
use crate::operators::TransformSpec;
use std::collections::HashMap;

/// Tensor extents. `idx(ch, t, r, c) = ((ch*rows + r)*cols + c)*t_bins + t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub t: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(channels: usize, t: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            t,
            rows,
            cols,
        }
    }

    pub fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub fn from_cube(dims: CubeDims) -> Self {
        Self::new(1, dims.t_bins, dims.rows, dims.cols)
    }

    pub fn len(&self) -> usize {
        self.channels * self.t * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, ch: usize, t: usize, r: usize, c: usize) -> usize {
        ((ch * self.rows + r) * self.cols + c) * self.t + t
    }

    /// Offset of the contiguous histogram at (ch, r, c).
    #[inline]
    pub fn hist(&self, ch: usize, r: usize, c: usize) -> usize {
        ((ch * self.rows + r) * self.cols + c) * self.t
    }
}

pub type NodeId = usize;
pub type SlotId = usize;

#[derive(Debug, Clone, Copy)]
pub struct ConvMeta {
    pub w: SlotId,
    pub b: Option<SlotId>,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

#[derive(Debug, Clone)]
#[allow(dead_code)] // scalar payloads are kept for graph debugging
enum Op {
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Softplus(NodeId),
    /// ln(max(x, eps)); gradient is zero on the floored region.
    LogFloor(NodeId, f64),
    /// Per-pixel histogram normalization along t.
    NormalizeT(NodeId),
    SumAll(NodeId),
    /// Block-mean pooling by (t, row, col) factors.
    BlockMean(NodeId, [usize; 3]),
    /// Lateral quarter-turn + cyclic time shift permutation.
    Transform(NodeId, TransformSpec),
    Conv3d(NodeId, ConvMeta),
    ConvTranspose3d(NodeId, ConvMeta),
}

struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Shared parameter buffer inside a graph, keyed by the caller's parameter id.
struct ParamSlot {
    key: u64,
    dims: Vec<usize>,
    value: Vec<f64>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    slot_grads: Vec<Vec<f64>>,
    slot_keys: Vec<u64>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.node_grads.get(id).and_then(|g| g.as_deref())
    }

    /// (key, grad) pairs for every parameter slot touched by the graph.
    pub fn slots(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.slot_keys
            .iter()
            .copied()
            .zip(self.slot_grads.iter().map(|g| g.as_slice()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    slots: Vec<ParamSlot>,
    slot_index: HashMap<u64, SlotId>,
}

/// Valid output range of a strided/padded correlation along one axis:
/// all `o` with `0 <= o*stride + k - pad < n_in`, clamped to `n_out`.
#[inline]
fn conv_axis_range(n_in: usize, n_out: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let top = n_in as i64 - 1 + pad as i64 - k as i64;
    if top < 0 {
        return (1, 0); // empty
    }
    let hi = ((top as usize) / stride).min(n_out - 1);
    (lo, hi)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].shape.len(), 1);
        self.nodes[id].value[0]
    }

    pub fn node_to_cube(&self, id: NodeId) -> Result<PhotonCountingCube> {
        let s = self.nodes[id].shape;
        if s.channels != 1 {
            return Err(Error::DimMismatch(format!(
                "cannot view a {}-channel tensor as a cube",
                s.channels
            )));
        }
        let dims = CubeDims::new(s.t, s.rows, s.cols)?;
        PhotonCountingCube::from_raw(dims, self.nodes[id].value.clone())
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, shape: Shape, data: Vec<f64>) -> NodeId {
        assert_eq!(shape.len(), data.len(), "input length mismatch");
        self.push(shape, data, Op::Input, false)
    }

    /// Input leaf whose gradient is tracked and retrievable after backward.
    pub fn watched_input(&mut self, shape: Shape, data: Vec<f64>) -> NodeId {
        assert_eq!(shape.len(), data.len(), "input length mismatch");
        self.push(shape, data, Op::Input, true)
    }

    pub fn input_cube(&mut self, cube: &PhotonCountingCube) -> NodeId {
        self.input(Shape::from_cube(cube.dims()), cube.data().to_vec())
    }

    /// Registers (or reuses) a parameter slot for an external parameter id.
    pub fn param_slot(&mut self, key: u64, dims: &[usize], value: &[f64]) -> SlotId {
        if let Some(&slot) = self.slot_index.get(&key) {
            return slot;
        }
        let slot = self.slots.len();
        self.slots.push(ParamSlot {
            key,
            dims: dims.to_vec(),
            value: value.to_vec(),
        });
        self.slot_index.insert(key, slot);
        slot
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
        if sa != sb {
            return Err(Error::DimMismatch(format!(
                "{what}: {sa:?} vs {sb:?}"
            )));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.binary_shapes(a, b, "add")?;
        let v = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(s, v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.binary_shapes(a, b, "sub")?;
        let v = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(s, v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.binary_shapes(a, b, "mul")?;
        let v = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(s, v, Op::Mul(a, b), ng))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.nodes[a].shape;
        let v = self.nodes[a].value.iter().map(|x| x + c).collect();
        let ng = self.nodes[a].needs_grad;
        self.push(s, v, Op::AddScalar(a, c), ng)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.nodes[a].shape;
        let v = self.nodes[a].value.iter().map(|x| x * c).collect();
        let ng = self.nodes[a].needs_grad;
        self.push(s, v, Op::MulScalar(a, c), ng)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].shape;
        let v = self.nodes[a].value.iter().map(|&x| softplus(x)).collect();
        let ng = self.nodes[a].needs_grad;
        self.push(s, v, Op::Softplus(a), ng)
    }

    pub fn log_floor(&mut self, a: NodeId, eps: f64) -> NodeId {
        let s = self.nodes[a].shape;
        let v = self.nodes[a]
            .value
            .iter()
            .map(|&x| x.max(eps).ln())
            .collect();
        let ng = self.nodes[a].needs_grad;
        self.push(s, v, Op::LogFloor(a, eps), ng)
    }

    /// Rescales every per-pixel histogram to sum 1.
    pub fn normalize_t(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a].shape;
        let mut v = self.nodes[a].value.clone();
        for hist in v.chunks_mut(s.t) {
            let sum: f64 = hist.iter().sum();
            if sum <= 0.0 {
                return Err(Error::InvalidValue(
                    "normalize_t: zero-sum histogram".into(),
                ));
            }
            for x in hist.iter_mut() {
                *x /= sum;
            }
        }
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(s, v, Op::NormalizeT(a), ng))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = vec![self.nodes[a].value.iter().sum()];
        let ng = self.nodes[a].needs_grad;
        self.push(Shape::scalar(), v, Op::SumAll(a), ng)
    }

    pub fn block_mean(&mut self, a: NodeId, factors: [usize; 3]) -> Result<NodeId> {
        let s = self.nodes[a].shape;
        let [ft, fr, fc] = factors;
        if ft == 0 || fr == 0 || fc == 0 || !s.t.is_multiple_of(ft) || !s.rows.is_multiple_of(fr) || !s.cols.is_multiple_of(fc) {
            return Err(Error::Indivisible {
                what: "block_mean",
                dims: (s.t, s.rows, s.cols),
                scale: (ft, fr, fc),
            });
        }
        let out_shape = Shape::new(s.channels, s.t / ft, s.rows / fr, s.cols / fc);
        let mut out = vec![0.0f64; out_shape.len()];
        let inv = 1.0 / (ft * fr * fc) as f64;
        let x = &self.nodes[a].value;
        for ch in 0..s.channels {
            for r in 0..out_shape.rows {
                for c in 0..out_shape.cols {
                    let dst = out_shape.hist(ch, r, c);
                    for dr in 0..fr {
                        for dc in 0..fc {
                            let src = s.hist(ch, r * fr + dr, c * fc + dc);
                            for t in 0..out_shape.t {
                                let mut acc = 0.0;
                                for dt in 0..ft {
                                    acc += x[src + t * ft + dt];
                                }
                                out[dst + t] += acc;
                            }
                        }
                    }
                    for t in 0..out_shape.t {
                        out[dst + t] *= inv;
                    }
                }
            }
        }
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(out_shape, out, Op::BlockMean(a, factors), ng))
    }

    /// Applies the symmetry group element channel by channel.
    pub fn transform(&mut self, a: NodeId, g: TransformSpec) -> Result<NodeId> {
        let s = self.nodes[a].shape;
        if s.rows != s.cols {
            return Err(Error::DimMismatch(format!(
                "transform needs square lateral dims, got {}x{}",
                s.rows, s.cols
            )));
        }
        let v = permute_transform(&self.nodes[a].value, s, &g);
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(s, v, Op::Transform(a, g), ng))
    }

    /// Cross-correlation with kernel dims [c_out, c_in, kt, kh, kw] and an
    /// optional per-output-channel bias.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w_slot: SlotId,
        b_slot: Option<SlotId>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<NodeId> {
        let s = self.nodes[x].shape;
        let wd = &self.slots[w_slot].dims;
        if wd.len() != 5 {
            return Err(Error::DimMismatch(format!(
                "conv3d kernel must be rank 5, got {wd:?}"
            )));
        }
        let (c_out, c_in, k) = (wd[0], wd[1], [wd[2], wd[3], wd[4]]);
        if c_in != s.channels {
            return Err(Error::DimMismatch(format!(
                "conv3d: input has {} channels, kernel expects {c_in}",
                s.channels
            )));
        }
        if let Some(b) = b_slot {
            if self.slots[b].dims != [c_out] {
                return Err(Error::DimMismatch(format!(
                    "conv3d bias dims {:?} do not match {c_out} output channels",
                    self.slots[b].dims
                )));
            }
        }
        let out_dim = |n_in: usize, k: usize, p: usize, st: usize| -> Result<usize> {
            let padded = n_in + 2 * p;
            if padded < k {
                return Err(Error::DimMismatch(format!(
                    "conv3d kernel {k} larger than padded input {padded}"
                )));
            }
            Ok((padded - k) / st + 1)
        };
        let out_shape = Shape::new(
            c_out,
            out_dim(s.t, k[0], pad[0], stride[0])?,
            out_dim(s.rows, k[1], pad[1], stride[1])?,
            out_dim(s.cols, k[2], pad[2], stride[2])?,
        );
        let meta = ConvMeta {
            w: w_slot,
            b: b_slot,
            c_out,
            c_in,
            kernel: k,
            stride,
            pad,
        };
        let value = conv3d_forward(
            &self.nodes[x].value,
            s,
            out_shape,
            &self.slots[w_slot].value,
            b_slot.map(|b| self.slots[b].value.as_slice()),
            &meta,
        );
        Ok(self.push(out_shape, value, Op::Conv3d(x, meta), true))
    }

    /// Adjoint of the strided correlation: kernel dims
    /// [c_in, c_out, kt, kh, kw], kernel size equal to the stride per axis,
    /// so the output is the input scaled up by the stride exactly.
    pub fn conv_transpose3d(
        &mut self,
        x: NodeId,
        w_slot: SlotId,
        stride: [usize; 3],
    ) -> Result<NodeId> {
        let s = self.nodes[x].shape;
        let wd = &self.slots[w_slot].dims;
        if wd.len() != 5 {
            return Err(Error::DimMismatch(format!(
                "conv_transpose3d kernel must be rank 5, got {wd:?}"
            )));
        }
        let (c_in, c_out, k) = (wd[0], wd[1], [wd[2], wd[3], wd[4]]);
        if c_in != s.channels {
            return Err(Error::DimMismatch(format!(
                "conv_transpose3d: input has {} channels, kernel expects {c_in}",
                s.channels
            )));
        }
        if k != stride {
            return Err(Error::DimMismatch(format!(
                "conv_transpose3d supports kernel == stride, got k {k:?}, stride {stride:?}"
            )));
        }
        let out_shape = Shape::new(
            c_out,
            s.t * stride[0],
            s.rows * stride[1],
            s.cols * stride[2],
        );
        let meta = ConvMeta {
            w: w_slot,
            b: None,
            c_out,
            c_in,
            kernel: k,
            stride,
            pad: [0, 0, 0],
        };
        let value = conv_transpose3d_forward(
            &self.nodes[x].value,
            s,
            out_shape,
            &self.slots[w_slot].value,
            &meta,
        );
        Ok(self.push(out_shape, value, Op::ConvTranspose3d(x, meta), true))
    }

    /// Reverse sweep from a scalar loss node, seeding with `seed` (use 1.0,
    /// or 1/batch for pre-scaled batch averaging).
    pub fn backward(&self, loss: NodeId, seed: f64) -> Result<Gradients> {
        if self.nodes[loss].shape.len() != 1 {
            return Err(Error::InvalidValue(
                "backward requires a scalar loss node".into(),
            ));
        }
        if matches!(self.nodes[loss].op, Op::Input) {
            return Err(Error::InvalidValue(
                "backward on a value produced by no taped op".into(),
            ));
        }
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut slot_grads: Vec<Vec<f64>> = self
            .slots
            .iter()
            .map(|s| vec![0.0; s.value.len()])
            .collect();
        node_grads[loss] = Some(vec![seed]);

        for id in (0..=loss).rev() {
            let Some(grad) = node_grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                node_grads[id] = Some(grad);
                continue;
            }
            let add_to = |grads: &mut Vec<Option<Vec<f64>>>, parent: NodeId, f: &mut dyn FnMut(&mut [f64])| {
                if self.nodes[parent].needs_grad {
                    let slot = grads[parent]
                        .get_or_insert_with(|| vec![0.0; self.nodes[parent].shape.len()]);
                    f(slot);
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Add(a, b) => {
                    for &p in &[*a, *b] {
                        add_to(&mut node_grads, p, &mut |dst| {
                            for (d, g) in dst.iter_mut().zip(&grad) {
                                *d += g;
                            }
                        });
                    }
                }
                Op::Sub(a, b) => {
                    add_to(&mut node_grads, *a, &mut |dst| {
                        for (d, g) in dst.iter_mut().zip(&grad) {
                            *d += g;
                        }
                    });
                    add_to(&mut node_grads, *b, &mut |dst| {
                        for (d, g) in dst.iter_mut().zip(&grad) {
                            *d -= g;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    add_to(&mut node_grads, *a, &mut |dst| {
                        for i in 0..dst.len() {
                            dst[i] += grad[i] * vb[i];
                        }
                    });
                    add_to(&mut node_grads, *b, &mut |dst| {
                        for i in 0..dst.len() {
                            dst[i] += grad[i] * va[i];
                        }
                    });
                }
                Op::AddScalar(a, _) => {
                    add_to(&mut node_grads, *a, &mut |dst| {
                        for (d, g) in dst.iter_mut().zip(&grad) {
                            *d += g;
                        }
                    });
                }
                Op::MulScalar(a, c) => {
                    add_to(&mut node_grads, *a, &mut |dst| {
                        for (d, g) in dst.iter_mut().zip(&grad) {
                            *d += g * c;
                        }
                    });
                }
                Op::Softplus(a) => {
                    let va = &self.nodes[*a].value;
                    add_to(&mut node_grads, *a, &mut |dst| {
                        for i in 0..dst.len() {
                            dst[i] += grad[i] * logistic(va[i]);
                        }
                    });
                }
                Op::LogFloor(a, eps) => {
                    let va = &self.nodes[*a].value;
                    add_to(&mut node_grads, *a, &mut |dst| {
                        for i in 0..dst.len() {
                            if va[i] > *eps {
                                dst[i] += grad[i] / va[i];
                            }
                        }
                    });
                }
                Op::NormalizeT(a) => {
                    let s = self.nodes[*a].shape;
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    add_to(&mut node_grads, *a, &mut |dst| {
                        for p in 0..s.len() / s.t {
                            let o = p * s.t;
                            let sum: f64 = x[o..o + s.t].iter().sum();
                            let dot: f64 =
                                (0..s.t).map(|t| grad[o + t] * y[o + t]).sum();
                            for t in 0..s.t {
                                dst[o + t] += (grad[o + t] - dot) / sum;
                            }
                        }
                    });
                }
                Op::SumAll(a) => {
                    let g = grad[0];
                    add_to(&mut node_grads, *a, &mut |dst| {
                        for d in dst.iter_mut() {
                            *d += g;
                        }
                    });
                }
                Op::BlockMean(a, factors) => {
                    let s_in = self.nodes[*a].shape;
                    let s_out = node.shape;
                    let [ft, fr, fc] = *factors;
                    let inv = 1.0 / (ft * fr * fc) as f64;
                    add_to(&mut node_grads, *a, &mut |dst| {
                        for ch in 0..s_out.channels {
                            for r in 0..s_out.rows {
                                for c in 0..s_out.cols {
                                    let src = s_out.hist(ch, r, c);
                                    for dr in 0..fr {
                                        for dc in 0..fc {
                                            let base =
                                                s_in.hist(ch, r * fr + dr, c * fc + dc);
                                            for t in 0..s_out.t {
                                                let g = grad[src + t] * inv;
                                                for dt in 0..ft {
                                                    dst[base + t * ft + dt] += g;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Transform(a, g) => {
                    let s = node.shape;
                    let inverse = g.inverse(s.t);
                    let back = permute_transform(&grad, s, &inverse);
                    add_to(&mut node_grads, *a, &mut |dst| {
                        for (d, g) in dst.iter_mut().zip(&back) {
                            *d += g;
                        }
                    });
                }
                Op::Conv3d(x, meta) => {
                    let s_in = self.nodes[*x].shape;
                    let s_out = node.shape;
                    conv3d_backward_w(
                        &self.nodes[*x].value,
                        s_in,
                        &grad,
                        s_out,
                        &mut slot_grads[meta.w],
                        meta,
                    );
                    if let Some(b) = meta.b {
                        let per_ch = s_out.len() / s_out.channels;
                        for ch in 0..s_out.channels {
                            slot_grads[b][ch] +=
                                grad[ch * per_ch..(ch + 1) * per_ch].iter().sum::<f64>();
                        }
                    }
                    let w = &self.slots[meta.w].value;
                    add_to(&mut node_grads, *x, &mut |dst| {
                        conv3d_backward_x(dst, s_in, &grad, s_out, w, meta);
                    });
                }
                Op::ConvTranspose3d(x, meta) => {
                    let s_in = self.nodes[*x].shape;
                    let s_out = node.shape;
                    conv_transpose3d_backward_w(
                        &self.nodes[*x].value,
                        s_in,
                        &grad,
                        s_out,
                        &mut slot_grads[meta.w],
                        meta,
                    );
                    let w = &self.slots[meta.w].value;
                    add_to(&mut node_grads, *x, &mut |dst| {
                        conv_transpose3d_backward_x(dst, s_in, &grad, s_out, w, meta);
                    });
                }
            }
            // keep the loss-node and requested grads retrievable
            node_grads[id] = Some(grad);
        }
        Ok(Gradients {
            node_grads,
            slot_grads,
            slot_keys: self.slots.iter().map(|s| s.key).collect(),
        })
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_transform(x: &[f64], s: Shape, g: &TransformSpec) -> Vec<f64> {
    let side = s.rows;
    let q = g.quarter_turns % 4;
    let shift = g.shift_bins % s.t;
    let mut out = vec![0.0f64; x.len()];
    for ch in 0..s.channels {
        for r in 0..side {
            for c in 0..side {
                let (mut dr, mut dc) = (r, c);
                for _ in 0..q {
                    let (nr, nc) = (dc, side - 1 - dr);
                    dr = nr;
                    dc = nc;
                }
                let src = s.hist(ch, r, c);
                let dst = s.hist(ch, dr, dc);
                for t in 0..s.t {
                    out[dst + (t + shift) % s.t] = x[src + t];
                }
            }
        }
    }
    out
}

impl ConvMeta {
    #[inline]
    fn first_second(&self, transposed: bool) -> (usize, usize) {
        if transposed {
            (self.c_in, self.c_out)
        } else {
            (self.c_out, self.c_in)
        }
    }
}

fn conv3d_forward(
    x: &[f64],
    s_in: Shape,
    s_out: Shape,
    w: &[f64],
    bias: Option<&[f64]>,
    meta: &ConvMeta,
) -> Vec<f64> {
    let mut out = vec![0.0f64; s_out.len()];
    if let Some(b) = bias {
        let per_ch = s_out.len() / s_out.channels;
        for ch in 0..s_out.channels {
            out[ch * per_ch..(ch + 1) * per_ch].fill(b[ch]);
        }
    }
    let [knt, knh, knw] = meta.kernel;
    let [st, sr, sc] = meta.stride;
    let [pt, pr, pc] = meta.pad;
    for co in 0..meta.c_out {
        for ci in 0..meta.c_in {
            for kh in 0..knh {
                let (r_lo, r_hi) = conv_axis_range(s_in.rows, s_out.rows, kh, pr, sr);
                if r_lo > r_hi {
                    continue;
                }
                for kw in 0..knw {
                    let (c_lo, c_hi) = conv_axis_range(s_in.cols, s_out.cols, kw, pc, sc);
                    if c_lo > c_hi {
                        continue;
                    }
                    for kt in 0..knt {
                        let (t_lo, t_hi) = conv_axis_range(s_in.t, s_out.t, kt, pt, st);
                        if t_lo > t_hi {
                            continue;
                        }
                        let wv = w[kernel_flat(meta, false, co, ci, kt, kh, kw)];
                        if wv == 0.0 {
                            continue;
                        }
                        for ro in r_lo..=r_hi {
                            let ri = ro * sr + kh - pr;
                            for col in c_lo..=c_hi {
                                let cin = col * sc + kw - pc;
                                let src = s_in.hist(ci, ri, cin) + kt;
                                let dst = s_out.hist(co, ro, col);
                                if st == 1 {
                                    let x_run = &x[src + t_lo - pt..];
                                    let o_run = &mut out[dst + t_lo..dst + t_hi + 1];
                                    for (o, xv) in o_run.iter_mut().zip(x_run) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for to in t_lo..=t_hi {
                                        out[dst + to] += wv * x[src + to * st - pt];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d_backward_x(
    gx: &mut [f64],
    s_in: Shape,
    gout: &[f64],
    s_out: Shape,
    w: &[f64],
    meta: &ConvMeta,
) {
    let [knt, knh, knw] = meta.kernel;
    let [st, sr, sc] = meta.stride;
    let [pt, pr, pc] = meta.pad;
    for co in 0..meta.c_out {
        for ci in 0..meta.c_in {
            for kh in 0..knh {
                let (r_lo, r_hi) = conv_axis_range(s_in.rows, s_out.rows, kh, pr, sr);
                if r_lo > r_hi {
                    continue;
                }
                for kw in 0..knw {
                    let (c_lo, c_hi) = conv_axis_range(s_in.cols, s_out.cols, kw, pc, sc);
                    if c_lo > c_hi {
                        continue;
                    }
                    for kt in 0..knt {
                        let (t_lo, t_hi) = conv_axis_range(s_in.t, s_out.t, kt, pt, st);
                        if t_lo > t_hi {
                            continue;
                        }
                        let wv = w[kernel_flat(meta, false, co, ci, kt, kh, kw)];
                        if wv == 0.0 {
                            continue;
                        }
                        let n = t_hi - t_lo + 1;
                        for ro in r_lo..=r_hi {
                            let ri = ro * sr + kh - pr;
                            for col in c_lo..=c_hi {
                                let cin = col * sc + kw - pc;
                                let src = s_in.hist(ci, ri, cin) + kt;
                                let dst = s_out.hist(co, ro, col);
                                if st == 1 {
                                    let g_run = &gout[dst + t_lo..dst + t_lo + n];
                                    let x_run = &mut gx[src + t_lo - pt..src + t_lo - pt + n];
                                    for (xv, g) in x_run.iter_mut().zip(g_run) {
                                        *xv += wv * g;
                                    }
                                } else {
                                    for to in t_lo..=t_hi {
                                        gx[src + to * st - pt] += wv * gout[dst + to];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_backward_w(
    x: &[f64],
    s_in: Shape,
    gout: &[f64],
    s_out: Shape,
    gw: &mut [f64],
    meta: &ConvMeta,
) {
    let [knt, knh, knw] = meta.kernel;
    let [st, sr, sc] = meta.stride;
    let [pt, pr, pc] = meta.pad;
    for co in 0..meta.c_out {
        for ci in 0..meta.c_in {
            for kh in 0..knh {
                let (r_lo, r_hi) = conv_axis_range(s_in.rows, s_out.rows, kh, pr, sr);
                if r_lo > r_hi {
                    continue;
                }
                for kw in 0..knw {
                    let (c_lo, c_hi) = conv_axis_range(s_in.cols, s_out.cols, kw, pc, sc);
                    if c_lo > c_hi {
                        continue;
                    }
                    for kt in 0..knt {
                        let (t_lo, t_hi) = conv_axis_range(s_in.t, s_out.t, kt, pt, st);
                        if t_lo > t_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        let n = t_hi - t_lo + 1;
                        for ro in r_lo..=r_hi {
                            let ri = ro * sr + kh - pr;
                            for col in c_lo..=c_hi {
                                let cin = col * sc + kw - pc;
                                let src = s_in.hist(ci, ri, cin) + kt;
                                let dst = s_out.hist(co, ro, col);
                                if st == 1 {
                                    let x_run = &x[src + t_lo - pt..src + t_lo - pt + n];
                                    let g_run = &gout[dst + t_lo..dst + t_lo + n];
                                    acc += x_run
                                        .iter()
                                        .zip(g_run)
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                } else {
                                    for to in t_lo..=t_hi {
                                        acc += x[src + to * st - pt] * gout[dst + to];
                                    }
                                }
                            }
                        }
                        gw[kernel_flat(meta, false, co, ci, kt, kh, kw)] += acc;
                    }
                }
            }
        }
    }
}

fn conv_transpose3d_forward(
    x: &[f64],
    s_in: Shape,
    s_out: Shape,
    w: &[f64],
    meta: &ConvMeta,
) -> Vec<f64> {
    let mut out = vec![0.0f64; s_out.len()];
    let [knt, knh, knw] = meta.kernel;
    let [st, sr, sc] = meta.stride;
    for ci in 0..meta.c_in {
        for co in 0..meta.c_out {
            for kh in 0..knh {
                for kw in 0..knw {
                    for kt in 0..knt {
                        let wv = w[kernel_flat(meta, true, ci, co, kt, kh, kw)];
                        if wv == 0.0 {
                            continue;
                        }
                        for ri in 0..s_in.rows {
                            let ro = ri * sr + kh;
                            for col in 0..s_in.cols {
                                let cout = col * sc + kw;
                                let src = s_in.hist(ci, ri, col);
                                let dst = s_out.hist(co, ro, cout) + kt;
                                let o_run = &mut out[dst..=dst + (s_in.t - 1) * st];
                                let x_run = &x[src..src + s_in.t];
                                for (o, &xv) in o_run.iter_mut().step_by(st).zip(x_run) {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_transpose3d_backward_x(
    gx: &mut [f64],
    s_in: Shape,
    gout: &[f64],
    s_out: Shape,
    w: &[f64],
    meta: &ConvMeta,
) {
    let [knt, knh, knw] = meta.kernel;
    let [st, sr, sc] = meta.stride;
    for ci in 0..meta.c_in {
        for co in 0..meta.c_out {
            for kh in 0..knh {
                for kw in 0..knw {
                    for kt in 0..knt {
                        let wv = w[kernel_flat(meta, true, ci, co, kt, kh, kw)];
                        if wv == 0.0 {
                            continue;
                        }
                        for ri in 0..s_in.rows {
                            let ro = ri * sr + kh;
                            for col in 0..s_in.cols {
                                let cout = col * sc + kw;
                                let src = s_in.hist(ci, ri, col);
                                let dst = s_out.hist(co, ro, cout) + kt;
                                let g_run = &gout[dst..=dst + (s_in.t - 1) * st];
                                let x_run = &mut gx[src..src + s_in.t];
                                for (xv, g) in x_run.iter_mut().zip(g_run.iter().step_by(st)) {
                                    *xv += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_transpose3d_backward_w(
    x: &[f64],
    s_in: Shape,
    gout: &[f64],
    s_out: Shape,
    gw: &mut [f64],
    meta: &ConvMeta,
) {
    let [knt, knh, knw] = meta.kernel;
    let [st, sr, sc] = meta.stride;
    for ci in 0..meta.c_in {
        for co in 0..meta.c_out {
            for kh in 0..knh {
                for kw in 0..knw {
                    for kt in 0..knt {
                        let mut acc = 0.0;
                        for ri in 0..s_in.rows {
                            let ro = ri * sr + kh;
                            for col in 0..s_in.cols {
                                let cout = col * sc + kw;
                                let src = s_in.hist(ci, ri, col);
                                let dst = s_out.hist(co, ro, cout) + kt;
                                let g_run = &gout[dst..=dst + (s_in.t - 1) * st];
                                let x_run = &x[src..src + s_in.t];
                                acc += x_run
                                    .iter()
                                    .zip(g_run.iter().step_by(st))
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                        gw[kernel_flat(meta, true, ci, co, kt, kh, kw)] += acc;
                    }
                }
            }
        }
    }
}

/// Flat kernel index shared by both layouts: conv keeps [c_out, c_in, k...],
/// transposed conv keeps [c_in, c_out, k...]; in both, `a` is the first axis.
#[inline]
fn kernel_flat(meta: &ConvMeta, transposed: bool, a: usize, b: usize, kt: usize, kh: usize, kw: usize) -> usize {
    let (_, second) = meta.first_second(transposed);
    let [knt, knh, knw] = meta.kernel;
    (((a * second + b) * knt + kt) * knh + kh) * knw + kw
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::rng::Rng;
    use approx::assert_relative_eq;

    fn random_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(lo, hi)).collect()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let shape = Shape::new(1, 3, 2, 2);
        let x = g.watched_input(shape, (1..=12).map(|v| v as f64).collect());
        let s = g.sum_all(x);
        let grads = g.backward(s, 1.0).unwrap();
        assert!(grads.node(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut g = Graph::new();
        let shape = Shape::new(1, 2, 2, 1);
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = g.watched_input(shape, data.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        let grads = g.backward(s, 1.0).unwrap();
        for (got, want) in grads.node(x).unwrap().iter().zip(&data) {
            assert_relative_eq!(*got, 2.0 * want, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_rejects_untaped_and_nonscalar() {
        let mut g = Graph::new();
        let x = g.input(Shape::scalar(), vec![1.0]);
        assert!(g.backward(x, 1.0).is_err());
        let y = g.input(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]);
        let z = g.mul_scalar(y, 2.0);
        assert!(g.backward(z, 1.0).is_err());
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut g = Graph::new();
        let shape = Shape::new(1, 4, 4, 4);
        let mut rng = Rng::new(3);
        let data = random_vec(&mut rng, shape.len(), 0.0, 5.0);
        let x = g.input(shape, data.clone());
        let mut w = vec![0.0; 27];
        w[13] = 1.0; // center of the 3x3x3 kernel
        let ws = g.param_slot(0, &[1, 1, 3, 3, 3], &w);
        let bs = g.param_slot(1, &[1], &[0.0]);
        let y = g.conv3d(x, ws, Some(bs), [1, 1, 1], [1, 1, 1]).unwrap();
        for (a, b) in g.value(y).iter().zip(&data) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn conv_all_ones_kernel_interior_sum() {
        // all-ones 3x3x3 kernel on a constant cube: interior voxels see 27c
        let mut g = Graph::new();
        let shape = Shape::new(1, 5, 5, 5);
        let c = 1.5;
        let x = g.input(shape, vec![c; shape.len()]);
        let ws = g.param_slot(0, &[1, 1, 3, 3, 3], &vec![1.0; 27]);
        let y = g.conv3d(x, ws, None, [1, 1, 1], [1, 1, 1]).unwrap();
        let sy = g.shape(y);
        assert_eq!(sy, shape);
        let interior = sy.idx(0, 2, 2, 2);
        assert_relative_eq!(g.value(y)[interior], 27.0 * c, epsilon = 1e-12);
    }

    #[test]
    fn conv_transpose_unit_kernel_is_nearest_neighbor_copy() {
        // k = 2, stride = 2 partitions the output; an all-ones kernel copies
        // each input voxel into its whole block.
        let mut g = Graph::new();
        let shape = Shape::new(1, 2, 2, 2);
        let data: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        let x = g.input(shape, data);
        let ws = g.param_slot(0, &[1, 1, 2, 2, 2], &vec![1.0; 8]);
        let y = g.conv_transpose3d(x, ws, [2, 2, 2]).unwrap();
        let sy = g.shape(y);
        assert_eq!(sy, Shape::new(1, 4, 4, 4));
        for t in 0..4 {
            for r in 0..4 {
                for c in 0..4 {
                    let src = shape.idx(0, t / 2, r / 2, c / 2);
                    let dst = sy.idx(0, t, r, c);
                    let want = (src + 1) as f64;
                    assert_relative_eq!(g.value(y)[dst], want, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_strided_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> with the shared kernel
        let mut rng = Rng::new(9);
        let s_in = Shape::new(2, 4, 4, 4);
        let s_out = Shape::new(3, 2, 2, 2);
        let w = random_vec(&mut rng, 3 * 2 * 8, -1.0, 1.0);
        let x = random_vec(&mut rng, s_in.len(), -1.0, 1.0);
        let y = random_vec(&mut rng, s_out.len(), -1.0, 1.0);

        let mut g = Graph::new();
        let xn = g.input(s_in, x.clone());
        let ws = g.param_slot(0, &[3, 2, 2, 2, 2], &w);
        let ax = g.conv3d(xn, ws, None, [2, 2, 2], [0, 0, 0]).unwrap();
        let lhs: f64 = g.value(ax).iter().zip(&y).map(|(a, b)| a * b).sum();

        let mut g2 = Graph::new();
        let yn = g2.input(s_out, y);
        let ws2 = g2.param_slot(0, &[3, 2, 2, 2, 2], &w);
        let aty = g2.conv_transpose3d(yn, ws2, [2, 2, 2]).unwrap();
        let rhs: f64 = g2.value(aty).iter().zip(&x).map(|(a, b)| a * b).sum();

        assert_relative_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn softplus_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.input(Shape::new(1, 3, 1, 1), vec![0.0, 100.0, -40.0]);
        let y = g.softplus(x);
        assert_relative_eq!(g.value(y)[0], std::f64::consts::LN_2, epsilon = 1e-12);
        assert_relative_eq!(g.value(y)[1], 100.0, epsilon = 1e-12);
        assert!(g.value(y)[2] > 0.0);

        let shape = Shape::new(1, 4, 2, 2);
        let mut rng = Rng::new(12);
        let x0 = random_vec(&mut rng, shape.len(), -3.0, 3.0);
        let err = fd_check_input(
            |g, x| {
                let y = g.softplus(x);
                weighted_sum(g, y, 1)
            },
            shape,
            &x0,
            1e-5,
        );
        assert!(err < 1e-7, "softplus fd err {err}");
    }

    #[test]
    fn conv3d_gradient_matches_finite_differences() {
        // gradient w.r.t. input on a random 1x6x6x6 tensor
        let mut rng = Rng::new(5);
        let shape = Shape::new(1, 6, 6, 6);
        let x0 = random_vec(&mut rng, shape.len(), -1.0, 1.0);
        let w: Vec<f64> = random_vec(&mut rng, 27, -0.5, 0.5);
        let err = fd_check_input(
            |g, x| {
                let ws = g.param_slot(0, &[1, 1, 3, 3, 3], &w);
                let y = g.conv3d(x, ws, None, [1, 1, 1], [1, 1, 1]).unwrap();
                weighted_sum(g, y, 2)
            },
            shape,
            &x0,
            1e-5,
        );
        assert!(err < 1e-8, "conv3d input fd err {err}");

        // gradient w.r.t. the kernel and bias
        let x_fixed = random_vec(&mut rng, shape.len(), -1.0, 1.0);
        let w0 = random_vec(&mut rng, 2 * 27, -0.5, 0.5);
        let err = fd_check_slot(
            |g, ws| {
                let x = g.input(shape, x_fixed.clone());
                let y = g.conv3d(x, ws, None, [1, 1, 1], [1, 1, 1]).unwrap();
                weighted_sum(g, y, 3)
            },
            7,
            &[2, 1, 3, 3, 3],
            &w0,
            1e-5,
        );
        assert!(err < 1e-8, "conv3d weight fd err {err}");
    }

    #[test]
    fn conv_transpose_gradient_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let shape = Shape::new(2, 3, 3, 3);
        let x0 = random_vec(&mut rng, shape.len(), -1.0, 1.0);
        let w: Vec<f64> = random_vec(&mut rng, 2 * 2 * 8, -0.5, 0.5);
        let err = fd_check_input(
            |g, x| {
                let ws = g.param_slot(0, &[2, 2, 2, 2, 2], &w);
                let y = g.conv_transpose3d(x, ws, [2, 2, 2]).unwrap();
                weighted_sum(g, y, 4)
            },
            shape,
            &x0,
            1e-5,
        );
        assert!(err < 1e-8, "conv_transpose input fd err {err}");

        let x_fixed = random_vec(&mut rng, shape.len(), -1.0, 1.0);
        let w0 = random_vec(&mut rng, 2 * 2 * 8, -0.5, 0.5);
        let err = fd_check_slot(
            |g, ws| {
                let x = g.input(shape, x_fixed.clone());
                let y = g.conv_transpose3d(x, ws, [2, 2, 2]).unwrap();
                weighted_sum(g, y, 5)
            },
            9,
            &[2, 2, 2, 2, 2],
            &w0,
            1e-5,
        );
        assert!(err < 1e-8, "conv_transpose weight fd err {err}");
    }

    #[test]
    fn block_mean_and_transform_and_normalize_gradients() {
        let mut rng = Rng::new(7);
        let shape = Shape::new(1, 4, 4, 4);
        let x0 = random_vec(&mut rng, shape.len(), 0.5, 3.0);
        let err = fd_check_input(
            |g, x| {
                let y = g.block_mean(x, [2, 2, 2]).unwrap();
                weighted_sum(g, y, 6)
            },
            shape,
            &x0,
            1e-5,
        );
        assert!(err < 1e-9, "block_mean fd err {err}");

        let g_spec = crate::operators::TransformSpec::new(1, 3);
        let err = fd_check_input(
            |g, x| {
                let y = g.transform(x, g_spec).unwrap();
                weighted_sum(g, y, 7)
            },
            shape,
            &x0,
            1e-5,
        );
        assert!(err < 1e-9, "transform fd err {err}");

        let err = fd_check_input(
            |g, x| {
                let y = g.normalize_t(x).unwrap();
                weighted_sum(g, y, 8)
            },
            shape,
            &x0,
            1e-6,
        );
        assert!(err < 1e-7, "normalize_t fd err {err}");

        let err = fd_check_input(
            |g, x| {
                let y = g.log_floor(x, 1e-12);
                weighted_sum(g, y, 9)
            },
            shape,
            &x0,
            1e-6,
        );
        assert!(err < 1e-7, "log_floor fd err {err}");
    }

    #[test]
    fn shared_slots_accumulate_over_two_passes() {
        // loss = sum(conv(x1; w)) + sum(conv(x2; w)): slot gradient must be
        // the sum of both passes' contributions.
        let mut rng = Rng::new(11);
        let shape = Shape::new(1, 3, 3, 3);
        let x1 = random_vec(&mut rng, shape.len(), -1.0, 1.0);
        let x2 = random_vec(&mut rng, shape.len(), -1.0, 1.0);
        let w0 = random_vec(&mut rng, 27, -0.5, 0.5);
        let err = fd_check_slot(
            |g, ws| {
                let a = g.input(shape, x1.clone());
                let b = g.input(shape, x2.clone());
                let ya = g.conv3d(a, ws, None, [1, 1, 1], [1, 1, 1]).unwrap();
                let yb = g.conv3d(b, ws, None, [1, 1, 1], [1, 1, 1]).unwrap();
                let sa = g.sum_all(ya);
                let sb = g.sum_all(yb);
                g.add(sa, sb).unwrap()
            },
            3,
            &[1, 1, 3, 3, 3],
            &w0,
            1e-5,
        );
        assert!(err < 1e-8, "shared slot fd err {err}");
    }
}

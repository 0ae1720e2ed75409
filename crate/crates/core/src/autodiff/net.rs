//! The volumetric reconstruction network: same-size feature convolutions
//! followed by one up-projection stage per factor-2 axis group, each stage
//! refined by a back-projection residual, and a strictly positive softplus
//! output head. Maps an LR cube to an HR cube scaled by the configured
//! factors exactly.

use super::{Graph, NodeId, Shape};
use crate::cube::PhotonCountingCube;
use crate::error::{Error, Result};
use crate::operators::ScaleFactor;
use crate::rng::{Rng, StreamPurpose};
use std::io::{Read, Write};
use std::path::Path;

/// Named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Parameter {
    fn new(name: impl Into<String>, dims: Vec<usize>, value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            dims,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that maps an LR input node to an HR output node inside a graph.
/// Lets training, losses, and tests swap the learned network for exact
/// reference operators.
pub trait Reconstructor {
    fn forward_graph(&self, g: &mut Graph, lr_input: NodeId) -> Result<NodeId>;
    fn scale(&self) -> ScaleFactor;
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Feature channel width.
    pub width: usize,
    /// Number of same-size feature convolutions before up-projection.
    pub feat_layers: usize,
    pub scale: ScaleFactor,
    pub init_seed: u64,
}

impl NetConfig {
    pub fn new(scale: ScaleFactor, init_seed: u64) -> Self {
        Self {
            width: 16,
            feat_layers: 2,
            scale,
            init_seed,
        }
    }

    /// Per-stage axis doubling plan. Each scale component must be a power of
    /// two; stage i doubles every axis that still has factors left.
    fn stages(&self) -> Result<Vec<[usize; 3]>> {
        let mut rem = [
            self.scale.t_scale,
            self.scale.row_scale,
            self.scale.col_scale,
        ];
        for (axis, r) in rem.iter().enumerate() {
            if !r.is_power_of_two() {
                return Err(Error::Config(format!(
                    "net scale component {r} on axis {axis} is not a power of two"
                )));
            }
        }
        let mut stages = Vec::new();
        while rem.iter().any(|&r| r > 1) {
            let mut step = [1usize; 3];
            for (axis, r) in rem.iter_mut().enumerate() {
                if *r > 1 {
                    step[axis] = 2;
                    *r /= 2;
                }
            }
            stages.push(step);
        }
        Ok(stages)
    }
}

/// The learned LR -> HR mapping.
#[derive(Debug, Clone)]
pub struct ReconstructionNet {
    config: NetConfig,
    params: Vec<Parameter>,
}

fn fan_in_uniform(rng: &mut Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.uniform(-limit, limit)).collect()
}

impl ReconstructionNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        let stages = config.stages()?;
        let c = config.width;
        if c == 0 || config.feat_layers == 0 {
            return Err(Error::Config("net width and feat_layers must be >= 1".into()));
        }
        let mut rng = Rng::substream(config.init_seed, StreamPurpose::NetInit, 0, 0);
        let mut params = Vec::new();
        let push_conv = |params: &mut Vec<Parameter>,
                             rng: &mut Rng,
                             name: &str,
                             c_out: usize,
                             c_in: usize,
                             k: [usize; 3],
                             bias: bool| {
            let len = c_out * c_in * k[0] * k[1] * k[2];
            let fan_in = c_in * k[0] * k[1] * k[2];
            params.push(Parameter::new(
                format!("{name}.w"),
                vec![c_out, c_in, k[0], k[1], k[2]],
                fan_in_uniform(rng, len, fan_in),
            ));
            if bias {
                params.push(Parameter::new(
                    format!("{name}.b"),
                    vec![c_out],
                    vec![0.0; c_out],
                ));
            }
        };
        for i in 0..config.feat_layers {
            let c_in = if i == 0 { 1 } else { c };
            push_conv(&mut params, &mut rng, &format!("feat{i}"), c, c_in, [3, 3, 3], true);
        }
        for (i, step) in stages.iter().enumerate() {
            // transposed kernels are [c_in, c_out, k...]; same extent here
            push_conv(&mut params, &mut rng, &format!("up{i}"), c, c, *step, false);
            push_conv(&mut params, &mut rng, &format!("down{i}"), c, c, *step, false);
            push_conv(&mut params, &mut rng, &format!("reup{i}"), c, c, *step, false);
        }
        push_conv(&mut params, &mut rng, "head", 1, c, [3, 3, 3], true);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Adds gradients computed by a backward sweep into the parameter
    /// accumulators. Slots registered by parameter-free reconstructors
    /// (reserved high keys) are skipped.
    pub fn accumulate_grads(&mut self, grads: &super::Gradients) {
        for (key, g) in grads.slots() {
            let Some(p) = self.params.get_mut(key as usize) else {
                continue;
            };
            debug_assert_eq!(p.grad.len(), g.len());
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
    }

    fn slot(&self, g: &mut Graph, index: usize) -> super::SlotId {
        let p = &self.params[index];
        g.param_slot(index as u64, &p.dims, &p.value)
    }

    fn find(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Value-only forward pass on a cube.
    pub fn forward_cube(&self, lr: &PhotonCountingCube) -> Result<PhotonCountingCube> {
        let mut g = Graph::new();
        let input = g.input_cube(lr);
        let out = self.forward_graph(&mut g, input)?;
        g.node_to_cube(out)
    }
}

impl Reconstructor for ReconstructionNet {
    fn forward_graph(&self, g: &mut Graph, lr_input: NodeId) -> Result<NodeId> {
        let s = g.shape(lr_input);
        if s.channels != 1 {
            return Err(Error::DimMismatch(format!(
                "network input must be one channel, got {}",
                s.channels
            )));
        }
        let mut x = lr_input;
        for i in 0..self.config.feat_layers {
            let w = self.slot(g, self.find(&format!("feat{i}.w")));
            let b = self.slot(g, self.find(&format!("feat{i}.b")));
            x = g.conv3d(x, w, Some(b), [1, 1, 1], [1, 1, 1])?;
            x = g.softplus(x);
        }
        for (i, step) in self.config.stages()?.iter().enumerate() {
            let up_w = self.slot(g, self.find(&format!("up{i}.w")));
            let down_w = self.slot(g, self.find(&format!("down{i}.w")));
            let reup_w = self.slot(g, self.find(&format!("reup{i}.w")));
            let up = g.conv_transpose3d(x, up_w, *step)?;
            let down = g.conv3d(up, down_w, None, *step, [0, 0, 0])?;
            let residual = g.sub(x, down)?;
            let reup = g.conv_transpose3d(residual, reup_w, *step)?;
            x = g.add(up, reup)?;
        }
        let w = self.slot(g, self.find("head.w"));
        let b = self.slot(g, self.find("head.b"));
        x = g.conv3d(x, w, Some(b), [1, 1, 1], [1, 1, 1])?;
        let out = g.softplus(x);
        let so = g.shape(out);
        let expect = Shape::new(
            1,
            s.t * self.config.scale.t_scale,
            s.rows * self.config.scale.row_scale,
            s.cols * self.config.scale.col_scale,
        );
        debug_assert_eq!(so, expect, "architecture must scale dims exactly");
        Ok(out)
    }

    fn scale(&self) -> ScaleFactor {
        self.config.scale
    }
}

/// Exact nearest-neighbor upsampler: every LR voxel is copied to its whole
/// scale block. A parameter-free reference reconstructor; block-mean
/// down-sampling composed after it is the identity, which makes it the
/// baseline for equivariance zero-case checks.
#[derive(Debug, Clone)]
pub struct NearestNeighborUpsampler {
    scale: ScaleFactor,
}

/// Slot keys at the top of the range are reserved for parameter-free
/// reference reconstructors so they can never collide with network indices.
const NN_SLOT_KEY: u64 = u64::MAX - 1;

impl NearestNeighborUpsampler {
    pub fn new(scale: ScaleFactor) -> Self {
        Self { scale }
    }
}

impl Reconstructor for NearestNeighborUpsampler {
    fn forward_graph(&self, g: &mut Graph, lr_input: NodeId) -> Result<NodeId> {
        let k = [
            self.scale.t_scale,
            self.scale.row_scale,
            self.scale.col_scale,
        ];
        let ones = vec![1.0; k[0] * k[1] * k[2]];
        let slot = g.param_slot(NN_SLOT_KEY, &[1, 1, k[0], k[1], k[2]], &ones);
        g.conv_transpose3d(lr_input, slot, k)
    }

    fn scale(&self) -> ScaleFactor {
        self.scale
    }
}

const SPNN_MAGIC: &[u8; 4] = b"SPNN";
const SPNN_VERSION: u16 = 1;

/// Writes all parameters in the SPNN checkpoint format: magic, version u16,
/// parameter count u32, then per parameter: name (u16 length + UTF-8), rank
/// u8, dims u32 each, values f64 LE. Bit-exact round trip.
pub fn save_checkpoint(net: &ReconstructionNet, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(SPNN_MAGIC);
    buf.extend_from_slice(&SPNN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for p in &net.params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.dims.len() as u8);
        for &d in &p.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads SPNN parameters into a freshly configured network. The parameter
/// list (names, ranks, dims) must match the architecture exactly.
pub fn load_checkpoint(config: NetConfig, path: &Path) -> Result<ReconstructionNet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::format(path, "truncated checkpoint"));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 4)? != SPNN_MAGIC {
        return Err(Error::format(path, "bad magic, expected SPNN"));
    }
    let version = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap());
    if version != SPNN_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mut net = ReconstructionNet::new(config)?;
    if count != net.params.len() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint has {count} parameters, architecture has {}",
                net.params.len()
            ),
        ));
    }
    for p in net.params.iter_mut() {
        let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut cur, name_len)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_string();
        if name != p.name {
            return Err(Error::format(
                path,
                format!("parameter order mismatch: file has '{name}', expected '{}'", p.name),
            ));
        }
        let rank = take(&mut cur, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
        }
        if dims != p.dims {
            return Err(Error::format(
                path,
                format!("parameter '{name}' dims {dims:?} do not match {:?}", p.dims),
            ));
        }
        let n: usize = dims.iter().product();
        let raw = take(&mut cur, n * 8)?;
        p.value = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        p.grad = vec![0.0; n];
    }
    if cur != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last parameter"));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::CubeDims;
    use crate::rng::Rng;

    fn small_config() -> NetConfig {
        NetConfig {
            width: 4,
            feat_layers: 2,
            scale: ScaleFactor::new(2, 2, 2).unwrap(),
            init_seed: 42,
        }
    }

    fn random_cube(dims: CubeDims, seed: u64) -> PhotonCountingCube {
        let mut rng = Rng::new(seed);
        PhotonCountingCube::new(dims, (0..dims.len()).map(|_| rng.uniform(0.0, 4.0)).collect())
            .unwrap()
    }

    #[test]
    fn output_dims_scale_exactly() {
        let net = ReconstructionNet::new(small_config()).unwrap();
        let lr = random_cube(CubeDims::new(4, 4, 4).unwrap(), 1);
        let hr = net.forward_cube(&lr).unwrap();
        assert_eq!(hr.dims(), CubeDims::new(8, 8, 8).unwrap());
    }

    #[test]
    fn output_strictly_positive_even_for_zero_input() {
        let net = ReconstructionNet::new(small_config()).unwrap();
        for cube in [
            PhotonCountingCube::zeros(CubeDims::new(4, 4, 4).unwrap()),
            random_cube(CubeDims::new(4, 4, 4).unwrap(), 2),
        ] {
            let hr = net.forward_cube(&cube).unwrap();
            let min = hr.data().iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > 0.0, "min output {min}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = ReconstructionNet::new(small_config()).unwrap();
        let lr = random_cube(CubeDims::new(4, 4, 4).unwrap(), 3);
        let a = net.forward_cube(&lr).unwrap();
        let b = net.forward_cube(&lr).unwrap();
        assert_eq!(a.data(), b.data());
        // same init seed gives the same parameters
        let net2 = ReconstructionNet::new(small_config()).unwrap();
        for (p, q) in net.params().iter().zip(net2.params()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn multi_stage_and_anisotropic_scales() {
        let cfg = NetConfig {
            width: 2,
            feat_layers: 1,
            scale: ScaleFactor::new(4, 2, 2).unwrap(),
            init_seed: 1,
        };
        let net = ReconstructionNet::new(cfg).unwrap();
        let lr = random_cube(CubeDims::new(4, 3, 3).unwrap(), 4);
        let hr = net.forward_cube(&lr).unwrap();
        assert_eq!(hr.dims(), CubeDims::new(16, 6, 6).unwrap());
        // non power of two is rejected
        let bad = NetConfig {
            scale: ScaleFactor::new(3, 2, 2).unwrap(),
            ..small_config()
        };
        assert!(ReconstructionNet::new(bad).is_err());
    }

    #[test]
    fn end_to_end_gradient_on_a_parameter_slice() {
        // central finite differences through the whole network on a few
        // coordinates of one kernel; 64-bit tolerance 1e-5
        let net = ReconstructionNet::new(small_config()).unwrap();
        let lr = random_cube(CubeDims::new(3, 3, 3).unwrap(), 5);
        let loss_of = |net: &ReconstructionNet| -> f64 {
            let mut g = Graph::new();
            let input = g.input_cube(&lr);
            let out = net.forward_graph(&mut g, input).unwrap();
            let sq = g.mul(out, out).unwrap();
            let s = g.sum_all(sq);
            g.scalar(s)
        };
        let mut g = Graph::new();
        let input = g.input_cube(&lr);
        let out = net.forward_graph(&mut g, input).unwrap();
        let sq = g.mul(out, out).unwrap();
        let s = g.sum_all(sq);
        let grads = g.backward(s, 1.0).unwrap();
        let mut net_mut = net.clone();
        net_mut.zero_grads();
        net_mut.accumulate_grads(&grads);

        let h = 1e-5;
        let param_idx = net.params().iter().position(|p| p.name == "feat1.w").unwrap();
        for coord in [0usize, 7, 19, 40] {
            let mut plus = net.clone();
            plus.params_mut()[param_idx].value[coord] += h;
            let mut minus = net.clone();
            minus.params_mut()[param_idx].value[coord] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let analytic = net_mut.params()[param_idx].grad[coord];
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-5,
                "coord {coord}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.spnn");
        let net = ReconstructionNet::new(small_config()).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(small_config(), &path).unwrap();
        for (p, q) in net.params().iter().zip(loaded.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.dims, q.dims);
            let a: Vec<u64> = p.value.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.value.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_rejects_mismatched_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.spnn");
        let net = ReconstructionNet::new(small_config()).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let other = NetConfig {
            width: 8,
            ..small_config()
        };
        assert!(load_checkpoint(other, &path).is_err());
    }

    #[test]
    fn nearest_neighbor_upsampler_round_trip() {
        // block mean after nearest-neighbor upsampling is the identity
        let scale = ScaleFactor::new(2, 2, 2).unwrap();
        let up = NearestNeighborUpsampler::new(scale);
        let lr = random_cube(CubeDims::new(3, 3, 3).unwrap(), 6);
        let mut g = Graph::new();
        let input = g.input_cube(&lr);
        let hr = up.forward_graph(&mut g, input).unwrap();
        let back = g.block_mean(hr, [2, 2, 2]).unwrap();
        for (a, b) in g.value(back).iter().zip(lr.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

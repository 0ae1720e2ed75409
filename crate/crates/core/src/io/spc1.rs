//! SPC1 cube container: magic "SPC1", version u16 LE, dtype u8 (0 = f64,
//! 1 = u32), dims T, S, S as u32 LE, payload in storage order LE, and a
//! trailing CRC32 of the payload. Round trips are bitwise.

use crate::cube::{CubeDims, PhotonCountingCube};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

const MAGIC: &[u8; 4] = b"SPC1";
const VERSION: u16 = 1;

fn crc_table() -> &'static [u32; 256] {
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, entry) in table.iter_mut().enumerate() {
            let mut crc = i as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 {
                    0xEDB8_8320 ^ (crc >> 1)
                } else {
                    crc >> 1
                };
            }
            *entry = crc;
        }
        table
    })
}

/// CRC-32 (IEEE 802.3, reflected).
pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc_table();
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// Writes the cube as f64 payload.
pub fn save_cube(cube: &PhotonCountingCube, path: &Path) -> Result<()> {
    let dims = cube.dims();
    let mut buf = Vec::with_capacity(16 + cube.data().len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(0u8); // dtype f64
    buf.extend_from_slice(&(dims.t_bins as u32).to_le_bytes());
    buf.extend_from_slice(&(dims.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(dims.cols as u32).to_le_bytes());
    let payload_start = buf.len();
    for &v in cube.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32(&buf[payload_start..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a cube, verifying magic, version, dims, and payload CRC.
pub fn load_cube(path: &Path) -> Result<PhotonCountingCube> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 21 {
        return Err(Error::format(path, "file too short for an SPC1 header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected SPC1"));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dtype = bytes[6];
    let t = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let rows = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[15..19].try_into().unwrap()) as usize;
    let dims = CubeDims::new(t, rows, cols)
        .map_err(|e| Error::format(path, format!("bad dims: {e}")))?;
    let elem_size = match dtype {
        0 => 8,
        1 => 4,
        other => return Err(Error::format(path, format!("unknown dtype code {other}"))),
    };
    let payload_len = dims.len() * elem_size;
    let expected_len = 19 + payload_len + 4;
    if bytes.len() != expected_len {
        return Err(Error::format(
            path,
            format!("expected {expected_len} bytes, found {}", bytes.len()),
        ));
    }
    let payload = &bytes[19..19 + payload_len];
    let stored_crc = u32::from_le_bytes(bytes[19 + payload_len..].try_into().unwrap());
    let actual_crc = crc32(payload);
    if stored_crc != actual_crc {
        return Err(Error::format(
            path,
            format!("CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"),
        ));
    }
    let data: Vec<f64> = match dtype {
        0 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        1 => payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => unreachable!(),
    };
    PhotonCountingCube::from_raw(dims, data)
}

//! Binary spectrogram files ("VSPG").
//!
//! Layout: magic `VSPG`, `u32` version, `u32` frames, `u32` bins, then
//! `f32` little-endian values in row-major order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const VSPG_MAGIC: &[u8; 4] = b"VSPG";
pub const VSPG_VERSION: u32 = 1;

pub fn encode_spectrogram(y: &Tensor) -> Result<Vec<u8>> {
    let (n, bins) = y.dims2()?;
    let mut out = Vec::with_capacity(16 + 4 * y.len());
    out.extend_from_slice(VSPG_MAGIC);
    for v in [VSPG_VERSION, n as u32, bins as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in y.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_spectrogram(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != VSPG_MAGIC {
        return Err(Error::Format("not a VSPG spectrogram file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VSPG_VERSION {
        return Err(Error::Format(format!("unsupported VSPG version {version}")));
    }
    let (n, bins) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != 4 * n * bins {
        return Err(Error::Format(format!(
            "VSPG header says {n}x{bins} but payload holds {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![n, bins], data)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_spectrogram(path: &Path, y: &Tensor) -> Result<()> {
    write_atomic(path, &encode_spectrogram(y)?)
}

pub fn read_spectrogram(path: &Path) -> Result<Tensor> {
    decode_spectrogram(&fs::read(path)?)
}

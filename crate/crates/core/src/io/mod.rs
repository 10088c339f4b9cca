//! Codec-free image and tensor file formats.

mod pnm;
mod raw;

use std::path::Path;

use acnet_numeric::Tensor;

use crate::error::{AcnetError, Result};

pub use pnm::{decode_pnm, encode_pnm};
pub(crate) use raw::{get_tensor_body, put_tensor_body, Reader};
pub use raw::{decode_raw_tensor, encode_raw_tensor, DType, RAW_MAGIC, RAW_VERSION};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AcnetError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| AcnetError::io(path, e))
}

/// Decodes an image as `[3, H, W]` in `[0, 1]`: PPM, PGM (replicated to
/// three channels) or an ATSR tensor shaped `[3, H, W]`, `[1, H, W]` or `[H, W]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let t = if bytes.starts_with(&RAW_MAGIC) {
        decode_raw_tensor(bytes)?
    } else {
        decode_pnm(bytes)?
    };
    let (c, h, w) = match *t.shape() {
        [h, w] => (1, h, w),
        [c @ (1 | 3), h, w] => (c, h, w),
        ref s => return Err(AcnetError::Data(format!("image tensor has unsupported shape {s:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(AcnetError::Data("image is empty".into()));
    }
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(AcnetError::Data(format!("pixel value {v} outside [0, 1]")));
    }
    let plane = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let p = i % plane;
        if c == 1 {
            t.data()[p]
        } else {
            t.data()[i]
        }
    }))
}

/// Reads an image file, naming the file in any decoding error.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    decode_image(&bytes).map_err(|e| match e {
        AcnetError::Data(msg) => AcnetError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

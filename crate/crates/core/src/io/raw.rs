//! "ATSR" raw tensor files: magic, version u32, dtype u32, ndim u32,
//! dims u64[], little-endian payload.

use acnet_numeric::Tensor;

use crate::error::{AcnetError, Result};

pub const RAW_MAGIC: [u8; 4] = *b"ATSR";
pub const RAW_VERSION: u32 = 1;

/// Element type codes shared by raw tensor files and checkpoint tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

impl DType {
    pub fn from_code(code: u32) -> Option<DType> {
        match code {
            0 => Some(DType::F64),
            1 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Appends `dtype, ndim, dims, payload` (f64) for `t`.
pub(crate) fn put_tensor_body(out: &mut Vec<u8>, t: &Tensor) {
    out.extend((DType::F64 as u32).to_le_bytes());
    out.extend((t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

/// Reads the `dtype, ndim, dims, payload` section written by
/// [`put_tensor_body`], describing any truncation or invalid header.
pub(crate) fn get_tensor_body(r: &mut Reader<'_>) -> std::result::Result<Tensor, String> {
    let code = r.u32().ok_or("truncated dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| format!("unknown dtype code {code}"))?;
    let ndim = r.u32().ok_or("truncated rank")? as usize;
    if ndim > 16 {
        return Err(format!("rank {ndim} is implausible"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = r.u64().ok_or("truncated dims")?;
        shape.push(usize::try_from(d).map_err(|_| "dimension overflows usize")?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or("element count overflows")?;
    let bytes = numel.checked_mul(dtype.size()).ok_or("payload size overflows")?;
    if bytes > r.remaining() {
        return Err(format!("payload needs {bytes} bytes, {} remain", r.remaining()));
    }
    let payload = r.take(bytes).unwrap();
    let data = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn encode_raw_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = RAW_MAGIC.to_vec();
    out.extend(RAW_VERSION.to_le_bytes());
    put_tensor_body(&mut out, t);
    out
}

pub fn decode_raw_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    if r.take(4) != Some(&RAW_MAGIC[..]) {
        return Err(AcnetError::Data("not an ATSR tensor file".into()));
    }
    match r.u32() {
        Some(RAW_VERSION) => {}
        Some(v) => return Err(AcnetError::Data(format!("unsupported ATSR version {v}"))),
        None => return Err(AcnetError::Data("truncated ATSR header".into())),
    }
    let t = get_tensor_body(&mut r).map_err(AcnetError::Data)?;
    if r.remaining() != 0 {
        return Err(AcnetError::Data(format!("{} trailing bytes after ATSR payload", r.remaining())));
    }
    Ok(t)
}

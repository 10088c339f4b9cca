//! Binary PPM (P6) and PGM (P5) images.

use acnet_numeric::Tensor;

use crate::error::{AcnetError, Result};

fn malformed(msg: impl Into<String>) -> AcnetError {
    AcnetError::Data(msg.into())
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(malformed("not a binary PPM/PGM file")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(malformed("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("invalid header field"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing whitespace after header"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(malformed(format!("unsupported geometry {width}x{height}, maxval {maxval}")));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

/// Decodes a P5/P6 image into `[C, H, W]` values in `[0, 1]` (C = 1 or 3).
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let wide = h.maxval > 255;
    let count = h.channels * h.width * h.height;
    let need = count * if wide { 2 } else { 1 };
    let payload = bytes
        .get(h.offset..h.offset + need)
        .ok_or_else(|| malformed(format!("expected {need} payload bytes")))?;
    let max = h.maxval as f64;
    let samples: Vec<f64> = if wide {
        payload.chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64).collect()
    } else {
        payload.iter().map(|&b| b as f64).collect()
    };
    if samples.iter().any(|&v| v > max) {
        return Err(malformed("sample exceeds maxval"));
    }
    let plane = h.width * h.height;
    Ok(Tensor::from_fn(&[h.channels, h.height, h.width], |i| {
        let (c, p) = (i / plane, i % plane);
        samples[p * h.channels + c] / max
    }))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes `[1, H, W]` or `[H, W]` as P5 and `[3, H, W]` as P6, maxval 255.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [h, w] => (1, h, w),
        [c @ (1 | 3), h, w] => (c, h, w),
        ref s => return Err(AcnetError::Input(format!("cannot encode shape {s:?} as PPM/PGM"))),
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.extend((0..plane).flat_map(|p| (0..c).map(move |ch| quantize(d[ch * plane + p]))));
    Ok(out)
}

//! Binary PPM (P6) and PGM (P5) with maxval 255.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Format("truncated header".into()));
    }
    let magic = [bytes[0], bytes[1]];
    if &magic != b"P6" && &magic != b"P5" {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected P6 or P5",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("malformed header field {i}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format(format!("header field {i} out of range")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("truncated header".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty image {width}x{height}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        data_start: pos + 1,
    })
}

/// Decodes P6 or P5 into `[3, H, W]`; grayscale is replicated to three channels.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let plane = h.width * h.height;
    let channels = if &h.magic == b"P6" { 3 } else { 1 };
    let payload = &bytes[h.data_start..];
    let expected = plane * channels;
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated pixel data: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let b = if channels == 3 { payload[p * 3 + c] } else { payload[p] };
            data[c * plane + p] = from_byte(b);
        }
    }
    Tensor::new(vec![3, h.height, h.width], data)
}

/// Encodes a `[3, H, W]` image as P6, rounding to the nearest byte.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Input(format!("PPM needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let d = image.data();
    for p in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(d[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Encodes a single-plane image (`[1, H, W]` or `[H, W]`) as P5.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::Input(format!("PGM needs one plane, got shape {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Interleaved RGB bytes to P6.
pub fn encode_rgb_bytes(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

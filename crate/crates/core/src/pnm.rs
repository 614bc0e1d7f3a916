//! Binary netpbm: P6 (RGB) images and P5 (gray) class masks, maxval 255.

use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::tensor::Tensor;

fn pnm_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Pnm {
        offset,
        message: message.into(),
    }
}

/// Maps `[0, 1]` to a byte, rounding to nearest and clamping.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Encodes an interleaved RGB8 buffer as P6.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer length");
    let mut out = header("P6", width, height);
    out.extend_from_slice(rgb);
    out
}

/// Interleaved RGB8 bytes of a `[1, 3, H, W]` image with values in `[0, 1]`.
pub fn image_to_rgb8(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.dims4("image_to_rgb8")?;
    if n != 1 || c != 3 {
        return Err(Error::InvalidShape(format!(
            "expected a [1, 3, H, W] image, got {:?}",
            image.dims()
        )));
    }
    let plane = h * w;
    let data = image.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            rgb.push(quantize(data[ch * plane + p]));
        }
    }
    Ok(rgb)
}

/// Image tensor from interleaved RGB8 bytes.
pub fn rgb8_to_image(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor<f32>> {
    let plane = width * height;
    if rgb.len() != 3 * plane {
        return Err(Error::InvalidShape(format!(
            "{width}x{height} RGB needs {} bytes, got {}",
            3 * plane,
            rgb.len()
        )));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[1, 3, height, width], data)
}

pub fn write_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [_, _, h, w] = image.dims4("write_ppm")?;
    Ok(encode_ppm(w, h, &image_to_rgb8(image)?))
}

pub fn write_pgm(mask: &ClassMask) -> Vec<u8> {
    let mut out = header("P5", mask.width(), mask.height());
    out.extend_from_slice(mask.ids());
    out
}

struct Header {
    width: usize,
    height: usize,
    payload_offset: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(pnm_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| pnm_err(start, format!("{what} out of range")))
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(pnm_err(0, "truncated magic"));
    }
    if &bytes[..2] != magic {
        return Err(pnm_err(
            0,
            format!(
                "bad magic {:?}, expected {}",
                String::from_utf8_lossy(&bytes[..2]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    if !cur.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(pnm_err(2, "expected whitespace after magic"));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(pnm_err(maxval_at, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(pnm_err(maxval_at, format!("unsupported maxval {maxval}")));
    }
    match cur.bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(pnm_err(cur.pos, "expected single whitespace before payload")),
    }
    Ok(Header {
        width,
        height,
        payload_offset: cur.pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], hdr: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = hdr
        .width
        .checked_mul(hdr.height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| pnm_err(hdr.payload_offset, "dimensions overflow"))?;
    let available = bytes.len() - hdr.payload_offset;
    if available < need {
        return Err(pnm_err(
            bytes.len(),
            format!("truncated payload: {available} of {need} bytes"),
        ));
    }
    if available > need {
        return Err(pnm_err(
            hdr.payload_offset + need,
            format!("{} trailing bytes after payload", available - need),
        ));
    }
    Ok(&bytes[hdr.payload_offset..])
}

pub fn read_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let hdr = parse_header(bytes, b"P6")?;
    let rgb = payload(bytes, &hdr, 3)?;
    rgb8_to_image(hdr.width, hdr.height, rgb)
}

pub fn read_pgm(bytes: &[u8]) -> Result<ClassMask> {
    let hdr = parse_header(bytes, b"P5")?;
    let ids = payload(bytes, &hdr, 1)?;
    ClassMask::new(hdr.height, hdr.width, ids.to_vec())
}

//! Binary PGM (P5) and PPM (P6) with one canonical header form.
//!
//! Encoded headers are exactly `magic \n width space height \n 255 \n`; the
//! decoder accepts only that grammar, so every decodable file is byte-for-byte
//! re-encodable. Layouts store raw class ids; images map [-1, 1] linearly to
//! [0, 255] with round-half-up.

use crate::data::Layout;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::path::Path;

const MAXVAL: u32 = 255;

fn encode(magic: &str, w: usize, h: usize, channels: usize, payload: &[u8]) -> Result<Vec<u8>> {
    if w == 0 || h == 0 {
        return Err(Error::Invalid(format!("{magic} dimensions must be positive, got {w}x{h}")));
    }
    let expected = w * h * channels;
    if payload.len() != expected {
        return Err(Error::PnmPayload { expected, found: payload.len() });
    }
    let mut out = format!("{magic}\n{w} {h}\n{MAXVAL}\n").into_bytes();
    out.extend_from_slice(payload);
    Ok(out)
}

struct Header {
    w: usize,
    h: usize,
    payload_at: usize,
}

fn decode_header(bytes: &[u8], magic: &'static str) -> Result<Header> {
    let found: String = bytes.iter().take(2).map(|&b| b as char).collect();
    if found.as_bytes() != magic.as_bytes() {
        return Err(Error::PnmMagic { expected: magic, found });
    }
    let rest = &bytes[2..];
    let line_end = |s: &[u8]| s.iter().position(|&b| b == b'\n');

    let header_err = |detail: &str| Error::PnmHeader(format!("{magic}: {detail}"));
    if rest.first() != Some(&b'\n') {
        return Err(header_err("magic must be followed by a newline"));
    }
    let dims = &rest[1..];
    let dims_end = line_end(dims).ok_or_else(|| header_err("missing dimension line"))?;
    let dim_line = std::str::from_utf8(&dims[..dims_end])
        .map_err(|_| header_err("dimension line is not ascii"))?;
    let (ws, hs) = dim_line
        .split_once(' ')
        .ok_or_else(|| header_err("dimension line must be `width height`"))?;
    let parse = |s: &str| -> Result<usize> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(header_err(&format!("bad dimension {s:?}")));
        }
        s.parse().map_err(|_| header_err(&format!("dimension {s:?} out of range")))
    };
    let (w, h) = (parse(ws)?, parse(hs)?);
    if w == 0 || h == 0 {
        return Err(header_err("dimensions must be positive"));
    }

    let tail = &dims[dims_end + 1..];
    let max_end = line_end(tail).ok_or_else(|| header_err("missing maxval line"))?;
    if &tail[..max_end] != MAXVAL.to_string().as_bytes() {
        return Err(header_err("maxval must be 255"));
    }
    let payload_at = 2 + 1 + dims_end + 1 + max_end + 1;
    Ok(Header { w, h, payload_at })
}

fn decode(bytes: &[u8], magic: &'static str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let head = decode_header(bytes, magic)?;
    let expected = head.w * head.h * channels;
    let payload = &bytes[head.payload_at..];
    if payload.len() != expected {
        return Err(Error::PnmPayload { expected, found: payload.len() });
    }
    Ok((head.w, head.h, payload.to_vec()))
}

pub fn encode_pgm(w: usize, h: usize, gray: &[u8]) -> Result<Vec<u8>> {
    encode("P5", w, h, 1, gray)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, "P5", 1)
}

pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode("P6", w, h, 3, rgb)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, "P6", 3)
}

/// [0, 1] to [0, 255], round-half-up.
pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// [-1, 1] to [0, 255], round-half-up.
pub fn quantize_signed(v: f64) -> u8 {
    quantize_unit((v + 1.0) / 2.0)
}

pub fn dequantize_signed(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

/// Interleave a [3, h, w] image in [-1, 1] into quantized RGB rows.
pub fn image_to_rgb8<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    if image.rank() != 3 || s[0] != 3 {
        return Err(Error::Shape {
            op: "image_to_rgb8",
            detail: format!("expected [3, h, w], got {s:?}"),
        });
    }
    let (h, w) = (s[1], s[2]);
    let data = image.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for pix in 0..h * w {
        for j in 0..3 {
            rgb.push(quantize_signed(data[j * h * w + pix].to_f64()));
        }
    }
    Ok(rgb)
}

pub fn rgb8_to_image<T: Scalar>(w: usize, h: usize, rgb: &[u8]) -> Result<Tensor<T>> {
    if rgb.len() != 3 * w * h {
        return Err(Error::PnmPayload { expected: 3 * w * h, found: rgb.len() });
    }
    let mut data = vec![T::ZERO; 3 * h * w];
    for pix in 0..h * w {
        for j in 0..3 {
            data[j * h * w + pix] = T::from_f64(dequantize_signed(rgb[pix * 3 + j]));
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

pub fn save_image<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let rgb = image_to_rgb8(image)?;
    let s = image.shape();
    std::fs::write(path, encode_ppm(s[2], s[1], &rgb)?)?;
    Ok(())
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let (w, h, rgb) = decode_ppm(&std::fs::read(path)?)?;
    rgb8_to_image(w, h, &rgb)
}

pub fn save_layout(path: &Path, layout: &Layout) -> Result<()> {
    std::fs::write(path, encode_pgm(layout.w, layout.h, &layout.ids)?)?;
    Ok(())
}

pub fn load_layout(path: &Path) -> Result<Layout> {
    let (w, h, ids) = decode_pgm(&std::fs::read(path)?)?;
    Ok(Layout { h, w, ids })
}

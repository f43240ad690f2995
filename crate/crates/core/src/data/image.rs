//! Binary portable pixmap/graymap IO (`P6` / `P5`, 8-bit) and resizing.

use std::path::Path;

use crate::affine::{self, AffineParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let err = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
        return Err(err(0, "expected binary PNM magic P5 or P6".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "header ended early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| err(start, "header field out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(pos, "zero image dimension".into()));
    }
    if maxval != 255 {
        return Err(err(pos, format!("only 8-bit maxval 255 is supported, got {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "missing whitespace before raster".into()));
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width,
        height,
        data_offset: pos + 1,
    })
}

/// Decodes a P6 (or P5, replicated to three channels) image into a
/// channel-major `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let h = parse_header(bytes, path)?;
    let channels = if h.magic[1] == b'6' { 3 } else { 1 };
    let plane = h.width * h.height;
    let raster = &bytes[h.data_offset..];
    if raster.len() < plane * channels {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len(),
            message: format!(
                "raster truncated: need {} bytes, found {}",
                plane * channels,
                raster.len()
            ),
        });
    }
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = if channels == 3 { p * 3 + c } else { p };
            data[c * plane + p] = raster[src] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h.height, h.width], data)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::dim(format!(
            "PPM writer expects [3, H, W], got {:?}",
            img.shape()
        )));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    out.reserve(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit graymap of `values [H, W]` scaled to `[0, 1]` already.
pub fn write_pgm(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::dim("graymap size mismatch"));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Resizes with the affine sampler: the identity map on the align-corners
/// lattice stretches corner pixels onto corner pixels.
pub fn resize(img: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    affine::warp(img, &AffineParams::identity(), h, w)
}

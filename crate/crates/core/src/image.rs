//! Binary PGM (P5) and PPM (P6) readers producing `[C, H, W]` tensors in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SIDE: usize = 1 << 14;
const MAX_PIXELS: usize = 1 << 26;

/// Decodes a P5 or P6 image with `maxval <= 255`. Grayscale yields one
/// channel, color three; samples are divided by `maxval`.
pub fn read_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::BadMagic { expected: "P5 or P6" }),
    };
    let width = parse_uint(next_token(bytes, &mut pos)?, "width")?;
    let height = parse_uint(next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_uint(next_token(bytes, &mut pos)?, "maxval")?;
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE || width * height > MAX_PIXELS {
        return Err(Error::Malformed(format!("unsupported image size {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Malformed(format!("maxval {maxval} not in 1..=255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Malformed("missing whitespace before raster".into())),
    }
    let n = width * height * channels;
    let raster = bytes.get(pos..pos + n).ok_or(Error::Truncated {
        needed: pos + n,
        available: bytes.len(),
    })?;
    let scale = 1.0 / maxval as f32;
    let plane = width * height;
    let mut data = vec![0f32; n];
    for (i, &v) in raster.iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        data[c * plane + pixel] = (f32::from(v) * scale).min(1.0);
    }
    Tensor::new(vec![channels, height, width], data)
}

/// Adapts an image to `[channels, h, w]`: gray is replicated to three
/// channels and the raster is resampled with nearest-neighbour lookup.
pub fn fit_image(img: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let (ic, ih, iw) = match *img.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::InvalidArgument("image must be [C,H,W]".into())),
    };
    let (oc, oh, ow) = match *shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::InvalidArgument("model input is not an image".into())),
    };
    if ic != oc && ic != 1 {
        return Err(Error::InvalidArgument(format!(
            "cannot map {ic} image channels onto {oc} model channels"
        )));
    }
    let src = img.data();
    let mut data = Vec::with_capacity(oc * oh * ow);
    for c in 0..oc {
        let sc = if ic == 1 { 0 } else { c };
        for y in 0..oh {
            let sy = y * ih / oh;
            for x in 0..ow {
                let sx = x * iw / ow;
                data.push(src[(sc * ih + sy) * iw + sx]);
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            None => {
                return Err(Error::Truncated {
                    needed: *pos + 1,
                    available: bytes.len(),
                })
            }
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() || *b == b'#' {
            break;
        }
        *pos += 1;
        if *pos - start > 16 {
            return Err(Error::Malformed("header token too long".into()));
        }
    }
    Ok(&bytes[start..*pos])
}

fn parse_uint(tok: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Malformed(format!("bad {what} in image header")))
}

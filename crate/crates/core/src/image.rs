//! Image input: PPM/PGM decoding (ASCII and binary) into `[H, W, C]`
//! float tensors in [0, 1], plus the bilinear resize helper that rounds
//! image sides to the nearest multiple of the patch size.

use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Parses P2/P3 (ASCII) and P5/P6 (binary) netpbm data.
pub fn decode_netpbm(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = 0usize;
    let magic = next_token(bytes, &mut cursor)
        .ok_or_else(|| Error::Format("netpbm: missing magic".into()))?;
    let (channels, binary) = match magic.as_str() {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        other => return Err(Error::Format(format!("netpbm: unsupported magic {other}"))),
    };
    let w: usize = parse_num(bytes, &mut cursor, "width")?;
    let h: usize = parse_num(bytes, &mut cursor, "height")?;
    let maxval: usize = parse_num(bytes, &mut cursor, "maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Format("netpbm: bad header values".into()));
    }
    let n = w * h * channels;
    let mut data = Vec::with_capacity(n);
    if binary {
        // Exactly one whitespace byte separates the header from raster data.
        let raster = &bytes[cursor + 1..];
        if raster.len() < n {
            return Err(Error::Format("netpbm: truncated raster".into()));
        }
        data.extend(raster[..n].iter().map(|&b| b as f32 / maxval as f32));
    } else {
        for _ in 0..n {
            let v: usize = parse_num(bytes, &mut cursor, "sample")?;
            if v > maxval {
                return Err(Error::Format("netpbm: sample exceeds maxval".into()));
            }
            data.push(v as f32 / maxval as f32);
        }
    }
    Tensor::new(vec![h, w, channels], data)
}

pub fn load_netpbm<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    decode_netpbm(&std::fs::read(path)?)
}

fn next_token(bytes: &[u8], cursor: &mut usize) -> Option<String> {
    // Skip whitespace and '#' comments.
    loop {
        while *cursor < bytes.len() && bytes[*cursor].is_ascii_whitespace() {
            *cursor += 1;
        }
        if *cursor < bytes.len() && bytes[*cursor] == b'#' {
            while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
                *cursor += 1;
            }
        } else {
            break;
        }
    }
    let start = *cursor;
    while *cursor < bytes.len() && !bytes[*cursor].is_ascii_whitespace() {
        *cursor += 1;
    }
    if start == *cursor {
        None
    } else {
        Some(String::from_utf8_lossy(&bytes[start..*cursor]).into_owned())
    }
}

fn parse_num(bytes: &[u8], cursor: &mut usize, what: &str) -> Result<usize> {
    next_token(bytes, cursor)
        .ok_or_else(|| Error::Format(format!("netpbm: missing {what}")))?
        .parse()
        .map_err(|_| Error::Format(format!("netpbm: bad {what}")))
}

/// Bilinear resize of `[H, W, C]` to `(new_h, new_w)`, corner-aligned.
pub fn resize_bilinear(img: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    if img.shape().len() != 3 {
        return Err(Error::Shape(format!("resize expects [H, W, C], got {:?}", img.shape())));
    }
    if new_h == 0 || new_w == 0 {
        return Err(Error::Invalid("resize: zero target dims".into()));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if new_h == h && new_w == w {
        return Ok(img.clone());
    }
    let mut out = vec![0.0f32; new_h * new_w * c];
    let coord = |d: usize, nd: usize, ns: usize| -> f64 {
        if nd == 1 || ns == 1 {
            0.0
        } else {
            d as f64 * (ns as f64 - 1.0) / (nd as f64 - 1.0)
        }
    };
    let data = img.data();
    for y in 0..new_h {
        let sy = coord(y, new_h, h);
        let y0 = (sy.floor() as usize).min(h.saturating_sub(2));
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..new_w {
            let sx = coord(x, new_w, w);
            let x0 = (sx.floor() as usize).min(w.saturating_sub(2));
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let v00 = data[(y0 * w + x0) * c + ch] as f64;
                let v01 = data[(y0 * w + x1) * c + ch] as f64;
                let v10 = data[(y1 * w + x0) * c + ch] as f64;
                let v11 = data[(y1 * w + x1) * c + ch] as f64;
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out[(y * new_w + x) * c + ch] = v as f32;
            }
        }
    }
    Tensor::new(vec![new_h, new_w, c], out)
}

/// Rounds each side to the nearest positive multiple of `patch_size` and
/// resizes bilinearly. Callers with non-divisible inputs go through here.
pub fn resize_to_patch_multiple(img: &Tensor, patch_size: usize) -> Result<Tensor> {
    if patch_size == 0 {
        return Err(Error::Invalid("patch_size must be > 0".into()));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let round = |side: usize| -> usize {
        let k = ((side as f64 / patch_size as f64).round() as usize).max(1);
        k * patch_size
    };
    resize_bilinear(img, round(h), round(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_pgm_round_values() {
        let src = b"P2\n# comment\n2 2\n255\n0 128 255 64\n";
        let t = decode_netpbm(src).unwrap();
        assert_eq!(t.shape(), &[2, 2, 1]);
        assert!((t.data()[1] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn binary_ppm() {
        let mut src = b"P6\n2 1\n255\n".to_vec();
        src.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        let t = decode_netpbm(&src).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[4], 1.0);
    }

    #[test]
    fn resize_constant_preserved_and_rounding() {
        let img = Tensor::full(&[6, 8, 3], 0.25);
        let out = resize_to_patch_multiple(&img, 4).unwrap();
        assert_eq!(out.shape(), &[8, 8, 3]);
        for &v in out.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }
}

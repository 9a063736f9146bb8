//! Grayscale images on `[0,1]`, binary PGM I/O, bicubic resampling and
//! patch extraction.
//!
//! Bicubic uses the Catmull-Rom kernel (a = -0.5) with half-pixel source
//! alignment `src = (dst + 0.5) * scale - 0.5`, clamped edges, and a final
//! clamp of the output to `[0,1]`. It serves both as the degradation
//! operator and as the interpolation baseline.

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage<S: Scalar> {
    height: usize,
    width: usize,
    data: Vec<S>,
}

impl<S: Scalar> GrayImage<S> {
    pub fn new(height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Contract(format!(
                "image {height}x{width} with {} samples",
                data.len()
            )));
        }
        if data.iter().any(|v| *v < S::zero() || *v > S::one() || !v.is_finite()) {
            return Err(Error::Contract("intensities must lie in [0,1]".into()));
        }
        Ok(GrayImage { height, width, data })
    }

    pub fn constant(height: usize, width: usize, v: S) -> Result<Self> {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> S) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> S {
        self.data[y * self.width + x]
    }
}

/// Read a binary PGM ("P5", maxval 255); bytes map to `v/255`.
pub fn read_pgm<S: Scalar>(path: &Path) -> Result<GrayImage<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

pub fn parse_pgm<S: Scalar>(bytes: &[u8]) -> Result<GrayImage<S>> {
    let fail = |pos: usize, msg: &str| Error::Format {
        offset: pos,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(fail(0, "not a binary PGM (magic 'P5' missing)"));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(b) = bytes.get(pos) {
                        pos += 1;
                        if *b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(fail(pos, "expected a decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| fail(start, "header field out of range"))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(fail(pos, "only maxval 255 is supported"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "expected single whitespace before raster")),
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| fail(pos, "image dimensions overflow"))?;
    if bytes.len() < pos + n {
        return Err(fail(bytes.len(), "raster shorter than width*height"));
    }
    let scale = S::one() / S::from_f64(255.0);
    let data: Vec<S> = bytes[pos..pos + n]
        .iter()
        .map(|&b| S::from_f64(b as f64) * scale)
        .collect();
    GrayImage::new(height, width, data)
}

/// Write binary PGM; intensities map to `round(clamp(x,0,1)*255)`.
pub fn write_pgm<S: Scalar>(path: &Path, img: &GrayImage<S>) -> Result<()> {
    let mut out = Vec::with_capacity(img.height * img.width + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", img.width, img.height).as_bytes());
    for &v in &img.data {
        let c = v.as_f64().clamp(0.0, 1.0);
        out.push((c * 255.0).round() as u8);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

fn cubic_kernel(t: f64) -> f64 {
    // Keys cubic with a = -0.5 (Catmull-Rom).
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

fn resample_axis<S: Scalar>(src: &[S], rows: usize, n_in: usize, n_out: usize) -> Vec<S> {
    // Resamples the last axis of a (rows, n_in) buffer to (rows, n_out).
    if n_in == n_out {
        return src.to_vec();
    }
    let scale = n_in as f64 / n_out as f64;
    let mut taps = Vec::with_capacity(n_out);
    for d in 0..n_out {
        let sc = (d as f64 + 0.5) * scale - 0.5;
        let base = sc.floor() as isize;
        let mut tap = [(0usize, 0.0f64); 4];
        for (k, slot) in tap.iter_mut().enumerate() {
            let i = base - 1 + k as isize;
            let w = cubic_kernel(sc - i as f64);
            let idx = i.clamp(0, n_in as isize - 1) as usize;
            *slot = (idx, w);
        }
        taps.push(tap);
    }
    let mut out = Vec::with_capacity(rows * n_out);
    for r in 0..rows {
        let row = &src[r * n_in..(r + 1) * n_in];
        for tap in &taps {
            let mut acc = 0.0f64;
            for &(idx, w) in tap {
                acc += w * row[idx].as_f64();
            }
            out.push(S::from_f64(acc));
        }
    }
    out
}

/// Separable bicubic resampling to `(out_h, out_w)`.
///
/// Identity extents return a bit-exact copy; otherwise the result is
/// clamped to `[0,1]` (the intermediate passes may overshoot).
pub fn bicubic_resample<S: Scalar>(
    img: &GrayImage<S>,
    out_h: usize,
    out_w: usize,
) -> Result<GrayImage<S>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Contract("output extents must be positive".into()));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    // Horizontal pass, then vertical via transposes.
    let horiz = resample_axis(&img.data, img.height, img.width, out_w);
    let mut t = vec![S::zero(); out_w * img.height];
    for y in 0..img.height {
        for x in 0..out_w {
            t[x * img.height + y] = horiz[y * out_w + x];
        }
    }
    let vert = resample_axis(&t, out_w, img.height, out_h);
    let mut data = vec![S::zero(); out_h * out_w];
    for x in 0..out_w {
        for y in 0..out_h {
            data[y * out_w + x] = vert[x * out_h + y];
        }
    }
    for v in &mut data {
        *v = v.max(S::zero()).min(S::one());
    }
    GrayImage::new(out_h, out_w, data)
}

/// Copy the `size`-pixel square window with top-left corner `(top, left)`.
pub fn extract_patch<S: Scalar>(
    img: &GrayImage<S>,
    top: usize,
    left: usize,
    size: usize,
) -> Result<GrayImage<S>> {
    if size == 0 || top + size > img.height || left + size > img.width {
        return Err(Error::Contract(format!(
            "patch ({top},{left})+{size} out of bounds for {}x{}",
            img.height, img.width
        )));
    }
    let mut data = Vec::with_capacity(size * size);
    for y in top..top + size {
        data.extend_from_slice(&img.data[y * img.width + left..y * img.width + left + size]);
    }
    GrayImage::new(size, size, data)
}

/// Apply one of the 8 dihedral transforms: `k & 3` counterclockwise
/// quarter turns, preceded by a horizontal flip when `k >= 4`.
pub fn dihedral<S: Scalar>(img: &GrayImage<S>, k: u8) -> GrayImage<S> {
    assert!(k < 8, "dihedral index must be in 0..8");
    let (h, w) = (img.height, img.width);
    let flipped: Vec<S> = if k >= 4 {
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in (0..w).rev() {
                v.push(img.data[y * w + x]);
            }
        }
        v
    } else {
        img.data.clone()
    };
    let rot = k & 3;
    let (oh, ow) = if rot % 2 == 0 { (h, w) } else { (w, h) };
    let mut out = vec![S::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let (ny, nx) = match rot {
                0 => (y, x),
                1 => (w - 1 - x, y),         // 90 deg CCW
                2 => (h - 1 - y, w - 1 - x), // 180 deg
                _ => (x, h - 1 - y),         // 270 deg CCW
            };
            out[ny * ow + nx] = flipped[y * w + x];
        }
    }
    GrayImage {
        height: oh,
        width: ow,
        data: out,
    }
}

/// Index of the transform undoing `dihedral(_, k)`.
pub fn dihedral_inverse(k: u8) -> u8 {
    if k < 4 {
        (4 - k) % 4
    } else {
        k // flip-then-rotate elements are reflections, hence involutions
    }
}

/// View an image as a gradient-free `(1,H,W)` tensor.
pub fn image_to_tensor<S: Scalar>(img: &GrayImage<S>) -> Tensor<S> {
    Tensor::from_vec(&[1, img.height, img.width], img.data.clone()).unwrap()
}

/// Clamp a `(1,H,W)` tensor back into an image.
pub fn tensor_to_image<S: Scalar>(t: &Tensor<S>) -> Result<GrayImage<S>> {
    if t.shape().len() != 3 || t.shape()[0] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "expected (1,H,W) tensor, got {:?}",
            t.shape()
        )));
    }
    let data: Vec<S> = t
        .data()
        .iter()
        .map(|&v| v.max(S::zero()).min(S::one()))
        .collect();
    GrayImage::new(t.shape()[1], t.shape()[2], data)
}

//! Grayscale images, netpbm I/O and resampling.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major grayscale image; `data[r * width + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut img = Self::new(width, height);
        for r in 0..height {
            for c in 0..width {
                img.data[r * width + c] = f(r, c);
            }
        }
        img
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.width + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.width..(r + 1) * self.width]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.height).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Value at a fractional position, zero outside the image.
    pub fn bilinear(&self, r: f64, c: f64) -> f64 {
        let (r0, c0) = (r.floor(), c.floor());
        let (fr, fc) = (r - r0, c - c0);
        let at = |rr: f64, cc: f64| -> f64 {
            if rr < 0.0 || cc < 0.0 || rr >= self.height as f64 || cc >= self.width as f64 {
                0.0
            } else {
                self.get(rr as usize, cc as usize)
            }
        };
        let top = at(r0, c0) * (1.0 - fc) + at(r0, c0 + 1.0) * fc;
        let bottom = at(r0 + 1.0, c0) * (1.0 - fc) + at(r0 + 1.0, c0 + 1.0) * fc;
        top * (1.0 - fr) + bottom * fr
    }

    /// Bilinear resize with pixel-centre alignment.
    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        GrayImage::from_fn(width, height, |r, c| {
            let src_r = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let src_c = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            self.bilinear(src_r, src_c)
        })
    }

    /// Rotation by `theta` radians (counter-clockwise on screen) about the
    /// image centre, zero-filled.
    pub fn rotate(&self, theta: f64) -> GrayImage {
        self.rotate_about(theta, (self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0)
    }

    /// Rotation about the point `(pr, pc)` in pixel-centre coordinates.
    pub fn rotate_about(&self, theta: f64, pr: f64, pc: f64) -> GrayImage {
        let (s, co) = theta.sin_cos();
        GrayImage::from_fn(self.width, self.height, |r, c| {
            // screen y grows downwards, so a CCW turn maps (dx, dy) with -theta
            let (dx, dy) = (c as f64 - pc, r as f64 - pr);
            let sx = co * dx - s * dy;
            let sy = s * dx + co * dy;
            self.bilinear(pr + sy, pc + sx)
        })
    }

    pub fn hflip(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("consistent size")
    }

    /// 8-bit quantisation of `[0, 1]` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// RGB image with channel values in `[0, 1]`.
pub fn write_ppm(width: usize, height: usize, rgb: &[[f64; 3]], path: &Path) -> Result<()> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a binary graymap (8 or 16 bit), scaling to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|d| Error::format(path, d))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected P5, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = w * h * bpp;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(format!("raster holds {} bytes, expected {need}", raster.len()));
    }
    let scale = maxval as f64;
    let data = if bpp == 1 {
        raster.iter().map(|&b| b as f64 / scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    Ok(GrayImage { width: w, height: h, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> GrayImage {
        GrayImage::from_fn(5, 4, |r, c| (r * 5 + c) as f64 / 19.0)
    }

    #[test]
    fn pgm_round_trip_is_quantised() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = ramp();
        write_pgm(&img, &p).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!((back.width, back.height), (5, 4));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(back.to_bytes(), img.to_bytes());
    }

    #[test]
    fn pgm_header_comments_and_errors() {
        let img = parse_pgm(b"P5\n# note\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
        assert!(parse_pgm(b"P2\n2 1\n255\n\x00\xff").is_err());
        assert!(parse_pgm(b"P5\n2 1\n255\n\x00").is_err());
        let wide = parse_pgm(b"P5 1 1 65535 \xff\xff").unwrap();
        assert_eq!(wide.data, vec![1.0]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp();
        assert_eq!(img.resize(5, 4), img);
        let flat = GrayImage::from_fn(7, 9, |_, _| 0.4);
        let r = flat.resize(16, 3);
        assert!(r.data.iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn rotation_round_trip_and_quarter_turn() {
        let img = GrayImage::from_fn(9, 9, |r, c| if r == 4 && c > 4 { 1.0 } else { 0.0 });
        let q = img.rotate(std::f64::consts::FRAC_PI_2);
        // a ray pointing right turns to point up
        assert!((q.get(1, 4) - 1.0).abs() < 1e-9);
        assert!(q.get(4, 6).abs() < 1e-9);
        let smooth = GrayImage::from_fn(32, 32, |r, c| ((r as f64 / 6.0).sin() + (c as f64 / 5.0).cos() + 2.0) / 4.0);
        let back = smooth.rotate(0.1).rotate(-0.1);
        let err: f64 = (8..24)
            .flat_map(|r| (8..24).map(move |c| (r, c)))
            .map(|(r, c)| (back.get(r, c) - smooth.get(r, c)).abs())
            .sum::<f64>()
            / 256.0;
        assert!(err < 0.01, "{err}");
    }

    #[test]
    fn bilinear_outside_is_zero() {
        let img = GrayImage::from_fn(2, 2, |_, _| 1.0);
        assert_eq!(img.bilinear(-1.0, 0.0), 0.0);
        assert_eq!(img.bilinear(0.5, 0.5), 1.0);
        assert_eq!(img.bilinear(1.0, 1.5), 0.5);
    }
}

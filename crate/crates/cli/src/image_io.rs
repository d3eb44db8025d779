//! Bit-exact image files.
//!
//! The canonical format is binary PPM (P6, maxval 255). A channel value v
//! in [0, 1] quantizes to round(clamp(v, 0, 1) * 255) with ties rounding
//! up, so 0.5 maps to byte 128. Reading divides by 255, which makes
//! write-then-read the identity on already-quantized buffers and bounds
//! the error at 0.5/255 otherwise. PNG output applies the same
//! quantization and exists only as a convenience; nothing reads it back.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::Vector3;
use wabe_splat::ImageBuffer;

/// round(clamp(v, 0, 1) * 255), ties away from zero.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// File name of one cell of a (view, time) render grid.
pub fn grid_image_name(view: usize, time: usize, ext: &str) -> String {
    format!("view{view:02}_time{time:03}.{ext}")
}

pub fn write_ppm(image: &ImageBuffer, path: &Path) -> Result<()> {
    let mut bytes =
        format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.reserve(image.width() * image.height() * 3);
    for y in 0..image.height() {
        for x in 0..image.width() {
            let p = image.get(x, y);
            bytes.extend_from_slice(&[quantize(p.x), quantize(p.y), quantize(p.z)]);
        }
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_png(image: &ImageBuffer, path: &Path) -> Result<()> {
    let mut out = image::RgbImage::new(image.width() as u32, image.height() as u32);
    for (x, y, pixel) in out.enumerate_pixels_mut() {
        let p = image.get(x as usize, y as usize);
        *pixel = image::Rgb([quantize(p.x), quantize(p.y), quantize(p.z)]);
    }
    out.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Parse failure at a specific byte of a PPM file.
#[derive(Debug)]
pub struct PpmError {
    pub offset: usize,
    pub what: String,
}

impl fmt::Display for PpmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "byte {}: {}", self.offset, self.what)
    }
}

impl std::error::Error for PpmError {}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn fail(&self, offset: usize, what: impl Into<String>) -> PpmError {
        PpmError {
            offset,
            what: what.into(),
        }
    }

    /// Skips whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while !matches!(self.bytes.get(self.pos), None | Some(b'\n')) {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PpmError> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are ascii")
            .parse()
            .map_err(|_| self.fail(start, format!("{what} out of range")))
    }
}

fn parse_ppm(bytes: &[u8]) -> Result<ImageBuffer, PpmError> {
    let mut h = Header { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(h.fail(0, "expected magic \"P6\""));
    }
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    if width == 0 || height == 0 {
        return Err(h.fail(2, "zero image dimension"));
    }
    let maxval_at = {
        h.skip_separators();
        h.pos
    };
    if h.number("maxval")? != 255 {
        return Err(h.fail(maxval_at, "maxval must be 255"));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(h.fail(h.pos, "expected single whitespace before pixel data")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| h.fail(2, "image dimensions overflow"))?;
    let have = bytes.len() - h.pos;
    if have < need {
        return Err(h.fail(
            bytes.len(),
            format!("pixel data truncated: need {need} bytes, have {have}"),
        ));
    }
    if have > need {
        return Err(h.fail(h.pos + need, "trailing data after pixels"));
    }
    let data = &bytes[h.pos..];
    Ok(ImageBuffer::from_fn(width, height, |x, y| {
        let i = (y * width + x) * 3;
        Vector3::new(
            data[i] as f64 / 255.0,
            data[i + 1] as f64 / 255.0,
            data[i + 2] as f64 / 255.0,
        )
    }))
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_ppm(&bytes).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use wabe_splat::rng::stream_rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Leak the dir so the file outlives the guard; tests are short-lived.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn all_zeros_2x2_is_the_exact_reference_bytes() {
        let path = tmp("zeros.ppm");
        write_ppm(&ImageBuffer::zeros(2, 2), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut expect = b"P6\n2 2\n255\n".to_vec();
        expect.extend_from_slice(&[0u8; 12]);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn half_quantizes_to_128() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
        // 0.2 * 255 = 51 exactly.
        assert_eq!(quantize(0.2), 51);
    }

    #[test]
    fn write_read_error_is_bounded_by_half_a_step() {
        use rand::Rng;
        let mut rng = stream_rng(31, 0);
        let image = ImageBuffer::from_fn(9, 7, |_, _| {
            Vector3::new(rng.gen(), rng.gen(), rng.gen())
        });
        let path = tmp("noise.ppm");
        write_ppm(&image, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert!(back.max_abs_diff(&image) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn quantized_buffers_round_trip_bit_for_bit() {
        let image = ImageBuffer::from_fn(5, 4, |x, y| {
            Vector3::new(
                (x * 37 % 256) as f64 / 255.0,
                (y * 91 % 256) as f64 / 255.0,
                ((x + y) * 13 % 256) as f64 / 255.0,
            )
        });
        let path = tmp("quantized.ppm");
        write_ppm(&image, &path).unwrap();
        let once = read_ppm(&path).unwrap();
        write_ppm(&once, &path).unwrap();
        let twice = read_ppm(&path).unwrap();
        assert!(once
            .as_slice()
            .iter()
            .zip(twice.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(once
            .as_slice()
            .iter()
            .zip(image.as_slice())
            .all(|(a, b)| a == b));
    }

    #[test]
    fn header_comments_are_allowed() {
        let mut bytes = b"P6\n# made by hand\n2 1\n# maxval next\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30, 40, 50, 60]);
        let image = parse_ppm(&bytes).unwrap();
        assert_eq!(image.width(), 2);
        assert_eq!(image.get(1, 0).z, 60.0 / 255.0);
    }

    #[test]
    fn malformed_headers_report_the_byte_offset() {
        let err = parse_ppm(b"P5\n2 2\n255\n").unwrap_err();
        assert_eq!(err.offset, 0);
        assert!(err.what.contains("P6"), "{err}");

        let err = parse_ppm(b"P6\n2 butter\n255\n").unwrap_err();
        assert_eq!(err.offset, 5, "{err}");
        assert!(err.what.contains("height"), "{err}");

        let err = parse_ppm(b"P6\n2 2\n65535\n").unwrap_err();
        assert_eq!(err.offset, 7, "{err}");
        assert!(err.what.contains("maxval"), "{err}");

        let mut truncated = b"P6\n2 2\n255\n".to_vec();
        truncated.extend_from_slice(&[0u8; 5]);
        let err = parse_ppm(&truncated).unwrap_err();
        assert_eq!(err.offset, truncated.len());
        assert!(err.what.contains("truncated"), "{err}");

        let mut trailing = b"P6\n1 1\n255\n".to_vec();
        trailing.extend_from_slice(&[0u8; 4]);
        let err = parse_ppm(&trailing).unwrap_err();
        assert!(err.what.contains("trailing"), "{err}");
    }

    #[test]
    fn read_error_names_the_path() {
        let path = tmp("missing.ppm");
        let err = read_ppm(&path).unwrap_err();
        assert!(format!("{err:#}").contains("missing.ppm"));
    }

    #[test]
    fn png_output_decodes_to_the_same_quantized_pixels() {
        use rand::Rng;
        let mut rng = stream_rng(32, 0);
        let image = ImageBuffer::from_fn(6, 5, |_, _| {
            Vector3::new(rng.gen(), rng.gen(), rng.gen())
        });
        let path = tmp("out.png");
        write_png(&image, &path).unwrap();
        let decoded = image::open(&path).unwrap().into_rgb8();
        assert_eq!(decoded.dimensions(), (6, 5));
        for (x, y, pixel) in decoded.enumerate_pixels() {
            let p = image.get(x as usize, y as usize);
            assert_eq!(pixel.0, [quantize(p.x), quantize(p.y), quantize(p.z)]);
        }
    }
}

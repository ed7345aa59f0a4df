//! Grayscale images, 8-bit PGM/PNG I/O and bilinear resampling.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Window;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                what: "pixel count",
                expected: width * height,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    /// Maps 8-bit values to `[0, 1]` by division by 255.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Quantizes to 8 bits with rounding and clamping.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Bilinear resampling where destination pixel `(x, y)` samples the
    /// source at `((x + 0.5) * ratio_x - 0.5, (y + 0.5) * ratio_y - 0.5)`,
    /// clamped to the source borders.
    pub fn resample(&self, out_w: usize, out_h: usize, ratio_x: f64, ratio_y: f64) -> GrayImage {
        let mut out = Vec::with_capacity(out_w * out_h);
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        for y in 0..out_h {
            let sy = ((y as f64 + 0.5) * ratio_y - 0.5).clamp(0.0, max_y);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = sy - y0 as f64;
            for x in 0..out_w {
                let sx = ((x as f64 + 0.5) * ratio_x - 0.5).clamp(0.0, max_x);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = sx - x0 as f64;
                let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
                let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        GrayImage {
            width: out_w.max(1),
            height: out_h.max(1),
            pixels: out,
        }
    }

    /// Resizes the whole image to `out_w x out_h`.
    pub fn resize(&self, out_w: usize, out_h: usize) -> GrayImage {
        self.resample(
            out_w,
            out_h,
            self.width as f64 / out_w as f64,
            self.height as f64 / out_h as f64,
        )
    }

    /// Copies out a sub-rectangle. The window must lie inside the image.
    pub fn crop(&self, window: &Window) -> GrayImage {
        let (x0, y0) = (window.x as usize, window.y as usize);
        let (w, h) = (window.w as usize, window.h as usize);
        assert!(
            x0 + w <= self.width && y0 + h <= self.height,
            "crop window outside image"
        );
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        GrayImage {
            width: w,
            height: h,
            pixels,
        }
    }

    pub fn load(path: &Path) -> Result<GrayImage> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingImage(path.to_path_buf())
            } else {
                Error::Io(e)
            }
        })?;
        if bytes.starts_with(b"P5") {
            decode_pgm(&bytes).map_err(|message| Error::Decode {
                path: path.to_path_buf(),
                message,
            })
        } else {
            let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            let luma = img.to_luma8();
            GrayImage::from_u8(luma.width() as usize, luma.height() as usize, luma.as_raw())
        }
    }

    /// Writes a binary PGM (P5, maxval 255).
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&encode_pgm(self.width, self.height, &self.to_u8()))?;
        Ok(())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Parses a binary PGM with maxval 255. Comments in the header are allowed.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    if fields[0] != "P5" {
        return Err(format!("unsupported magic {}", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or("truncated PGM raster")?;
    GrayImage::from_u8(w, h, data).map_err(|e| e.to_string())
}

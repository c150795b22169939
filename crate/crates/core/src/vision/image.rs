use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Spatial stride of the grid encoder; padded image sides are multiples of it.
pub const GRID_STRIDE: usize = 32;

/// RGB image, channel-major `3×H×W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("degenerate image {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Invalid(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }

    /// Number of grid cells along each axis, if both sides are stride multiples.
    pub fn grid_dims(&self) -> Option<(usize, usize)> {
        (self.height.is_multiple_of(GRID_STRIDE) && self.width.is_multiple_of(GRID_STRIDE))
            .then_some((self.height / GRID_STRIDE, self.width / GRID_STRIDE))
    }

    /// Encodes as binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(3 * self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for v in self.pixel(y, x) {
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
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
                return Err(Error::format("ppm", "truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::format("ppm", format!("unsupported magic {:?}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format("ppm", format!("bad header number {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::format("ppm", format!("maxval {maxval} unsupported")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = 3 * width * height;
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::format("ppm", "raster shorter than header declares"))?;
        if bytes.len() != pos + need {
            return Err(Error::format("ppm", "trailing bytes after raster"));
        }
        let mut img = Image::filled(height, width, [0.0; 3])?;
        for y in 0..height {
            for x in 0..width {
                let i = 3 * (y * width + x);
                img.set_pixel(
                    y,
                    x,
                    [
                        raster[i] as f32 / 255.0,
                        raster[i + 1] as f32 / 255.0,
                        raster[i + 2] as f32 / 255.0,
                    ],
                );
            }
        }
        Ok(img)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }
}

/// A resized image zero-padded to stride multiples, remembering the
/// unpadded content size.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizedImage {
    pub image: Image,
    pub content_height: usize,
    pub content_width: usize,
}

/// Target content size: the shorter side becomes `shorter`, unless that
/// pushes the longer side past `longer_cap`, in which case the longer side
/// becomes `longer_cap`.
pub fn resized_dims(height: usize, width: usize, shorter: usize, longer_cap: usize) -> Result<(usize, usize)> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid(format!("degenerate image {height}x{width}")));
    }
    if shorter == 0 || shorter > longer_cap {
        return Err(Error::Invalid(format!(
            "resize targets must satisfy 0 < shorter ({shorter}) <= longer cap ({longer_cap})"
        )));
    }
    let (lo, hi) = (height.min(width) as f64, height.max(width) as f64);
    let mut scale = shorter as f64 / lo;
    if (hi * scale).round() > longer_cap as f64 {
        scale = longer_cap as f64 / hi;
    }
    let h = ((height as f64 * scale).round() as usize).max(1);
    let w = ((width as f64 * scale).round() as usize).max(1);
    Ok((h, w))
}

pub fn pad_to_stride(extent: usize) -> usize {
    extent.div_ceil(GRID_STRIDE) * GRID_STRIDE
}

/// Bilinear resize (half-pixel centres) followed by zero padding of both
/// sides up to the next multiple of [`GRID_STRIDE`].
pub fn resize_image(img: &Image, shorter: usize, longer_cap: usize) -> Result<ResizedImage> {
    let (h, w) = resized_dims(img.height, img.width, shorter, longer_cap)?;
    let (ph, pw) = (pad_to_stride(h), pad_to_stride(w));
    let mut out = Image::filled(ph, pw, [0.0; 3])?;
    let sy = img.height as f64 / h as f64;
    let sx = img.width as f64 / w as f64;
    let sample = |dst: usize, scale: f64, extent: usize| -> (usize, usize, f32) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(extent - 1);
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let plane_in = img.height * img.width;
    let plane_out = ph * pw;
    for y in 0..h {
        let (y0, y1, fy) = sample(y, sy, img.height);
        for x in 0..w {
            let (x0, x1, fx) = sample(x, sx, img.width);
            for c in 0..3 {
                let at = |yy: usize, xx: usize| img.data[c * plane_in + yy * img.width + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.data[c * plane_out + y * pw + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(ResizedImage {
        image: out,
        content_height: h,
        content_width: w,
    })
}

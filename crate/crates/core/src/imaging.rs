//! Grayscale rasters, integral images, and patch normalization.
//!
//! Intensities are stored as `f64`. File loaders scale to `[0, 1]`;
//! intermediate fields (wavelet renders, residuals) may leave that range.
//!
//! Continuous coordinates are *centered*: the pixel at `(col, row)` has
//! coordinates `(col - (w-1)/2, row - (h-1)/2)`, so the patch center is the
//! origin. Pose transforms and wavelet positions all use this frame.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// All-zero image.
    pub fn zeros(width: usize, height: usize) -> Image {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    /// Constant-valued image.
    pub fn filled(width: usize, height: usize, value: f64) -> Image {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Wraps row-major data. Panics if `data.len() != width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Image {
        assert_eq!(data.len(), width * height, "data length mismatch");
        Image {
            width,
            height,
            data,
        }
    }

    /// Builds an image by evaluating `f(col, row)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Image {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    /// x coordinate of pixel column `col` in the centered frame.
    pub fn coord_x(&self, col: usize) -> f64 {
        col as f64 - (self.width as f64 - 1.0) / 2.0
    }

    /// y coordinate of pixel row `row` in the centered frame.
    pub fn coord_y(&self, row: usize) -> f64 {
        row as f64 - (self.height as f64 - 1.0) / 2.0
    }

    fn clamped(&self, px: i64, py: i64) -> f64 {
        let c = px.clamp(0, self.width as i64 - 1) as usize;
        let r = py.clamp(0, self.height as i64 - 1) as usize;
        self.get(c, r)
    }

    /// Bilinear sample at centered coordinates, border-clamped.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let px = x + (self.width as f64 - 1.0) / 2.0;
        let py = y + (self.height as f64 - 1.0) / 2.0;
        let x0 = px.floor();
        let y0 = py.floor();
        let fx = px - x0;
        let fy = py - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let v00 = self.clamped(x0, y0);
        let v10 = self.clamped(x0 + 1, y0);
        let v01 = self.clamped(x0, y0 + 1);
        let v11 = self.clamped(x0 + 1, y0 + 1);
        v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy
            + v11 * fx * fy
    }

    /// Catmull-Rom (C1 cubic) sample at centered coordinates, border-clamped.
    ///
    /// Used by the fitting residuals: the continuous derivative keeps
    /// finite-difference Jacobian columns consistent across step sizes,
    /// which bilinear kinks do not.
    pub fn sample_catmull_rom(&self, x: f64, y: f64) -> f64 {
        fn weights(t: f64) -> [f64; 4] {
            let t2 = t * t;
            let t3 = t2 * t;
            [
                0.5 * (-t3 + 2.0 * t2 - t),
                0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
                0.5 * (-3.0 * t3 + 4.0 * t2 + t),
                0.5 * (t3 - t2),
            ]
        }
        let px = x + (self.width as f64 - 1.0) / 2.0;
        let py = y + (self.height as f64 - 1.0) / 2.0;
        let x0 = px.floor();
        let y0 = py.floor();
        let wx = weights(px - x0);
        let wy = weights(py - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut acc = 0.0;
        for (j, wyj) in wy.iter().enumerate() {
            let mut row = 0.0;
            for (i, wxi) in wx.iter().enumerate() {
                row += wxi * self.clamped(x0 + i as i64 - 1, y0 + j as i64 - 1);
            }
            acc += wyj * row;
        }
        acc
    }

    /// C1 window that is 1 at every pixel center and falls smoothly to 0
    /// at the outer image edge (half a pixel beyond the border centers).
    /// Points outside the image weigh 0.
    pub fn edge_weight(&self, x: f64, y: f64) -> f64 {
        fn smoothstep(t: f64) -> f64 {
            let t = t.clamp(0.0, 1.0);
            t * t * (3.0 - 2.0 * t)
        }
        // Distance inside from the outer edge, in units of half a pixel.
        let half_w = self.width as f64 / 2.0;
        let half_h = self.height as f64 / 2.0;
        let dx = (half_w - x.abs()) / 0.5;
        let dy = (half_h - y.abs()) / 0.5;
        smoothstep(dx) * smoothstep(dy)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }

    /// Sum of squared intensities.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Zero mean, unit variance, then min-max rescaled to `[0, 1]`.
    /// A constant image maps to all 0.5.
    pub fn normalize_patch(&self) -> Image {
        assert!(!self.data.is_empty(), "normalize_patch on empty image");
        let m = self.mean();
        let s = self.std_dev();
        if s < 1e-12 {
            return Image::filled(self.width, self.height, 0.5);
        }
        let z: Vec<f64> = self.data.iter().map(|v| (v - m) / s).collect();
        let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        Image {
            width: self.width,
            height: self.height,
            data: z.iter().map(|v| (v - lo) / span).collect(),
        }
    }

    /// Crop a rectangle (pixel indices). Errors if it exceeds the bounds.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if x + w > self.width || y + h > self.height || w == 0 || h == 0 {
            return Err(Error::RectOutOfBounds {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        Ok(Image::from_fn(w, h, |c, r| self.get(x + c, y + r)))
    }

    /// Bilinear resize.
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> Image {
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        Image::from_fn(new_w, new_h, |c, r| {
            let px = (c as f64 + 0.5) * sx - 0.5;
            let py = (r as f64 + 0.5) * sy - 0.5;
            self.sample_bilinear(
                px - (self.width as f64 - 1.0) / 2.0,
                py - (self.height as f64 - 1.0) / 2.0,
            )
        })
    }

    /// Horizontal flip (reflection about the vertical center axis).
    pub fn mirror_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, |c, r| {
            self.get(self.width - 1 - c, r)
        })
    }

    /// Loads a PGM (P2/P5) or grayscale PNG file, scaling intensities
    /// to `[0, 1]`. Color PNGs are converted by unweighted channel average.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
            parse_pgm(&bytes)
        } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
            decode_png(&bytes)
        } else {
            Err(Error::UnsupportedFormat(format!(
                "{}: not a PGM (P2/P5) or PNG file",
                path.as_ref().display()
            )))
        }
    }

    /// Writes a binary (P5) 8-bit PGM.
    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| to_u8(*v)));
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer size matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Png(e.to_string()))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Header tokens of a PGM file: skips whitespace and `#` comments.
struct PgmTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PgmTokens<'a> {
    fn next_token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return Err(Error::PgmFormat("unexpected end of header".into()));
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn next_usize(&mut self) -> Result<usize> {
        let tok = self.next_token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::PgmFormat(format!("bad integer {:?}", String::from_utf8_lossy(tok))))
    }
}

fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    let binary = bytes.starts_with(b"P5");
    let mut toks = PgmTokens { bytes, pos: 2 };
    let width = toks.next_usize()?;
    let height = toks.next_usize()?;
    let maxval = toks.next_usize()?;
    if width == 0 || height == 0 {
        return Err(Error::PgmFormat("zero dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::PgmFormat(format!("maxval {maxval} out of range")));
    }
    let n = width * height;
    let scale = 1.0 / maxval as f64;
    let data = if binary {
        // Exactly one whitespace byte separates the header from raster data.
        let start = toks.pos + 1;
        if maxval < 256 {
            if bytes.len() < start + n {
                return Err(Error::PgmFormat("truncated raster".into()));
            }
            bytes[start..start + n]
                .iter()
                .map(|b| *b as f64 * scale)
                .collect()
        } else {
            if bytes.len() < start + 2 * n {
                return Err(Error::PgmFormat("truncated raster".into()));
            }
            bytes[start..start + 2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
                .collect()
        }
    } else {
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = toks.next_usize()?;
            if v > maxval {
                return Err(Error::PgmFormat(format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 * scale);
        }
        data
    };
    Ok(Image::from_vec(width, height, data))
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let dynimg = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let data = match dynimg {
        image::DynamicImage::ImageLuma8(g) => {
            g.into_raw().iter().map(|v| *v as f64 / 255.0).collect()
        }
        image::DynamicImage::ImageLuma16(g) => {
            g.into_raw().iter().map(|v| *v as f64 / 65535.0).collect()
        }
        image::DynamicImage::ImageLumaA8(g) => {
            g.pixels().map(|p| p.0[0] as f64 / 255.0).collect()
        }
        other => {
            // Unweighted channel average; the model is grayscale-only.
            let rgb = other.into_rgb8();
            rgb.pixels()
                .map(|p| (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / (3.0 * 255.0))
                .collect()
        }
    };
    Ok(Image::from_vec(w, h, data))
}

/// Summed-area table with a zero row and column prepended, so rectangle
/// sums need no boundary branches.
#[derive(Debug, Clone)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl IntegralImage {
    /// Cumulative table of `img`: entry `(i, j)` is the sum of all pixels
    /// with column < i and row < j.
    pub fn build(img: &Image) -> IntegralImage {
        let (w, h) = (img.width(), img.height());
        let mut data = vec![0.0; (w + 1) * (h + 1)];
        for row in 0..h {
            let mut row_sum = 0.0;
            for col in 0..w {
                row_sum += img.get(col, row);
                data[(row + 1) * (w + 1) + col + 1] = data[row * (w + 1) + col + 1] + row_sum;
            }
        }
        IntegralImage {
            width: w,
            height: h,
            data,
        }
    }

    /// Like [`IntegralImage::build`] but over squared intensities
    /// (for windowed variance).
    pub fn build_squared(img: &Image) -> IntegralImage {
        let sq = Image::from_fn(img.width(), img.height(), |c, r| {
            let v = img.get(c, r);
            v * v
        });
        IntegralImage::build(&sq)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Raw table entry; `i <= width`, `j <= height`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[j * (self.width + 1) + i]
    }

    /// Sum of pixels in the rectangle with top-left `(x, y)`, width `w`,
    /// height `h`, in four lookups. Zero-area rectangles sum to 0.
    pub fn rect_sum(&self, x: usize, y: usize, w: usize, h: usize) -> Result<f64> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::RectOutOfBounds {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.rect_sum_unchecked(x, y, w, h))
    }

    /// `rect_sum` without the bounds check, for scan inner loops that
    /// validate the window once.
    pub fn rect_sum_unchecked(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        self.entry(x + w, y + h) - self.entry(x, y + h) - self.entry(x + w, y) + self.entry(x, y)
    }
}

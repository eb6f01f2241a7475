//! Raw observations: `H×W×3` reals in [0, 1].

use std::path::Path;

use image::{imageops::FilterType, ImageFormat, RgbImage};
use slotgen_tensor::Tensor;

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// Row-major, channel-last.
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return shape_err(format!("{} values for a {height}x{width}x3 image", pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Values are clamped into [0, 1].
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.pixels[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Channel-first copy, `3×H×W`.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.pixels[p * 3 + c];
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`]; values are clamped into [0, 1].
    pub fn from_chw(height: usize, width: usize, chw: &[f64]) -> Result<Self> {
        let hw = height * width;
        if chw.len() != 3 * hw {
            return shape_err(format!("{} values for 3x{height}x{width}", chw.len()));
        }
        let mut pixels = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                pixels[p * 3 + c] = chw[c * hw + p].clamp(0.0, 1.0);
            }
        }
        Ok(Image { height, width, pixels })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            pixels: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Decodes any supported raster format and resizes to `size×size` when
    /// the dimensions differ.
    pub fn load(path: &Path, size: Option<usize>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut rgb = img.to_rgb8();
        if let Some(s) = size {
            if rgb.width() as usize != s || rgb.height() as usize != s {
                rgb = image::imageops::resize(&rgb, s as u32, s as u32, FilterType::Triangle);
            }
        }
        Ok(Image::from_rgb8(&rgb))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Image {
            path: "<memory>".into(),
            msg: e.to_string(),
        })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, ImageFormat::Png).expect("png encoding to memory");
        out.into_inner()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Image {
        let mut out = Image::filled(height, width, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                out.set(y, x, self.get(y * self.height / height, x * self.width / width));
            }
        }
        out
    }
}

/// Stacks images into a `[B, 3, H, W]` tensor.
pub fn batch_tensor(images: &[Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return invalid("empty image batch");
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return shape_err(format!("batch mixes {h}x{w} and {}x{}", img.height, img.width));
        }
        data.extend(img.to_chw());
    }
    Ok(Tensor::from_vec(data, &[images.len(), 3, h, w]))
}

/// Splits a `[B, 3, H, W]` tensor into images, clamping to [0, 1].
pub fn images_from_tensor(t: &Tensor) -> Vec<Image> {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected [B,3,H,W], got {s:?}");
    let (h, w) = (s[2], s[3]);
    let per = 3 * h * w;
    t.data()
        .chunks(per)
        .map(|c| Image::from_chw(h, w, c).expect("chunk size"))
        .collect()
}

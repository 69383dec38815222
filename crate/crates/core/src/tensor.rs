//! 8-bit RGB images.

use std::path::Path;

use image::{imageops, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Smallest accepted image side, in pixels.
pub const MIN_SIDE: usize = 8;

/// Row-major RGB image with 8 bits per channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::domain(format!(
                "image is {height}x{width}; both sides must be at least {MIN_SIDE}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::domain(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, data)
    }

    /// Builds an image from a per-pixel function of `(y, x)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
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

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        self.pixel_at(y * self.width + x)
    }

    /// Pixel by flat row-major index.
    pub fn pixel_at(&self, p: usize) -> [u8; 3] {
        let o = p * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel_at(&mut self, p: usize, rgb: [u8; 3]) {
        self.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Per-channel mean, rounded to the nearest integer.
    pub fn mean_color(&self) -> [u8; 3] {
        let mut sums = [0u64; 3];
        for px in self.pixels() {
            for c in 0..3 {
                sums[c] += px[c] as u64;
            }
        }
        let n = self.pixel_count() as u64;
        sums.map(|s| ((s + n / 2) / n) as u8)
    }

    fn to_rgb_image(&self) -> RgbImage {
        ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction")
    }

    fn from_rgb_image(img: RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    /// Bicubic (Catmull-Rom) resize to `height x width`.
    pub fn resize_bicubic(&self, height: usize, width: usize) -> ImageTensor {
        let out = imageops::resize(
            &self.to_rgb_image(),
            width as u32,
            height as u32,
            imageops::FilterType::CatmullRom,
        );
        let (w, h) = out.dimensions();
        ImageTensor {
            height: h as usize,
            width: w as usize,
            data: out.into_raw(),
        }
    }

    /// Copies the rectangle `[y0, y1) x [x0, x1)`. The result may be smaller than
    /// [`MIN_SIDE`]; it is an intermediate for resizing, not a model input.
    pub fn crop(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> ImageTensor {
        let mut data = Vec::with_capacity((y1 - y0) * (x1 - x0) * 3);
        for y in y0..y1 {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + (x1 - x0) * 3]);
        }
        ImageTensor {
            height: y1 - y0,
            width: x1 - x0,
            data,
        }
    }

    /// Loads a PNG or PPM file as 8-bit RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_rgb_image(img.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb_image()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

impl From<&ImageTensor> for ImageBuffer<Rgb<u8>, Vec<u8>> {
    fn from(t: &ImageTensor) -> Self {
        t.to_rgb_image()
    }
}

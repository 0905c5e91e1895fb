//! RGB float images in `[0, 1]`, PNG I/O and conversion to network tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Interleaved RGB image, row-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "expected {}x{}x3 = {} values, got {}",
                height,
                width,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image from an interleaved buffer with an explicit channel
    /// count; anything other than 3 channels is a shape error.
    pub fn from_interleaved(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {channels}")));
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Mirror about the vertical axis: pixel `(i, j)` moves to `(i, W−1−j)`.
    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, |y, x| self.pixel(y, self.width - 1 - x))
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        Image::from_fn(width, height, |y, x| {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let x0 = (fx.floor() as usize).min(self.width - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let x1 = (x0 + 1).min(self.width - 1);
            let (wy, wx) = (fy - y0 as f32, fx - x0 as f32);
            let (a, b, c, d) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
            let mut out = [0.0; 3];
            for ch in 0..3 {
                let top = a[ch] * (1.0 - wx) + b[ch] * wx;
                let bottom = c[ch] * (1.0 - wx) + d[ch] * wx;
                out[ch] = top * (1.0 - wy) + bottom * wy;
            }
            out
        })
    }

    /// Round-trip through 8-bit storage.
    pub fn quantized(&self) -> Image {
        self.map(|v| quantize(v) as f32 / 255.0)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image::new(w as usize, h as usize, data)
    }

    /// Encodes as an 8-bit PNG.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut buf);
        image::ImageEncoder::write_image(
            encoder,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::format("png", e))?;
        Ok(buf)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stacks equally sized images into an `N×3×H×W` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if !img.same_dims(first) {
            return Err(Error::Shape("images in a batch must share dimensions".into()));
        }
        for ch in 0..3 {
            data.extend(img.data.iter().skip(ch).step_by(3).map(|&v| T::from_f64(v as f64)));
        }
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data))
}

/// Splits an `N×3×H×W` tensor back into images.
pub fn tensor_to_images<T: Scalar>(t: &Tensor<T>) -> Vec<Image> {
    let (n, c, h, w) = t.dims4();
    assert_eq!(c, 3);
    (0..n)
        .map(|b| {
            let base = b * 3 * h * w;
            Image::from_fn(w, h, |y, x| {
                let p = y * w + x;
                [
                    t.data()[base + p].as_f64() as f32,
                    t.data()[base + h * w + p].as_f64() as f32,
                    t.data()[base + 2 * h * w + p].as_f64() as f32,
                ]
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_maps_column_j_to_w_minus_1_minus_j() {
        let img = Image::from_fn(5, 3, |y, x| [x as f32, y as f32, 0.0]);
        let f = img.flip_horizontal();
        for y in 0..3 {
            for x in 0..5 {
                assert_eq!(f.pixel(y, x), img.pixel(y, 4 - x));
            }
        }
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = Image::filled(40, 30, [0.25, 0.5, 0.75]);
        let r = img.resize_bilinear(64, 64);
        assert_eq!(r.width(), 64);
        assert!(r.data().chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(4, 2, |y, x| [x as f32 / 4.0, y as f32 / 2.0, 0.5]);
        let t = images_to_tensor::<f32>(&[&img, &img]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 4]);
        assert_eq!(tensor_to_images(&t)[1], img);
    }

    #[test]
    fn non_rgb_input_is_a_shape_error() {
        assert!(matches!(Image::from_interleaved(2, 2, 4, vec![0.0; 16]), Err(Error::Shape(_))));
    }
}

//! RGB pixel buffers in the unit range.

use crate::error::{Error, Result};
use crate::tensor::{rot_source, Scalar, Tensor};

/// `height × width × 3` interleaved RGB samples, row-major, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Construction(format!(
                "image extents {height}×{width} must be positive"
            )));
        }
        if pixels.len() != height * width * Self::CHANNELS {
            return Err(Error::Construction(format!(
                "{height}×{width} RGB image needs {} samples, got {}",
                height * width * Self::CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * Self::CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.width + col) * Self::CHANNELS + channel]
    }

    /// One channel as a row-major `f64` plane.
    pub fn plane(&self, channel: usize) -> Vec<f64> {
        self.pixels
            .iter()
            .skip(channel)
            .step_by(Self::CHANNELS)
            .map(|&v| v as f64)
            .collect()
    }

    pub fn clamped(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..*self
        }
    }

    /// Round-trips every sample through 8-bit storage.
    pub fn quantized_8bit(&self) -> Self {
        Self {
            pixels: self
                .pixels
                .iter()
                .map(|&v| to_u8(v) as f32 / 255.0)
                .collect(),
            ..*self
        }
    }

    /// Axis-aligned copy of the `size_h × size_w` block at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<Self> {
        if top + size_h > self.height || left + size_w > self.width {
            return Err(Error::Shape(format!(
                "crop {size_h}×{size_w} at ({top},{left}) exceeds {}×{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(size_h * size_w * Self::CHANNELS);
        for r in top..top + size_h {
            let start = (r * self.width + left) * Self::CHANNELS;
            pixels.extend_from_slice(&self.pixels[start..start + size_w * Self::CHANNELS]);
        }
        Self::new(size_h, size_w, pixels)
    }

    /// Counter-clockwise rotation by `k` quarter turns; `(r, c)` of the `k = 1`
    /// output is `(c, width − 1 − r)` of the input.
    pub fn rotate90(&self, k: i32) -> Self {
        let k = k.rem_euclid(4);
        let (h, w) = (self.height, self.width);
        let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = rot_source(k, r, c, h, w);
                let i = (sr * w + sc) * Self::CHANNELS;
                pixels.extend_from_slice(&self.pixels[i..i + Self::CHANNELS]);
            }
        }
        Self {
            height: oh,
            width: ow,
            pixels,
        }
    }

    /// `1 × 3 × H × W` planar tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Self::batch_to_tensor(std::slice::from_ref(self)).expect("single image batch")
    }

    /// Stacks equally sized images into an `N × 3 × H × W` tensor.
    pub fn batch_to_tensor<T: Scalar>(images: &[ImageBuffer]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w) = first.dims();
        let plane = h * w;
        let mut data = vec![T::zero(); images.len() * Self::CHANNELS * plane];
        for (n, img) in images.iter().enumerate() {
            if img.dims() != (h, w) {
                return Err(Error::Shape(format!(
                    "batch mixes {h}×{w} and {}×{}",
                    img.height, img.width
                )));
            }
            let base = n * Self::CHANNELS * plane;
            for (p, px) in img.pixels.chunks_exact(Self::CHANNELS).enumerate() {
                for (c, &v) in px.iter().enumerate() {
                    data[base + c * plane + p] = T::of(v as f64);
                }
            }
        }
        Tensor::from_vec(&[images.len(), Self::CHANNELS, h, w], data)
    }

    /// Splits an `N × 3 × H × W` tensor back into images.
    pub fn batch_from_tensor<T: Scalar>(tensor: &Tensor<T>) -> Result<Vec<ImageBuffer>> {
        let [n, c, h, w] = tensor.dims4()?;
        if c != Self::CHANNELS {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let plane = h * w;
        let data = tensor.data();
        (0..n)
            .map(|s| {
                let base = s * c * plane;
                let mut pixels = Vec::with_capacity(c * plane);
                for p in 0..plane {
                    for ch in 0..c {
                        pixels.push(data[base + ch * plane + p].as_f64() as f32);
                    }
                }
                Self::new(h, w, pixels)
            })
            .collect()
    }

    pub fn from_tensor<T: Scalar>(tensor: &Tensor<T>) -> Result<ImageBuffer> {
        let mut images = Self::batch_from_tensor(tensor)?;
        if images.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a single image, got a batch of {}",
                images.len()
            )));
        }
        Ok(images.remove(0))
    }
}

/// Unit-range sample to 8 bits, rounding half away from zero.
pub fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageBuffer {
        let px = (0..h * w * 3).map(|i| i as f32 / (h * w * 3) as f32).collect();
        ImageBuffer::new(h, w, px).unwrap()
    }

    #[test]
    fn rotation_group() {
        let img = ramp(2, 3);
        assert_eq!(img.rotate90(0), img);
        let r = img.rotate90(1);
        assert_eq!(r.dims(), (3, 2));
        for row in 0..3 {
            for col in 0..2 {
                for ch in 0..3 {
                    assert_eq!(r.get(row, col, ch), img.get(col, 2 - row, ch));
                }
            }
        }
        assert_eq!(r.rotate90(1).rotate90(1).rotate90(1), img);
    }

    #[test]
    fn image_and_tensor_rotations_agree() {
        let img = ramp(4, 5);
        for k in 0..4 {
            let via_tensor = ImageBuffer::from_tensor(&img.to_tensor::<f32>().rotate90(k)).unwrap();
            assert_eq!(via_tensor, img.rotate90(k));
        }
    }

    #[test]
    fn tensor_round_trip() {
        let img = ramp(3, 4);
        let back = ImageBuffer::from_tensor(&img.to_tensor::<f32>()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(-0.2), 0);
        assert_eq!(to_u8(1.7), 255);
    }
}

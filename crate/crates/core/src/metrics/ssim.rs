use super::LossConfig;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Normalised 2-D Gaussian window, stored as its separable 1-D factor and
/// the full outer product.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianWindow {
    size: usize,
    sigma: f64,
    taps: Vec<f64>,
    kernel: Vec<f64>,
}

impl GaussianWindow {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(Error::Construction(format!("window size {size} must be odd")));
        }
        if !(sigma > 0.0) {
            return Err(Error::Construction(format!("window sigma {sigma} must be positive")));
        }
        let half = (size / 2) as f64;
        let raw: Vec<f64> = (0..size)
            .map(|i| {
                let x = i as f64 - half;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let taps: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let kernel = taps
            .iter()
            .flat_map(|&r| taps.iter().map(move |&c| r * c))
            .collect();
        Ok(Self {
            size,
            sigma,
            taps,
            kernel,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// 1-D factor; the 2-D kernel is its outer product.
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Row-major `size × size` kernel.
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }
}

/// A single-channel row-major plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::Shape(format!(
                "plane {height}×{width} with {} samples",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_channel(image: &ImageBuffer, channel: usize) -> Self {
        Self {
            height: image.height(),
            width: image.width(),
            data: image.plane(channel),
        }
    }

    /// 2×2 mean pooling, stride 2, trailing odd row/column dropped.
    pub fn downsample(&self) -> Plane {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let i = 2 * r * self.width + 2 * c;
                let d = &self.data;
                data.push((d[i] + d[i + 1] + d[i + self.width] + d[i + self.width + 1]) * 0.25);
            }
        }
        Plane {
            height: h,
            width: w,
            data,
        }
    }

    fn map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Valid-mode separable filtering with the window.
    fn filter(&self, window: &GaussianWindow) -> Plane {
        let k = window.size();
        let taps = window.taps();
        let ow = self.width + 1 - k;
        let oh = self.height + 1 - k;
        let mut horiz = Vec::with_capacity(self.height * ow);
        for r in 0..self.height {
            let row = &self.data[r * self.width..(r + 1) * self.width];
            for c in 0..ow {
                let mut acc = 0.0;
                for (t, &g) in taps.iter().enumerate() {
                    acc += g * row[c + t];
                }
                horiz.push(acc);
            }
        }
        let mut data = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = 0.0;
                for (t, &g) in taps.iter().enumerate() {
                    acc += g * horiz[(r + t) * ow + c];
                }
                data.push(acc);
            }
        }
        Plane {
            height: oh,
            width: ow,
            data,
        }
    }
}

/// Spatial means of the luminance, contrast and structure maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimComponents {
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
    /// Mean of the per-pixel contrast·structure product.
    pub contrast_structure: f64,
    /// Mean of the per-pixel SSIM (l·c·s) map.
    pub ssim: f64,
}

/// Local SSIM statistics between two planes over the Gaussian window.
///
/// `C1 = (k1·range)²`, `C2 = (k2·range)²`, `C3 = C2 / 2`.
pub fn ssim_components(
    a: &Plane,
    b: &Plane,
    window: &GaussianWindow,
    k1: f64,
    k2: f64,
    data_range: f64,
) -> Result<SsimComponents> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "ssim: {}×{} vs {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.height < window.size() || a.width < window.size() {
        return Err(Error::Shape(format!(
            "ssim: {}×{} is smaller than the {} px window",
            a.height,
            a.width,
            window.size()
        )));
    }
    let c1 = (k1 * data_range).powi(2);
    let c2 = (k2 * data_range).powi(2);
    let c3 = c2 / 2.0;

    let mu_a = a.filter(window);
    let mu_b = b.filter(window);
    let e_aa = a.map(a, |x, y| x * y).filter(window);
    let e_bb = b.map(b, |x, y| x * y).filter(window);
    let e_ab = a.map(b, |x, y| x * y).filter(window);

    let n = mu_a.data.len();
    let (mut sl, mut sc, mut ss, mut scs, mut sssim) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let var_a = (e_aa.data[i] - ma * ma).max(0.0);
        let var_b = (e_bb.data[i] - mb * mb).max(0.0);
        let cov = e_ab.data[i] - ma * mb;
        let (sa, sb) = (var_a.sqrt(), var_b.sqrt());
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let c = (2.0 * sa * sb + c2) / (var_a + var_b + c2);
        let s = (cov + c3) / (sa * sb + c3);
        sl += l;
        sc += c;
        ss += s;
        scs += c * s;
        sssim += l * c * s;
    }
    let n = n as f64;
    Ok(SsimComponents {
        luminance: sl / n,
        contrast: sc / n,
        structure: ss / n,
        contrast_structure: scs / n,
        ssim: sssim / n,
    })
}

/// MS-SSIM of one plane pair:
/// `L_M^{w_M} · Π_j (C·S)_j^{w_j}` with scales reduced per
/// [`LossConfig::effective_weights`]. Negative factors are clamped to zero.
pub fn ms_ssim_planes(a: &Plane, b: &Plane, config: &LossConfig) -> Result<f64> {
    let weights = config.effective_weights(a.height, a.width)?;
    let window = config.window()?;
    let mut a = a.clone();
    let mut b = b.clone();
    let mut value = 1.0;
    for (j, &w) in weights.iter().enumerate() {
        let comps = ssim_components(&a, &b, &window, config.k1, config.k2, config.data_range)?;
        value *= comps.contrast_structure.max(0.0).powf(w);
        if j + 1 == weights.len() {
            value *= comps.luminance.max(0.0).powf(w);
        } else {
            a = a.downsample();
            b = b.downsample();
        }
    }
    Ok(value)
}

/// MS-SSIM of two RGB images: per-channel MS-SSIM averaged over channels.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer, config: &LossConfig) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "ms_ssim: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut sum = 0.0;
    for c in 0..ImageBuffer::CHANNELS {
        sum += ms_ssim_planes(&Plane::from_channel(a, c), &Plane::from_channel(b, c), config)?;
    }
    Ok(sum / ImageBuffer::CHANNELS as f64)
}

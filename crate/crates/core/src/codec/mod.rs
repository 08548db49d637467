//! Traditional-codec front end: external command-template codecs, a built-in
//! block-DCT degrader, bit-rate accounting and QP mixing to meet a bpp budget.

mod dct;
mod external;
mod plan;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub use dct::{BuiltinDct, DCT_BLOCK, DCT_QP_MAX};
pub use external::{run_codec, CodecSpec, ExternalCodec};
pub use plan::{
    measure_sizes, rate_target_plan, Measurement, EXACT_SEARCH_LIMIT, PlanEntry, PlanOptions, RatePlan, SizeTable,
};

/// Output of one encode/decode round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct Coded {
    pub decoded: ImageBuffer,
    pub bits: u64,
}

/// Anything that can compress an image at a quality parameter and hand back
/// the decoded pixels and the compressed size.
///
/// A larger qp never yields a larger bitstream.
pub trait Codec: Send + Sync {
    fn name(&self) -> &str;

    /// Inclusive qp ladder.
    fn qp_range(&self) -> (i32, i32);

    fn code(&self, image: &ImageBuffer, qp: i32) -> Result<Coded>;

    fn check_qp(&self, qp: i32) -> Result<()> {
        let (lo, hi) = self.qp_range();
        if qp < lo || qp > hi {
            return Err(Error::Codec(format!(
                "{}: qp {qp} outside ladder {lo}..={hi}",
                self.name()
            )));
        }
        Ok(())
    }
}

/// Pass-through codec; the size is that of raw 24-bit samples.
#[derive(Clone, Copy, Debug, Default)]
pub struct Lossless;

impl Codec for Lossless {
    fn name(&self) -> &str {
        "lossless"
    }

    fn qp_range(&self) -> (i32, i32) {
        (0, 0)
    }

    fn code(&self, image: &ImageBuffer, qp: i32) -> Result<Coded> {
        self.check_qp(qp)?;
        Ok(Coded {
            decoded: image.clone(),
            bits: 24 * (image.height() * image.width()) as u64,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BppSummary {
    pub per_image: Vec<f64>,
    /// Total bits over total pixels.
    pub dataset: f64,
}

/// Per-image bits per pixel and the pixel-weighted dataset figure.
pub fn compute_bpp(bits: &[u64], dims: &[(usize, usize)]) -> Result<BppSummary> {
    if bits.len() != dims.len() {
        return Err(Error::Shape(format!(
            "{} bit counts for {} images",
            bits.len(),
            dims.len()
        )));
    }
    if dims.iter().any(|&(h, w)| h == 0 || w == 0) {
        return Err(Error::Shape("image dimensions must be positive".into()));
    }
    let per_image = bits
        .iter()
        .zip(dims)
        .map(|(&b, &(h, w))| b as f64 / (h * w) as f64)
        .collect();
    let total_bits: u64 = bits.iter().sum();
    let total_pixels: u64 = dims.iter().map(|&(h, w)| (h * w) as u64).sum();
    Ok(BppSummary {
        per_image,
        dataset: ratio(total_bits, total_pixels),
    })
}

pub(crate) fn ratio(bits: u64, pixels: u64) -> f64 {
    bits as f64 / pixels as f64
}

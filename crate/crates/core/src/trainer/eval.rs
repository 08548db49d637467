use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{to_u8, ImageBuffer};
use crate::metrics::{ms_ssim, psnr, psnr_samples, LossConfig};
use crate::network::{infer, ModelConfig, ModelParameters};

/// One validation image: the decoder output, its ground truth and the
/// measured rate.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub name: String,
    pub degraded: ImageBuffer,
    pub target: ImageBuffer,
    pub bpp: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub ensemble: bool,
    /// Score 8-bit round-tripped images: PSNR on 0..255 integers with peak
    /// 255, MS-SSIM on the rounded values.
    pub quantize_8bit: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    /// `baseline` (decoder output) or `post` (network output).
    pub approach: &'static str,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub bpp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    /// Per-image rows, baseline then post for each image.
    pub rows: Vec<EvalRow>,
    pub mean_baseline: EvalRow,
    pub mean_post: EvalRow,
}

impl EvalTable {
    pub const HEADER: &'static str = "image,approach,psnr,ms_ssim,bpp";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in self.rows.iter().chain([&self.mean_baseline, &self.mean_post]) {
            let bpp = r.bpp.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                r.image, r.approach, r.psnr, r.ms_ssim, bpp
            );
        }
        out
    }
}

fn score(a: &ImageBuffer, b: &ImageBuffer, loss: &LossConfig, quantize: bool) -> Result<(f64, f64)> {
    if quantize {
        let (a, b) = (a.quantized_8bit(), b.quantized_8bit());
        let ints = |im: &ImageBuffer| im.pixels().iter().map(|&v| to_u8(v) as f64).collect::<Vec<_>>();
        Ok((psnr_samples(&ints(&a), &ints(&b), 255.0)?, ms_ssim(&a, &b, loss)?))
    } else {
        Ok((psnr(a, b, 1.0)?, ms_ssim(a, b, loss)?))
    }
}

fn mean(rows: &[&EvalRow], approach: &'static str) -> EvalRow {
    let n = rows.len() as f64;
    let bpp = rows
        .iter()
        .map(|r| r.bpp)
        .sum::<Option<f64>>()
        .map(|s| s / n);
    EvalRow {
        image: "mean".into(),
        approach,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ms_ssim: rows.iter().map(|r| r.ms_ssim).sum::<f64>() / n,
        bpp,
    }
}

/// Scores decoder output and network output against the ground truth for
/// every item. Means are arithmetic over images.
pub fn evaluate(
    model: &ModelConfig,
    params: &ModelParameters,
    items: &[EvalItem],
    loss: &LossConfig,
    options: EvalOptions,
) -> Result<EvalTable> {
    if items.is_empty() {
        return Err(Error::Dataset("empty validation set".into()));
    }
    let mut rows = Vec::with_capacity(2 * items.len());
    for item in items {
        let (bp, bm) = score(&item.degraded, &item.target, loss, options.quantize_8bit)?;
        let restored = infer(model, params, &item.degraded, options.ensemble)?;
        let (pp, pm) = score(&restored, &item.target, loss, options.quantize_8bit)?;
        rows.push(EvalRow {
            image: item.name.clone(),
            approach: "baseline",
            psnr: bp,
            ms_ssim: bm,
            bpp: item.bpp,
        });
        rows.push(EvalRow {
            image: item.name.clone(),
            approach: "post",
            psnr: pp,
            ms_ssim: pm,
            bpp: item.bpp,
        });
    }
    let pick = |a: &str| rows.iter().filter(|r| r.approach == a).collect::<Vec<_>>();
    let mean_baseline = mean(&pick("baseline"), "baseline");
    let mean_post = mean(&pick("post"), "post");
    Ok(EvalTable {
        rows,
        mean_baseline,
        mean_post,
    })
}

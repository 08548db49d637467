//! Two-phase training: MAE alone up to a switch iteration, then MAE plus the
//! weighted MS-SSIM dissimilarity, optimised with Adam.

mod adam;
mod eval;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Pair, PairSource};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::{total_loss, LossConfig, LossPhase};
use crate::network::{forward_graph, infer, save_checkpoint, ModelConfig, ModelParameters};
use crate::seed;
use crate::tensor::Graph;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{evaluate, EvalItem, EvalOptions, EvalRow, EvalTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iterations: usize,
    /// First iteration (0-based) trained with the combined loss.
    pub phase_switch_iteration: usize,
    pub batch_size: usize,
    pub patch_sizes: Vec<usize>,
    /// Batch-sampling seed. Not read from config files; applications derive
    /// it from their run seed.
    #[serde(skip)]
    pub seed: u64,
    /// Validate and checkpoint after every this many iterations (0: only at
    /// the end).
    pub validation_interval: usize,
    pub adam: AdamConfig,
    /// Use the rotation self-ensemble for validation metrics.
    pub ensemble_validation: bool,
    #[serde(skip)]
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 20_000,
            phase_switch_iteration: 10_000,
            batch_size: 16,
            patch_sizes: crate::data::PATCH_SIZES.to_vec(),
            seed: 0,
            validation_interval: 1_000,
            adam: AdamConfig::default(),
            ensemble_validation: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Construction(format!("train config: {m}")));
        if self.total_iterations == 0 || self.batch_size == 0 {
            return bad("total_iterations and batch_size must be positive".into());
        }
        if self.phase_switch_iteration > self.total_iterations {
            return bad(format!(
                "phase_switch_iteration {} exceeds total_iterations {}",
                self.phase_switch_iteration, self.total_iterations
            ));
        }
        if self.patch_sizes.is_empty() {
            return bad("patch_sizes is empty".into());
        }
        self.adam.validate()?;
        self.loss.validate()
    }

    pub fn phase(&self, iteration: usize) -> LossPhase {
        if iteration < self.phase_switch_iteration {
            LossPhase::MaeOnly
        } else {
            LossPhase::Combined
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    /// 0-based index of the optimisation step.
    pub iteration: usize,
    pub phase: LossPhase,
    pub loss: f64,
    pub mae: f64,
    /// Batch MS-SSIM, combined phase only.
    pub ms_ssim: Option<f64>,
    pub val_psnr: Option<f64>,
    pub val_msssim: Option<f64>,
}

/// `iteration,phase,loss,val_psnr,val_msssim`; validation fields are empty
/// on rows without a validation pass.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("iteration,phase,loss,val_psnr,val_msssim\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            r.phase.as_str(),
            r.loss,
            opt(r.val_psnr),
            opt(r.val_msssim)
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub history: Vec<HistoryRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Mean PSNR and MS-SSIM of the model's clamped output over whole images.
pub fn validation_metrics(
    model: &ModelConfig,
    params: &ModelParameters,
    pairs: &[Pair],
    loss: &LossConfig,
    ensemble: bool,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Dataset("empty validation set".into()));
    }
    let (mut p, mut m) = (0.0, 0.0);
    for pair in pairs {
        let out = infer(model, params, &pair.degraded, ensemble)?;
        p += crate::metrics::psnr(&out, &pair.target, 1.0)?;
        m += crate::metrics::ms_ssim(&out, &pair.target, loss)?;
    }
    let n = pairs.len() as f64;
    Ok((p / n, m / n))
}

fn gradients(
    g: &Graph<f32>,
    bound: &crate::network::BoundParameters,
    params: &ModelParameters,
) -> BTreeMap<String, Vec<f32>> {
    bound
        .iter()
        .map(|(name, var)| {
            let grad = g
                .grad(var)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; params.get(name).map_or(0, |t| t.len())]);
            (name.to_string(), grad)
        })
        .collect()
}

/// Runs the schedule. Checkpoints go to `out_dir` (when given) after every
/// validation interval and at the end; a non-finite loss writes
/// `diagnostic.ckpt` and aborts.
pub fn train(
    config: &TrainConfig,
    model: &ModelConfig,
    mut params: ModelParameters,
    source: &mut dyn PairSource,
    validation: &[Pair],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    let sizes: Vec<usize> = config
        .patch_sizes
        .iter()
        .copied()
        .filter(|s| source.patch_sizes().contains(s))
        .collect();
    if sizes.is_empty() {
        return Err(Error::Dataset(format!(
            "none of the patch sizes {:?} is served by the dataset ({:?})",
            config.patch_sizes,
            source.patch_sizes()
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = seed::rng(seed::derive_seed(config.seed, "batches"));
    let mut adam = AdamState::new(config.adam, &params);
    let mut history = Vec::with_capacity(config.total_iterations);
    let mut checkpoints = Vec::new();

    for iteration in 0..config.total_iterations {
        let phase = config.phase(iteration);
        let size = sizes[rng.gen_range(0..sizes.len())];
        let mut degraded = Vec::with_capacity(config.batch_size);
        let mut targets = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let pair = source.sample(size, &mut rng)?;
            if pair.degraded.dims() != pair.target.dims() {
                return Err(Error::Shape(format!(
                    "dataset pair shapes differ: {:?} vs {:?}",
                    pair.degraded.dims(),
                    pair.target.dims()
                )));
            }
            degraded.push(pair.degraded);
            targets.push(pair.target);
        }

        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g);
        let x = g.constant(ImageBuffer::batch_to_tensor(&degraded)?);
        let y = g.constant(ImageBuffer::batch_to_tensor(&targets)?);
        let pred = forward_graph(&mut g, model, &bound, x)?;
        let terms = total_loss(&mut g, pred, y, &config.loss, phase)?;
        let loss = g.value(terms.total).item()? as f64;
        if !loss.is_finite() {
            if let Some(dir) = out_dir {
                save_checkpoint(&params, model, &dir.join("diagnostic.ckpt"))?;
            }
            return Err(Error::NonFinite(format!(
                "loss is {loss} at iteration {iteration}"
            )));
        }
        g.backward(terms.total)?;
        let grads = gradients(&g, &bound, &params);
        let mae = g.value(terms.mae).item()? as f64;
        let ms_ssim = terms
            .ms_ssim
            .map(|v| g.value(v).item().map(f64::from))
            .transpose()?;
        drop(g);
        adam_step(&mut params, &grads, &mut adam)?;

        let done = iteration + 1;
        let validate = done == config.total_iterations
            || (config.validation_interval > 0 && done % config.validation_interval == 0);
        let mut row = HistoryRow {
            iteration,
            phase,
            loss,
            mae,
            ms_ssim,
            val_psnr: None,
            val_msssim: None,
        };
        if validate {
            if !validation.is_empty() {
                let (p, m) = validation_metrics(
                    model,
                    &params,
                    validation,
                    &config.loss,
                    config.ensemble_validation,
                )?;
                row.val_psnr = Some(p);
                row.val_msssim = Some(m);
            }
            if let Some(dir) = out_dir {
                let name = if done == config.total_iterations {
                    "final.ckpt".to_string()
                } else {
                    format!("checkpoint_{done:06}.ckpt")
                };
                let path = dir.join(name);
                save_checkpoint(&params, model, &path)?;
                checkpoints.push(path);
            }
        }
        history.push(row);
    }
    Ok(TrainOutcome {
        params,
        history,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::BuiltinDct;
    use crate::data::{make_pair, synthetic_image, FixedPairSource};
    use crate::network::init_model;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            num_blocks: 1,
            feature_channels: 4,
            ca_reduction: 2,
            ..ModelConfig::default()
        }
    }

    fn fixed_source(size: usize) -> FixedPairSource {
        let gt = synthetic_image(size, size, 3);
        let (degraded, target) = make_pair(&gt, &BuiltinDct, 6).unwrap();
        FixedPairSource::new(Pair { degraded, target }).unwrap()
    }

    fn short_config(total: usize, switch: usize) -> TrainConfig {
        TrainConfig {
            total_iterations: total,
            phase_switch_iteration: switch,
            batch_size: 1,
            patch_sizes: vec![24],
            validation_interval: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn phase_schedule_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let cfg = short_config(7, 4);
        let mut src = fixed_source(24);
        let val = vec![src.sample(24, &mut seed::rng(0)).unwrap()];
        let out = train(&cfg, &model, init_model(&model, 1).unwrap(), &mut src, &val, Some(dir.path())).unwrap();
        let phases: Vec<_> = out.history.iter().map(|r| r.phase).collect();
        assert!(phases[..4].iter().all(|&p| p == LossPhase::MaeOnly));
        assert!(phases[4..].iter().all(|&p| p == LossPhase::Combined));
        assert_eq!(out.checkpoints.len(), 3);
        assert!(dir.path().join("final.ckpt").exists());
        let validated: Vec<_> = out.history.iter().filter(|r| r.val_psnr.is_some()).map(|r| r.iteration).collect();
        assert_eq!(validated, vec![2, 5, 6]);
        let csv = history_csv(&out.history);
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.lines().nth(1).unwrap().ends_with(",,"));
    }

    #[test]
    fn reproducible() {
        let model = tiny_model();
        let cfg = short_config(4, 2);
        let run = || {
            let mut src = fixed_source(24);
            train(&cfg, &model, init_model(&model, 1).unwrap(), &mut src, &[], None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn rejects_bad_schedule() {
        let model = tiny_model();
        let cfg = short_config(4, 5);
        let mut src = fixed_source(24);
        assert!(train(&cfg, &model, init_model(&model, 1).unwrap(), &mut src, &[], None).is_err());
        let cfg = TrainConfig {
            patch_sizes: vec![64],
            ..short_config(4, 2)
        };
        assert!(matches!(
            train(&cfg, &model, init_model(&model, 1).unwrap(), &mut src, &[], None),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn non_finite_loss_leaves_a_diagnostic_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let mut bad = synthetic_image(24, 24, 1);
        bad.pixels_mut()[5] = f32::NAN;
        let target = synthetic_image(24, 24, 1);
        let mut src = FixedPairSource::new(Pair { degraded: bad, target }).unwrap();
        let err = train(&short_config(3, 1), &model, init_model(&model, 1).unwrap(), &mut src, &[], Some(dir.path()))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert!(dir.path().join("diagnostic.ckpt").exists());
    }
}

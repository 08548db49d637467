//! Command implementations behind the `attnpost` binary.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use attnpost_core::codec::{compute_bpp, measure_sizes, rate_target_plan, Codec, PlanOptions, RatePlan};
use attnpost_core::data::{load_image, read_manifest, save_image, split_dataset, write_manifest, Pair, PatchPairSource};
use attnpost_core::network::{infer, init_model, load_checkpoint};
use attnpost_core::seed::derive_seed;
use attnpost_core::trainer::{evaluate, history_csv, train, EvalItem, EvalOptions, EvalTable, HistoryRow};
use attnpost_core::{ImageBuffer, ModelConfig, ModelParameters};

pub use config::{AppConfig, CodecChoice, DataConfig, InitConfig, DEFAULT_TARGET_BPP};

/// What `cmd_train` leaves behind.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub metrics: EvalTable,
    pub train_images: Vec<PathBuf>,
    pub validation_images: Vec<PathBuf>,
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<ImageBuffer>> {
    paths.iter().map(|p| Ok(load_image(p)?)).collect()
}

fn codec_of(cfg: &AppConfig, out: &Path) -> Result<Box<dyn Codec>> {
    let work = out.join("codec_work");
    fs::create_dir_all(&work).with_context(|| format!("cannot create {}", work.display()))?;
    let codec = cfg.codec.instantiate(&work)?;
    codec.check_qp(cfg.data.qp)?;
    Ok(codec)
}

/// Codes every ground truth at the configured qp and records its bpp.
fn coded_items(paths: &[PathBuf], images: &[ImageBuffer], codec: &dyn Codec, qp: i32) -> Result<Vec<EvalItem>> {
    paths
        .iter()
        .zip(images)
        .map(|(path, gt)| {
            let coded = codec.code(gt, qp)?;
            if coded.decoded.dims() != gt.dims() {
                bail!("{} changed the size of {}", codec.name(), path.display());
            }
            let bpp = compute_bpp(&[coded.bits], &[gt.dims()])?.dataset;
            Ok(EvalItem {
                name: display_name(path),
                degraded: coded.decoded,
                target: gt.clone(),
                bpp: Some(bpp),
            })
        })
        .collect()
}

fn initial_parameters(cfg: &AppConfig) -> Result<ModelParameters> {
    let mut params = init_model(&cfg.model, derive_seed(cfg.seed, "model"))?;
    if cfg.init.zero_tail {
        params.zero_tail();
    }
    Ok(params)
}

/// Splits the manifest, trains on codec-degraded crops and scores the
/// validation images. Writes `history.csv`, `metrics.csv`, the split
/// manifests and checkpoints to `out`.
pub fn cmd_train(cfg: &AppConfig, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let paths = read_manifest(&cfg.data.manifest)?;
    let split = split_dataset(&paths, cfg.data.split_ratio, derive_seed(cfg.seed, "split"))?;
    write_manifest(&split.train, &out.join("train_manifest.txt"))?;
    write_manifest(&split.validation, &out.join("validation_manifest.txt"))?;

    let codec = codec_of(cfg, out)?;
    let train_images = load_all(&split.train)?;
    let mut source = PatchPairSource::new(&train_images, codec.as_ref(), cfg.data.qp, &cfg.train.patch_sizes)?;
    let val_images = load_all(&split.validation)?;
    let items = coded_items(&split.validation, &val_images, codec.as_ref(), cfg.data.qp)?;
    let validation: Vec<Pair> = items
        .iter()
        .map(|it| Pair {
            degraded: it.degraded.clone(),
            target: it.target.clone(),
        })
        .collect();

    let outcome = train(
        &cfg.train,
        &cfg.model,
        initial_parameters(cfg)?,
        &mut source,
        &validation,
        Some(out),
    )?;
    fs::write(out.join("history.csv"), history_csv(&outcome.history))?;
    let metrics = evaluate(
        &cfg.model,
        &outcome.params,
        &items,
        &cfg.loss,
        EvalOptions {
            ensemble: cfg.ensemble,
            quantize_8bit: false,
        },
    )?;
    fs::write(out.join("metrics.csv"), metrics.to_csv())?;
    Ok(TrainReport {
        history: outcome.history,
        final_checkpoint: out.join("final.ckpt"),
        checkpoints: outcome.checkpoints,
        metrics,
        train_images: split.train,
        validation_images: split.validation,
    })
}

/// Restores each input with a trained checkpoint and writes it to `out` under
/// the input's file name. When `expected` is given the checkpoint must have
/// been trained with that model configuration.
pub fn cmd_infer(
    checkpoint: &Path,
    inputs: &[PathBuf],
    out: &Path,
    expected: Option<&ModelConfig>,
    ensemble: bool,
) -> Result<Vec<PathBuf>> {
    let (params, model) = load_checkpoint(checkpoint)?;
    if let Some(want) = expected {
        if *want != model {
            bail!(
                "checkpoint {} was trained with {:?} but the config asks for {:?}",
                checkpoint.display(),
                model,
                want
            );
        }
    }
    if inputs.is_empty() {
        bail!("no input images");
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut written = Vec::with_capacity(inputs.len());
    for input in inputs {
        let image = load_image(input)?;
        let restored = infer(&model, &params, &image, ensemble)
            .with_context(|| format!("while restoring {}", input.display()))?;
        let target = out.join(display_name(input));
        if target.exists() && fs::canonicalize(&target)? == fs::canonicalize(input)? {
            bail!("refusing to overwrite the input {}", input.display());
        }
        save_image(&restored, &target)?;
        written.push(target);
    }
    Ok(written)
}

/// Reads `degraded target` pairs, one per line, whitespace or comma
/// separated. Relative paths resolve against the file's directory.
pub fn read_pairs(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let [d, t] = fields[..] else {
            bail!("{}:{}: expected two paths, got {:?}", path.display(), n + 1, line);
        };
        pairs.push((base.join(d), base.join(t)));
    }
    if pairs.is_empty() {
        bail!("{} lists no pairs", path.display());
    }
    Ok(pairs)
}

/// Scores a checkpoint. With `pairs` the listed decoded images are used as
/// is (no bpp); otherwise every manifest image is coded at the configured
/// qp. Writes `eval.csv`.
pub fn cmd_eval(
    cfg: &AppConfig,
    checkpoint: &Path,
    pairs: Option<&Path>,
    out: &Path,
) -> Result<EvalTable> {
    let (params, model) = load_checkpoint(checkpoint)?;
    if model != cfg.model {
        bail!(
            "checkpoint {} was trained with {:?} but the config asks for {:?}",
            checkpoint.display(),
            model,
            cfg.model
        );
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let items = match pairs {
        Some(list) => read_pairs(list)?
            .into_iter()
            .map(|(d, t)| {
                let degraded = load_image(&d)?;
                let target = load_image(&t)?;
                if degraded.dims() != target.dims() {
                    bail!("{} and {} differ in size", d.display(), t.display());
                }
                Ok(EvalItem {
                    name: display_name(&t),
                    degraded,
                    target,
                    bpp: None,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        None => {
            let paths = read_manifest(&cfg.data.manifest)?;
            let codec = codec_of(cfg, out)?;
            coded_items(&paths, &load_all(&paths)?, codec.as_ref(), cfg.data.qp)?
        }
    };
    let table = evaluate(
        &model,
        &params,
        &items,
        &cfg.loss,
        EvalOptions {
            ensemble: cfg.ensemble,
            quantize_8bit: true,
        },
    )?;
    fs::write(out.join("eval.csv"), table.to_csv())?;
    Ok(table)
}

/// Measures the codec over the manifest and picks per-image qps for the
/// dataset bpp target. Writes `rateplan.txt`.
pub fn cmd_rateplan(cfg: &AppConfig, out: &Path, options: &PlanOptions) -> Result<RatePlan> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let paths = read_manifest(&cfg.data.manifest)?;
    let images: Vec<(String, ImageBuffer)> = paths
        .iter()
        .map(|p| Ok((p.display().to_string(), load_image(p)?)))
        .collect::<Result<_>>()?;
    let work = out.join("codec_work");
    fs::create_dir_all(&work)?;
    let codec = cfg.codec.instantiate(&work)?;
    let window = match cfg.data.qp_window {
        Some([lo, hi]) => (lo, hi),
        None => codec.qp_range(),
    };
    let table = measure_sizes(&images, codec.as_ref(), window)?;
    let plan = rate_target_plan(&table, cfg.target_bpp, options)?;
    fs::write(out.join("rateplan.txt"), plan.to_text())?;
    Ok(plan)
}

//! Trains the desk-scale profile on synthetic images degraded by the
//! built-in codec and prints baseline vs. restored validation metrics.
//!
//! `cargo run --release -p attnpost-core --example desk_training -- [iterations] [qp] [lr] [batch] [zero-tail]`

use attnpost_core::codec::BuiltinDct;
use attnpost_core::data::{make_pair, synthetic_image, Pair, PatchPairSource};
use attnpost_core::metrics::{ms_ssim, psnr, LossConfig};
use attnpost_core::network::init_model;
use attnpost_core::seed::derive_seed;
use attnpost_core::trainer::{train, validation_metrics, TrainConfig};
use attnpost_core::ModelConfig;

fn main() -> attnpost_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let qp = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let lr = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);

    let images: Vec<_> = (0..25).map(|i| synthetic_image(96, 96, derive_seed(7, &format!("img{i}")))).collect();
    let (train_imgs, val_imgs) = images.split_at(20);
    let validation: Vec<Pair> = val_imgs
        .iter()
        .map(|gt| make_pair(gt, &BuiltinDct, qp).map(|(degraded, target)| Pair { degraded, target }))
        .collect::<Result<_, _>>()?;
    let loss = LossConfig::default();
    let (mut bp, mut bm) = (0.0, 0.0);
    for p in &validation {
        bp += psnr(&p.degraded, &p.target, 1.0)?;
        bm += ms_ssim(&p.degraded, &p.target, &loss)?;
    }
    let n = validation.len() as f64;
    println!("baseline psnr {:.4} ms-ssim {:.5}", bp / n, bm / n);

    let model = ModelConfig::desk();
    let mut source = PatchPairSource::new(train_imgs, &BuiltinDct, qp, &[64])?;
    let mut cfg = TrainConfig {
        total_iterations: iterations,
        phase_switch_iteration: iterations / 2,
        batch_size: batch,
        patch_sizes: vec![64],
        validation_interval: (iterations / 10).max(1),
        seed: 3,
        ..TrainConfig::default()
    };
    cfg.adam.lr = lr;
    let start = std::time::Instant::now();
    let mut params = init_model(&model, 1)?;
    if args.get(5).map(String::as_str) == Some("zero-tail") {
        params.zero_tail();
    }
    let out = train(&cfg, &model, params, &mut source, &validation, None)?;
    for r in out.history.iter().filter(|r| r.val_psnr.is_some()) {
        println!(
            "it {:5} {:8} loss {:.5} val psnr {:.4} ms-ssim {:.5}",
            r.iteration,
            r.phase.as_str(),
            r.loss,
            r.val_psnr.unwrap(),
            r.val_msssim.unwrap()
        );
    }
    let (p, m) = validation_metrics(&model, &out.params, &validation, &loss, false)?;
    println!("post psnr {p:.4} ms-ssim {m:.5} ({:.1}s)", start.elapsed().as_secs_f64());
    Ok(())
}

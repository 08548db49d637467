//! Central-difference checks of every differentiable op, in double precision.

use attnpost_core::metrics::{mae_loss, ms_ssim_graph, total_loss, LossConfig, LossPhase};
use attnpost_core::network::{forward_graph, init_model};
use attnpost_core::tensor::{gradient_check, PadMode, Padding, ReduceKind};
use attnpost_core::{Graph, ModelConfig, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Contracts `out` against a fixed random tensor so every output element
/// carries a distinct weight.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(out), -1.0, 1.0, seed);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check<F>(name: &str, leaves: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = gradient_check(|g, v| { let out = f(g, v)?; project(g, out, 99) }, leaves, STEP, TOL).unwrap();
    assert!(report.checked() > 0, "{name}: nothing checked");
    assert!(
        report.passed(),
        "{name}: max relative error {:.3e} ({} checked, {} excluded)",
        report.max_rel_error(),
        report.checked(),
        report.excluded()
    );
}

#[test]
fn conv2d_variants() {
    let x = random(&[2, 3, 7, 6], -1.0, 1.0, 1);
    let w3 = random(&[4, 3, 3, 3], -0.5, 0.5, 2);
    let w1 = random(&[2, 3, 1, 1], -0.5, 0.5, 3);
    let b = random(&[4], -0.1, 0.1, 4);
    check("conv same", &[x.clone(), w3.clone(), b.clone()], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::same(3))
    });
    check("conv strided", &[x.clone(), w3.clone()], |g, v| g.conv2d(v[0], v[1], None, 2, Padding::NONE));
    check("conv reflect", &[x.clone(), w3], |g, v| {
        g.conv2d(v[0], v[1], None, 1, Padding::new(PadMode::Reflect, 1))
    });
    check("conv 1x1", &[x, w1], |g, v| g.conv2d(v[0], v[1], None, 1, Padding::NONE));
}

#[test]
fn activations_and_pools() {
    let x = random(&[2, 3, 5, 4], -2.0, 2.0, 5);
    check("relu", &[x.clone()], |g, v| g.relu(v[0]));
    check("sigmoid", &[x.clone()], |g, v| g.sigmoid(v[0]));
    check("abs", &[x.clone()], |g, v| g.abs(v[0]));
    check("global avg pool", &[x.clone()], |g, v| g.global_avg_pool(v[0]));
    check("channel mean", &[x.clone()], |g, v| g.channel_reduce(v[0], ReduceKind::Mean));
    check("channel max", &[x.clone()], |g, v| g.channel_reduce(v[0], ReduceKind::Max));
    check("avg pool 2", &[x.clone()], |g, v| g.avg_pool2(v[0]));
    let odd = random(&[1, 2, 5, 7], -1.0, 1.0, 6);
    check("avg pool 2 odd", &[odd], |g, v| g.avg_pool2(v[0]));
}

#[test]
fn elementwise_and_broadcast() {
    let a = random(&[2, 3, 4, 4], -1.0, 1.0, 7);
    let same = random(&[2, 3, 4, 4], 0.5, 1.5, 8);
    let per_channel = random(&[2, 3, 1, 1], 0.5, 1.5, 9);
    let per_pixel = random(&[2, 1, 4, 4], 0.5, 1.5, 10);
    for (label, b) in [("same", &same), ("channel", &per_channel), ("pixel", &per_pixel)] {
        let leaves = [a.clone(), b.clone()];
        check(&format!("add {label}"), &leaves, |g, v| g.add(v[0], v[1]));
        check(&format!("sub {label}"), &leaves, |g, v| g.sub(v[0], v[1]));
        check(&format!("mul {label}"), &leaves, |g, v| g.mul(v[0], v[1]));
        check(&format!("div {label}"), &leaves, |g, v| g.div(v[0], v[1]));
    }
    let pos = random(&[3, 5], 0.2, 2.0, 11);
    check("powf", &[pos.clone()], |g, v| g.powf(v[0], 0.37));
    check("scale", &[pos.clone()], |g, v| g.scale(v[0], -2.5));
    check("add scalar", &[pos.clone()], |g, v| g.add_scalar(v[0], 0.3));
    check("mean", &[pos.clone()], |g, v| g.mean(v[0]));
    check("sum", &[pos.clone()], |g, v| g.sum(v[0]));
    check("reshape", &[pos], |g, v| g.reshape(v[0], &[5, 3]));
}

#[test]
fn concat() {
    let a = random(&[2, 1, 3, 3], -1.0, 1.0, 12);
    let b = random(&[2, 2, 3, 3], -1.0, 1.0, 13);
    check("concat", &[a, b], |g, v| g.concat_channels(&[v[0], v[1], v[0]]));
}

#[test]
fn losses() {
    let cfg = LossConfig::default();
    let pred = random(&[1, 3, 24, 24], 0.1, 0.9, 14);
    let target = random(&[1, 3, 24, 24], 0.1, 0.9, 15);
    let t = target.clone();
    let leaves = [pred.clone()];
    let r = gradient_check(
        move |g, v| {
            let y = g.constant(t.clone());
            ms_ssim_graph(g, v[0], y, &cfg)
        },
        &leaves,
        STEP,
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "ms-ssim {:.3e}", r.max_rel_error());
    let t = target.clone();
    let r = gradient_check(
        move |g, v| {
            let y = g.constant(t.clone());
            mae_loss(g, v[0], y)
        },
        &leaves,
        STEP,
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "mae {:.3e}", r.max_rel_error());
}

#[test]
fn small_network_combined_loss() {
    let model = ModelConfig {
        num_blocks: 1,
        feature_channels: 4,
        ca_reduction: 2,
        sa_kernel: 3,
        global_skip: true,
    };
    let params = init_model(&model, 3).unwrap().cast::<f64>();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut leaves: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    leaves.push(random(&[1, 3, 12, 12], 0.1, 0.9, 16));
    let target = random(&[1, 3, 12, 12], 0.1, 0.9, 17);
    let loss = LossConfig {
        window_size: 5,
        window_sigma: 1.0,
        scale_weights: vec![0.5, 0.5],
        ..LossConfig::default()
    };
    let r = gradient_check(
        |g, v| {
            let bound = attnpost_core::network::BoundParameters::from_vars(names.iter().cloned().zip(v.iter().copied()));
            let y = g.constant(target.clone());
            let pred = forward_graph(g, &model, &bound, v[v.len() - 1])?;
            Ok(total_loss(g, pred, y, &loss, LossPhase::Combined)?.total)
        },
        &leaves,
        STEP,
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "network {:.3e} ({} excluded)", r.max_rel_error(), r.excluded());
}

use serde::{Deserialize, Serialize};

use super::LossConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Padding, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPhase {
    MaeOnly,
    Combined,
}

impl LossPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            LossPhase::MaeOnly => "mae_only",
            LossPhase::Combined => "combined",
        }
    }
}

/// Graph handles for the pieces of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mae: Var,
    pub ms_ssim: Option<Var>,
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Mean absolute error over every element of the batch.
pub fn mae_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "mae_loss")?;
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff)?;
    g.mean(abs)
}

/// Differentiable MS-SSIM of two `N × C × H × W` tensors, averaged over all
/// `N·C` planes.
pub fn ms_ssim_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    config: &LossConfig,
) -> Result<Var> {
    same_shape(g, pred, target, "ms_ssim")?;
    let [n, c, h, w] = g.value(pred).dims4()?;
    let weights = config.effective_weights(h, w)?;
    let window = config.window()?;
    let k = window.size();
    let kernel = Tensor::from_vec(
        &[1, 1, k, k],
        window.kernel().iter().map(|&v| T::of(v)).collect(),
    )?;
    let win = g.constant(kernel);
    let (c1, c2) = (config.c1(), config.c2());

    let mut a = g.reshape(pred, &[n * c, 1, h, w])?;
    let mut b = g.reshape(target, &[n * c, 1, h, w])?;
    let mut product: Option<Var> = None;
    let mut push_factor = |g: &mut Graph<T>, factor: Var, weight: f64| -> Result<()> {
        let clamped = g.relu(factor)?;
        let powered = g.powf(clamped, weight)?;
        product = Some(match product {
            None => powered,
            Some(p) => g.mul(p, powered)?,
        });
        Ok(())
    };

    for (j, &weight) in weights.iter().enumerate() {
        let blur = |g: &mut Graph<T>, x: Var| g.conv2d(x, win, None, 1, Padding::NONE);
        let mu_a = blur(g, a)?;
        let mu_b = blur(g, b)?;
        let aa = g.mul(a, a)?;
        let bb = g.mul(b, b)?;
        let ab = g.mul(a, b)?;
        let e_aa = blur(g, aa)?;
        let e_bb = blur(g, bb)?;
        let e_ab = blur(g, ab)?;
        let mu_aa = g.mul(mu_a, mu_a)?;
        let mu_bb = g.mul(mu_b, mu_b)?;
        let mu_ab = g.mul(mu_a, mu_b)?;
        let var_a = g.sub(e_aa, mu_aa)?;
        let var_b = g.sub(e_bb, mu_bb)?;
        let cov = g.sub(e_ab, mu_ab)?;

        // contrast·structure with C3 = C2/2 collapses to (2σab + C2)/(σa² + σb² + C2)
        let num = g.scale(cov, 2.0)?;
        let num = g.add_scalar(num, c2)?;
        let den = g.add(var_a, var_b)?;
        let den = g.add_scalar(den, c2)?;
        let cs_map = g.div(num, den)?;
        let cs = g.global_avg_pool(cs_map)?;
        push_factor(g, cs, weight)?;

        if j + 1 == weights.len() {
            let num = g.scale(mu_ab, 2.0)?;
            let num = g.add_scalar(num, c1)?;
            let den = g.add(mu_aa, mu_bb)?;
            let den = g.add_scalar(den, c1)?;
            let l_map = g.div(num, den)?;
            let l = g.global_avg_pool(l_map)?;
            push_factor(g, l, weight)?;
        } else {
            a = g.avg_pool2(a)?;
            b = g.avg_pool2(b)?;
        }
    }
    let per_plane = product.expect("at least one scale");
    g.mean(per_plane)
}

/// `mae` in the first phase, `mae + λ·(1 − MS-SSIM)` in the combined phase.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    config: &LossConfig,
    phase: LossPhase,
) -> Result<LossTerms> {
    let mae = mae_loss(g, pred, target)?;
    match phase {
        LossPhase::MaeOnly => Ok(LossTerms {
            total: mae,
            mae,
            ms_ssim: None,
        }),
        LossPhase::Combined => {
            let ms = ms_ssim_graph(g, pred, target, config)?;
            let dissim = g.scale(ms, -config.lambda)?;
            let dissim = g.add_scalar(dissim, config.lambda)?;
            let total = g.add(mae, dissim)?;
            Ok(LossTerms {
                total,
                mae,
                ms_ssim: Some(ms),
            })
        }
    }
}

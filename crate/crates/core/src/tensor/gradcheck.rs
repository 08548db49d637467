//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound on the relative-error denominator, so entries whose true
/// gradient is numerically zero are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LeafCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose perturbation changed a relu/abs/max branch decision.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| l.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.leaves.iter().map(|l| l.excluded).sum()
    }

    pub fn checked(&self) -> usize {
        self.leaves.iter().map(|l| l.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

struct Evaluation {
    loss: f64,
    signature: u64,
}

fn evaluate<F>(builder: &F, leaves: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var, Evaluation)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new().with_kink_tracking();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| graph.parameter(t.clone()))
        .collect();
    let loss = builder(&mut graph, &vars)?;
    let value = graph.value(loss);
    if value.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient_check: builder returned {} elements",
            value.len()
        )));
    }
    let (signature, _) = graph.kink_signature().expect("tracking enabled");
    let eval = Evaluation {
        loss: value.data()[0],
        signature,
    };
    Ok((graph, vars, loss, eval))
}

/// Compares analytic gradients of `builder` with `(f(x+h) − f(x−h)) / 2h`.
///
/// Entries whose ± perturbation flips a branch of a non-differentiable op
/// (including inputs sitting exactly on a kink) are excluded and counted.
pub fn gradient_check<F>(
    builder: F,
    leaves: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract("gradient_check: step must be positive".into()));
    }
    let (mut graph, vars, loss, base) = evaluate(&builder, leaves)?;
    let (_, _, _, again) = evaluate(&builder, leaves)?;
    if again.loss.to_bits() != base.loss.to_bits() || again.signature != base.signature {
        return Err(Error::NonDeterministic(format!(
            "two evaluations gave {} and {}",
            base.loss, again.loss
        )));
    }
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| graph.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut report = GradCheckReport {
        leaves: Vec::with_capacity(leaves.len()),
        tolerance,
    };
    let mut probe: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let mut check = LeafCheck {
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
        };
        for i in 0..leaf.len() {
            let x0 = leaf.data()[i];
            probe[li].data_mut()[i] = x0 + step;
            let (_, _, _, plus) = evaluate(&builder, &probe)?;
            probe[li].data_mut()[i] = x0 - step;
            let (_, _, _, minus) = evaluate(&builder, &probe)?;
            probe[li].data_mut()[i] = x0;
            if plus.signature != base.signature || minus.signature != base.signature {
                check.excluded += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * step);
            let err = relative_error(analytic[li][i], numeric);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        report.leaves.push(check);
    }
    Ok(report)
}

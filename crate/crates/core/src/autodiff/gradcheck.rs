//! Central finite-difference verification of tape gradients.

use super::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, floor)
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

/// Compares the tape gradient of `f` against central differences over every
/// coordinate of every parameter.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    finite_difference_check_coords(f, params, step, &coords)
}

/// Denominator floor of the relative error unless stated otherwise.
pub const DEFAULT_REL_FLOOR: f64 = 1e-8;

/// Like [`finite_difference_check`] but restricted to `coords`, given as
/// (parameter index, flat coordinate) pairs.
pub fn finite_difference_check_coords<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_difference_check_floor(f, params, step, DEFAULT_REL_FLOOR, coords)
}

/// The general form: relative errors are taken against
/// `max(|analytic|, |numeric|, floor)`. Central differences carry roughly
/// `f64::EPSILON * |loss| / step` of round-off, so `floor` should sit well
/// above that when the loss is O(1).
pub fn finite_difference_check_floor<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    floor: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || floor <= 0.0 {
        return Err(Error::Usage("finite-difference step and floor must be positive".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zero(&tape, v)).collect();
    drop(tape);

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut work = params.to_vec();
    for &(p, i) in coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + step;
        let up = eval(&work)?;
        work[p].data_mut()[i] = orig - step;
        let down = eval(&work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[p][i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((p, i));
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

impl Tape {
    /// Distance from the recorded values to the nearest point where an op on
    /// this tape is not differentiable: ReLU inputs at 0 and BCE predictions
    /// at the clamp bounds. Finite differences are only meaningful when the
    /// perturbation stays well inside this margin.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for x in self.value(*a).data() {
                        margin = margin.min(x.abs());
                    }
                }
                Op::Bce { pred, eps, .. } => {
                    for p in self.value(*pred).data() {
                        margin = margin.min((p - eps).abs()).min((p - (1.0 - eps)).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

//! Projected gradient flow for quadratic-form quotients on the unit
//! critical-norm manifold.
//!
//! The flow minimizes rho(u)^2 - lambda ||u||_2^2 over grid functions
//! with ||u||_{2*} = 1. Each step moves against the component of the
//! energy gradient tangent to the constraint, renormalizes, and accepts
//! only strict energy decrease; the step length follows a
//! Barzilai-Borwein estimate safeguarded by halving down to a hard
//! floor. One operator application per trial step is the only O(N^2)
//! work.
//!
//! The per-step participation ratio (sum u^2)^2 / sum u^4 is recorded
//! as a concentration diagnostic: it counts the nodes effectively
//! carrying the mass of the iterate, so a minimizing sequence that
//! concentrates toward a point drives it down toward 1.

use crate::error::{Error, Result};
use crate::forms::{FormKind, MixedForms};
use crate::grid::GridFunction;
use crate::sum;

/// Step-size floor below which halving gives up and the flow stops at
/// the current iterate.
pub const STEP_FLOOR: f64 = 1e-12;

/// Knobs of the projected flow.
#[derive(Clone, Debug)]
pub struct FlowOptions {
    /// Cap on accepted steps.
    pub max_steps: usize,
    /// Relative energy-flatness target: the flow stops after three
    /// consecutive accepted steps whose decrease falls below this
    /// fraction of (1 + |energy|).
    pub energy_tol: f64,
    /// Optional stationarity target on the scaled tangent gradient;
    /// zero disables the check and leaves termination to energy
    /// flatness.
    pub grad_tol: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            energy_tol: 1e-11,
            grad_tol: 0.0,
        }
    }
}

/// History of one flow run.
#[derive(Clone, Debug)]
pub struct FlowTrace {
    /// Objective value at the start and after every accepted step.
    pub energies: Vec<f64>,
    /// Participation ratio at the start and after every accepted step.
    pub participation: Vec<f64>,
    /// Accepted steps.
    pub iterations: usize,
    /// Scaled norm of the tangent gradient at the final iterate.
    pub gradient_norm: f64,
    /// Whether step halving hit the floor, meaning no decrease is
    /// resolvable at the final iterate.
    pub floored: bool,
}

/// Result of one constrained minimization.
#[derive(Clone, Debug)]
pub struct FlowOutcome {
    /// Best objective value found.
    pub value: f64,
    /// The minimizing iterate, normalized to unit critical norm.
    pub minimizer: GridFunction,
    /// Step-by-step history.
    pub trace: FlowTrace,
}

/// Number of nodes effectively carrying the mass of `values`:
/// (sum u^2)^2 / sum u^4, between 1 (a single-node spike) and the node
/// count (a flat function).
pub fn participation_ratio(values: &[f64]) -> f64 {
    let l2 = sum::norm_sq(values);
    let l4 = sum::sum_iter(values.iter().map(|v| v * v * v * v));
    if l4 == 0.0 {
        0.0
    } else {
        l2 * l2 / l4
    }
}

/// Critical-norm functional on raw interior values.
fn crit_norm(values: &[f64], hn: f64, ts: f64) -> f64 {
    (hn * sum::sum_iter(values.iter().map(|v| v.abs().powf(ts)))).powf(1.0 / ts)
}

/// State at an accepted iterate: values, operator image, energy, and
/// the tangent gradient.
struct Iterate {
    u: Vec<f64>,
    au: Vec<f64>,
    energy: f64,
    tangent: Vec<f64>,
}

/// Minimizes rho(u)^2 - lambda ||u||_2^2 over {||u||_{2*} = 1} by the
/// safeguarded projected Barzilai-Borwein flow, starting from `start`
/// (any nonzero function; it is normalized before the first step).
pub fn minimize_quotient(
    forms: &MixedForms,
    lambda: f64,
    start: &GridFunction,
    opts: &FlowOptions,
) -> Result<FlowOutcome> {
    let mask = forms.mask();
    if !start.mask().same_mask(mask) {
        return Err(Error::MaskMismatch);
    }
    let grid = mask.grid();
    let n = grid.dimension();
    let h = grid.spacing();
    let hn = h.powi(n as i32);
    let ts = 2.0 * n as f64 / (n as f64 - 2.0);
    let count = mask.interior_count();

    let norm0 = crit_norm(start.values(), hn, ts);
    if !(norm0 > 0.0) || !norm0.is_finite() {
        return Err(Error::InvalidParameter(
            "flow started from the zero function".to_string(),
        ));
    }

    let mut state = {
        let u: Vec<f64> = start.values().iter().map(|v| v / norm0).collect();
        evaluate(forms, lambda, hn, ts, u)?
    };

    let diag_max = forms
        .diagonal()
        .into_iter()
        .fold(0.0_f64, f64::max)
        .max(1e-300);
    let mut tau = 0.5 / (2.0 * hn * (diag_max + lambda.abs()));
    let tau_cap = tau * 1e8;

    let mut energies = vec![state.energy];
    let mut participation = vec![participation_ratio(&state.u)];
    let mut floored = false;
    let mut flat_streak = 0usize;
    let mut steps = 0usize;

    while steps < opts.max_steps {
        let tangent_sq = sum::norm_sq(&state.tangent);
        if tangent_sq == 0.0 {
            break;
        }
        if opts.grad_tol > 0.0 && scaled_gradient(&state, lambda, hn) <= opts.grad_tol {
            break;
        }

        let mut accepted: Option<Iterate> = None;
        loop {
            let trial: Vec<f64> = state
                .u
                .iter()
                .zip(&state.tangent)
                .map(|(ui, gi)| ui - tau * gi)
                .collect();
            let norm = crit_norm(&trial, hn, ts);
            if norm > 0.0 && norm.is_finite() {
                let scaled: Vec<f64> = trial.iter().map(|v| v / norm).collect();
                let next = evaluate(forms, lambda, hn, ts, scaled)?;
                if next.energy < state.energy {
                    accepted = Some(next);
                    break;
                }
            }
            tau *= 0.5;
            if tau < STEP_FLOOR {
                floored = true;
                break;
            }
        }
        let Some(next) = accepted else { break };

        // Barzilai-Borwein estimate from the accepted displacement and
        // the change of the tangent gradient, kept when the curvature
        // along the step is not usable.
        let mut sy = 0.0;
        let mut yy = 0.0;
        for i in 0..count {
            let si = next.u[i] - state.u[i];
            let yi = next.tangent[i] - state.tangent[i];
            sy += si * yi;
            yy += yi * yi;
        }
        if sy > 0.0 && yy > 0.0 {
            let bb = sy / yy;
            if bb.is_finite() {
                tau = bb.clamp(STEP_FLOOR, tau_cap);
            }
        }

        let drop = state.energy - next.energy;
        if drop <= opts.energy_tol * (1.0 + next.energy.abs()) {
            flat_streak += 1;
        } else {
            flat_streak = 0;
        }
        state = next;
        steps += 1;
        energies.push(state.energy);
        participation.push(participation_ratio(&state.u));
        if flat_streak >= 3 {
            break;
        }
    }

    if !state.energy.is_finite() {
        return Err(Error::FlowDivergence(format!(
            "non-finite energy after {steps} steps"
        )));
    }
    let gradient_norm = scaled_gradient(&state, lambda, hn);
    let minimizer = GridFunction::new(mask.clone(), state.u)?;
    Ok(FlowOutcome {
        value: state.energy,
        minimizer,
        trace: FlowTrace {
            energies,
            participation,
            iterations: steps,
            gradient_norm,
            floored,
        },
    })
}

/// Builds the iterate record at normalized values: one operator
/// application yields the energy and the tangent gradient together.
fn evaluate(
    forms: &MixedForms,
    lambda: f64,
    hn: f64,
    ts: f64,
    u: Vec<f64>,
) -> Result<Iterate> {
    let count = u.len();
    let mut au = vec![0.0_f64; count];
    forms.apply_slice(FormKind::Mixed, &u, &mut au);
    let energy = hn * (sum::dot(&au, &u) - lambda * sum::norm_sq(&u));
    if !energy.is_finite() {
        return Err(Error::FlowDivergence(
            "non-finite trial energy".to_string(),
        ));
    }

    // Euclidean gradient of the objective, then projection orthogonal
    // to the constraint gradient |u|^(2*-2) u.
    let grad: Vec<f64> = au
        .iter()
        .zip(&u)
        .map(|(ai, ui)| 2.0 * hn * (ai - lambda * ui))
        .collect();
    let cons: Vec<f64> = u.iter().map(|ui| ui.abs().powf(ts - 2.0) * ui).collect();
    let gc = sum::dot(&grad, &cons);
    let cc = sum::norm_sq(&cons);
    let factor = if cc > 0.0 { gc / cc } else { 0.0 };
    let tangent: Vec<f64> = grad
        .iter()
        .zip(&cons)
        .map(|(gi, ci)| gi - factor * ci)
        .collect();
    Ok(Iterate {
        u,
        au,
        energy,
        tangent,
    })
}

/// Norm of the tangent gradient relative to the size of the operator
/// image, a scale-free stationarity measure.
fn scaled_gradient(state: &Iterate, lambda: f64, hn: f64) -> f64 {
    let num = sum::norm_sq(&state.tangent).sqrt();
    let den = 2.0
        * hn
        * (sum::norm_sq(&state.au).sqrt() + lambda.abs() * sum::norm_sq(&state.u).sqrt());
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::assemble;
    use crate::grid::{build_grid, lq_norm, mask_ball, sample};
    use crate::spectral;
    use std::sync::Arc;

    fn ball_forms(m: usize) -> MixedForms {
        let g = build_grid(3, 1.25, m).unwrap();
        let mask = Arc::new(mask_ball(g, &[0.0; 3], 1.0).unwrap());
        assemble(&mask, 0.5).unwrap()
    }

    fn ones(forms: &MixedForms) -> GridFunction {
        GridFunction::new(
            forms.mask().clone(),
            vec![1.0; forms.mask().interior_count()],
        )
        .unwrap()
    }

    #[test]
    fn flow_decreases_energy_monotonically() {
        let forms = ball_forms(13);
        let opts = FlowOptions {
            max_steps: 60,
            ..FlowOptions::default()
        };
        let out = minimize_quotient(&forms, 0.0, &ones(&forms), &opts).unwrap();
        for pair in out.trace.energies.windows(2) {
            assert!(pair[1] < pair[0], "non-monotone step: {pair:?}");
        }
        assert_eq!(out.trace.energies.len(), out.trace.iterations + 1);
        let norm = lq_norm(&out.minimizer, 6.0).unwrap();
        assert!((norm - 1.0).abs() < 1e-12, "constraint drift: {norm}");
    }

    #[test]
    fn flow_value_matches_quotient_of_minimizer() {
        let forms = ball_forms(13);
        let opts = FlowOptions {
            max_steps: 40,
            ..FlowOptions::default()
        };
        let out = minimize_quotient(&forms, 2.0, &ones(&forms), &opts).unwrap();
        let rho = forms.rho_squared(&out.minimizer).unwrap();
        let l2 = lq_norm(&out.minimizer, 2.0).unwrap();
        let direct = rho - 2.0 * l2 * l2;
        assert!(
            (out.value - direct).abs() <= 1e-10 * direct.abs().max(1.0),
            "{} vs {direct}",
            out.value
        );
    }

    #[test]
    fn flow_at_eigenvalue_pushes_the_quotient_nonpositive() {
        let forms = ball_forms(13);
        let eig = spectral::first_eigen_mixed(&forms).unwrap();
        let opts = FlowOptions {
            max_steps: 200,
            ..FlowOptions::default()
        };
        let out =
            minimize_quotient(&forms, eig.lambda, &eig.eigenfunction, &opts).unwrap();
        assert!(
            out.value.abs() <= 1e-7 * eig.lambda,
            "quotient at the eigenvalue: {}",
            out.value
        );
    }

    #[test]
    fn flow_rejects_zero_start_and_foreign_masks() {
        let forms = ball_forms(11);
        let zero = GridFunction::zeros(forms.mask().clone());
        assert!(matches!(
            minimize_quotient(&forms, 0.0, &zero, &FlowOptions::default()),
            Err(Error::InvalidParameter(_))
        ));
        let other = ball_forms(13);
        assert!(matches!(
            minimize_quotient(&forms, 0.0, &ones(&other), &FlowOptions::default()),
            Err(Error::MaskMismatch)
        ));
    }

    #[test]
    fn participation_ratio_counts_effective_nodes() {
        assert!((participation_ratio(&[3.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((participation_ratio(&[2.0, 2.0, 2.0, 2.0]) - 4.0).abs() < 1e-12);
        assert_eq!(participation_ratio(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn concentrated_starts_have_smaller_participation() {
        let forms = ball_forms(11);
        let mask = forms.mask();
        let wide = sample(mask, |x| {
            let r2: f64 = x.iter().map(|a| a * a).sum();
            (1.0 - r2).max(0.0)
        })
        .unwrap();
        let narrow = sample(mask, |x| {
            let r2: f64 = x.iter().map(|a| a * a).sum();
            (-20.0 * r2).exp()
        })
        .unwrap();
        assert!(
            participation_ratio(narrow.values()) < participation_ratio(wide.values())
        );
    }
}

//! First Dirichlet eigenpairs of the local, nonlocal, and mixed forms.
//!
//! Each solve minimizes the Rayleigh quotient of one assembled form over
//! the h^n mass by inverse power iteration: conjugate-gradient inner
//! solves on the matrix-free operator, Jacobi preconditioning, and
//! Rayleigh-quotient shifts held a safe margin below the current
//! estimate so the shifted operator stays positive. The start vector is
//! the all-ones function, which keeps every run deterministic.

use crate::error::{Error, Result};
use crate::forms::{FormKind, MixedForms};
use crate::grid::GridFunction;
use crate::sum;

/// Converged first eigenpair of one quadratic form.
#[derive(Clone, Debug)]
pub struct EigenResult {
    /// Smallest Rayleigh quotient of the form over the h^n mass.
    pub lambda: f64,
    /// Eigenfunction, normalized to unit L2 norm (h^n counting measure)
    /// and sign-normalized to positive mean.
    pub eigenfunction: GridFunction,
    /// Euclidean residual of the unit eigenvector, the 2-norm of
    /// K phi - lambda phi for the operator K of the h^n pairing.
    pub residual: f64,
    /// Outer inverse-power iterations used.
    pub iterations: usize,
    /// Single-node masks short-circuit to the diagonal pairing.
    pub degenerate: bool,
}

/// Smallest eigenpair of the nonlocal Gagliardo form.
pub fn first_eigen_fractional(forms: &MixedForms) -> Result<EigenResult> {
    solve(forms, FormKind::Fractional)
}

/// Smallest eigenpair of the local Dirichlet form.
pub fn first_eigen_local(forms: &MixedForms) -> Result<EigenResult> {
    solve(forms, FormKind::Local)
}

/// Smallest eigenpair of the full mixed form rho^2.
pub fn first_eigen_mixed(forms: &MixedForms) -> Result<EigenResult> {
    solve(forms, FormKind::Mixed)
}

const MAX_OUTER: usize = 80;
const MAX_INNER: usize = 2000;
const LAMBDA_TOL: f64 = 1e-10;
const RESIDUAL_TOL: f64 = 1e-8;

fn solve(forms: &MixedForms, kind: FormKind) -> Result<EigenResult> {
    let count = forms.mask().interior_count();
    solve_from(forms, kind, &vec![1.0; count])
}

fn finish(forms: &MixedForms, kind: FormKind, x: &[f64], iterations: usize) -> Result<EigenResult> {
    let h = forms.mask().grid().spacing();
    let n = forms.mask().grid().dimension();
    let mut w = vec![0.0; x.len()];
    forms.apply_slice(kind, x, &mut w);
    let lambda = sum::dot(x, &w);
    let residual = residual_norm(&w, x, lambda);
    let mean: f64 = sum::sum(x);
    let sign = if mean < 0.0 { -1.0 } else { 1.0 };
    let scale = sign * h.powf(-(n as f64) / 2.0);
    let values = x.iter().map(|v| scale * v).collect();
    Ok(EigenResult {
        lambda,
        eigenfunction: GridFunction::new(forms.mask().clone(), values)?,
        residual,
        iterations,
        degenerate: x.len() == 1,
    })
}

fn residual_norm(w: &[f64], x: &[f64], lambda: f64) -> f64 {
    sum::sum_iter(
        w.iter()
            .zip(x)
            .map(|(wi, xi)| (wi - lambda * xi) * (wi - lambda * xi)),
    )
    .sqrt()
}

fn normalize(x: &mut [f64]) {
    let norm = sum::norm_sq(x).sqrt();
    for v in x.iter_mut() {
        *v /= norm;
    }
}

fn solve_from(forms: &MixedForms, kind: FormKind, start: &[f64]) -> Result<EigenResult> {
    let count = forms.mask().interior_count();
    if start.len() != count {
        return Err(Error::MaskMismatch);
    }
    let mut x = start.to_vec();
    if sum::norm_sq(&x) == 0.0 {
        return Err(Error::InvalidParameter(
            "eigensolver start vector is zero".to_string(),
        ));
    }
    normalize(&mut x);
    if count == 1 {
        return finish(forms, kind, &x, 0);
    }

    let diag = forms.diagonal_of(kind);
    let mut w = vec![0.0; count];
    forms.apply_slice(kind, &x, &mut w);
    let mut lambda = sum::dot(&x, &w);
    let mut residual = residual_norm(&w, &x, lambda);
    let mut y = vec![0.0; count];
    let mut scratch = Scratch::new(count);
    let mut shift_fraction = 0.9;

    for outer in 1..=MAX_OUTER {
        let sigma = if outer <= 2 {
            0.0
        } else {
            (shift_fraction * lambda).max(0.0)
        };
        let inner_tol = if outer <= 2 {
            1e-4
        } else {
            (0.05 * residual / lambda).clamp(1e-13, 1e-5)
        };
        // Warm start along the current eigenvector estimate.
        let warm = 1.0 / (lambda - sigma).max(f64::MIN_POSITIVE);
        for (yi, xi) in y.iter_mut().zip(&x) {
            *yi = warm * xi;
        }
        match pcg(forms, kind, &diag, sigma, &x, &mut y, inner_tol, &mut scratch) {
            PcgOutcome::Converged | PcgOutcome::Stalled => {}
            PcgOutcome::IndefiniteShift => {
                shift_fraction *= 0.5;
                continue;
            }
        }
        x.copy_from_slice(&y);
        normalize(&mut x);
        forms.apply_slice(kind, &x, &mut w);
        let next = sum::dot(&x, &w);
        residual = residual_norm(&w, &x, next);
        let drift = (next - lambda).abs() / next.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        if drift < LAMBDA_TOL && residual < RESIDUAL_TOL {
            return finish(forms, kind, &x, outer);
        }
    }
    Err(Error::SolverNonConvergence {
        iterations: MAX_OUTER,
        residual,
    })
}

struct Scratch {
    r: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
}

impl Scratch {
    fn new(count: usize) -> Self {
        Self {
            r: vec![0.0; count],
            z: vec![0.0; count],
            p: vec![0.0; count],
            q: vec![0.0; count],
        }
    }
}

enum PcgOutcome {
    Converged,
    Stalled,
    IndefiniteShift,
}

/// Jacobi-preconditioned conjugate gradients on the shifted operator
/// K - sigma, solving toward (K - sigma) y = b from the given warm start.
#[allow(clippy::too_many_arguments)]
fn pcg(
    forms: &MixedForms,
    kind: FormKind,
    diag: &[f64],
    sigma: f64,
    b: &[f64],
    y: &mut [f64],
    tol_rel: f64,
    scratch: &mut Scratch,
) -> PcgOutcome {
    let count = b.len();
    let Scratch { r, z, p, q } = scratch;

    forms.apply_slice(kind, y, q);
    for i in 0..count {
        r[i] = b[i] - (q[i] - sigma * y[i]);
        z[i] = r[i] / (diag[i] - sigma).max(f64::MIN_POSITIVE);
        p[i] = z[i];
    }
    let b_norm = sum::norm_sq(b).sqrt();
    let target = tol_rel * b_norm;
    let mut rz = sum::dot(r, z);
    if sum::norm_sq(r).sqrt() <= target {
        return PcgOutcome::Converged;
    }

    for _ in 0..MAX_INNER {
        forms.apply_slice(kind, p, q);
        for i in 0..count {
            q[i] -= sigma * p[i];
        }
        let pq = sum::dot(p, q);
        if pq <= 0.0 {
            return PcgOutcome::IndefiniteShift;
        }
        let alpha = rz / pq;
        for i in 0..count {
            y[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        if sum::norm_sq(r).sqrt() <= target {
            return PcgOutcome::Converged;
        }
        let mut rz_next = 0.0;
        for i in 0..count {
            z[i] = r[i] / (diag[i] - sigma).max(f64::MIN_POSITIVE);
            rz_next += r[i] * z[i];
        }
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..count {
            p[i] = z[i] + beta * p[i];
        }
    }
    PcgOutcome::Stalled
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::assemble;
    use crate::grid::{build_grid, mask_ball, DomainMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn unit_ball(m: usize) -> Arc<DomainMask> {
        let g = build_grid(3, 1.25, m).unwrap();
        Arc::new(mask_ball(g, &[0.0; 3], 1.0).unwrap())
    }

    #[test]
    fn eigenvalue_ignores_start_vector_scale() {
        let mask = unit_ball(13);
        let forms = assemble(&mask, 0.5).unwrap();
        let count = mask.interior_count();
        let a = solve_from(&forms, FormKind::Fractional, &vec![1.0; count]).unwrap();
        let b = solve_from(&forms, FormKind::Fractional, &vec![7.5; count]).unwrap();
        assert!((a.lambda - b.lambda).abs() <= 1e-12 * a.lambda);
    }

    #[test]
    fn fractional_ball_eigenvalues_are_cauchy() {
        let mut lambdas = Vec::new();
        for m in [17, 25, 33] {
            let mask = unit_ball(m);
            let forms = assemble(&mask, 0.5).unwrap();
            let res = first_eigen_fractional(&forms).unwrap();
            assert!(res.lambda > 0.0);
            assert!(res.residual <= 1e-8, "m={m}: residual {}", res.residual);
            lambdas.push(res.lambda);
        }
        let gap_coarse = (lambdas[1] - lambdas[0]).abs();
        let gap_fine = (lambdas[2] - lambdas[1]).abs();
        assert!(
            gap_fine < gap_coarse,
            "eigenvalue gaps do not shrink: {lambdas:?}"
        );
    }

    #[test]
    fn fractional_eigenfunction_has_no_sign_change() {
        let mask = unit_ball(17);
        let forms = assemble(&mask, 0.5).unwrap();
        let res = first_eigen_fractional(&forms).unwrap();
        let min = res
            .eigenfunction
            .values()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-8, "eigenfunction dips to {min}");
    }

    #[test]
    fn local_ball_eigenvalue_approaches_pi_squared() {
        let mask = unit_ball(33);
        let forms = assemble(&mask, 0.5).unwrap();
        let res = first_eigen_local(&forms).unwrap();
        let target = PI * PI;
        assert!(
            (res.lambda - target).abs() / target < 0.02,
            "local eigenvalue {} vs {target}",
            res.lambda
        );
        assert!(res.residual <= 1e-8);
        // The eigenfunction is L2-normalized in the counting measure.
        let h = mask.grid().spacing();
        let norm = h.powi(3) * crate::sum::norm_sq(res.eigenfunction.values());
        assert!((norm - 1.0).abs() < 1e-10);
    }

    #[test]
    fn eigenvalues_decrease_when_the_domain_grows() {
        let g = build_grid(3, 1.5, 17).unwrap();
        let small = Arc::new(mask_ball(g, &[0.0; 3], 1.0).unwrap());
        let large = Arc::new(mask_ball(g, &[0.0; 3], 1.2).unwrap());
        let forms_small = assemble(&small, 0.5).unwrap();
        let forms_large = assemble(&large, 0.5).unwrap();
        let local_small = first_eigen_local(&forms_small).unwrap().lambda;
        let local_large = first_eigen_local(&forms_large).unwrap().lambda;
        assert!(local_large < local_small);
        let mixed_small = first_eigen_mixed(&forms_small).unwrap().lambda;
        let mixed_large = first_eigen_mixed(&forms_large).unwrap().lambda;
        assert!(mixed_large < mixed_small);
    }

    #[test]
    fn mixed_eigenvalue_obeys_variational_bounds() {
        let mask = unit_ball(17);
        let forms = assemble(&mask, 0.5).unwrap();
        let local = first_eigen_local(&forms).unwrap();
        let fractional = first_eigen_fractional(&forms).unwrap();
        let mixed = first_eigen_mixed(&forms).unwrap();

        // The infimum of a sum dominates the sum of infima.
        let floor = local.lambda + fractional.lambda;
        assert!(
            mixed.lambda >= floor - 1e-6 * floor,
            "mixed {} vs floor {floor}",
            mixed.lambda
        );
        // Strict ordering of the fractional eigenvalue below the mixed one.
        assert!(fractional.lambda < mixed.lambda);
        // The local eigenfunction is an admissible competitor.
        let bound = forms.rho_squared(&local.eigenfunction).unwrap();
        assert!(
            mixed.lambda <= bound * (1.0 + 1e-9),
            "mixed {} vs test-function bound {bound}",
            mixed.lambda
        );
    }

    #[test]
    fn mixed_eigenpair_is_weakly_stationary() {
        let mask = unit_ball(13);
        let forms = assemble(&mask, 0.5).unwrap();
        let res = first_eigen_mixed(&forms).unwrap();
        let phi = res.eigenfunction.values();
        let hn = mask.grid().spacing().powi(3);
        let mut a_phi = vec![0.0; phi.len()];
        forms.apply_slice(FormKind::Mixed, phi, &mut a_phi);
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        for _ in 0..20 {
            let mut v: Vec<f64> = (0..phi.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = crate::sum::norm_sq(&v).sqrt();
            for t in v.iter_mut() {
                *t /= norm;
            }
            let pairing = hn * crate::sum::dot(&a_phi, &v);
            let mass = hn * crate::sum::dot(phi, &v);
            assert!(
                (pairing - res.lambda * mass).abs() <= 1e-7,
                "weak residual {}",
                (pairing - res.lambda * mass).abs()
            );
        }
    }

    #[test]
    fn fractional_eigenvalue_stays_below_mixed_on_all_tested_setups() {
        for (m, s) in [(13, 0.25), (13, 0.75), (17, 0.5)] {
            let mask = unit_ball(m);
            let forms = assemble(&mask, s).unwrap();
            let frac = first_eigen_fractional(&forms).unwrap().lambda;
            let mixed = first_eigen_mixed(&forms).unwrap().lambda;
            assert!(frac < mixed, "m={m}, s={s}: {frac} !< {mixed}");
        }
    }

    #[test]
    fn single_node_mask_is_flagged_degenerate() {
        let g = build_grid(3, 1.25, 13).unwrap();
        let h = g.spacing();
        let mask = Arc::new(mask_ball(g, &[0.0; 3], 0.9 * h).unwrap());
        assert_eq!(mask.interior_count(), 1);
        let forms = assemble(&mask, 0.5).unwrap();
        for kind in [FormKind::Local, FormKind::Fractional, FormKind::Mixed] {
            let res = solve(&forms, kind).unwrap();
            assert!(res.degenerate);
            assert_eq!(res.iterations, 0);
            assert_eq!(res.residual, 0.0);
            let diag = forms.diagonal_of(kind);
            assert!((res.lambda - diag[0]).abs() <= 1e-12 * diag[0]);
        }
    }
}

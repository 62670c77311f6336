//! Weighted ridge-penalized GLM fits backing the nuisance working models.
//!
//! Column 0 of every design matrix is the intercept and is left unpenalized.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAX_IRLS_ITER: usize = 100;
pub const GRADIENT_TOL: f64 = 1e-8;
const MAX_RIDGE_ESCALATIONS: usize = 5;
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Ridge actually used; larger than requested after a separation fallback.
    pub ridge: f64,
    pub gradient_norm: f64,
    /// Linear predictor still diverging after every ridge escalation.
    pub separated: bool,
}

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub coef: Vec<f64>,
    pub ridge: f64,
    /// `‖Gβ − b‖∞ / max(1, ‖b‖∞)` for the penalized normal equations.
    pub residual: f64,
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_shapes(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<()> {
    if x.nrows() != y.len() || x.nrows() != w.len() {
        return Err(Error::InvalidInput(format!(
            "design has {} rows but {} responses and {} weights",
            x.nrows(),
            y.len(),
            w.len()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::InvalidInput("design has no columns".into()));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(
            "observation weights must be finite and nonnegative".into(),
        ));
    }
    Ok(())
}

/// `Xᵀ diag(d) X`, filled from the upper triangle.
fn weighted_gram(x: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let data = x.as_slice();
    let mut scaled = vec![0.0; n];
    let mut g = DMatrix::zeros(p, p);
    for j in 0..p {
        let cj = &data[j * n..(j + 1) * n];
        for ((s, &v), &di) in scaled.iter_mut().zip(cj).zip(d) {
            *s = v * di;
        }
        for k in j..p {
            let ck = &data[k * n..(k + 1) * n];
            let v = dot(&scaled, ck);
            g[(j, k)] = v;
            g[(k, j)] = v;
        }
    }
    g
}

/// Dot product with four accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = a.split_at(a.len() - a.len() % 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

fn add_ridge(g: &mut DMatrix<f64>, ridge: f64) {
    for j in 1..g.ncols() {
        g[(j, j)] += ridge;
    }
}

/// Maximizes `Σ wᵢ{yᵢ log pᵢ + (1 − yᵢ) log(1 − pᵢ)} − (ridge/2)‖β₋₀‖²` by
/// Newton–Raphson (IRLS) with step halving.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[f64], w: &[f64], ridge: f64) -> Result<LogisticFit> {
    check_shapes(x, y, w)?;
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("logistic labels must be 0 or 1".into()));
    }
    let pos: f64 = y.iter().zip(w).map(|(yi, wi)| yi * wi).sum();
    let total: f64 = w.iter().sum();
    if pos <= 0.0 || pos >= total {
        return Err(Error::InvalidInput(
            "logistic fit needs at least one positive and one negative weighted label".into(),
        ));
    }

    let mut ridge = ridge.max(0.0);
    let mut fit = irls(x, y, w, ridge, logit(pos / total));
    let mut escalations = 0;
    while fit.separated && escalations < MAX_RIDGE_ESCALATIONS {
        ridge = if ridge > 0.0 { ridge * 10.0 } else { 1e-4 };
        escalations += 1;
        warn!("logistic fit diverging; refitting with ridge {ridge:e}");
        fit = irls(x, y, w, ridge, logit(pos / total));
    }
    if !fit.converged {
        warn!(
            "logistic fit did not converge in {} iterations (gradient {:.3e})",
            fit.iterations, fit.gradient_norm
        );
    }
    Ok(fit)
}

fn penalized_loglik(
    eta: &DVector<f64>,
    y: &[f64],
    w: &[f64],
    beta: &DVector<f64>,
    ridge: f64,
) -> f64 {
    let mut ll = 0.0;
    for i in 0..y.len() {
        // log(1 + e^eta) computed stably
        let e = eta[i];
        let softplus = if e > 0.0 {
            e + (-e).exp().ln_1p()
        } else {
            e.exp().ln_1p()
        };
        ll += w[i] * (y[i] * e - softplus);
    }
    let pen: f64 = beta.iter().skip(1).map(|b| b * b).sum();
    ll - 0.5 * ridge * pen
}

fn irls(x: &DMatrix<f64>, y: &[f64], w: &[f64], ridge: f64, intercept0: f64) -> LogisticFit {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    beta[0] = intercept0;
    let mut eta = x * &beta;
    let mut obj = penalized_loglik(&eta, y, w, &beta, ridge);
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_IRLS_ITER {
        let probs: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let resid = DVector::from_iterator(y.len(), (0..y.len()).map(|i| w[i] * (y[i] - probs[i])));
        let mut grad = x.tr_mul(&resid);
        for j in 1..p {
            grad[j] -= ridge * beta[j];
        }
        grad_norm = grad.amax();
        if grad_norm < GRADIENT_TOL {
            converged = true;
            break;
        }
        let curv: Vec<f64> = probs
            .iter()
            .zip(w)
            .map(|(pi, wi)| wi * pi * (1.0 - pi))
            .collect();
        let mut hess = weighted_gram(x, &curv);
        add_ridge(&mut hess, ridge);
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                // Flat curvature: nudge the diagonal.
                let bump = 1e-10 * (1.0 + hess.diagonal().amax());
                for j in 0..p {
                    hess[(j, j)] += bump;
                }
                match hess.cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => break,
                }
            }
        };
        iterations += 1;

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * scale;
            let cand_eta = x * &cand;
            let cand_obj = penalized_loglik(&cand_eta, y, w, &cand, ridge);
            if cand_obj >= obj - 1e-12 * obj.abs().max(1.0) {
                beta = cand;
                eta = cand_eta;
                obj = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if step.amax() * scale <= 1e-13 * (1.0 + beta.amax()) {
            // Step at rounding level; recompute the gradient and stop.
            let probs: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
            let resid =
                DVector::from_iterator(y.len(), (0..y.len()).map(|i| w[i] * (y[i] - probs[i])));
            let mut grad = x.tr_mul(&resid);
            for j in 1..p {
                grad[j] -= ridge * beta[j];
            }
            grad_norm = grad.amax();
            converged = grad_norm < 1e-6;
            break;
        }
    }
    let separated = eta.iter().any(|e| e.abs() > SEPARATION_ETA);
    LogisticFit {
        coef: beta.iter().copied().collect(),
        converged,
        iterations,
        ridge,
        gradient_norm: grad_norm,
        separated,
    }
}

/// Weighted ridge least squares via the normal equations. A singular Gram
/// matrix engages an escalating ridge; failure after the last escalation is
/// reported as rank deficiency.
pub fn fit_linear(x: &DMatrix<f64>, y: &[f64], w: &[f64], ridge: f64) -> Result<LinearFit> {
    check_shapes(x, y, w)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("responses must be finite".into()));
    }
    let gram = weighted_gram(x, w);
    let wy = DVector::from_iterator(y.len(), y.iter().zip(w).map(|(yi, wi)| yi * wi));
    let rhs = x.tr_mul(&wy);
    let scale = gram.diagonal().amax().max(f64::MIN_POSITIVE);

    let mut ridge = ridge.max(0.0);
    for attempt in 0..=MAX_RIDGE_ESCALATIONS {
        let mut g = gram.clone();
        add_ridge(&mut g, ridge);
        if let Some(ch) = g.clone().cholesky() {
            let l = ch.l_dirty();
            let min_pivot = (0..l.ncols())
                .map(|j| l[(j, j)] * l[(j, j)])
                .fold(f64::INFINITY, f64::min);
            if min_pivot > 1e-11 * scale {
                let beta = ch.solve(&rhs);
                let residual = (&g * &beta - &rhs).amax() / rhs.amax().max(1.0);
                return Ok(LinearFit {
                    coef: beta.iter().copied().collect(),
                    ridge,
                    residual,
                });
            }
        }
        if attempt < MAX_RIDGE_ESCALATIONS {
            ridge = (ridge * 10.0).max(1e-8 * scale);
            warn!("singular Gram matrix; refitting with ridge {ridge:e}");
        }
    }
    Err(Error::RankDeficient("linear fit".into()))
}

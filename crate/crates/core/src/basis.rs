//! Univariate B-spline bases.
//!
//! Used both for the estimand feature map `f(t)` and for the smooth terms of
//! the nuisance working models. Knot vectors are clamped (boundary knots
//! repeated `degree + 1` times), so the basis is a partition of unity on the
//! closed boundary interval.

use crate::error::{Error, Result};

const MAX_DEGREE: usize = 7;

/// A clamped B-spline basis on `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    degree: usize,
}

impl BSplineBasis {
    /// Builds a basis from boundary knots and strictly interior knots.
    pub fn new(lower: f64, upper: f64, interior: &[f64], degree: usize) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::InvalidInput(format!(
                "B-spline degree {degree} exceeds {MAX_DEGREE}"
            )));
        }
        if !(lower.is_finite() && upper.is_finite()) || lower >= upper {
            return Err(Error::InvalidInput(format!(
                "B-spline boundary [{lower}, {upper}] is empty"
            )));
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat_n(lower, degree + 1));
        let mut prev = lower;
        for &k in interior {
            if !(k > prev && k < upper) {
                return Err(Error::InvalidInput(format!(
                    "interior knot {k} is not strictly increasing inside ({lower}, {upper})"
                )));
            }
            knots.push(k);
            prev = k;
        }
        knots.extend(std::iter::repeat_n(upper, degree + 1));
        Ok(Self { knots, degree })
    }

    /// Cubic basis with `df` functions and interior knots equally spaced
    /// between the boundaries.
    pub fn uniform(lower: f64, upper: f64, df: usize) -> Result<Self> {
        let interior = interior_count(df, 3)?;
        let knots: Vec<f64> = (1..=interior)
            .map(|j| lower + (upper - lower) * j as f64 / (interior + 1) as f64)
            .collect();
        Self::new(lower, upper, &knots, 3)
    }

    /// Cubic basis with `df` functions, boundary knots at the sample range
    /// and interior knots at equally spaced sample quantiles. Coinciding
    /// quantiles are merged, so the resulting basis may be smaller than `df`.
    pub fn from_sample(values: &[f64], df: usize) -> Result<Self> {
        let interior = interior_count(df, 3)?;
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            return Err(Error::InvalidInput(
                "no finite values to place knots".into(),
            ));
        }
        sorted.sort_by(f64::total_cmp);
        let lower = sorted[0];
        let upper = sorted[sorted.len() - 1];
        if lower == upper {
            return Err(Error::InvalidInput(format!(
                "covariate is constant ({lower}); a spline term cannot be built"
            )));
        }
        let mut knots: Vec<f64> = Vec::with_capacity(interior);
        for j in 1..=interior {
            let k = quantile_sorted(&sorted, j as f64 / (interior + 1) as f64);
            if k > lower && k < upper && knots.last().is_none_or(|&last| k > last) {
                knots.push(k);
            }
        }
        Self::new(lower, upper, &knots, 3)
    }

    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Evaluates every basis function at `x`. Values outside the boundary
    /// interval are clamped to the nearest boundary.
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.evaluate_into(x, &mut out);
        out
    }

    pub fn evaluate_into(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        out.iter_mut().for_each(|v| *v = 0.0);
        let p = self.degree;
        let x = x.clamp(self.lower(), self.upper());
        let span = self.span(x);

        // Nonzero functions N_{span-p..=span}, computed by the triangular
        // Cox-de Boor recursion.
        let mut n = [0.0; MAX_DEGREE + 1];
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        out[span - p..=span].copy_from_slice(&n[..=p]);
    }

    fn span(&self, x: f64) -> usize {
        let p = self.degree;
        let last = self.len() - 1;
        if x >= self.knots[last + 1] {
            return last;
        }
        // knots[span] <= x < knots[span + 1]
        let mut lo = p;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }
}

fn interior_count(df: usize, degree: usize) -> Result<usize> {
    if df < degree + 1 {
        return Err(Error::InvalidInput(format!(
            "a degree-{degree} B-spline basis needs df >= {}, got {df}",
            degree + 1
        )));
    }
    Ok(df - degree - 1)
}

/// Linear-interpolation quantile of an ascending sample.
pub(crate) fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

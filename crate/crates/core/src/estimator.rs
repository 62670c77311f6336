//! Efficient-influence-function estimation of the projected direct and
//! indirect excursion effects, with optional cross-fitting.
//!
//! The estimating function is affine in `γ` with slope `−blockdiag(M, M)`,
//! `M = Σ_t ω(t) f(t) f(t)ᵀ`, so the solve is closed form and the bread
//! matrix does not depend on the data.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{make_weights, Dataset, FeatureMap, Trajectory, WeightKind, WeightVector};
use crate::error::{Error, Result};
use crate::nuisance::{
    arm_indicator, Arm, NuisanceLearner, NuisanceModel, NuisanceValues, Provenance,
};

/// Cross-arm weights `q(b)/q(a)` above this are reported.
pub const WEIGHT_RATIO_WARNING: f64 = 100.0;

/// Which pair of effects the two coefficient blocks describe.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectPair {
    /// Direct effect `θ¹⁰ − θ⁰⁰` and indirect effect `θ¹¹ − θ¹⁰`.
    #[default]
    Primary,
    /// Direct effect `θ¹¹ − θ⁰¹` and indirect effect `θ⁰¹ − θ⁰⁰`.
    Swapped,
    /// Total effect `θ¹¹ − θ⁰⁰` only.
    TotalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandConfig {
    pub feature_map: FeatureMap,
    pub weights: WeightKind,
    #[serde(default)]
    pub effect_pair: EffectPair,
    /// `0` for no cross-fitting, otherwise the number of folds (at least 2).
    #[serde(default)]
    pub folds: usize,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_level() -> f64 {
    0.95
}

impl Default for EstimandConfig {
    fn default() -> Self {
        Self {
            feature_map: FeatureMap::Constant,
            weights: WeightKind::Uniform,
            effect_pair: EffectPair::Primary,
            folds: 0,
            level: default_level(),
        }
    }
}

impl EstimandConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 1 {
            return Err(Error::InvalidInput(
                "fold count must be 0 or at least 2".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidInput(format!(
                "confidence level {} outside (0, 1)",
                self.level
            )));
        }
        Ok(())
    }
}

/// The four mediation-functional EIF terms at one decision point, indexed
/// `[a][b]`; the diagonal holds `φ^{aa}`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhiSet(pub [[f64; 2]; 2]);

impl PhiSet {
    #[inline]
    pub fn get(&self, a: Arm, b: Arm) -> f64 {
        self.0[a.index()][b.index()]
    }
}

/// `φ^{aa}` from pre-evaluated nuisances.
#[inline]
pub fn phi_aa_from(y: f64, indicator: f64, v: &NuisanceValues, a: Arm) -> f64 {
    let i = a.index();
    let p = v.p[i];
    indicator / p * y - (indicator - p) / p * v.eta[i]
}

/// `φ^{ab}`, `a ≠ b`, from pre-evaluated nuisances.
#[inline]
pub fn phi_ab_from(y: f64, ind_a: f64, ind_b: f64, v: &NuisanceValues, a: Arm, b: Arm) -> f64 {
    let (i, j) = (a.index(), b.index());
    let mu = v.mu[i];
    let nu = v.nu[i];
    let cross = if ind_a != 0.0 {
        ind_a * v.q[j] / (v.p[j] * v.q[i]) * (y - mu)
    } else {
        0.0
    };
    cross + ind_b / v.p[j] * (mu - nu) + nu
}

pub fn phi_aa(traj: &Trajectory, t: usize, a: Arm, zeta: &dyn NuisanceModel) -> f64 {
    let v = zeta.evaluate(traj, t);
    phi_aa_from(traj.y, arm_indicator(traj.at(t), a), &v, a)
}

pub fn phi_ab(traj: &Trajectory, t: usize, a: Arm, b: Arm, zeta: &dyn NuisanceModel) -> f64 {
    let v = zeta.evaluate(traj, t);
    let point = traj.at(t);
    phi_ab_from(
        traj.y,
        arm_indicator(point, a),
        arm_indicator(point, b),
        &v,
        a,
        b,
    )
}

/// All four terms from a single nuisance evaluation.
pub fn phi_set(traj: &Trajectory, t: usize, v: &NuisanceValues) -> PhiSet {
    let point = traj.at(t);
    let ind = [
        arm_indicator(point, Arm::Control),
        arm_indicator(point, Arm::Treat),
    ];
    let mut out = [[0.0; 2]; 2];
    for a in Arm::BOTH {
        for b in Arm::BOTH {
            out[a.index()][b.index()] = if a == b {
                phi_aa_from(traj.y, ind[a.index()], v, a)
            } else {
                phi_ab_from(traj.y, ind[a.index()], ind[b.index()], v, a, b)
            };
        }
    }
    PhiSet(out)
}

/// `f`, `ω` and `M⁻¹` resolved against a horizon.
#[derive(Debug, Clone)]
pub struct Projection {
    pub horizon: usize,
    pub features: Vec<Vec<f64>>,
    pub weights: WeightVector,
    pub gram: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    pub condition_number: f64,
}

impl Projection {
    pub fn new(feature_map: &FeatureMap, weights: &WeightKind, horizon: usize) -> Result<Self> {
        let features = feature_map.design(horizon)?;
        let weights = make_weights(weights, horizon)?;
        let p = feature_map.dim();
        let mut gram = DMatrix::zeros(p, p);
        for (t, f) in features.iter().enumerate() {
            let w = weights.as_slice()[t];
            for r in 0..p {
                for c in 0..p {
                    gram[(r, c)] += w * f[r] * f[c];
                }
            }
        }
        let eig = gram.clone().symmetric_eigen();
        let max: f64 = eig.eigenvalues.max();
        let min: f64 = eig.eigenvalues.min();
        if !(min > 1e-12 * max.max(f64::MIN_POSITIVE)) {
            return Err(Error::DegenerateBasis(format!(
                "Σ_t ω(t) f(t) f(t)ᵀ is singular for {feature_map:?} with the given weights (smallest eigenvalue {min:.3e})"
            )));
        }
        let gram_inv = gram
            .clone()
            .cholesky()
            .ok_or_else(|| {
                Error::DegenerateBasis(
                    "Cholesky factorization of the projection Gram matrix failed".into(),
                )
            })?
            .inverse();
        Ok(Self {
            horizon,
            features,
            weights,
            gram,
            gram_inv,
            condition_number: max / min,
        })
    }

    pub fn from_config(config: &EstimandConfig, horizon: usize) -> Result<Self> {
        Self::new(&config.feature_map, &config.weights, horizon)
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// `γ ↦ blockdiag(M, …, M) γ` with `blocks` copies.
    fn apply_block(&self, m: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let p = self.dim();
        let blocks = v.len() / p;
        let mut out = DVector::zeros(v.len());
        for k in 0..blocks {
            let seg = m * v.rows(k * p, p);
            out.rows_mut(k * p, p).copy_from(&seg);
        }
        out
    }

    pub fn bread_times(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_block(&self.gram, v)
    }

    pub fn bread_inv_times(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_block(&self.gram_inv, v)
    }

    fn bread_inv_block(&self, blocks: usize) -> DMatrix<f64> {
        let p = self.dim();
        let mut out = DMatrix::zeros(blocks * p, blocks * p);
        for k in 0..blocks {
            out.view_mut((k * p, k * p), (p, p))
                .copy_from(&self.gram_inv);
        }
        out
    }
}

/// Per-participant `γ`-free parts of the estimating function for every
/// effect pair, computed from one pass over `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub primary: DVector<f64>,
    pub swapped: DVector<f64>,
    pub total: DVector<f64>,
    pub clipped: usize,
    pub weight_warnings: usize,
}

impl Contribution {
    pub fn for_pair(&self, pair: EffectPair) -> &DVector<f64> {
        match pair {
            EffectPair::Primary => &self.primary,
            EffectPair::Swapped => &self.swapped,
            EffectPair::TotalOnly => &self.total,
        }
    }
}

pub fn contribution(
    traj: &Trajectory,
    zeta: &dyn NuisanceModel,
    proj: &Projection,
) -> Contribution {
    let p = proj.dim();
    let mut primary = DVector::zeros(2 * p);
    let mut swapped = DVector::zeros(2 * p);
    let mut total = DVector::zeros(p);
    let mut clipped = 0usize;
    let mut weight_warnings = 0usize;
    for t in 1..=proj.horizon {
        let w = proj.weights.at(t);
        if w == 0.0 {
            continue;
        }
        let v = zeta.evaluate(traj, t);
        clipped += usize::from(v.clipped);
        let point = traj.at(t);
        for a in Arm::BOTH {
            if arm_indicator(point, a) == 1.0
                && v.q[a.other().index()] / v.q[a.index()] > WEIGHT_RATIO_WARNING
            {
                weight_warnings += 1;
            }
        }
        let phi = phi_set(traj, t, &v);
        let (c, tr) = (Arm::Control, Arm::Treat);
        let d = [
            phi.get(tr, c) - phi.get(c, c),
            phi.get(tr, tr) - phi.get(tr, c),
            phi.get(tr, tr) - phi.get(c, tr),
            phi.get(c, tr) - phi.get(c, c),
        ];
        let tot = phi.get(tr, tr) - phi.get(c, c);
        let f = &proj.features[t - 1];
        for k in 0..p {
            let wf = w * f[k];
            primary[k] += wf * d[0];
            primary[p + k] += wf * d[1];
            swapped[k] += wf * d[2];
            swapped[p + k] += wf * d[3];
            total[k] += wf * tot;
        }
    }
    Contribution {
        primary,
        swapped,
        total,
        clipped,
        weight_warnings,
    }
}

/// `γ`-free part of `ψ` for the configured pair.
pub fn psi_contribution(
    traj: &Trajectory,
    zeta: &dyn NuisanceModel,
    proj: &Projection,
    pair: EffectPair,
) -> DVector<f64> {
    contribution(traj, zeta, proj).for_pair(pair).clone()
}

/// `ψ(γ)` for one participant.
pub fn psi(
    traj: &Trajectory,
    zeta: &dyn NuisanceModel,
    proj: &Projection,
    pair: EffectPair,
    gamma: &DVector<f64>,
) -> DVector<f64> {
    psi_contribution(traj, zeta, proj, pair) - proj.bread_times(gamma)
}

/// Solves `P_n ψ(γ) = 0` given the empirical mean of the contributions.
pub fn solve_gamma(proj: &Projection, mean_contribution: &DVector<f64>) -> DVector<f64> {
    proj.bread_inv_times(mean_contribution)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct: Option<PointEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub indirect: Option<PointEstimate>,
    pub total: PointEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n: usize,
    pub horizon: usize,
    pub provenance: Provenance,
    /// Probability outputs clamped to `[c, 1 − c]`.
    pub clip_activations: usize,
    /// Observations whose cross-arm weight `q(b)/q(a)` exceeded the threshold.
    pub weight_ratio_warnings: usize,
    pub gram_condition_number: f64,
    /// `‖P_n ψ(γ̂)‖∞` at the solution.
    pub residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold_assignment: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    /// Coefficient labels, e.g. `alpha[1]`.
    pub names: Vec<String>,
    pub gamma_hat: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub ci: Vec<[f64; 2]>,
    pub effect_curves: Vec<CurvePoint>,
    pub diagnostics: Diagnostics,
    pub config_echo: EstimandConfig,
}

impl EstimateResult {
    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let k = self.cov.len();
        DMatrix::from_fn(k, k, |r, c| self.cov[r][c])
    }

    /// Direct-effect block (`α̂`); the total effect under [`EffectPair::TotalOnly`].
    pub fn alpha(&self) -> &[f64] {
        let p = self.config_echo.feature_map.dim();
        &self.gamma_hat[..p]
    }

    /// Indirect-effect block (`β̂`); empty under [`EffectPair::TotalOnly`].
    pub fn beta(&self) -> &[f64] {
        let p = self.config_echo.feature_map.dim();
        &self.gamma_hat[p..]
    }
}

pub(crate) fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

/// Pointwise curves `f(t)ᵀα̂`, `f(t)ᵀβ̂` and their sum with Wald bands.
pub fn effect_curves(
    gamma: &[f64],
    cov: &DMatrix<f64>,
    proj: &Projection,
    pair: EffectPair,
    level: f64,
) -> Vec<CurvePoint> {
    let p = proj.dim();
    let z = normal_quantile(level);
    let g = DVector::from_column_slice(gamma);
    let point = |loading: DVector<f64>| -> PointEstimate {
        let estimate = loading.dot(&g);
        let var = (loading.transpose() * cov * &loading)[(0, 0)].max(0.0);
        let se = var.sqrt();
        PointEstimate {
            estimate,
            se,
            lower: estimate - z * se,
            upper: estimate + z * se,
        }
    };
    (1..=proj.horizon)
        .map(|t| {
            let f = DVector::from_column_slice(&proj.features[t - 1]);
            match pair {
                EffectPair::TotalOnly => CurvePoint {
                    t,
                    direct: None,
                    indirect: None,
                    total: point(f),
                },
                _ => {
                    let mut ld = DVector::zeros(2 * p);
                    ld.rows_mut(0, p).copy_from(&f);
                    let mut li = DVector::zeros(2 * p);
                    li.rows_mut(p, p).copy_from(&f);
                    let lt = &ld + &li;
                    CurvePoint {
                        t,
                        direct: Some(point(ld)),
                        indirect: Some(point(li)),
                        total: point(lt),
                    }
                }
            }
        })
        .collect()
}

pub fn coefficient_names(pair: EffectPair, p: usize) -> Vec<String> {
    let blocks: &[&str] = match pair {
        EffectPair::TotalOnly => &["total"],
        _ => &["alpha", "beta"],
    };
    blocks
        .iter()
        .flat_map(|b| (1..=p).map(move |k| format!("{b}[{k}]")))
        .collect()
}

/// Contributions for every participant, in participant order.
pub fn contributions(
    ds: &Dataset,
    zeta: &dyn NuisanceModel,
    proj: &Projection,
) -> Vec<Contribution> {
    ds.trajectories
        .par_iter()
        .map(|tr| contribution(tr, zeta, proj))
        .collect()
}

struct Assembled {
    gamma: DVector<f64>,
    cov: DMatrix<f64>,
    residual: f64,
}

/// Fold-wise closed-form solve and sandwich. With one group this is the
/// full-sample estimator.
fn assemble(proj: &Projection, groups: &[Vec<&DVector<f64>>]) -> Assembled {
    let dim = groups[0][0].len();
    let k = groups.len() as f64;
    let n: usize = groups.iter().map(Vec::len).sum();
    let mut mean = DVector::zeros(dim);
    for g in groups {
        let mut s = DVector::zeros(dim);
        for c in g {
            s += *c;
        }
        mean += s / (g.len() as f64 * k);
    }
    let gamma = solve_gamma(proj, &mean);
    let fitted = proj.bread_times(&gamma);
    let residual = (&mean - &fitted).amax();
    let mut meat = DMatrix::zeros(dim, dim);
    for g in groups {
        let mut m = DMatrix::zeros(dim, dim);
        for c in g {
            let r = *c - &fitted;
            m.ger(1.0, &r, &r, 1.0);
        }
        meat += m / (g.len() as f64 * k);
    }
    let binv = proj.bread_inv_block(dim / proj.dim());
    let cov = &binv * meat * &binv / n as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Assembled {
        gamma,
        cov,
        residual,
    }
}

fn finish(
    ds: &Dataset,
    proj: &Projection,
    config: &EstimandConfig,
    conts: &[Contribution],
    groups: &[Vec<&DVector<f64>>],
    provenance: Provenance,
    folds: Option<(Vec<usize>, u64)>,
) -> EstimateResult {
    let a = assemble(proj, groups);
    let z = normal_quantile(config.level);
    let se: Vec<f64> = (0..a.gamma.len())
        .map(|i| a.cov[(i, i)].max(0.0).sqrt())
        .collect();
    let ci = a
        .gamma
        .iter()
        .zip(&se)
        .map(|(g, s)| [g - z * s, g + z * s])
        .collect();
    let curves = effect_curves(
        a.gamma.as_slice(),
        &a.cov,
        proj,
        config.effect_pair,
        config.level,
    );
    let (fold_assignment, seed) = match folds {
        Some((f, s)) => (Some(f), Some(s)),
        None => (None, None),
    };
    EstimateResult {
        names: coefficient_names(config.effect_pair, proj.dim()),
        gamma_hat: a.gamma.iter().copied().collect(),
        cov: a
            .cov
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        se,
        ci,
        effect_curves: curves,
        diagnostics: Diagnostics {
            n: ds.len(),
            horizon: ds.horizon(),
            provenance,
            clip_activations: conts.iter().map(|c| c.clipped).sum(),
            weight_ratio_warnings: conts.iter().map(|c| c.weight_warnings).sum(),
            gram_condition_number: proj.condition_number,
            residual: a.residual,
            fold_assignment,
            seed,
        },
        config_echo: config.clone(),
    }
}

/// Stage 2 with a given nuisance set (no fitting, no cross-fitting).
pub fn estimate_with_nuisance(
    ds: &Dataset,
    zeta: &dyn NuisanceModel,
    config: &EstimandConfig,
) -> Result<EstimateResult> {
    config.validate()?;
    ds.ensure_valid()?;
    let proj = Projection::from_config(config, ds.horizon())?;
    let conts = contributions(ds, zeta, &proj);
    let group: Vec<&DVector<f64>> = conts
        .iter()
        .map(|c| c.for_pair(config.effect_pair))
        .collect();
    Ok(finish(
        ds,
        &proj,
        config,
        &conts,
        &[group],
        zeta.provenance(),
        None,
    ))
}

/// Two-stage estimator: fit nuisances on the full sample, then solve.
pub fn estimate(
    ds: &Dataset,
    learner: &dyn NuisanceLearner,
    config: &EstimandConfig,
) -> Result<EstimateResult> {
    config.validate()?;
    ds.ensure_valid()?;
    // Fail on a degenerate basis before spending time on fits.
    Projection::from_config(config, ds.horizon())?;
    let zeta = learner.fit(ds)?;
    estimate_with_nuisance(ds, zeta.as_ref(), config)
}

/// Seeded Fisher–Yates partition into `k` near-equal folds; the first
/// `n mod k` folds receive one extra unit. Returns the fold of each unit.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = vec![0; n];
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &unit in &order[pos..pos + size] {
            folds[unit] = fold;
        }
        pos += size;
    }
    folds
}

/// Cross-fitted estimator: nuisances for fold `k` are fit on the other folds.
pub fn estimate_crossfit(
    ds: &Dataset,
    learner: &dyn NuisanceLearner,
    config: &EstimandConfig,
    seed: u64,
) -> Result<EstimateResult> {
    config.validate()?;
    ds.ensure_valid()?;
    let k = config.folds;
    if k < 2 {
        return Err(Error::InvalidInput(
            "cross-fitting needs at least 2 folds".into(),
        ));
    }
    if ds.len() < 2 * k {
        return Err(Error::InvalidInput(format!(
            "cross-fitting with K={k} needs n >= {}, got {}",
            2 * k,
            ds.len()
        )));
    }
    let proj = Projection::from_config(config, ds.horizon())?;
    let folds = fold_assignment(ds.len(), k, seed);
    let members: Vec<Vec<usize>> = (0..k)
        .map(|f| (0..ds.len()).filter(|&i| folds[i] == f).collect())
        .collect();
    let per_fold: Vec<(Vec<Contribution>, Provenance)> = (0..k)
        .into_par_iter()
        .map(|f| -> Result<_> {
            let train: Vec<usize> = (0..ds.len()).filter(|&i| folds[i] != f).collect();
            let zeta: Arc<dyn NuisanceModel> = learner.fit(&ds.select(&train))?;
            let conts = members[f]
                .iter()
                .map(|&i| contribution(&ds.trajectories[i], zeta.as_ref(), &proj))
                .collect();
            Ok((conts, zeta.provenance()))
        })
        .collect::<Result<_>>()?;
    let provenance = per_fold[0].1;
    let groups: Vec<Vec<&DVector<f64>>> = per_fold
        .iter()
        .map(|(c, _)| c.iter().map(|c| c.for_pair(config.effect_pair)).collect())
        .collect();
    let all: Vec<Contribution> = per_fold
        .iter()
        .flat_map(|(c, _)| c.iter().cloned())
        .collect();
    Ok(finish(
        ds,
        &proj,
        config,
        &all,
        &groups,
        provenance,
        Some((folds, seed)),
    ))
}

/// Dispatches on `config.folds`.
pub fn estimate_auto(
    ds: &Dataset,
    learner: &dyn NuisanceLearner,
    config: &EstimandConfig,
    seed: u64,
) -> Result<EstimateResult> {
    if config.folds >= 2 {
        estimate_crossfit(ds, learner, config, seed)
    } else {
        estimate(ds, learner, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TimePoint;
    use crate::nuisance::{
        fit_nuisance_set, FitMode, HistoryFeatureSpec, Learner, NuisanceSpec, TimeBasis,
    };
    use rand::Rng;

    /// Arbitrary but fixed nuisance values depending on the record.
    struct Wobbly;

    impl NuisanceModel for Wobbly {
        fn evaluate(&self, traj: &Trajectory, t: usize) -> NuisanceValues {
            let pt = traj.at(t);
            let s = (pt.mediator + t as f64).sin();
            let (p, q) = if pt.eligible {
                let p1 = 0.5 + 0.3 * (t as f64).cos();
                let q1 = 0.5 + 0.4 * s;
                ([1.0 - p1, p1], [1.0 - q1, q1])
            } else {
                ([1.0; 2], [1.0; 2])
            };
            NuisanceValues {
                p,
                q,
                eta: [s, 2.0 * s],
                mu: [pt.mediator, -pt.mediator + 1.0],
                nu: [0.3, -0.7 * s],
                clipped: 0,
            }
        }

        fn provenance(&self) -> Provenance {
            Provenance::Fixed
        }
    }

    fn random_data(n: usize, horizon: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::new(
            (0..n)
                .map(|i| {
                    let points = (0..horizon)
                        .map(|_| {
                            let eligible = rng.random::<f64>() < 0.8;
                            let treated = eligible && rng.random::<bool>();
                            TimePoint::new(
                                vec![rng.random()],
                                eligible,
                                treated,
                                rng.random_range(-2.0..2.0),
                            )
                        })
                        .collect();
                    Trajectory::new(format!("{i}"), points, rng.random_range(-5.0..5.0))
                })
                .collect(),
        )
    }

    fn values(eligible: bool, p1: f64) -> NuisanceValues {
        let p = if eligible { [1.0 - p1, p1] } else { [1.0, 1.0] };
        NuisanceValues {
            p,
            q: p,
            eta: [0.4, 0.9],
            mu: [0.0, 0.0],
            nu: [0.0, 0.0],
            clipped: 0,
        }
    }

    #[test]
    fn phi_aa_examples() {
        // Degenerate propensity: the η term cancels.
        let v = values(true, 1.0);
        assert_eq!(phi_aa_from(3.0, 1.0, &v, Arm::Treat), 3.0);
        // Ineligible, untreated, arm 1: structural p = 1.
        let v = values(false, 0.3);
        assert_eq!(phi_aa_from(3.0, 1.0, &v, Arm::Treat), 3.0);
        // Indicator zero: returns η.
        let v = values(true, 0.3);
        assert!((phi_aa_from(3.0, 0.0, &v, Arm::Treat) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn phi_ab_examples() {
        let mut v = values(true, 0.3);
        v.q = [0.6, 0.4];
        // μ = ν = 0 and A = d^a: weighted outcome only.
        let got = phi_ab_from(2.0, 1.0, 0.0, &v, Arm::Treat, Arm::Control);
        let want = 0.6 / (0.7 * 0.4) * 2.0;
        assert!((got - want).abs() < 1e-14);
        // Both indicators zero: ν.
        v.nu = [0.25, -1.5];
        assert_eq!(
            phi_ab_from(2.0, 0.0, 0.0, &v, Arm::Treat, Arm::Control),
            -1.5
        );
    }

    #[test]
    fn single_time_point_reduction() {
        let ds = random_data(3, 1, 1);
        let proj = Projection::new(&FeatureMap::Constant, &WeightKind::Uniform, 1).unwrap();
        for tr in &ds.trajectories {
            let v = Wobbly.evaluate(tr, 1);
            let phi = phi_set(tr, 1, &v);
            let c = psi_contribution(tr, &Wobbly, &proj, EffectPair::Primary);
            assert_eq!(c[0], phi.0[1][0] - phi.0[0][0]);
            assert_eq!(c[1], phi.0[1][1] - phi.0[1][0]);
            assert_eq!(
                phi.0[1][0],
                phi_ab(tr, 1, Arm::Treat, Arm::Control, &Wobbly)
            );
            assert_eq!(phi.0[0][0], phi_aa(tr, 1, Arm::Control, &Wobbly));
        }
    }

    #[test]
    fn psi_is_affine_in_gamma() {
        let ds = random_data(20, 6, 2);
        let proj = Projection::new(
            &FeatureMap::Polynomial { degree: 2 },
            &WeightKind::Uniform,
            6,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for tr in &ds.trajectories {
            let g1 = DVector::from_fn(6, |_, _| rng.random_range(-3.0..3.0));
            let g2 = DVector::from_fn(6, |_, _| rng.random_range(-3.0..3.0));
            let lhs = psi(tr, &Wobbly, &proj, EffectPair::Primary, &g1)
                - psi(tr, &Wobbly, &proj, EffectPair::Primary, &g2);
            let rhs = -proj.bread_times(&(&g1 - &g2));
            assert!((lhs - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn total_equals_direct_plus_indirect() {
        let ds = random_data(200, 8, 3);
        for fm in [
            FeatureMap::Constant,
            FeatureMap::Linear,
            FeatureMap::Bspline { df: 4 },
        ] {
            for pair in [EffectPair::Primary, EffectPair::Swapped] {
                let cfg = EstimandConfig {
                    feature_map: fm.clone(),
                    effect_pair: pair,
                    ..Default::default()
                };
                let two = estimate_with_nuisance(&ds, &Wobbly, &cfg).unwrap();
                let tot = estimate_with_nuisance(
                    &ds,
                    &Wobbly,
                    &EstimandConfig {
                        effect_pair: EffectPair::TotalOnly,
                        ..cfg
                    },
                )
                .unwrap();
                let p = fm.dim();
                for k in 0..p {
                    assert!((two.alpha()[k] + two.beta()[k] - tot.alpha()[k]).abs() < 1e-12);
                }
                for cp in &two.effect_curves {
                    let d = cp.direct.as_ref().unwrap().estimate
                        + cp.indirect.as_ref().unwrap().estimate;
                    assert!((d - cp.total.estimate).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn solver_residual_and_invariants() {
        let ds = random_data(150, 7, 4);
        let cfg = EstimandConfig {
            feature_map: FeatureMap::Bspline { df: 5 },
            weights: WeightKind::Custom(vec![0.1, 0.2, 0.1, 0.2, 0.1, 0.2, 0.1]),
            ..Default::default()
        };
        let r = estimate_with_nuisance(&ds, &Wobbly, &cfg).unwrap();
        assert!(r.diagnostics.residual < 1e-10);
        let cov = r.cov_matrix();
        assert!((&cov - cov.transpose()).amax() < 1e-14);
        assert!(cov.symmetric_eigen().eigenvalues.min() > -1e-10);
        let z = normal_quantile(0.95);
        for ((g, s), ci) in r.gamma_hat.iter().zip(&r.se).zip(&r.ci) {
            assert!((ci[0] - (g - z * s)).abs() < 1e-12 && (ci[1] - (g + z * s)).abs() < 1e-12);
        }
        for cp in &r.effect_curves {
            assert!(cp.total.se >= 0.0);
        }
    }

    #[test]
    fn scalar_projection_is_a_mean() {
        let ds = random_data(40, 5, 5);
        let r = estimate_with_nuisance(&ds, &Wobbly, &EstimandConfig::default()).unwrap();
        let mean: f64 = ds
            .trajectories
            .iter()
            .map(|tr| {
                (1..=5)
                    .map(|t| {
                        let phi = phi_set(tr, t, &Wobbly.evaluate(tr, t));
                        phi.0[1][0] - phi.0[0][0]
                    })
                    .sum::<f64>()
                    / 5.0
            })
            .sum::<f64>()
            / 40.0;
        assert!((r.gamma_hat[0] - mean).abs() < 1e-12);
        // Constant curve.
        for cp in &r.effect_curves {
            assert_eq!(cp.direct.as_ref().unwrap().estimate, r.gamma_hat[0]);
        }
    }

    #[test]
    fn linear_curve_starts_at_intercept() {
        let ds = random_data(40, 5, 6);
        let cfg = EstimandConfig {
            feature_map: FeatureMap::Linear,
            ..Default::default()
        };
        let r = estimate_with_nuisance(&ds, &Wobbly, &cfg).unwrap();
        assert_eq!(
            r.effect_curves[0].direct.as_ref().unwrap().estimate,
            r.alpha()[0]
        );
        assert_eq!(
            r.effect_curves[0].indirect.as_ref().unwrap().estimate,
            r.beta()[0]
        );
    }

    #[test]
    fn degenerate_basis_rejected() {
        let err =
            Projection::new(&FeatureMap::Bspline { df: 6 }, &WeightKind::Uniform, 4).unwrap_err();
        assert!(
            err.to_string().contains("degenerate projection basis"),
            "{err}"
        );
        let err = Projection::new(&FeatureMap::Linear, &WeightKind::PointMass(2), 4).unwrap_err();
        assert!(
            err.to_string().contains("degenerate projection basis"),
            "{err}"
        );
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let f = fold_assignment(11, 3, 42);
        let sizes: Vec<usize> = (0..3)
            .map(|k| f.iter().filter(|&&x| x == k).count())
            .collect();
        assert_eq!(sizes, vec![4, 4, 3]);
        assert_eq!(f, fold_assignment(11, 3, 42));
        assert_ne!(f, fold_assignment(11, 3, 43));
    }

    #[test]
    fn crossfit_is_deterministic_and_validates() {
        let ds = random_data(60, 4, 7);
        let learner = Learner::new(
            NuisanceSpec::shared(HistoryFeatureSpec::time_only(TimeBasis::Linear)),
            FitMode::Fitted,
        );
        let cfg = EstimandConfig {
            folds: 2,
            ..Default::default()
        };
        let a = estimate_crossfit(&ds, &learner, &cfg, 9).unwrap();
        let b = estimate_crossfit(&ds, &learner, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.diagnostics.residual < 1e-10);
        assert!(estimate_crossfit(
            &ds,
            &learner,
            &EstimandConfig {
                folds: 40,
                ..cfg.clone()
            },
            1
        )
        .is_err());
        assert!(EstimandConfig { folds: 1, ..cfg }.validate().is_err());
    }

    #[test]
    fn crossfit_with_fixed_nuisance_matches_full_sample_point() {
        let ds = random_data(50, 3, 8);
        let fixed = Learner::fixed(Arc::new(Wobbly));
        let cfg = EstimandConfig {
            folds: 5,
            ..Default::default()
        };
        let cf = estimate_crossfit(&ds, &fixed, &cfg, 3).unwrap();
        let full = estimate(&ds, &fixed, &EstimandConfig { folds: 0, ..cfg }).unwrap();
        // Equal fold sizes make the fold average equal the overall mean.
        for (a, b) in cf.gamma_hat.iter().zip(&full.gamma_hat) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fitted_pipeline_runs() {
        let ds = random_data(80, 4, 10);
        let zeta = fit_nuisance_set(
            &ds,
            &NuisanceSpec::shared(HistoryFeatureSpec::time_only(TimeBasis::Linear)),
            &FitMode::Fitted,
        )
        .unwrap();
        let r = estimate_with_nuisance(&ds, zeta.as_ref(), &EstimandConfig::default()).unwrap();
        assert_eq!(r.gamma_hat.len(), 2);
        let json = serde_json::to_value(&r).unwrap();
        for key in [
            "gamma_hat",
            "cov",
            "se",
            "ci",
            "effect_curves",
            "diagnostics",
            "config_echo",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}

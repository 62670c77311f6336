//! Pooled working-model fits for `ζ = (p, q, η, μ, ν)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::features::{FeatureBuilder, HistoryFeatureSpec};
use super::glm::{expit, fit_linear, fit_logistic};
use super::{arm_indicator, arm_probabilities, Arm, NuisanceModel, NuisanceValues, Provenance};
use crate::data::{Dataset, Trajectory};
use crate::error::{Error, Result};

/// How one nuisance function is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Fit(HistoryFeatureSpec),
    /// Fixed at zero (regressions only).
    Zero,
    /// Fixed constant: a probability for `p`/`q`, a mean otherwise.
    Constant(f64),
}

/// Working-model specification for each of the five nuisances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpec {
    pub p: ModelSpec,
    pub q: ModelSpec,
    pub eta: ModelSpec,
    pub mu: ModelSpec,
    pub nu: ModelSpec,
    /// Clip level applied to fitted probabilities on eligible rows.
    #[serde(default = "super::features::default_clip")]
    pub clip: f64,
}

impl NuisanceSpec {
    /// Same feature spec for all five functions.
    pub fn shared(spec: HistoryFeatureSpec) -> Self {
        let clip = spec.clip;
        Self {
            p: ModelSpec::Fit(spec.clone()),
            q: ModelSpec::Fit(spec.clone()),
            eta: ModelSpec::Fit(spec.clone()),
            mu: ModelSpec::Fit(spec.clone()),
            nu: ModelSpec::Fit(spec),
            clip,
        }
    }

    /// Parses either a full `NuisanceSpec` or a single shared
    /// `HistoryFeatureSpec`.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Either {
            Full(NuisanceSpec),
            Shared(HistoryFeatureSpec),
        }
        Ok(match serde_json::from_str::<Either>(text)? {
            Either::Full(s) => s,
            Either::Shared(h) => NuisanceSpec::shared(h),
        })
    }
}

/// Eligible-case treatment probability `P(A_t = 1 | H_t, I_t = 1)`.
pub trait Propensity: Send + Sync {
    fn prob(&self, traj: &Trajectory, t: usize) -> f64;
}

impl<F> Propensity for F
where
    F: Fn(&Trajectory, usize) -> f64 + Send + Sync,
{
    fn prob(&self, traj: &Trajectory, t: usize) -> f64 {
        self(traj, t)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantPropensity(pub f64);

impl Propensity for ConstantPropensity {
    fn prob(&self, _: &Trajectory, _: usize) -> f64 {
        self.0
    }
}

/// Reads the propensity from a covariate column (1-based).
#[derive(Debug, Clone, Copy)]
pub struct ColumnPropensity(pub usize);

impl Propensity for ColumnPropensity {
    fn prob(&self, traj: &Trajectory, t: usize) -> f64 {
        traj.at(t).x[self.0 - 1]
    }
}

#[derive(Clone)]
pub enum FitMode {
    Fitted,
    /// `p` replaced by a known randomization probability.
    KnownPropensity(Arc<dyn Propensity>),
    /// All five functions supplied externally; fitting is skipped.
    ExactTruth(Arc<dyn NuisanceModel>),
}

impl fmt::Debug for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitMode::Fitted => write!(f, "Fitted"),
            FitMode::KnownPropensity(_) => write!(f, "KnownPropensity"),
            FitMode::ExactTruth(_) => write!(f, "ExactTruth"),
        }
    }
}

#[derive(Clone)]
enum ProbModel {
    Logistic {
        features: FeatureBuilder,
        coef: Vec<f64>,
    },
    Known(Arc<dyn Propensity>),
    Constant(f64),
}

impl ProbModel {
    fn pi(&self, traj: &Trajectory, t: usize) -> f64 {
        match self {
            ProbModel::Logistic { features, coef } => {
                expit(features.linear_predictor(coef, traj, t))
            }
            ProbModel::Known(f) => f.prob(traj, t),
            ProbModel::Constant(c) => *c,
        }
    }
}

#[derive(Debug, Clone)]
enum RegModel {
    Linear {
        features: FeatureBuilder,
        coef: Vec<f64>,
    },
    Constant(f64),
}

impl RegModel {
    fn predict(&self, traj: &Trajectory, t: usize) -> f64 {
        match self {
            RegModel::Linear { features, coef } => features.linear_predictor(coef, traj, t),
            RegModel::Constant(c) => *c,
        }
    }

    fn is_constant(&self) -> Option<f64> {
        match self {
            RegModel::Constant(c) => Some(*c),
            RegModel::Linear { .. } => None,
        }
    }
}

/// A fitted nuisance set; immutable and safe to evaluate concurrently.
#[derive(Clone)]
pub struct FittedNuisance {
    p: ProbModel,
    q: ProbModel,
    eta: [RegModel; 2],
    mu: [RegModel; 2],
    nu: [RegModel; 2],
    clip: f64,
    provenance: Provenance,
}

impl fmt::Debug for FittedNuisance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FittedNuisance")
            .field("provenance", &self.provenance)
            .field("clip", &self.clip)
            .finish_non_exhaustive()
    }
}

impl NuisanceModel for FittedNuisance {
    fn evaluate(&self, traj: &Trajectory, t: usize) -> NuisanceValues {
        let point = traj.at(t);
        let clip = Some(self.clip);
        let (p, pc) = arm_probabilities(self.p.pi(traj, t), point.eligible, clip);
        let (q, qc) = arm_probabilities(self.q.pi(traj, t), point.eligible, clip);
        let eval = |m: &[RegModel; 2]| [m[0].predict(traj, t), m[1].predict(traj, t)];
        NuisanceValues {
            p,
            q,
            eta: eval(&self.eta),
            mu: eval(&self.mu),
            nu: eval(&self.nu),
            clipped: u8::from(pc) + u8::from(qc),
        }
    }

    fn provenance(&self) -> Provenance {
        self.provenance
    }
}

type Row<'a> = (&'a Trajectory, usize);

fn fit_probability(
    name: &str,
    spec: &ModelSpec,
    rows: &[Row<'_>],
    ds: &Dataset,
    with_mediator: bool,
) -> Result<ProbModel> {
    match spec {
        ModelSpec::Zero => Err(Error::InvalidInput(format!(
            "`{name}` is a probability and cannot be zero"
        ))),
        ModelSpec::Constant(c) => {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::InvalidInput(format!(
                    "`{name}` constant {c} is not a probability"
                )));
            }
            Ok(ProbModel::Constant(*c))
        }
        ModelSpec::Fit(h) => {
            let features =
                FeatureBuilder::fit(h, rows, ds.horizon(), ds.covariate_dim(), with_mediator)?;
            check_stratum(name, rows.len(), features.dim())?;
            let x = features.design(rows);
            let y: Vec<f64> = rows.iter().map(|(tr, t)| tr.at(*t).treatment()).collect();
            let fit = fit_logistic(&x, &y, &vec![1.0; rows.len()], h.ridge)
                .map_err(|e| Error::InvalidInput(format!("`{name}`: {e}")))?;
            Ok(ProbModel::Logistic {
                features,
                coef: fit.coef,
            })
        }
    }
}

fn fit_regression(
    name: &str,
    spec: &ModelSpec,
    rows: &[Row<'_>],
    response: &[f64],
    ds: &Dataset,
    with_mediator: bool,
) -> Result<RegModel> {
    match spec {
        ModelSpec::Zero => Ok(RegModel::Constant(0.0)),
        ModelSpec::Constant(c) => Ok(RegModel::Constant(*c)),
        ModelSpec::Fit(h) => {
            let features =
                FeatureBuilder::fit(h, rows, ds.horizon(), ds.covariate_dim(), with_mediator)?;
            check_stratum(name, rows.len(), features.dim())?;
            let x: DMatrix<f64> = features.design(rows);
            let fit =
                fit_linear(&x, response, &vec![1.0; rows.len()], h.ridge).map_err(|e| match e {
                    Error::RankDeficient(_) => Error::RankDeficient(name.to_string()),
                    other => other,
                })?;
            Ok(RegModel::Linear {
                features,
                coef: fit.coef,
            })
        }
    }
}

fn check_stratum(name: &str, rows: usize, needed: usize) -> Result<()> {
    if rows < needed {
        Err(Error::SparseStratum {
            stratum: name.to_string(),
            rows,
            needed,
        })
    } else {
        Ok(())
    }
}

/// Fits the pooled working models on `ds`.
///
/// `p` and `q` are logistic regressions of `A_t` among eligible rows; `η(a)`
/// and `μ(a)` are least-squares regressions of `Y` within the stratum
/// `A_t = d^a`; `ν(a)` regresses the pseudo-outcome `μ̂(a, H_t, M_t)` on
/// history within the stratum `A_t = d^{1−a}`.
pub fn fit_nuisance_set(
    ds: &Dataset,
    spec: &NuisanceSpec,
    mode: &FitMode,
) -> Result<Arc<dyn NuisanceModel>> {
    if let FitMode::ExactTruth(model) = mode {
        return Ok(Arc::clone(model));
    }
    ds.ensure_valid()?;
    let horizon = ds.horizon();
    let all_rows: Vec<Row<'_>> = ds
        .trajectories
        .iter()
        .flat_map(|tr| (1..=horizon).map(move |t| (tr, t)))
        .collect();
    let eligible: Vec<Row<'_>> = all_rows
        .iter()
        .copied()
        .filter(|(tr, t)| tr.at(*t).eligible)
        .collect();

    let (p, provenance) = match mode {
        FitMode::KnownPropensity(f) => {
            (ProbModel::Known(Arc::clone(f)), Provenance::KnownPropensity)
        }
        _ => (
            fit_probability("p", &spec.p, &eligible, ds, false)?,
            Provenance::Fitted,
        ),
    };
    let q = fit_probability("q", &spec.q, &eligible, ds, true)?;

    let stratum = |arm: Arm| -> Vec<Row<'_>> {
        all_rows
            .iter()
            .copied()
            .filter(|(tr, t)| arm_indicator(tr.at(*t), arm) == 1.0)
            .collect()
    };
    let strata = [stratum(Arm::Control), stratum(Arm::Treat)];
    let outcome = |rows: &[Row<'_>]| -> Vec<f64> { rows.iter().map(|(tr, _)| tr.y).collect() };

    let mut eta = Vec::with_capacity(2);
    let mut mu = Vec::with_capacity(2);
    for arm in Arm::BOTH {
        let rows = &strata[arm.index()];
        let y = outcome(rows);
        eta.push(fit_regression(
            &format!("eta(a={arm})"),
            &spec.eta,
            rows,
            &y,
            ds,
            false,
        )?);
        mu.push(fit_regression(
            &format!("mu(a={arm})"),
            &spec.mu,
            rows,
            &y,
            ds,
            true,
        )?);
    }
    let mut nu = Vec::with_capacity(2);
    for arm in Arm::BOTH {
        let rows = &strata[arm.other().index()];
        let model = match (&spec.nu, mu[arm.index()].is_constant()) {
            // A constant pseudo-outcome regresses to itself.
            (ModelSpec::Fit(_), Some(c)) => RegModel::Constant(c),
            _ => {
                let pseudo: Vec<f64> = rows
                    .iter()
                    .map(|(tr, t)| mu[arm.index()].predict(tr, *t))
                    .collect();
                fit_regression(&format!("nu(a={arm})"), &spec.nu, rows, &pseudo, ds, false)?
            }
        };
        nu.push(model);
    }

    let pair = |mut v: Vec<RegModel>| -> [RegModel; 2] {
        let second = v.pop().expect("two arms");
        let first = v.pop().expect("two arms");
        [first, second]
    };
    Ok(Arc::new(FittedNuisance {
        p,
        q,
        eta: pair(eta),
        mu: pair(mu),
        nu: pair(nu),
        clip: spec.clip,
        provenance,
    }))
}

/// Produces a nuisance set from (a subset of) data; implemented by the
/// working-model fitter and by fixed externally supplied sets.
pub trait NuisanceLearner: Send + Sync {
    fn fit(&self, ds: &Dataset) -> Result<Arc<dyn NuisanceModel>>;
}

/// Working-model learner: spec plus mode.
#[derive(Debug, Clone)]
pub struct Learner {
    pub spec: NuisanceSpec,
    pub mode: FitMode,
}

impl Learner {
    pub fn new(spec: NuisanceSpec, mode: FitMode) -> Self {
        Self { spec, mode }
    }

    /// Learner that ignores the data and returns `model`.
    pub fn fixed(model: Arc<dyn NuisanceModel>) -> Self {
        Self {
            spec: NuisanceSpec::shared(HistoryFeatureSpec::default()),
            mode: FitMode::ExactTruth(model),
        }
    }
}

impl NuisanceLearner for Learner {
    fn fit(&self, ds: &Dataset) -> Result<Arc<dyn NuisanceModel>> {
        fit_nuisance_set(ds, &self.spec, &self.mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TimePoint;
    use crate::nuisance::features::{CovariateBasis, TimeBasis, XTerm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = 4;
        let trajs = (0..n)
            .map(|i| {
                let mut y = 0.0;
                let points = (0..horizon)
                    .map(|_| {
                        let x: f64 = rng.random_range(-1.0..1.0);
                        let eligible = rng.random::<f64>() < 0.8;
                        let treated = eligible && rng.random::<f64>() < expit(0.3 * x);
                        let m =
                            0.5 * f64::from(u8::from(treated)) + x + rng.random_range(-0.5..0.5);
                        y += m + x;
                        TimePoint::new(vec![x], eligible, treated, m)
                    })
                    .collect();
                Trajectory::new(format!("{i}"), points, y + rng.random_range(-1.0..1.0))
            })
            .collect();
        Dataset::new(trajs)
    }

    fn spec() -> HistoryFeatureSpec {
        HistoryFeatureSpec {
            time_basis: TimeBasis::Linear,
            mediator_basis: Some(CovariateBasis::Linear),
            x_terms: vec![XTerm {
                column: 1,
                basis: CovariateBasis::Linear,
            }],
            ..Default::default()
        }
    }

    #[test]
    fn complementarity_and_structure() {
        let ds = toy(300, 1);
        let model = fit_nuisance_set(&ds, &NuisanceSpec::shared(spec()), &FitMode::Fitted).unwrap();
        for tr in &ds.trajectories {
            for t in 1..=ds.horizon() {
                let v = model.evaluate(tr, t);
                if tr.at(t).eligible {
                    assert_eq!(v.p[0] + v.p[1], 1.0);
                    assert_eq!(v.q[0] + v.q[1], 1.0);
                    assert!(v.p.iter().chain(&v.q).all(|&p| (0.01..=0.99).contains(&p)));
                } else {
                    assert_eq!(v.p, [1.0, 1.0]);
                    assert_eq!(v.q, [1.0, 1.0]);
                }
            }
        }
    }

    #[test]
    fn constant_regressions_evaluate_to_constant() {
        let ds = toy(100, 2);
        let s = NuisanceSpec {
            eta: ModelSpec::Zero,
            nu: ModelSpec::Zero,
            ..NuisanceSpec::shared(spec())
        };
        let model = fit_nuisance_set(&ds, &s, &FitMode::Fitted).unwrap();
        for tr in &ds.trajectories {
            let v = model.evaluate(tr, 2);
            assert_eq!(v.eta, [0.0, 0.0]);
            assert_eq!(v.nu, [0.0, 0.0]);
        }
    }

    #[test]
    fn nu_degenerates_with_constant_mu() {
        let ds = toy(200, 3);
        // μ depends on history only, never on m; ν is then a regression of a
        // constant-in-m pseudo outcome. With μ fixed constant it is exact.
        let s = NuisanceSpec {
            mu: ModelSpec::Constant(2.5),
            ..NuisanceSpec::shared(spec())
        };
        let model = fit_nuisance_set(&ds, &s, &FitMode::Fitted).unwrap();
        for tr in &ds.trajectories {
            for t in 1..=4 {
                let v = model.evaluate(tr, t);
                assert_eq!(v.nu, [2.5, 2.5]);
            }
        }
        // Same through an intercept-only μ fit, which is constant as a function.
        let s = NuisanceSpec {
            mu: ModelSpec::Fit(HistoryFeatureSpec::time_only(TimeBasis::None)),
            ..NuisanceSpec::shared(spec())
        };
        let model = fit_nuisance_set(&ds, &s, &FitMode::Fitted).unwrap();
        for tr in &ds.trajectories {
            let v = model.evaluate(tr, 3);
            assert!((v.nu[0] - v.mu[0]).abs() < 1e-9);
            assert!((v.nu[1] - v.mu[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn known_propensity_mode() {
        let ds = toy(100, 4);
        let pi: Arc<dyn Propensity> = Arc::new(ConstantPropensity(0.6));
        let model = fit_nuisance_set(
            &ds,
            &NuisanceSpec::shared(spec()),
            &FitMode::KnownPropensity(pi),
        )
        .unwrap();
        assert_eq!(model.provenance(), Provenance::KnownPropensity);
        let tr = ds.trajectories.iter().find(|tr| tr.at(1).eligible).unwrap();
        assert!((model.evaluate(tr, 1).p[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sparse_stratum_is_named() {
        let ds = toy(2, 5);
        let big = HistoryFeatureSpec {
            time_basis: TimeBasis::Dummies,
            x_terms: vec![XTerm {
                column: 1,
                basis: CovariateBasis::Bspline { df: 6 },
            }],
            interactions: crate::nuisance::Interactions { time: true },
            ..Default::default()
        };
        let Err(err) = fit_nuisance_set(&ds, &NuisanceSpec::shared(big), &FitMode::Fitted) else {
            panic!("expected a sparse-stratum error");
        };
        assert!(err.to_string().contains("stratum"), "{err}");
    }

    #[test]
    fn spec_json_forms() {
        let shared = NuisanceSpec::from_json(r#"{"time_basis": {"kind": "linear"}}"#).unwrap();
        assert!(matches!(shared.mu, ModelSpec::Fit(_)));
        let full = NuisanceSpec::from_json(
            r#"{"p": {"constant": 0.5}, "q": {"fit": {}}, "eta": "zero", "mu": {"fit": {}}, "nu": "zero"}"#,
        )
        .unwrap();
        assert_eq!(full.eta, ModelSpec::Zero);
        assert_eq!(full.p, ModelSpec::Constant(0.5));
        assert_eq!(full.clip, 0.01);
    }
}

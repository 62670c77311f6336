//! Exact identification checks on small finite-support generative models.
//!
//! A [`DiscreteDgp`] has scalar `X_t` and `M_t` on finite supports, a
//! binary eligibility indicator and a binary treatment. Conditional tables
//! depend on the history only through the context `(A_{t−1}, M_{t−1})` and,
//! after `X_t` is drawn, on `X_t`. This keeps the tables small; it restricts
//! the oracle, not the estimator. The outcome enters only through its mean
//! given the full path.

mod identify;
mod truth;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TimePoint, Trajectory};
use crate::error::{Error, Result};
use crate::simulation::stream_rng;

pub use identify::{
    exact_expectation, route_agreement, theta_all, theta_definition, theta_gformula,
    theta_weighting, Agreement, Route,
};
pub use truth::{verify_estimator_on_dgp, DgpTruth, VerifyReport, VerifyRow};

pub const MAX_HORIZON: usize = 3;
pub const MAX_SUPPORT: usize = 4;
const ROW_TOL: f64 = 1e-12;
/// Pairwise tolerance for the three identification routes.
pub const AGREEMENT_TOL: f64 = 1e-10;

/// One decision point of a path, by support index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Step {
    pub x: usize,
    pub eligible: bool,
    pub treated: bool,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDgp {
    pub horizon: usize,
    pub x_support: Vec<f64>,
    pub m_support: Vec<f64>,
    /// `P(X_t = x_k | context)`, indexed `[t − 1][context][k]`. The context
    /// is `A_{t−1} · |M| + index(M_{t−1})`; at `t = 1` only context 0 is used.
    pub covariate: Vec<Vec<Vec<f64>>>,
    /// `P(I_t = 1 | context, X_t)`, indexed `[t − 1][context][x]`.
    pub eligibility: Vec<Vec<Vec<f64>>>,
    /// `P(A_t = 1 | context, X_t, I_t = 1)`; ineligible points are never treated.
    pub treatment: Vec<Vec<Vec<f64>>>,
    /// `P(M_t = m_k | context, X_t, A_t)`, indexed `[t − 1][context][x][a][k]`.
    pub mediator: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    /// `E[Y | path]` over [`DiscreteDgp::path_index`].
    pub outcome_mean: Vec<f64>,
}

/// Options for [`random_dgp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomDgpOptions {
    pub max_horizon: usize,
    pub max_support: usize,
    /// Lower bound on every table entry.
    pub floor: f64,
}

impl Default for RandomDgpOptions {
    fn default() -> Self {
        Self {
            max_horizon: MAX_HORIZON,
            max_support: MAX_SUPPORT,
            floor: 0.05,
        }
    }
}

impl DiscreteDgp {
    pub fn nx(&self) -> usize {
        self.x_support.len()
    }

    pub fn nm(&self) -> usize {
        self.m_support.len()
    }

    pub fn contexts(&self) -> usize {
        2 * self.nm()
    }

    /// Number of distinct codes per decision point.
    pub fn step_radix(&self) -> usize {
        4 * self.nx() * self.nm()
    }

    /// Number of outcome-mean entries, `step_radix^T`.
    pub fn path_count(&self) -> usize {
        self.step_radix().pow(self.horizon as u32)
    }

    pub fn step_code(&self, s: Step) -> usize {
        ((s.x * 2 + s.eligible as usize) * 2 + s.treated as usize) * self.nm() + s.m
    }

    pub fn decode_step(&self, code: usize) -> Step {
        let nm = self.nm();
        let rest = code / nm;
        Step {
            m: code % nm,
            treated: rest % 2 == 1,
            eligible: (rest / 2) % 2 == 1,
            x: rest / 4,
        }
    }

    /// Mixed-radix path code with the first decision point most significant.
    pub fn path_index(&self, steps: &[Step]) -> usize {
        steps
            .iter()
            .fold(0, |acc, &s| acc * self.step_radix() + self.step_code(s))
    }

    pub fn decode_path(&self, mut index: usize) -> Vec<Step> {
        let r = self.step_radix();
        let mut steps = vec![Step::default(); self.horizon];
        for s in steps.iter_mut().rev() {
            *s = self.decode_step(index % r);
            index /= r;
        }
        steps
    }

    /// Context for decision point `t` given the previous step.
    pub fn context(&self, prev: Option<Step>) -> usize {
        prev.map_or(0, |p| p.treated as usize * self.nm() + p.m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(format!("discrete DGP: {msg}")));
        if self.horizon == 0 || self.horizon > MAX_HORIZON {
            return bad(format!(
                "horizon {} outside 1..={MAX_HORIZON}",
                self.horizon
            ));
        }
        for (name, support) in [
            ("x_support", &self.x_support),
            ("m_support", &self.m_support),
        ] {
            if support.is_empty() || support.len() > MAX_SUPPORT {
                return bad(format!("{name} must have 1..={MAX_SUPPORT} points"));
            }
            if support.iter().any(|v| !v.is_finite()) {
                return bad(format!("{name} has a non-finite point"));
            }
            for (i, a) in support.iter().enumerate() {
                if support[i + 1..].contains(a) {
                    return bad(format!("{name} repeats {a}"));
                }
            }
        }
        let (t, c, nx, nm) = (self.horizon, self.contexts(), self.nx(), self.nm());
        let shape = |name: &str, len: usize, want: usize| -> Result<()> {
            if len == want {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!(
                    "discrete DGP: {name} has length {len}, expected {want}"
                )))
            }
        };
        for (name, table) in [
            ("covariate", &self.covariate),
            ("eligibility", &self.eligibility),
            ("treatment", &self.treatment),
        ] {
            shape(name, table.len(), t)?;
            for per_t in table {
                shape(name, per_t.len(), c)?;
            }
        }
        shape("mediator", self.mediator.len(), t)?;
        shape("outcome_mean", self.outcome_mean.len(), self.path_count())?;
        for s in 0..t {
            for ctx in 0..c {
                let label = format!("t={}, context {ctx}", s + 1);
                check_distribution(
                    &self.covariate[s][ctx],
                    nx,
                    &format!("covariate at {label}"),
                )?;
                shape("eligibility", self.eligibility[s][ctx].len(), nx)?;
                shape("treatment", self.treatment[s][ctx].len(), nx)?;
                shape("mediator", self.mediator[s].len(), c)?;
                shape("mediator", self.mediator[s][ctx].len(), nx)?;
                for x in 0..nx {
                    check_probability(
                        self.eligibility[s][ctx][x],
                        &format!("eligibility at {label}, x {x}"),
                    )?;
                    check_probability(
                        self.treatment[s][ctx][x],
                        &format!("treatment at {label}, x {x}"),
                    )?;
                    shape("mediator", self.mediator[s][ctx][x].len(), 2)?;
                    for a in 0..2 {
                        check_distribution(
                            &self.mediator[s][ctx][x][a],
                            nm,
                            &format!("mediator at {label}, x {x}, a {a}"),
                        )?;
                    }
                }
            }
        }
        if self.outcome_mean.iter().any(|v| !v.is_finite()) {
            return bad("outcome_mean has a non-finite entry".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dgp: Self = serde_json::from_str(text)?;
        dgp.validate()?;
        Ok(dgp)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The one-step example: `I ≡ 1`, `A ~ Bern(0.5)`, `M | A ~ Bern(0.3 + 0.4A)`
    /// and `E[Y | A, M] = A + M`.
    pub fn tiny() -> Self {
        let mut dgp = Self::constant(1, vec![0.0], vec![0.0, 1.0], 1.0, 0.5);
        for ctx in 0..dgp.contexts() {
            dgp.mediator[0][ctx][0] = vec![vec![0.7, 0.3], vec![0.3, 0.7]];
        }
        dgp.set_outcome(|steps| dgp_value(steps[0].treated) + dgp_value(steps[0].m == 1));
        dgp
    }

    /// Context-free tables with uniform covariate and mediator laws, the
    /// given eligibility and treatment probabilities and a zero outcome.
    pub fn constant(
        horizon: usize,
        x_support: Vec<f64>,
        m_support: Vec<f64>,
        eligibility: f64,
        treatment: f64,
    ) -> Self {
        let (nx, nm) = (x_support.len(), m_support.len());
        let c = 2 * nm;
        let mut dgp = Self {
            horizon,
            covariate: vec![vec![vec![1.0 / nx as f64; nx]; c]; horizon],
            eligibility: vec![vec![vec![eligibility; nx]; c]; horizon],
            treatment: vec![vec![vec![treatment; nx]; c]; horizon],
            mediator: vec![vec![vec![vec![vec![1.0 / nm as f64; nm]; 2]; nx]; c]; horizon],
            x_support,
            m_support,
            outcome_mean: Vec::new(),
        };
        dgp.outcome_mean = vec![0.0; dgp.path_count()];
        dgp
    }

    /// Fills the outcome table from a function of the decoded path.
    pub fn set_outcome(&mut self, f: impl Fn(&[Step]) -> f64) {
        self.outcome_mean = (0..self.path_count())
            .map(|i| f(&self.decode_path(i)))
            .collect();
    }

    /// Support value of `X_t` for a step.
    pub fn x_value(&self, s: Step) -> f64 {
        self.x_support[s.x]
    }

    pub fn m_value(&self, s: Step) -> f64 {
        self.m_support[s.m]
    }

    /// Draws `n` trajectories under the behavior policy. `Y` is its path
    /// mean plus standard normal noise.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let weighted = |w: &[f64]| {
            WeightedIndex::new(w).map_err(|e| Error::InvalidInput(format!("discrete DGP: {e}")))
        };
        let trajectories = (0..n)
            .map(|i| {
                let mut rng = stream_rng(seed, i as u64);
                let mut steps: Vec<Step> = Vec::with_capacity(self.horizon);
                let mut points = Vec::with_capacity(self.horizon);
                for t in 0..self.horizon {
                    let ctx = self.context(steps.last().copied());
                    let x = weighted(&self.covariate[t][ctx])?.sample(&mut rng);
                    let eligible = rng.random::<f64>() < self.eligibility[t][ctx][x];
                    let treated = eligible && rng.random::<f64>() < self.treatment[t][ctx][x];
                    let m = weighted(&self.mediator[t][ctx][x][treated as usize])?.sample(&mut rng);
                    let s = Step {
                        x,
                        eligible,
                        treated,
                        m,
                    };
                    points.push(TimePoint::new(
                        vec![self.x_value(s)],
                        eligible,
                        treated,
                        self.m_value(s),
                    ));
                    steps.push(s);
                }
                let noise: f64 = rng.sample(StandardNormal);
                Ok(Trajectory::new(
                    format!("{}", i + 1),
                    points,
                    self.outcome_mean[self.path_index(&steps)] + noise,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(trajectories))
    }

    /// Maps an observed trajectory back to support indices.
    pub fn steps_of(&self, traj: &Trajectory) -> Option<Vec<Step>> {
        if traj.horizon() != self.horizon {
            return None;
        }
        traj.points
            .iter()
            .map(|p| {
                let x = self
                    .x_support
                    .iter()
                    .position(|&v| Some(&v) == p.x.first())?;
                let m = self.m_support.iter().position(|&v| v == p.mediator)?;
                Some(Step {
                    x,
                    eligible: p.eligible,
                    treated: p.treated,
                    m,
                })
            })
            .collect()
    }
}

fn dgp_value(flag: bool) -> f64 {
    if flag {
        1.0
    } else {
        0.0
    }
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "discrete DGP: {what} is {p}, not a probability"
        )))
    }
}

fn check_distribution(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::InvalidInput(format!(
            "discrete DGP: {what} has {} entries, expected {len}",
            row.len()
        )));
    }
    for &p in row {
        check_probability(p, what)?;
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidInput(format!(
            "discrete DGP: {what} sums to {sum}"
        )));
    }
    Ok(())
}

/// A normalized positive vector with every entry at least `floor`: the
/// floor plus a Dirichlet(1) share of the remaining mass.
fn floored_simplex<R: Rng>(rng: &mut R, k: usize, floor: f64) -> Vec<f64> {
    let g: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = g.iter().sum();
    let free = 1.0 - k as f64 * floor;
    g.into_iter().map(|v| floor + free * v / total).collect()
}

/// Random tables satisfying positivity with margin `options.floor`.
pub fn random_dgp<R: Rng>(rng: &mut R, options: &RandomDgpOptions) -> DiscreteDgp {
    let floor = options.floor;
    let horizon = rng.random_range(1..=options.max_horizon.clamp(1, MAX_HORIZON));
    let max_support = options.max_support.clamp(1, MAX_SUPPORT);
    let support = |rng: &mut R| -> Vec<f64> {
        let k = rng.random_range(1..=max_support);
        let mut v: Vec<f64> = Vec::with_capacity(k);
        while v.len() < k {
            let candidate = (rng.random_range(-2.0..2.0_f64) * 8.0).round() / 8.0;
            if !v.contains(&candidate) {
                v.push(candidate);
            }
        }
        v
    };
    let x_support = support(rng);
    let m_support = support(rng);
    let mut dgp = DiscreteDgp::constant(horizon, x_support, m_support, 1.0, 0.5);
    let (c, nx, nm) = (dgp.contexts(), dgp.nx(), dgp.nm());
    let bernoulli = |rng: &mut R| floored_simplex(rng, 2, floor)[1];
    for t in 0..horizon {
        for ctx in 0..c {
            dgp.covariate[t][ctx] = floored_simplex(rng, nx, floor);
            for x in 0..nx {
                dgp.eligibility[t][ctx][x] = bernoulli(rng);
                dgp.treatment[t][ctx][x] = bernoulli(rng);
                for a in 0..2 {
                    dgp.mediator[t][ctx][x][a] = floored_simplex(rng, nm, floor);
                }
            }
        }
    }
    dgp.outcome_mean = (0..dgp.path_count())
        .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    dgp
}

/// `count` random models from one seeded stream.
pub fn random_dgps(count: usize, seed: u64, options: &RandomDgpOptions) -> Vec<DiscreteDgp> {
    let mut rng = stream_rng(seed, 0);
    (0..count).map(|_| random_dgp(&mut rng, options)).collect()
}

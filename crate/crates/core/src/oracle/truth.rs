//! Exact nuisances of a [`DiscreteDgp`] and an end-to-end estimator check.

use serde::{Deserialize, Serialize};

use super::identify::StepMarginals;
use super::{theta_all, DiscreteDgp, Route};
use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::estimator::{estimate_with_nuisance, EstimandConfig, Projection};
use crate::nuisance::{arm_probabilities, Arm, NuisanceModel, NuisanceValues, Provenance};
use crate::simulation::project_effects;

/// `p, q, η, μ, ν` computed from the behavior joint law. Records outside
/// the supports evaluate to NaN.
pub struct DgpTruth {
    dgp: DiscreteDgp,
    marginals: Vec<StepMarginals>,
}

impl DgpTruth {
    pub fn new(dgp: &DiscreteDgp) -> Result<Self> {
        dgp.validate()?;
        let joint = dgp.joint();
        let marginals = (1..=dgp.horizon)
            .map(|t| StepMarginals::new(dgp, &joint, t))
            .collect();
        Ok(Self {
            dgp: dgp.clone(),
            marginals,
        })
    }

    fn values(&self, traj: &Trajectory, t: usize) -> Option<NuisanceValues> {
        let steps = self.dgp.steps_of(traj)?;
        let marg = &self.marginals[t - 1];
        let h = self.dgp.path_index(&steps[..t]) / (2 * self.dgp.nm());
        let point = traj.at(t);
        let m = steps[t - 1].m;
        let eligible = point.eligible;
        let p1 = marg.treatment_mass(h, true) / marg.history_mass(h);
        let q1 = marg.mediator_propensity(h, true, m)?;
        let arm = |a: Arm| a == Arm::Treat && eligible;
        let mut v = NuisanceValues {
            p: arm_probabilities(p1, eligible, None).0,
            q: arm_probabilities(q1, eligible, None).0,
            ..NuisanceValues::default()
        };
        for a in Arm::BOTH {
            let (da, db) = (arm(a), arm(a.other()));
            v.eta[a.index()] = marg.regression(h, da)?;
            v.mu[a.index()] = marg.outcome_mean(h, da, m)?;
            let pb = marg.treatment_mass(h, db);
            let mut nu = 0.0;
            for k in 0..self.dgp.nm() {
                let w = marg.cell_mass(h, db, k) / pb;
                if w > 0.0 {
                    nu += w * marg.outcome_mean(h, da, k)?;
                }
            }
            v.nu[a.index()] = nu;
        }
        Some(v)
    }
}

impl NuisanceModel for DgpTruth {
    fn evaluate(&self, traj: &Trajectory, t: usize) -> NuisanceValues {
        self.values(traj, t).unwrap_or(NuisanceValues {
            p: [f64::NAN; 2],
            q: [f64::NAN; 2],
            eta: [f64::NAN; 2],
            mu: [f64::NAN; 2],
            nu: [f64::NAN; 2],
            clipped: 0,
        })
    }

    fn provenance(&self) -> Provenance {
        Provenance::ExactTruth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub truth: f64,
    /// `(estimate − truth) / se`.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub n: usize,
    pub seed: u64,
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    /// Whether every coefficient lies within `k` standard errors of its truth.
    pub fn within(&self, k: f64) -> bool {
        self.rows.iter().all(|r| r.z.abs() < k)
    }
}

/// Samples from `dgp`, estimates with its exact nuisances and compares the
/// coefficients with the projected oracle functionals.
pub fn verify_estimator_on_dgp(
    dgp: &DiscreteDgp,
    n: usize,
    seed: u64,
    config: &EstimandConfig,
) -> Result<VerifyReport> {
    let ds = dgp.sample(n, seed)?;
    let truth = DgpTruth::new(dgp)?;
    let thetas = theta_all(dgp, Route::Gformula)?;
    let proj = Projection::from_config(config, dgp.horizon)?;
    let target = project_effects(&thetas, &proj, config.effect_pair);
    let res = estimate_with_nuisance(&ds, &truth, config)?;
    if res.gamma_hat.len() != target.len() {
        return Err(Error::InvalidInput("coefficient count mismatch".into()));
    }
    let rows = res
        .names
        .iter()
        .zip(&res.gamma_hat)
        .zip(&res.se)
        .zip(target)
        .map(|(((name, &estimate), &se), truth)| VerifyRow {
            name: name.clone(),
            estimate,
            se,
            truth,
            z: (estimate - truth) / se,
        })
        .collect();
    Ok(VerifyReport { n, seed, rows })
}

//! Nuisance scenarios used by the simulation studies.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::gm1::{Gm1Params, Gm1Truth};
use super::gm2::Gm2Params;
use super::perturb::{PerturbationSpec, Perturbed, Rates};
use crate::data::Trajectory;
use crate::nuisance::fit::{FitMode, Learner, ModelSpec, NuisanceSpec, Propensity};
use crate::nuisance::{
    CovariateBasis, HistoryFeatureSpec, Interactions, LagTerm, LagVariable, NuisanceModel,
    NuisanceValues, Provenance, TimeBasis, XTerm,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Gm1,
    Gm2,
}

impl std::fmt::Display for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Generator::Gm1 => "gm1",
            Generator::Gm2 => "gm2",
        })
    }
}

/// Which subset of the exact nuisances is kept (the rest are replaced by
/// fixed wrong functions: probabilities 0.5, regressions 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustConfig {
    /// `p, q` correct.
    I,
    /// `p, μ` correct.
    Ii,
    /// `η, ν, q` correct.
    Iii,
    /// `η, ν, μ` correct.
    Iv,
    AllWrong,
}

impl RobustConfig {
    pub const ALL: [RobustConfig; 5] = [
        RobustConfig::I,
        RobustConfig::Ii,
        RobustConfig::Iii,
        RobustConfig::Iv,
        RobustConfig::AllWrong,
    ];

    /// Correctness flags for `[p, q, η, μ, ν]`.
    pub fn correct(self) -> [bool; 5] {
        match self {
            RobustConfig::I => [true, true, false, false, false],
            RobustConfig::Ii => [true, false, false, true, false],
            RobustConfig::Iii => [false, true, true, false, true],
            RobustConfig::Iv => [false, false, true, true, true],
            RobustConfig::AllWrong => [false; 5],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RobustConfig::I => "i",
            RobustConfig::Ii => "ii",
            RobustConfig::Iii => "iii",
            RobustConfig::Iv => "iv",
            RobustConfig::AllWrong => "all_wrong",
        }
    }
}

/// Exact nuisances with a chosen subset replaced by fixed wrong values.
pub struct Mixed {
    truth: Arc<dyn NuisanceModel>,
    correct: [bool; 5],
}

impl Mixed {
    pub fn new(truth: Arc<dyn NuisanceModel>, correct: [bool; 5]) -> Self {
        Self { truth, correct }
    }
}

impl NuisanceModel for Mixed {
    fn evaluate(&self, traj: &Trajectory, t: usize) -> NuisanceValues {
        let v = self.truth.evaluate(traj, t);
        let eligible = traj.at(t).eligible;
        let wrong_prob = if eligible { [0.5, 0.5] } else { [1.0, 1.0] };
        let [p, q, eta, mu, nu] = self.correct;
        NuisanceValues {
            p: if p { v.p } else { wrong_prob },
            q: if q { v.q } else { wrong_prob },
            eta: if eta { v.eta } else { [0.0; 2] },
            mu: if mu { v.mu } else { [0.0; 2] },
            nu: if nu { v.nu } else { [0.0; 2] },
            clipped: 0,
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::Fixed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Scenario {
    /// Exact nuisances (GM-1 only).
    Exact,
    /// Exact nuisances perturbed at rates `(r₁, r₂)` (GM-1 only).
    Perturbed,
    /// Exactly one of the four robustness configurations (GM-1 only).
    Robustness { config: RobustConfig },
    /// Pooled working models with flexible time interactions (GM-1 only).
    Gm1Working,
    /// GM-2 working-model scenarios 1 to 4 with the known propensity.
    Gm2 { scenario: u8 },
    /// A user-supplied nuisance specification.
    Custom {
        spec: NuisanceSpec,
        #[serde(default)]
        known_propensity: bool,
    },
}

impl Scenario {
    pub fn label(&self) -> String {
        match self {
            Scenario::Exact => "exact".into(),
            Scenario::Perturbed => "perturbed".into(),
            Scenario::Robustness { config } => format!("robustness_{}", config.label()),
            Scenario::Gm1Working => "gm1_working".into(),
            Scenario::Gm2 { scenario } => format!("gm2_s{scenario}"),
            Scenario::Custom { .. } => "custom".into(),
        }
    }

    pub fn uses_rates(&self) -> bool {
        matches!(self, Scenario::Perturbed)
    }
}

fn spline(df: usize) -> CovariateBasis {
    CovariateBasis::Bspline { df }
}

/// Working models for GM-1 that contain the exact nuisances up to spline
/// approximation: time dummies interacted with a spline in `X_t`, and for
/// the regressions the lagged outcome-relevant terms.
pub fn gm1_working_spec() -> NuisanceSpec {
    let base = HistoryFeatureSpec {
        time_basis: TimeBasis::Dummies,
        mediator_basis: Some(CovariateBasis::Linear),
        x_terms: vec![XTerm {
            column: 1,
            basis: spline(6),
        }],
        interactions: Interactions { time: true },
        ..Default::default()
    };
    let mut reg = base.clone();
    for lag in 1..=4 {
        for variable in [
            LagVariable::Covariate(1),
            LagVariable::Treatment,
            LagVariable::Mediator,
            LagVariable::TreatmentMediator,
        ] {
            reg.lags.push(LagTerm {
                variable,
                lag,
                basis: CovariateBasis::Linear,
            });
        }
    }
    NuisanceSpec {
        p: ModelSpec::Fit(base.clone()),
        q: ModelSpec::Fit(base),
        eta: ModelSpec::Fit(reg.clone()),
        mu: ModelSpec::Fit(reg.clone()),
        nu: ModelSpec::Fit(reg),
        clip: crate::nuisance::DEFAULT_CLIP,
    }
}

/// The four GM-2 scenarios; `η = ν = 0` throughout and `p` is known.
pub fn gm2_scenario_spec(scenario: u8) -> Option<NuisanceSpec> {
    let time = TimeBasis::Bspline { df: 5 };
    let rich_q = HistoryFeatureSpec {
        time_basis: time,
        mediator_basis: Some(spline(5)),
        lags: vec![
            LagTerm {
                variable: LagVariable::Treatment,
                lag: 1,
                basis: CovariateBasis::Linear,
            },
            LagTerm {
                variable: LagVariable::Mediator,
                lag: 1,
                basis: spline(5),
            },
        ],
        x_terms: vec![XTerm {
            column: 1,
            basis: spline(5),
        }],
        ..Default::default()
    };
    let rich_mu = HistoryFeatureSpec {
        time_basis: time,
        mediator_basis: Some(spline(5)),
        x_terms: vec![XTerm {
            column: 1,
            basis: spline(5),
        }],
        ..Default::default()
    };
    let time_only = HistoryFeatureSpec::time_only(time);
    let (q, mu) = match scenario {
        1 => (rich_q, rich_mu),
        2 => (time_only.clone(), rich_mu),
        3 => (rich_q, time_only),
        4 => (time_only.clone(), time_only),
        _ => return None,
    };
    Some(NuisanceSpec {
        // Replaced by the known propensity.
        p: ModelSpec::Constant(0.5),
        q: ModelSpec::Fit(q),
        eta: ModelSpec::Zero,
        mu: ModelSpec::Fit(mu),
        nu: ModelSpec::Zero,
        clip: crate::nuisance::DEFAULT_CLIP,
    })
}

struct Gm2Propensity(Gm2Params);

impl Propensity for Gm2Propensity {
    fn prob(&self, traj: &Trajectory, t: usize) -> f64 {
        self.0.propensity(traj, t)
    }
}

pub fn gm2_known_propensity() -> Arc<dyn Propensity> {
    Arc::new(Gm2Propensity(Gm2Params::default()))
}

/// Builds the learner for one replicate. `n` and `seed` feed the
/// perturbation draw.
pub fn scenario_learner(
    generator: Generator,
    scenario: &Scenario,
    gm1: &Gm1Params,
    rates: Option<(f64, f64)>,
    n: usize,
    seed: u64,
) -> crate::error::Result<Learner> {
    use crate::error::Error;
    let gm1_only = || -> crate::error::Result<Arc<dyn NuisanceModel>> {
        if generator != Generator::Gm1 {
            return Err(Error::InvalidInput(format!(
                "scenario `{}` requires gm1",
                scenario.label()
            )));
        }
        Ok(Arc::new(Gm1Truth::new(gm1.clone())))
    };
    Ok(match scenario {
        Scenario::Exact => Learner::fixed(gm1_only()?),
        Scenario::Perturbed => {
            let (r1, r2) = rates
                .ok_or_else(|| Error::InvalidInput("perturbed scenario needs r1 and r2".into()))?;
            let spec = PerturbationSpec {
                rates: Rates::paired(r1, r2),
                n,
                seed,
            };
            Learner::fixed(Arc::new(Perturbed::new(gm1_only()?, &spec)))
        }
        Scenario::Robustness { config } => {
            Learner::fixed(Arc::new(Mixed::new(gm1_only()?, config.correct())))
        }
        Scenario::Gm1Working => {
            gm1_only()?;
            Learner::new(gm1_working_spec(), FitMode::Fitted)
        }
        Scenario::Gm2 { scenario: s } => {
            if generator != Generator::Gm2 {
                return Err(Error::InvalidInput("gm2 scenarios require gm2".into()));
            }
            let spec = gm2_scenario_spec(*s)
                .ok_or_else(|| Error::InvalidInput(format!("gm2 scenario {s} not in 1..=4")))?;
            Learner::new(spec, FitMode::KnownPropensity(gm2_known_propensity()))
        }
        Scenario::Custom {
            spec,
            known_propensity,
        } => {
            let mode = if *known_propensity {
                match generator {
                    Generator::Gm2 => FitMode::KnownPropensity(gm2_known_propensity()),
                    Generator::Gm1 => {
                        let p = gm1.clone();
                        let f = move |tr: &Trajectory, t: usize| p.propensity(t, tr.at(t).x[0]);
                        FitMode::KnownPropensity(Arc::new(f))
                    }
                }
            } else {
                FitMode::Fitted
            };
            Learner::new(spec.clone(), mode)
        }
    })
}

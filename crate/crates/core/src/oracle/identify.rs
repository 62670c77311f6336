//! Three routes to `θ_t^{ab}`: the counterfactual definition, the nested
//! regression form and the weighting form.
//!
//! The definition is enumerated from the conditional tables with the
//! intervention applied. The other two routes only see the behavior joint
//! law over complete paths and derive every conditional from its marginals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DiscreteDgp, Step};
use crate::data::{TimePoint, Trajectory};
use crate::error::{Error, Result};
use crate::nuisance::Arm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Definition,
    Gformula,
    Weighting,
}

impl Route {
    pub const ALL: [Route; 3] = [Route::Definition, Route::Gformula, Route::Weighting];
}

/// Excursion at one decision point: `A_t := d^a`, with `M_t` drawn from its
/// law under `A_t = d^b`.
#[derive(Debug, Clone, Copy)]
struct Excursion {
    t: usize,
    a: Arm,
    b: Arm,
}

fn action(arm: Arm, eligible: bool) -> bool {
    arm == Arm::Treat && eligible
}

fn bernoulli(p: f64, v: bool) -> f64 {
    if v {
        p
    } else {
        1.0 - p
    }
}

impl DiscreteDgp {
    /// Visits every path with positive probability under the behavior
    /// policy, or under an excursion at one decision point.
    fn enumerate(&self, excursion: Option<Excursion>, visit: &mut dyn FnMut(&[Step], f64)) {
        let mut steps = Vec::with_capacity(self.horizon);
        self.descend(excursion, &mut steps, 1.0, visit);
    }

    fn descend(
        &self,
        excursion: Option<Excursion>,
        steps: &mut Vec<Step>,
        prob: f64,
        visit: &mut dyn FnMut(&[Step], f64),
    ) {
        let t = steps.len();
        if t == self.horizon {
            visit(steps, prob);
            return;
        }
        let ctx = self.context(steps.last().copied());
        let here = excursion.filter(|e| e.t == t + 1);
        for x in 0..self.nx() {
            let px = self.covariate[t][ctx][x];
            for eligible in [false, true] {
                let pi = bernoulli(self.eligibility[t][ctx][x], eligible);
                for treated in [false, true] {
                    let (pa, m_arm) = match here {
                        None => {
                            let pa = if eligible {
                                bernoulli(self.treatment[t][ctx][x], treated)
                            } else {
                                f64::from(!treated)
                            };
                            (pa, treated)
                        }
                        Some(e) => (
                            f64::from(treated == action(e.a, eligible)),
                            action(e.b, eligible),
                        ),
                    };
                    let head = prob * px * pi * pa;
                    if head == 0.0 {
                        continue;
                    }
                    for m in 0..self.nm() {
                        let pm = self.mediator[t][ctx][x][m_arm as usize][m];
                        if pm == 0.0 {
                            continue;
                        }
                        steps.push(Step {
                            x,
                            eligible,
                            treated,
                            m,
                        });
                        self.descend(excursion, steps, head * pm, visit);
                        steps.pop();
                    }
                }
            }
        }
    }

    /// Behavior joint law over [`DiscreteDgp::path_index`].
    pub fn joint(&self) -> Vec<f64> {
        let mut joint = vec![0.0; self.path_count()];
        self.enumerate(None, &mut |steps, p| joint[self.path_index(steps)] = p);
        joint
    }

    /// Describes `H_t` for a prefix code over the first `t` decision points
    /// divided down to `(…, X_t, I_t)`.
    fn describe_history(&self, t: usize, h: usize) -> String {
        let within = h % (2 * self.nx());
        let mut prefix = h / (2 * self.nx());
        let mut parts = Vec::new();
        for s in (1..t).rev() {
            let step = self.decode_step(prefix % self.step_radix());
            prefix /= self.step_radix();
            parts.push(format!(
                "X{s}={}, I{s}={}, A{s}={}, M{s}={}",
                self.x_value(step),
                step.eligible as u8,
                step.treated as u8,
                self.m_value(step)
            ));
        }
        parts.reverse();
        parts.push(format!(
            "X{t}={}, I{t}={}",
            self.x_support[within / 2],
            within % 2
        ));
        format!("({})", parts.join(", "))
    }
}

/// Marginals of the behavior joint law over `(H_t, A_t, M_t)`.
pub(crate) struct StepMarginals {
    nm: usize,
    /// `P(H_t, A_t, M_t)` indexed `(h · 2 + a) · |M| + m`.
    pub(crate) mass: Vec<f64>,
    /// `Σ P(path) E[Y | path]` over the same cells.
    pub(crate) outcome: Vec<f64>,
}

impl StepMarginals {
    pub(crate) fn new(dgp: &DiscreteDgp, joint: &[f64], t: usize) -> Self {
        let block = dgp.step_radix().pow((dgp.horizon - t) as u32);
        let cells = joint.len() / block;
        let mut mass = vec![0.0; cells];
        let mut outcome = vec![0.0; cells];
        for (i, (&p, &y)) in joint.iter().zip(&dgp.outcome_mean).enumerate() {
            mass[i / block] += p;
            outcome[i / block] += p * y;
        }
        Self {
            nm: dgp.nm(),
            mass,
            outcome,
        }
    }

    pub(crate) fn histories(&self) -> usize {
        self.mass.len() / (2 * self.nm)
    }

    fn cell(&self, h: usize, a: bool, m: usize) -> usize {
        (h * 2 + a as usize) * self.nm + m
    }

    pub(crate) fn history_mass(&self, h: usize) -> f64 {
        self.mass[h * 2 * self.nm..(h + 1) * 2 * self.nm]
            .iter()
            .sum()
    }

    /// `P(H_t = h, A_t = a)`.
    pub(crate) fn treatment_mass(&self, h: usize, a: bool) -> f64 {
        (0..self.nm).map(|m| self.mass[self.cell(h, a, m)]).sum()
    }

    pub(crate) fn cell_mass(&self, h: usize, a: bool, m: usize) -> f64 {
        self.mass[self.cell(h, a, m)]
    }

    /// `E(Y | H_t = h, A_t = a, M_t = m)`, if the event has mass.
    pub(crate) fn outcome_mean(&self, h: usize, a: bool, m: usize) -> Option<f64> {
        let c = self.cell(h, a, m);
        (self.mass[c] > 0.0).then(|| self.outcome[c] / self.mass[c])
    }

    /// `E(Y | H_t = h, A_t = a)`, if the event has mass.
    pub(crate) fn regression(&self, h: usize, a: bool) -> Option<f64> {
        let mass = self.treatment_mass(h, a);
        (mass > 0.0).then(|| {
            (0..self.nm)
                .map(|m| self.outcome[self.cell(h, a, m)])
                .sum::<f64>()
                / mass
        })
    }

    /// `P(A_t = a | H_t = h, M_t = m)`, if the event has mass.
    pub(crate) fn mediator_propensity(&self, h: usize, a: bool, m: usize) -> Option<f64> {
        let total = self.cell_mass(h, false, m) + self.cell_mass(h, true, m);
        (total > 0.0).then(|| self.cell_mass(h, a, m) / total)
    }

    pub(crate) fn eligible(h: usize) -> bool {
        h % 2 == 1
    }
}

fn positivity(dgp: &DiscreteDgp, t: usize, h: usize, event: &str) -> Error {
    Error::Positivity(format!(
        "{event} has probability zero at t={t} given H_t = {}",
        dgp.describe_history(t, h)
    ))
}

fn check_cell(dgp: &DiscreteDgp, t: usize) -> Result<()> {
    dgp.validate()?;
    if t == 0 || t > dgp.horizon {
        return Err(Error::InvalidInput(format!(
            "decision point {t} outside 1..={}",
            dgp.horizon
        )));
    }
    Ok(())
}

/// `θ_t^{ab}` from its counterfactual definition: the behavior policy
/// except `A_t := d^a(H_t)`, with `M_t` drawn given `A_t = d^b(H_t)` and
/// everything downstream responding to the realized values.
pub fn theta_definition(dgp: &DiscreteDgp, t: usize, a: Arm, b: Arm) -> Result<f64> {
    check_cell(dgp, t)?;
    let mut total = 0.0;
    dgp.enumerate(Some(Excursion { t, a, b }), &mut |steps, p| {
        total += p * dgp.outcome_mean[dgp.path_index(steps)]
    });
    Ok(total)
}

fn gformula_with(dgp: &DiscreteDgp, marg: &StepMarginals, t: usize, a: Arm, b: Arm) -> Result<f64> {
    let mut total = 0.0;
    for h in 0..marg.histories() {
        let ph = marg.history_mass(h);
        if ph == 0.0 {
            continue;
        }
        let eligible = StepMarginals::eligible(h);
        let (da, db) = (action(a, eligible), action(b, eligible));
        let pb = marg.treatment_mass(h, db);
        if pb == 0.0 {
            return Err(positivity(dgp, t, h, &format!("A_{t} = d^{b}")));
        }
        let mut inner = 0.0;
        for m in 0..dgp.nm() {
            let pm = marg.cell_mass(h, db, m) / pb;
            if pm == 0.0 {
                continue;
            }
            let mu = marg.outcome_mean(h, da, m).ok_or_else(|| {
                positivity(
                    dgp,
                    t,
                    h,
                    &format!("A_{t} = d^{a}, M_{t} = {}", dgp.m_support[m]),
                )
            })?;
            inner += pm * mu;
        }
        total += ph * inner;
    }
    Ok(total)
}

/// `E[E{E(Y | H_t, A_t = d^a, M_t) | H_t, A_t = d^b}]`; for `a = b` this is
/// `E[E(Y | H_t, A_t = d^a)]`.
pub fn theta_gformula(dgp: &DiscreteDgp, t: usize, a: Arm, b: Arm) -> Result<f64> {
    check_cell(dgp, t)?;
    let marg = StepMarginals::new(dgp, &dgp.joint(), t);
    gformula_with(dgp, &marg, t, a, b)
}

fn weighting_with(
    dgp: &DiscreteDgp,
    joint: &[f64],
    marg: &StepMarginals,
    t: usize,
    a: Arm,
    b: Arm,
) -> Result<f64> {
    let block = dgp.step_radix().pow((dgp.horizon - t) as u32);
    let per_history = 2 * dgp.nm();
    let mut total = 0.0;
    for (i, (&p, &y)) in joint.iter().zip(&dgp.outcome_mean).enumerate() {
        if p == 0.0 {
            continue;
        }
        let cell = i / block;
        let h = cell / per_history;
        let (treated, m) = ((cell % per_history) / dgp.nm() == 1, cell % dgp.nm());
        let eligible = StepMarginals::eligible(h);
        let (da, db) = (action(a, eligible), action(b, eligible));
        if treated != da {
            continue;
        }
        let ph = marg.history_mass(h);
        let weight = if a == b {
            ph / marg.treatment_mass(h, da)
        } else {
            let pb = marg.treatment_mass(h, db) / ph;
            if pb == 0.0 {
                return Err(positivity(dgp, t, h, &format!("A_{t} = d^{b}")));
            }
            // P(A = d^a | H, M) is positive whenever this path has mass.
            let qa = marg.mediator_propensity(h, da, m).unwrap_or(f64::NAN);
            let qb = marg.mediator_propensity(h, db, m).unwrap_or(f64::NAN);
            qb / (pb * qa)
        };
        total += p * weight * y;
    }
    Ok(total)
}

/// The inverse-probability form: `E[1(A_t = d^a) Y / P(A_t = d^a | H_t)]`
/// for `a = b`, and otherwise the cross-world weight
/// `1(A_t = d^a) P(A_t = d^b | H_t, M_t) / {P(A_t = d^b | H_t) P(A_t = d^a | H_t, M_t)}`.
pub fn theta_weighting(dgp: &DiscreteDgp, t: usize, a: Arm, b: Arm) -> Result<f64> {
    check_cell(dgp, t)?;
    let joint = dgp.joint();
    let marg = StepMarginals::new(dgp, &joint, t);
    weighting_with(dgp, &joint, &marg, t, a, b)
}

/// `θ_t^{ab}` for every `t` by one route, indexed `[t − 1][a][b]`.
pub fn theta_all(dgp: &DiscreteDgp, route: Route) -> Result<Vec<[[f64; 2]; 2]>> {
    dgp.validate()?;
    let joint = (route != Route::Definition).then(|| dgp.joint());
    (1..=dgp.horizon)
        .into_par_iter()
        .map(|t| {
            let marg = joint.as_ref().map(|j| StepMarginals::new(dgp, j, t));
            let mut out = [[0.0; 2]; 2];
            for a in Arm::BOTH {
                for b in Arm::BOTH {
                    out[a.index()][b.index()] = match route {
                        Route::Definition => theta_definition(dgp, t, a, b)?,
                        Route::Gformula => gformula_with(dgp, marg.as_ref().unwrap(), t, a, b)?,
                        Route::Weighting => weighting_with(
                            dgp,
                            joint.as_ref().unwrap(),
                            marg.as_ref().unwrap(),
                            t,
                            a,
                            b,
                        )?,
                    };
                }
            }
            Ok(out)
        })
        .collect()
}

/// Largest pairwise gaps between the three routes over every `(t, a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub definition_gformula: f64,
    pub gformula_weighting: f64,
}

impl Agreement {
    pub fn within(&self, tol: f64) -> bool {
        self.definition_gformula < tol && self.gformula_weighting < tol
    }
}

pub fn route_agreement(dgp: &DiscreteDgp) -> Result<Agreement> {
    let d = theta_all(dgp, Route::Definition)?;
    let g = theta_all(dgp, Route::Gformula)?;
    let w = theta_all(dgp, Route::Weighting)?;
    let gap = |x: &[[[f64; 2]; 2]], y: &[[[f64; 2]; 2]]| {
        x.iter()
            .flatten()
            .flatten()
            .zip(y.iter().flatten().flatten())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max)
    };
    Ok(Agreement {
        definition_gformula: gap(&d, &g),
        gformula_weighting: gap(&g, &w),
    })
}

/// `E[g(O)]` under the behavior law, with `Y` replaced by its path mean.
/// Exact for any `g` affine in `Y`, which covers every `φ` and `ψ`.
pub fn exact_expectation(dgp: &DiscreteDgp, g: &dyn Fn(&Trajectory) -> f64) -> Result<f64> {
    dgp.validate()?;
    let mut total = 0.0;
    dgp.enumerate(None, &mut |steps, p| {
        let points = steps
            .iter()
            .map(|&s| TimePoint::new(vec![dgp.x_value(s)], s.eligible, s.treated, dgp.m_value(s)))
            .collect();
        let traj = Trajectory::new("oracle", points, dgp.outcome_mean[dgp.path_index(steps)]);
        total += p * g(&traj);
    });
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{random_dgp, RandomDgpOptions};
    use crate::simulation::stream_rng;

    const ARMS: [(Arm, Arm); 4] = [
        (Arm::Treat, Arm::Treat),
        (Arm::Control, Arm::Control),
        (Arm::Treat, Arm::Control),
        (Arm::Control, Arm::Treat),
    ];

    #[test]
    fn tiny_dgp_values() {
        let dgp = DiscreteDgp::tiny();
        let want = [1.7, 0.3, 1.3, 0.7];
        for ((a, b), w) in ARMS.into_iter().zip(want) {
            for route in Route::ALL {
                let th = theta_all(&dgp, route).unwrap()[0][a.index()][b.index()];
                assert!((th - w).abs() < 1e-12, "{route:?} θ^{a}{b} = {th}");
            }
        }
    }

    #[test]
    fn three_routes_agree_on_random_tables() {
        let mut rng = stream_rng(11, 0);
        for _ in 0..25 {
            let dgp = random_dgp(&mut rng, &RandomDgpOptions::default());
            let d = theta_all(&dgp, Route::Definition).unwrap();
            let g = theta_all(&dgp, Route::Gformula).unwrap();
            let w = theta_all(&dgp, Route::Weighting).unwrap();
            for t in 0..dgp.horizon {
                for (a, b) in ARMS {
                    let (i, j) = (a.index(), b.index());
                    assert!((d[t][i][j] - g[t][i][j]).abs() < 1e-10);
                    assert!((g[t][i][j] - w[t][i][j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn constant_outcome_and_degenerate_mediator() {
        let mut rng = stream_rng(12, 0);
        let mut dgp = random_dgp(&mut rng, &RandomDgpOptions::default());
        dgp.outcome_mean.iter_mut().for_each(|v| *v = 2.5);
        for th in theta_all(&dgp, Route::Definition).unwrap() {
            assert!(th.iter().flatten().all(|v| (v - 2.5).abs() < 1e-12));
        }
        let mut flat = DiscreteDgp::constant(2, vec![0.0, 1.0], vec![0.0], 0.7, 0.4);
        flat.set_outcome(|s| {
            s.iter()
                .map(|p| p.x as f64 + 2.0 * p.treated as u8 as f64)
                .sum()
        });
        for th in theta_all(&flat, Route::Gformula).unwrap() {
            assert!((th[1][0] - th[1][1]).abs() < 1e-12);
            assert!((th[0][1] - th[0][0]).abs() < 1e-12);
        }
    }

    #[test]
    fn ineligible_everywhere_collapses_policies() {
        let mut dgp = DiscreteDgp::constant(2, vec![0.0, 1.0], vec![0.0, 1.0], 0.6, 0.5);
        dgp.eligibility[1]
            .iter_mut()
            .flatten()
            .for_each(|p| *p = 0.0);
        dgp.set_outcome(|s| s.iter().map(|p| p.treated as u8 as f64 + p.m as f64).sum());
        let th = theta_all(&dgp, Route::Weighting).unwrap();
        assert!((th[1][1][1] - th[1][0][0]).abs() < 1e-12);
        assert!((th[0][1][1] - th[0][0][0]).abs() > 0.1);
    }

    #[test]
    fn linear_in_outcome_and_decomposes() {
        let mut rng = stream_rng(13, 0);
        let dgp = random_dgp(&mut rng, &RandomDgpOptions::default());
        let mut scaled = dgp.clone();
        scaled.outcome_mean.iter_mut().for_each(|v| *v *= -3.0);
        let a = theta_all(&dgp, Route::Gformula).unwrap();
        let b = theta_all(&scaled, Route::Gformula).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.iter().flatten().zip(y.iter().flatten()) {
                assert!((v + 3.0 * u).abs() < 1e-10);
            }
            let direct = x[1][0] - x[0][0];
            let indirect = x[1][1] - x[1][0];
            assert!((direct + indirect - (x[1][1] - x[0][0])).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_average_to_one() {
        let mut dgp = random_dgp(&mut stream_rng(14, 0), &RandomDgpOptions::default());
        dgp.outcome_mean.iter_mut().for_each(|v| *v = 1.0);
        let w = theta_all(&dgp, Route::Weighting).unwrap();
        assert!(w
            .iter()
            .flatten()
            .flatten()
            .all(|v| (v - 1.0).abs() < 1e-12));
        let ht = exact_expectation(&dgp, &|tr| {
            let p = tr.at(1);
            let ind = if p.treated == p.eligible { 1.0 } else { 0.0 };
            let joint = dgp.joint();
            let marg = StepMarginals::new(&dgp, &joint, 1);
            let steps = dgp.steps_of(tr).unwrap();
            let h = dgp.path_index(&steps[..1]) / (2 * dgp.nm());
            ind * marg.history_mass(h) / marg.treatment_mass(h, p.eligible)
        })
        .unwrap();
        assert!((ht - 1.0).abs() < 1e-12);
    }

    #[test]
    fn positivity_failure_names_event() {
        let mut dgp = DiscreteDgp::constant(1, vec![0.0, 1.0], vec![0.0, 1.0], 1.0, 0.5);
        dgp.treatment[0][0][1] = 0.0;
        let err = theta_gformula(&dgp, 1, Arm::Treat, Arm::Control)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("positivity") || err.contains("probability zero"),
            "{err}"
        );
        assert!(err.contains("X1=1"), "{err}");
        assert!(theta_weighting(&dgp, 1, Arm::Control, Arm::Treat).is_err());
        assert!(theta_definition(&dgp, 1, Arm::Treat, Arm::Control).is_ok());
    }
}

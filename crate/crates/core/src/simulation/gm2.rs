//! GM-2: thirty decision points with serial dependence, random
//! eligibility, continuous mediator and a nonlinear outcome mean.
//!
//! Initial values are `X_0 = A_0 = M_0 = 0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gm1::MonteCarloThetas;
use super::rng::stream_rng;
use crate::data::{Dataset, TimePoint, Trajectory};
use crate::nuisance::glm::expit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gm2Params {
    pub horizon: usize,
}

impl Default for Gm2Params {
    fn default() -> Self {
        Self { horizon: 30 }
    }
}

/// Independent noise for one decision point.
#[derive(Debug, Clone, Copy)]
struct Noise {
    x: f64,
    i: f64,
    a: f64,
    m: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct State {
    x: f64,
    a: f64,
    m: f64,
}

impl Gm2Params {
    fn time_shift(&self, t: usize) -> f64 {
        let big_t = self.horizon as f64;
        (3.0 * (2.0 * t as f64 - big_t) / big_t).tanh()
    }

    /// `h₃(t, z) = tanh{3(2t − T)/T} + sin z`.
    pub fn h3(&self, t: usize, z: f64) -> f64 {
        self.time_shift(t) + z.sin()
    }

    fn x_mean(prev: State) -> f64 {
        0.3 * prev.x + 0.2 * prev.a + 0.2 * prev.m
    }

    fn eligibility_prob(prev: State, x: f64) -> f64 {
        expit(1.5 - 0.3 * prev.a - 0.3 * prev.m + 0.3 * x)
    }

    fn treatment_logit(&self, t: usize, prev: State, x: f64) -> f64 {
        0.2 * prev.a + 0.2 * self.h3(t, prev.m) + 0.3 * self.h3(t, x)
    }

    fn mediator_base(&self, t: usize, prev: State, x: f64) -> f64 {
        0.4 * prev.a + 0.4 * self.h3(t, prev.m) + 0.3 * self.h3(t, x)
    }

    fn outcome_term(&self, t: usize, x: f64, a: f64, m: f64) -> f64 {
        let hm = self.h3(t, m);
        0.3 * self.h3(t, x) + 0.4 * hm + 0.2 * a + 0.1 * a * hm
    }

    /// `P(A_t = 1 | H_t, I_t = 1)`.
    pub fn propensity(&self, traj: &Trajectory, t: usize) -> f64 {
        let prev = previous(traj, t);
        expit(self.treatment_logit(t, prev, traj.at(t).x[0]))
    }

    /// `P(A_t = 1 | H_t, M_t, I_t = 1)`. The mediator is Gaussian with a
    /// treatment shift of 0.6, so the log-likelihood ratio is linear in `M_t`.
    pub fn mediator_propensity(&self, traj: &Trajectory, t: usize) -> f64 {
        let prev = previous(traj, t);
        let point = traj.at(t);
        let x = point.x[0];
        let base = self.mediator_base(t, prev, x);
        expit(self.treatment_logit(t, prev, x) + 0.6 * (point.mediator - base) - 0.18)
    }

    /// One step of the behavior policy, optionally with `A_t` forced to
    /// `d^a` and `M_t` drawn under `d^b`. Returns the new state, `I_t` and
    /// the outcome-mean contribution.
    fn step(
        &self,
        t: usize,
        prev: State,
        e: Noise,
        excursion: Option<(usize, usize)>,
    ) -> (State, bool, f64) {
        let x = Self::x_mean(prev) + e.x;
        let eligible = e.i < Self::eligibility_prob(prev, x);
        let behavior = eligible && e.a < expit(self.treatment_logit(t, prev, x));
        let fi = if eligible { 1.0 } else { 0.0 };
        let (a, a_for_m) = match excursion {
            None => {
                let a = if behavior { 1.0 } else { 0.0 };
                (a, a)
            }
            Some((ea, eb)) => (fi * ea as f64, fi * eb as f64),
        };
        let m = self.mediator_base(t, prev, x) + 0.6 * a_for_m + e.m;
        (State { x, a, m }, eligible, self.outcome_term(t, x, a, m))
    }
}

fn previous(traj: &Trajectory, t: usize) -> State {
    traj.lagged(t, 1).map_or_else(State::default, |p| State {
        x: p.x[0],
        a: p.treatment(),
        m: p.mediator,
    })
}

fn draw_noise<R: Rng>(rng: &mut R, horizon: usize, out: &mut Vec<Noise>) {
    out.clear();
    out.extend((0..horizon).map(|_| Noise {
        x: rng.sample(StandardNormal),
        i: rng.random(),
        a: rng.random(),
        m: rng.sample(StandardNormal),
    }));
}

pub fn gm2_generate_with(params: &Gm2Params, n: usize, seed: u64) -> Dataset {
    let mut noise = Vec::with_capacity(params.horizon);
    let trajectories = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            draw_noise(&mut rng, params.horizon, &mut noise);
            let y_noise: f64 = rng.sample(StandardNormal);
            let mut prev = State::default();
            let mut mean = 0.0;
            let points = (1..=params.horizon)
                .map(|t| {
                    let (s, eligible, term) = params.step(t, prev, noise[t - 1], None);
                    mean += term;
                    prev = s;
                    TimePoint::new(vec![s.x], eligible, s.a == 1.0, s.m)
                })
                .collect();
            Trajectory::new(format!("{}", i + 1), points, mean + y_noise)
        })
        .collect();
    Dataset::new(trajectories)
}

pub fn gm2_generate(n: usize, seed: u64) -> Dataset {
    gm2_generate_with(&Gm2Params::default(), n, seed)
}

/// Definition-level Monte Carlo for `θ_t^{ab}`: each draw simulates the
/// behavior path once, then for every `t` and `(a, b)` replays the tail
/// from `t` with the same noise, `A_t := d^a` and `M_t` drawn under `d^b`.
/// Outcome noise is mean zero and is integrated out exactly.
pub fn gm2_thetas_monte_carlo(params: &Gm2Params, draws: usize, seed: u64) -> MonteCarloThetas {
    let horizon = params.horizon;
    let mut sums = vec![[[0.0; 2]; 2]; horizon];
    let (mut s1, mut s2) = ([0.0; 2], [0.0; 2]);
    let mut noise = Vec::with_capacity(horizon);
    let mut states = vec![State::default(); horizon + 1];
    let mut prefix = vec![0.0; horizon + 1];
    for d in 0..draws {
        let mut rng = stream_rng(seed, d as u64);
        draw_noise(&mut rng, horizon, &mut noise);
        for t in 1..=horizon {
            let (s, _, term) = params.step(t, states[t - 1], noise[t - 1], None);
            states[t] = s;
            prefix[t] = prefix[t - 1] + term;
        }
        let mut contrast = [0.0; 2];
        for t in 1..=horizon {
            let mut th = [[0.0; 2]; 2];
            let mut collapsed = None;
            for a in 0..2 {
                for b in 0..2 {
                    if let Some(v) = collapsed {
                        th[a][b] = v;
                        continue;
                    }
                    let (mut s, eligible, mut total) =
                        params.step(t, states[t - 1], noise[t - 1], Some((a, b)));
                    total += prefix[t - 1];
                    for u in t + 1..=horizon {
                        let (next, _, term) = params.step(u, s, noise[u - 1], None);
                        s = next;
                        total += term;
                    }
                    th[a][b] = total;
                    if !eligible {
                        // d^1 = d^0 = 0: all four functionals coincide.
                        collapsed = Some(total);
                    }
                }
            }
            for a in 0..2 {
                for b in 0..2 {
                    sums[t - 1][a][b] += th[a][b];
                }
            }
            contrast[0] += (th[1][0] - th[0][0]) / horizon as f64;
            contrast[1] += (th[1][1] - th[1][0]) / horizon as f64;
        }
        for k in 0..2 {
            s1[k] += contrast[k];
            s2[k] += contrast[k] * contrast[k];
        }
    }
    let n = draws as f64;
    let se = |k: usize| ((s2[k] / n - (s1[k] / n).powi(2)).max(0.0) / n).sqrt();
    MonteCarloThetas {
        theta: sums
            .into_iter()
            .map(|m| m.map(|r| r.map(|v| v / n)))
            .collect(),
        contrast_se: [se(0), se(1)],
        draws,
    }
}

/// Weighting-form Monte Carlo for `θ_t^{ab}` on generated data with the
/// closed-form propensities; an independent check on the definition route.
pub fn gm2_thetas_weighting(params: &Gm2Params, ds: &Dataset) -> Vec<[[f64; 2]; 2]> {
    use crate::nuisance::{arm_indicator, arm_probabilities, Arm};
    let n = ds.len() as f64;
    let mut sums = vec![[[0.0; 2]; 2]; params.horizon];
    for tr in &ds.trajectories {
        for t in 1..=params.horizon {
            let point = tr.at(t);
            let (p, _) = arm_probabilities(params.propensity(tr, t), point.eligible, None);
            let (q, _) = arm_probabilities(params.mediator_propensity(tr, t), point.eligible, None);
            for a in Arm::BOTH {
                let ind = arm_indicator(point, a);
                if ind == 0.0 {
                    continue;
                }
                for b in Arm::BOTH {
                    let (i, j) = (a.index(), b.index());
                    sums[t - 1][i][j] += tr.y * q[j] / (p[j] * q[i]);
                }
            }
        }
    }
    sums.into_iter()
        .map(|m| m.map(|r| r.map(|v| v / n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureMap, WeightKind};
    use crate::estimator::Projection;
    use crate::simulation::gm1::project_thetas;

    #[test]
    fn h3_center_point() {
        let p = Gm2Params::default();
        assert_eq!(p.h3(15, 0.0), 0.0);
    }

    #[test]
    fn ineligible_never_treated() {
        let ds = gm2_generate(300, 1);
        assert!(ds.validate().is_ok());
        let rate = ds.eligibility_rate();
        assert!(rate > 0.6 && rate < 0.95, "{rate}");
        assert_eq!(ds, gm2_generate(300, 1));
    }

    #[test]
    fn mediator_propensity_is_bayes_rule() {
        let p = Gm2Params::default();
        let ds = gm2_generate(5, 2);
        let tr = &ds.trajectories[0];
        for t in 1..=30 {
            if !tr.at(t).eligible {
                continue;
            }
            let pi = p.propensity(tr, t);
            let prev = previous(tr, t);
            let base = p.mediator_base(t, prev, tr.at(t).x[0]);
            let m = tr.at(t).mediator;
            let dens = |mean: f64| (-(m - mean).powi(2) / 2.0).exp();
            let bayes = pi * dens(base + 0.6) / (pi * dens(base + 0.6) + (1.0 - pi) * dens(base));
            assert!((bayes - p.mediator_propensity(tr, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn definition_and_weighting_routes_agree() {
        let params = Gm2Params::default();
        let proj = Projection::new(&FeatureMap::Constant, &WeightKind::Uniform, 30).unwrap();
        let def = gm2_thetas_monte_carlo(&params, 4_000, 5);
        let ds = gm2_generate(40_000, 6);
        let w = gm2_thetas_weighting(&params, &ds);
        let (da, db) = project_thetas(&def.theta, &proj);
        let (wa, wb) = project_thetas(&w, &proj);
        // The weighting route is noisy; this is a coarse sanity check.
        assert!((da[0] - wa[0]).abs() < 0.06, "{da:?} {wa:?}");
        assert!((db[0] - wb[0]).abs() < 0.06, "{db:?} {wb:?}");
    }
}

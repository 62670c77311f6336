//! Rate-controlled perturbation of an exact nuisance set: each function is
//! multiplied by one draw of `U ~ Uniform[1 − n^{−r}, 1]`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng::{stream_rng, PERTURBATION_STREAM};
use crate::data::Trajectory;
use crate::nuisance::{NuisanceModel, NuisanceValues, Provenance};

/// Keeps perturbed probabilities strictly inside `(0, 1)`.
const PROB_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub p: f64,
    pub q: f64,
    pub eta: f64,
    pub mu: f64,
    pub nu: f64,
}

impl Rates {
    /// `r_p = r_η = r_ν = r₁` and `r_q = r_μ = r₂`, the product-rate pairing.
    pub fn paired(r1: f64, r2: f64) -> Self {
        Self {
            p: r1,
            q: r2,
            eta: r1,
            mu: r2,
            nu: r1,
        }
    }

    fn as_array(&self) -> [f64; 5] {
        [self.p, self.q, self.eta, self.mu, self.nu]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub rates: Rates,
    pub n: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    /// Scale factors `[U_p, U_q, U_η, U_μ, U_ν]`.
    pub fn factors(&self) -> [f64; 5] {
        let n = self.n as f64;
        let mut out = [1.0; 5];
        for (k, r) in self.rates.as_array().into_iter().enumerate() {
            let v: f64 = stream_rng(self.seed, PERTURBATION_STREAM + k as u64).random();
            out[k] = 1.0 - n.powf(-r) * v;
        }
        out
    }
}

/// `truth` with every function rescaled by its factor. Probabilities are
/// perturbed on the `a = 1` arm and the `a = 0` arm is the complement.
pub struct Perturbed {
    truth: Arc<dyn NuisanceModel>,
    factors: [f64; 5],
}

impl Perturbed {
    pub fn new(truth: Arc<dyn NuisanceModel>, spec: &PerturbationSpec) -> Self {
        Self::with_factors(truth, spec.factors())
    }

    pub fn with_factors(truth: Arc<dyn NuisanceModel>, factors: [f64; 5]) -> Self {
        Self { truth, factors }
    }

    pub fn factors(&self) -> [f64; 5] {
        self.factors
    }
}

fn scale_prob(p: [f64; 2], u: f64) -> [f64; 2] {
    // Structural probabilities (both arms one) are left alone.
    if p[0] == 1.0 && p[1] == 1.0 {
        return p;
    }
    let p1 = (u * p[1]).clamp(PROB_EPS, 1.0 - PROB_EPS);
    [1.0 - p1, p1]
}

impl NuisanceModel for Perturbed {
    fn evaluate(&self, traj: &Trajectory, t: usize) -> NuisanceValues {
        let v = self.truth.evaluate(traj, t);
        let [up, uq, ue, um, un] = self.factors;
        NuisanceValues {
            p: scale_prob(v.p, up),
            q: scale_prob(v.q, uq),
            eta: v.eta.map(|x| ue * x),
            mu: v.mu.map(|x| um * x),
            nu: v.nu.map(|x| un * x),
            clipped: v.clipped,
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::Perturbed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::gm1::{gm1_generate, Gm1Params, Gm1Truth};

    #[test]
    fn factor_bounds() {
        let spec = PerturbationSpec {
            rates: Rates::paired(0.5, 0.5),
            n: 10_000,
            seed: 1,
        };
        for u in spec.factors() {
            assert!((0.99..=1.0).contains(&u), "{u}");
        }
        let big = PerturbationSpec {
            rates: Rates::paired(40.0, 40.0),
            ..spec
        };
        assert!(big.factors().iter().all(|&u| u == 1.0));
    }

    #[test]
    fn complementarity_and_rate_law() {
        let truth: Arc<dyn NuisanceModel> = Arc::new(Gm1Truth::new(Gm1Params::default()));
        let ds = gm1_generate(50, 2);
        let r = 0.3;
        for n in [100usize, 1_000, 10_000] {
            let mut worst: f64 = 0.0;
            for seed in 0..20 {
                let spec = PerturbationSpec {
                    rates: Rates::paired(r, r),
                    n,
                    seed,
                };
                let pert = Perturbed::new(truth.clone(), &spec);
                let mut sq = 0.0;
                let mut count = 0.0;
                for tr in &ds.trajectories {
                    for t in 1..=5 {
                        let a = pert.evaluate(tr, t);
                        let b = truth.evaluate(tr, t);
                        assert!((a.p[0] + a.p[1] - 1.0).abs() < 1e-15);
                        sq += (a.p[1] - b.p[1]).powi(2);
                        count += 1.0;
                    }
                }
                worst = worst.max((sq / count).sqrt() / (n as f64).powf(-r));
            }
            // ‖p̂ − p⋆‖ ≤ |U − 1| · ‖p⋆‖ ≤ n^{−r}.
            assert!(worst <= 1.0, "n={n}: {worst}");
        }
    }
}

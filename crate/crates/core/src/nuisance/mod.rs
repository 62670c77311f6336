//! The five nuisance functions `p, q, η, μ, ν` indexed by excursion arm.
//!
//! Arm `a` refers to the excursion rule `d^a`: `d^1(H_t) = I_t` and
//! `d^0(H_t) = 0`. Probabilities are stored per arm as `P(A_t = d^a | ·)`,
//! so on an ineligible decision point both arms carry probability one.

pub mod features;
pub mod fit;
pub mod glm;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{TimePoint, Trajectory};

pub use features::{
    CovariateBasis, HistoryFeatureSpec, Interactions, LagTerm, LagVariable, TimeBasis, XTerm,
};
pub use fit::{
    fit_nuisance_set, FitMode, FittedNuisance, Learner, ModelSpec, NuisanceLearner, NuisanceSpec,
    Propensity,
};

pub const DEFAULT_CLIP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    /// `d^0`: never treat.
    Control,
    /// `d^1`: treat whenever eligible.
    Treat,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treat];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treat => 1,
        }
    }

    #[inline]
    pub fn other(self) -> Arm {
        match self {
            Arm::Control => Arm::Treat,
            Arm::Treat => Arm::Control,
        }
    }

    pub fn from_index(a: usize) -> Arm {
        if a == 0 {
            Arm::Control
        } else {
            Arm::Treat
        }
    }

    /// Treatment assigned by `d^a` at this record.
    #[inline]
    pub fn action(self, point: &TimePoint) -> bool {
        match self {
            Arm::Control => false,
            Arm::Treat => point.eligible,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// `1(A_t = d^a(H_t))`.
#[inline]
pub fn arm_indicator(point: &TimePoint, arm: Arm) -> f64 {
    if point.treated == arm.action(point) {
        1.0
    } else {
        0.0
    }
}

/// `P(A_t = d^a | H_t)` from the eligible-case propensity `π = P(A_t = 1 | H_t, I_t = 1)`.
#[inline]
pub fn excursion_propensity(pi: f64, eligible: bool, arm: Arm) -> f64 {
    let i = if eligible { 1.0 } else { 0.0 };
    match arm {
        Arm::Treat => i * pi + (1.0 - i),
        Arm::Control => 1.0 - i * pi,
    }
}

#[inline]
pub fn clip_probability(v: f64, clip: f64) -> f64 {
    v.clamp(clip, 1.0 - clip)
}

/// Per-arm probabilities `[P(A=d^0|·), P(A=d^1|·)]` from an eligible-case
/// propensity, clipping only on eligible points. Returns whether clipping
/// was active.
#[inline]
pub fn arm_probabilities(pi: f64, eligible: bool, clip: Option<f64>) -> ([f64; 2], bool) {
    if !eligible {
        return ([1.0, 1.0], false);
    }
    let clipped = clip.map_or(pi, |c| clip_probability(pi, c));
    ([1.0 - clipped, clipped], clipped != pi)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Fitted,
    KnownPropensity,
    ExactTruth,
    Perturbed,
    Fixed,
}

/// All nuisance evaluations at one `(trajectory, t)`, with `μ` evaluated at
/// the observed mediator. Arrays are indexed by [`Arm::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NuisanceValues {
    pub p: [f64; 2],
    pub q: [f64; 2],
    pub eta: [f64; 2],
    pub mu: [f64; 2],
    pub nu: [f64; 2],
    /// Number of probability outputs clamped by [`clip_probability`].
    pub clipped: u8,
}

/// An evaluable nuisance set `ζ`.
pub trait NuisanceModel: Send + Sync {
    fn evaluate(&self, traj: &Trajectory, t: usize) -> NuisanceValues;

    fn provenance(&self) -> Provenance;
}

impl<M: NuisanceModel + ?Sized> NuisanceModel for std::sync::Arc<M> {
    fn evaluate(&self, traj: &Trajectory, t: usize) -> NuisanceValues {
        (**self).evaluate(traj, t)
    }

    fn provenance(&self) -> Provenance {
        (**self).provenance()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(eligible: bool, treated: bool) -> TimePoint {
        TimePoint::new(vec![], eligible, treated, 0.0)
    }

    #[test]
    fn indicator() {
        assert_eq!(arm_indicator(&pt(true, true), Arm::Treat), 1.0);
        assert_eq!(arm_indicator(&pt(false, false), Arm::Treat), 1.0);
        assert_eq!(arm_indicator(&pt(true, true), Arm::Control), 0.0);
        assert_eq!(arm_indicator(&pt(true, false), Arm::Treat), 0.0);
        assert_eq!(arm_indicator(&pt(false, false), Arm::Control), 1.0);
    }

    #[test]
    fn propensity_composition() {
        assert_eq!(excursion_propensity(0.6, true, Arm::Treat), 0.6);
        assert!((excursion_propensity(0.6, true, Arm::Control) - 0.4).abs() < 1e-15);
        assert_eq!(excursion_propensity(0.6, false, Arm::Treat), 1.0);
        assert_eq!(excursion_propensity(0.6, false, Arm::Control), 1.0);
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_probability(0.5, DEFAULT_CLIP), 0.5);
        assert_eq!(clip_probability(0.001, DEFAULT_CLIP), 0.01);
        assert_eq!(clip_probability(0.999, DEFAULT_CLIP), 0.99);
        let (p, clipped) = arm_probabilities(0.0, false, Some(DEFAULT_CLIP));
        assert_eq!(p, [1.0, 1.0]);
        assert!(!clipped);
        let (p, clipped) = arm_probabilities(0.001, true, Some(DEFAULT_CLIP));
        assert_eq!(p, [0.99, 0.01]);
        assert!(clipped);
    }
}

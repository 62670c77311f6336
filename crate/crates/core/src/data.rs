//! Panel data: participants observed at `T` decision points with a distal
//! outcome, plus the estimand's time features `f(t)` and weights `ω(t)`.
//!
//! Decision points are 1-based throughout the public API (`t ∈ 1..=T`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::basis::BSplineBasis;
use crate::error::{Error, Result};

/// Observation at one decision point: covariates `X_t`, eligibility `I_t`,
/// treatment `A_t` and mediator `M_t`, in temporal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePoint {
    pub x: Vec<f64>,
    pub eligible: bool,
    pub treated: bool,
    pub mediator: f64,
}

impl TimePoint {
    pub fn new(x: Vec<f64>, eligible: bool, treated: bool, mediator: f64) -> Self {
        Self {
            x,
            eligible,
            treated,
            mediator,
        }
    }

    pub fn treatment(&self) -> f64 {
        if self.treated {
            1.0
        } else {
            0.0
        }
    }
}

/// One participant's full record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<TimePoint>,
    pub y: f64,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<TimePoint>, y: f64) -> Self {
        Self {
            id: id.into(),
            points,
            y,
        }
    }

    pub fn horizon(&self) -> usize {
        self.points.len()
    }

    /// Record at decision point `t` (1-based).
    #[inline]
    pub fn at(&self, t: usize) -> &TimePoint {
        &self.points[t - 1]
    }

    /// Record at `t - lag`, or `None` before the first decision point.
    #[inline]
    pub fn lagged(&self, t: usize, lag: usize) -> Option<&TimePoint> {
        if lag >= t {
            None
        } else {
            Some(&self.points[t - 1 - lag])
        }
    }
}

/// A collection of trajectories sharing a common horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Horizon of the first trajectory; `validate` checks the rest agree.
    pub fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::horizon)
    }

    pub fn covariate_dim(&self) -> usize {
        self.trajectories
            .first()
            .and_then(|tr| tr.points.first())
            .map_or(0, |p| p.x.len())
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset::new(
            indices
                .iter()
                .map(|&i| self.trajectories[i].clone())
                .collect(),
        )
    }

    pub fn eligibility_rate(&self) -> f64 {
        let (mut e, mut total) = (0usize, 0usize);
        for tr in &self.trajectories {
            e += tr.points.iter().filter(|p| p.eligible).count();
            total += tr.points.len();
        }
        if total == 0 {
            0.0
        } else {
            e as f64 / total as f64
        }
    }

    pub fn validate(&self) -> ValidationReport {
        validate_dataset(self)
    }

    /// Errors with the full list of violations unless the dataset is valid.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidDataset(report.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Index into `Dataset::trajectories`, if the violation is per participant.
    pub participant: Option<usize>,
    /// Decision point (1-based), if the violation is per time point.
    pub t: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.participant, self.t) {
            (Some(i), Some(t)) => write!(f, "participant {i}, t={t}: {}", self.message),
            (Some(i), None) => write!(f, "participant {i}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let lines: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(f, "{}", lines.join("; "))
    }
}

/// Reports every structural violation in `ds`; never fails.
pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |participant, t, message: String| {
        violations.push(Violation {
            participant,
            t,
            message,
        })
    };
    if ds.len() < 2 {
        push(
            None,
            None,
            format!("need at least 2 participants, got {}", ds.len()),
        );
    }
    let horizon = ds.horizon();
    let dim = ds.covariate_dim();
    if !ds.is_empty() && horizon == 0 {
        push(Some(0), None, "empty trajectory".into());
    }
    for (i, tr) in ds.trajectories.iter().enumerate() {
        if tr.horizon() != horizon {
            push(
                Some(i),
                None,
                format!(
                    "common-T breach: T={} but dataset T={horizon}",
                    tr.horizon()
                ),
            );
        }
        if !tr.y.is_finite() {
            push(Some(i), None, "distal outcome is not finite".into());
        }
        for (k, p) in tr.points.iter().enumerate() {
            let t = k + 1;
            if !p.eligible && p.treated {
                push(Some(i), Some(t), format!("ineligible treated at t={t}"));
            }
            if !p.mediator.is_finite() {
                push(Some(i), Some(t), "mediator is not finite".into());
            }
            if p.x.len() != dim {
                push(
                    Some(i),
                    Some(t),
                    format!("covariate dimension {} differs from {dim}", p.x.len()),
                );
            }
            if p.x.iter().any(|v| !v.is_finite()) {
                push(Some(i), Some(t), "covariate is not finite".into());
            }
        }
    }
    ValidationReport { violations }
}

/// Time features `f(t)` for the projection estimand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureMap {
    /// `f(t) = 1`.
    Constant,
    /// `f(t) = (1, t - 1)`.
    Linear,
    /// `f(t) = (1, t)`: uncentered slope parameterization.
    Affine,
    /// `f(t) = (1, t - 1, ..., (t - 1)^degree)`.
    Polynomial { degree: usize },
    /// Cubic B-spline in `t` on `[1, T]` with intercept, `df` functions.
    Bspline { df: usize },
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        match *self {
            FeatureMap::Constant => 1,
            FeatureMap::Linear | FeatureMap::Affine => 2,
            FeatureMap::Polynomial { degree } => degree + 1,
            FeatureMap::Bspline { df } => df,
        }
    }

    /// Evaluates `f(t)` for every `t ∈ 1..=horizon`.
    pub fn design(&self, horizon: usize) -> Result<Vec<Vec<f64>>> {
        if horizon == 0 {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        match *self {
            FeatureMap::Constant => Ok(vec![vec![1.0]; horizon]),
            FeatureMap::Linear => Ok((1..=horizon).map(|t| vec![1.0, (t - 1) as f64]).collect()),
            FeatureMap::Affine => Ok((1..=horizon).map(|t| vec![1.0, t as f64]).collect()),
            FeatureMap::Polynomial { degree } => Ok((1..=horizon)
                .map(|t| {
                    (0..=degree)
                        .map(|k| ((t - 1) as f64).powi(k as i32))
                        .collect()
                })
                .collect()),
            FeatureMap::Bspline { df } => {
                if horizon < 2 {
                    return Err(Error::DegenerateBasis(
                        "a B-spline feature map needs T >= 2".into(),
                    ));
                }
                let basis = BSplineBasis::uniform(1.0, horizon as f64, df)?;
                Ok((1..=horizon).map(|t| basis.evaluate(t as f64)).collect())
            }
        }
    }

    pub fn evaluate(&self, t: usize, horizon: usize) -> Result<Vec<f64>> {
        if t == 0 || t > horizon {
            return Err(Error::InvalidInput(format!("t={t} outside 1..={horizon}")));
        }
        Ok(self.design(horizon)?.swap_remove(t - 1))
    }
}

/// Nonnegative weights `ω(t)` over decision points summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Weight at decision point `t` (1-based).
    pub fn at(&self, t: usize) -> f64 {
        self.0[t - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Uniform,
    PointMass(usize),
    Custom(Vec<f64>),
}

pub fn make_weights(kind: &WeightKind, horizon: usize) -> Result<WeightVector> {
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    match kind {
        WeightKind::Uniform => Ok(WeightVector(vec![1.0 / horizon as f64; horizon])),
        WeightKind::PointMass(t0) => {
            if *t0 == 0 || *t0 > horizon {
                return Err(Error::InvalidInput(format!(
                    "point-mass t0={t0} outside 1..={horizon}"
                )));
            }
            let mut w = vec![0.0; horizon];
            w[t0 - 1] = 1.0;
            Ok(WeightVector(w))
        }
        WeightKind::Custom(v) => {
            if v.len() != horizon {
                return Err(Error::InvalidInput(format!(
                    "custom weights have length {} but T={horizon}",
                    v.len()
                )));
            }
            if v.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::InvalidInput(
                    "custom weights must be nonnegative".into(),
                ));
            }
            let total: f64 = v.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidInput("custom weights are all zero".into()));
            }
            Ok(WeightVector(v.iter().map(|w| w / total).collect()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(points: Vec<(bool, bool)>) -> Trajectory {
        Trajectory::new(
            "p",
            points
                .into_iter()
                .map(|(i, a)| TimePoint::new(vec![0.0], i, a, 0.0))
                .collect(),
            1.0,
        )
    }

    #[test]
    fn ineligible_treated_is_reported() {
        let mut bad = traj(vec![(true, false); 5]);
        bad.points[2] = TimePoint::new(vec![0.0], false, true, 0.0);
        let ds = Dataset::new(vec![bad, traj(vec![(true, true); 5])]);
        let report = validate_dataset(&ds);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].t, Some(3));
        assert!(report.violations[0]
            .message
            .contains("ineligible treated at t=3"));
    }

    #[test]
    fn untreated_eligible_panel_is_ok() {
        let ds = Dataset::new(vec![
            traj(vec![(true, false); 4]),
            traj(vec![(true, false); 4]),
        ]);
        assert!(validate_dataset(&ds).is_ok());
    }

    #[test]
    fn ragged_panel_is_reported() {
        let ds = Dataset::new(vec![
            traj(vec![(true, false); 5]),
            traj(vec![(true, false); 4]),
        ]);
        let report = validate_dataset(&ds);
        assert!(!report.is_ok());
        assert!(report.violations[0].message.contains("common-T breach"));
    }

    #[test]
    fn weights() {
        let u = make_weights(&WeightKind::Uniform, 5).unwrap();
        assert_eq!(u.as_slice(), &[0.2; 5]);
        let pm = make_weights(&WeightKind::PointMass(3), 5).unwrap();
        assert_eq!(pm.as_slice(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        let c = make_weights(&WeightKind::Custom(vec![2.0, 2.0, 0.0]), 3).unwrap();
        assert_eq!(c.as_slice(), &[0.5, 0.5, 0.0]);
        assert!(make_weights(&WeightKind::Custom(vec![0.0, 0.0]), 2).is_err());
        assert!(make_weights(&WeightKind::PointMass(6), 5).is_err());
        assert!(make_weights(&WeightKind::PointMass(0), 5).is_err());
        assert!(make_weights(&WeightKind::Custom(vec![1.0, -1.0]), 2).is_err());
        for w in [u, pm, c] {
            assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_maps() {
        assert_eq!(FeatureMap::Constant.evaluate(4, 5).unwrap(), vec![1.0]);
        assert_eq!(FeatureMap::Linear.evaluate(1, 5).unwrap(), vec![1.0, 0.0]);
        assert_eq!(FeatureMap::Linear.evaluate(4, 5).unwrap(), vec![1.0, 3.0]);
        assert_eq!(
            FeatureMap::Polynomial { degree: 2 }.evaluate(3, 5).unwrap(),
            vec![1.0, 2.0, 4.0]
        );
        for fm in [
            FeatureMap::Constant,
            FeatureMap::Linear,
            FeatureMap::Polynomial { degree: 3 },
            FeatureMap::Bspline { df: 6 },
        ] {
            let d = fm.design(30).unwrap();
            assert!(d.iter().all(|row| row.len() == fm.dim()));
        }
        let spline = FeatureMap::Bspline { df: 6 }.design(30).unwrap();
        for row in spline {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

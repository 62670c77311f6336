//! History feature construction for the pooled working models.
//!
//! A design row is `[1, time columns, term columns]`; with the time
//! interaction flag every term column is additionally multiplied by every
//! time column. Spline bases drop their first function so the intercept is
//! not duplicated.

use std::cell::RefCell;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::BSplineBasis;
use crate::data::Trajectory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimeBasis {
    None,
    /// `(t − 1)/(T − 1)`.
    Linear,
    Polynomial {
        degree: usize,
    },
    /// Cubic B-spline on `[1, T]` with equally spaced interior knots.
    Bspline {
        df: usize,
    },
    /// One indicator per decision point after the first.
    Dummies,
}

impl Default for TimeBasis {
    fn default() -> Self {
        TimeBasis::Bspline { df: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovariateBasis {
    #[default]
    Linear,
    /// Cubic B-spline with knots at sample quantiles of the training rows.
    Bspline { df: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct XTerm {
    /// 1-based covariate column (`X1`, `X2`, ...).
    pub column: usize,
    #[serde(default)]
    pub basis: CovariateBasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagVariable {
    Treatment,
    Mediator,
    Eligibility,
    /// `A_{t−k} · M_{t−k}`.
    TreatmentMediator,
    /// 1-based covariate column.
    Covariate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagTerm {
    pub variable: LagVariable,
    #[serde(default = "one")]
    pub lag: usize,
    #[serde(default)]
    pub basis: CovariateBasis,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Interactions {
    /// Interact every term with the time basis.
    #[serde(default)]
    pub time: bool,
}

fn default_ridge() -> f64 {
    1e-4
}

pub(crate) fn default_clip() -> f64 {
    super::DEFAULT_CLIP
}

/// Which parts of `H_t` (and `M_t`) enter a working model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryFeatureSpec {
    #[serde(default)]
    pub time_basis: TimeBasis,
    /// Basis for `M_t`; only used by `q` and `μ`.
    #[serde(default)]
    pub mediator_basis: Option<CovariateBasis>,
    #[serde(default)]
    pub lags: Vec<LagTerm>,
    #[serde(default)]
    pub x_terms: Vec<XTerm>,
    #[serde(default)]
    pub interactions: Interactions,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

impl Default for HistoryFeatureSpec {
    fn default() -> Self {
        Self {
            time_basis: TimeBasis::default(),
            mediator_basis: None,
            lags: Vec::new(),
            x_terms: Vec::new(),
            interactions: Interactions::default(),
            ridge: default_ridge(),
            clip: default_clip(),
        }
    }
}

impl HistoryFeatureSpec {
    /// A general-purpose main-effects model: time, every current covariate,
    /// a linear mediator and first lags of `A` and `M`. Short horizons get
    /// one indicator per decision point.
    pub fn standard(covariate_dim: usize, horizon: usize) -> Self {
        let lag = |variable| LagTerm {
            variable,
            lag: 1,
            basis: CovariateBasis::Linear,
        };
        Self {
            time_basis: if horizon <= 6 {
                TimeBasis::Dummies
            } else {
                TimeBasis::Bspline { df: 5 }
            },
            mediator_basis: Some(CovariateBasis::Linear),
            lags: if horizon > 1 {
                vec![lag(LagVariable::Treatment), lag(LagVariable::Mediator)]
            } else {
                Vec::new()
            },
            x_terms: (1..=covariate_dim)
                .map(|column| XTerm {
                    column,
                    basis: CovariateBasis::Linear,
                })
                .collect(),
            ..Self::default()
        }
    }

    /// Time basis only (`s(t)`).
    pub fn time_only(time_basis: TimeBasis) -> Self {
        Self {
            time_basis,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Source {
    Covariate(usize),
    Lag(LagVariable, usize),
    Mediator,
}

impl Source {
    #[inline]
    fn value(self, traj: &Trajectory, t: usize) -> f64 {
        match self {
            Source::Covariate(c) => traj.at(t).x[c],
            Source::Mediator => traj.at(t).mediator,
            Source::Lag(var, k) => match traj.lagged(t, k) {
                None => 0.0,
                Some(p) => match var {
                    LagVariable::Treatment => p.treatment(),
                    LagVariable::Mediator => p.mediator,
                    LagVariable::Eligibility => f64::from(u8::from(p.eligible)),
                    LagVariable::TreatmentMediator => p.treatment() * p.mediator,
                    LagVariable::Covariate(c) => p.x[c - 1],
                },
            },
        }
    }
}

#[derive(Debug, Clone)]
enum FittedBasis {
    Linear,
    Spline(BSplineBasis),
}

impl FittedBasis {
    fn width(&self) -> usize {
        match self {
            FittedBasis::Linear => 1,
            FittedBasis::Spline(b) => b.len() - 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Term {
    source: Source,
    basis: FittedBasis,
}

#[derive(Debug, Clone)]
enum TimeColumns {
    None,
    Linear,
    Polynomial(usize),
    Spline(BSplineBasis),
    Dummies,
}

/// A [`HistoryFeatureSpec`] with data-dependent knots placed on its
/// training rows. Deterministic in `(trajectory, t)`.
#[derive(Debug, Clone)]
pub struct FeatureBuilder {
    horizon: usize,
    time: TimeColumns,
    /// Time columns for each `t`, precomputed.
    time_table: Vec<Vec<f64>>,
    time_width: usize,
    terms: Vec<Term>,
    time_interaction: bool,
    dim: usize,
}

impl FeatureBuilder {
    /// Places knots using the `(trajectory, t)` rows the model is fit on.
    pub fn fit(
        spec: &HistoryFeatureSpec,
        rows: &[(&Trajectory, usize)],
        horizon: usize,
        covariate_dim: usize,
        with_mediator: bool,
    ) -> Result<Self> {
        let (time, time_width) = match spec.time_basis {
            TimeBasis::None => (TimeColumns::None, 0),
            TimeBasis::Linear if horizon > 1 => (TimeColumns::Linear, 1),
            TimeBasis::Linear => (TimeColumns::None, 0),
            TimeBasis::Polynomial { degree } if horizon > 1 => {
                (TimeColumns::Polynomial(degree), degree)
            }
            TimeBasis::Polynomial { .. } => (TimeColumns::None, 0),
            TimeBasis::Bspline { df } => {
                if horizon < 2 {
                    (TimeColumns::None, 0)
                } else {
                    let b = BSplineBasis::uniform(1.0, horizon as f64, df)?;
                    let w = b.len() - 1;
                    (TimeColumns::Spline(b), w)
                }
            }
            TimeBasis::Dummies => (TimeColumns::Dummies, horizon.saturating_sub(1)),
        };

        let mut sources: Vec<(Source, CovariateBasis)> = Vec::new();
        for xt in &spec.x_terms {
            if xt.column == 0 || xt.column > covariate_dim {
                return Err(Error::InvalidInput(format!(
                    "x_terms column {} outside 1..={covariate_dim}",
                    xt.column
                )));
            }
            sources.push((Source::Covariate(xt.column - 1), xt.basis));
        }
        for lag in &spec.lags {
            if lag.lag == 0 {
                return Err(Error::InvalidInput("lags must be at least 1".into()));
            }
            if let LagVariable::Covariate(c) = lag.variable {
                if c == 0 || c > covariate_dim {
                    return Err(Error::InvalidInput(format!(
                        "lagged covariate column {c} outside 1..={covariate_dim}"
                    )));
                }
            }
            sources.push((Source::Lag(lag.variable, lag.lag), lag.basis));
        }
        if with_mediator {
            if let Some(basis) = spec.mediator_basis {
                sources.push((Source::Mediator, basis));
            }
        }

        let mut terms = Vec::with_capacity(sources.len());
        for (source, basis) in sources {
            let fitted = match basis {
                CovariateBasis::Linear => FittedBasis::Linear,
                CovariateBasis::Bspline { df } => {
                    let values: Vec<f64> =
                        rows.iter().map(|(tr, t)| source.value(tr, *t)).collect();
                    FittedBasis::Spline(BSplineBasis::from_sample(&values, df)?)
                }
            };
            terms.push(Term {
                source,
                basis: fitted,
            });
        }

        let term_width: usize = terms.iter().map(|t| t.basis.width()).sum();
        let time_interaction = spec.interactions.time && time_width > 0;
        let dim = 1 + time_width + term_width * if time_interaction { 1 + time_width } else { 1 };
        let mut builder = Self {
            horizon,
            time,
            time_table: Vec::new(),
            time_width,
            terms,
            time_interaction,
            dim,
        };
        builder.time_table = (1..=horizon)
            .map(|t| {
                let mut row = Vec::with_capacity(time_width);
                builder.time_columns(t, &mut row);
                row
            })
            .collect();
        Ok(builder)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn time_columns(&self, t: usize, out: &mut Vec<f64>) {
        let s = if self.horizon > 1 {
            (t - 1) as f64 / (self.horizon - 1) as f64
        } else {
            0.0
        };
        match &self.time {
            TimeColumns::None => {}
            TimeColumns::Linear => out.push(s),
            TimeColumns::Polynomial(d) => out.extend((1..=*d).map(|k| s.powi(k as i32))),
            TimeColumns::Spline(b) => out.extend_from_slice(&b.evaluate(t as f64)[1..]),
            TimeColumns::Dummies => {
                out.extend((2..=self.horizon).map(|k| f64::from(u8::from(k == t))))
            }
        }
    }

    /// Appends the feature row for `(traj, t)` to `out`.
    pub fn build_into(&self, traj: &Trajectory, t: usize, out: &mut Vec<f64>) {
        let start = out.len();
        out.push(1.0);
        out.extend_from_slice(&self.time_table[t - 1]);
        let time_end = out.len();
        for term in &self.terms {
            let v = term.source.value(traj, t);
            match &term.basis {
                FittedBasis::Linear => out.push(v),
                FittedBasis::Spline(b) => {
                    // Evaluate in place, then drop the first function.
                    let pos = out.len();
                    out.resize(pos + b.len(), 0.0);
                    b.evaluate_into(v, &mut out[pos..]);
                    out.remove(pos);
                }
            }
        }
        if self.time_interaction {
            let term_end = out.len();
            for j in time_end..term_end {
                for k in (start + 1)..time_end {
                    let v = out[j] * out[k];
                    out.push(v);
                }
            }
        }
        debug_assert_eq!(out.len() - start, self.dim);
        debug_assert_eq!(time_end - start - 1, self.time_width);
    }

    pub fn build(&self, traj: &Trajectory, t: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        self.build_into(traj, t, &mut out);
        out
    }

    pub fn design(&self, rows: &[(&Trajectory, usize)]) -> DMatrix<f64> {
        let mut flat = Vec::with_capacity(rows.len() * self.dim);
        for (tr, t) in rows {
            self.build_into(tr, *t, &mut flat);
        }
        DMatrix::from_row_slice(rows.len(), self.dim, &flat)
    }

    pub fn linear_predictor(&self, coef: &[f64], traj: &Trajectory, t: usize) -> f64 {
        thread_local! {
            static ROW: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
        }
        ROW.with(|row| {
            let mut row = row.borrow_mut();
            row.clear();
            self.build_into(traj, t, &mut row);
            row.iter().zip(coef).map(|(a, b)| a * b).sum()
        })
    }
}

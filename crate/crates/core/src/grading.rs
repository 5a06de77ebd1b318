//! Score-space arithmetic: split a score into (grade, sub-grade) and couple
//! predicted grade/sub-grade values back into a score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack used when flooring ratios, so that e.g. `0.7 / 0.1` floors to 7.
const FLOOR_SLACK: f64 = 1e-9;

fn floor_tol(x: f64) -> f64 {
    (x + FLOOR_SLACK).floor()
}

fn ceil_tol(x: f64) -> f64 {
    (x - FLOOR_SLACK).ceil()
}

/// Uniform grade/sub-grade partition of `[0, score_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradingScheme {
    /// Upper bound `S` of the score range.
    pub score_max: f64,
    /// Width `S_C` of one grade.
    pub grade_span: f64,
    /// Width `S_F` of one sub-grade.
    pub sub_grade_span: f64,
}

impl GradingScheme {
    pub fn new(score_max: f64, grade_span: f64, sub_grade_span: f64) -> Result<Self> {
        let s = Self {
            score_max,
            grade_span,
            sub_grade_span,
        };
        s.validate()?;
        Ok(s)
    }

    /// Scheme with `grades` equal grades over `[0, score_max]`, each split into `sub_grades`.
    pub fn from_counts(score_max: f64, grades: usize, sub_grades: usize) -> Result<Self> {
        let grade_span = score_max / grades as f64;
        Self::new(score_max, grade_span, grade_span / sub_grades as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            score_max,
            grade_span,
            sub_grade_span,
        } = *self;
        if !(score_max.is_finite() && grade_span.is_finite() && sub_grade_span.is_finite()) {
            return Err(Error::Config("grading spans must be finite".into()));
        }
        if !(0.0 < sub_grade_span && sub_grade_span <= grade_span && grade_span <= score_max) {
            return Err(Error::Config(format!(
                "need 0 < S_F <= S_C <= S, got S={score_max}, S_C={grade_span}, S_F={sub_grade_span}"
            )));
        }
        if self.grades() < 2 || self.sub_grades() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 grades and 2 sub-grades, got {} and {}",
                self.grades(),
                self.sub_grades()
            )));
        }
        Ok(())
    }

    /// `G = ceil(S / S_C)`
    pub fn grades(&self) -> usize {
        ceil_tol(self.score_max / self.grade_span) as usize
    }

    /// `G' = ceil(S_C / S_F)`
    pub fn sub_grades(&self) -> usize {
        ceil_tol(self.grade_span / self.sub_grade_span) as usize
    }

    /// Upper bound of any coupled prediction built from class expectations.
    pub fn coupled_max(&self) -> f64 {
        (self.grades() - 1) as f64 * self.grade_span
            + (self.sub_grades() - 1) as f64 * self.sub_grade_span
    }

    /// Grade and sub-grade of a ground-truth score; `s = S` falls in the top cell.
    pub fn decompose(&self, s: f64) -> Result<(usize, usize)> {
        if !(0.0..=self.score_max).contains(&s) {
            return Err(Error::Range(format!(
                "score {s} outside [0, {}]",
                self.score_max
            )));
        }
        let grade = (floor_tol(s / self.grade_span) as usize).min(self.grades() - 1);
        let residual = (s - grade as f64 * self.grade_span).max(0.0);
        let sub = (floor_tol(residual / self.sub_grade_span) as usize).min(self.sub_grades() - 1);
        Ok((grade, sub))
    }

    /// `grade * S_C + sub_grade * S_F`, clamped to `[0, S]`.
    pub fn couple(&self, grade_value: f64, sub_grade_value: f64) -> f64 {
        (grade_value * self.grade_span + sub_grade_value * self.sub_grade_span)
            .clamp(0.0, self.score_max)
    }
}

/// Linear map of raw dataset scores onto `[0, S]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNormalizer {
    pub observed_max: f64,
    pub score_max: f64,
}

impl ScoreNormalizer {
    pub fn new(observed_max: f64, score_max: f64) -> Result<Self> {
        if !(observed_max > 0.0 && observed_max.is_finite()) {
            return Err(Error::Config(format!(
                "observed score maximum must be positive, got {observed_max}"
            )));
        }
        Ok(Self {
            observed_max,
            score_max,
        })
    }

    pub fn forward(&self, raw: f64) -> f64 {
        raw * self.score_max / self.observed_max
    }

    pub fn inverse(&self, s: f64) -> f64 {
        s * self.observed_max / self.score_max
    }
}

pub fn normalize_scores(
    raw: &[f64],
    observed_max: f64,
    scheme: &GradingScheme,
) -> Result<Vec<f64>> {
    let n = ScoreNormalizer::new(observed_max, scheme.score_max)?;
    Ok(raw.iter().map(|&r| n.forward(r)).collect())
}

//! The coarse-to-fine scoring head.
//!
//! Pipeline for one sample of `C` clip features:
//!
//! 1. temporal fusion: pooled procedure queries attend over the clips,
//!    giving `P` procedure features;
//! 2. grade parsing: grade prototypes cross-attend over the procedures,
//!    giving a coarse response per grade, a soft grade mask, and masked
//!    residuals from the embedded prototypes;
//! 3. the coarse MLP turns the coarse responses into grade logits, while
//!    the pooled residual is matched against a fixed simplex ETF to score
//!    sub-grades;
//! 4. expected grade and sub-grade indices are coupled into one score.

mod blocks;
mod params;

use serde::{Deserialize, Serialize};

pub use crate::tensor::Activation;
pub use blocks::{
    align_features, argmax, coarse_head, expected_index, fgs_forward, gpm_forward, tfm_forward,
    FgsOutput, GpmOutput,
};
pub use params::{
    Affine, BoundAffine, BoundCoarse, BoundGpm, BoundParams, BoundTfm, CoarseHeadWeights,
    GpmWeights, GradePrototypes, HeadParams, TfmWeights, PARAM_NAMES, PROTOTYPE_INIT_STD,
};

use crate::error::{Error, Result};
use crate::etf::{build_etf, EtfMatrix};
use crate::grading::GradingScheme;
use crate::tensor::ops::check_dropout;
use crate::tensor::rng::streams;
use crate::tensor::{dropout, RngStream, Tape, Tensor, Var};

/// Target range of the min-max feature alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum AlignMode {
    /// `[0, D_C]`
    ClipDim,
    /// `[-1, 1]`
    #[default]
    Symmetric,
    /// `[0, 1]`
    Unit,
}

impl AlignMode {
    pub fn bounds(self, clip_dim: usize) -> (f64, f64) {
        match self {
            AlignMode::ClipDim => (0.0, clip_dim as f64),
            AlignMode::Symmetric => (-1.0, 1.0),
            AlignMode::Unit => (0.0, 1.0),
        }
    }
}

impl TryFrom<u8> for AlignMode {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(AlignMode::ClipDim),
            1 => Ok(AlignMode::Symmetric),
            2 => Ok(AlignMode::Unit),
            _ => Err(format!("align mode must be 0, 1 or 2, got {v}")),
        }
    }
}

impl From<AlignMode> for u8 {
    fn from(m: AlignMode) -> u8 {
        match m {
            AlignMode::ClipDim => 0,
            AlignMode::Symmetric => 1,
            AlignMode::Unit => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `D_C`
    pub clip_dim: usize,
    /// `D_P`
    pub procedure_dim: usize,
    /// `D_S`
    pub scoring_dim: usize,
    /// Clips sampled per training sample.
    pub train_clips: usize,
    /// `P`
    pub procedures: usize,
    /// `G`
    pub grades: usize,
    /// `G'`
    pub sub_grades: usize,
    pub dropout: f64,
    pub align_mode: AlignMode,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            clip_dim: 1024,
            procedure_dim: 512,
            scoring_dim: 256,
            train_clips: 68,
            procedures: 5,
            grades: 7,
            sub_grades: 10,
            dropout: 0.3,
            align_mode: AlignMode::Symmetric,
            activation: Activation::LeakyRelu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("clip_dim", self.clip_dim),
            ("procedure_dim", self.procedure_dim),
            ("scoring_dim", self.scoring_dim),
            ("train_clips", self.train_clips),
            ("procedures", self.procedures),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.grades < 2 || self.sub_grades < 2 {
            return Err(Error::Config(
                "need at least 2 grades and 2 sub-grades".into(),
            ));
        }
        if self.scoring_dim < self.sub_grades {
            return Err(Error::Config(format!(
                "scoring_dim {} must be at least sub_grades {}",
                self.scoring_dim, self.sub_grades
            )));
        }
        check_dropout(self.dropout)
    }
}

/// Per-sample outputs, materialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub coarse_logits: Vec<f64>,
    pub coarse_probs: Vec<f64>,
    pub fine_similarities: Vec<f64>,
    /// Pooled fine feature before normalization.
    pub fine_feature: Vec<f64>,
    /// Pooled fine feature had (near) zero norm.
    pub degenerate: bool,
    /// Expected grade index.
    pub expected_grade: f64,
    /// Expected sub-grade index.
    pub expected_sub_grade: f64,
    pub grade: usize,
    pub sub_grade: usize,
    pub score: f64,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub coarse_logits: Var,
    pub fine_similarities: Var,
    pub fine_feature: Var,
    pub fine_unit: Var,
    pub expected_grade: Var,
    pub expected_sub_grade: Var,
    pub score: Var,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: HeadParams,
    pub etf: EtfMatrix,
}

impl Model {
    /// Fresh model: parameters and the ETF drawn from separate streams of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let base = RngStream::new(seed);
        let params = HeadParams::init(&config, &mut base.split(streams::INIT));
        let etf = build_etf(
            config.scoring_dim,
            config.sub_grades,
            &mut base.split(streams::ETF),
        )?;
        Ok(Self {
            config,
            params,
            etf,
        })
    }

    /// Rebuilds a model from stored parameters; the ETF is regenerated from `seed`.
    pub fn from_params(config: ModelConfig, params: HeadParams, seed: u64) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        model
            .params
            .load_tensors(params.tensors().into_iter().cloned().collect())?;
        Ok(model)
    }

    /// Runs the head on one `C x D_C` clip matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        clips: &Tensor,
        scheme: &GradingScheme,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        if clips.rank() != 2 || clips.shape()[1] != cfg.clip_dim {
            return Err(Error::Dimension(format!(
                "expected C x {} clip features, got {:?}",
                cfg.clip_dim,
                clips.shape()
            )));
        }
        let h = tape.constant(clips.clone());
        let procs = tfm_forward(tape, &bound.tfm, h, cfg.procedures)?;
        let procs = dropout(tape, procs, cfg.dropout, rng, training)?;
        let gpm = gpm_forward(tape, bound.prototypes, procs, &bound.gpm)?;
        let coarse_logits = coarse_head(
            tape,
            gpm.coarse,
            &bound.coarse,
            cfg.activation,
            cfg.dropout,
            rng,
            training,
        )?;
        // Aligning rows of H_F would cancel the mask's per-row scale, so the
        // pooled vector is aligned instead.
        let bounds = cfg.align_mode.bounds(cfg.clip_dim);
        let fgs = fgs_forward(tape, gpm.fine, &self.etf, Some(bounds))?;

        let coarse_probs = tape.softmax(coarse_logits, 0)?;
        let expected_grade = expected_index(tape, coarse_probs)?;
        let fine_probs = tape.softmax(fgs.similarities, 0)?;
        let expected_sub_grade = expected_index(tape, fine_probs)?;
        let sc = tape.scale(expected_grade, scheme.grade_span)?;
        let sf = tape.scale(expected_sub_grade, scheme.sub_grade_span)?;
        let score = tape.add(sc, sf)?;
        let score = tape.clamp(score, 0.0, scheme.score_max)?;
        Ok(ForwardVars {
            coarse_logits,
            fine_similarities: fgs.similarities,
            fine_feature: fgs.pooled,
            fine_unit: fgs.unit,
            expected_grade,
            expected_sub_grade,
            score,
            degenerate: fgs.degenerate,
        })
    }

    /// Deterministic inference on one sample.
    pub fn predict(&self, clips: &Tensor, scheme: &GradingScheme) -> Result<PredictionBundle> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        // No draws happen with training = false.
        let mut rng = RngStream::new(0);
        let out = self.forward(&mut tape, &bound, clips, scheme, false, &mut rng)?;
        let v = |x: Var| tape.value(x).data().to_vec();
        let coarse_logits = v(out.coarse_logits);
        let fine_similarities = v(out.fine_similarities);
        let mut probs = coarse_logits.clone();
        softmax_in_place(&mut probs);
        Ok(PredictionBundle {
            grade: argmax(&coarse_logits),
            sub_grade: argmax(&fine_similarities),
            coarse_probs: probs,
            coarse_logits,
            fine_similarities,
            fine_feature: v(out.fine_feature),
            degenerate: out.degenerate,
            expected_grade: tape.value(out.expected_grade).item(),
            expected_sub_grade: tape.value(out.expected_sub_grade).item(),
            score: tape.value(out.score).item(),
        })
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            clip_dim: 16,
            procedure_dim: 8,
            scoring_dim: 8,
            train_clips: 4,
            procedures: 2,
            grades: 3,
            sub_grades: 4,
            dropout: 0.0,
            align_mode: AlignMode::Symmetric,
            activation: Activation::LeakyRelu,
        }
    }

    fn clips(c: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed);
        Tensor::new(vec![c, d], (0..c * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(toy_config().validate().is_ok());
        let mut c = toy_config();
        c.scoring_dim = 3;
        assert!(c.validate().is_err());
        let mut c = toy_config();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = toy_config();
        c.procedures = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn align_mode_serde() {
        assert_eq!(serde_json::to_string(&AlignMode::Unit).unwrap(), "2");
        assert_eq!(
            serde_json::from_str::<AlignMode>("0").unwrap(),
            AlignMode::ClipDim
        );
        assert!(serde_json::from_str::<AlignMode>("3").is_err());
    }

    #[test]
    fn prediction_is_bounded_and_deterministic() {
        let model = Model::new(toy_config(), 0).unwrap();
        let scheme = GradingScheme::from_counts(3.0, 3, 4).unwrap();
        let x = clips(5, 16, 1);
        let a = model.predict(&x, &scheme).unwrap();
        let b = model.predict(&x, &scheme).unwrap();
        assert_eq!(a, b);
        assert!(a.score >= 0.0 && a.score <= scheme.coupled_max());
        assert!((a.coarse_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let bound = 1.0 + 1e-12;
        assert!(a.fine_similarities.iter().all(|s| s.abs() <= bound));
    }

    #[test]
    fn wrong_clip_dim_rejected() {
        let model = Model::new(toy_config(), 0).unwrap();
        let scheme = GradingScheme::from_counts(3.0, 3, 4).unwrap();
        assert!(matches!(
            model.predict(&clips(2, 15, 0), &scheme),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn training_mode_uses_dropout() {
        let mut cfg = toy_config();
        cfg.dropout = 0.5;
        let model = Model::new(cfg, 3).unwrap();
        let scheme = GradingScheme::from_counts(3.0, 3, 4).unwrap();
        let x = clips(4, 16, 2);
        let run = |training: bool, seed: u64| {
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape, true);
            let mut rng = RngStream::new(seed);
            let out = model
                .forward(&mut tape, &b, &x, &scheme, training, &mut rng)
                .unwrap();
            tape.value(out.score).item()
        };
        assert_eq!(run(false, 1), run(false, 2));
        assert_eq!(run(true, 1), run(true, 1));
        assert_ne!(run(true, 1), run(true, 2));
    }
}

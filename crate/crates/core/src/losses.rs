//! Score regression, coarse cross-entropy, ETF dot-regression and the
//! quality-aware prototype regularizer, plus their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::EtfMatrix;
use crate::grading::GradingScheme;
use crate::model::{argmax, BoundParams, ForwardVars, Model};
use crate::tensor::{RngStream, Tape, Tensor, Var};

/// Cosines are clamped this far inside `[-1, 1]` before `acos`.
pub const ACOS_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_f: 1.0,
            lambda_r: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_f", self.lambda_f),
            ("lambda_r", self.lambda_r),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which ETF prototype the fine loss regresses toward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTarget {
    /// The ground-truth sub-grade.
    #[default]
    GroundTruth,
    /// The currently predicted (argmax) sub-grade.
    Predicted,
}

/// The four loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub score: T,
    pub coarse: T,
    pub fine: T,
    pub reg: T,
}

/// Cosine-clamped angles between grade prototypes are compared to this.
pub fn quality_distance(g: usize) -> Tensor {
    let data = (0..g * g).map(|k| (k / g).abs_diff(k % g) as f64).collect();
    Tensor::new(vec![g, g], data).expect("sized")
}

/// `(1/2N) sum (s_i - s_hat_i)^2`
pub fn score_loss(tape: &mut Tape, preds: Var, targets: &[f64]) -> Result<Var> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::EmptyInput("score loss over an empty batch".into()));
    }
    if tape.shape(preds) != [n] {
        return Err(Error::Dimension(format!(
            "score loss: {:?} predictions for {n} targets",
            tape.shape(preds)
        )));
    }
    let t = tape.constant(Tensor::vector(targets.to_vec()));
    let diff = tape.sub(preds, t)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum_all(sq)?;
    tape.scale(s, 0.5 / n as f64)
}

/// Mean negative log-likelihood of the true grade under `softmax(logits)`.
pub fn coarse_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyInput("coarse loss over an empty batch".into()));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(logp, labels.to_vec())?;
    let s = tape.sum_all(picked)?;
    tape.scale(s, -1.0 / n as f64)
}

/// `(1/2N) sum (<h_i / |h_i|, e_{t_i}> - 1)^2` over pooled fine features `h_i`.
pub fn fine_loss(
    tape: &mut Tape,
    pooled: &[Var],
    targets: &[usize],
    etf: &EtfMatrix,
) -> Result<Var> {
    let n = targets.len();
    if n == 0 || pooled.len() != n {
        return Err(Error::EmptyInput(format!(
            "fine loss: {} features for {n} targets",
            pooled.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= etf.k()) {
        return Err(Error::Label(format!(
            "sub-grade {t} out of range [0, {})",
            etf.k()
        )));
    }
    let units = pooled
        .iter()
        .map(|&h| tape.l2_normalize(h))
        .collect::<Result<Vec<_>>>()?;
    let units = tape.stack(&units)?;
    let protos = tape.constant(etf.prototypes().clone());
    let sims = tape.matmul_nt(units, protos)?;
    let picked = tape.pick(sims, targets.to_vec())?;
    let resid = tape.offset(picked, -1.0)?;
    let sq = tape.mul(resid, resid)?;
    let s = tape.sum_all(sq)?;
    tape.scale(s, 0.5 / n as f64)
}

/// `KL(P_A || P_D)` where `P_A` normalizes the off-diagonal angles between
/// unit prototypes and `P_D` the off-diagonal grade distances `|i - j|`.
pub fn graph_reg_loss(tape: &mut Tape, prototypes: Var) -> Result<Var> {
    let (g, d) = match tape.shape(prototypes) {
        [g, d] => (*g, *d),
        s => {
            return Err(Error::Dimension(format!(
                "prototypes must be a matrix, got {s:?}"
            )))
        }
    };
    if g < 2 {
        return Err(Error::Config(format!(
            "graph regularizer needs at least 2 prototypes, got {g}"
        )));
    }
    let mut rows = Vec::with_capacity(g);
    for i in 0..g {
        let norm = tape
            .value(prototypes)
            .row(i)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm < crate::tensor::tape::NORM_EPS {
            return Err(Error::DegeneratePrototype(i));
        }
        let row = tape.gather(prototypes, (i * d..(i + 1) * d).collect())?;
        rows.push(tape.l2_normalize(row)?);
    }
    let unit = tape.stack(&rows)?;
    let cos = tape.matmul_nt(unit, unit)?;
    let cos = tape.clamp(cos, -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP)?;
    let angles = tape.acos(cos)?;
    let off: Vec<usize> = (0..g * g).filter(|k| k / g != k % g).collect();
    let dist = quality_distance(g);
    let dist_off: Vec<f64> = off.iter().map(|&k| dist.data()[k]).collect();
    let dist_sum: f64 = dist_off.iter().sum();
    let log_q: Vec<f64> = dist_off.iter().map(|v| (v / dist_sum).ln()).collect();

    let a = tape.gather(angles, off)?;
    let total = tape.sum_all(a)?;
    let p = tape.div_scalar(a, total)?;
    let log_p = tape.ln(p)?;
    let log_q = tape.constant(Tensor::vector(log_q));
    let ratio = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, ratio)?;
    tape.sum_all(terms)
}

/// `L_S + λ_C L_C + λ_F L_F + λ_R L_R` on the tape.
pub fn total_loss_var(tape: &mut Tape, parts: LossParts<Var>, w: &LossWeights) -> Result<Var> {
    let c = tape.scale(parts.coarse, w.lambda_c)?;
    let f = tape.scale(parts.fine, w.lambda_f)?;
    let r = tape.scale(parts.reg, w.lambda_r)?;
    let t = tape.add(parts.score, c)?;
    let t = tape.add(t, f)?;
    tape.add(t, r)
}

/// `L_S + λ_C L_C + λ_F L_F + λ_R L_R` on plain values.
pub fn total_loss(parts: LossParts<f64>, w: &LossWeights) -> Result<f64> {
    let all = [parts.score, parts.coarse, parts.fine, parts.reg];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss parts {all:?}")));
    }
    Ok(parts.score + w.lambda_c * parts.coarse + w.lambda_f * parts.fine + w.lambda_r * parts.reg)
}

/// Everything one batch contributes to the objective.
pub struct BatchObjective {
    pub parts: LossParts<Var>,
    pub total: Var,
    pub forwards: Vec<ForwardVars>,
}

impl BatchObjective {
    pub fn part_values(&self, tape: &Tape) -> LossParts<f64> {
        LossParts {
            score: tape.value(self.parts.score).item(),
            coarse: tape.value(self.parts.coarse).item(),
            fine: tape.value(self.parts.fine).item(),
            reg: tape.value(self.parts.reg).item(),
        }
    }
}

/// Runs the model over a batch and assembles the composite loss.
///
/// `targets` are scores already on the scheme's `[0, S]` scale; they are
/// decomposed into grade and sub-grade labels here.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    model: &Model,
    tape: &mut Tape,
    bound: &BoundParams,
    clips: &[&Tensor],
    targets: &[f64],
    scheme: &GradingScheme,
    weights: &LossWeights,
    fine_target: FineTarget,
    training: bool,
    rng: &mut RngStream,
) -> Result<BatchObjective> {
    if clips.is_empty() || clips.len() != targets.len() {
        return Err(Error::EmptyInput(format!(
            "batch of {} samples with {} targets",
            clips.len(),
            targets.len()
        )));
    }
    let mut forwards = Vec::with_capacity(clips.len());
    let mut grades = Vec::with_capacity(clips.len());
    let mut subs = Vec::with_capacity(clips.len());
    for (x, &s) in clips.iter().zip(targets) {
        let (g, j) = scheme.decompose(s.clamp(0.0, scheme.score_max))?;
        grades.push(g);
        subs.push(j);
        forwards.push(model.forward(tape, bound, x, scheme, training, rng)?);
    }
    let scores: Vec<Var> = forwards.iter().map(|f| f.score).collect();
    let scores = tape.stack(&scores)?;
    let logits: Vec<Var> = forwards.iter().map(|f| f.coarse_logits).collect();
    let logits = tape.stack(&logits)?;
    let pooled: Vec<Var> = forwards.iter().map(|f| f.fine_feature).collect();
    let fine_targets = match fine_target {
        FineTarget::GroundTruth => subs,
        FineTarget::Predicted => forwards
            .iter()
            .map(|f| argmax(tape.value(f.fine_similarities).data()))
            .collect(),
    };

    let parts = LossParts {
        score: score_loss(tape, scores, targets)?,
        coarse: coarse_loss(tape, logits, &grades)?,
        fine: fine_loss(tape, &pooled, &fine_targets, &model.etf)?,
        reg: graph_reg_loss(tape, bound.prototypes)?,
    };
    let total = total_loss_var(tape, parts, weights)?;
    Ok(BatchObjective {
        parts,
        total,
        forwards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etf::build_etf;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn score_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![2.0, 5.0]));
        let l = score_loss(&mut tape, p, &[2.0, 5.0]).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        let p = tape.constant(Tensor::vector(vec![1.0]));
        let l = score_loss(&mut tape, p, &[3.0]).unwrap();
        assert_eq!(scalar(&tape, l), 2.0);
        let p = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = score_loss(&mut tape, p, &[1.0, 1.0]).unwrap();
        assert_eq!(scalar(&tape, l), 0.5);
        let e = tape.constant(Tensor::vector(vec![]));
        assert!(score_loss(&mut tape, e, &[]).is_err());
    }

    #[test]
    fn coarse_loss_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]).unwrap());
        let v = coarse_loss(&mut tape, l, &[2]).unwrap();
        assert!((scalar(&tape, v) - 4f64.ln()).abs() < 1e-12);
        let l = tape.constant(Tensor::from_rows(&[vec![0.0, 200.0, 0.0]]).unwrap());
        let v = coarse_loss(&mut tape, l, &[1]).unwrap();
        assert!(scalar(&tape, v).abs() < 1e-12);
        assert!(matches!(
            coarse_loss(&mut tape, l, &[3]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn fine_loss_examples() {
        let etf = build_etf(16, 10, &mut RngStream::new(1)).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::vector(etf.row(3).iter().map(|v| 5.0 * v).collect()));
        let l = fine_loss(&mut tape, &[h], &[3], &etf).unwrap();
        // cosine with e_3 scaled by |e_3|
        let norm = etf.row(3).iter().map(|v| v * v).sum::<f64>().sqrt();
        let want = 0.5 * (norm - 1.0).powi(2);
        assert!((scalar(&tape, l) - want).abs() < 1e-12);
        assert!(want < 1e-20);

        // Orthogonal to e_0 within the span: e_1 - projection onto e_0.
        let e0 = etf.row(0);
        let e1 = etf.row(1);
        let c = e0.iter().zip(e1).map(|(a, b)| a * b).sum::<f64>()
            / e0.iter().map(|a| a * a).sum::<f64>();
        let perp: Vec<f64> = e1.iter().zip(e0).map(|(b, a)| b - c * a).collect();
        let h = tape.constant(Tensor::vector(perp));
        let l = fine_loss(&mut tape, &[h], &[0], &etf).unwrap();
        assert!((scalar(&tape, l) - 0.5).abs() < 1e-12);

        assert!(matches!(
            fine_loss(&mut tape, &[h], &[10], &etf),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn graph_reg_two_prototypes_is_zero() {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.3, -2.0], vec![0.5, 0.5, 0.1]]).unwrap());
        let l = graph_reg_loss(&mut tape, g).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-15);
    }

    #[test]
    fn graph_reg_proportional_angles_is_zero() {
        // Unit vectors at angles 0, θ, 2θ in a plane: pairwise angles ∝ |i - j|.
        let th = 0.6f64;
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| vec![(i as f64 * th).cos(), (i as f64 * th).sin()])
            .collect();
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::from_rows(&rows).unwrap());
        let l = graph_reg_loss(&mut tape, g).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-12);
    }

    #[test]
    fn graph_reg_equiangular_matches_direct_kl() {
        // Three mutually equiangular unit vectors (120° apart in a plane).
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let a = i as f64 * 2.0 * std::f64::consts::PI / 3.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::from_rows(&rows).unwrap());
        let l = graph_reg_loss(&mut tape, g).unwrap();
        // KL(uniform(6) || [1,2,1,1,2,1]/8), evaluated directly.
        let q = [1.0, 2.0, 1.0, 1.0, 2.0, 1.0].map(|v| v / 8.0);
        let kl: f64 = q
            .iter()
            .map(|qi: &f64| (1.0 / 6.0) * ((1.0f64 / 6.0) / qi).ln())
            .sum();
        assert!((scalar(&tape, l) - kl).abs() < 1e-12);
        assert!((kl - 0.056633).abs() < 1e-6);
    }

    #[test]
    fn graph_reg_zero_row() {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        assert!(matches!(
            graph_reg_loss(&mut tape, g),
            Err(Error::DegeneratePrototype(1))
        ));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let ones = LossParts {
            score: 1.0,
            coarse: 1.0,
            fine: 1.0,
            reg: 1.0,
        };
        assert_eq!(total_loss(ones, &w).unwrap(), 4.0);
        let z = LossWeights {
            lambda_c: 0.0,
            lambda_f: 0.0,
            lambda_r: 0.0,
        };
        assert_eq!(
            total_loss(
                LossParts {
                    score: 0.7,
                    coarse: 3.0,
                    fine: 2.0,
                    reg: 9.0
                },
                &z
            )
            .unwrap(),
            0.7
        );
        let w = LossWeights {
            lambda_c: 1.0,
            lambda_f: 2.0,
            lambda_r: 3.0,
        };
        let p = LossParts {
            score: 0.5,
            coarse: 1.0,
            fine: 0.25,
            reg: 0.1,
        };
        assert!((total_loss(p, &w).unwrap() - 2.3).abs() < 1e-12);
        let bad = LossParts {
            score: f64::NAN,
            ..p
        };
        assert!(total_loss(bad, &w).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights {
            lambda_c: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            lambda_r: f64::INFINITY,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn quality_distance_shape() {
        let d = quality_distance(3);
        assert_eq!(d.data(), &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0]);
    }
}

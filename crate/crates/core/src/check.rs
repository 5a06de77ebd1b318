//! Finite-difference check of the full composite loss over every parameter.

use serde::Serialize;

use crate::error::Result;
use crate::grading::GradingScheme;
use crate::losses::{batch_objective, FineTarget, LossWeights};
use crate::model::{Model, ModelConfig, PARAM_NAMES};
use crate::tensor::gradcheck::{central_differences, max_relative_error, DEFAULT_EPS};
use crate::tensor::{Activation, RngStream, Tape, Tensor};

/// Toy dimensions used for end-to-end gradient checks.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        clip_dim: 16,
        procedure_dim: 8,
        scoring_dim: 8,
        train_clips: 4,
        procedures: 2,
        grades: 3,
        sub_grades: 4,
        dropout: 0.0,
        activation: Activation::LeakyRelu,
        ..ModelConfig::default()
    }
}

pub fn toy_scheme() -> GradingScheme {
    GradingScheme::from_counts(3.0, 3, 4).expect("valid toy scheme")
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Deterministic-mode composite loss for `model` on a batch.
pub fn composite_loss(
    model: &Model,
    clips: &[Tensor],
    targets: &[f64],
    scheme: &GradingScheme,
    weights: &LossWeights,
    fine_target: FineTarget,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let refs: Vec<&Tensor> = clips.iter().collect();
    let mut rng = RngStream::new(0);
    let obj = batch_objective(
        model,
        &mut tape,
        &bound,
        &refs,
        targets,
        scheme,
        weights,
        fine_target,
        false,
        &mut rng,
    )?;
    Ok(tape.value(obj.total).item())
}

/// Compares tape gradients of the composite loss against central differences,
/// parameter tensor by parameter tensor.
pub fn composite_grad_check(
    model: &Model,
    clips: &[Tensor],
    targets: &[f64],
    scheme: &GradingScheme,
    weights: &LossWeights,
    fine_target: FineTarget,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let refs: Vec<&Tensor> = clips.iter().collect();
    let mut rng = RngStream::new(0);
    let obj = batch_objective(
        model,
        &mut tape,
        &bound,
        &refs,
        targets,
        scheme,
        weights,
        fine_target,
        false,
        &mut rng,
    )?;
    let grads = tape.backward(obj.total)?;

    let mut params = Vec::with_capacity(PARAM_NAMES.len());
    for (k, (var, name)) in bound.vars().iter().zip(PARAM_NAMES).enumerate() {
        let analytic = grads.wrt(*var).expect("leaf gradient").to_vec();
        let x = model.params.tensors()[k].clone();
        let mut probe = model.clone();
        let mut f = |t: &Tensor| {
            *probe.params.tensors_mut()[k] = t.clone();
            composite_loss(&probe, clips, targets, scheme, weights, fine_target)
        };
        let numeric = central_differences(&mut f, &x, DEFAULT_EPS)?;
        params.push(ParamCheck {
            name,
            max_rel_error: max_relative_error(&analytic, &numeric),
        });
    }
    Ok(GradCheckReport { params })
}

/// Random toy model, clip batch and targets for draw `seed`.
pub fn toy_draw(seed: u64, batch: usize, clips: usize) -> Result<(Model, Vec<Tensor>, Vec<f64>)> {
    let cfg = toy_model_config();
    let model = Model::new(cfg.clone(), seed)?;
    let scheme = toy_scheme();
    let mut rng = RngStream::with_stream(seed, 99);
    let mut xs = Vec::with_capacity(batch);
    let mut ys = Vec::with_capacity(batch);
    for _ in 0..batch {
        let data = (0..clips * cfg.clip_dim).map(|_| rng.normal()).collect();
        xs.push(Tensor::new(vec![clips, cfg.clip_dim], data)?);
        ys.push(scheme.score_max * rng.uniform());
    }
    Ok((model, xs, ys))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_composite_gradients_match() {
        let (model, xs, ys) = toy_draw(7, 2, 4).unwrap();
        let r = composite_grad_check(
            &model,
            &xs,
            &ys,
            &toy_scheme(),
            &LossWeights::default(),
            FineTarget::GroundTruth,
        )
        .unwrap();
        assert_eq!(r.params.len(), 17);
        assert!(r.max() < 1e-4, "{r:?}");
    }

    fn flat_grads(model: &Model, xs: &[Tensor], ys: &[f64], w: LossWeights) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let refs: Vec<&Tensor> = xs.iter().collect();
        let mut rng = RngStream::new(0);
        let obj = batch_objective(
            model,
            &mut tape,
            &bound,
            &refs,
            ys,
            &toy_scheme(),
            &w,
            FineTarget::GroundTruth,
            false,
            &mut rng,
        )
        .unwrap();
        let g = tape.backward(obj.total).unwrap();
        bound
            .vars()
            .iter()
            .flat_map(|v| g.wrt(*v).unwrap().to_vec())
            .collect()
    }

    #[test]
    fn composite_gradient_is_weighted_sum_of_terms() {
        let (model, xs, ys) = toy_draw(3, 2, 4).unwrap();
        let zero = LossWeights {
            lambda_c: 0.0,
            lambda_f: 0.0,
            lambda_r: 0.0,
        };
        let base = flat_grads(&model, &xs, &ys, zero);
        let term = |w: LossWeights| -> Vec<f64> {
            flat_grads(&model, &xs, &ys, w)
                .iter()
                .zip(&base)
                .map(|(a, b)| a - b)
                .collect()
        };
        let c = term(LossWeights {
            lambda_c: 1.0,
            ..zero
        });
        let f = term(LossWeights {
            lambda_f: 1.0,
            ..zero
        });
        let r = term(LossWeights {
            lambda_r: 1.0,
            ..zero
        });
        let w = LossWeights {
            lambda_c: 0.5,
            lambda_f: 2.0,
            lambda_r: 3.0,
        };
        let full = flat_grads(&model, &xs, &ys, w);
        for i in 0..full.len() {
            let want = base[i] + 0.5 * c[i] + 2.0 * f[i] + 3.0 * r[i];
            assert!(
                (full[i] - want).abs() <= 1e-10 * (1.0 + want.abs()),
                "{i}: {} vs {want}",
                full[i]
            );
        }
        assert!(r.iter().any(|v| v.abs() > 0.0));
    }
}

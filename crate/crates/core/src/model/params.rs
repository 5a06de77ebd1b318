use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tape, Tensor, Var};

/// Scale of the Gaussian used to initialize grade prototypes.
pub const PROTOTYPE_INIT_STD: f64 = 0.02;

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weight and bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect::<Vec<_>>()
        };
        let weight = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("sized");
        let bias = Tensor::vector(draw(fan_out));
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Key/value maps `D_C -> D_P` and the procedure query map `D_C -> P*D_P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfmWeights {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
}

/// Learnable `G x D_P` grade prototype matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradePrototypes(pub Tensor);

/// Query map on prototypes and key/value maps on procedure features, all into `D_S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpmWeights {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
}

/// One-hidden-layer MLP from the flattened `G x D_S` coarse feature to `G` logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseHeadWeights {
    pub hidden: Affine,
    pub out: Affine,
}

/// Every trainable tensor of the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub tfm: TfmWeights,
    pub prototypes: GradePrototypes,
    pub gpm: GpmWeights,
    pub coarse: CoarseHeadWeights,
}

/// Parameter names in their declared (checkpoint) order.
pub const PARAM_NAMES: [&str; 17] = [
    "tfm.query.weight",
    "tfm.query.bias",
    "tfm.key.weight",
    "tfm.key.bias",
    "tfm.value.weight",
    "tfm.value.bias",
    "prototypes",
    "gpm.query.weight",
    "gpm.query.bias",
    "gpm.key.weight",
    "gpm.key.bias",
    "gpm.value.weight",
    "gpm.value.bias",
    "coarse.hidden.weight",
    "coarse.hidden.bias",
    "coarse.out.weight",
    "coarse.out.bias",
];

impl HeadParams {
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let (dc, dp, ds) = (cfg.clip_dim, cfg.procedure_dim, cfg.scoring_dim);
        let tfm = TfmWeights {
            query: Affine::init(dc, cfg.procedures * dp, rng),
            key: Affine::init(dc, dp, rng),
            value: Affine::init(dc, dp, rng),
        };
        let protos = (0..cfg.grades * dp)
            .map(|_| PROTOTYPE_INIT_STD * rng.normal())
            .collect();
        let prototypes = GradePrototypes(Tensor::new(vec![cfg.grades, dp], protos).expect("sized"));
        let gpm = GpmWeights {
            query: Affine::init(dp, ds, rng),
            key: Affine::init(dp, ds, rng),
            value: Affine::init(dp, ds, rng),
        };
        let coarse = CoarseHeadWeights {
            hidden: Affine::init(cfg.grades * ds, ds, rng),
            out: Affine::init(ds, cfg.grades, rng),
        };
        Self {
            tfm,
            prototypes,
            gpm,
            coarse,
        }
    }

    /// Tensors in declared order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.tfm.query.weight,
            &self.tfm.query.bias,
            &self.tfm.key.weight,
            &self.tfm.key.bias,
            &self.tfm.value.weight,
            &self.tfm.value.bias,
            &self.prototypes.0,
            &self.gpm.query.weight,
            &self.gpm.query.bias,
            &self.gpm.key.weight,
            &self.gpm.key.bias,
            &self.gpm.value.weight,
            &self.gpm.value.bias,
            &self.coarse.hidden.weight,
            &self.coarse.hidden.bias,
            &self.coarse.out.weight,
            &self.coarse.out.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.tfm.query.weight,
            &mut self.tfm.query.bias,
            &mut self.tfm.key.weight,
            &mut self.tfm.key.bias,
            &mut self.tfm.value.weight,
            &mut self.tfm.value.bias,
            &mut self.prototypes.0,
            &mut self.gpm.query.weight,
            &mut self.gpm.query.bias,
            &mut self.gpm.key.weight,
            &mut self.gpm.key.bias,
            &mut self.gpm.value.weight,
            &mut self.gpm.value.bias,
            &mut self.coarse.hidden.weight,
            &mut self.coarse.hidden.bias,
            &mut self.coarse.out.weight,
            &mut self.coarse.out.bias,
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Replaces every tensor, checking shapes against the current ones.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let slots = self.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Dimension(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((slot, t), name) in slots.into_iter().zip(tensors).zip(PARAM_NAMES) {
            if slot.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "{name}: shape {:?} vs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Registers every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams::from_vars(vars)
    }
}

/// Tape handles for an affine map.
#[derive(Clone, Copy, Debug)]
pub struct BoundAffine {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundTfm {
    pub query: BoundAffine,
    pub key: BoundAffine,
    pub value: BoundAffine,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGpm {
    pub query: BoundAffine,
    pub key: BoundAffine,
    pub value: BoundAffine,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundCoarse {
    pub hidden: BoundAffine,
    pub out: BoundAffine,
}

/// [`HeadParams`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub tfm: BoundTfm,
    pub prototypes: Var,
    pub gpm: BoundGpm,
    pub coarse: BoundCoarse,
    vars: Vec<Var>,
}

impl BoundParams {
    fn from_vars(vars: Vec<Var>) -> Self {
        let a = |i: usize| BoundAffine {
            weight: vars[i],
            bias: vars[i + 1],
        };
        Self {
            tfm: BoundTfm {
                query: a(0),
                key: a(2),
                value: a(4),
            },
            prototypes: vars[6],
            gpm: BoundGpm {
                query: a(7),
                key: a(9),
                value: a(11),
            },
            coarse: BoundCoarse {
                hidden: a(13),
                out: a(15),
            },
            vars,
        }
    }

    /// Handles in declared order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

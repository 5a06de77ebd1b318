use super::params::{BoundCoarse, BoundGpm, BoundTfm};
use super::AlignMode;
use crate::error::{Error, Result};
use crate::etf::EtfMatrix;
use crate::tensor::tape::{align_row, NORM_EPS};
use crate::tensor::{dropout, Activation, RngStream, Tape, Tensor, Var};

/// Fuses `C x D_C` clip features into `P x D_P` procedure features.
///
/// Each clip proposes `P` queries; averaging them over clips gives one query
/// per procedure, which then attends over the clip keys and values.
pub fn tfm_forward(tape: &mut Tape, w: &BoundTfm, clips: Var, procedures: usize) -> Result<Var> {
    if tape.shape(clips).first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyInput(
            "temporal fusion needs at least one clip".into(),
        ));
    }
    let queries = tape.affine(clips, w.query.weight, w.query.bias)?;
    let pooled = tape.mean(queries, 0)?;
    let width = tape.shape(pooled)[0];
    if !width.is_multiple_of(procedures) {
        return Err(Error::Dimension(format!(
            "query width {width} not divisible by {procedures} procedures"
        )));
    }
    let q = tape.reshape(pooled, vec![procedures, width / procedures])?;
    let k = tape.affine(clips, w.key.weight, w.key.bias)?;
    let v = tape.affine(clips, w.value.weight, w.value.bias)?;
    tape.scaled_dot_attention(q, k, v)
}

/// Handles produced by [`gpm_forward`].
#[derive(Clone, Copy, Debug)]
pub struct GpmOutput {
    /// `G x D_S` coarse responses.
    pub coarse: Var,
    /// `G x D_S` masked residuals.
    pub fine: Var,
    /// Length-`G` soft grade mask.
    pub mask: Var,
    /// `G x D_S` embedded prototypes.
    pub query: Var,
}

/// Grade prototypes cross-attend over procedure features.
///
/// The residual subtracts the embedded prototypes (`D_S` wide) rather than
/// the raw `D_P`-wide prototypes, so that the shapes agree.
pub fn gpm_forward(
    tape: &mut Tape,
    prototypes: Var,
    procs: Var,
    w: &BoundGpm,
) -> Result<GpmOutput> {
    let query = tape.affine(prototypes, w.query.weight, w.query.bias)?;
    let k = tape.affine(procs, w.key.weight, w.key.bias)?;
    let v = tape.affine(procs, w.value.weight, w.value.bias)?;
    let coarse = tape.scaled_dot_attention(query, k, v)?;
    let pooled = tape.mean(coarse, 1)?;
    let mask = tape.softmax(pooled, 0)?;
    let diff = tape.sub(coarse, query)?;
    let fine = tape.scale_rows(diff, mask)?;
    Ok(GpmOutput {
        coarse,
        fine,
        mask,
        query,
    })
}

/// Flatten -> affine (width `D_S`) -> activation -> dropout -> affine to `G` logits.
pub fn coarse_head(
    tape: &mut Tape,
    coarse: Var,
    w: &BoundCoarse,
    act: Activation,
    dropout_p: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<Var> {
    let n = tape.value(coarse).len();
    let flat = tape.reshape(coarse, vec![1, n])?;
    let hidden = tape.affine(flat, w.hidden.weight, w.hidden.bias)?;
    let hidden = tape.activation(hidden, act)?;
    let hidden = dropout(tape, hidden, dropout_p, rng, training)?;
    let logits = tape.affine(hidden, w.out.weight, w.out.bias)?;
    let g = tape.value(logits).len();
    tape.reshape(logits, vec![g])
}

/// Handles produced by [`fgs_forward`].
#[derive(Clone, Copy, Debug)]
pub struct FgsOutput {
    /// `<unit, e_j>` for each sub-grade prototype.
    pub similarities: Var,
    /// Column mean of the fine feature.
    pub pooled: Var,
    /// `pooled / |pooled|`, or zeros when the norm vanishes.
    pub unit: Var,
    pub degenerate: bool,
}

/// Scores a `G x D_S` fine feature against the fixed ETF. The pooled vector
/// is min-max aligned onto `align` first when given.
pub fn fgs_forward(
    tape: &mut Tape,
    fine: Var,
    etf: &EtfMatrix,
    align: Option<(f64, f64)>,
) -> Result<FgsOutput> {
    let d = tape.shape(fine).last().copied().unwrap_or(0);
    if etf.d() != d {
        return Err(Error::Config(format!(
            "ETF dimension {} does not match fine feature width {d}",
            etf.d()
        )));
    }
    let pooled = tape.mean(fine, 0)?;
    let pooled = match align {
        Some((lo, hi)) => tape.align_rows(pooled, lo, hi)?,
        None => pooled,
    };
    let norm = tape
        .value(pooled)
        .data()
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let unit = tape.l2_normalize(pooled)?;
    let row = tape.reshape(unit, vec![1, d])?;
    let protos = tape.constant(etf.prototypes().clone());
    let sims = tape.matmul_nt(row, protos)?;
    let similarities = tape.reshape(sims, vec![etf.k()])?;
    Ok(FgsOutput {
        similarities,
        pooled,
        unit,
        degenerate: norm < NORM_EPS,
    })
}

/// Min-max alignment of a single vector onto the mode's range.
pub fn align_features(h: &[f64], mode: AlignMode, clip_dim: usize) -> Vec<f64> {
    let (lo, hi) = mode.bounds(clip_dim);
    let mut out = h.to_vec();
    align_row(&mut out, lo, hi);
    out
}

/// `sum_j j * p_j` for a probability vector `p`.
pub fn expected_index(tape: &mut Tape, probs: Var) -> Result<Var> {
    let n = tape.value(probs).len();
    let row = tape.reshape(probs, vec![1, n])?;
    let idx = tape.constant(Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect())?);
    let e = tape.matmul(row, idx)?;
    tape.reshape(e, vec![])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

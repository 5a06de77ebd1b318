//! Deterministic training and evaluation, history CSV and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{batches, sample_clips, FeatureDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::grading::{GradingScheme, ScoreNormalizer};
use crate::losses::{batch_objective, total_loss, FineTarget, LossParts, LossWeights};
use crate::metrics::srcc;
use crate::model::{HeadParams, Model, ModelConfig, PredictionBundle, PARAM_NAMES};
use crate::tensor::rng::streams;
use crate::tensor::{cosine_lr, sgd_momentum_step, RngState, RngStream, Tape, Tensor};

pub const CONFIG_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"COFK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_max: 0.01,
            lr_min: 0.0001,
            momentum: 0.9,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Feature file for training; synthetic data is generated when absent.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Raw score mapped to `S`; defaults to the training set's maximum.
    pub raw_score_max: Option<f64>,
    /// Training samples taken from the synthetic set; the rest are the test split.
    pub synth_train: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            raw_score_max: Some(100.0),
            synth_train: 200,
            synth: SynthConfig::default(),
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub grading: GradingScheme,
    pub loss: LossWeights,
    pub fine_target: FineTarget,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            clip_dim: 32,
            procedure_dim: 32,
            scoring_dim: 32,
            train_clips: 8,
            ..ModelConfig::default()
        };
        let grading = GradingScheme::from_counts(7.0, 7, 10).expect("valid default scheme");
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            model,
            grading,
            loss: LossWeights::default(),
            fine_target: FineTarget::GroundTruth,
            optim: OptimConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::IncompatibleVersion {
                found: self.version,
                supported: CONFIG_VERSION,
            });
        }
        self.model.validate()?;
        self.grading.validate()?;
        self.loss.validate()?;
        if self.grading.grades() != self.model.grades
            || self.grading.sub_grades() != self.model.sub_grades
        {
            return Err(Error::Config(format!(
                "grading scheme has {} grades x {} sub-grades but the model has {} x {}",
                self.grading.grades(),
                self.grading.sub_grades(),
                self.model.grades,
                self.model.sub_grades
            )));
        }
        let o = &self.optim;
        let lr_ok =
            o.lr_max.is_finite() && o.lr_min.is_finite() && 0.0 <= o.lr_min && o.lr_min <= o.lr_max;
        if !lr_ok {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                o.lr_min, o.lr_max
            )));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                o.momentum
            )));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                o.weight_decay
            )));
        }
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if let Some(m) = self.data.raw_score_max {
            ScoreNormalizer::new(m, self.grading.score_max)?;
        }
        Ok(())
    }

    /// Synthetic train/test splits described by `data.synth`.
    pub fn synth_splits(&self) -> Result<(FeatureDataset, FeatureDataset)> {
        synth_generate_split(&self.data.synth, self.data.synth_train)
    }

    /// Train/test splits from `data.train`/`data.test`, or synthetic ones when no files are set.
    pub fn load_splits(&self) -> Result<(FeatureDataset, FeatureDataset)> {
        match (&self.data.train, &self.data.test) {
            (None, None) => self.synth_splits(),
            (Some(a), Some(b)) => Ok((
                crate::data::read_features(a)?,
                crate::data::read_features(b)?,
            )),
            _ => Err(Error::Config(
                "data.train and data.test must be set together".into(),
            )),
        }
    }
}

fn synth_generate_split(
    cfg: &SynthConfig,
    n_train: usize,
) -> Result<(FeatureDataset, FeatureDataset)> {
    crate::data::synth_generate(cfg)?.split(n_train)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_s: f64,
    pub loss_c: f64,
    pub loss_f: f64,
    pub loss_r: f64,
    pub train_srcc: f64,
    pub test_srcc: f64,
    pub grade_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str =
    "epoch,lr,loss_total,loss_s,loss_c,loss_f,loss_r,train_srcc,test_srcc,grade_acc";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.loss_total,
                r.loss_s,
                r.loss_c,
                r.loss_f,
                r.loss_r,
                r.train_srcc,
                r.test_srcc,
                r.grade_acc
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Metrics on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub srcc: f64,
    pub grade_accuracy: f64,
    /// Predicted scores on the raw dataset scale.
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Full-clip inference on every sample; SRCC of soft scores, accuracy of argmax grades.
pub fn evaluate(
    model: &Model,
    dataset: &FeatureDataset,
    scheme: &GradingScheme,
    normalizer: &ScoreNormalizer,
) -> Result<EvalReport> {
    if dataset.len() < 2 {
        return Err(Error::Metric(format!(
            "evaluation needs at least 2 samples, got {}",
            dataset.len()
        )));
    }
    check_dims(&model.config, dataset)?;
    let mut preds = Vec::with_capacity(dataset.len());
    let mut correct = 0usize;
    for s in &dataset.samples {
        let x = s.to_tensor(dataset.clip_dim)?;
        let p: PredictionBundle = model.predict(&x, scheme)?;
        let target = normalizer.forward(s.score).clamp(0.0, scheme.score_max);
        let (g, _) = scheme.decompose(target)?;
        correct += usize::from(p.grade == g);
        preds.push(p.score);
    }
    let truth = dataset.scores();
    let rho = srcc(&preds, &truth)?;
    Ok(EvalReport {
        srcc: rho,
        grade_accuracy: correct as f64 / dataset.len() as f64,
        predictions: preds.iter().map(|&p| normalizer.inverse(p)).collect(),
        targets: truth,
    })
}

fn check_dims(cfg: &ModelConfig, ds: &FeatureDataset) -> Result<()> {
    if ds.clip_dim != cfg.clip_dim {
        return Err(Error::Config(format!(
            "dataset clip dim {} but model expects {}",
            ds.clip_dim, cfg.clip_dim
        )));
    }
    Ok(())
}

/// Serializable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub normalizer: ScoreNormalizer,
    pub params: HeadParams,
    pub velocity: Vec<Tensor>,
    pub history: TrainHistory,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: RunConfig,
    epoch: usize,
    rng: RngState,
    normalizer: ScoreNormalizer,
    params: Vec<TensorEntry>,
    velocity: Vec<TensorEntry>,
    history: TrainHistory,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(
            self.config.model.clone(),
            self.params.clone(),
            self.config.seed,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = |ts: Vec<&Tensor>| {
            ts.iter()
                .zip(PARAM_NAMES)
                .map(|(t, n)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect::<Vec<_>>()
        };
        let header = CheckpointHeader {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng,
            normalizer: self.normalizer,
            params: entries(self.params.tensors()),
            velocity: entries(self.velocity.iter().collect()),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let json_len = u32::try_from(json.len())
            .map_err(|_| Error::Config("checkpoint header too large".into()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&json_len.to_le_bytes());
        buf.extend_from_slice(&json);
        for t in self
            .params
            .tensors()
            .into_iter()
            .chain(self.velocity.iter())
        {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format { offset, msg };
        if buf.len() < 16 {
            return Err(fmt(0, format!("checkpoint too short: {} bytes", buf.len())));
        }
        if &buf[..4] != CHECKPOINT_MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", &buf[..4])));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let body_end = buf.len() - 4;
        let stored = u32::from_le_bytes(buf[body_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&buf[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let json_len = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
        let json_end = 12usize
            .checked_add(json_len)
            .filter(|&e| e <= body_end)
            .ok_or_else(|| fmt(8, format!("header length {json_len} exceeds file")))?;
        let header: CheckpointHeader = serde_json::from_slice(&buf[12..json_end])?;
        header.config.validate()?;

        let mut pos = json_end;
        let mut read_blob = |e: &TensorEntry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let end = pos + 8 * n;
            if end > body_end {
                return Err(fmt(
                    pos,
                    format!(
                        "{}: expected {} bytes, {} available",
                        e.name,
                        8 * n,
                        body_end - pos
                    ),
                ));
            }
            let data = buf[pos..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8")))
                .collect();
            pos = end;
            Tensor::new(e.shape.clone(), data)
        };
        let params: Vec<Tensor> = header
            .params
            .iter()
            .map(&mut read_blob)
            .collect::<Result<_>>()?;
        let velocity: Vec<Tensor> = header
            .velocity
            .iter()
            .map(&mut read_blob)
            .collect::<Result<_>>()?;
        if pos != body_end {
            return Err(fmt(
                pos,
                format!("{} trailing bytes before checksum", body_end - pos),
            ));
        }
        let mut head = HeadParams::init(&header.config.model, &mut RngStream::new(0));
        head.load_tensors(params)?;
        if velocity.len() != PARAM_NAMES.len() {
            return Err(Error::Dimension(format!(
                "expected {} velocity tensors, got {}",
                PARAM_NAMES.len(),
                velocity.len()
            )));
        }
        for (v, p) in velocity.iter().zip(head.tensors()) {
            if v.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "velocity shape {:?} vs parameter {:?}",
                    v.shape(),
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            normalizer: header.normalizer,
            params: head,
            velocity,
            history: header.history,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Mutable state of a run in progress.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    velocity: Vec<Tensor>,
    rng: RngStream,
    normalizer: ScoreNormalizer,
    epoch: usize,
    history: TrainHistory,
    train: FeatureDataset,
    test: FeatureDataset,
    train_targets: Vec<f64>,
}

impl Trainer {
    pub fn new(config: RunConfig, train: FeatureDataset, test: FeatureDataset) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptyInput(
                "training and test sets must be non-empty".into(),
            ));
        }
        let observed = match config.data.raw_score_max {
            Some(m) => m,
            None => train.score_range().map(|r| r.1).unwrap_or(0.0),
        };
        let normalizer = ScoreNormalizer::new(observed, config.grading.score_max)?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let velocity = model
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let rng = RngStream::with_stream(config.seed, streams::TRAIN);
        Self::assemble(
            config,
            model,
            velocity,
            rng,
            normalizer,
            0,
            TrainHistory::default(),
            train,
            test,
        )
    }

    pub fn resume(ckpt: Checkpoint, train: FeatureDataset, test: FeatureDataset) -> Result<Self> {
        let model = ckpt.model()?;
        let rng = RngStream::from_state(ckpt.rng);
        Self::assemble(
            ckpt.config,
            model,
            ckpt.velocity,
            rng,
            ckpt.normalizer,
            ckpt.epoch,
            ckpt.history,
            train,
            test,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: RunConfig,
        model: Model,
        velocity: Vec<Tensor>,
        rng: RngStream,
        normalizer: ScoreNormalizer,
        epoch: usize,
        history: TrainHistory,
        train: FeatureDataset,
        test: FeatureDataset,
    ) -> Result<Self> {
        check_dims(&config.model, &train)?;
        check_dims(&config.model, &test)?;
        let s_max = config.grading.score_max;
        let train_targets = train
            .samples
            .iter()
            .map(|s| normalizer.forward(s.score).clamp(0.0, s_max))
            .collect();
        Ok(Self {
            config,
            model,
            velocity,
            rng,
            normalizer,
            epoch,
            history,
            train,
            test,
            train_targets,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn normalizer(&self) -> &ScoreNormalizer {
        &self.normalizer
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.optim.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.state(),
            normalizer: self.normalizer,
            params: self.model.params.clone(),
            velocity: self.velocity.clone(),
            history: self.history.clone(),
        }
    }

    /// One pass over the training set followed by evaluation of both splits.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let o = self.config.optim.clone();
        let epoch = self.epoch;
        let lr = cosine_lr(epoch, o.epochs, o.lr_max, o.lr_min)?;
        let order = batches(self.train.len(), o.batch_size, &mut self.rng)?;
        let mut sums = LossParts::<f64>::default();
        for (b, idx) in order.iter().enumerate() {
            let parts = self.train_batch(idx, lr).map_err(|e| match e {
                Error::NonFinite(msg) => Error::Diverged {
                    epoch,
                    batch: b,
                    msg,
                },
                other => other,
            })?;
            let w = idx.len() as f64;
            sums.score += w * parts.score;
            sums.coarse += w * parts.coarse;
            sums.fine += w * parts.fine;
            sums.reg += w * parts.reg;
        }
        let n = self.train.len() as f64;
        let mean = LossParts {
            score: sums.score / n,
            coarse: sums.coarse / n,
            fine: sums.fine / n,
            reg: sums.reg / n,
        };
        let loss_total = total_loss(mean, &self.config.loss)?;
        let scheme = self.config.grading;
        let train_eval = evaluate(&self.model, &self.train, &scheme, &self.normalizer)?;
        let test_eval = evaluate(&self.model, &self.test, &scheme, &self.normalizer)?;
        let rec = EpochRecord {
            epoch,
            lr,
            loss_total,
            loss_s: mean.score,
            loss_c: mean.coarse,
            loss_f: mean.fine,
            loss_r: mean.reg,
            train_srcc: train_eval.srcc,
            test_srcc: test_eval.srcc,
            grade_acc: test_eval.grade_accuracy,
        };
        log::info!(
            "epoch {epoch} lr {lr:.6} loss {loss_total:.5} train_srcc {:.4} test_srcc {:.4} acc {:.3}",
            rec.train_srcc,
            rec.test_srcc,
            rec.grade_acc
        );
        self.history.records.push(rec);
        self.epoch += 1;
        Ok(self.history.records.last().expect("just pushed"))
    }

    fn train_batch(&mut self, idx: &[usize], lr: f64) -> Result<LossParts<f64>> {
        let cfg = &self.config;
        let d = self.train.clip_dim;
        let mut clips = Vec::with_capacity(idx.len());
        for &i in idx {
            clips.push(sample_clips(
                &self.train.samples[i],
                d,
                cfg.model.train_clips,
                true,
                &mut self.rng,
            )?);
        }
        let clip_refs: Vec<&Tensor> = clips.iter().collect();
        let targets: Vec<f64> = idx.iter().map(|&i| self.train_targets[i]).collect();

        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, true);
        let obj = batch_objective(
            &self.model,
            &mut tape,
            &bound,
            &clip_refs,
            &targets,
            &cfg.grading,
            &cfg.loss,
            cfg.fine_target,
            true,
            &mut self.rng,
        )?;
        let parts = obj.part_values(&tape);
        let total = tape.value(obj.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss {total}")));
        }
        let grads = tape.backward(obj.total)?;
        let o = &cfg.optim;
        let params = self.model.params.tensors_mut();
        for ((p, v), var) in params
            .into_iter()
            .zip(self.velocity.iter_mut())
            .zip(bound.vars())
        {
            let g = grads
                .wrt(*var)
                .ok_or_else(|| Error::Dimension("missing parameter gradient".into()))?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("non-finite gradient".into()));
            }
            sgd_momentum_step(p, g, v, lr, o.momentum, o.weight_decay)?;
        }
        Ok(parts)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Runs until `epoch` epochs have completed (or the run ends).
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.epoch < epoch.min(self.config.optim.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn evaluate_split(&self, test: bool) -> Result<EvalReport> {
        let ds = if test { &self.test } else { &self.train };
        evaluate(&self.model, ds, &self.config.grading, &self.normalizer)
    }
}

/// Trains from scratch to completion.
pub fn train(
    config: RunConfig,
    train_set: FeatureDataset,
    test_set: FeatureDataset,
) -> Result<(Checkpoint, TrainHistory)> {
    let mut t = Trainer::new(config, train_set, test_set)?;
    t.run()?;
    let ck = t.checkpoint();
    let h = ck.history.clone();
    Ok((ck, h))
}

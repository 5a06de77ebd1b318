//! Clip-feature datasets: the `COFI` file format, a synthetic generator with
//! planted scores, clip-window sampling and batching.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"COFI";
pub const FEATURE_VERSION: u32 = 1;

/// Clip features of one performance, `clips x clip_dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f32>,
    pub clips: usize,
    pub score: f64,
}

impl Sample {
    pub fn new(features: Vec<f32>, clips: usize, clip_dim: usize, score: f64) -> Result<Self> {
        if features.len() != clips * clip_dim {
            return Err(Error::Dimension(format!(
                "{} feature values for {clips} clips of dim {clip_dim}",
                features.len()
            )));
        }
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("sample score {score}")));
        }
        Ok(Self {
            features,
            clips,
            score,
        })
    }

    /// Rows `range` as an `f64` matrix.
    pub fn window(&self, range: Range<usize>, clip_dim: usize) -> Result<Tensor> {
        if range.end > self.clips || range.start >= range.end {
            return Err(Error::Dimension(format!(
                "clip window {range:?} of {} clips",
                self.clips
            )));
        }
        let data = self.features[range.start * clip_dim..range.end * clip_dim]
            .iter()
            .map(|&v| v as f64)
            .collect();
        Tensor::new(vec![range.len(), clip_dim], data)
    }

    pub fn to_tensor(&self, clip_dim: usize) -> Result<Tensor> {
        self.window(0..self.clips, clip_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub clip_dim: usize,
    pub samples: Vec<Sample>,
}

impl FeatureDataset {
    pub fn new(clip_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if clip_dim == 0 {
            return Err(Error::Dimension("clip dimension must be positive".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != s.clips * clip_dim {
                return Err(Error::Dimension(format!(
                    "sample {i}: {} values, dim {clip_dim}",
                    s.features.len()
                )));
            }
            if s.clips == 0 {
                return Err(Error::EmptyInput(format!("sample {i} has no clips")));
            }
        }
        Ok(Self { clip_dim, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.score).collect()
    }

    /// Observed `(min, max)` score.
    pub fn score_range(&self) -> Option<(f64, f64)> {
        let mut it = self.samples.iter().map(|s| s.score);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    fn uniform_clips(&self) -> Option<usize> {
        let c = self.samples.first()?.clips;
        self.samples.iter().all(|s| s.clips == c).then_some(c)
    }

    /// First `n` samples and the rest.
    pub fn split(mut self, n: usize) -> Result<(Self, Self)> {
        if n > self.len() {
            return Err(Error::Config(format!(
                "cannot split {} samples at {n}",
                self.len()
            )));
        }
        let rest = self.samples.split_off(n);
        let d = self.clip_dim;
        Ok((
            self,
            Self {
                clip_dim: d,
                samples: rest,
            },
        ))
    }
}

/// Encodes a dataset in the `COFI` layout.
pub fn encode_features(ds: &FeatureDataset) -> Result<Vec<u8>> {
    let n = u32::try_from(ds.len()).map_err(|_| Error::Config("too many samples".into()))?;
    let d = u32::try_from(ds.clip_dim).map_err(|_| Error::Config("clip dim too large".into()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    let uniform = ds.uniform_clips();
    let c = uniform.unwrap_or(0);
    let c = u32::try_from(c).map_err(|_| Error::Config("too many clips".into()))?;
    buf.extend_from_slice(&c.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    if uniform.is_none() {
        for s in &ds.samples {
            buf.extend_from_slice(&(s.clips as u32).to_le_bytes());
        }
    }
    for s in &ds.samples {
        for v in &s.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in &ds.samples {
        buf.extend_from_slice(&s.score.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                msg: format!(
                    "truncated {what}: expected {n} bytes, {} available (file length {})",
                    self.buf.len() - self.pos,
                    self.buf.len()
                ),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Decodes the `COFI` layout, checking magic, version, lengths and CRC.
pub fn decode_features(buf: &[u8]) -> Result<FeatureDataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != FEATURE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}", &buf[..4]),
        });
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::IncompatibleVersion {
            found: version,
            supported: FEATURE_VERSION,
        });
    }
    let n = r.u32("sample count")? as usize;
    let c = r.u32("clip count")? as usize;
    let d = r.u32("clip dim")? as usize;
    if d == 0 {
        return Err(Error::Format {
            offset: 16,
            msg: "clip dim is zero".into(),
        });
    }
    let counts: Vec<usize> = if c == 0 {
        let mut v = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            v.push(r.u32("per-sample clip counts")? as usize);
        }
        v
    } else {
        vec![c; n]
    };
    let total: usize = counts.iter().sum();
    let feat_bytes = total
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format {
            offset: r.pos,
            msg: "feature block size overflows".into(),
        })?;
    let expected = r.pos + feat_bytes + 8 * n + 4;
    if buf.len() != expected {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!("expected file length {expected} bytes, found {}", buf.len()),
        });
    }
    let feats = r.take(feat_bytes, "features")?;
    let scores = r.take(8 * n, "scores")?;
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut samples = Vec::with_capacity(n);
    let mut fpos = 0;
    for (i, &k) in counts.iter().enumerate() {
        let len = k * d * 4;
        let features = feats[fpos..fpos + len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        fpos += len;
        let score = f64::from_le_bytes(scores[8 * i..8 * i + 8].try_into().expect("8 bytes"));
        samples.push(Sample::new(features, k, d, score)?);
    }
    FeatureDataset::new(d, samples)
}

pub fn write_features(path: &Path, ds: &FeatureDataset) -> Result<()> {
    let buf = encode_features(ds)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureDataset> {
    decode_features(&fs::read(path)?)
}

/// Synthetic dataset with a planted monotone feature-to-score structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub samples: usize,
    pub clips: usize,
    pub clip_dim: usize,
    pub grades: usize,
    pub sub_grades: usize,
    pub noise_sigma: f64,
    pub score_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 250,
            clips: 16,
            clip_dim: 32,
            grades: 7,
            sub_grades: 10,
            noise_sigma: 1.0,
            score_max: 100.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0
            || self.clips == 0
            || self.clip_dim == 0
            || self.grades == 0
            || self.sub_grades == 0
        {
            return Err(Error::Config("synthetic sizes must all be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.score_max > 0.0 && self.score_max.is_finite()) {
            return Err(Error::Config(format!(
                "score_max must be positive, got {}",
                self.score_max
            )));
        }
        Ok(())
    }
}

/// RMS norm of the per-clip phase embedding.
const PHASE_AMPLITUDE: f64 = 0.5;
/// Amplitude of the per-grade random offset added to the monotone grade axis.
const GRADE_JITTER: f64 = 0.5;

/// Fixed random structure shared by every synthetic sample.
pub struct SynthPlant {
    axis: Vec<f64>,
    sub_axis: Vec<f64>,
    means: Vec<Vec<f64>>,
    freqs: Vec<f64>,
    phases: Vec<f64>,
    phase_scale: f64,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

impl SynthPlant {
    pub fn draw(cfg: &SynthConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.clip_dim;
        let gauss = |rng: &mut RngStream| unit((0..d).map(|_| rng.normal()).collect());
        let axis = gauss(rng);
        let sub_axis = gauss(rng);
        let means = (0..cfg.grades)
            .map(|g| {
                let t = if cfg.grades > 1 {
                    2.0 * g as f64 / (cfg.grades - 1) as f64 - 1.0
                } else {
                    0.0
                };
                let jitter = gauss(rng);
                axis.iter()
                    .zip(&jitter)
                    .map(|(a, r)| t * a + GRADE_JITTER * r)
                    .collect()
            })
            .collect();
        let freqs = (0..d).map(|_| rng.uniform_range(0.1, 1.0)).collect();
        let phases = (0..d)
            .map(|_| rng.uniform_range(0.0, std::f64::consts::TAU))
            .collect();
        let phase_scale = PHASE_AMPLITUDE * (2.0 / d as f64).sqrt();
        Ok(Self {
            axis,
            sub_axis,
            means,
            freqs,
            phases,
            phase_scale,
        })
    }

    /// Clip features for latent score `q`.
    pub fn render(&self, q: f64, cfg: &SynthConfig, rng: &mut RngStream) -> Vec<f32> {
        let d = self.axis.len();
        let span = cfg.score_max / cfg.grades as f64;
        let g = ((q / span).floor() as usize).min(cfg.grades - 1);
        let u = ((q - g as f64 * span) / span).clamp(0.0, 1.0);
        let mut feats = Vec::with_capacity(cfg.clips * d);
        for c in 0..cfg.clips {
            for i in 0..d {
                let phase = self.phase_scale * (c as f64 * self.freqs[i] + self.phases[i]).sin();
                let noise = if cfg.noise_sigma > 0.0 {
                    cfg.noise_sigma * rng.normal()
                } else {
                    0.0
                };
                feats.push(
                    (self.means[g][i] + (2.0 * u - 1.0) * self.sub_axis[i] + phase + noise) as f32,
                );
            }
        }
        feats
    }
}

/// Draws `q ~ U[0, S)`, splits it into grade `g` and in-grade position `u`, and
/// builds each clip as `mu_g + (2u - 1) w + phase_c + noise`, where
/// `mu_g = (2g/(G-1) - 1) a + 0.5 r_g` and `a`, `w`, `r_g` are random unit vectors.
pub fn synth_generate(cfg: &SynthConfig) -> Result<FeatureDataset> {
    let mut rng = RngStream::with_stream(cfg.seed, crate::tensor::rng::streams::SYNTH);
    let plant = SynthPlant::draw(cfg, &mut rng)?;
    let mut samples = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let q = cfg.score_max * rng.uniform();
        let feats = plant.render(q, cfg, &mut rng);
        samples.push(Sample::new(feats, cfg.clips, cfg.clip_dim, q)?);
    }
    FeatureDataset::new(cfg.clip_dim, samples)
}

/// Clip range used for one forward pass: a random contiguous window of
/// `c_train` clips when training, every clip otherwise.
pub fn clip_window(
    clips: usize,
    c_train: usize,
    training: bool,
    rng: &mut RngStream,
) -> Result<Range<usize>> {
    if c_train == 0 {
        return Err(Error::Config("train_clips must be at least 1".into()));
    }
    if !training || clips <= c_train {
        return Ok(0..clips);
    }
    let start = rng.below(clips - c_train + 1);
    Ok(start..start + c_train)
}

/// The sample's clip features restricted to [`clip_window`].
pub fn sample_clips(
    sample: &Sample,
    clip_dim: usize,
    c_train: usize,
    training: bool,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let w = clip_window(sample.clips, c_train, training, rng)?;
    sample.window(w, clip_dim)
}

/// Shuffled index batches of size `batch`; the last one may be shorter.
pub fn batches(n: usize, batch: usize, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    Ok(idx.chunks(batch).map(|c| c.to_vec()).collect())
}

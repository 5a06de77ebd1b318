use c2f_core::data::{
    decode_features, encode_features, synth_generate, FeatureDataset, Sample, SynthConfig,
};
use c2f_core::{srcc, Error, GradingScheme, RngStream};
use proptest::prelude::*;

fn dataset(n: usize, dim: usize, fixed: bool, seed: u64) -> FeatureDataset {
    let mut rng = RngStream::new(seed);
    let samples = (0..n)
        .map(|_| {
            let clips = if fixed { 3 } else { 1 + rng.below(5) };
            let feats = (0..clips * dim).map(|_| rng.normal() as f32).collect();
            Sample::new(feats, clips, dim, 100.0 * rng.uniform()).unwrap()
        })
        .collect();
    FeatureDataset::new(dim, samples).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn encode_decode_round_trip(n in 1usize..64, dim in 1usize..128, fixed in any::<bool>(), seed in any::<u64>()) {
        let ds = dataset(n, dim, fixed, seed);
        let bytes = encode_features(&ds).unwrap();
        let back = decode_features(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_features(&back).unwrap(), bytes);
    }

    #[test]
    fn any_flipped_bit_is_caught(seed in any::<u64>(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let bytes = encode_features(&dataset(4, 5, false, seed)).unwrap();
        let mut bad = bytes.clone();
        let i = pos.index(bad.len());
        bad[i] ^= 1 << bit;
        prop_assert!(decode_features(&bad).is_err());
    }
}

#[test]
fn truncated_file_reports_lengths() {
    let bytes = encode_features(&dataset(3, 4, true, 1)).unwrap();
    match decode_features(&bytes[..bytes.len() - 9]) {
        Err(Error::Format { msg, .. }) => assert!(msg.contains("expected file length"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

/// Least-squares fit from mean-pooled features (plus a bias) to the score.
struct LinearProbe {
    w: Vec<f64>,
}

fn pooled(ds: &FeatureDataset) -> Vec<Vec<f64>> {
    ds.samples
        .iter()
        .map(|s| {
            let mut m = vec![0.0; ds.clip_dim + 1];
            for c in 0..s.clips {
                for i in 0..ds.clip_dim {
                    m[i] += s.features[c * ds.clip_dim + i] as f64 / s.clips as f64;
                }
            }
            m[ds.clip_dim] = 1.0;
            m
        })
        .collect()
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|k| a[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    x
}

impl LinearProbe {
    fn fit(ds: &FeatureDataset) -> Self {
        let x = pooled(ds);
        let y = ds.scores();
        let d = x[0].len();
        let mut a = vec![vec![0.0; d]; d];
        let mut b = vec![0.0; d];
        for (xi, yi) in x.iter().zip(&y) {
            for i in 0..d {
                b[i] += xi[i] * yi;
                for j in 0..d {
                    a[i][j] += xi[i] * xi[j];
                }
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 1e-8;
        }
        Self { w: solve(a, b) }
    }

    fn predict(&self, ds: &FeatureDataset) -> Vec<f64> {
        pooled(ds)
            .iter()
            .map(|x| x.iter().zip(&self.w).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[test]
fn linear_probe_recovers_low_noise_scores() {
    let cfg = SynthConfig {
        samples: 250,
        noise_sigma: 0.1,
        ..SynthConfig::default()
    };
    let (train, test) = synth_generate(&cfg).unwrap().split(200).unwrap();
    let probe = LinearProbe::fit(&train);
    let rho = srcc(&probe.predict(&test), &test.scores()).unwrap();
    assert!(rho > 0.95, "probe SRCC {rho}");
}

#[test]
fn every_grade_populated_over_seeds() {
    for seed in 0..20 {
        let cfg = SynthConfig {
            samples: 50 * 7,
            grades: 7,
            seed,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        let scheme = GradingScheme::from_counts(cfg.score_max, cfg.grades, cfg.sub_grades).unwrap();
        let mut seen = [false; 7];
        for s in ds.scores() {
            seen[scheme.decompose(s).unwrap().0] = true;
        }
        assert!(seen.iter().all(|&b| b), "seed {seed}: {seen:?}");
    }
}

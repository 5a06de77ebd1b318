//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use c2f_core::check::{composite_grad_check, toy_draw, toy_scheme};
use c2f_core::losses::graph_reg_loss;
use c2f_core::trainer::{load_checkpoint, save_checkpoint, RunConfig, TrainHistory, Trainer};
use c2f_core::{
    build_etf, fisher_z_average, srcc, verify_etf, GradingScheme, LossWeights, RngStream, Tape,
    Tensor,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn etf_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::with_stream(2024, 7);
    let (mut worst_gram, mut worst_cross) = (0.0f64, 0.0f64);
    for i in 0..50 {
        let d = 2 + rng.below(511);
        let k = 2 + rng.below(d - 1);
        let etf = build_etf(d, k, &mut RngStream::new(i)).expect("feasible");
        worst_gram = worst_gram.max(verify_etf(&etf));
        let target = -1.0 / (k as f64 - 1.0);
        for a in 0..k {
            for b in a + 1..k {
                let dot: f64 = etf.row(a).iter().zip(etf.row(b)).map(|(x, y)| x * y).sum();
                worst_cross = worst_cross.max((dot - target).abs());
            }
        }
    }
    let t = start.elapsed();
    let pass = worst_gram < 1e-8 && worst_cross < 1e-8 && t < Duration::from_secs(5);
    outcome(
        pass,
        format!(
            "50 frames, max Gram deviation {worst_gram:.2e}, max cross error {worst_cross:.2e}, {}",
            secs(t)
        ),
    )
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut errs = Vec::new();
    for draw in 0..10 {
        let (model, xs, ys) = toy_draw(1000 + draw, 2, 4).expect("toy draw");
        let rep = composite_grad_check(
            &model,
            &xs,
            &ys,
            &toy_scheme(),
            &LossWeights::default(),
            c2f_core::FineTarget::GroundTruth,
        )
        .expect("grad check");
        errs.push(rep.max());
    }
    let t = start.elapsed();
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    let pass = errs.iter().all(|&e| e < 1e-4) && t < Duration::from_secs(30);
    outcome(
        pass,
        format!("10 draws, max relative error {worst:.2e}, {}", secs(t)),
    )
}

fn grading_round_trip() -> Outcome {
    let start = Instant::now();
    let scheme = GradingScheme::new(100.0, 10.0, 1.0).expect("scheme");
    let (mut worst, mut worst_at) = (0.0f64, 0.0);
    let mut monotone = true;
    let mut prev = (0, 0);
    for i in 0..=10_000 {
        let s = i as f64 * 0.01;
        let cell = scheme.decompose(s).expect("in range");
        let err = (scheme.couple(cell.0 as f64, cell.1 as f64) - s).abs();
        if err >= worst {
            (worst, worst_at) = (err, s);
        }
        monotone &= cell >= prev;
        prev = cell;
    }
    let t = start.elapsed();
    let pass = worst < 1.0 && monotone && t < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "10001 grid points, max |couple(decompose(s)) - s| = {worst:.4} at s = {worst_at}, monotone {monotone}, {}",
            secs(t)
        ),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = RngStream::with_stream(77, 7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 2 + rng.below(49);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let truth: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let pred: Vec<f64> = perm.iter().map(|&p| p as f64).collect();
        let d2: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &p)| ((i as f64) - (p as f64)).powi(2))
            .sum();
        let nf = n as f64;
        let closed = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        worst = worst.max((srcc(&pred, &truth).expect("tie free") - closed).abs());
    }
    let rg = fisher_z_average(&[0.809, 0.806, 0.804, 0.810]).expect("valid");
    let fis = fisher_z_average(&[0.716, 0.843]).expect("valid");
    let pass = worst <= 1e-12 && (rg - 0.807).abs() <= 0.001 && (fis - 0.788).abs() <= 0.001;
    outcome(
        pass,
        format!("1000 permutations, max error {worst:.1e}; Fisher averages {rg:.4} and {fis:.4}"),
    )
}

fn reg_value_and_grad(p: Tensor) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let g = tape.leaf(p);
    let l = graph_reg_loss(&mut tape, g).expect("non-degenerate");
    let v = tape.value(l).item();
    let grads = tape.backward(l).expect("backward");
    (v, grads.wrt(g).expect("leaf").to_vec())
}

fn graph_regularizer() -> Outcome {
    let start = Instant::now();
    let th = 0.7f64;
    let line: Vec<Vec<f64>> = (0..3)
        .map(|i| vec![(i as f64 * th).cos(), (i as f64 * th).sin(), 0.0])
        .collect();
    let (zero, _) = reg_value_and_grad(Tensor::from_rows(&line).expect("rows"));

    let mut rng = RngStream::with_stream(5, 7);
    let (mut min_pos, mut worst_scale) = (f64::INFINITY, 0.0f64);
    for _ in 0..20 {
        let p = Tensor::new(vec![5, 4], (0..20).map(|_| rng.normal()).collect()).expect("sized");
        let mut scaled = p.clone();
        for (i, v) in scaled.data_mut().iter_mut().enumerate() {
            *v *= [0.01, 3.0, 250.0, 0.5, 7.0][i / 4];
        }
        let (a, _) = reg_value_and_grad(p);
        let (b, _) = reg_value_and_grad(scaled);
        min_pos = min_pos.min(a);
        worst_scale = worst_scale.max((a - b).abs());
    }

    let extreme = Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![3.0, 0.0],
        vec![-2.0, 0.0],
        vec![0.2, 0.9],
    ])
    .expect("rows");
    let (v, g) = reg_value_and_grad(extreme);
    let finite = v.is_finite() && g.iter().all(|x| x.is_finite());
    let t = start.elapsed();
    let pass = zero.abs() < 1e-12
        && min_pos > 0.0
        && worst_scale < 1e-10
        && finite
        && t < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "proportional case {zero:.1e}, min random loss {min_pos:.3e}, scale drift {worst_scale:.1e}, finite at ±1 {finite}, {}",
            secs(t)
        ),
    )
}

fn run_config(seed: u64, loss: LossWeights) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.synth.seed = seed;
    cfg.loss = loss;
    cfg
}

struct Run {
    history: TrainHistory,
    elapsed: Duration,
}

fn full_run(cfg: &RunConfig) -> Run {
    let start = Instant::now();
    let (a, b) = cfg.load_splits().expect("data");
    let mut t = Trainer::new(cfg.clone(), a, b).expect("trainer");
    t.run().expect("training");
    Run {
        history: t.history().clone(),
        elapsed: start.elapsed(),
    }
}

fn learnability(base: &Run, cfg: &RunConfig) -> Outcome {
    let last = base.history.last().expect("epochs");
    let (a, b) = cfg.load_splits().expect("data");
    let o = &cfg.optim;
    let default_optim = (
        o.lr_max,
        o.lr_min,
        o.momentum,
        o.weight_decay,
        o.batch_size,
        o.epochs,
    ) == (0.01, 0.0001, 0.9, 0.01, 32, 200);
    let shape_ok = a.len() == 200
        && b.len() == 50
        && cfg.model.grades == 7
        && cfg.model.sub_grades == 10
        && default_optim;
    let pass = shape_ok
        && last.test_srcc >= 0.85
        && last.test_srcc >= last.train_srcc - 0.05
        && base.elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "seed 0, {} epochs: test SRCC {:.4}, train SRCC {:.4}, {}",
            base.history.records.len(),
            last.test_srcc,
            last.train_srcc,
            secs(base.elapsed)
        ),
    )
}

fn ablations(seed0: &Run) -> Outcome {
    let no_reg = LossWeights {
        lambda_r: 0.0,
        ..LossWeights::default()
    };
    let none = LossWeights {
        lambda_c: 0.0,
        lambda_f: 0.0,
        lambda_r: 0.0,
    };
    let mut pass = true;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let full = if seed == 0 {
            seed0.history.last().expect("epochs").test_srcc
        } else {
            full_run(&run_config(seed, LossWeights::default()))
                .history
                .last()
                .expect("epochs")
                .test_srcc
        };
        let r = full_run(&run_config(seed, no_reg))
            .history
            .last()
            .expect("epochs")
            .test_srcc;
        let z = full_run(&run_config(seed, none))
            .history
            .last()
            .expect("epochs")
            .test_srcc;
        pass &= full > r && full > z;
        rows.push(format!(
            "seed {seed}: full {full:.4} / no L_R {r:.4} / score only {z:.4}"
        ));
    }
    outcome(pass, rows.join("; "))
}

fn determinism(seed0: &Run, cfg: &RunConfig) -> Outcome {
    let (a, b) = cfg.load_splits().expect("data");
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("epoch100.cofk");

    let mut second = Trainer::new(cfg.clone(), a.clone(), b.clone()).expect("trainer");
    second.run_until(100).expect("training");
    save_checkpoint(&path, &second.checkpoint()).expect("save");
    second.run().expect("training");
    let same_csv = second.history().to_csv() == seed0.history.to_csv();

    let mut resumed = Trainer::resume(load_checkpoint(&path).expect("load"), a, b).expect("resume");
    resumed.run().expect("training");
    let same_resume = resumed.history().to_csv() == second.history().to_csv()
        && resumed.checkpoint().to_bytes().expect("bytes")
            == second.checkpoint().to_bytes().expect("bytes");
    outcome(
        same_csv && same_resume,
        format!(
            "repeat run identical CSV {same_csv}; resume at epoch 100 bit-identical {same_resume}"
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("etf-exactness", etf_exactness()),
        ("gradient-fidelity", gradient_fidelity()),
        ("grading-round-trip", grading_round_trip()),
        ("metric-oracle", metric_oracle()),
        ("graph-regularizer", graph_regularizer()),
    ];
    for (name, o) in &results {
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }

    let cfg = run_config(0, LossWeights::default());
    let seed0 = full_run(&cfg);
    let later: Vec<(&str, Outcome)> = vec![
        ("synthetic-learnability", learnability(&seed0, &cfg)),
        ("determinism-persistence", determinism(&seed0, &cfg)),
        ("ablation-switches", ablations(&seed0)),
    ];
    for (name, o) in &later {
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    results.extend(later);

    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(n, _)| *n)
        .collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

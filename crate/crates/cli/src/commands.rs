use std::fs;
use std::path::Path;

use serde_json::json;

use c2f_core::check::{composite_grad_check, toy_draw, toy_scheme};
use c2f_core::data::write_features;
use c2f_core::tensor::rng::streams;
use c2f_core::trainer::{evaluate, load_checkpoint, save_checkpoint, RunConfig, Trainer};
use c2f_core::{build_etf, etf, srcc as spearman, Error, RngStream};

use crate::{CliResult, Context, Failure};

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const ETF_TOL: f64 = 1e-8;

fn create_dir(out: &Path) -> CliResult {
    fs::create_dir_all(out).map_err(|e| Failure::Module("io", e.into()))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult {
    create_dir(out)?;
    let (train, test) = cfg.synth_splits().ctx("data")?;
    let (a, b) = (out.join("train.cofi"), out.join("test.cofi"));
    write_features(&a, &train).ctx("data")?;
    write_features(&b, &test).ctx("data")?;
    log::info!(
        "wrote {} train and {} test samples to {}",
        train.len(),
        test.len(),
        out.display()
    );
    println!(
        "{}",
        json!({ "train": a, "test": b, "n_train": train.len(), "n_test": test.len() })
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> CliResult {
    create_dir(out)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = load_checkpoint(p).ctx("trainer")?;
            let (a, b) = ck.config.load_splits().ctx("data")?;
            Trainer::resume(ck, a, b).ctx("trainer")?
        }
        None => {
            let (a, b) = cfg.load_splits().ctx("data")?;
            Trainer::new(cfg.clone(), a, b).ctx("trainer")?
        }
    };
    trainer.run().ctx("trainer")?;
    let ck = trainer.checkpoint();
    save_checkpoint(&out.join("checkpoint.cofk"), &ck).ctx("trainer")?;
    ck.history
        .write_csv(&out.join("history.csv"))
        .ctx("trainer")?;
    let last = ck
        .history
        .last()
        .ok_or_else(|| Failure::Check("no epochs were run".into()))?;
    println!(
        "{}",
        serde_json::to_string(last).map_err(|e| Failure::Module("trainer", e.into()))?
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, data: Option<&Path>) -> CliResult {
    let ck = load_checkpoint(checkpoint).ctx("trainer")?;
    let ds = match data {
        Some(p) => c2f_core::data::read_features(p).ctx("data")?,
        None => ck.config.load_splits().ctx("data")?.1,
    };
    let model = ck.model().ctx("model")?;
    let rep = evaluate(&model, &ds, &ck.config.grading, &ck.normalizer).ctx("metrics")?;
    println!(
        "{}",
        json!({ "srcc": rep.srcc, "grade_accuracy": rep.grade_accuracy, "n": ds.len(), "epoch": ck.epoch })
    );
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, draws: usize) -> CliResult {
    let scheme = toy_scheme();
    let mut worst = 0.0f64;
    println!("draw,param,max_rel_error");
    for i in 0..draws as u64 {
        let (model, xs, ys) = toy_draw(cfg.seed + i, 2, 4).ctx("gradcheck")?;
        let rep = composite_grad_check(&model, &xs, &ys, &scheme, &cfg.loss, cfg.fine_target)
            .ctx("gradcheck")?;
        for p in &rep.params {
            println!("{i},{},{:.3e}", p.name, p.max_rel_error);
        }
        worst = worst.max(rep.max());
    }
    log::info!("max relative error {worst:.3e} over {draws} draws");
    if worst >= GRADCHECK_TOL {
        return Err(Failure::Check(format!(
            "max relative error {worst:.3e} >= {GRADCHECK_TOL:e}"
        )));
    }
    Ok(())
}

pub fn verify_etf_report(seed: u64, dim: usize, k: usize) -> c2f_core::Result<(f64, bool)> {
    let frame = build_etf(dim, k, &mut RngStream::with_stream(seed, streams::ETF))?;
    let dev = etf::verify_etf(&frame);
    Ok((dev, dev < ETF_TOL))
}

pub fn verify_etf(cfg: &RunConfig, dim: usize, k: usize) -> CliResult {
    let (dev, pass) = verify_etf_report(cfg.seed, dim, k).ctx("etf")?;
    println!(
        "{}",
        json!({ "k": k, "d": dim, "max_deviation": dev, "threshold": ETF_TOL, "pass": pass })
    );
    if !pass {
        return Err(Failure::Check(format!(
            "ETF deviation {dev:e} >= {ETF_TOL:e}"
        )));
    }
    Ok(())
}

/// Two numeric columns separated by commas, semicolons, tabs or spaces. A non-numeric
/// first line is taken as a header.
pub fn read_columns(text: &str) -> c2f_core::Result<(Vec<f64>, Vec<f64>)> {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split([',', '\t', ';', ' '])
            .filter(|f| !f.is_empty())
            .collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        match parsed {
            Some(v) if v.len() >= 2 => {
                a.push(v[0]);
                b.push(v[1]);
            }
            None if a.is_empty() && n == 0 => continue,
            _ => {
                return Err(Error::Metric(format!(
                    "line {} needs two numeric columns",
                    n + 1
                )))
            }
        }
    }
    Ok((a, b))
}

pub fn srcc(file: &Path) -> CliResult {
    let text = fs::read_to_string(file).map_err(|e| Failure::Module("io", e.into()))?;
    let (a, b) = read_columns(&text).ctx("metrics")?;
    let rho = spearman(&a, &b).ctx("metrics")?;
    println!("{}", json!({ "srcc": rho, "n": a.len() }));
    Ok(())
}

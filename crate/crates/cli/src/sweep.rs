//! One training run per value of a structural knob, plus a summary table.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use c2f_core::data::FeatureDataset;
use c2f_core::trainer::{train, RunConfig, TrainHistory};
use c2f_core::{Error, GradingScheme};

use crate::{CliResult, Context, Failure};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Procedures,
    Grades,
    SubGrades,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "P" | "procedures" => Ok(Self::Procedures),
            "G" | "grades" => Ok(Self::Grades),
            "G'" | "Gp" | "sub_grades" => Ok(Self::SubGrades),
            _ => Err(format!("expected P, G or G', got {s:?}")),
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Self::Procedures => "P",
            Self::Grades => "G",
            Self::SubGrades => "Gp",
        }
    }

    /// `cfg` with this knob set to `v`; the grading scheme follows G and G'.
    pub fn apply(self, cfg: &RunConfig, v: usize) -> c2f_core::Result<RunConfig> {
        let mut c = cfg.clone();
        match self {
            Self::Procedures => c.model.procedures = v,
            Self::Grades => c.model.grades = v,
            Self::SubGrades => c.model.sub_grades = v,
        }
        if self != Self::Procedures {
            c.grading = GradingScheme::from_counts(
                c.grading.score_max,
                c.model.grades,
                c.model.sub_grades,
            )?;
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Procedures => "P",
            Self::Grades => "G",
            Self::SubGrades => "G'",
        })
    }
}

pub const SUMMARY_HEADER: &str = "param,value,train_srcc,test_srcc,best_test_srcc,grade_acc";

fn summary_row(param: SweepParam, v: usize, h: &TrainHistory) -> String {
    let last = h.last().expect("at least one epoch");
    let best = h
        .records
        .iter()
        .map(|r| r.test_srcc)
        .fold(f64::NEG_INFINITY, f64::max);
    format!(
        "{param},{v},{},{},{},{}",
        last.train_srcc, last.test_srcc, best, last.grade_acc
    )
}

fn run_all(
    configs: &[RunConfig],
    data: &(FeatureDataset, FeatureDataset),
    jobs: usize,
) -> Vec<c2f_core::Result<TrainHistory>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<c2f_core::Result<TrainHistory>>>> =
        Mutex::new(configs.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, configs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                log::info!("sweep run {} of {}", i + 1, configs.len());
                let r = train(cfg.clone(), data.0.clone(), data.1.clone()).map(|(_, h)| h);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every run finished"))
        .collect()
}

pub fn run(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[usize],
    out: &Path,
    jobs: usize,
) -> CliResult {
    let configs = values
        .iter()
        .map(|&v| param.apply(cfg, v))
        .collect::<c2f_core::Result<Vec<_>>>()
        .ctx("sweep")?;
    let data = cfg.load_splits().ctx("data")?;
    let results = run_all(&configs, &data, jobs);

    std::fs::create_dir_all(out).map_err(|e| Failure::Module("io", e.into()))?;
    let mut summary = vec![SUMMARY_HEADER.to_string()];
    for (&v, r) in values.iter().zip(results) {
        let h = r.ctx("trainer")?;
        h.write_csv(&out.join(format!("history_{}_{v}.csv", param.slug())))
            .ctx("trainer")?;
        summary.push(summary_row(param, v, &h));
    }
    let text = summary.join("\n") + "\n";
    std::fs::write(out.join("summary.csv"), &text)
        .map_err(|e| Failure::Module("io", Error::from(e)))?;
    print!("{text}");
    Ok(())
}

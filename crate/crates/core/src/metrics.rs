//! Spearman rank correlation and Fisher-z aggregation.

use crate::error::{Error, Result};

/// Correlations are pulled this far inside `(-1, 1)` before `atanh`.
pub const FISHER_CLAMP: f64 = 1e-12;

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn ranks(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Metric(format!(
            "ranking needs at least 2 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("cannot rank non-finite values".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank mean((i+1)..=(j+1))
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    Ok(out)
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Metric(format!(
            "length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let n = p.len() as f64;
    let pm = p.iter().sum::<f64>() / n;
    let qm = q.iter().sum::<f64>() / n;
    let (mut num, mut sp, mut sq) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        let (da, db) = (a - pm, b - qm);
        num += da * db;
        sp += da * da;
        sq += db * db;
    }
    if sp == 0.0 || sq == 0.0 {
        return Err(Error::Metric(
            "correlation undefined for a constant sample".into(),
        ));
    }
    Ok(num / (sp * sq).sqrt())
}

/// Spearman's rho: Pearson correlation of the two rank vectors.
pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!(
            "length mismatch {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let rho = pearson(&ranks(pred)?, &ranks(truth)?)?;
    Ok(rho.clamp(-1.0, 1.0))
}

/// `tanh(mean(atanh(rho_i)))`. Correlations at ±1 are clamped with a warning.
pub fn fisher_z_average(rhos: &[f64]) -> Result<f64> {
    if rhos.is_empty() {
        return Err(Error::Metric("nothing to average".into()));
    }
    let mut z = 0.0;
    for &r in rhos {
        if !(-1.0..=1.0).contains(&r) {
            return Err(Error::Metric(format!("correlation {r} outside [-1, 1]")));
        }
        let lim = 1.0 - FISHER_CLAMP;
        let rc = if r.abs() > lim {
            log::warn!("clamping correlation {r} to ±{lim} before Fisher z");
            r.clamp(-lim, lim)
        } else {
            r
        };
        z += rc.atanh();
    }
    Ok((z / rhos.len() as f64).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(ranks(&[10.0, 30.0, 20.0]).unwrap(), vec![1.0, 3.0, 2.0]);
        assert_eq!(ranks(&[5.0, 5.0]).unwrap(), vec![1.5, 1.5]);
        assert_eq!(
            ranks(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(
            ranks(&[2.0, 1.0, 2.0, 2.0]).unwrap(),
            vec![3.0, 1.0, 3.0, 3.0]
        );
        assert!(ranks(&[1.0]).is_err());
    }

    #[test]
    fn srcc_examples() {
        let t = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((srcc(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = t.iter().rev().copied().collect();
        assert!((srcc(&rev, &t).unwrap() + 1.0).abs() < 1e-15);
        assert!((srcc(&[1.0, 2.0, 3.0, 5.0, 4.0], &t).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn srcc_constant_is_error() {
        assert!(matches!(
            srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Metric(_))
        ));
        assert!(srcc(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn fisher_examples() {
        let r = 0.42;
        assert!((fisher_z_average(&[r, r, r]).unwrap() - r).abs() < 1e-12);
        assert!((fisher_z_average(&[0.809, 0.806, 0.804, 0.810]).unwrap() - 0.807).abs() <= 1e-3);
        assert!((fisher_z_average(&[0.716, 0.843]).unwrap() - 0.788).abs() <= 1e-3);
        assert!(fisher_z_average(&[1.0, 0.5]).unwrap().is_finite());
        assert!(fisher_z_average(&[]).is_err());
    }
}

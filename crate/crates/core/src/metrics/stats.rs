use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Percentile interval of `metric` over `resamples` draws of
/// (label, prediction) pairs with replacement.
pub fn bootstrap_ci<F>(
    metric: F,
    labels: &[usize],
    preds: &[usize],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&[usize], &[usize]) -> f64,
{
    let n = labels.len();
    if n == 0 || preds.len() != n {
        return Err(Error::Input(format!(
            "bootstrap needs equal non-empty inputs, got {} and {}",
            n,
            preds.len()
        )));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Input(format!(
            "bootstrap needs resamples > 0 and level in (0,1), got {resamples} and {level}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ys = vec![0; n];
    let mut ps = vec![0; n];
    let mut values: Vec<f64> = (0..resamples)
        .map(|_| {
            for i in 0..n {
                let j = rng.random_range(0..n);
                ys[i] = labels[j];
                ps[i] = preds[j];
            }
            metric(&ys, &ps)
        })
        .collect();
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&values, tail), percentile(&values, 1.0 - tail)))
}

/// Linear interpolation between order statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p_value: f64,
    pub df: usize,
    pub differences: Vec<f64>,
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Input(format!(
            "paired t-test needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::Degenerate(
            "paired differences have zero variance".into(),
        ));
    }
    let t = mean / (var / n).sqrt();
    let df = d.len() - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::Numeric(format!("t distribution: {e}")))?;
    let p_value = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest {
        t,
        p_value,
        df,
        differences: d,
    })
}

//! Seed-sweep summaries and Welch's unequal-variance t-test.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
    /// Standard error of the mean, `std / √n`.
    pub stderr: f64,
}

pub fn summarize(xs: &[f64]) -> Result<Summary> {
    if xs.is_empty() {
        return Err(Error::Empty { op: "summarize" });
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n > 1 { sample_variance(xs, mean).sqrt() } else { 0.0 };
    Ok(Summary {
        n,
        mean,
        std,
        stderr: std / (n as f64).sqrt(),
    })
}

fn sample_variance(xs: &[f64], mean: f64) -> f64 {
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// `t = (μ_a − μ_b) / √(S_a²/n_a + S_b²/n_b)` with a two-sided p-value from
/// Student's t at the Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "welch_t_test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let va = sample_variance(a, ma) / na;
    let vb = sample_variance(b, mb) / nb;
    let se2 = va + vb;
    if se2 == 0.0 {
        // both samples constant: identical ones are indistinguishable,
        // different ones perfectly separated
        let (t, p) = match ma.partial_cmp(&mb) {
            Some(std::cmp::Ordering::Equal) => (0.0, 1.0),
            Some(std::cmp::Ordering::Greater) => (f64::INFINITY, 0.0),
            _ => (f64::NEG_INFINITY, 0.0),
        };
        return Ok(WelchResult { t, df: na + nb - 2.0, p });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let p = if t == 0.0 {
        1.0
    } else {
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::InvalidArgument(format!("t distribution with df {df}: {e}")))?;
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(WelchResult { t, df, p })
}

//! Convergence and calibration summaries.

use super::data::Dataset;
use super::predict::{hdi, predict};
use super::store::PosteriorStore;
use super::PipelineError;
use crate::sampler::TracePoint;

/// Effective sample size by Geyer's initial positive sequence. A constant
/// chain returns its length with the flag set.
pub fn effective_sample_size(chain: &[f64]) -> (f64, bool) {
    let n = chain.len();
    if n < 2 {
        return (n as f64, true);
    }
    let mean = chain.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = chain.iter().map(|x| x - mean).collect();
    let gamma0 = c.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if gamma0 <= 1e-300 * mean.abs().max(1.0) {
        return (n as f64, true);
    }
    let rho = |lag: usize| -> f64 {
        c[..n - lag]
            .iter()
            .zip(&c[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
            / gamma0
    };
    // tau = -1 + 2 * sum of positive pair sums (rho_{2m} + rho_{2m+1}).
    let mut sum = 0.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = rho(2 * m) + rho(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        m += 1;
    }
    let tau = (-1.0 + 2.0 * sum).max(1.0 / n as f64);
    (
        (n as f64 / tau).min(n as f64 * (n as f64).log10().max(1.0)),
        false,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleDiag {
    pub row: usize,
    pub ess: f64,
    pub constant: bool,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub truth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagReport {
    pub trace: Vec<TracePoint>,
    pub samples: Vec<SampleDiag>,
    /// Share of rows whose truth lies in the 95% interval.
    pub coverage: Option<f64>,
    pub mean_ess: f64,
}

/// Trace, per-row ESS of the mean-function chains, and interval coverage
/// of the truth column. Rows flagged as test are used when present.
pub fn diagnostics(store: &PosteriorStore, data: &Dataset) -> Result<DiagReport, PipelineError> {
    let pred = predict(store, data)?;
    let rows: Vec<usize> = match &data.is_test {
        Some(t) if t.iter().any(|&x| x) => (0..data.rows).filter(|&r| t[r]).collect(),
        _ => (0..data.rows).collect(),
    };
    let mut samples = Vec::with_capacity(rows.len());
    for &r in &rows {
        let chain: Vec<f64> = pred.draws.iter().map(|d| d[r]).collect();
        let (ess, constant) = effective_sample_size(&chain);
        let (lower, upper) = if pred.lower[r].is_nan() {
            hdi(&chain, 0.95)
        } else {
            (pred.lower[r], pred.upper[r])
        };
        samples.push(SampleDiag {
            row: r,
            ess,
            constant,
            mean: pred.mean[r],
            lower,
            upper,
            truth: data.truth.as_ref().map(|t| t[r]),
        });
    }
    let coverage = data.truth.as_ref().map(|_| {
        let hit = samples
            .iter()
            .filter(|s| s.truth.is_some_and(|t| s.lower <= t && t <= s.upper))
            .count();
        hit as f64 / samples.len().max(1) as f64
    });
    let mean_ess = samples.iter().map(|s| s.ess).sum::<f64>() / samples.len().max(1) as f64;
    Ok(DiagReport {
        trace: store
            .fits
            .first()
            .map(|f| f.trace.clone())
            .unwrap_or_default(),
        samples,
        coverage,
        mean_ess,
    })
}

impl DiagReport {
    pub fn trace_tsv(&self) -> String {
        let mut s = String::from("sweep\ttrain\ttest\tsigma\tsigma_mu2\n");
        for p in &self.trace {
            let test = p.test.map_or("NA".to_string(), |v| v.to_string());
            s.push_str(&format!(
                "{}\t{}\t{test}\t{}\t{}\n",
                p.sweep, p.train, p.sigma, p.sigma_mu2
            ));
        }
        s
    }

    pub fn samples_tsv(&self) -> String {
        let mut s = String::from("row\tess\tconstant\tmean\tlower\tupper\ttruth\n");
        for d in &self.samples {
            let truth = d.truth.map_or("NA".to_string(), |v| v.to_string());
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{truth}\n",
                d.row,
                d.ess,
                u8::from(d.constant),
                d.mean,
                d.lower,
                d.upper
            ));
        }
        s
    }

    pub fn summary_tsv(&self) -> String {
        let cov = self.coverage.map_or("NA".to_string(), |c| c.to_string());
        let last = self.trace.last();
        format!(
            "metric\tvalue\nrows\t{}\nmean_ess\t{}\ncoverage\t{cov}\nfinal_train\t{}\nfinal_test\t{}\n",
            self.samples.len(),
            self.mean_ess,
            last.map_or("NA".into(), |p| p.train.to_string()),
            last.and_then(|p| p.test).map_or("NA".into(), |v| v.to_string()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_chain_is_flagged() {
        assert_eq!(effective_sample_size(&[2.0; 50]), (50.0, true));
    }

    #[test]
    fn white_noise_ess_near_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut total = 0.0;
        for _ in 0..20 {
            let c: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
            total += effective_sample_size(&c).0;
        }
        let mean = total / 20.0;
        assert!((mean / 1000.0 - 1.0).abs() < 0.2, "{mean}");
    }

    #[test]
    fn autocorrelated_chain_has_smaller_ess() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = 0.0;
        let c: Vec<f64> = (0..2000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = 0.9 * x + z;
                x
            })
            .collect();
        // AR(1) with rho = 0.9 has ESS ratio (1 - rho) / (1 + rho) ~ 0.053.
        let ess = effective_sample_size(&c).0;
        assert!(ess < 300.0 && ess > 40.0, "{ess}");
    }
}

use std::io::Write;

use super::{AnalysisError, Result};

/// Matthews correlation of two {-1, +1} vectors; 0 when a marginal is empty.
pub fn mcc(predictions: &[i8], labels: &[i8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(AnalysisError::Length {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p > 0, y > 0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / denom)
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AnalysisError::Length {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(AnalysisError::Empty);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(AnalysisError::Length {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// Squared correlation of estimates against actual values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RSquared {
    /// 0 when undefined.
    pub value: f64,
    /// False for fewer than three samples or a constant side.
    pub defined: bool,
    /// Sign of the underlying correlation.
    pub negative: bool,
}

pub fn attack_r2(estimates: &[f64], actuals: &[f64]) -> Result<RSquared> {
    let undefined = RSquared {
        value: 0.0,
        defined: false,
        negative: false,
    };
    if estimates.len() != actuals.len() {
        return Err(AnalysisError::Length {
            left: estimates.len(),
            right: actuals.len(),
        });
    }
    if estimates.len() < 3 {
        return Ok(undefined);
    }
    Ok(match pearson(estimates, actuals)? {
        Some(r) => RSquared {
            value: r * r,
            defined: true,
            negative: r < 0.0,
        },
        None => undefined,
    })
}

/// Relative error `δ = |f - f̂| / (|f| + 1)` over perturbed samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub delta: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
}

pub fn error_function(true_value: f64, perturbed: &[f64]) -> Result<ErrorStats> {
    if perturbed.len() < 2 {
        return Err(AnalysisError::Empty);
    }
    let delta: Vec<f64> = perturbed
        .iter()
        .map(|f| (true_value - f).abs() / (true_value.abs() + 1.0))
        .collect();
    Ok(ErrorStats {
        mu: mean(&delta),
        sigma: variance(&delta).sqrt(),
        delta,
    })
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Equal-width 2D histogram over the joint range of the two samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2d {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// Row-major by x bin.
    pub counts: Vec<u64>,
}

impl Histogram2d {
    pub fn new(x: &[f64], y: &[f64], bins: usize) -> Result<Self> {
        if x.len() != y.len() {
            return Err(AnalysisError::Length {
                left: x.len(),
                right: y.len(),
            });
        }
        if x.is_empty() || bins == 0 {
            return Err(AnalysisError::Empty);
        }
        let edges = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let mut hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi <= lo {
                hi = lo + 1.0;
            }
            (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect::<Vec<_>>()
        };
        let (x_edges, y_edges) = (edges(x), edges(y));
        let bin = |e: &[f64], v: f64| {
            let k = ((v - e[0]) / (e[bins] - e[0]) * bins as f64).floor() as isize;
            k.clamp(0, bins as isize - 1) as usize
        };
        let mut counts = vec![0u64; bins * bins];
        for (&a, &b) in x.iter().zip(y) {
            counts[bin(&x_edges, a) * bins + bin(&y_edges, b)] += 1;
        }
        Ok(Histogram2d {
            x_edges,
            y_edges,
            counts,
        })
    }

    pub fn bins(&self) -> usize {
        self.x_edges.len() - 1
    }

    /// `x_lo,x_hi,y_lo,y_hi,count` per non-empty cell.
    pub fn write_csv<W: Write>(&self, out: W, label: &str, config_hash: &str) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["config_hash", "scenario", "x_lo", "x_hi", "y_lo", "y_hi", "count"])?;
        let b = self.bins();
        for i in 0..b {
            for j in 0..b {
                let c = self.counts[i * b + j];
                if c == 0 {
                    continue;
                }
                w.write_record([
                    config_hash.to_string(),
                    label.to_string(),
                    self.x_edges[i].to_string(),
                    self.x_edges[i + 1].to_string(),
                    self.y_edges[j].to_string(),
                    self.y_edges[j + 1].to_string(),
                    c.to_string(),
                ])?;
            }
        }
        w.flush()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    #[test]
    fn mcc_reference_cases() {
        let y = [1, 1, -1, -1, 1, -1];
        assert_eq!(mcc(&y, &y).unwrap(), 1.0);
        assert_eq!(mcc(&[1; 6], &y).unwrap(), 0.0);
        let mut p = Vec::new();
        let mut l = Vec::new();
        for (pp, ll) in [(1, 1), (-1, -1), (1, -1), (-1, 1)] {
            p.extend([pp; 25]);
            l.extend([ll; 25]);
        }
        assert_eq!(mcc(&p, &l).unwrap(), 0.0);
        assert!(mcc(&[1], &[1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn mcc_is_pearson_of_the_binary_vectors(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 3..200)) {
            let p: Vec<i8> = bits.iter().map(|b| if b.0 { 1 } else { -1 }).collect();
            let l: Vec<i8> = bits.iter().map(|b| if b.1 { 1 } else { -1 }).collect();
            let pf: Vec<f64> = p.iter().map(|&v| f64::from(v)).collect();
            let lf: Vec<f64> = l.iter().map(|&v| f64::from(v)).collect();
            let direct = pearson(&pf, &lf).unwrap().unwrap_or(0.0);
            prop_assert!((mcc(&p, &l).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn r2_cases() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        assert!((attack_r2(&a, &a).unwrap().value - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let r = attack_r2(&neg, &a).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12 && r.negative);
        assert!(!attack_r2(&[1.0], &[2.0]).unwrap().defined);
        assert!(!attack_r2(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap().defined);
    }

    #[test]
    fn permuted_estimates_have_no_fit() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let actual: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let mut est = actual.clone();
        rand::seq::SliceRandom::shuffle(est.as_mut_slice(), &mut rng);
        assert!(attack_r2(&est, &actual).unwrap().value < 0.05);
    }

    #[test]
    fn error_function_cases() {
        let e = error_function(3.0, &[3.0, 3.0, 3.0]).unwrap();
        assert_eq!((e.mu, e.sigma), (0.0, 0.0));
        assert!(error_function(1.0, &[1.0]).is_err());

        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let lambda = 2.5;
        let lap: Vec<f64> = (0..200_000)
            .map(|_| {
                let u: f64 = rng.random::<f64>() - 0.5;
                -lambda * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        let e = error_function(0.0, &lap).unwrap();
        assert!((e.mu - lambda).abs() < 0.03, "{}", e.mu);

        let wide: Vec<f64> = lap.iter().map(|x| 9.0 * x).collect();
        let e9 = error_function(0.0, &wide).unwrap();
        assert!((e9.mu - 9.0 * e.mu).abs() < 1e-9);
    }

    #[test]
    fn histogram_counts_every_sample() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let n = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..500).map(|_| n.sample(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        let h = Histogram2d::new(&x, &y, 10).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 500);
        for i in 0..10 {
            for j in 0..10 {
                if i != j {
                    assert_eq!(h.counts[i * 10 + j], 0);
                }
            }
        }
        let mut buf = Vec::new();
        h.write_csv(&mut buf, "NAIVE", "h").unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("config_hash,scenario,x_lo"));
    }

    #[test]
    fn mse_and_quantiles() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 2.0);
        assert!(mse(&[], &[]).is_err());
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.125), 1.5);
    }
}

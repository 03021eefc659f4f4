//! Small summary-statistics helpers shared by the engines and the harness.

use serde::{Deserialize, Serialize};

/// Running mean and variance; `merge` is associative and commutative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanVar {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl MeanVar {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&self, o: &MeanVar) -> MeanVar {
        if self.n == 0 {
            return *o;
        }
        if o.n == 0 {
            return *self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        MeanVar {
            n,
            mean: self.mean + d * o.n as f64 / n as f64,
            m2: self.m2 + o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64,
        }
    }

    /// Sample variance with the `n - 1` divisor.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.n == 0 {
            f64::INFINITY
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for MeanVar {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = MeanVar::default();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Paired trend between two per-replica series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTrend {
    pub mean_before: f64,
    pub mean_after: f64,
    pub diff: f64,
    pub std_err: f64,
}

impl PairedTrend {
    pub fn new(before: &[f64], after: &[f64]) -> Self {
        assert_eq!(before.len(), after.len());
        let d: MeanVar = before.iter().zip(after).map(|(a, b)| b - a).collect();
        PairedTrend {
            mean_before: before.iter().sum::<f64>() / before.len() as f64,
            mean_after: after.iter().sum::<f64>() / after.len() as f64,
            diff: d.mean,
            std_err: d.std_err(),
        }
    }

    /// No significant increase at `z` standard errors.
    pub fn nonincreasing(&self, z: f64) -> bool {
        self.diff <= z * self.std_err
    }

    /// Significant increase at `z` standard errors.
    pub fn increasing(&self, z: f64) -> bool {
        self.diff > z * self.std_err
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wilson_known_value() {
        // p = 0.5, n = 100, z = 1.96: centre 0.5, half-width 0.0480 to four places
        let (lo, hi) = wilson(50, 100, 1.96);
        assert!((lo - 0.4038).abs() < 1e-4 && (hi - 0.5962).abs() < 1e-4, "{lo} {hi}");
        assert_eq!(wilson(0, 0, 3.0), (0.0, 1.0));
        let (lo, _) = wilson(0, 10, 3.0);
        assert!(lo.abs() < 1e-15);
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    proptest! {
        #[test]
        fn merge_matches_single_pass(xs in prop::collection::vec(-1e3f64..1e3, 0..50), cut in 0usize..50) {
            let cut = cut.min(xs.len());
            let whole: MeanVar = xs.iter().copied().collect();
            let a: MeanVar = xs[..cut].iter().copied().collect();
            let b: MeanVar = xs[cut..].iter().copied().collect();
            let m = b.merge(&a);
            prop_assert_eq!(m.n, whole.n);
            prop_assert!((m.mean - whole.mean).abs() < 1e-9);
            prop_assert!((m.variance() - whole.variance()).abs() < 1e-6 * (1.0 + whole.variance()));
        }
    }
}

//! Skill normalization, exact binomial tail tests, critical thresholds, and
//! the latent-planning-capacity decision.
//!
//! All tail probabilities are exact log-space summations; at the operating
//! point (alpha = 1e-5, deep in the tail) normal approximations are not
//! trustworthy and are not used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Branch factors evaluated throughout: K = {2, 3, 4, 5, 10}.
pub const K_SET: [usize; 5] = [2, 3, 4, 5, 10];
/// Significance level for all hypothesis tests.
pub const ALPHA: f64 = 1e-5;

/// Accuracy normalized so 0 is random neighbor-guessing and 1 is perfect.
pub fn skill(accuracy: f64, k: usize) -> f64 {
    let chance = 1.0 / k as f64;
    (accuracy - chance) / (1.0 - chance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkillScore {
    pub k: usize,
    pub accuracy: f64,
    pub skill: f64,
    pub n_samples: usize,
}

impl SkillScore {
    pub fn from_counts(correct: usize, n_samples: usize, k: usize) -> Self {
        let accuracy = correct as f64 / n_samples as f64;
        SkillScore {
            k,
            accuracy,
            skill: skill(accuracy, k),
            n_samples,
        }
    }
}

/// Exact upper-tail binomial probability `P(X >= n)` for `X ~ Bin(N, p)`.
///
/// Terms are accumulated with log-sum-exp; the log binomial coefficient is
/// carried incrementally so no factorial ever materializes.
pub fn binomial_tail(n_total: usize, n_min: usize, p: f64) -> Result<f64> {
    if n_min > n_total {
        return Err(Error::Config(format!("n={n_min} exceeds N={n_total}")));
    }
    if !(0.0..=1.0).contains(&p) || p == 0.0 || p == 1.0 {
        return Err(Error::Config(format!("p={p} outside (0,1)")));
    }
    if n_min == 0 {
        return Ok(1.0);
    }
    let n = n_total as f64;
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    // ln C(N, n_min) by incremental recurrence.
    let mut ln_c = 0.0f64;
    for i in 0..n_min {
        ln_c += (n - i as f64).ln() - (i as f64 + 1.0).ln();
    }
    let mut max_term = f64::NEG_INFINITY;
    let mut terms = Vec::with_capacity(n_total - n_min + 1);
    let mut ln_c_i = ln_c;
    for i in n_min..=n_total {
        let t = ln_c_i + i as f64 * lp + (n - i as f64) * lq;
        terms.push(t);
        max_term = max_term.max(t);
        ln_c_i += (n - i as f64).ln() - (i as f64 + 1.0).ln();
    }
    let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
    Ok((max_term + sum.ln()).exp().min(1.0))
}

/// Least accuracy `n/N` whose upper-tail probability under chance `1/k`
/// is at most `alpha`. Returns 1.0 if even perfect accuracy cannot reject.
pub fn critical_accuracy(k: usize, n_samples: usize, alpha: f64) -> f64 {
    let p = 1.0 / k as f64;
    // Tail is decreasing in n; binary search the least rejecting count.
    let reject = |n: usize| {
        binomial_tail(n_samples, n, p)
            .map(|t| t <= alpha)
            .unwrap_or(false)
    };
    if !reject(n_samples) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0usize, n_samples);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if reject(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo as f64 / n_samples as f64
}

/// Minimum skill needed to reject random guessing at `(k, N, alpha)`.
pub fn critical_skill(k: usize, n_samples: usize, alpha: f64) -> f64 {
    skill(critical_accuracy(k, n_samples, alpha), k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub k: usize,
    pub n_samples: usize,
    pub alpha: f64,
    pub min_accuracy: f64,
    pub critical_skill: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdTable {
    pub fn build(ks: &[usize], ns: &[usize], alpha: f64) -> Self {
        let mut entries = Vec::new();
        for &n in ns {
            for &k in ks {
                entries.push(ThresholdEntry {
                    k,
                    n_samples: n,
                    alpha,
                    min_accuracy: critical_accuracy(k, n, alpha),
                    critical_skill: critical_skill(k, n, alpha),
                });
            }
        }
        ThresholdTable { entries }
    }

    pub fn get(&self, k: usize, n_samples: usize) -> Option<&ThresholdEntry> {
        self.entries
            .iter()
            .find(|e| e.k == k && e.n_samples == n_samples)
    }

    /// CSV in the reference grid layout: one row per (metric, N), one column
    /// per branch factor, values rounded to 3 decimals for reporting.
    pub fn to_csv(&self) -> String {
        let mut ns: Vec<usize> = self.entries.iter().map(|e| e.n_samples).collect();
        ns.dedup();
        let mut ks: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| e.n_samples == ns[0])
            .map(|e| e.k)
            .collect();
        ks.sort_unstable();
        let mut out = String::from("metric,N");
        for k in &ks {
            out.push_str(&format!(",k{k}"));
        }
        out.push('\n');
        for metric in ["minimal_accuracy", "critical_skill"] {
            for &n in &ns {
                out.push_str(&format!("{metric},{n}"));
                for &k in &ks {
                    let e = self.get(k, n).expect("grid is rectangular");
                    let v = if metric == "minimal_accuracy" {
                        e.min_accuracy
                    } else {
                        e.critical_skill
                    };
                    out.push_str(&format!(",{:.3}", v));
                }
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpcResult {
    pub m: usize,
    pub per_k_skills: Vec<SkillScore>,
    pub decision: bool,
    /// Branch factor with the largest positive margin, when the test passes.
    pub witness_k: Option<usize>,
}

/// Latent planning capacity at depth `m`: pass iff some branch factor's
/// skill meets its critical threshold. Comparisons use unrounded thresholds;
/// a margin of exactly zero counts as a pass.
pub fn lpc(
    m: usize,
    per_k_skills: &[SkillScore],
    n_samples: usize,
    alpha: f64,
    k_set: &[usize],
) -> Result<LpcResult> {
    let mut ks: Vec<usize> = per_k_skills.iter().map(|s| s.k).collect();
    ks.sort_unstable();
    let mut want: Vec<usize> = k_set.to_vec();
    want.sort_unstable();
    if ks != want {
        return Err(Error::Config(format!(
            "skill scores cover k={ks:?} but the test requires k={want:?}"
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for s in per_k_skills {
        let margin = s.skill - critical_skill(s.k, n_samples, alpha);
        if margin >= 0.0 && best.map_or(true, |(_, b)| margin > b) {
            best = Some((s.k, margin));
        }
    }
    Ok(LpcResult {
        m,
        per_k_skills: per_k_skills.to_vec(),
        decision: best.is_some(),
        witness_k: best.map(|(k, _)| k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct summation with explicit mantissa/exponent scaling, kept free
    /// of the production code's log-space machinery so it can serve as an
    /// independent oracle at N <= 2048.
    fn tail_oracle(n_total: usize, n_min: usize, p: f64) -> f64 {
        let q = 1.0 - p;
        let mut sum = 0.0f64;
        for i in n_min..=n_total {
            // Term = C(N,i) p^i q^(N-i); keep a scaled mantissa and track
            // powers of 2^512 shed along the way.
            let mut t = 1.0f64;
            let mut exp_shift = 0i64; // in units of 2^512
            let renorm = |t: &mut f64, shift: &mut i64| {
                while *t > 2f64.powi(512) {
                    *t *= 2f64.powi(-512);
                    *shift += 1;
                }
                while *t != 0.0 && *t < 2f64.powi(-512) {
                    *t *= 2f64.powi(512);
                    *shift -= 1;
                }
            };
            for j in 0..i {
                t *= (n_total - j) as f64 / (j + 1) as f64 * p;
                renorm(&mut t, &mut exp_shift);
            }
            for _ in 0..(n_total - i) {
                t *= q;
                renorm(&mut t, &mut exp_shift);
            }
            // Collapse the shift; terms this small vanish in the sum anyway.
            while exp_shift > 0 {
                t *= 2f64.powi(512);
                exp_shift -= 1;
            }
            while exp_shift < 0 && t != 0.0 {
                t *= 2f64.powi(-512);
                exp_shift += 1;
            }
            sum += t;
        }
        sum
    }

    #[test]
    fn closed_form_tails() {
        assert!((binomial_tail(10, 10, 0.5).unwrap() - 2f64.powi(-10)).abs() < 1e-15);
        assert_eq!(binomial_tail(100, 0, 0.1).unwrap(), 1.0);
    }

    #[test]
    fn tail_matches_direct_summation() {
        for (n, nm, p) in [(2048, 1024, 0.5), (200, 50, 0.2), (500, 120, 0.25)] {
            let got = binomial_tail(n, nm, p).unwrap();
            let want = tail_oracle(n, nm, p);
            assert!(
                (got - want).abs() < 1e-12,
                "({n},{nm},{p}): {got} vs {want}"
            );
        }
        // Frozen from the oracle: P(X >= 1024), X ~ Bin(2048, 1/2).
        let v = binomial_tail(2048, 1024, 0.5).unwrap();
        assert!((v - 0.509).abs() < 5e-4, "got {v}");
    }

    #[test]
    fn tail_domain_errors() {
        assert!(binomial_tail(10, 11, 0.5).is_err());
        assert!(binomial_tail(10, 5, 0.0).is_err());
        assert!(binomial_tail(10, 5, 1.0).is_err());
    }

    #[test]
    fn skill_identities() {
        for k in K_SET {
            let kf = k as f64;
            assert!(skill(1.0 / kf, k).abs() < 1e-15);
            assert!((skill(1.0, k) - 1.0).abs() < 1e-15);
            assert!((skill(0.0, k) + 1.0 / (kf - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn reference_threshold_entries() {
        assert!((critical_accuracy(2, 100, ALPHA) - 0.720).abs() < 5e-4);
        assert!((critical_accuracy(10, 2048, ALPHA) - 0.130).abs() < 5e-4);
        assert!((critical_accuracy(5, 100, ALPHA) - 0.390).abs() < 5e-4);
        assert!((critical_skill(2, 100, ALPHA) - 0.440).abs() < 5e-4);
        assert!((critical_skill(2, 2048, ALPHA) - 0.095).abs() < 5e-4);
        assert!((critical_skill(10, 2048, ALPHA) - 0.033).abs() < 5e-4);
    }

    #[test]
    fn critical_accuracy_monotone() {
        for k in K_SET {
            let mut prev = f64::INFINITY;
            for n in [64, 128, 256, 512, 1024, 2048] {
                let a = critical_accuracy(k, n, ALPHA);
                assert!(a <= prev + 1e-12, "k={k} N={n}");
                prev = a;
            }
        }
        for n in [100, 2048] {
            let mut prev = f64::INFINITY;
            for k in K_SET {
                let a = critical_accuracy(k, n, ALPHA);
                assert!(a <= prev + 1e-12, "k={k} N={n}");
                prev = a;
            }
        }
    }

    #[test]
    fn skill_strictly_increasing_in_accuracy() {
        for k in K_SET {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=20 {
                let s = skill(i as f64 / 20.0, k);
                assert!(s > prev);
                prev = s;
            }
        }
    }

    #[test]
    fn lpc_decisions() {
        let zeros: Vec<SkillScore> = K_SET
            .iter()
            .map(|&k| SkillScore {
                k,
                accuracy: 1.0 / k as f64,
                skill: 0.0,
                n_samples: 2048,
            })
            .collect();
        assert!(!lpc(3, &zeros, 2048, ALPHA, &K_SET).unwrap().decision);

        let mut one_pass = zeros.clone();
        one_pass[4].skill = 0.05; // k=10 at N=2048: threshold 0.033
        let r = lpc(3, &one_pass, 2048, ALPHA, &K_SET).unwrap();
        assert!(r.decision);
        assert_eq!(r.witness_k, Some(10));

        let perfect: Vec<SkillScore> = K_SET
            .iter()
            .map(|&k| SkillScore {
                k,
                accuracy: 1.0,
                skill: 1.0,
                n_samples: 2048,
            })
            .collect();
        assert!(lpc(3, &perfect, 2048, ALPHA, &K_SET).unwrap().decision);

        assert!(lpc(3, &zeros[..3], 2048, ALPHA, &K_SET).is_err());
    }

    #[test]
    fn csv_layout() {
        let table = ThresholdTable::build(&K_SET, &[100, 2048], ALPHA);
        let csv = table.to_csv();
        assert!(csv.starts_with("metric,N,k2,k3,k4,k5,k10\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("minimal_accuracy,100,0.720"));
    }
}

//! Rank-based ROC-AUC with bootstrap intervals and a paired permutation
//! test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_REDRAWS: usize = 1000;
pub const DEFAULT_PERMUTATIONS: usize = 10_000;
pub const SIGNIFICANCE: f64 = 0.001;
/// Attempts allowed per requested redraw before a class is declared too
/// rare to bootstrap.
pub const REDRAW_ATTEMPT_FACTOR: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub class_name: String,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(class_name: impl Into<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let s = ScoredSet {
            class_name: class_name.into(),
            scores,
            labels,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(Error::shape(&[self.labels.len()], &[self.scores.len()]));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(Error::config("labels", "must be 0 or 1"));
        }
        if self.scores.iter().any(|s| s.is_nan()) {
            return Err(Error::non_finite(format!("scores of {}", self.class_name)));
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Twice the Mann–Whitney U of the positives, with ties at half credit;
/// integral, so differences between classifiers compare exactly.
fn doubled_u(scores: &[f64], labels: &[u8], idx: &mut Vec<usize>) -> (u64, u64, u64) {
    idx.clear();
    idx.extend(0..scores.len());
    idx.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled midrank of a tie block [i, j) is i + j + 1 (ranks are 1-based)
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += pos * (i + j + 1) as u64;
        i = j;
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n0 = labels.len() as u64 - n1;
    (rank_sum2 - n1 * (n1 + 1), n1, n0)
}

fn auc_of(scores: &[f64], labels: &[u8], class: &str, idx: &mut Vec<usize>) -> Result<f64> {
    let (u2, n1, n0) = doubled_u(scores, labels, idx);
    if n1 == 0 || n0 == 0 {
        return Err(Error::Undefined(format!("AUC of {class}: only one label class present")));
    }
    Ok(u2 as f64 / (2 * n1 * n0) as f64)
}

/// P(score⁺ > score⁻) + ½ P(tie).
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    set.validate()?;
    auc_of(&set.scores, &set.labels, &set.class_name, &mut Vec::new())
}

fn repetition_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// Linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95% percentile interval of the AUC over resamples with replacement.
/// Resamples holding a single label class are redrawn.
pub fn bootstrap_ci(set: &ScoredSet, redraws: usize, seed: u64) -> Result<(f64, f64)> {
    roc_auc(set)?;
    if redraws == 0 {
        return Err(Error::config("redraws", "must be positive"));
    }
    let cap = REDRAW_ATTEMPT_FACTOR * redraws;
    let n = set.scores.len();
    let draws: Vec<(f64, usize)> = (0..redraws)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)),
            |(s, l, idx), rep| {
                let mut rng = repetition_rng(seed, rep);
                for attempt in 1..=cap {
                    s.clear();
                    l.clear();
                    for _ in 0..n {
                        let k = rng.gen_range(0..n);
                        s.push(set.scores[k]);
                        l.push(set.labels[k]);
                    }
                    if let Ok(a) = auc_of(s, l, &set.class_name, idx) {
                        return Ok((a, attempt));
                    }
                }
                Err(())
            },
        )
        .collect::<std::result::Result<_, ()>>()
        .map_err(|_| too_rare(set))?;
    if draws.iter().map(|d| d.1).sum::<usize>() > cap {
        return Err(too_rare(set));
    }
    let mut aucs: Vec<f64> = draws.into_iter().map(|d| d.0).collect();
    aucs.sort_unstable_by(f64::total_cmp);
    Ok((percentile(&aucs, 0.025), percentile(&aucs, 0.975)))
}

fn too_rare(set: &ScoredSet) -> Error {
    Error::Undefined(format!(
        "bootstrap of {}: too many single-class resamples",
        set.class_name
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermTest {
    /// AUC_A − AUC_B.
    pub delta: f64,
    pub p_value: f64,
}

/// Two-tailed paired permutation test of the AUC difference: every
/// repetition swaps each sample's pair of scores with probability ½, and
/// p = (1 + #{|Δᵢ| ≥ |Δ|}) / (1 + N).
pub fn perm_test(a: &[f64], b: &[f64], labels: &[u8], permutations: usize, seed: u64) -> Result<PermTest> {
    let sa = ScoredSet::new("A", a.to_vec(), labels.to_vec())?;
    let sb = ScoredSet::new("B", b.to_vec(), labels.to_vec())?;
    let da = auc_of(&sa.scores, labels, "A", &mut Vec::new())?;
    let db = auc_of(&sb.scores, labels, "B", &mut Vec::new())?;
    if permutations == 0 {
        return Err(Error::config("permutations", "must be positive"));
    }
    let u2 = |s: &[f64], idx: &mut Vec<usize>| doubled_u(s, labels, idx).0 as i64;
    let observed = (u2(a, &mut Vec::new()) - u2(b, &mut Vec::new())).abs();
    let n = a.len();
    let exceed: usize = (0..permutations)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], vec![0.0; n], Vec::with_capacity(n)),
            |(pa, pb, idx), rep| {
                let mut rng = repetition_rng(seed, rep);
                for i in 0..n {
                    let swap = rng.gen_bool(0.5);
                    (pa[i], pb[i]) = if swap { (b[i], a[i]) } else { (a[i], b[i]) };
                }
                ((u2(pa, idx) - u2(pb, idx)).abs() >= observed) as usize
            },
        )
        .sum();
    Ok(PermTest {
        delta: da - db,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive positive/negative pair enumeration.
    fn pair_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    fn set(scores: Vec<f64>, labels: Vec<u8>) -> ScoredSet {
        ScoredSet::new("c", scores, labels).unwrap()
    }

    #[test]
    fn hand_examples() {
        assert_eq!(roc_auc(&set(vec![0.1, 0.4, 0.35, 0.8], vec![0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(roc_auc(&set(vec![0.1, 0.2, 0.7, 0.9], vec![0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(roc_auc(&set(vec![0.5; 6], vec![0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        let e = roc_auc(&set(vec![0.1, 0.2], vec![1, 1])).unwrap_err();
        assert!(matches!(e, Error::Undefined(_)));
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((0i32..8).prop_map(|v| v as f64 / 4.0), n),
                prop::collection::vec(0u8..2, n),
            )
                .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
        })
    }

    proptest! {
        #[test]
        fn matches_pair_enumeration((s, l) in scored()) {
            let a = roc_auc(&set(s.clone(), l.clone())).unwrap();
            prop_assert!((a - pair_auc(&s, &l)).abs() < 1e-12);
        }

        #[test]
        fn complement_and_monotone_invariance((s, l) in scored()) {
            let a = roc_auc(&set(s.clone(), l.clone())).unwrap();
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert_eq!(a + roc_auc(&set(neg, l.clone())).unwrap(), 1.0);
            let ex: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let af: Vec<f64> = s.iter().map(|v| 3.0 * v - 2.0).collect();
            prop_assert!((roc_auc(&set(ex, l.clone())).unwrap() - a).abs() < 1e-12);
            prop_assert!((roc_auc(&set(af, l)).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let s: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let l: Vec<u8> = (0..100).map(|i| (i >= 50) as u8).collect();
        assert_eq!(bootstrap_ci(&set(s.clone(), l.clone()), 200, 1).unwrap(), (1.0, 1.0));
        assert!(bootstrap_ci(&set(s.clone(), l.clone()), 0, 1).is_err());
        let noisy: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
        let a = bootstrap_ci(&set(noisy.clone(), l.clone()), 300, 9).unwrap();
        assert_eq!(a, bootstrap_ci(&set(noisy, l), 300, 9).unwrap());
        assert!(a.0 < a.1);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.5), 2.0);
        assert!((percentile(&[0.0, 10.0], 0.025) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn permutation_extremes_and_symmetry() {
        let l: Vec<u8> = (0..50).map(|i| (i % 2) as u8).collect();
        let a: Vec<f64> = l.iter().map(|&v| v as f64).collect();
        let same = perm_test(&a, &a, &l, 2000, 3).unwrap();
        assert_eq!((same.delta, same.p_value), (0.0, 1.0));
        let b: Vec<f64> = l.iter().map(|&v| 1.0 - v as f64).collect();
        let ext = perm_test(&a, &b, &l, 10_000, 3).unwrap();
        assert_eq!(ext.delta, 1.0);
        assert!(ext.p_value < SIGNIFICANCE, "{}", ext.p_value);
        let c: Vec<f64> = (0..50).map(|i| ((i * 13) % 50) as f64).collect();
        let ab = perm_test(&a, &c, &l, 1000, 5).unwrap();
        let ba = perm_test(&c, &a, &l, 1000, 5).unwrap();
        assert_eq!(ab.p_value, ba.p_value);
        assert_eq!(ab.delta, -ba.delta);
    }
}

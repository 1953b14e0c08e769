//! Fleiss' kappa for a fixed number of raters per item.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Items × categories counts; every row sums to the same rater count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingMatrix {
    counts: Vec<Vec<u64>>,
    raters: u64,
}

impl RatingMatrix {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let first = counts.first().ok_or_else(|| Error::config("ratings", "no items"))?;
        let k = first.len();
        if k < 2 {
            return Err(Error::config("ratings", "need at least two categories"));
        }
        let raters: u64 = first.iter().sum();
        if raters < 2 {
            return Err(Error::config("ratings", "need at least two raters per item"));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != k || row.iter().sum::<u64>() != raters {
                return Err(Error::config(
                    "ratings",
                    format!("item {i} does not have {raters} ratings over {k} categories"),
                ));
            }
        }
        Ok(RatingMatrix { counts, raters })
    }

    /// Builds counts from per-rater binary decisions (`ratings[rater][item]`).
    pub fn from_binary(ratings: &[Vec<bool>]) -> Result<Self> {
        let items = ratings.first().map_or(0, |r| r.len());
        if ratings.iter().any(|r| r.len() != items) {
            return Err(Error::config("ratings", "raters scored different item counts"));
        }
        let counts = (0..items)
            .map(|i| {
                let yes = ratings.iter().filter(|r| r[i]).count() as u64;
                vec![ratings.len() as u64 - yes, yes]
            })
            .collect();
        Self::new(counts)
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn raters(&self) -> u64 {
        self.raters
    }
}

/// κ = (P̄ − P̄ₑ) / (1 − P̄ₑ).
pub fn fleiss_kappa(m: &RatingMatrix) -> Result<f64> {
    let n = m.raters as f64;
    let items = m.counts.len() as f64;
    let k = m.counts[0].len();
    let p_bar = m
        .counts
        .iter()
        .map(|row| (row.iter().map(|&c| (c * c) as f64).sum::<f64>() - n) / (n * (n - 1.0)))
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = m.counts.iter().map(|row| row[j] as f64).sum::<f64>() / (items * n);
            pj * pj
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(Error::Undefined(
            "Fleiss' kappa: all ratings fall in one category".into(),
        ));
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        let unanimous = RatingMatrix::new(vec![vec![3, 0], vec![0, 3], vec![3, 0]]).unwrap();
        assert_eq!(fleiss_kappa(&unanimous).unwrap(), 1.0);
        let split = RatingMatrix::new(vec![vec![2, 1], vec![1, 2]]).unwrap();
        assert!((fleiss_kappa(&split).unwrap() + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let one = RatingMatrix::new(vec![vec![3, 0], vec![3, 0]]).unwrap();
        assert!(matches!(fleiss_kappa(&one), Err(Error::Undefined(_))));
        assert!(RatingMatrix::new(vec![vec![2, 1], vec![1, 1]]).is_err());
        assert!(RatingMatrix::new(vec![vec![1, 0]]).is_err());
    }

    #[test]
    fn from_binary_counts() {
        let m = RatingMatrix::from_binary(&[vec![true, false], vec![true, true]]).unwrap();
        assert_eq!(m.counts(), &[vec![0, 2], vec![1, 1]]);
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..5, 2u64..6, 1usize..12).prop_flat_map(|(k, n, items)| {
            prop::collection::vec(prop::collection::vec(0u64..100, k), items).prop_map(move |rows| {
                rows.into_iter()
                    .map(|w| {
                        // distribute n raters by the random weights
                        let mut row = vec![0u64; w.len()];
                        let total: u64 = w.iter().sum::<u64>().max(1);
                        let mut left = n;
                        for (j, &x) in w.iter().enumerate() {
                            let c = (x * n / total).min(left);
                            row[j] = c;
                            left -= c;
                        }
                        row[0] += left;
                        row
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn relabeling_invariance(rows in matrix()) {
            let m = RatingMatrix::new(rows.clone()).unwrap();
            let rev = RatingMatrix::new(rows.iter().map(|r| r.iter().rev().copied().collect()).collect()).unwrap();
            match (fleiss_kappa(&m), fleiss_kappa(&rev)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "relabeling changed definedness"),
            }
        }

        #[test]
        fn one_iff_every_row_concentrated(rows in matrix()) {
            let m = RatingMatrix::new(rows.clone()).unwrap();
            let concentrated = rows.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1);
            if let Ok(k) = fleiss_kappa(&m) {
                prop_assert_eq!((k - 1.0).abs() < 1e-12, concentrated);
            }
        }
    }
}

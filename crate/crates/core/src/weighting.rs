//! Training-set class statistics and selective class weights.
//!
//! `w_c = sqrt((T / N) / (f_c + N))`, with `f_c` the count of class `c`, `T`
//! the total count and `N` the number of classes. The mean class cardinality
//! `T / N` is the numerator, so classes more frequent than average get
//! weights below one and the rarest class gets the largest weight; the
//! square root damps the spread when frequencies differ by orders of
//! magnitude.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassStats {
    pub num_classes: usize,
    pub freq: Vec<u64>,
    pub total: u64,
}

impl ClassStats {
    pub fn from_counts(freq: Vec<u64>) -> Result<Self> {
        if freq.len() < 2 {
            return Err(arg_err("class_stats", "need at least two classes"));
        }
        let total = freq.iter().sum();
        if total == 0 {
            return Err(Error::Empty("class_stats"));
        }
        Ok(Self {
            num_classes: freq.len(),
            freq,
            total,
        })
    }
}

/// Exact per-class counts over a collection of label maps.
pub fn compute_stats<'a, I>(label_volumes: I, num_classes: usize) -> Result<ClassStats>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    if num_classes < 2 {
        return Err(arg_err("compute_stats", "need at least two classes"));
    }
    let mut freq = vec![0u64; num_classes];
    for vol in label_volumes {
        for &l in vol {
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    num_classes,
                    context: alloc::string::String::new(),
                });
            }
            freq[l] += 1;
        }
    }
    ClassStats::from_counts(freq)
}

/// Per-class counts of single labels (one per sample), e.g. disease labels
/// counted per patient.
pub fn compute_label_stats(labels: &[usize], num_classes: usize) -> Result<ClassStats> {
    if num_classes < 2 {
        return Err(arg_err("compute_label_stats", "need at least two classes"));
    }
    let mut freq = vec![0u64; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes,
                context: alloc::string::String::new(),
            });
        }
        freq[l] += 1;
    }
    ClassStats::from_counts(freq)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            w: vec![1.0; num_classes],
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.w.len() != num_classes {
            return Err(arg_err(
                "class_weights",
                format!("{} weights for {} classes", self.w.len(), num_classes),
            ));
        }
        if let Some(w) = self.w.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(arg_err("class_weights", format!("weight {} must be positive", w)));
        }
        Ok(())
    }
}

pub fn compute_weights(stats: &ClassStats) -> ClassWeights {
    let n = stats.num_classes as f64;
    let mean_card = stats.total as f64 / n;
    ClassWeights {
        w: stats
            .freq
            .iter()
            .map(|&f| num_traits::Float::sqrt(mean_card / (f as f64 + n)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_small_example() {
        let s = compute_stats([&[0u8, 0, 0, 1][..]], 2).unwrap();
        assert_eq!(s.freq, vec![3, 1]);
        assert_eq!(s.total, 4);
    }

    #[test]
    fn empty_collection_is_error() {
        let none: [&[u8]; 0] = [];
        assert!(compute_stats(none, 2).is_err());
        assert!(compute_stats([&[][..]], 2).is_err());
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(
            compute_stats([&[0u8, 2][..]], 2),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn imbalanced_counts_and_weights() {
        let mut labels = vec![0u8; 900];
        labels.extend(core::iter::repeat_n(1u8, 100));
        let s = compute_stats([&labels[..]], 2).unwrap();
        assert_eq!(s.freq, vec![900, 100]);
        let w = compute_weights(&s);
        assert!((w.w[0] - 0.74453).abs() < 1e-5);
        assert!((w.w[1] - 2.21404).abs() < 1e-5);
    }

    #[test]
    fn balanced_weights_equal() {
        let s = ClassStats::from_counts(vec![100, 100, 100]).unwrap();
        let w = compute_weights(&s);
        assert_eq!(w.w[0], w.w[1]);
        assert_eq!(w.w[1], w.w[2]);
        assert!((w.w[0] - 0.98533).abs() < 1e-5);
    }

    fn stats_strategy() -> impl Strategy<Value = Vec<u64>> {
        proptest::collection::vec(0u64..100_000, 2..8).prop_filter("non-empty", |f| f.iter().sum::<u64>() > 0)
    }

    proptest! {
        #[test]
        fn more_frequent_means_smaller_weight(freq in stats_strategy()) {
            let s = ClassStats::from_counts(freq.clone()).unwrap();
            let w = compute_weights(&s);
            for a in 0..freq.len() {
                for b in 0..freq.len() {
                    if freq[a] > freq[b] {
                        prop_assert!(w.w[a] < w.w[b]);
                    }
                }
                prop_assert!(w.w[a] > 0.0);
            }
        }

        #[test]
        fn majority_weight_below_one(freq in stats_strategy()) {
            let s = ClassStats::from_counts(freq.clone()).unwrap();
            let w = compute_weights(&s);
            let n = freq.len() as f64;
            let mean = s.total as f64 / n;
            for (c, &f) in freq.iter().enumerate() {
                if f as f64 + n > mean {
                    prop_assert!(w.w[c] < 1.0);
                }
            }
        }

        #[test]
        fn ratios_and_sqrt_damping(freq in stats_strategy(), k in 2u64..50) {
            let s = ClassStats::from_counts(freq.clone()).unwrap();
            let w = compute_weights(&s);
            let n = freq.len() as f64;
            for a in 0..freq.len() {
                for b in 0..freq.len() {
                    let expect = ((freq[b] as f64 + n) / (freq[a] as f64 + n)).sqrt();
                    prop_assert!((w.w[a] / w.w[b] - expect).abs() <= 1e-12 * expect);
                }
            }
            let scaled = ClassStats::from_counts(freq.iter().map(|f| f * k).collect()).unwrap();
            let ws = compute_weights(&scaled);
            for c in 0..freq.len() {
                // ratio^2 = k (f+N) / (k f + N): strictly inside (1, sqrt k) unless f = 0
                let ratio = ws.w[c] / w.w[c];
                let sk = (k as f64).sqrt();
                prop_assert!(ratio > 1.0);
                if freq[c] > 0 {
                    prop_assert!(ratio < sk);
                } else {
                    prop_assert!((ratio - sk).abs() <= 1e-12 * sk);
                }
            }
        }
    }
}

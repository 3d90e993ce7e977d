//! Loss terms: adversarial binary cross-entropy, class-weighted categorical
//! cross-entropy for segmentation, class-weighted L1 for disease prediction,
//! and their combination into the generator objective.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{bce_value, weighted_cce_value, weighted_l1_value, Graph, Var};
use crate::real::Real;

pub use crate::graph::LOG_EPS;

/// Mean binary cross-entropy of clamped scores against 0/1 targets.
pub fn bce<T: Real>(scores: &[T], target: &[T]) -> Result<T> {
    if scores.len() != target.len() || scores.is_empty() {
        return Err(shape_err(
            "bce",
            format!("{} scores vs {} targets", scores.len(), target.len()),
        ));
    }
    Ok(bce_value(scores, target))
}

/// Generator adversarial objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// Generator maximises `log D(fake)`, i.e. minimises `bce(D(fake), 1)`.
    #[default]
    NonSaturating,
    /// Generator minimises `log(1 - D(fake))` as written in the min-max game,
    /// i.e. `-bce(D(fake), 0)`.
    Minimax,
}

fn check_maps<T: Real>(g: &Graph<T>, real: &[Var], fake: &[Var]) -> Result<()> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(shape_err(
            "adversarial_losses",
            format!("{} real vs {} fake maps", real.len(), fake.len()),
        ));
    }
    for (&r, &f) in real.iter().zip(fake) {
        if g.shape(r) != g.shape(f) {
            return Err(shape_err(
                "adversarial_losses",
                format!("real map {:?} vs fake map {:?}", g.shape(r), g.shape(f)),
            ));
        }
    }
    Ok(())
}

/// Mean BCE over a sequence of equally shaped score maps against a constant
/// target.
pub fn bce_maps<T: Real>(g: &mut Graph<T>, maps: &[Var], target: T) -> Result<Var> {
    let first = *maps.first().ok_or(Error::Empty("bce_maps"))?;
    let n = g.value(first).len();
    let t = alloc::vec![target; n];
    let per: Vec<Var> = maps.iter().map(|&m| g.bce(m, &t)).collect::<Result<_>>()?;
    let s = g.add_n(&per)?;
    Ok(g.scale(s, T::one() / T::of(maps.len() as f64)))
}

/// Discriminator loss `bce(real, 1) + bce(fake, 0)`.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    check_maps(g, real, fake)?;
    let r = bce_maps(g, real, T::one())?;
    let f = bce_maps(g, fake, T::zero())?;
    g.add(r, f)
}

/// Generator adversarial term on the discriminator's scores for its output.
pub fn generator_adversarial<T: Real>(g: &mut Graph<T>, fake: &[Var], form: AdversarialForm) -> Result<Var> {
    match form {
        AdversarialForm::NonSaturating => bce_maps(g, fake, T::one()),
        AdversarialForm::Minimax => {
            let l = bce_maps(g, fake, T::zero())?;
            Ok(g.scale(l, -T::one()))
        }
    }
}

/// Value-level `(adv_d, adv_g)` for a pair of score maps.
pub fn adversarial_losses<T: Real>(d_real: &[T], d_fake: &[T], form: AdversarialForm) -> Result<(T, T)> {
    if d_real.len() != d_fake.len() {
        return Err(shape_err(
            "adversarial_losses",
            format!("real map has {} scores, fake map {}", d_real.len(), d_fake.len()),
        ));
    }
    let ones = alloc::vec![T::one(); d_real.len()];
    let zeros = alloc::vec![T::zero(); d_real.len()];
    let adv_d = bce(d_real, &ones)? + bce(d_fake, &zeros)?;
    let adv_g = match form {
        AdversarialForm::NonSaturating => bce(d_fake, &ones)?,
        AdversarialForm::Minimax => -bce(d_fake, &zeros)?,
    };
    Ok((adv_d, adv_g))
}

/// Value-level weighted categorical cross-entropy; `probs` is
/// `[classes, positions]` flattened.
pub fn weighted_cce<T: Real>(probs: &[T], labels: &[u8], weights: &[T]) -> Result<T> {
    let c = weights.len();
    if c == 0 || probs.len() != c * labels.len() {
        return Err(shape_err(
            "weighted_cce",
            format!("{} probs for {} classes x {} labels", probs.len(), c, labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            num_classes: c,
            context: alloc::string::String::new(),
        });
    }
    Ok(weighted_cce_value(probs, labels.len(), labels, weights))
}

/// Mean weighted CCE over a sequence of per-slice probability maps.
pub fn weighted_cce_slices<T: Real>(g: &mut Graph<T>, probs: &[Var], labels: &[&[u8]], weights: &[T]) -> Result<Var> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(shape_err(
            "weighted_cce",
            format!("{} maps vs {} label slices", probs.len(), labels.len()),
        ));
    }
    let per: Vec<Var> = probs
        .iter()
        .zip(labels)
        .map(|(&p, l)| g.weighted_cce(p, l, weights))
        .collect::<Result<_>>()?;
    let s = g.add_n(&per)?;
    Ok(g.scale(s, T::one() / T::of(probs.len() as f64)))
}

pub fn weighted_l1<T: Real>(pred: &[T], target: &[T], weights: &[T]) -> Result<T> {
    if pred.len() != target.len() || pred.len() != weights.len() {
        return Err(shape_err(
            "weighted_l1",
            format!("lengths {} / {} / {}", pred.len(), target.len(), weights.len()),
        ));
    }
    Ok(weighted_l1_value(pred, target, weights))
}

pub fn one_hot<T: Real>(label: usize, n: usize) -> Vec<T> {
    (0..n).map(|i| if i == label { T::one() } else { T::zero() }).collect()
}

/// Per-term multipliers of the generator objective. All ones reproduces the
/// plain sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossCoeffs {
    pub adv: f64,
    pub seg: f64,
    pub cls: f64,
}

impl Default for LossCoeffs {
    fn default() -> Self {
        Self {
            adv: 1.0,
            seg: 1.0,
            cls: 1.0,
        }
    }
}

pub fn total_generator_loss(adv_g: f64, seg_ce: f64, cls_l1: f64, c: &LossCoeffs) -> f64 {
    c.adv * adv_g + c.seg * seg_ce + c.cls * cls_l1
}

/// Graph version of [`total_generator_loss`].
pub fn total_generator_loss_var<T: Real>(
    g: &mut Graph<T>,
    adv_g: Var,
    seg_ce: Var,
    cls_l1: Var,
    c: &LossCoeffs,
) -> Result<Var> {
    let a = g.scale(adv_g, T::of(c.adv));
    let s = g.scale(seg_ce, T::of(c.seg));
    let l = g.scale(cls_l1, T::of(c.cls));
    g.add_n(&[a, s, l])
}

/// One step's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_d: f64,
    pub adv_g: f64,
    pub seg_ce: f64,
    pub cls_l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.adv_d, self.adv_g, self.seg_ce, self.cls_l1, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("adv_d", self.adv_d),
            ("adv_g", self.adv_g),
            ("seg_ce", self.seg_ce),
            ("cls_l1", self.cls_l1),
            ("total", self.total),
        ]
        .iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| *n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use core::f64::consts::LN_2;
    use proptest::prelude::*;

    #[test]
    fn bce_half_is_ln2() {
        let s = [0.5f64; 6];
        assert!((bce(&s, &[1.0; 6]).unwrap() - LN_2).abs() < 1e-12);
        assert!((bce(&s, &[0.0; 6]).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_near_zero() {
        let v = bce(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap();
        assert!((0.0..1e-6).contains(&v));
    }

    #[test]
    fn adversarial_pair_values() {
        let (d, g) = adversarial_losses(&[0.5f64; 4], &[0.5; 4], AdversarialForm::NonSaturating).unwrap();
        assert!((d - 2.0 * LN_2).abs() < 1e-12);
        assert!((g - LN_2).abs() < 1e-12);
        let (d, g) = adversarial_losses(&[1.0f64; 4], &[0.0; 4], AdversarialForm::NonSaturating).unwrap();
        assert!(d < 1e-6);
        assert!(g > 15.0);
        assert!(adversarial_losses(&[0.5f64; 4], &[0.5; 3], AdversarialForm::Minimax).is_err());
    }

    #[test]
    fn graph_adversarial_matches_values() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::from_f64([1, 2, 2], &[0.9, 0.6, 0.7, 0.8]).unwrap());
        let f = g.constant(Tensor::from_f64([1, 2, 2], &[0.2, 0.3, 0.1, 0.4]).unwrap());
        let d = discriminator_loss(&mut g, &[r], &[f]).unwrap();
        let gl = generator_adversarial(&mut g, &[f], AdversarialForm::NonSaturating).unwrap();
        let (dv, gv) =
            adversarial_losses(g.value(r).data(), g.value(f).data(), AdversarialForm::NonSaturating).unwrap();
        assert!((g.value(d).item() - dv).abs() < 1e-14);
        assert!((g.value(gl).item() - gv).abs() < 1e-14);
        let bad = g.constant(Tensor::zeros([1, 2, 1]));
        assert!(discriminator_loss(&mut g, &[r], &[bad]).is_err());
    }

    #[test]
    fn weighted_cce_examples() {
        let v = weighted_cce(&[0.2f64, 0.8], &[1], &[1.0, 2.0]).unwrap();
        assert!((v - 0.44629).abs() < 1e-5);
        assert!((v + 2.0 * 0.8f64.ln()).abs() < 1e-15);
        let perfect = weighted_cce(&[1.0f64, 0.0, 0.0, 1.0], &[0, 1], &[3.0, 7.0]).unwrap();
        assert!(perfect.abs() < 1e-15);
        assert!(weighted_cce(&[0.5f64, 0.5], &[2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn weighted_l1_examples() {
        let v = weighted_l1(&[0.7f64, 0.3], &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 0.6).abs() < 1e-15);
        let v = weighted_l1(&[0.7f64, 0.3], &[1.0, 0.0], &[2.0, 1.0]).unwrap();
        assert!((v - 0.9).abs() < 1e-15);
        assert_eq!(weighted_l1(&[0.2f64, 0.8], &[0.2, 0.8], &[5.0, 5.0]).unwrap(), 0.0);
        assert!(weighted_l1(&[0.2f64], &[0.2, 0.8], &[5.0, 5.0]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let c = LossCoeffs::default();
        assert!((total_generator_loss(0.5, 0.3, 0.2, &c) - 1.0).abs() < 1e-15);
        let seg_only = LossCoeffs {
            adv: 0.0,
            seg: 1.0,
            cls: 0.0,
        };
        assert_eq!(total_generator_loss(0.5, 0.3, 0.2, &seg_only), 0.3);
        let k = 3.0;
        let scaled = LossCoeffs { adv: k, seg: k, cls: k };
        assert!((total_generator_loss(0.5, 0.3, 0.2, &scaled) - k).abs() < 1e-14);
    }

    fn probs_labels() -> impl Strategy<Value = (usize, Vec<f64>, Vec<u8>, Vec<f64>)> {
        (2usize..5, 1usize..20).prop_flat_map(|(c, n)| {
            (
                Just(c),
                proptest::collection::vec(0.01f64..1.0, c * n),
                proptest::collection::vec(0u8..c as u8, n),
                proptest::collection::vec(0.1f64..5.0, c),
            )
        })
    }

    fn normalize(c: usize, raw: &[f64]) -> Vec<f64> {
        let n = raw.len() / c;
        let mut out = raw.to_vec();
        for p in 0..n {
            let s: f64 = (0..c).map(|k| raw[k * n + p]).sum();
            for k in 0..c {
                out[k * n + p] /= s;
            }
        }
        out
    }

    proptest! {
        #[test]
        fn unit_weights_reduce_to_plain_cce((c, raw, labels, _w) in probs_labels()) {
            let p = normalize(c, &raw);
            let n = labels.len();
            let plain: f64 = labels.iter().enumerate()
                .map(|(i, &y)| -p[y as usize * n + i].ln()).sum::<f64>() / n as f64;
            let v = weighted_cce(&p, &labels, &alloc::vec![1.0; c]).unwrap();
            prop_assert!((v - plain).abs() < 1e-12);
        }

        #[test]
        fn class_permutation_invariance((c, raw, labels, w) in probs_labels(), rot in 1usize..4) {
            let p = normalize(c, &raw);
            let n = labels.len();
            let perm = |k: usize| (k + rot) % c;
            let mut pp = alloc::vec![0.0; p.len()];
            let mut wp = alloc::vec![0.0; c];
            for k in 0..c {
                wp[perm(k)] = w[k];
                pp[perm(k) * n..(perm(k) + 1) * n].copy_from_slice(&p[k * n..(k + 1) * n]);
            }
            let lp: Vec<u8> = labels.iter().map(|&l| perm(l as usize) as u8).collect();
            let a = weighted_cce(&p, &labels, &w).unwrap();
            let b = weighted_cce(&pp, &lp, &wp).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn raising_true_class_weight_raises_loss((c, raw, labels, w) in probs_labels()) {
            let p = normalize(c, &raw);
            let y = labels[0] as usize;
            let mut w2 = w.clone();
            w2[y] += 0.5;
            let a = weighted_cce(&p, &labels, &w).unwrap();
            let b = weighted_cce(&p, &labels, &w2).unwrap();
            prop_assert!(b > a);
        }

        #[test]
        fn bce_non_negative(s in proptest::collection::vec(0.0f64..=1.0, 1..20), bits in any::<u32>()) {
            let t: Vec<f64> = (0..s.len()).map(|i| ((bits >> (i % 32)) & 1) as f64).collect();
            prop_assert!(bce(&s, &t).unwrap() >= 0.0);
        }
    }
}

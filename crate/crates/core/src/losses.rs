//! Generator and discriminator objectives with their analytic gradients.
//!
//! All reductions are means over the batch, so losses do not scale with batch
//! size. The reconstruction term is a mean over elements rather than a sum,
//! which keeps its weight independent of resolution. Probabilities are clamped
//! to `[1e-7, 1 - 1e-7]` before any logarithm.
//!
//! Every function is generic over [`Scalar`] so the same code runs in `f32`
//! during training and in `f64` under finite-difference verification.

use serde::{Deserialize, Serialize};

use crate::affect::NUM_AFFECTS;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

fn check_pair_len(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::shape(context, a, b));
    }
    Ok(())
}

/// Mean binary cross entropy.
pub fn bce<T: Scalar>(targets: &[T], preds: &[T]) -> Result<T> {
    check_pair_len("bce", targets.len(), preds.len())?;
    let n = T::lit(targets.len() as f64);
    let sum: T = targets
        .iter()
        .zip(preds)
        .map(|(&t, &p)| {
            let (p, _) = clamp_prob(p);
            -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
        })
        .sum();
    Ok(sum / n)
}

/// d bce / d pred; zero where the clamp is active.
pub fn bce_grad<T: Scalar>(targets: &[T], preds: &[T]) -> Vec<T> {
    let n = T::lit(targets.len() as f64);
    targets
        .iter()
        .zip(preds)
        .map(|(&t, &p)| {
            let (p, clamped) = clamp_prob(p);
            if clamped {
                T::zero()
            } else {
                (-(t / p) + (T::one() - t) / (T::one() - p)) / n
            }
        })
        .collect()
}

/// Gradient of bce∘sigmoid with respect to the logit: `(p - t) / n`.
///
/// Equal to `bce_grad · p(1-p)` inside the clamp range, and keeps flowing when
/// the sigmoid saturates.
pub fn bce_logit_grad<T: Scalar>(targets: &[T], preds: &[T]) -> Vec<T> {
    let n = T::lit(targets.len() as f64);
    targets.iter().zip(preds).map(|(&t, &p)| (p - t) / n).collect()
}

fn check_rows<T: Scalar>(targets: &[T], probs: &[T]) -> Result<usize> {
    check_pair_len("cce", targets.len(), probs.len())?;
    if !probs.len().is_multiple_of(NUM_AFFECTS) {
        return Err(Error::shape("cce rows", format!("multiple of {NUM_AFFECTS}"), probs.len()));
    }
    Ok(probs.len() / NUM_AFFECTS)
}

/// Mean categorical cross entropy `-Σ t·ln p`, no normalization check.
///
/// Targets may be any finite vectors (modulated or blended affects).
pub fn cce_unchecked<T: Scalar>(targets: &[T], probs: &[T]) -> Result<T> {
    let rows = check_rows(targets, probs)?;
    let sum: T = targets
        .iter()
        .zip(probs)
        .map(|(&t, &p)| -t * clamp_prob(p).0.ln())
        .sum();
    Ok(sum / T::lit(rows as f64))
}

/// Mean categorical cross entropy over rows of 7 class probabilities.
pub fn cce<T: Scalar>(targets: &[T], probs: &[T]) -> Result<T> {
    let rows = check_rows(targets, probs)?;
    let tol = T::lit(1e-5);
    for (r, row) in probs.chunks_exact(NUM_AFFECTS).enumerate() {
        let s: T = row.iter().copied().sum();
        if (s - T::one()).abs() > tol || row.iter().any(|&p| p < T::zero()) {
            return Err(Error::domain(format!(
                "class probabilities of row {r} are not normalized (sum {s:?})"
            )));
        }
    }
    debug_assert!(rows > 0);
    cce_unchecked(targets, probs)
}

/// d cce / d probs; zero where the clamp is active.
pub fn cce_grad<T: Scalar>(targets: &[T], probs: &[T]) -> Vec<T> {
    let rows = T::lit((probs.len() / NUM_AFFECTS) as f64);
    targets
        .iter()
        .zip(probs)
        .map(|(&t, &p)| {
            let (pc, clamped) = clamp_prob(p);
            if clamped {
                T::zero()
            } else {
                -t / pc / rows
            }
        })
        .collect()
}

/// Gradient of cce∘softmax with respect to the logits: `(p·Σt - t) / rows`.
pub fn cce_logit_grad<T: Scalar>(targets: &[T], probs: &[T]) -> Vec<T> {
    let rows = T::lit((probs.len() / NUM_AFFECTS) as f64);
    let mut out = Vec::with_capacity(probs.len());
    for (trow, prow) in targets.chunks_exact(NUM_AFFECTS).zip(probs.chunks_exact(NUM_AFFECTS)) {
        let mass: T = trow.iter().copied().sum();
        out.extend(trow.iter().zip(prow).map(|(&t, &p)| (p * mass - t) / rows));
    }
    out
}

/// Generator adversarial loss: fool the validity head and hit the target affect.
pub fn gen_adv_loss<T: Scalar>(fake_validity: &[T], fake_probs: &[T], target_affects: &[T]) -> Result<T> {
    let ones = vec![T::one(); fake_validity.len()];
    Ok(bce(&ones, fake_validity)? + cce(target_affects, fake_probs)?)
}

/// Discriminator loss on real images, labelled with their source affects.
pub fn disc_real_loss<T: Scalar>(real_validity: &[T], real_probs: &[T], source_affects: &[T]) -> Result<T> {
    let ones = vec![T::one(); real_validity.len()];
    Ok(bce(&ones, real_validity)? + cce(source_affects, real_probs)?)
}

/// Discriminator loss on generated images: flag them fake, still classify
/// them as the affect they were asked to show.
pub fn disc_fake_loss<T: Scalar>(fake_validity: &[T], fake_probs: &[T], target_affects: &[T]) -> Result<T> {
    let zeros = vec![T::zero(); fake_validity.len()];
    Ok(bce(&zeros, fake_validity)? + cce(target_affects, fake_probs)?)
}

pub fn disc_total<T: Scalar>(real_loss: T, fake_loss: T) -> T {
    real_loss + fake_loss
}

/// Mean absolute difference.
pub fn reconst_loss<T: Scalar>(generated: &[T], target: &[T]) -> Result<T> {
    if generated.len() != target.len() {
        return Err(Error::shape("reconst_loss", target.len(), generated.len()));
    }
    if generated.is_empty() {
        return Err(Error::domain("reconstruction loss of empty tensors"));
    }
    let sum: T = generated.iter().zip(target).map(|(&g, &t)| (g - t).abs()).sum();
    Ok(sum / T::lit(generated.len() as f64))
}

/// d reconst / d generated, using sign(0) = 0.
pub fn reconst_grad<T: Scalar>(generated: &[T], target: &[T]) -> Vec<T> {
    let n = T::lit(generated.len() as f64);
    generated
        .iter()
        .zip(target)
        .map(|(&g, &t)| {
            let d = g - t;
            if d > T::zero() {
                T::one() / n
            } else if d < T::zero() {
                -T::one() / n
            } else {
                T::zero()
            }
        })
        .collect()
}

/// KL divergence of `N(μ, exp(log_var))` from the unit normal, as
/// `-1/(2n) Σ_i [1 + log_var_i - μ_i² - exp(log_var_i)]` per item with `n`
/// the latent dimension, averaged over the batch.
pub fn kl_loss<T: Scalar>(mu: &[T], log_var: &[T], latent_dim: usize) -> Result<T> {
    check_pair_len("kl_loss", mu.len(), log_var.len())?;
    if latent_dim == 0 || !mu.len().is_multiple_of(latent_dim) {
        return Err(Error::shape("kl_loss rows", format!("multiple of {latent_dim}"), mu.len()));
    }
    let rows = mu.len() / latent_dim;
    let sum: T = mu
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| T::one() + lv - m * m - lv.exp())
        .sum();
    Ok(-sum / T::lit(2.0 * latent_dim as f64 * rows as f64))
}

/// Gradients of [`kl_loss`] with respect to μ and log-variance.
pub fn kl_grad<T: Scalar>(mu: &[T], log_var: &[T], latent_dim: usize) -> (Vec<T>, Vec<T>) {
    let rows = mu.len() / latent_dim;
    let denom = T::lit(2.0 * latent_dim as f64 * rows as f64);
    let two = T::lit(2.0);
    let dmu = mu.iter().map(|&m| two * m / denom).collect();
    let dlv = log_var.iter().map(|&lv| (lv.exp() - T::one()) / denom).collect();
    (dmu, dlv)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::domain(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::domain("loss weights are all zero"));
        }
        Ok(())
    }
}

/// `α·adv + β·kl + γ·reconst`.
pub fn gen_total<T: Scalar>(adv: T, kl: T, reconst: T, weights: &LossWeights) -> Result<T> {
    weights.validate()?;
    Ok(T::lit(weights.alpha) * adv + T::lit(weights.beta) * kl + T::lit(weights.gamma) * reconst)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gen_adv: f64,
    pub reconst: f64,
    pub kl: f64,
    pub gen_total: f64,
    pub disc_real: f64,
    pub disc_fake: f64,
    pub disc_total: f64,
}

impl LossReport {
    /// Checks both recomposition identities to `tol`.
    pub fn is_consistent(&self, weights: &LossWeights, tol: f64) -> bool {
        let gen = weights.alpha * self.gen_adv + weights.beta * self.kl + weights.gamma * self.reconst;
        (gen - self.gen_total).abs() <= tol && (self.disc_real + self.disc_fake - self.disc_total).abs() <= tol
    }

    pub fn all_finite(&self) -> bool {
        [
            self.gen_adv,
            self.reconst,
            self.kl,
            self.gen_total,
            self.disc_real,
            self.disc_fake,
            self.disc_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn uniform(rows: usize) -> Vec<f64> {
        vec![1.0 / 7.0; rows * 7]
    }

    fn one_hot_row(c: usize) -> Vec<f64> {
        let mut v = vec![0.0; 7];
        v[c] = 1.0;
        v
    }

    #[test]
    fn bce_examples() {
        assert_abs_diff_eq!(bce(&[1.0], &[1.0 - 1e-7]).unwrap(), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(bce(&[1.0], &[0.5]).unwrap(), LN2, epsilon = 1e-12);
        assert_abs_diff_eq!(bce(&[0.0], &[0.25]).unwrap(), -(0.75f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(bce(&[0.0], &[0.25]).unwrap(), 0.2877, epsilon = 1e-4);
    }

    #[test]
    fn bce_is_bounded_by_the_clamp() {
        let v: f64 = bce(&[0.0], &[1.0]).unwrap();
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, -(1e-7f64).ln(), epsilon = 1e-6);
        assert!(v < 16.2);
    }

    #[test]
    fn cce_examples() {
        let mut near = vec![1e-7 / 6.0; 7];
        near[2] = 1.0 - 1e-7;
        assert_abs_diff_eq!(cce(&one_hot_row(2), &near).unwrap(), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(cce(&one_hot_row(3), &uniform(1)).unwrap(), 7f64.ln(), epsilon = 1e-12);
        let mut modulated = vec![0.0; 7];
        modulated[1] = 1.2;
        assert_abs_diff_eq!(cce(&modulated, &uniform(1)).unwrap(), 1.2 * 7f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(cce(&modulated, &uniform(1)).unwrap(), 2.3351, epsilon = 1e-4);
    }

    #[test]
    fn cce_rejects_unnormalized_rows() {
        assert!(cce(&one_hot_row(0), &[0.5; 7]).is_err());
        assert!(cce(&one_hot_row(0)[..6], &[0.5; 6]).is_err());
    }

    #[test]
    fn adversarial_examples() {
        let t = one_hot_row(1);
        assert_abs_diff_eq!(gen_adv_loss(&[0.5], &uniform(1), &t).unwrap(), LN2 + 7f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(gen_adv_loss(&[0.5], &uniform(1), &t).unwrap(), 2.6391, epsilon = 1e-4);
        let mut sharp = vec![1e-8; 7];
        sharp[1] = 1.0 - 6e-8;
        assert_abs_diff_eq!(gen_adv_loss(&[1.0], &sharp, &t).unwrap(), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(gen_adv_loss(&[0.5], &sharp, &t).unwrap(), LN2, epsilon = 1e-6);
    }

    #[test]
    fn discriminator_examples() {
        let t = one_hot_row(4);
        let mut sharp = vec![1e-8; 7];
        sharp[4] = 1.0 - 6e-8;
        assert_abs_diff_eq!(disc_real_loss(&[1.0], &sharp, &t).unwrap(), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(disc_real_loss(&[0.5], &uniform(1), &t).unwrap(), LN2 + 7f64.ln(), epsilon = 1e-12);
        let eps = 1e-4;
        let mut wrong = vec![eps / 6.0; 7];
        wrong[0] = 1.0 - eps;
        assert!(disc_real_loss(&[1.0], &wrong, &t).unwrap() >= (1.0 / eps).ln());

        assert_abs_diff_eq!(disc_fake_loss(&[0.0], &sharp, &t).unwrap(), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(disc_fake_loss(&[0.5], &uniform(1), &t).unwrap(), LN2 + 7f64.ln(), epsilon = 1e-12);
        let saturated = disc_fake_loss(&[1.0], &sharp, &t).unwrap();
        assert!(saturated.is_finite() && saturated > 16.0);

        assert_eq!(disc_total(0.0, 0.0), 0.0);
        assert_eq!(disc_total(1.0, 2.0), 3.0);
    }

    #[test]
    fn reconst_examples() {
        let a = vec![0.3; 16];
        assert_eq!(reconst_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(reconst_loss(&[1.0; 8], &[-1.0; 8]).unwrap(), 2.0);
        let b: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 0.8 } else { 0.3 }).collect();
        assert_abs_diff_eq!(reconst_loss(&b, &a).unwrap(), 0.25, epsilon = 1e-12);
        assert!(reconst_loss(&a, &a[..4]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_loss(&[0.0, 0.0], &[0.0, 0.0], 2).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_loss(&[1.0, 0.0], &[0.0, 0.0], 2).unwrap(), 0.25, epsilon = 1e-15);
        let v = kl_loss(&[0.0], &[4f64.ln()], 1).unwrap();
        assert_abs_diff_eq!(v, -0.5 * (1.0 + 4f64.ln() - 4.0), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.8069, epsilon = 1e-4);
    }

    #[test]
    fn gen_total_examples() {
        let unit = LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0 };
        assert_eq!(gen_total(1.0, 1.0, 1.0, &unit).unwrap(), 3.0);
        assert_abs_diff_eq!(gen_total(2.0, 0.5, 0.1, &LossWeights::default()).unwrap(), 3.05, epsilon = 1e-12);
        let zero = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 };
        assert!(gen_total(1.0, 1.0, 1.0, &zero).is_err());
    }

    #[test]
    fn logit_gradients_match_chain_rule_inside_clamp() {
        let t = [1.0, 0.0, 0.3];
        let p = [0.2, 0.7, 0.5];
        let g = bce_grad(&t, &p);
        let fused = bce_logit_grad(&t, &p);
        for i in 0..3 {
            assert_abs_diff_eq!(g[i] * p[i] * (1.0 - p[i]), fused[i], epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 6), lv in prop::collection::vec(-5.0f64..5.0, 6)) {
            let v = kl_loss(&mu, &lv, 3).unwrap();
            prop_assert!(v >= 0.0);
            if v == 0.0 {
                prop_assert!(mu.iter().chain(&lv).all(|x| *x == 0.0));
            }
        }

        #[test]
        fn kl_positive_away_from_origin(i in 0usize..4, d in prop_oneof![-3.0f64..-1e-3, 1e-3f64..3.0], which in 0usize..2) {
            let mut mu = vec![0.0; 4];
            let mut lv = vec![0.0; 4];
            if which == 0 { mu[i] = d } else { lv[i] = d }
            prop_assert!(kl_loss(&mu, &lv, 4).unwrap() > 0.0);
        }

        #[test]
        fn reconst_is_a_metric(
            a in prop::collection::vec(-1.0f64..1.0, 12),
            b in prop::collection::vec(-1.0f64..1.0, 12),
            c in prop::collection::vec(-1.0f64..1.0, 12),
        ) {
            let ab = reconst_loss(&a, &b).unwrap();
            prop_assert_eq!(ab, reconst_loss(&b, &a).unwrap());
            prop_assert_eq!(reconst_loss(&a, &a).unwrap(), 0.0);
            if a != b { prop_assert!(ab > 0.0); }
            let ac = reconst_loss(&a, &c).unwrap();
            let cb = reconst_loss(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn batch_permutation_and_concatenation(
            t in prop::collection::vec(0.0f64..1.0, 8),
            p in prop::collection::vec(0.01f64..0.99, 8),
            rot in 0usize..8,
        ) {
            let mut tr = t.clone();
            let mut pr = p.clone();
            tr.rotate_left(rot);
            pr.rotate_left(rot);
            let whole = bce(&t, &p).unwrap();
            prop_assert!((whole - bce(&tr, &pr).unwrap()).abs() < 1e-12);
            let halves = 0.5 * (bce(&t[..4], &p[..4]).unwrap() + bce(&t[4..], &p[4..]).unwrap());
            prop_assert!((whole - halves).abs() < 1e-12);
        }

        #[test]
        fn cce_permutation_and_concatenation(
            logits in prop::collection::vec(-3.0f64..3.0, 28),
            labels in prop::collection::vec(0usize..7, 4),
            rot in 0usize..4,
        ) {
            let probs: Vec<f64> = logits.chunks(7).flat_map(|r| {
                let m = r.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |v| v / s)
            }).collect();
            let targets: Vec<f64> = labels.iter().flat_map(|&c| one_hot_row(c)).collect();
            let whole = cce(&targets, &probs).unwrap();
            let mut tr = targets.clone();
            let mut pr = probs.clone();
            tr.rotate_left(7 * rot);
            pr.rotate_left(7 * rot);
            prop_assert!((whole - cce(&tr, &pr).unwrap()).abs() < 1e-12);
            let halves = 0.5 * (cce(&targets[..14], &probs[..14]).unwrap() + cce(&targets[14..], &probs[14..]).unwrap());
            prop_assert!((whole - halves).abs() < 1e-12);
        }
    }
}

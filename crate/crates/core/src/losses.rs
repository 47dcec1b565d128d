//! Loss family: cross-entropy, focal loss, noise-suppression focal loss,
//! soft dice, the weighted combination, and the training-phase switch rule.
//!
//! All losses operate on `p_t`, the predicted probability of each pixel's
//! ground-truth class. The noise-suppression variant replaces the focal
//! modulating factor `(1-p)^gamma` with `((1-eps)^gamma / eps^beta) * p^beta`
//! below the threshold `eps`, damping gradients from confidently-wrong pixels
//! that are likely mislabeled. The two branches agree at `p = eps`; the
//! gradient at the kink takes the upper (focal) branch via a `p < eps` mask.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Probability floor applied before every logarithm.
pub const PT_FLOOR: f64 = 1e-7;

/// Active classification-loss branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Fl,
    Nsfl,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Fl => "FL",
            Phase::Nsfl => "NSFL",
        }
    }
}

impl core::fmt::Display for Phase {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of the loss family.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LossConfig {
    /// Focal exponent, >= 0.
    pub gamma: f64,
    /// Suppression exponent, in [0, 1].
    pub beta: f64,
    /// Piecewise threshold, in (0, 1).
    pub epsilon: f64,
    /// Mix weight between the classification term and dice, in [0, 1].
    pub lambda: f64,
    /// Per-class pixel weights for the classification term.
    pub class_weights: Vec<f64>,
    /// Epoch-mean p_t level that activates the noise-suppression branch.
    pub switch_threshold: f64,
    /// Soft dice smoothing constant.
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            beta: 0.5,
            epsilon: 0.2,
            lambda: 0.5,
            // background, organ, tumor; the tumor upweight is a local choice
            class_weights: alloc::vec![1.0, 1.0, 2.0],
            switch_threshold: 0.5,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta must be in [0,1], got {}", self.beta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be in (0,1), got {}",
                self.epsilon
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be in [0,1], got {}",
                self.lambda
            )));
        }
        if self.class_weights.is_empty() || self.class_weights.iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidConfig("class_weights must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.switch_threshold) {
            return Err(Error::InvalidConfig(format!(
                "switch_threshold must be in [0,1], got {}",
                self.switch_threshold
            )));
        }
        if self.dice_smooth < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "dice_smooth must be >= 0, got {}",
                self.dice_smooth
            )));
        }
        Ok(())
    }
}

fn check_non_empty<T: Scalar>(tape: &Tape<T>, pt: TensorId, op: &'static str) -> Result<()> {
    if tape.value(pt).numel() == 0 {
        return Err(Error::EmptyInput { op });
    }
    Ok(())
}

fn ce_map<T: Scalar>(tape: &mut Tape<T>, pt: TensorId) -> Result<TensorId> {
    let c = tape.clamp_min(pt, T::from_f64(PT_FLOOR))?;
    let l = tape.log(c)?;
    tape.neg(l)
}

/// Mean over pixels of `-log(p_t)`.
pub fn ce_loss<T: Scalar>(tape: &mut Tape<T>, pt: TensorId) -> Result<TensorId> {
    check_non_empty(tape, pt, "ce_loss")?;
    let m = ce_map(tape, pt)?;
    tape.reduce_mean(m)
}

fn focal_map<T: Scalar>(tape: &mut Tape<T>, pt: TensorId, gamma: f64) -> Result<TensorId> {
    let c = tape.clamp_min(pt, T::from_f64(PT_FLOOR))?;
    let l = tape.log(c)?;
    let neg_l = tape.neg(l)?;
    let om = tape.rsub_scalar(c, T::ONE)?;
    let factor = tape.pow_scalar(om, T::from_f64(gamma))?;
    tape.mul(factor, neg_l)
}

/// Mean over pixels of `-(1 - p_t)^gamma * log(p_t)`.
pub fn focal_loss<T: Scalar>(tape: &mut Tape<T>, pt: TensorId, gamma: f64) -> Result<TensorId> {
    check_non_empty(tape, pt, "focal_loss")?;
    let m = focal_map(tape, pt, gamma)?;
    tape.reduce_mean(m)
}

fn nsfl_map<T: Scalar>(
    tape: &mut Tape<T>,
    pt: TensorId,
    gamma: f64,
    beta: f64,
    epsilon: f64,
) -> Result<TensorId> {
    // branch selector from forward values; constant, so the gradient at the
    // kink p_t == epsilon follows the upper (focal) branch
    let below: Vec<T> = tape
        .data(pt)
        .iter()
        .map(|&p| {
            if p.to_f64() < epsilon {
                T::ONE
            } else {
                T::ZERO
            }
        })
        .collect();
    let shape = tape.shape(pt).to_vec();
    let below = tape.constant(Tensor::from_vec(shape, below)?);
    let above = tape.rsub_scalar(below, T::ONE)?;

    let c = tape.clamp_min(pt, T::from_f64(PT_FLOOR))?;
    let l = tape.log(c)?;
    let neg_l = tape.neg(l)?;

    let om = tape.rsub_scalar(c, T::ONE)?;
    let upper_factor = tape.pow_scalar(om, T::from_f64(gamma))?;
    let upper = tape.mul(upper_factor, neg_l)?;

    let scale = libm::pow(1.0 - epsilon, gamma) / libm::pow(epsilon, beta);
    let pb = tape.pow_scalar(c, T::from_f64(beta))?;
    let lower_unscaled = tape.mul(pb, neg_l)?;
    let lower = tape.mul_scalar(lower_unscaled, T::from_f64(scale))?;

    let lo = tape.mul(lower, below)?;
    let hi = tape.mul(upper, above)?;
    tape.add(lo, hi)
}

/// Mean over pixels of the piecewise noise-suppression focal loss.
pub fn nsfl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pt: TensorId,
    gamma: f64,
    beta: f64,
    epsilon: f64,
) -> Result<TensorId> {
    check_non_empty(tape, pt, "nsfl_loss")?;
    let m = nsfl_map(tape, pt, gamma, beta, epsilon)?;
    tape.reduce_mean(m)
}

/// Soft dice over foreground classes:
/// `1 - mean_k (2*sum(p_k*g_k) + s) / (sum(p_k) + sum(g_k) + s)`.
pub fn dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: TensorId,
    labels: &[u8],
    smooth: f64,
) -> Result<TensorId> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeExpected {
            op: "dice_loss",
            expected: alloc::vec![0, 0, 0, 0],
            got: shape,
        });
    }
    let (b, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if k < 2 {
        return Err(Error::InvalidConfig(
            "dice_loss needs at least one foreground class".into(),
        ));
    }
    if labels.len() != b * hw {
        return Err(Error::ShapeExpected {
            op: "dice_loss",
            expected: alloc::vec![b, shape[2], shape[3]],
            got: alloc::vec![labels.len()],
        });
    }
    if let Some(index) = labels.iter().position(|l| (*l as usize) >= k) {
        return Err(Error::LabelOutOfRange {
            index,
            label: labels[index],
            num_classes: k,
        });
    }
    let s = T::from_f64(smooth);
    let mut acc: Option<TensorId> = None;
    for class in 1..k {
        let pk = tape.slice_channels(probs, class, 1)?;
        let mut onehot = Tensor::zeros(alloc::vec![b, 1, shape[2], shape[3]]);
        let mut gsum = 0.0f64;
        for (i, l) in labels.iter().enumerate() {
            if *l as usize == class {
                onehot.data_mut()[i] = T::ONE;
                gsum += 1.0;
            }
        }
        let gk = tape.constant(onehot);
        let pg = tape.mul(pk, gk)?;
        let inter = tape.reduce_sum(pg)?;
        let psum = tape.reduce_sum(pk)?;
        let num = tape.mul_scalar(inter, T::from_f64(2.0))?;
        let num = tape.add_scalar(num, s)?;
        let den = tape.add_scalar(psum, T::from_f64(gsum) + s)?;
        let dice = tape.div(num, den)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, dice)?,
            None => dice,
        });
    }
    let mean = tape.div_scalar(acc.expect("k >= 2"), T::from_f64((k - 1) as f64))?;
    tape.rsub_scalar(mean, T::ONE)
}

/// Weighted mean of a per-pixel map, with weights looked up per ground-truth
/// class and normalized by the total weight.
fn weighted_pixel_mean<T: Scalar>(
    tape: &mut Tape<T>,
    map: TensorId,
    labels: &[u8],
    class_weights: &[f64],
) -> Result<TensorId> {
    let shape = tape.shape(map).to_vec();
    let mut weights = Tensor::zeros(shape);
    let mut total = 0.0f64;
    for (i, l) in labels.iter().enumerate() {
        let w = class_weights
            .get(*l as usize)
            .copied()
            .ok_or(Error::LabelOutOfRange {
                index: i,
                label: *l,
                num_classes: class_weights.len(),
            })?;
        weights.data_mut()[i] = T::from_f64(w);
        total += w;
    }
    let w = tape.constant(weights);
    let weighted = tape.mul(map, w)?;
    let sum = tape.reduce_sum(weighted)?;
    tape.div_scalar(sum, T::from_f64(total))
}

/// Combined objective: `lambda * L_cls + (1 - lambda) * L_dice`, where the
/// classification term is the class-weighted focal loss before the switch and
/// the class-weighted noise-suppression focal loss after.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: TensorId,
    labels: &[u8],
    cfg: &LossConfig,
    phase: Phase,
) -> Result<TensorId> {
    cfg.validate()?;
    let cls = if cfg.lambda > 0.0 {
        let pt = tape.select_class(probs, labels)?;
        check_non_empty(tape, pt, "combined_loss")?;
        let map = match phase {
            Phase::Fl => focal_map(tape, pt, cfg.gamma)?,
            Phase::Nsfl => nsfl_map(tape, pt, cfg.gamma, cfg.beta, cfg.epsilon)?,
        };
        Some(weighted_pixel_mean(tape, map, labels, &cfg.class_weights)?)
    } else {
        None
    };
    let dice = if cfg.lambda < 1.0 {
        Some(dice_loss(tape, probs, labels, cfg.dice_smooth)?)
    } else {
        None
    };
    match (cls, dice) {
        (Some(c), None) => Ok(c),
        (None, Some(d)) => Ok(d),
        (Some(c), Some(d)) => {
            let wc = tape.mul_scalar(c, T::from_f64(cfg.lambda))?;
            let wd = tape.mul_scalar(d, T::from_f64(1.0 - cfg.lambda))?;
            tape.add(wc, wd)
        }
        (None, None) => unreachable!("lambda is in [0,1]"),
    }
}

/// Phase decided from the history of per-epoch mean p_t: latches to the
/// noise-suppression branch once any epoch mean reaches `tau` and never
/// switches back.
pub fn switch_scheduler(history: &[f64], tau: f64) -> Phase {
    if history.iter().any(|m| *m >= tau) {
        Phase::Nsfl
    } else {
        Phase::Fl
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec;
    use rand::Rng;

    fn pt_tensor(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![1, 1, values.len()], values.to_vec()).unwrap()
    }

    // direct scalar formulas, independent of the tape path
    fn fl_scalar(p: f64, gamma: f64) -> f64 {
        let c = p.max(PT_FLOOR);
        -(1.0 - c).powf(gamma) * c.ln()
    }

    fn nsfl_scalar(p: f64, gamma: f64, beta: f64, eps: f64) -> f64 {
        let c = p.max(PT_FLOOR);
        if p < eps {
            -((1.0 - eps).powf(gamma) / eps.powf(beta)) * c.powf(beta) * c.ln()
        } else {
            -(1.0 - c).powf(gamma) * c.ln()
        }
    }

    #[test]
    fn ce_of_ones_is_zero_and_exp_inverse_is_one() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.leaf(pt_tensor(&[1.0, 1.0, 1.0]), false);
        let l = ce_loss(&mut tape, ones).unwrap();
        assert_eq!(tape.data(l)[0], 0.0);

        let e = tape.leaf(pt_tensor(&[(-1.0f64).exp(); 4]), false);
        let l = ce_loss(&mut tape, e).unwrap();
        assert!((tape.data(l)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_scalar_oracle() {
        let mut r = rng::seeded(5, 0);
        let ps: Vec<f64> = (0..64).map(|_| r.random::<f64>() * 0.98 + 0.01).collect();
        let expected: f64 = ps.iter().map(|p| -p.max(PT_FLOOR).ln()).sum::<f64>() / 64.0;
        let mut tape = Tape::<f64>::new();
        let pt = tape.leaf(pt_tensor(&ps), false);
        let l = ce_loss(&mut tape, pt).unwrap();
        assert!((tape.data(l)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let empty = tape.leaf(Tensor::zeros(vec![1, 1, 0]), false);
        assert!(matches!(
            ce_loss(&mut tape, empty),
            Err(Error::EmptyInput { op: "ce_loss" })
        ));
    }

    #[test]
    fn focal_gamma_zero_equals_ce_exactly() {
        let mut r = rng::seeded(6, 0);
        let ps: Vec<f64> = (0..32).map(|_| r.random::<f64>() * 0.9 + 0.05).collect();
        let mut tape = Tape::<f64>::new();
        let pt = tape.leaf(pt_tensor(&ps), false);
        let ce = ce_loss(&mut tape, pt).unwrap();
        let fl = focal_loss(&mut tape, pt, 0.0).unwrap();
        assert_eq!(tape.data(ce)[0].to_bits(), tape.data(fl)[0].to_bits());
    }

    #[test]
    fn focal_analytic_point() {
        // gamma=2, p=0.5 -> 0.25 * log 2
        let mut tape = Tape::<f64>::new();
        let pt = tape.leaf(pt_tensor(&[0.5]), false);
        let l = focal_loss(&mut tape, pt, 2.0).unwrap();
        assert!((tape.data(l)[0] - 0.25 * core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn nsfl_is_continuous_at_epsilon() {
        for gamma in [0.0, 1.0, 2.0] {
            for beta in [0.0, 0.5, 1.0] {
                for eps in [0.1, 0.2, 0.5] {
                    let upper = -(1.0f64 - eps).powf(gamma) * eps.ln();
                    let lower = -((1.0f64 - eps).powf(gamma) / eps.powf(beta))
                        * eps.powf(beta)
                        * eps.ln();
                    assert!(
                        (upper - lower).abs() <= 1e-12,
                        "g{gamma} b{beta} e{eps}: {upper} vs {lower}"
                    );
                    // tape evaluation straddling the threshold stays close to both
                    let mut tape = Tape::<f64>::new();
                    let pt = tape.leaf(pt_tensor(&[eps]), false);
                    let l = nsfl_loss(&mut tape, pt, gamma, beta, eps).unwrap();
                    assert!((tape.data(l)[0] - upper).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn nsfl_below_focal_under_threshold() {
        for p in [0.01, 0.05, 0.1, 0.15] {
            let (gamma, beta, eps) = (2.0, 0.5, 0.2);
            assert!(nsfl_scalar(p, gamma, beta, eps) < fl_scalar(p, gamma));
        }
        // strictness holds across the grid for beta in (0, 1]
        for gamma in [0.0, 1.0, 2.0] {
            for beta in [0.5, 1.0] {
                for eps in [0.1, 0.2, 0.5] {
                    for i in 1..100 {
                        let p = eps * i as f64 / 100.0;
                        assert!(
                            nsfl_scalar(p, gamma, beta, eps) < fl_scalar(p, gamma),
                            "p{p} g{gamma} b{beta} e{eps}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn beta_zero_truncates_the_factor() {
        let (gamma, eps) = (2.0, 0.2);
        let scale = (1.0f64 - eps).powf(gamma);
        for p in [0.01f64, 0.1, 0.19] {
            let expect = scale * -(p.max(PT_FLOOR)).ln();
            assert!((nsfl_scalar(p, gamma, 0.0, eps) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn nsfl_tape_matches_scalar_oracle() {
        let mut r = rng::seeded(7, 0);
        let ps: Vec<f64> = (0..50).map(|_| r.random::<f64>() * 0.98 + 0.01).collect();
        let (gamma, beta, eps) = (2.0, 0.5, 0.2);
        let expected: f64 =
            ps.iter().map(|&p| nsfl_scalar(p, gamma, beta, eps)).sum::<f64>() / 50.0;
        let mut tape = Tape::<f64>::new();
        let pt = tape.leaf(pt_tensor(&ps), false);
        let l = nsfl_loss(&mut tape, pt, gamma, beta, eps).unwrap();
        assert!((tape.data(l)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn nsfl_suppresses_gradient_at_tiny_pt() {
        let p = 1e-6;
        let grad_of = |nsfl: bool| {
            let mut tape = Tape::<f64>::new();
            let pt = tape.leaf(pt_tensor(&[p]), true);
            let l = if nsfl {
                nsfl_loss(&mut tape, pt, 2.0, 0.5, 0.2).unwrap()
            } else {
                focal_loss(&mut tape, pt, 2.0).unwrap()
            };
            tape.backward(l).unwrap();
            tape.grad(pt).unwrap()[0].abs()
        };
        assert!(grad_of(true) < grad_of(false));
    }

    fn softmaxed(tape: &mut Tape<f64>, logits: Tensor<f64>) -> TensorId {
        let l = tape.leaf(logits, false);
        tape.softmax_channels(l).unwrap()
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        // one-hot probabilities equal to labels -> near-zero loss
        let labels = [0u8, 1, 2, 1];
        let mut logits = Tensor::zeros(vec![1, 3, 1, 4]);
        for (i, &l) in labels.iter().enumerate() {
            logits.data_mut()[l as usize * 4 + i] = 60.0;
        }
        let mut tape = Tape::<f64>::new();
        let probs = softmaxed(&mut tape, logits);
        let loss = dice_loss(&mut tape, probs, &labels, 1.0).unwrap();
        // smooth-corrected bound: loss <= s / (2*|class| + s) per class
        assert!(tape.data(loss)[0] < 1.0 / 3.0);
        assert!(tape.data(loss)[0] >= 0.0);

        // one-hot disjoint from labels -> per-class terms vanish
        let wrong = [1u8, 2, 0, 2];
        let mut logits = Tensor::zeros(vec![1, 3, 1, 4]);
        for (i, &l) in wrong.iter().enumerate() {
            logits.data_mut()[l as usize * 4 + i] = 60.0;
        }
        let probs = softmaxed(&mut tape, logits);
        let loss = dice_loss(&mut tape, probs, &labels, 1e-4).unwrap();
        assert!(tape.data(loss)[0] > 0.95);
    }

    #[test]
    fn dice_matches_direct_summation() {
        let mut r = rng::seeded(8, 0);
        let (b, k, h, w) = (2, 3, 4, 4);
        let logits = Tensor::from_vec(
            vec![b, k, h, w],
            (0..b * k * h * w).map(|_| r.random::<f64>() * 4.0 - 2.0).collect(),
        )
        .unwrap();
        let labels: Vec<u8> = (0..b * h * w).map(|_| (r.random::<u32>() % 3) as u8).collect();
        let mut tape = Tape::<f64>::new();
        let probs = softmaxed(&mut tape, logits);
        let loss = dice_loss(&mut tape, probs, &labels, 1.0).unwrap();
        // direct summation oracle
        let pd = tape.data(probs);
        let hw = h * w;
        let mut total = 0.0;
        for class in 1..k {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for bi in 0..b {
                for pos in 0..hw {
                    let p = pd[bi * k * hw + class * hw + pos];
                    psum += p;
                    if labels[bi * hw + pos] as usize == class {
                        inter += p;
                        gsum += 1.0;
                    }
                }
            }
            total += (2.0 * inter + 1.0) / (psum + gsum + 1.0);
        }
        let expected = 1.0 - total / (k - 1) as f64;
        assert!((tape.data(loss)[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn dice_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let probs = tape.leaf(Tensor::full(vec![1, 2, 1, 2], 0.5), false);
        assert!(matches!(
            dice_loss(&mut tape, probs, &[0, 3], 1.0),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn combined_endpoints_and_midpoint() {
        let mut r = rng::seeded(9, 0);
        let logits = Tensor::from_vec(
            vec![1, 3, 2, 2],
            (0..12).map(|_| r.random::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap();
        let labels = [0u8, 1, 2, 1];
        let run = |lambda: f64| {
            let mut tape = Tape::<f64>::new();
            let probs = softmaxed(&mut tape, logits.clone());
            let cfg = LossConfig {
                lambda,
                ..LossConfig::default()
            };
            let l = combined_loss(&mut tape, probs, &labels, &cfg, Phase::Nsfl).unwrap();
            tape.data(l)[0]
        };
        let pure_cls = run(1.0);
        let pure_dice = run(0.0);
        let mid = run(0.5);
        assert!((mid - 0.5 * (pure_cls + pure_dice)).abs() < 1e-12);

        // lambda = 0 equals the dice loss alone
        let mut tape = Tape::<f64>::new();
        let probs = softmaxed(&mut tape, logits.clone());
        let d = dice_loss(&mut tape, probs, &labels, 1.0).unwrap();
        assert_eq!(tape.data(d)[0], pure_dice);
    }

    #[test]
    fn combined_fl_phase_uses_plain_focal() {
        let mut r = rng::seeded(10, 0);
        let logits = Tensor::from_vec(
            vec![1, 3, 2, 2],
            (0..12).map(|_| r.random::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap();
        let labels = [0u8, 1, 2, 1];
        let cfg = LossConfig {
            lambda: 1.0,
            class_weights: vec![1.0, 1.0, 1.0],
            ..LossConfig::default()
        };
        let mut tape = Tape::<f64>::new();
        let probs = softmaxed(&mut tape, logits.clone());
        let combined = combined_loss(&mut tape, probs, &labels, &cfg, Phase::Fl).unwrap();
        let pt = tape.select_class(probs, &labels).unwrap();
        let fl = focal_loss(&mut tape, pt, cfg.gamma).unwrap();
        assert!((tape.data(combined)[0] - tape.data(fl)[0]).abs() < 1e-12);
    }

    #[test]
    fn scheduler_latches() {
        let means = [0.2, 0.4, 0.6, 0.3];
        let phases: Vec<Phase> = (1..=means.len())
            .map(|i| switch_scheduler(&means[..i], 0.5))
            .collect();
        assert_eq!(phases, vec![Phase::Fl, Phase::Fl, Phase::Nsfl, Phase::Nsfl]);
        // tau = 0 switches immediately
        assert_eq!(switch_scheduler(&[0.0], 0.0), Phase::Nsfl);
        // monotone: once NSFL, adding any further history keeps NSFL
        let mut r = rng::seeded(11, 0);
        let mut hist = vec![0.9];
        for _ in 0..20 {
            hist.push(r.random::<f64>());
            assert_eq!(switch_scheduler(&hist, 0.5), Phase::Nsfl);
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = LossConfig::default();
        cfg.beta = 1.5;
        assert!(cfg.validate().is_err());
        cfg = LossConfig::default();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
        cfg = LossConfig::default();
        cfg.lambda = -0.1;
        assert!(cfg.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}

//! Differentiable losses: soft Dice, patch-wise 3D SSIM, and the frequency
//! consistency loss (L1 between 3D DCTs of two logit fields).
//!
//! All three are built from tape ops, so their gradients come from the
//! reverse sweep and are covered by the finite-difference suite. The SSIM
//! graph lifts the clean-side statistics onto the tape as constant
//! subgraphs so both sides go through identical op sequences; that makes
//! ssim(x, x) evaluate to exactly 1 (and the loss to exactly 0).

use crate::autodiff::{Tape, Var};
use crate::dct::DctPlan;
use crate::tensor::Tensor;
use crate::volume::{self, LabelField, Volume};

/// Smoothing term of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;
/// SSIM stability constants for data in [0, 1].
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Default SSIM window side; shrinks to the patch side when larger.
pub const SSIM_WINDOW: usize = 7;

/// A scalar loss node plus a per-component breakdown for reporting
/// (per class for Dice and the frequency loss, per patch for SSIM).
pub struct LossValue<'t> {
    pub node: Var<'t>,
    pub breakdown: Vec<f64>,
}

impl<'t> LossValue<'t> {
    pub fn value(&self) -> f64 {
        self.node.item()
    }
}

/// Soft Dice loss: `1 - mean_c (2 * sum(p_c * g_c) + s) / (sum p_c + sum g_c + s)`
/// over softmax probabilities p and the one-hot ground truth g, with
/// uniform class weights. Stays in [0, 1].
pub fn dice_loss<'t>(tape: &'t Tape, logits: Var<'t>, labels: &LabelField) -> LossValue<'t> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 4, "dice_loss expects (C, H, W, D) logits");
    assert_eq!(shape[0], labels.num_class(), "class count mismatch");
    assert_eq!(&shape[1..], &labels.extent()[..], "spatial extent mismatch");
    let probs = logits.softmax_class();
    let g = tape.constant(labels.one_hot());
    let inter = (probs * g).class_sums();
    let psum = probs.class_sums();
    let gsum = g.class_sums();
    let num = inter.mul_scalar(2.0).add_scalar(DICE_SMOOTH);
    let den = (psum + gsum).add_scalar(DICE_SMOOTH);
    let dice_per_class = num / den;
    let loss = dice_per_class.mean().neg().add_scalar(1.0);
    LossValue { node: loss, breakdown: dice_per_class.value().into_data() }
}

/// SSIM of one patch pair with a uniform cubic window (valid extent).
/// `clean` enters as a constant; gradients flow through `adv` only.
fn ssim_patch<'t>(tape: &'t Tape, clean: &Tensor, adv: Var<'t>, window: usize) -> Var<'t> {
    assert_eq!(clean.shape(), &adv.shape()[..], "ssim patch shape mismatch");
    let x = tape.constant(clean.clone());
    let y = adv;
    let mu_x = x.box_mean(window);
    let mu_y = y.box_mean(window);
    let x2m = (x * x).box_mean(window);
    let y2m = (y * y).box_mean(window);
    let xym = (x * y).box_mean(window);
    let var_x = x2m - mu_x * mu_x;
    let var_y = y2m - mu_y * mu_y;
    let cov = xym - mu_x * mu_y;
    let num = (mu_x * mu_y).mul_scalar(2.0).add_scalar(SSIM_C1)
        * cov.mul_scalar(2.0).add_scalar(SSIM_C2);
    let den = (mu_x * mu_x + mu_y * mu_y).add_scalar(SSIM_C1)
        * (var_x + var_y).add_scalar(SSIM_C2);
    (num / den).mean()
}

/// Structural similarity loss over a patch tiling:
/// `1 - (1/n) * sum_i SSIM(x_i, x'_i)`.
///
/// Returns the per-patch SSIM values as the breakdown. If the requested
/// window exceeds the patch side it shrinks to the patch (callers can
/// detect this by comparing `effective_ssim_window` with their request).
pub fn ssim_loss<'t>(
    tape: &'t Tape,
    clean_patches: &[Tensor],
    adv_patches: &[Var<'t>],
    window: usize,
) -> LossValue<'t> {
    assert_eq!(clean_patches.len(), adv_patches.len());
    assert!(!clean_patches.is_empty(), "ssim_loss needs at least one patch");
    let side = clean_patches[0].shape()[0];
    let w = effective_ssim_window(window, side);
    let mut acc: Option<Var<'t>> = None;
    let mut breakdown = Vec::with_capacity(clean_patches.len());
    for (clean, &adv) in clean_patches.iter().zip(adv_patches) {
        let s = ssim_patch(tape, clean, adv, w);
        breakdown.push(s.item());
        acc = Some(match acc {
            Some(a) => a + s,
            None => s,
        });
    }
    let mean = acc.unwrap().mul_scalar(1.0 / clean_patches.len() as f64);
    let loss = mean.neg().add_scalar(1.0);
    LossValue { node: loss, breakdown }
}

pub fn effective_ssim_window(window: usize, patch_side: usize) -> usize {
    window.min(patch_side).max(1)
}

/// Mean SSIM between two volumes over a cubic patch tiling, for reporting.
/// Runs the same graph as `ssim_loss` on a scratch tape.
pub struct SsimEval {
    pub mean: f64,
    pub per_patch: Vec<f64>,
    pub window_used: usize,
    pub window_shrunk: bool,
}

pub fn mean_ssim(x: &Volume, y: &Volume, patch_side: usize, window: usize) -> SsimEval {
    assert_eq!(x.extent(), y.extent(), "mean_ssim extent mismatch");
    let (xp, grid) = volume::split(x, (patch_side, patch_side, patch_side))
        .expect("patch side validated by caller");
    let yp = volume::split_tensor(y.tensor(), &grid);
    let w = effective_ssim_window(window, grid.side());
    let tape = Tape::new(crate::autodiff::Precision::F64);
    let adv: Vec<Var> = yp.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = ssim_loss(&tape, &xp, &adv, window);
    let mean = 1.0 - loss.value();
    SsimEval { mean, per_patch: loss.breakdown, window_used: w, window_shrunk: w < window }
}

/// Frequency consistency loss: L1 distance between the 3D DCTs of two
/// logit fields, the DCT applied per class channel over the full spatial
/// extent. Breakdown is the per-class L1 contribution.
pub fn freq_consistency_loss<'t>(logits_a: Var<'t>, logits_b: Var<'t>) -> LossValue<'t> {
    let shape = logits_a.shape();
    assert_eq!(shape, logits_b.shape(), "freq loss shape mismatch");
    assert_eq!(shape.len(), 4, "freq loss expects (C, H, W, D) logits");
    let plan = DctPlan::for_shape(&shape[1..]);
    let diff_abs = (logits_a.dct3(&plan) - logits_b.dct3(&plan)).abs();
    let loss = diff_abs.sum();
    let per_class = diff_abs.class_sums().value().into_data();
    LossValue { node: loss, breakdown: per_class }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;
    use crate::rng::Rng;

    fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.next_f64()).collect())
    }

    fn balanced_labels_2class() -> LabelField {
        // 2x2x2 grid, half class 0, half class 1
        LabelField::new(vec![0, 0, 0, 0, 1, 1, 1, 1], [2, 2, 2], 2).unwrap()
    }

    #[test]
    fn dice_perfect_prediction_near_zero() {
        let labels = balanced_labels_2class();
        let oh = labels.one_hot();
        // logits with a large margin toward the true class
        let logits_t = oh.map(|v| v * 20.0);
        let tape = Tape::new(Precision::F64);
        let logits = tape.constant(logits_t);
        let loss = dice_loss(&tape, logits, &labels);
        assert!(loss.value() < 1e-3, "perfect overlap loss = {}", loss.value());
    }

    #[test]
    fn dice_uniform_prediction_matches_hand_oracle() {
        let labels = balanced_labels_2class();
        let tape = Tape::new(Precision::F64);
        let logits = tape.constant(Tensor::zeros(&[2, 2, 2, 2]));
        let loss = dice_loss(&tape, logits, &labels);
        // uniform p = 0.5: per class inter = 0.5 * 4, psum = 4, gsum = 4
        let dice = (2.0 * 2.0 + DICE_SMOOTH) / (8.0 + DICE_SMOOTH);
        let expect = 1.0 - dice;
        assert!((loss.value() - expect).abs() < 1e-12);
    }

    #[test]
    fn dice_disjoint_prediction_near_one() {
        let labels = balanced_labels_2class();
        // flip every label for the prediction
        let flipped = LabelField::new(vec![1, 1, 1, 1, 0, 0, 0, 0], [2, 2, 2], 2).unwrap();
        let logits_t = flipped.one_hot().map(|v| v * 30.0);
        let tape = Tape::new(Precision::F64);
        let logits = tape.constant(logits_t);
        let loss = dice_loss(&tape, logits, &labels);
        assert!(loss.value() > 0.999, "disjoint loss = {}", loss.value());
    }

    #[test]
    fn dice_invariant_under_consistent_class_relabel() {
        let mut rng = Rng::new(40);
        let logits_t = random_tensor(&mut rng, &[3, 2, 2, 2]);
        let classes: Vec<u8> = (0..8).map(|_| rng.below(3) as u8).collect();
        let labels = LabelField::new(classes.clone(), [2, 2, 2], 3).unwrap();

        // permutation 0->2, 1->0, 2->1 applied to both logits and labels
        let perm = [2usize, 0, 1];
        let mut permuted_logits = Tensor::zeros(&[3, 2, 2, 2]);
        for c in 0..3 {
            for j in 0..8 {
                let v = logits_t.data()[c * 8 + j];
                permuted_logits.data_mut()[perm[c] * 8 + j] = v;
            }
        }
        let permuted_classes: Vec<u8> = classes.iter().map(|&c| perm[c as usize] as u8).collect();
        let permuted_labels = LabelField::new(permuted_classes, [2, 2, 2], 3).unwrap();

        let tape = Tape::new(Precision::F64);
        let a = dice_loss(&tape, tape.constant(logits_t), &labels);
        let b = dice_loss(&tape, tape.constant(permuted_logits), &permuted_labels);
        assert!((a.value() - b.value()).abs() < 1e-12);
    }

    #[test]
    fn ssim_self_similarity_is_exactly_zero_loss() {
        let mut rng = Rng::new(41);
        let x = Volume::from_tensor(random_tensor(&mut rng, &[8, 8, 8])).unwrap();
        let (xp, _grid) = volume::split(&x, (4, 4, 4)).unwrap();
        let tape = Tape::new(Precision::F64);
        let adv: Vec<Var> = xp.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = ssim_loss(&tape, &xp, &adv, SSIM_WINDOW);
        assert_eq!(loss.value(), 0.0);
        for &s in &loss.breakdown {
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn ssim_symmetric_in_arguments() {
        let mut rng = Rng::new(42);
        let x = Volume::from_tensor(random_tensor(&mut rng, &[8, 8, 8])).unwrap();
        let y = Volume::from_tensor(random_tensor(&mut rng, &[8, 8, 8])).unwrap();
        let a = mean_ssim(&x, &y, 8, SSIM_WINDOW);
        let b = mean_ssim(&y, &x, 8, SSIM_WINDOW);
        assert!((a.mean - b.mean).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_texture_is_negative() {
        // x' = 1 - x on a textured volume: contrast matches, structure is
        // anti-correlated, so SSIM goes negative and the loss exceeds 1.
        let mut rng = Rng::new(43);
        let x = Volume::from_tensor(random_tensor(&mut rng, &[12, 12, 12])).unwrap();
        let inv = Volume::from_tensor(x.tensor().map(|v| 1.0 - v)).unwrap();
        let eval = mean_ssim(&x, &inv, 12, SSIM_WINDOW);
        assert!(eval.mean < 0.0, "mean ssim = {}", eval.mean);
        let loss = 1.0 - eval.mean;
        assert!(loss > 1.0);
    }

    #[test]
    fn ssim_window_shrinks_to_patch() {
        let mut rng = Rng::new(44);
        let x = Volume::from_tensor(random_tensor(&mut rng, &[4, 4, 4])).unwrap();
        let eval = mean_ssim(&x, &x, 4, SSIM_WINDOW);
        assert_eq!(eval.window_used, 4);
        assert!(eval.window_shrunk);
        assert_eq!(eval.mean, 1.0);
    }

    #[test]
    fn freq_loss_identical_logits_is_zero() {
        let mut rng = Rng::new(45);
        let t = random_tensor(&mut rng, &[3, 4, 4, 4]);
        let tape = Tape::new(Precision::F64);
        let a = tape.constant(t.clone());
        let b = tape.constant(t);
        let loss = freq_consistency_loss(a, b);
        assert_eq!(loss.value(), 0.0);
    }

    #[test]
    fn freq_loss_constant_offset_matches_dc_formula() {
        // logits differing by constant c per voxel: only the DC coefficient
        // moves, by c * sqrt(H*W*D), in each of the C channels.
        let mut rng = Rng::new(46);
        let (c_classes, h, w, d) = (3usize, 4usize, 5usize, 6usize);
        let t = random_tensor(&mut rng, &[c_classes, h, w, d]);
        let offset = 0.37;
        let shifted = t.map(|v| v + offset);
        let tape = Tape::new(Precision::F64);
        let a = tape.constant(t);
        let b = tape.constant(shifted);
        let loss = freq_consistency_loss(a, b);
        let expect = offset * ((h * w * d) as f64).sqrt() * c_classes as f64;
        assert!(
            (loss.value() - expect).abs() < 1e-9,
            "L1 = {}, expected {expect}",
            loss.value()
        );
    }

    #[test]
    fn freq_loss_triangle_inequality() {
        let mut rng = Rng::new(47);
        let shape = [2usize, 3, 3, 3];
        let ta = random_tensor(&mut rng, &shape);
        let tb = random_tensor(&mut rng, &shape);
        let tc = random_tensor(&mut rng, &shape);
        let tape = Tape::new(Precision::F64);
        let (a, b, c) =
            (tape.constant(ta), tape.constant(tb), tape.constant(tc));
        let ab = freq_consistency_loss(a, b).value();
        let bc = freq_consistency_loss(b, c).value();
        let ac = freq_consistency_loss(a, c).value();
        assert!(ac <= ab + bc + 1e-12);
    }
}

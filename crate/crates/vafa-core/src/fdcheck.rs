//! Central finite-difference validation of every tape op and of the
//! composite objectives, against the analytic reverse-mode gradients.
//!
//! The finite-difference side only ever runs forward passes on freshly
//! built graphs, so it is independent of the backward rules it checks.
//! Ops with kinks (abs, relu, clamp) are sampled away from their
//! non-differentiable points; division-like ops keep denominators away
//! from zero.
//!
//! Rounding needs special handling: its true derivative is zero almost
//! everywhere, and the straight-through estimator intentionally reports 1.
//! Two checks pin it down. A symbolic check verifies that the gradient of
//! `round(c/q) * q` w.r.t. q equals `round(u) - u` exactly, which is what
//! the straight-through rule implies. And the full attack objective is
//! finite-difference-checked with the rounding node swapped for its
//! identity surrogate plus a constant half-step shift: the shift keeps the
//! objective genuinely dependent on q (a plain identity would cancel the
//! division exactly), while the surrogate's straight-through backward is
//! the true derivative of that forward, so the check exercises the entire
//! production graph around the rounding.

use crate::attacks::{fpm_coefficients, INTENSITY_SCALE};
use crate::autodiff::{Precision, Tape, Var};
use crate::dct::DctPlan;
use crate::losses::{dice_loss, freq_consistency_loss, ssim_loss};
use crate::model::SegModel;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::volume::{self, Volume};

/// Tolerance for primitive ops.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for composite objectives.
pub const COMPOSITE_TOL: f64 = 1e-3;

const FD_STEP: f64 = 1e-4;
const INSTANCES: usize = 20;
const MAX_COORDS: usize = 30;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub threshold: f64,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

/// Runs the whole suite (primitive ops, then composites).
pub fn check_all(seed: u64) -> Vec<CheckOutcome> {
    let mut out = check_primitives(seed);
    out.extend(check_composites(seed));
    out
}

type Builder<'a> = &'a dyn Fn(&Tape, &[Var]) -> usize;

/// Compares analytic and central finite-difference gradients of a scalar
/// graph w.r.t. input `wrt`, probing up to MAX_COORDS random coordinates.
fn fd_compare(
    inputs: &[Tensor],
    wrt: usize,
    build: Builder,
    rng: &mut Rng,
) -> f64 {
    let eval = |tensors: &[Tensor]| -> f64 {
        let tape = Tape::new(Precision::F64);
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let loss_idx = build(&tape, &vars);
        let _ = loss_idx;
        // builder returns the node index of the loss; re-wrap
        tape_value(&tape, loss_idx)
    };

    // analytic gradient
    let tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| if i == wrt { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let loss_idx = build(&tape, &vars);
    let loss = var_at(&tape, loss_idx);
    let analytic = tape.backward(loss, &[vars[wrt]]).pop().unwrap();

    let n = inputs[wrt].len();
    let coords: Vec<usize> = if n <= MAX_COORDS {
        (0..n).collect()
    } else {
        (0..MAX_COORDS).map(|_| rng.below(n)).collect()
    };

    let mut max_err: f64 = 0.0;
    let mut max_mag: f64 = 0.0;
    for &k in &coords {
        let mut plus = inputs.to_vec();
        plus[wrt].data_mut()[k] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[wrt].data_mut()[k] -= FD_STEP;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        let a = analytic.data()[k];
        max_err = max_err.max((fd - a).abs());
        max_mag = max_mag.max(fd.abs()).max(a.abs());
    }
    max_err / max_mag.max(1e-6)
}

// Var cannot be returned from the builder closure (lifetime ties to the
// tape), so builders hand back the node index instead.
fn var_at(tape: &Tape, idx: usize) -> Var<'_> {
    tape.var_from_index(idx)
}

fn tape_value(tape: &Tape, idx: usize) -> f64 {
    tape.var_from_index(idx).item()
}

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.uniform(lo, hi)).collect())
}

/// Values bounded away from zero (for kinked or division ops).
fn random_signed_away(rng: &mut Rng, shape: &[usize], min_abs: f64, max_abs: f64) -> Tensor {
    Tensor::from_vec(
        shape,
        (0..shape.iter().product())
            .map(|_| {
                let mag = rng.uniform(min_abs, max_abs);
                if rng.next_f64() < 0.5 {
                    -mag
                } else {
                    mag
                }
            })
            .collect(),
    )
}

struct Check {
    name: &'static str,
    threshold: f64,
    runner: Box<dyn Fn(&mut Rng) -> f64>,
}

fn op_checks() -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();
    let mut push = |name: &'static str, threshold: f64, runner: Box<dyn Fn(&mut Rng) -> f64>| {
        checks.push(Check { name, threshold, runner })
    };

    // generic pattern: loss = sum(op(inputs) * w) with w a random constant
    push(
        "add",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let shape = [3usize, 4];
            let inputs = vec![
                random(rng, &shape, -1.0, 1.0),
                random(rng, &shape, -1.0, 1.0),
                random(rng, &shape, -1.0, 1.0),
            ];
            let wrt = rng.below(2);
            fd_compare(&inputs, wrt, &|_, v| ((v[0] + v[1]) * v[2]).sum().index(), rng)
        }),
    );
    push(
        "sub",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let shape = [2usize, 5];
            let inputs = vec![
                random(rng, &shape, -1.0, 1.0),
                random(rng, &shape, -1.0, 1.0),
                random(rng, &shape, -1.0, 1.0),
            ];
            let wrt = rng.below(2);
            fd_compare(&inputs, wrt, &|_, v| ((v[0] - v[1]) * v[2]).sum().index(), rng)
        }),
    );
    push(
        "mul",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let shape = [4usize, 3];
            let inputs = vec![
                random(rng, &shape, -1.0, 1.0),
                random(rng, &shape, -1.0, 1.0),
                random(rng, &shape, -1.0, 1.0),
            ];
            let wrt = rng.below(2);
            fd_compare(&inputs, wrt, &|_, v| ((v[0] * v[1]) * v[2]).sum().index(), rng)
        }),
    );
    push(
        "div",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let shape = [3usize, 3];
            let inputs = vec![
                random(rng, &shape, -1.0, 1.0),
                random_signed_away(rng, &shape, 0.5, 1.5),
                random(rng, &shape, -1.0, 1.0),
            ];
            let wrt = rng.below(2);
            fd_compare(&inputs, wrt, &|_, v| ((v[0] / v[1]) * v[2]).sum().index(), rng)
        }),
    );
    push(
        "add_scalar/mul_scalar/neg",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let shape = [6usize];
            let inputs = vec![random(rng, &shape, -1.0, 1.0), random(rng, &shape, -1.0, 1.0)];
            fd_compare(
                &inputs,
                0,
                &|_, v| ((v[0].add_scalar(0.7).mul_scalar(-1.3).neg()) * v[1]).sum().index(),
                rng,
            )
        }),
    );
    push(
        "abs",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let shape = [8usize];
            let inputs = vec![
                random_signed_away(rng, &shape, 0.2, 1.0),
                random(rng, &shape, -1.0, 1.0),
            ];
            fd_compare(&inputs, 0, &|_, v| (v[0].abs() * v[1]).sum().index(), rng)
        }),
    );
    push(
        "relu",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let shape = [10usize];
            let inputs = vec![
                random_signed_away(rng, &shape, 0.2, 1.0),
                random(rng, &shape, -1.0, 1.0),
            ];
            fd_compare(&inputs, 0, &|_, v| (v[0].relu() * v[1]).sum().index(), rng)
        }),
    );
    push(
        "log",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let shape = [7usize];
            let inputs = vec![random(rng, &shape, 0.5, 2.0), random(rng, &shape, -1.0, 1.0)];
            fd_compare(&inputs, 0, &|_, v| (v[0].log() * v[1]).sum().index(), rng)
        }),
    );
    push(
        "mul_bcast",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let inputs = vec![
                random(rng, &[3, 4, 2], -1.0, 1.0),
                random(rng, &[3, 4], -1.0, 1.0),
                random(rng, &[3, 4, 2], -1.0, 1.0),
            ];
            let wrt = rng.below(2);
            fd_compare(&inputs, wrt, &|_, v| (v[0].mul_bcast(v[1]) * v[2]).sum().index(), rng)
        }),
    );
    push(
        "div_bcast",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let inputs = vec![
                random(rng, &[2, 3, 4], -1.0, 1.0),
                random_signed_away(rng, &[2, 3], 0.5, 1.5),
                random(rng, &[2, 3, 4], -1.0, 1.0),
            ];
            let wrt = rng.below(2);
            fd_compare(&inputs, wrt, &|_, v| (v[0].div_bcast(v[1]) * v[2]).sum().index(), rng)
        }),
    );
    push(
        "matmul",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let inputs = vec![
                random(rng, &[3, 4], -1.0, 1.0),
                random(rng, &[4, 2], -1.0, 1.0),
                random(rng, &[3, 2], -1.0, 1.0),
            ];
            let wrt = rng.below(2);
            fd_compare(&inputs, wrt, &|_, v| (v[0].matmul(v[1]) * v[2]).sum().index(), rng)
        }),
    );
    push(
        "conv3d",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let inputs = vec![
                random(rng, &[2, 4, 4, 4], -1.0, 1.0),
                random(rng, &[2, 2, 3, 3, 3], -0.5, 0.5),
                random(rng, &[2], -0.5, 0.5),
                random(rng, &[2, 4, 4, 4], -1.0, 1.0),
            ];
            let wrt = rng.below(3);
            fd_compare(
                &inputs,
                wrt,
                &|_, v| (v[0].conv3d(v[1], v[2]) * v[3]).sum().index(),
                rng,
            )
        }),
    );
    push(
        "softmax_class",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let inputs = vec![
                random(rng, &[3, 2, 2, 2], -2.0, 2.0),
                random(rng, &[3, 2, 2, 2], -1.0, 1.0),
            ];
            fd_compare(&inputs, 0, &|_, v| (v[0].softmax_class() * v[1]).sum().index(), rng)
        }),
    );
    push(
        "sum/mean",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let inputs = vec![random(rng, &[3, 5], -1.0, 1.0)];
            fd_compare(
                &inputs,
                0,
                &|_, v| (v[0].sum() + v[0].mean().mul_scalar(2.0)).index(),
                rng,
            )
        }),
    );
    push(
        "class_sums",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let inputs = vec![
                random(rng, &[3, 2, 2, 2], -1.0, 1.0),
                random(rng, &[3], -1.0, 1.0),
            ];
            fd_compare(&inputs, 0, &|_, v| (v[0].class_sums() * v[1]).sum().index(), rng)
        }),
    );
    push(
        "dct3/idct3",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let plan = DctPlan::for_shape(&[4]);
            let inputs = vec![
                random(rng, &[4, 4, 4], -1.0, 1.0),
                random(rng, &[4, 4, 4], -1.0, 1.0),
            ];
            let forward = rng.next_f64() < 0.5;
            let p = plan.clone();
            fd_compare(
                &inputs,
                0,
                &move |_, v| {
                    let t = if forward { v[0].dct3(&p) } else { v[0].idct3(&p) };
                    (t * v[1]).sum().index()
                },
                rng,
            )
        }),
    );
    push(
        "dct2/idct2",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let plan = DctPlan::for_shape(&[4, 3]);
            let inputs = vec![
                random(rng, &[4, 4, 3], -1.0, 1.0),
                random(rng, &[4, 4, 3], -1.0, 1.0),
            ];
            let forward = rng.next_f64() < 0.5;
            let p = plan.clone();
            fd_compare(
                &inputs,
                0,
                &move |_, v| {
                    let t =
                        if forward { v[0].dct2_slices(&p) } else { v[0].idct2_slices(&p) };
                    (t * v[1]).sum().index()
                },
                rng,
            )
        }),
    );
    push(
        "clamp",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            // half interior, half saturated; both have locally constant slope
            let shape = [12usize];
            let data: Vec<f64> = (0..12)
                .map(|i| {
                    if i % 2 == 0 {
                        rng.uniform(0.1, 0.9)
                    } else {
                        rng.uniform(1.1, 1.6)
                    }
                })
                .collect();
            let inputs =
                vec![Tensor::from_vec(&shape, data), random(rng, &shape, -1.0, 1.0)];
            fd_compare(&inputs, 0, &|_, v| (v[0].clamp(0.0, 1.0) * v[1]).sum().index(), rng)
        }),
    );
    push(
        "box_mean",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let inputs = vec![
                random(rng, &[5, 5, 5], -1.0, 1.0),
                random(rng, &[3, 3, 3], -1.0, 1.0),
            ];
            fd_compare(&inputs, 0, &|_, v| (v[0].box_mean(3) * v[1]).sum().index(), rng)
        }),
    );
    push(
        "merge",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let v = Volume::from_tensor(random(rng, &[4, 4, 4], 0.0, 1.0)).unwrap();
            let (patches, grid) = volume::split(&v, (2, 2, 2)).unwrap();
            let mut inputs = patches;
            let weight = random(rng, &[4, 4, 4], -1.0, 1.0);
            inputs.push(weight);
            let wrt = rng.below(8);
            let g = grid.clone();
            fd_compare(
                &inputs,
                wrt,
                &move |tape, v| {
                    let merged = tape.merge(&v[..8], &g);
                    (merged * v[8]).sum().index()
                },
                rng,
            )
        }),
    );
    push(
        "gather/reshape",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            let idx: Vec<usize> = (0..6).map(|_| rng.below(12)).collect();
            let inputs = vec![random(rng, &[3, 4], -1.0, 1.0), random(rng, &[6], -1.0, 1.0)];
            let idx = std::rc::Rc::new(idx);
            fd_compare(
                &inputs,
                0,
                &move |_, v| {
                    (v[0].reshape(&[12]).gather(idx.clone()) * v[1]).sum().index()
                },
                rng,
            )
        }),
    );
    push(
        "soft_round_ste_symbolic",
        PRIMITIVE_TOL,
        Box::new(|rng| {
            // gradient of sum(round(c/q) * q) w.r.t. q must be round(u) - u
            let shape = [9usize];
            let c = random_signed_away(rng, &shape, 1.0, 30.0);
            let q = random(rng, &shape, 1.0, 8.0);
            let tape = Tape::new(Precision::F64);
            let cv = tape.constant(c.clone());
            let qv = tape.param(q.clone());
            let loss = (cv / qv).soft_round().mul(qv).sum();
            let grad = tape.backward(loss, &[qv]).pop().unwrap();
            let mut max_err: f64 = 0.0;
            for i in 0..shape[0] {
                let u = c.data()[i] / q.data()[i];
                max_err = max_err.max((grad.data()[i] - (u.round() - u)).abs());
            }
            max_err
        }),
    );
    checks
}

fn composite_checks() -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();
    let mut push = |name: &'static str, threshold: f64, runner: Box<dyn Fn(&mut Rng) -> f64>| {
        checks.push(Check { name, threshold, runner })
    };

    push(
        "dice_loss",
        COMPOSITE_TOL,
        Box::new(|rng| {
            let classes: Vec<u8> = (0..64).map(|_| rng.below(3) as u8).collect();
            let labels =
                crate::volume::LabelField::new(classes, [4, 4, 4], 3).unwrap();
            let inputs = vec![random(rng, &[3, 4, 4, 4], -2.0, 2.0)];
            let l = labels.clone();
            fd_compare(
                &inputs,
                0,
                &move |tape, v| dice_loss(tape, v[0], &l).node.index(),
                rng,
            )
        }),
    );
    push(
        "ssim_loss",
        COMPOSITE_TOL,
        Box::new(|rng| {
            let clean = random(rng, &[5, 5, 5], 0.1, 0.9);
            let inputs = vec![random(rng, &[5, 5, 5], 0.1, 0.9)];
            let c = clean.clone();
            fd_compare(
                &inputs,
                0,
                &move |tape, v| ssim_loss(tape, &[c.clone()], &[v[0]], 3).node.index(),
                rng,
            )
        }),
    );
    push(
        "freq_consistency_loss",
        COMPOSITE_TOL,
        Box::new(|rng| {
            // construct the pair in the frequency domain so every DCT
            // coefficient of the difference is bounded away from the L1
            // kink (the FD window is 1e-4; the margin is 0.5)
            let plan = DctPlan::for_shape(&[4]);
            let a = random(rng, &[2, 4, 4, 4], -1.0, 1.0);
            let e = random_signed_away(rng, &[2, 4, 4, 4], 0.5, 1.5);
            let b = a.zip(&crate::dct::idct3(&e, &plan), |av, dv| av - dv);
            let inputs = vec![a, b];
            let wrt = rng.below(2);
            fd_compare(
                &inputs,
                wrt,
                &move |_, v| freq_consistency_loss(v[0], v[1]).node.index(),
                rng,
            )
        }),
    );
    push(
        "attack_objective_q",
        COMPOSITE_TOL,
        Box::new(|rng| {
            // full Eq-2 style objective on one 8^3 patch, rounding swapped
            // for identity + 0.5 (see module docs)
            let side = 8usize;
            let plan = DctPlan::for_shape(&[side]);
            let model = SegModel::init(2, rng.next_u64());
            let x = Volume::from_tensor(random(rng, &[side, side, side], 0.2, 0.8)).unwrap();
            let (patches, grid) = volume::split(&x, (side, side, side)).unwrap();
            let classes: Vec<u8> =
                (0..side * side * side).map(|_| rng.below(2) as u8).collect();
            let labels =
                crate::volume::LabelField::new(classes, [side, side, side], 2).unwrap();
            let coeff = fpm_coefficients(&patches[0], &plan, false);
            let inputs = vec![random(rng, &[side, side, side], 1.5, 10.0)];
            let (p, g, m, l, cp) = (plan.clone(), grid.clone(), model, labels, patches);
            let coeff_c = coeff.clone();
            fd_compare(
                &inputs,
                0,
                &move |tape, v| {
                    let c = tape.constant(coeff_c.clone());
                    let q = v[0];
                    let u = c.div(q);
                    let r = u.round_as_identity().add_scalar(0.5);
                    let s = r.mul(q);
                    let y = s.mul_scalar(1.0 / INTENSITY_SCALE);
                    let xadv = y.idct3(&p).clamp(0.0, 1.0);
                    let merged = tape.merge(&[xadv], &g);
                    let logits = m.forward_frozen(tape, merged);
                    let dice = dice_loss(tape, logits, &l);
                    let ssim = ssim_loss(tape, &cp, &[xadv], 7);
                    (dice.node - ssim.node).index()
                },
                rng,
            )
        }),
    );
    push(
        "train_loss_theta",
        COMPOSITE_TOL,
        Box::new(|rng| {
            let side = 8usize;
            let model = SegModel::init(2, rng.next_u64());
            let x = random(rng, &[side, side, side], 0.1, 0.9);
            let adv = random(rng, &[side, side, side], 0.1, 0.9);
            let classes: Vec<u8> =
                (0..side * side * side).map(|_| rng.below(2) as u8).collect();
            let labels =
                crate::volume::LabelField::new(classes, [side, side, side], 2).unwrap();
            // rotate through the six parameter tensors
            let which = rng.below(6);
            let params: Vec<Tensor> =
                model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
            let sign_c = fr_sign_at_base(&params, &x, &adv);
            let masks_c = relu_masks_at_base(&params, &x);
            let masks_a = relu_masks_at_base(&params, &adv);
            let mut inputs = params;
            inputs.push(x);
            inputs.push(adv);
            let l = labels.clone();
            fd_compare(
                &inputs,
                which,
                &move |tape, v| {
                    let logits_c = forward_linearized(tape, v[6], &v[..6], &masks_c);
                    let logits_a = forward_linearized(tape, v[7], &v[..6], &masks_a);
                    let d1 = dice_loss(tape, logits_c, &l);
                    let d2 = dice_loss(tape, logits_a, &l);
                    let fr = freq_term_linearized(tape, logits_c, logits_a, &sign_c);
                    (d1.node + d2.node + fr).index()
                },
                rng,
            )
        }),
    );
    push(
        "train_loss_xadv",
        COMPOSITE_TOL,
        Box::new(|rng| {
            let side = 8usize;
            let model = SegModel::init(2, rng.next_u64());
            let x = random(rng, &[side, side, side], 0.1, 0.9);
            let adv = random(rng, &[side, side, side], 0.1, 0.9);
            let classes: Vec<u8> =
                (0..side * side * side).map(|_| rng.below(2) as u8).collect();
            let labels =
                crate::volume::LabelField::new(classes, [side, side, side], 2).unwrap();
            let params: Vec<Tensor> =
                model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
            let sign_c = fr_sign_at_base(&params, &x, &adv);
            let masks_c = relu_masks_at_base(&params, &x);
            let masks_a = relu_masks_at_base(&params, &adv);
            let mut inputs = vec![adv, x];
            inputs.extend(params);
            let l = labels.clone();
            fd_compare(
                &inputs,
                0,
                &move |tape, v| {
                    let logits_c = forward_linearized(tape, v[1], &v[2..8], &masks_c);
                    let logits_a = forward_linearized(tape, v[0], &v[2..8], &masks_a);
                    let d1 = dice_loss(tape, logits_c, &l);
                    let d2 = dice_loss(tape, logits_a, &l);
                    let fr = freq_term_linearized(tape, logits_c, logits_a, &sign_c);
                    (d1.node + d2.node + fr).index()
                },
                rng,
            )
        }),
    );
    checks
}

/// Sign pattern of the frequency-loss coefficient differences at the
/// unperturbed point. Smooth CNN logits put most high-frequency DCT
/// coefficients of the difference arbitrarily close to zero, so the L1
/// kink would invalidate finite differences over the full Eq-3 objective;
/// the composites therefore use the loss linearized around the base point
/// (forward `sum(diff_coeffs * sign0)`, whose true derivative equals the
/// production backward there). The abs kink itself is validated by the
/// dedicated `abs` and `freq_consistency_loss` checks.
fn fr_sign_at_base(params: &[Tensor], x: &Tensor, adv: &Tensor) -> Tensor {
    let tape = Tape::new(Precision::F64);
    let pv: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
    let lc = forward_explicit(&tape, tape.constant(x.clone()), &pv);
    let la = forward_explicit(&tape, tape.constant(adv.clone()), &pv);
    let plan = DctPlan::for_shape(&lc.shape()[1..]);
    let diff = crate::dct::dct3(&lc.value(), &plan)
        .zip(&crate::dct::dct3(&la.value(), &plan), |a, b| a - b);
    diff.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

fn freq_term_linearized<'t>(
    tape: &'t Tape,
    logits_a: Var<'t>,
    logits_b: Var<'t>,
    sign0: &Tensor,
) -> Var<'t> {
    let plan = DctPlan::for_shape(&logits_a.shape()[1..]);
    let diff = logits_a.dct3(&plan) - logits_b.dct3(&plan);
    (diff * tape.constant(sign0.clone())).sum()
}

/// Three-layer CNN forward over explicit parameter vars (w1, b1, w2, b2,
/// w3, b3), mirroring the model graph.
fn forward_explicit<'t>(_tape: &'t Tape, x: Var<'t>, p: &[Var<'t>]) -> Var<'t> {
    let shape = x.shape();
    let x4 = x.reshape(&[1, shape[0], shape[1], shape[2]]);
    let h1 = crate::model::leaky(x4.conv3d(p[0], p[1]));
    let h2 = crate::model::leaky(h1.conv3d(p[2], p[3]));
    h2.conv3d(p[4], p[5])
}

/// Activation masks of the two hidden layers at the unperturbed point.
/// Like the frequency-loss sign pattern, these freeze the ReLU kinks so
/// the Eq-3 composites are probed through their base-point linearization
/// (whose true derivative equals the production backward there). The relu
/// op's own backward is validated by the dedicated primitive check.
fn relu_masks_at_base(params: &[Tensor], x: &Tensor) -> [Tensor; 2] {
    let slope = crate::model::LEAKY_SLOPE;
    let mask = |t: &Tensor| t.map(|v| if v > 0.0 { 1.0 } else { slope });
    let shape = x.shape();
    let x4 = x.clone().reshaped(&[1, shape[0], shape[1], shape[2]]);
    let h1 = crate::conv::conv3d_forward(&x4, &params[0], &params[1]);
    let m1 = mask(&h1);
    let a1 = h1.map(|v| v.max(slope * v));
    let h2 = crate::conv::conv3d_forward(&a1, &params[2], &params[3]);
    let m2 = mask(&h2);
    [m1, m2]
}

fn forward_linearized<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    p: &[Var<'t>],
    masks: &[Tensor; 2],
) -> Var<'t> {
    let shape = x.shape();
    let x4 = x.reshape(&[1, shape[0], shape[1], shape[2]]);
    let h1 = x4.conv3d(p[0], p[1]) * tape.constant(masks[0].clone());
    let h2 = h1.conv3d(p[2], p[3]) * tape.constant(masks[1].clone());
    h2.conv3d(p[4], p[5])
}

fn run_checks(checks: Vec<Check>, seed: u64) -> Vec<CheckOutcome> {
    checks
        .into_iter()
        .enumerate()
        .map(|(i, check)| {
            let mut max_rel = 0.0f64;
            for instance in 0..INSTANCES {
                let mut rng = Rng::derive(seed, 0xfd ^ (i as u64) << 8, instance as u64);
                max_rel = max_rel.max((check.runner)(&mut rng));
            }
            CheckOutcome {
                name: check.name,
                threshold: check.threshold,
                instances: INSTANCES,
                max_rel_err: max_rel,
            }
        })
        .collect()
}

pub fn check_primitives(seed: u64) -> Vec<CheckOutcome> {
    run_checks(op_checks(), seed)
}

pub fn check_composites(seed: u64) -> Vec<CheckOutcome> {
    run_checks(composite_checks(), seed)
}

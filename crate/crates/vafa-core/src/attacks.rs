//! Adversarial attacks: the frequency perturbation module (FPM), the
//! frequency-domain attack built on it (VAFA, plus a per-slice 2D variant),
//! and the voxel-domain baselines PGD, FGSM, BIM, and Gaussian noise.
//!
//! The FPM chain is `x -> DCT -> divide by q -> round -> multiply by q ->
//! inverse DCT`. Quantization acts on the 8-bit intensity scale: DCT
//! coefficients are multiplied by 255 before dividing by q and the result
//! is divided by 255 after the inverse transform, so table entries carry
//! JPEG-like magnitudes (1 = round coefficients to integers, near-lossless)
//! regardless of the canonical [0, 1] voxel range. With orthonormal
//! transforms any other placement of that factor is equivalent.
//!
//! VAFA maximizes `dice_loss(M(X'), Y) - ssim_loss(X, X')` over the
//! quantization table under `1 <= q <= q_max`, with sign-gradient ascent
//! (step `2.5 * q_max / steps`, the PGD convention used by the voxel
//! baselines) and straight-through gradients through the rounding. The
//! model stays frozen; attacks never mutate their inputs.

use crate::autodiff::{Precision, Tape, Var};
use crate::dct::{dct2_slices, dct3, idct2_slices, idct3, DctPlan};
use crate::error::{RunError, VolumeError};
use crate::losses::{dice_loss, mean_ssim, ssim_loss, SSIM_WINDOW};
use crate::model::SegModel;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::volume::{self, LabelField, Volume};

/// Scale on which quantization tables operate (8-bit intensity units).
pub const INTENSITY_SCALE: f64 = 255.0;
/// Lower bound of quantization table entries; keeps division defined and
/// matches JPEG-style table semantics.
pub const Q_LO: f64 = 1.0;

/// Learnable positive per-frequency quantization table, kept inside
/// `[Q_LO, q_max]` by projection after every update.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTable {
    q: Tensor,
    q_max: f64,
}

impl QuantTable {
    /// All-ones table (minimal perturbation start).
    pub fn ones(shape: &[usize], q_max: f64) -> Result<QuantTable, RunError> {
        if q_max < Q_LO {
            return Err(RunError::BadConfig(format!("q_max {q_max} must be >= {Q_LO}")));
        }
        Ok(QuantTable { q: Tensor::full(shape, 1.0), q_max })
    }

    pub fn from_tensor(q: Tensor, q_max: f64) -> Result<QuantTable, RunError> {
        if q_max < Q_LO {
            return Err(RunError::BadConfig(format!("q_max {q_max} must be >= {Q_LO}")));
        }
        if q.data().iter().any(|&v| !(Q_LO..=q_max).contains(&v)) {
            return Err(RunError::BadConfig(format!(
                "table entries must lie in [{Q_LO}, {q_max}]"
            )));
        }
        Ok(QuantTable { q, q_max })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.q
    }

    pub fn q_max(&self) -> f64 {
        self.q_max
    }

    /// One sign-gradient ascent step followed by projection into
    /// `[Q_LO, q_max]`. `sign(0) = 0`.
    pub fn ascend_sign(&mut self, grad: &Tensor, step: f64) {
        assert_eq!(grad.shape(), self.q.shape(), "gradient shape mismatch");
        let q_max = self.q_max;
        for (qv, &g) in self.q.data_mut().iter_mut().zip(grad.data()) {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *qv = (*qv + step * s).clamp(Q_LO, q_max);
        }
    }

    /// Rounds entries to integers (projected back into bounds), for strict
    /// integer-table runs.
    pub fn snap_integer(&mut self) {
        let q_max = self.q_max;
        for v in self.q.data_mut() {
            *v = v.round().clamp(Q_LO, q_max);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Vafa,
    Vafa2d,
    Pgd,
    Fgsm,
    Bim,
    Gn,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Vafa => "vafa",
            AttackKind::Vafa2d => "vafa2d",
            AttackKind::Pgd => "pgd",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Gn => "gn",
        }
    }

    pub fn parse(s: &str) -> Option<AttackKind> {
        Some(match s {
            "vafa" => AttackKind::Vafa,
            "vafa2d" | "vafa-2d" => AttackKind::Vafa2d,
            "pgd" => AttackKind::Pgd,
            "fgsm" => AttackKind::Fgsm,
            "bim" => AttackKind::Bim,
            "gn" => AttackKind::Gn,
            _ => return None,
        })
    }

    pub fn is_frequency(self) -> bool {
        matches!(self, AttackKind::Vafa | AttackKind::Vafa2d)
    }

    fn stream_tag(self) -> u64 {
        match self {
            AttackKind::Vafa => 0xa71,
            AttackKind::Vafa2d => 0xa72,
            AttackKind::Pgd => 0xa73,
            AttackKind::Fgsm => 0xa74,
            AttackKind::Bim => 0xa75,
            AttackKind::Gn => 0xa76,
        }
    }
}

/// Attack hyperparameters. `epsilon` is in /255 units (the usual 8-bit
/// budget notation) and is converted once where it is consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub steps: usize,
    pub q_max: f64,
    pub patch_side: usize,
    pub epsilon: f64,
    /// Optional override of the derived step size (table units for
    /// frequency attacks, canonical intensity units for voxel attacks).
    pub step_size: Option<f64>,
    pub seed: u64,
    /// Snap the final table to integers before building the adversarial
    /// volume (strict integer-table fidelity).
    pub snap_integer: bool,
    /// Learn one table per patch instead of a single shared table.
    pub per_patch_tables: bool,
    pub ssim_window: usize,
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> AttackConfig {
        AttackConfig {
            kind,
            steps: 20,
            q_max: 20.0,
            patch_side: 32,
            epsilon: 8.0,
            step_size: None,
            seed: 0,
            snap_integer: false,
            per_patch_tables: false,
            ssim_window: SSIM_WINDOW,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.kind.is_frequency() {
            if self.q_max < Q_LO {
                return Err(RunError::BadConfig(format!("q_max {} must be >= {Q_LO}", self.q_max)));
            }
            if self.patch_side < 2 {
                return Err(RunError::BadConfig(format!(
                    "patch_side {} must be >= 2",
                    self.patch_side
                )));
            }
        } else {
            if self.epsilon < 0.0 {
                return Err(RunError::BadConfig(format!(
                    "epsilon {} must be >= 0",
                    self.epsilon
                )));
            }
            // steps = 0 is meaningless for iterative voxel attacks
            if matches!(self.kind, AttackKind::Pgd | AttackKind::Bim) && self.steps == 0 {
                return Err(RunError::BadConfig("pgd/bim need steps >= 1".into()));
            }
        }
        if self.ssim_window == 0 {
            return Err(RunError::BadConfig("ssim_window must be >= 1".into()));
        }
        Ok(())
    }

    /// Epsilon in canonical [0, 1] intensity units.
    pub fn epsilon_canonical(&self) -> f64 {
        self.epsilon / 255.0
    }

    /// Sign-ascent step for the quantization table.
    pub fn table_step(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.q_max / self.steps.max(1) as f64)
    }

    /// Sign-ascent step for iterative voxel attacks (canonical units).
    pub fn voxel_step(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon_canonical() / self.steps.max(1) as f64)
    }
}

/// Per-step optimizer diagnostics (values measured before the update).
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiag {
    pub step: usize,
    pub objective: f64,
    pub dice_loss: f64,
    pub ssim_loss: Option<f64>,
}

/// Outcome of one attack on one sample.
#[derive(Clone, Debug)]
pub struct AttackResult {
    pub adversarial: Volume,
    pub trace: Vec<StepDiag>,
    /// Mean patch SSIM between clean and adversarial volume.
    pub mean_ssim: f64,
    pub ssim_window: usize,
    /// Final quantization tables (frequency attacks only).
    pub q_tables: Option<Vec<Tensor>>,
}

fn bad_volume(e: VolumeError) -> RunError {
    RunError::BadConfig(e.to_string())
}

/// Scaled DCT coefficients of a patch for the FPM (forward transform times
/// the intensity scale).
pub fn fpm_coefficients(patch: &Tensor, plan: &DctPlan, two_d: bool) -> Tensor {
    let c = if two_d { dct2_slices(patch, plan) } else { dct3(patch, plan) };
    c.scale(INTENSITY_SCALE)
}

/// Quantized coefficient block `round(c / q) * q` (scaled domain). Exposed
/// so tests can verify every entry is an exact multiple of its q entry.
pub fn fpm_quantized_coeffs(patch: &Tensor, q: &QuantTable, plan: &DctPlan, two_d: bool) -> Tensor {
    let c = fpm_coefficients(patch, plan, two_d);
    apply_quantize_hard(&c, q.tensor())
}

fn apply_quantize_hard(c: &Tensor, q: &Tensor) -> Tensor {
    if c.shape() == q.shape() {
        c.zip(q, |cv, qv| (cv / qv).round() * qv)
    } else {
        assert!(c.shape().starts_with(q.shape()), "table shape incompatible with coefficients");
        let rep = c.len() / q.len();
        let mut out = Tensor::zeros(c.shape());
        for (p, &qv) in q.data().iter().enumerate() {
            for j in 0..rep {
                let cv = c.data()[p * rep + j];
                out.data_mut()[p * rep + j] = (cv / qv).round() * qv;
            }
        }
        out
    }
}

/// Hard-mode FPM: no tape, same op order (and therefore the same values)
/// as the soft-mode graph below.
pub fn fpm_forward_hard(
    patch: &Tensor,
    q: &QuantTable,
    plan: &DctPlan,
    two_d: bool,
    precision: Precision,
) -> Tensor {
    let px = |t: &mut Tensor| {
        if precision == Precision::F32 {
            t.round_to_f32();
        }
    };
    let mut c = fpm_coefficients(patch, plan, two_d);
    px(&mut c);
    let qt = {
        let mut t = q.tensor().clone();
        px(&mut t);
        t
    };
    let mut u = div_maybe_bcast(&c, &qt);
    px(&mut u);
    let mut r = u.map(f64::round);
    px(&mut r);
    let mut s = mul_maybe_bcast(&r, &qt);
    px(&mut s);
    let mut y = s.scale(1.0 / INTENSITY_SCALE);
    px(&mut y);
    let mut out = if two_d { idct2_slices(&y, plan) } else { idct3(&y, plan) };
    px(&mut out);
    out
}

fn div_maybe_bcast(c: &Tensor, q: &Tensor) -> Tensor {
    if c.shape() == q.shape() {
        c.zip(q, |a, b| a / b)
    } else {
        let rep = c.len() / q.len();
        let mut out = Tensor::zeros(c.shape());
        for (p, &qv) in q.data().iter().enumerate() {
            for j in 0..rep {
                out.data_mut()[p * rep + j] = c.data()[p * rep + j] / qv;
            }
        }
        out
    }
}

fn mul_maybe_bcast(c: &Tensor, q: &Tensor) -> Tensor {
    if c.shape() == q.shape() {
        c.zip(q, |a, b| a * b)
    } else {
        let rep = c.len() / q.len();
        let mut out = Tensor::zeros(c.shape());
        for (p, &qv) in q.data().iter().enumerate() {
            for j in 0..rep {
                out.data_mut()[p * rep + j] = c.data()[p * rep + j] * qv;
            }
        }
        out
    }
}

/// Soft-mode FPM subgraph: gradients flow into `q` through the
/// straight-through rounding. With `smooth_round` the rounding becomes an
/// identity in the forward as well, which makes the whole objective
/// differentiable for finite-difference validation.
pub fn fpm_soft<'t>(
    coeff_scaled: Var<'t>,
    q: Var<'t>,
    plan: &DctPlan,
    two_d: bool,
    smooth_round: bool,
) -> Var<'t> {
    let bcast = coeff_scaled.shape() != q.shape();
    let u = if bcast { coeff_scaled.div_bcast(q) } else { coeff_scaled.div(q) };
    let r = if smooth_round { u.round_as_identity() } else { u.soft_round() };
    let s = if bcast { r.mul_bcast(q) } else { r.mul(q) };
    let y = s.mul_scalar(1.0 / INTENSITY_SCALE);
    if two_d {
        y.idct2_slices(plan)
    } else {
        y.idct3(plan)
    }
}

/// Dispatches on `cfg.kind`.
pub fn attack(
    x: &Volume,
    y: &LabelField,
    model: &SegModel,
    cfg: &AttackConfig,
    precision: Precision,
) -> Result<AttackResult, RunError> {
    cfg.validate()?;
    match cfg.kind {
        AttackKind::Vafa | AttackKind::Vafa2d => frequency_attack(x, y, model, cfg, precision),
        AttackKind::Fgsm | AttackKind::Pgd | AttackKind::Bim => {
            voxel_attack(x, y, model, cfg, precision)
        }
        AttackKind::Gn => gaussian_noise(x, cfg, precision),
    }
}

fn frequency_attack(
    x: &Volume,
    y: &LabelField,
    model: &SegModel,
    cfg: &AttackConfig,
    precision: Precision,
) -> Result<AttackResult, RunError> {
    let side = cfg.patch_side;
    let two_d = cfg.kind == AttackKind::Vafa2d;
    let (clean_patches, grid) = volume::split(x, (side, side, side)).map_err(bad_volume)?;
    let plan = DctPlan::for_shape(&[side]);
    let coeffs: Vec<Tensor> =
        clean_patches.iter().map(|p| fpm_coefficients(p, &plan, two_d)).collect();
    let table_shape: Vec<usize> = if two_d { vec![side, side] } else { vec![side, side, side] };
    let n_tables = if cfg.per_patch_tables { clean_patches.len() } else { 1 };
    let mut tables: Vec<QuantTable> = (0..n_tables)
        .map(|_| QuantTable::ones(&table_shape, cfg.q_max))
        .collect::<Result<_, _>>()?;
    let step = cfg.table_step();
    let mut trace = Vec::with_capacity(cfg.steps + 1);

    for step_i in 0..cfg.steps {
        let tape = Tape::new(precision);
        let q_vars: Vec<Var> = tables.iter().map(|t| tape.param(t.tensor().clone())).collect();
        let adv_patches: Vec<Var> = coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let qv = q_vars[if cfg.per_patch_tables { i } else { 0 }];
                fpm_soft(tape.constant(c.clone()), qv, &plan, two_d, false)
                    .clamp(0.0, 1.0)
            })
            .collect();
        let merged = tape.merge(&adv_patches, &grid);
        let logits = model.forward_frozen(&tape, merged);
        let dice = dice_loss(&tape, logits, y);
        let ssim = ssim_loss(&tape, &clean_patches, &adv_patches, cfg.ssim_window);
        let objective = dice.node - ssim.node;
        let obj = objective.item();
        if !obj.is_finite() {
            return Err(RunError::NonFiniteLoss { context: cfg.kind.name().into(), step: step_i });
        }
        trace.push(StepDiag {
            step: step_i,
            objective: obj,
            dice_loss: dice.value(),
            ssim_loss: Some(ssim.value()),
        });
        let grads = tape.backward(objective, &q_vars);
        for (table, grad) in tables.iter_mut().zip(&grads) {
            table.ascend_sign(grad, step);
        }
    }

    if cfg.snap_integer {
        for t in &mut tables {
            t.snap_integer();
        }
    }

    // final adversarial volume from the hard-mode FPM
    let adv_patches: Vec<Tensor> = clean_patches
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let table = &tables[if cfg.per_patch_tables { i } else { 0 }];
            fpm_forward_hard(p, table, &plan, two_d, precision).map(|v| v.clamp(0.0, 1.0))
        })
        .collect();
    let merged = volume::merge(&adv_patches, &grid).map_err(bad_volume)?;
    let adversarial = Volume::from_tensor(merged).map_err(bad_volume)?;

    let ssim_eval = mean_ssim(x, &adversarial, side, cfg.ssim_window);
    let final_diag = final_dice(&adversarial, y, model, precision);
    trace.push(StepDiag {
        step: cfg.steps,
        objective: final_diag - (1.0 - ssim_eval.mean),
        dice_loss: final_diag,
        ssim_loss: Some(1.0 - ssim_eval.mean),
    });

    Ok(AttackResult {
        adversarial,
        trace,
        mean_ssim: ssim_eval.mean,
        ssim_window: ssim_eval.window_used,
        q_tables: Some(tables.into_iter().map(|t| t.q).collect()),
    })
}

fn final_dice(adv: &Volume, y: &LabelField, model: &SegModel, precision: Precision) -> f64 {
    let logits = model.predict_logits(adv, precision);
    let tape = Tape::new(precision);
    let lv = tape.constant(logits);
    dice_loss(&tape, lv, y).value()
}

fn voxel_attack(
    x: &Volume,
    y: &LabelField,
    model: &SegModel,
    cfg: &AttackConfig,
    precision: Precision,
) -> Result<AttackResult, RunError> {
    let eps = cfg.epsilon_canonical();
    let clean = x.tensor();
    let mut rng = Rng::derive(cfg.seed, cfg.kind.stream_tag(), 0);
    let mut adv = clean.clone();

    if cfg.kind == AttackKind::Pgd && eps > 0.0 {
        // uniform random start in the epsilon ball
        for v in adv.data_mut() {
            *v = (*v + rng.uniform(-eps, eps)).clamp(0.0, 1.0);
        }
    }

    let steps = if cfg.kind == AttackKind::Fgsm { 1 } else { cfg.steps };
    let step_size =
        if cfg.kind == AttackKind::Fgsm { eps } else { cfg.voxel_step() };
    let mut trace = Vec::with_capacity(steps + 1);

    for step_i in 0..steps {
        let tape = Tape::new(precision);
        let xv = tape.param(adv.clone());
        let logits = model.forward_frozen(&tape, xv);
        let dice = dice_loss(&tape, logits, y);
        let obj = dice.value();
        if !obj.is_finite() {
            return Err(RunError::NonFiniteLoss { context: cfg.kind.name().into(), step: step_i });
        }
        trace.push(StepDiag { step: step_i, objective: obj, dice_loss: obj, ssim_loss: None });
        let grads = tape.backward(dice.node, &[xv]);
        for ((av, &cv), &g) in adv.data_mut().iter_mut().zip(clean.data()).zip(grads[0].data()) {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            let stepped = *av + step_size * s;
            // project into the epsilon ball around the clean voxel, then
            // into the valid intensity range
            *av = (cv + (stepped - cv).clamp(-eps, eps)).clamp(0.0, 1.0);
        }
    }

    finish_voxel_attack(x, y, model, cfg, precision, adv, trace)
}

fn gaussian_noise(
    x: &Volume,
    cfg: &AttackConfig,
    precision: Precision,
) -> Result<AttackResult, RunError> {
    let eps = cfg.epsilon_canonical();
    let mut rng = Rng::derive(cfg.seed, cfg.kind.stream_tag(), 0);
    let mut adv = x.tensor().clone();
    for v in adv.data_mut() {
        // epsilon-scaled Gaussian, clipped to the epsilon ball
        let delta = (eps * rng.normal()).clamp(-eps, eps);
        *v = (*v + delta).clamp(0.0, 1.0);
    }
    finish_voxel_attack_noisy(x, cfg, precision, adv)
}

fn finish_voxel_attack(
    x: &Volume,
    y: &LabelField,
    model: &SegModel,
    cfg: &AttackConfig,
    precision: Precision,
    adv: Tensor,
    mut trace: Vec<StepDiag>,
) -> Result<AttackResult, RunError> {
    let adversarial = Volume::from_tensor(adv).map_err(bad_volume)?;
    let ssim_eval = mean_ssim(x, &adversarial, cfg.patch_side.min(min_extent(x)), cfg.ssim_window);
    let final_d = final_dice(&adversarial, y, model, precision);
    trace.push(StepDiag {
        step: trace.len(),
        objective: final_d,
        dice_loss: final_d,
        ssim_loss: None,
    });
    Ok(AttackResult {
        adversarial,
        trace,
        mean_ssim: ssim_eval.mean,
        ssim_window: ssim_eval.window_used,
        q_tables: None,
    })
}

fn finish_voxel_attack_noisy(
    x: &Volume,
    cfg: &AttackConfig,
    _precision: Precision,
    adv: Tensor,
) -> Result<AttackResult, RunError> {
    let adversarial = Volume::from_tensor(adv).map_err(bad_volume)?;
    let ssim_eval = mean_ssim(x, &adversarial, cfg.patch_side.min(min_extent(x)), cfg.ssim_window);
    Ok(AttackResult {
        adversarial,
        trace: Vec::new(),
        mean_ssim: ssim_eval.mean,
        ssim_window: ssim_eval.window_used,
        q_tables: None,
    })
}

fn min_extent(x: &Volume) -> usize {
    let [h, w, d] = x.extent();
    h.min(w).min(d).max(2)
}

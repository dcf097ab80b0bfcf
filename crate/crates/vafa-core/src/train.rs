//! Training loops: standard Dice training, voxel-domain adversarial
//! training (PGD), and frequency-domain adversarial training (VAFT) with an
//! optional frequency consistency term.
//!
//! A VAFT batch runs in two phases. First the model is held frozen and a
//! fresh attack (table re-initialized to ones) produces X' for every sample
//! of the batch; attack generation is data-parallel. Then one momentum-SGD
//! step descends `dice(M(X), Y) + dice(M(X'), Y) + lambda_fr * L_fr(M(X),
//! M(X'))` on the same mini-batch, the parameter update being the single
//! serialized writer. Mode `vaft` fixes lambda_fr = 0 (the "without
//! frequency consistency" variant); `vaft-fr` requires lambda_fr > 0.
//!
//! Everything is deterministic from the config seed: batch order, attack
//! randomness, and parallel gradient reduction (summed in sample order).

use std::time::Instant;

use crate::attacks::{attack, AttackConfig, AttackKind};
use crate::autodiff::{Precision, Tape, Var};
use crate::error::RunError;
use crate::losses::{dice_loss, freq_consistency_loss, LossValue};
use crate::metrics::dsc;
use crate::model::SegModel;
use crate::parallel::par_map;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::volume::{LabelField, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Standard,
    AdvVoxel,
    Vaft,
    VaftFr,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::AdvVoxel => "adv-voxel",
            TrainMode::Vaft => "vaft",
            TrainMode::VaftFr => "vaft-fr",
        }
    }

    pub fn parse(s: &str) -> Option<TrainMode> {
        Some(match s {
            "standard" => TrainMode::Standard,
            "adv-voxel" => TrainMode::AdvVoxel,
            "vaft" => TrainMode::Vaft,
            "vaft-fr" => TrainMode::VaftFr,
            _ => return None,
        })
    }

    pub fn is_adversarial(self) -> bool {
        self != TrainMode::Standard
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the frequency consistency loss (vaft-fr only).
    pub lambda_fr: f64,
    /// Attack used to generate training adversaries (adversarial modes).
    pub attack: AttackConfig,
    pub seed: u64,
    /// Invoke the epoch hook with a checkpointable model every N epochs
    /// (0 = only at the end).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> TrainConfig {
        let mut atk = AttackConfig::new(match mode {
            TrainMode::AdvVoxel => AttackKind::Pgd,
            _ => AttackKind::Vafa,
        });
        // training attacks default to the evaluation budget with a
        // shorter inner loop for speed
        atk.steps = 5;
        TrainConfig {
            mode,
            epochs: 10,
            batch_size: 4,
            lr: 0.5,
            momentum: 0.9,
            lambda_fr: if mode == TrainMode::VaftFr { 1.0 } else { 0.0 },
            attack: atk,
            seed: 7,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.batch_size == 0 {
            return Err(RunError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(RunError::BadConfig(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(RunError::BadConfig(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if self.lambda_fr < 0.0 {
            return Err(RunError::BadConfig("lambda_fr must be >= 0".into()));
        }
        if self.mode == TrainMode::VaftFr && self.lambda_fr == 0.0 {
            return Err(RunError::BadConfig("mode vaft-fr requires lambda_fr > 0".into()));
        }
        if self.mode.is_adversarial() {
            self.attack.validate()?;
            match self.mode {
                TrainMode::AdvVoxel if self.attack.kind.is_frequency() => {
                    return Err(RunError::BadConfig(
                        "adv-voxel training needs a voxel attack (pgd/fgsm/bim/gn)".into(),
                    ))
                }
                TrainMode::Vaft | TrainMode::VaftFr if !self.attack.kind.is_frequency() => {
                    return Err(RunError::BadConfig(
                        "vaft training needs a frequency attack (vafa/vafa2d)".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        match self.mode {
            TrainMode::VaftFr => self.lambda_fr,
            _ => 0.0,
        }
    }
}

/// Per-epoch mean losses. `total_loss` equals the sum of the logged
/// components (clean + adv + lambda * fr) up to accumulation order.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub clean_loss: f64,
    pub adv_loss: Option<f64>,
    pub fr_loss: Option<f64>,
    pub total_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub epochs: Vec<EpochLog>,
    /// Mean DSC on the training set with the final parameters.
    pub final_clean_dsc: f64,
    /// Mean DSC under the training attack on up to 8 training samples
    /// (adversarial modes only).
    pub final_adv_dsc: Option<f64>,
    /// Wall-clock seconds; informational only, excluded from serialized
    /// reports so identical runs produce identical artifacts.
    pub wall_secs: f64,
}

/// Training failure; carries the last finite-loss checkpoint.
#[derive(Debug)]
pub enum TrainError {
    Config(RunError),
    NonFinite { epoch: usize, batch: usize, last_good: Box<SegModel> },
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Config(e) => write!(f, "{e}"),
            TrainError::NonFinite { epoch, batch, .. } => {
                write!(f, "non-finite training loss at epoch {epoch}, batch {batch}")
            }
        }
    }
}

impl std::error::Error for TrainError {}

pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &SegModel, &EpochLog);

pub fn train_standard(
    model: SegModel,
    data: &[(Volume, LabelField)],
    cfg: &TrainConfig,
    precision: Precision,
    workers: usize,
    hook: Option<EpochHook>,
) -> Result<(SegModel, TrainReport), TrainError> {
    assert_eq!(cfg.mode, TrainMode::Standard);
    train(model, data, cfg, precision, workers, hook)
}

pub fn train_vaft(
    model: SegModel,
    data: &[(Volume, LabelField)],
    cfg: &TrainConfig,
    precision: Precision,
    workers: usize,
    hook: Option<EpochHook>,
) -> Result<(SegModel, TrainReport), TrainError> {
    assert!(matches!(cfg.mode, TrainMode::Vaft | TrainMode::VaftFr));
    train(model, data, cfg, precision, workers, hook)
}

pub fn train_adv_voxel(
    model: SegModel,
    data: &[(Volume, LabelField)],
    cfg: &TrainConfig,
    precision: Precision,
    workers: usize,
    hook: Option<EpochHook>,
) -> Result<(SegModel, TrainReport), TrainError> {
    assert_eq!(cfg.mode, TrainMode::AdvVoxel);
    train(model, data, cfg, precision, workers, hook)
}

struct SampleGrads {
    grads: [Tensor; 6],
    clean: f64,
    adv: Option<f64>,
    fr: Option<f64>,
    total: f64,
}

pub fn train(
    model: SegModel,
    data: &[(Volume, LabelField)],
    cfg: &TrainConfig,
    precision: Precision,
    workers: usize,
    mut hook: Option<EpochHook>,
) -> Result<(SegModel, TrainReport), TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if data.is_empty() {
        return Err(TrainError::Config(RunError::BadConfig("dataset is empty".into())));
    }
    let start = Instant::now();
    let mut model = model;
    let mut last_good = model.clone();
    let mut velocity: Vec<Tensor> =
        model.named_params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let lambda = cfg.effective_lambda();
    let mut epoch_logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::derive(cfg.seed, 0xba7c4, epoch as u64).shuffle(&mut order);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batch_count = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            // phase 1: adversaries with the model frozen
            let adversaries: Vec<Option<Volume>> = if cfg.mode.is_adversarial() {
                let items: Vec<usize> = batch.to_vec();
                let model_ref = &model;
                let results = par_map(&items, workers, |slot, &i| {
                    let mut atk = cfg.attack.clone();
                    atk.seed = mix_seed(cfg.seed, epoch, batch_idx, slot);
                    attack(&data[i].0, &data[i].1, model_ref, &atk, precision)
                        .map(|r| r.adversarial)
                });
                let mut advs = Vec::with_capacity(results.len());
                for r in results {
                    match r {
                        Ok(v) => advs.push(Some(v)),
                        Err(RunError::NonFiniteLoss { .. }) => {
                            return Err(TrainError::NonFinite {
                                epoch,
                                batch: batch_idx,
                                last_good: Box::new(last_good),
                            })
                        }
                        Err(e) => return Err(TrainError::Config(e)),
                    }
                }
                advs
            } else {
                vec![None; batch.len()]
            };

            // phase 2: per-sample gradients, reduced in sample order
            let items: Vec<(usize, Option<Volume>)> =
                batch.iter().copied().zip(adversaries).collect();
            let model_ref = &model;
            let grads: Vec<SampleGrads> = par_map(&items, workers, |_, (i, adv)| {
                sample_gradients(model_ref, &data[*i], adv.as_ref(), lambda, precision)
            });

            let inv = 1.0 / grads.len() as f64;
            let mut mean: Option<[Tensor; 6]> = None;
            let (mut c, mut a, mut fr, mut tot) = (0.0, 0.0, 0.0, 0.0);
            for sg in &grads {
                c += sg.clean;
                a += sg.adv.unwrap_or(0.0);
                fr += sg.fr.unwrap_or(0.0);
                tot += sg.total;
                match &mut mean {
                    None => mean = Some(sg.grads.clone()),
                    Some(m) => {
                        for (dst, src) in m.iter_mut().zip(&sg.grads) {
                            dst.add_in_place(src);
                        }
                    }
                }
            }
            let mean = mean.expect("non-empty batch");
            let (c, a, fr, tot) = (c * inv, a * inv, fr * inv, tot * inv);
            if !tot.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    last_good: Box::new(last_good),
                });
            }
            sums.0 += c;
            sums.1 += a;
            sums.2 += fr;
            sums.3 += tot;
            batch_count += 1;

            // momentum SGD, single writer
            for ((param, v), g) in model.params_mut().into_iter().zip(&mut velocity).zip(&mean) {
                for ((pv, vv), &gv) in
                    param.data_mut().iter_mut().zip(v.data_mut()).zip(g.data())
                {
                    *vv = cfg.momentum * *vv + gv * inv;
                    *pv -= cfg.lr * *vv;
                }
            }
            if precision == Precision::F32 {
                for p in model.params_mut() {
                    p.round_to_f32();
                }
            }
        }

        let n = batch_count as f64;
        let log = EpochLog {
            epoch,
            clean_loss: sums.0 / n,
            adv_loss: cfg.mode.is_adversarial().then_some(sums.1 / n),
            fr_loss: (lambda > 0.0).then_some(sums.2 / n),
            total_loss: sums.3 / n,
        };
        last_good = model.clone();
        let checkpoint_due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        if let Some(h) = hook.as_mut() {
            if checkpoint_due || epoch + 1 == cfg.epochs {
                h(epoch, &model, &log);
            }
        }
        epoch_logs.push(log);
    }

    // final metrics on the training set
    let clean_dscs: Vec<f64> = par_map(data, workers, |_, (x, y)| {
        let pred = model.predict_labels(x, precision);
        dsc(&pred, y).1
    });
    let final_clean_dsc = mean_of(&clean_dscs);
    let final_adv_dsc = if cfg.mode.is_adversarial() {
        let subset: Vec<&(Volume, LabelField)> = data.iter().take(8).collect();
        let scores: Vec<f64> = par_map(&subset, workers, |slot, (x, y)| {
            let mut atk = cfg.attack.clone();
            atk.seed = mix_seed(cfg.seed, usize::MAX, 0, slot);
            match attack(x, y, &model, &atk, precision) {
                Ok(r) => dsc(&model.predict_labels(&r.adversarial, precision), y).1,
                Err(_) => f64::NAN,
            }
        });
        Some(mean_of(&scores))
    } else {
        None
    };

    let report = TrainReport {
        mode: cfg.mode,
        epochs: epoch_logs,
        final_clean_dsc,
        final_adv_dsc,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Gradients of the mode's loss for one sample. The clean and adversarial
/// forwards share the same parameter leaves, so both paths accumulate into
/// one gradient per parameter.
fn sample_gradients(
    model: &SegModel,
    (x, y): &(Volume, LabelField),
    adversarial: Option<&Volume>,
    lambda: f64,
    precision: Precision,
) -> SampleGrads {
    let tape = Tape::new(precision);
    let xv = tape.constant(x.tensor().clone());
    let (clean_logits, params) = model.forward_trainable(&tape, xv);
    let clean = dice_loss(&tape, clean_logits, y);

    let (loss, adv_val, fr_val): (Var, Option<f64>, Option<f64>) = match adversarial {
        None => (clean.node, None, None),
        Some(adv) => {
            let av = tape.constant(adv.tensor().clone());
            let adv_logits = SegModel::forward_with(av, &params);
            let adv_loss: LossValue = dice_loss(&tape, adv_logits, y);
            if lambda > 0.0 {
                let fr = freq_consistency_loss(clean_logits, adv_logits);
                let total = clean.node + adv_loss.node + fr.node.mul_scalar(lambda);
                (total, Some(adv_loss.value()), Some(fr.value()))
            } else {
                (clean.node + adv_loss.node, Some(adv_loss.value()), None)
            }
        }
    };

    let vars = params.all();
    let grads_vec = tape.backward(loss, &vars);
    let mut it = grads_vec.into_iter();
    let grads: [Tensor; 6] = std::array::from_fn(|_| it.next().unwrap());
    SampleGrads {
        grads,
        clean: clean.value(),
        adv: adv_val,
        fr: fr_val,
        total: loss.item(),
    }
}

fn mix_seed(seed: u64, epoch: usize, batch: usize, slot: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9)
        ^ (batch as u64).wrapping_mul(0x85eb_ca6b)
        ^ (slot as u64).wrapping_mul(0xc2b2_ae35)
        ^ 0x77a1
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

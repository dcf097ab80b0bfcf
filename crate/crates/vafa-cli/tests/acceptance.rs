//! Acceptance suite: every criterion checked at its stated tolerance, one
//! pass/fail line per criterion (run with `--nocapture` to see them).
//!
//! Heavy artifacts (trained checkpoints, attack sweeps) are deterministic
//! functions of their configs and the seed, so they are cached under
//! CARGO_TARGET_TMPDIR keyed by a hash of everything that shaped them;
//! re-runs only recompute what changed. Set VAFA_TEST_NO_CACHE=1 to force
//! full recomputation.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use vafa_core::attacks::{attack, fpm_forward_hard, fpm_quantized_coeffs, AttackConfig, AttackKind, QuantTable};
use vafa_core::autodiff::Precision;
use vafa_core::dct::{dct3, idct3, DctPlan};
use vafa_core::fdcheck;
use vafa_core::losses::{mean_ssim, SSIM_WINDOW};
use vafa_core::metrics::{boundary_voxels, dsc, hd95, percentile_nearest_rank};
use vafa_core::model::SegModel;
use vafa_core::parallel::par_map;
use vafa_core::rng::{fnv1a64, Rng};
use vafa_core::synth::{generate_split, SynthSpec};
use vafa_core::tensor::Tensor;
use vafa_core::train::{train, TrainConfig, TrainMode};
use vafa_core::volume::{LabelField, Volume};

const SEED: u64 = 7;
/// Bump to invalidate every cached artifact.
const CACHE_VERSION: u32 = 1;

const TRAIN_EPOCHS: usize = 30;
const TRAIN_LR: f64 = 0.2;
const ADV_EPOCHS: usize = 8;
const ADV_ATTACK_STEPS: usize = 5;

fn pass(criterion: &str, detail: String) {
    println!("[{criterion}] PASS - {detail}");
}

fn check(criterion: &str, ok: bool, detail: String) {
    if ok {
        pass(criterion, detail);
    } else {
        println!("[{criterion}] FAIL - {detail}");
        panic!("[{criterion}] {detail}");
    }
}

// ---------------------------------------------------------------- support

struct Dataset {
    train: Vec<(Volume, LabelField)>,
    test: Vec<(Volume, LabelField)>,
    fingerprint: u64,
}

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let spec = SynthSpec { seed: SEED, ..SynthSpec::default() };
        let (train, test) = generate_split(&spec, 0).expect("default spec is valid");
        let mut bytes = Vec::new();
        for (v, l) in train.iter().chain(&test) {
            for x in v.tensor().data().iter().take(64) {
                bytes.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            bytes.extend_from_slice(&l.classes()[..64.min(l.classes().len())]);
        }
        let fingerprint = fnv1a64(&bytes);
        Dataset { train, test, fingerprint }
    })
}

fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join(format!("acceptance_cache_v{CACHE_VERSION}"));
    std::fs::create_dir_all(&dir).expect("create cache dir");
    dir
}

fn cache_enabled() -> bool {
    std::env::var("VAFA_TEST_NO_CACHE").map(|v| v != "1").unwrap_or(true)
}

/// Trains (or loads) a checkpoint for a config; returns the model and the
/// fresh wall-clock seconds (None when served from cache).
fn train_cached(tag: &str, cfg: &TrainConfig) -> (SegModel, Option<f64>) {
    let data = dataset();
    let key = fnv1a64(
        format!("{CACHE_VERSION}|{tag}|{:?}|{}|{SEED}", cfg, data.fingerprint).as_bytes(),
    );
    let path = cache_dir().join(format!("{tag}_{key:016x}.ckpt"));
    if cache_enabled() {
        if let Ok(model) = SegModel::load(&path) {
            return (model, None);
        }
    }
    let start = Instant::now();
    let init = SegModel::init(data.train[0].1.num_class(), SEED);
    let (model, _report) =
        train(init, &data.train, cfg, Precision::F64, 0, None).expect("training must not diverge");
    let wall = start.elapsed().as_secs_f64();
    model.save(&path).expect("save cached checkpoint");
    (model, Some(wall))
}

fn standard_model() -> &'static (SegModel, Option<f64>) {
    static M: OnceLock<(SegModel, Option<f64>)> = OnceLock::new();
    M.get_or_init(|| {
        let mut cfg = TrainConfig::new(TrainMode::Standard);
        cfg.epochs = TRAIN_EPOCHS;
        cfg.lr = TRAIN_LR;
        cfg.seed = SEED;
        train_cached("standard", &cfg)
    })
}

fn adversarial_train_config(mode: TrainMode) -> TrainConfig {
    let mut cfg = TrainConfig::new(mode);
    cfg.epochs = ADV_EPOCHS;
    cfg.lr = TRAIN_LR;
    cfg.seed = SEED;
    cfg.attack.steps = ADV_ATTACK_STEPS;
    cfg.attack.q_max = 20.0;
    cfg.attack.patch_side = 32;
    if mode == TrainMode::AdvVoxel {
        cfg.attack.kind = AttackKind::Pgd;
        cfg.attack.epsilon = 4.0;
    }
    cfg
}

fn vaft_model() -> &'static SegModel {
    static M: OnceLock<SegModel> = OnceLock::new();
    M.get_or_init(|| train_cached("vaft", &adversarial_train_config(TrainMode::Vaft)).0)
}

fn vaft_fr_model() -> &'static SegModel {
    static M: OnceLock<SegModel> = OnceLock::new();
    M.get_or_init(|| {
        let mut cfg = adversarial_train_config(TrainMode::VaftFr);
        cfg.lambda_fr = 1.0;
        train_cached("vaft_fr", &cfg).0
    })
}

fn adv_voxel_model() -> &'static SegModel {
    static M: OnceLock<SegModel> = OnceLock::new();
    M.get_or_init(|| train_cached("adv_voxel", &adversarial_train_config(TrainMode::AdvVoxel)).0)
}

#[derive(Clone, Debug)]
struct AttackSummary {
    per_sample_dsc: Vec<f64>,
    per_sample_ssim: Vec<f64>,
    /// samples whose objective trace was non-decreasing at every step
    monotone_samples: usize,
    samples: usize,
}

impl AttackSummary {
    fn mean_dsc(&self) -> f64 {
        self.per_sample_dsc.iter().sum::<f64>() / self.per_sample_dsc.len() as f64
    }

    fn mean_ssim(&self) -> f64 {
        self.per_sample_ssim.iter().sum::<f64>() / self.per_sample_ssim.len() as f64
    }
}

/// Runs an attack over the whole test split (cached).
fn attack_sweep(tag: &str, model: &SegModel, cfg: &AttackConfig) -> AttackSummary {
    let data = dataset();
    let key = fnv1a64(
        format!(
            "{CACHE_VERSION}|{tag}|{:?}|{}|{}|{SEED}",
            cfg,
            model.fingerprint(),
            data.fingerprint
        )
        .as_bytes(),
    );
    let path = cache_dir().join(format!("sweep_{tag}_{key:016x}.txt"));
    if cache_enabled() {
        if let Some(summary) = load_summary(&path) {
            return summary;
        }
    }
    let results: Vec<(f64, f64, bool)> = par_map(&data.test, 0, |i, (x, y)| {
        let mut atk = cfg.clone();
        atk.seed = SEED ^ fnv1a64(atk.kind.name().as_bytes()) ^ (i as u64).wrapping_mul(0x9e37);
        let r = attack(x, y, model, &atk, Precision::F64).expect("attack must not diverge");
        let d = dsc(&model.predict_labels(&r.adversarial, Precision::F64), y).1;
        let monotone = r
            .trace
            .windows(2)
            .all(|w| w[1].objective >= w[0].objective - 1e-9);
        (d, r.mean_ssim, monotone)
    });
    let summary = AttackSummary {
        per_sample_dsc: results.iter().map(|r| r.0).collect(),
        per_sample_ssim: results.iter().map(|r| r.1).collect(),
        monotone_samples: results.iter().filter(|r| r.2).count(),
        samples: results.len(),
    };
    save_summary(&path, &summary);
    summary
}

fn save_summary(path: &PathBuf, s: &AttackSummary) {
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
    let text = format!(
        "dsc={}\nssim={}\nmonotone={}\nsamples={}\n",
        fmt(&s.per_sample_dsc),
        fmt(&s.per_sample_ssim),
        s.monotone_samples,
        s.samples
    );
    std::fs::write(path, text).expect("write sweep cache");
}

fn load_summary(path: &PathBuf) -> Option<AttackSummary> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut dsc = None;
    let mut ssim = None;
    let mut monotone = None;
    let mut samples = None;
    for line in text.lines() {
        let (k, v) = line.split_once('=')?;
        match k {
            "dsc" => dsc = Some(parse_list(v)?),
            "ssim" => ssim = Some(parse_list(v)?),
            "monotone" => monotone = v.parse().ok(),
            "samples" => samples = v.parse().ok(),
            _ => return None,
        }
    }
    Some(AttackSummary {
        per_sample_dsc: dsc?,
        per_sample_ssim: ssim?,
        monotone_samples: monotone?,
        samples: samples?,
    })
}

fn parse_list(v: &str) -> Option<Vec<f64>> {
    v.split(',').map(|s| s.parse().ok()).collect()
}

fn clean_mean_dsc(model: &SegModel) -> f64 {
    let data = dataset();
    let scores: Vec<f64> = par_map(&data.test, 0, |_, (x, y)| {
        dsc(&model.predict_labels(x, Precision::F64), y).1
    });
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn eval_attack_config(kind: AttackKind, steps: usize, q_max: f64, epsilon: f64) -> AttackConfig {
    let mut cfg = AttackConfig::new(kind);
    cfg.steps = steps;
    cfg.q_max = q_max;
    cfg.patch_side = 32;
    cfg.epsilon = epsilon;
    cfg.ssim_window = SSIM_WINDOW;
    cfg
}

fn random_cube(rng: &mut Rng, s: usize) -> Tensor {
    Tensor::from_vec(&[s, s, s], (0..s * s * s).map(|_| rng.uniform(-1.0, 1.0)).collect())
}

// ---------------------------------------------------------------- criteria

/// A1: dct3 against the brute-force DCT definition on 4^3 blocks (1e-9),
/// idct3(dct3(x)) identity on 32^3 (1e-6), Parseval (1e-6 rel), under 10 s.
#[test]
fn a1_dct_correctness() {
    let start = Instant::now();
    let mut rng = Rng::new(0xa1);

    // brute force: inline cosine definition, O(N^2)
    let norm = |k: usize, n: usize| {
        if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        }
    };
    let cos_term = |k: usize, i: usize, n: usize| {
        (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
    };
    let plan4 = DctPlan::for_shape(&[4]);
    let mut max_brute = 0.0f64;
    for _ in 0..20 {
        let x = random_cube(&mut rng, 4);
        let fast = dct3(&x, &plan4);
        for k1 in 0..4 {
            for k2 in 0..4 {
                for k3 in 0..4 {
                    let mut acc = 0.0;
                    for i1 in 0..4 {
                        for i2 in 0..4 {
                            for i3 in 0..4 {
                                acc += x.at(&[i1, i2, i3])
                                    * cos_term(k1, i1, 4)
                                    * cos_term(k2, i2, 4)
                                    * cos_term(k3, i3, 4);
                            }
                        }
                    }
                    acc *= norm(k1, 4) * norm(k2, 4) * norm(k3, 4);
                    max_brute = max_brute.max((fast.at(&[k1, k2, k3]) - acc).abs());
                }
            }
        }
    }

    let plan32 = DctPlan::for_shape(&[32]);
    let mut max_rt = 0.0f64;
    let mut max_parseval = 0.0f64;
    for _ in 0..3 {
        let x = random_cube(&mut rng, 32);
        let c = dct3(&x, &plan32);
        let back = idct3(&c, &plan32);
        max_rt = x
            .data()
            .iter()
            .zip(back.data())
            .fold(max_rt, |m, (&a, &b)| m.max((a - b).abs()));
        max_parseval = max_parseval.max((x.l2_norm() - c.l2_norm()).abs() / x.l2_norm());
    }
    let elapsed = start.elapsed().as_secs_f64();

    check(
        "A1",
        max_brute < 1e-9 && max_rt < 1e-6 && max_parseval < 1e-6 && elapsed < 10.0,
        format!(
            "brute-force {max_brute:.2e} (<1e-9), round-trip {max_rt:.2e} (<1e-6), \
             parseval {max_parseval:.2e} (<1e-6), {elapsed:.1}s (<10s)"
        ),
    );
}

/// A2: every op and composite objective passes central finite differences
/// (primitives < 1e-4, composites < 1e-3, >= 20 instances), under 2 min.
#[test]
fn a2_gradient_fidelity() {
    let start = Instant::now();
    let outcomes = fdcheck::check_all(SEED);
    let elapsed = start.elapsed().as_secs_f64();
    let worst = outcomes
        .iter()
        .map(|o| (o.max_rel_err / o.threshold, o.name))
        .fold((0.0, ""), |m, v| if v.0 > m.0 { v } else { m });
    let all_pass = outcomes.iter().all(|o| o.passed());
    check(
        "A2",
        all_pass && elapsed < 120.0,
        format!(
            "{} checks, >= {} instances each, worst {} at {:.1}% of tolerance, {elapsed:.1}s (<120s)",
            outcomes.len(),
            outcomes.iter().map(|o| o.instances).min().unwrap_or(0),
            worst.1,
            worst.0 * 100.0
        ),
    );
}

/// A3: quantized blocks are exact multiples of q; all-ones q on integer
/// coefficients is the identity; huge q drives the patch to a constant.
#[test]
fn a3_fpm_contract() {
    let mut rng = Rng::new(0xa3);
    let side = 8usize;
    let plan = DctPlan::for_shape(&[side]);

    let patch = Tensor::from_vec(
        &[side, side, side],
        (0..side * side * side).map(|_| rng.next_f64()).collect(),
    );
    let q_t = Tensor::from_vec(
        &[side, side, side],
        (0..side * side * side).map(|_| 1.0 + rng.below(19) as f64).collect(),
    );
    let q = QuantTable::from_tensor(q_t, 20.0).unwrap();
    let quantized = fpm_quantized_coeffs(&patch, &q, &plan, false);
    let mut max_mult_err = 0.0f64;
    for (&s, &qv) in quantized.data().iter().zip(q.tensor().data()) {
        max_mult_err = max_mult_err.max((s - (s / qv).round() * qv).abs());
    }

    // integer coefficients, q = 1: identity
    let mut ints = Tensor::zeros(&[side, side, side]);
    for v in ints.data_mut() {
        *v = (rng.below(41) as f64) - 20.0;
    }
    let int_patch = idct3(&ints.scale(1.0 / 255.0), &plan);
    let ones = QuantTable::ones(&[side, side, side], 20.0).unwrap();
    let out = fpm_forward_hard(&int_patch, &ones, &plan, false, Precision::F64);
    let identity_exact = out.data() == int_patch.data();

    // huge q: everything rounds to zero
    let huge = QuantTable::from_tensor(Tensor::full(&[side, side, side], 1e9), 1e9).unwrap();
    let zeroed = fpm_forward_hard(&patch, &huge, &plan, false, Precision::F64);
    let max_residual = zeroed.max_abs();

    check(
        "A3",
        max_mult_err < 1e-9 && identity_exact && max_residual < 1e-9,
        format!(
            "multiples err {max_mult_err:.2e} (<1e-9), q=1 identity exact: {identity_exact}, \
             huge-q residual {max_residual:.2e} (<1e-9)"
        ),
    );
}

/// A4: standard training on the default dataset (40 train / 10 test, 64^3,
/// 4 classes) reaches clean mean DSC >= 0.90 inside the epoch budget.
#[test]
fn a4_toy_benchmark_trainability() {
    let (model, wall) = standard_model();
    let mean = clean_mean_dsc(model);
    let timing = match wall {
        Some(secs) => {
            assert!(
                *secs < 1800.0,
                "[A4] training took {secs:.0}s, over the 30 min target"
            );
            format!("trained fresh in {secs:.0}s (<1800s)")
        }
        None => "checkpoint served from cache".to_string(),
    };
    check(
        "A4",
        mean >= 0.90,
        format!("clean mean DSC {mean:.4} (>= 0.90), {TRAIN_EPOCHS} epochs, {timing}"),
    );
}

/// A5: VAFA (q_max 20, patch 32^3, 20 steps) drops mean DSC by >= 0.20;
/// VAFA fools at least as much as VAFA-2D; PGD(8/255) beats Gaussian noise
/// by >= 0.05 DSC.
#[test]
fn a5_attack_effectiveness() {
    let (model, _) = standard_model();
    let clean = clean_mean_dsc(model);
    let vafa = attack_sweep("vafa_q20_s20", model, &eval_attack_config(AttackKind::Vafa, 20, 20.0, 8.0));
    let vafa2d =
        attack_sweep("vafa2d_q20_s20", model, &eval_attack_config(AttackKind::Vafa2d, 20, 20.0, 8.0));
    let pgd = attack_sweep("pgd_e8_s20", model, &eval_attack_config(AttackKind::Pgd, 20, 20.0, 8.0));
    let gn = attack_sweep("gn_e8", model, &eval_attack_config(AttackKind::Gn, 20, 20.0, 8.0));

    let drop = clean - vafa.mean_dsc();
    check(
        "A5",
        drop >= 0.20 && vafa.mean_dsc() <= vafa2d.mean_dsc() && pgd.mean_dsc() <= gn.mean_dsc() - 0.05,
        format!(
            "clean {clean:.4}; VAFA {:.4} (drop {drop:.4} >= 0.20); VAFA-2D {:.4} (>= VAFA); \
             PGD {:.4} <= GN {:.4} - 0.05",
            vafa.mean_dsc(),
            vafa2d.mean_dsc(),
            pgd.mean_dsc(),
            gn.mean_dsc()
        ),
    );
}

/// A6: over q_max in {10, 20, 30}, mean DSC and mean SSIM non-increasing;
/// over steps in {5, 10, 20}, mean DSC non-increasing (ties within 0.01).
#[test]
fn a6_ablation_monotonicity() {
    let (model, _) = standard_model();
    let q10 = attack_sweep("vafa_q10_s20", model, &eval_attack_config(AttackKind::Vafa, 20, 10.0, 8.0));
    let q20 = attack_sweep("vafa_q20_s20", model, &eval_attack_config(AttackKind::Vafa, 20, 20.0, 8.0));
    let q30 = attack_sweep("vafa_q30_s20", model, &eval_attack_config(AttackKind::Vafa, 20, 30.0, 8.0));
    let s5 = attack_sweep("vafa_q20_s5", model, &eval_attack_config(AttackKind::Vafa, 5, 20.0, 8.0));
    let s10 = attack_sweep("vafa_q20_s10", model, &eval_attack_config(AttackKind::Vafa, 10, 20.0, 8.0));

    const SLACK: f64 = 0.01;
    let non_increasing = |a: f64, b: f64| b <= a + SLACK;
    let q_dsc = [q10.mean_dsc(), q20.mean_dsc(), q30.mean_dsc()];
    let q_ssim = [q10.mean_ssim(), q20.mean_ssim(), q30.mean_ssim()];
    let s_dsc = [s5.mean_dsc(), s10.mean_dsc(), q20.mean_dsc()];
    let ok = q_dsc.windows(2).all(|w| non_increasing(w[0], w[1]))
        && q_ssim.windows(2).all(|w| non_increasing(w[0], w[1]))
        && s_dsc.windows(2).all(|w| non_increasing(w[0], w[1]));
    check(
        "A6",
        ok,
        format!(
            "q_max 10/20/30: DSC {:.4}/{:.4}/{:.4}, SSIM {:.4}/{:.4}/{:.4}; \
             steps 5/10/20: DSC {:.4}/{:.4}/{:.4} (non-increasing, {SLACK} slack)",
            q_dsc[0], q_dsc[1], q_dsc[2], q_ssim[0], q_ssim[1], q_ssim[2], s_dsc[0], s_dsc[1], s_dsc[2]
        ),
    );
}

/// A7: VAFT beats the standard model under fresh VAFA by >= 0.10 DSC; the
/// PGD-trained model is no more VAFA-robust than VAFT; VAFT-FR keeps clean
/// DSC within 0.02 of VAFT.
#[test]
fn a7_vaft_robustness() {
    let (std_model, _) = standard_model();
    let vafa_cfg = eval_attack_config(AttackKind::Vafa, 20, 20.0, 8.0);

    let std_under = attack_sweep("vafa_q20_s20", std_model, &vafa_cfg);
    let vaft_under = attack_sweep("vaft_under_vafa", vaft_model(), &vafa_cfg);
    let advvox_under = attack_sweep("advvox_under_vafa", adv_voxel_model(), &vafa_cfg);

    let clean_vaft = clean_mean_dsc(vaft_model());
    let clean_vaft_fr = clean_mean_dsc(vaft_fr_model());

    let gain = vaft_under.mean_dsc() - std_under.mean_dsc();
    check(
        "A7",
        gain >= 0.10
            && advvox_under.mean_dsc() <= vaft_under.mean_dsc()
            && clean_vaft_fr >= clean_vaft - 0.02,
        format!(
            "VAFA DSC: standard {:.4}, VAFT {:.4} (gain {gain:.4} >= 0.10), \
             PGD-trained {:.4} (<= VAFT); clean: VAFT-FR {clean_vaft_fr:.4} >= VAFT {clean_vaft:.4} - 0.02",
            std_under.mean_dsc(),
            vaft_under.mean_dsc(),
            advvox_under.mean_dsc()
        ),
    );
}

/// A8: DSC and HD95 match brute-force recomputation exactly on 50 random
/// mask pairs (<= 12^3); HD95 symmetric; SSIM self-similarity exactly 1.
#[test]
fn a8_metric_oracles() {
    let mut rng = Rng::new(0xa8);
    let mut checked = 0usize;
    for trial in 0..50 {
        let extent = [2 + rng.below(11), 2 + rng.below(11), 2 + rng.below(11)];
        let n = extent[0] * extent[1] * extent[2];
        let nc = 2 + rng.below(3);
        let p = LabelField::new((0..n).map(|_| rng.below(nc) as u8).collect(), extent, nc).unwrap();
        let g = LabelField::new((0..n).map(|_| rng.below(nc) as u8).collect(), extent, nc).unwrap();

        // dsc against a set-intersection recount
        let (fast_dsc, _) = dsc(&p, &g);
        for c in 0..nc {
            let pc: Vec<usize> = (0..n).filter(|&i| p.classes()[i] == c as u8).collect();
            let gc: Vec<usize> = (0..n).filter(|&i| g.classes()[i] == c as u8).collect();
            let inter = pc.iter().filter(|i| gc.contains(i)).count();
            let expect = if pc.is_empty() && gc.is_empty() {
                1.0
            } else {
                2.0 * inter as f64 / (pc.len() + gc.len()) as f64
            };
            assert_eq!(fast_dsc[c], expect, "[A8] dsc trial {trial} class {c}");
        }

        // hd95 against the all-pairs oracle, plus symmetry
        let (fast_hd, _, _) = hd95(&p, &g);
        let (fast_hd_rev, _, _) = hd95(&g, &p);
        assert_eq!(fast_hd, fast_hd_rev, "[A8] hd95 asymmetric on trial {trial}");
        for c in 0..nc {
            let bp = boundary_voxels(&p, c as u8);
            let bg = boundary_voxels(&g, c as u8);
            let expect = match (bp.is_empty(), bg.is_empty()) {
                (true, true) => Some(0.0),
                (true, false) | (false, true) => None,
                _ => {
                    let [_, w, d] = extent;
                    let coord = |i: usize| {
                        ((i / (w * d)) as f64, ((i / d) % w) as f64, (i % d) as f64)
                    };
                    let min_dist = |i: usize, set: &[usize]| {
                        let (x, y, z) = coord(i);
                        set.iter()
                            .map(|&j| {
                                let (a, b, c2) = coord(j);
                                ((x - a).powi(2) + (y - b).powi(2) + (z - c2).powi(2)).sqrt()
                            })
                            .fold(f64::INFINITY, f64::min)
                    };
                    let mut pooled: Vec<f64> = bp.iter().map(|&i| min_dist(i, &bg)).collect();
                    pooled.extend(bg.iter().map(|&i| min_dist(i, &bp)));
                    Some(percentile_nearest_rank(&mut pooled, 0.95))
                }
            };
            assert_eq!(fast_hd[c], expect, "[A8] hd95 trial {trial} class {c}");
            checked += 1;
        }
    }

    // ssim self-similarity is exactly 1
    let mut rng2 = Rng::new(0xa8a);
    let x = Volume::from_tensor(Tensor::from_vec(
        &[16, 16, 16],
        (0..4096).map(|_| rng2.next_f64()).collect(),
    ))
    .unwrap();
    let eval = mean_ssim(&x, &x, 8, SSIM_WINDOW);
    check(
        "A8",
        eval.mean == 1.0 && checked > 0,
        format!(
            "50 random mask pairs ({checked} class comparisons) match brute force exactly; \
             hd95 symmetric; ssim(x, x) = {} exactly",
            eval.mean
        ),
    );
}

/// A9: re-running any command with identical config and seed yields an
/// identical report.json (high-precision mode).
#[test]
fn a9_determinism() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("a9");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let data_dir = root.join("data");
    let base = format!(
        "[run]\nseed = 13\nworkers = 2\nprecision = 64\n\n[data]\ndir = {}\nextent = 16\n\
         num_class = 3\ntrain_count = 2\ntest_count = 2\nradius_min = 3\nradius_max = 5\n\
         shapes_per_class = 1\n",
        data_dir.display()
    );
    let run = |args: &[&str]| {
        let code = vafa_cli::run_cli(&args.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        assert_eq!(code, 0, "[A9] command failed: {args:?}");
    };
    let write = |name: &str, body: &str| {
        let p = root.join(name);
        std::fs::write(&p, body).unwrap();
        p
    };

    let gen_cfg = write("gen.ini", &base);
    let mut reports: Vec<(String, Vec<u8>, Vec<u8>)> = Vec::new();

    for (label, out1, out2) in [("gen-data", "g1", "g2")] {
        run(&[label, "--config", gen_cfg.to_str().unwrap(), "--out", root.join(out1).to_str().unwrap()]);
        run(&[label, "--config", gen_cfg.to_str().unwrap(), "--out", root.join(out2).to_str().unwrap()]);
        reports.push((
            label.to_string(),
            std::fs::read(root.join(out1).join("report.json")).unwrap(),
            std::fs::read(root.join(out2).join("report.json")).unwrap(),
        ));
    }

    let train_cfg = write(
        "train.ini",
        &format!("{base}\n[train]\nmode = standard\nepochs = 2\nbatch_size = 2\nlr = 0.1\n"),
    );
    run(&["train", "--config", train_cfg.to_str().unwrap(), "--out", root.join("t1").to_str().unwrap()]);
    run(&["train", "--config", train_cfg.to_str().unwrap(), "--out", root.join("t2").to_str().unwrap()]);
    reports.push((
        "train".into(),
        std::fs::read(root.join("t1/report.json")).unwrap(),
        std::fs::read(root.join("t2/report.json")).unwrap(),
    ));

    let attack_cfg = write(
        "attack.ini",
        &format!(
            "{base}\n[model]\ncheckpoint = {}\n\n[attack]\nkind = vafa\nsteps = 2\nq_max = 20\n\
             patch_size = 8\nssim_window = 3\n",
            root.join("t1/model.ckpt").display()
        ),
    );
    run(&["attack", "--config", attack_cfg.to_str().unwrap(), "--out", root.join("a1").to_str().unwrap()]);
    run(&["attack", "--config", attack_cfg.to_str().unwrap(), "--out", root.join("a2").to_str().unwrap()]);
    reports.push((
        "attack".into(),
        std::fs::read(root.join("a1/report.json")).unwrap(),
        std::fs::read(root.join("a2/report.json")).unwrap(),
    ));

    let mut all_equal = true;
    for (label, r1, r2) in &reports {
        if r1 != r2 {
            all_equal = false;
            println!("[A9] report.json differs for {label}");
        }
    }
    check(
        "A9",
        all_equal,
        format!("{} commands re-run byte-identically (gen-data, train, attack)", reports.len()),
    );
}

/// With q_max = 1 the table is pinned at all-ones, so the attack reduces
/// to integer rounding of scaled DCT coefficients: a near-identity.
#[test]
fn vafa_with_unit_qmax_is_near_identity() {
    let (model, _) = standard_model();
    let clean = clean_mean_dsc(model);
    let sweep = attack_sweep("vafa_q1", model, &eval_attack_config(AttackKind::Vafa, 1, 1.0, 8.0));
    let drop = clean - sweep.mean_dsc();
    check(
        "INV-qmax1-near-identity",
        drop < 0.02,
        format!("clean {clean:.4}, q_max=1 DSC {:.4} (drop {drop:.4} < 0.02)", sweep.mean_dsc()),
    );
}

/// Voxel-domain adversarial training helps against its own attack: the
/// PGD-trained model scores higher under PGD than the standard model.
#[test]
fn adv_voxel_training_confers_pgd_robustness() {
    let (std_model, _) = standard_model();
    let pgd_cfg = eval_attack_config(AttackKind::Pgd, 20, 20.0, 8.0);
    let std_under = attack_sweep("pgd_e8_s20", std_model, &pgd_cfg);
    let adv_under = attack_sweep("advvox_under_pgd", adv_voxel_model(), &pgd_cfg);
    check(
        "INV-advvoxel-pgd",
        adv_under.mean_dsc() > std_under.mean_dsc(),
        format!(
            "PGD DSC: adv-voxel-trained {:.4} > standard {:.4}",
            adv_under.mean_dsc(),
            std_under.mean_dsc()
        ),
    );
}

/// fpm-attacks invariant: the attack objective is non-decreasing over the
/// optimization steps for at least 90% of samples.
#[test]
fn objective_trace_mostly_monotone() {
    let (model, _) = standard_model();
    let sweep = attack_sweep("vafa_q20_s20", model, &eval_attack_config(AttackKind::Vafa, 20, 20.0, 8.0));
    let fraction = sweep.monotone_samples as f64 / sweep.samples as f64;
    check(
        "INV-monotone-objective",
        fraction >= 0.90,
        format!(
            "objective trace non-decreasing for {}/{} samples ({:.0}%)",
            sweep.monotone_samples,
            sweep.samples,
            fraction * 100.0
        ),
    );
}

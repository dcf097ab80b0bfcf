// temporary A4/A5 calibration probe, deleted before release
use vafa_core::attacks::{attack, AttackConfig, AttackKind};
use vafa_core::autodiff::Precision;
use vafa_core::metrics::dsc;
use vafa_core::model::SegModel;
use vafa_core::parallel::par_map;
use vafa_core::synth::{generate_split, SynthSpec};
use vafa_core::train::{train_standard, TrainConfig, TrainMode};
use vafa_core::volume::{LabelField, Volume};

fn eval_attack(
    model: &SegModel,
    test: &[(Volume, LabelField)],
    kind: AttackKind,
    steps: usize,
    q_max: f64,
    epsilon: f64,
) -> (f64, f64) {
    let scores: Vec<(f64, f64)> = par_map(test, 0, |i, (x, y)| {
        let mut cfg = AttackConfig::new(kind);
        cfg.steps = steps;
        cfg.q_max = q_max;
        cfg.epsilon = epsilon;
        cfg.seed = 1000 + i as u64;
        let r = attack(x, y, model, &cfg, Precision::F64).unwrap();
        let d = dsc(&model.predict_labels(&r.adversarial, Precision::F64), y).1;
        (d, r.mean_ssim)
    });
    let n = scores.len() as f64;
    (
        scores.iter().map(|s| s.0).sum::<f64>() / n,
        scores.iter().map(|s| s.1).sum::<f64>() / n,
    )
}

#[test]
#[ignore]
fn a4_a5_calibration() {
    let spec = SynthSpec::default(); // 40 train / 10 test, 64^3, 4 classes
    let t0 = std::time::Instant::now();
    let (train, test) = generate_split(&spec, 0).unwrap();
    println!("dataset: {:?}", t0.elapsed());

    let mut tc = TrainConfig::new(TrainMode::Standard);
    tc.epochs = 30;
    tc.batch_size = 4;
    tc.lr = 0.2;
    tc.momentum = 0.9;
    let t0 = std::time::Instant::now();
    let (model, report) =
        train_standard(SegModel::init(4, 7), &train, &tc, Precision::F64, 0, None).unwrap();
    println!(
        "train 30 epochs: {:?}  loss curve (every 5): {:?}",
        t0.elapsed(),
        report.epochs.iter().step_by(5).map(|e| (e.clean_loss * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );

    let clean: f64 = test
        .iter()
        .map(|(x, y)| dsc(&model.predict_labels(x, Precision::F64), y).1)
        .sum::<f64>()
        / test.len() as f64;
    println!("A4 clean test DSC = {clean:.4} (need >= 0.90)");

    let t0 = std::time::Instant::now();
    let (vafa_dsc, vafa_ssim) = eval_attack(&model, &test, AttackKind::Vafa, 20, 20.0, 8.0);
    println!("VAFA  q20 s20: DSC {vafa_dsc:.4} ssim {vafa_ssim:.4}  ({:?})", t0.elapsed());
    let (vafa2d_dsc, vafa2d_ssim) = eval_attack(&model, &test, AttackKind::Vafa2d, 20, 20.0, 8.0);
    println!("VAFA2D q20 s20: DSC {vafa2d_dsc:.4} ssim {vafa2d_ssim:.4}");
    let (pgd_dsc, _) = eval_attack(&model, &test, AttackKind::Pgd, 20, 20.0, 8.0);
    println!("PGD   eps8 s20: DSC {pgd_dsc:.4}");
    let (gn_dsc, _) = eval_attack(&model, &test, AttackKind::Gn, 20, 20.0, 8.0);
    println!("GN    eps8:     DSC {gn_dsc:.4}");

    println!("\nA5 checks:");
    println!("  VAFA drop {:.4} (need >= 0.20)", clean - vafa_dsc);
    println!("  VAFA {vafa_dsc:.4} <= VAFA2D {vafa2d_dsc:.4}: {}", vafa_dsc <= vafa2d_dsc);
    println!("  PGD {pgd_dsc:.4} <= GN {gn_dsc:.4} - 0.05: {}", pgd_dsc <= gn_dsc - 0.05);
}

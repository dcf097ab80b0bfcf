// temporary timing probe, deleted before release
use std::time::Instant;

use vafa_core::attacks::{attack, AttackConfig, AttackKind};
use vafa_core::autodiff::{Precision, Tape};
use vafa_core::losses::dice_loss;
use vafa_core::metrics::dsc;
use vafa_core::model::SegModel;
use vafa_core::synth::{generate_split, SynthSpec};
use vafa_core::train::{train_standard, TrainConfig, TrainMode};

#[test]
#[ignore]
fn timing_probe() {
    let spec = SynthSpec { train_count: 4, test_count: 2, ..SynthSpec::default() };
    let t0 = Instant::now();
    let (train, test) = generate_split(&spec, 0).unwrap();
    println!("gen 6 samples: {:?}", t0.elapsed());

    let model = SegModel::init(4, 7);

    // forward only
    let t0 = Instant::now();
    let logits = model.predict_logits(&train[0].0, Precision::F64);
    println!("forward 64^3: {:?}  (max |logit| {:.3})", t0.elapsed(), logits.max_abs());

    // forward + backward wrt input
    let t0 = Instant::now();
    let tape = Tape::new(Precision::F64);
    let xv = tape.param(train[0].0.tensor().clone());
    let lg = model.forward_frozen(&tape, xv);
    let loss = dice_loss(&tape, lg, &train[0].1);
    let g = tape.backward(loss.node, &[xv]);
    println!("fwd+bwd(input) 64^3: {:?} (|g| {:.3e})", t0.elapsed(), g[0].max_abs());

    // forward + backward wrt params
    let t0 = Instant::now();
    let tape = Tape::new(Precision::F64);
    let xv = tape.constant(train[0].0.tensor().clone());
    let (lg, pv) = model.forward_trainable(&tape, xv);
    let loss = dice_loss(&tape, lg, &train[0].1);
    let _g = tape.backward(loss.node, &pv.all());
    println!("fwd+bwd(params) 64^3: {:?}", t0.elapsed());

    // one VAFA step cost
    let mut cfg = AttackConfig::new(AttackKind::Vafa);
    cfg.steps = 2;
    let t0 = Instant::now();
    let r = attack(&test[0].0, &test[0].1, &model, &cfg, Precision::F64).unwrap();
    println!("vafa 2 steps: {:?} (ssim {:.4})", t0.elapsed(), r.mean_ssim);

    // short training run to see loss movement
    let mut tc = TrainConfig::new(TrainMode::Standard);
    tc.epochs = 3;
    tc.batch_size = 4;
    let t0 = Instant::now();
    let (m2, report) = train_standard(model, &train, &tc, Precision::F64, 0, None).unwrap();
    println!("3 epochs x 4 samples: {:?}", t0.elapsed());
    for e in &report.epochs {
        println!("  epoch {}: clean {:.4}", e.epoch, e.clean_loss);
    }
    let mean: f64 =
        test.iter().map(|(x, y)| dsc(&m2.predict_labels(x, Precision::F64), y).1).sum::<f64>()
            / test.len() as f64;
    println!("test DSC after 3 epochs: {:.4}", mean);
}

// temporary diagnosis probe, deleted before release
use vafa_core::autodiff::Precision;
use vafa_core::metrics::dsc;
use vafa_core::model::SegModel;
use vafa_core::synth::{generate_split, SynthSpec};
use vafa_core::train::{train_standard, TrainConfig, TrainMode};

#[test]
#[ignore]
fn per_class_diagnosis() {
    let spec = SynthSpec { train_count: 8, test_count: 4, ..SynthSpec::default() };
    let (train, test) = generate_split(&spec, 0).unwrap();

    // ground-truth class fractions
    let counts = train[0].1.class_counts();
    println!("gt class fractions: {:?}", counts.iter().map(|&c| c as f64 / 262144.0).collect::<Vec<_>>());

    let mut tc = TrainConfig::new(TrainMode::Standard);
    tc.epochs = 25;
    tc.batch_size = 4;
    tc.lr = 0.1;
    let model = SegModel::init(4, 7);
    let (m2, report) = train_standard(model, &train, &tc, Precision::F64, 0, None).unwrap();
    for e in report.epochs.iter().step_by(3) {
        println!("epoch {}: clean {:.4}", e.epoch, e.clean_loss);
    }
    for (i, (x, y)) in test.iter().enumerate() {
        let pred = m2.predict_labels(x, Precision::F64);
        let (per, mean) = dsc(&pred, y);
        println!(
            "test {i}: mean {:.3} per-class {:?} pred-counts {:?}",
            mean,
            per.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            pred.class_counts()
        );
    }
}

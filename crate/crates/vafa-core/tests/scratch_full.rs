// temporary full-scale probe, deleted before release
use vafa_core::autodiff::Precision;
use vafa_core::metrics::dsc;
use vafa_core::model::SegModel;
use vafa_core::synth::{generate_split, SynthSpec};
use vafa_core::train::{train_standard, TrainConfig, TrainMode};

#[test]
#[ignore]
fn full_scale_sweep() {
    let spec = SynthSpec { train_count: 12, test_count: 4, ..SynthSpec::default() };
    let (train, test) = generate_split(&spec, 0).unwrap();

    for (lr, mom, epochs) in [(0.1, 0.9, 50), (0.2, 0.9, 50), (0.3, 0.8, 50)] {
        let mut tc = TrainConfig::new(TrainMode::Standard);
        tc.epochs = epochs;
        tc.batch_size = 4;
        tc.lr = lr;
        tc.momentum = mom;
        let t0 = std::time::Instant::now();
        let (m, report) =
            train_standard(SegModel::init(4, 7), &train, &tc, Precision::F64, 0, None).unwrap();
        let losses: Vec<String> = report
            .epochs
            .iter()
            .step_by(10)
            .map(|e| format!("{:.3}", e.clean_loss))
            .collect();
        let mut per_mean = vec![0.0; 4];
        let mut mean = 0.0;
        for (x, y) in &test {
            let (per, m_) = dsc(&m.predict_labels(x, Precision::F64), y);
            for (a, b) in per_mean.iter_mut().zip(per) {
                *a += b / test.len() as f64;
            }
            mean += m_ / test.len() as f64;
        }
        let per_mean: Vec<f64> = per_mean.iter().map(|v| (v * 100.0).round() / 100.0).collect();
        println!(
            "lr {lr} mom {mom} ep {epochs}: losses {} | test DSC {mean:.3} per-class {per_mean:?} | {:.0}s",
            losses.join(" "),
            t0.elapsed().as_secs_f64()
        );
    }
}

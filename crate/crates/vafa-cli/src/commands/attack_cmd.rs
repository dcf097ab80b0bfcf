//! `attack`: run the configured attack against a checkpoint over the test
//! split; emit per-sample metrics, mean diagnostics, and slice images.

use vafa_core::attacks::{attack, AttackResult};
use vafa_core::metrics::MetricsReport;
use vafa_core::model::SegModel;
use vafa_core::parallel::par_map;
use vafa_core::rng::fnv1a64;
use vafa_core::volfile;
use vafa_core::volume::{LabelField, Volume};

use super::{io_err, mean, mean_defined, write_text, CmdError};
use crate::config::RunConfig;
use crate::pgm;
use crate::report::{Csv, CsvCell, Json};

pub struct SampleOutcome {
    pub clean_dsc: f64,
    pub report: MetricsReport,
    pub final_objective: Option<f64>,
    pub result: AttackResult,
}

/// Attacks one sample and scores the result against the ground truth.
pub fn attack_and_score(
    model: &SegModel,
    x: &Volume,
    y: &LabelField,
    cfg: &RunConfig,
    attack_cfg: &vafa_core::attacks::AttackConfig,
    sample: usize,
) -> Result<SampleOutcome, CmdError> {
    let mut atk = attack_cfg.clone();
    // per-sample stream so parallel evaluation order cannot matter
    atk.seed = cfg.seed ^ fnv1a64(atk.kind.name().as_bytes()) ^ (sample as u64).wrapping_mul(0x9e37);
    let result = attack(x, y, model, &atk, cfg.precision)
        .map_err(|e| CmdError::Numerical(format!("sample {sample}: {e}")))?;
    let clean_dsc = {
        let pred = model.predict_labels(x, cfg.precision);
        vafa_core::metrics::dsc(&pred, y).1
    };
    let pred = model.predict_labels(&result.adversarial, cfg.precision);
    let report = MetricsReport::compute(&pred, y).with_ssim(result.mean_ssim, result.ssim_window);
    let final_objective = result.trace.last().map(|d| d.objective);
    Ok(SampleOutcome { clean_dsc, report, final_objective, result })
}

pub fn run(cfg: &RunConfig) -> Result<(), CmdError> {
    let model = SegModel::load(cfg.model_path.as_ref().expect("validated"))
        .map_err(|e| CmdError::Io(format!("load checkpoint: {e}")))?;
    let test = volfile::load_split(&cfg.data_dir, "test")
        .map_err(|e| CmdError::Io(format!("load test split: {e}")))?;
    if test.is_empty() {
        return Err(CmdError::Numerical("test split is empty".into()));
    }

    let model_ref = &model;
    let outcomes: Vec<Result<SampleOutcome, CmdError>> = par_map(&test, cfg.workers, |i, (x, y)| {
        attack_and_score(model_ref, x, y, cfg, &cfg.attack, i)
    });
    let mut rows = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        rows.push(o?);
    }

    let mut csv = Csv::new(&[
        "sample",
        "attack",
        "clean_dsc",
        "adv_dsc",
        "adv_hd95",
        "hd95_undefined",
        "ssim",
        "final_objective",
    ]);
    for (i, r) in rows.iter().enumerate() {
        csv.row(&[
            CsvCell::Int(i as i64),
            CsvCell::Str(cfg.attack.kind.name().into()),
            CsvCell::Num(r.clean_dsc),
            CsvCell::Num(r.report.mean_dsc),
            CsvCell::OptNum(r.report.mean_hd95),
            CsvCell::Int(r.report.hd95_undefined as i64),
            CsvCell::OptNum(r.report.mean_ssim_vs_clean),
            CsvCell::OptNum(r.final_objective),
        ]);
    }
    write_text(&cfg.out.join("per_sample.csv"), &csv.finish())?;

    // per-step optimizer diagnostics
    let mut steps = Csv::new(&["sample", "step", "objective", "dice_loss", "ssim_loss"]);
    for (i, r) in rows.iter().enumerate() {
        for d in &r.result.trace {
            steps.row(&[
                CsvCell::Int(i as i64),
                CsvCell::Int(d.step as i64),
                CsvCell::Num(d.objective),
                CsvCell::Num(d.dice_loss),
                CsvCell::OptNum(d.ssim_loss),
            ]);
        }
    }
    write_text(&cfg.out.join("steps.csv"), &steps.finish())?;

    // slices of the first sample
    let slices = cfg.out.join("slices");
    std::fs::create_dir_all(&slices).map_err(io_err("create slices dir"))?;
    {
        let (x, y) = &test[0];
        let adv = &rows[0].result.adversarial;
        let mid = x.extent()[2] / 2;
        let err = |e: vafa_core::error::VolumeError| CmdError::Io(e.to_string());
        pgm::render_volume_slice(x, 2, mid, &slices.join("x.pgm")).map_err(err)?;
        pgm::render_volume_slice(adv, 2, mid, &slices.join("x_adv.pgm")).map_err(err)?;
        pgm::render_label_slice(y, 2, mid, &slices.join("gt.pgm")).map_err(err)?;
        pgm::render_label_slice(
            &model.predict_labels(x, cfg.precision),
            2,
            mid,
            &slices.join("pred_clean.pgm"),
        )
        .map_err(err)?;
        pgm::render_label_slice(
            &model.predict_labels(adv, cfg.precision),
            2,
            mid,
            &slices.join("pred_adv.pgm"),
        )
        .map_err(err)?;
    }

    // mean per-step objective trace across samples (frequency attacks)
    let trace_len = rows.iter().map(|r| r.result.trace.len()).min().unwrap_or(0);
    let mean_trace: Vec<f64> = (0..trace_len)
        .map(|s| mean(&rows.iter().map(|r| r.result.trace[s].objective).collect::<Vec<_>>()))
        .collect();

    let mut j = super::config_echo(cfg);
    let mut a = Json::obj();
    a.push("kind", Json::Str(cfg.attack.kind.name().into()));
    a.push("steps", Json::Int(cfg.attack.steps as i64));
    a.push("q_max", Json::Num(cfg.attack.q_max));
    a.push("patch_size", Json::Int(cfg.attack.patch_side as i64));
    a.push("epsilon", Json::Num(cfg.attack.epsilon));
    j.push("attack", a);
    let mut res = Json::obj();
    res.push("samples", Json::Int(rows.len() as i64));
    res.push("mean_clean_dsc", Json::Num(mean(&rows.iter().map(|r| r.clean_dsc).collect::<Vec<_>>())));
    res.push(
        "mean_adv_dsc",
        Json::Num(mean(&rows.iter().map(|r| r.report.mean_dsc).collect::<Vec<_>>())),
    );
    res.push(
        "mean_adv_hd95",
        Json::opt_num(mean_defined(
            &rows.iter().map(|r| r.report.mean_hd95).collect::<Vec<_>>(),
        )),
    );
    res.push(
        "mean_ssim",
        Json::opt_num(mean_defined(
            &rows.iter().map(|r| r.report.mean_ssim_vs_clean).collect::<Vec<_>>(),
        )),
    );
    res.push("mean_objective_trace", Json::num_arr(&mean_trace));
    j.push("results", res);
    write_text(&cfg.out.join("report.json"), &j.render())
}

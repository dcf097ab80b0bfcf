//! `eval`: clean-data metrics for one checkpoint over the test split.

use vafa_core::metrics::MetricsReport;
use vafa_core::model::SegModel;
use vafa_core::parallel::par_map;
use vafa_core::volfile;

use super::{io_err, mean, mean_defined, write_text, CmdError};
use crate::config::RunConfig;
use crate::pgm;
use crate::report::{Csv, CsvCell, Json};

pub fn run(cfg: &RunConfig) -> Result<(), CmdError> {
    let model = SegModel::load(cfg.model_path.as_ref().expect("validated"))
        .map_err(|e| CmdError::Io(format!("load checkpoint: {e}")))?;
    let test = volfile::load_split(&cfg.data_dir, "test")
        .map_err(|e| CmdError::Io(format!("load test split: {e}")))?;
    if test.is_empty() {
        return Err(CmdError::Numerical("test split is empty".into()));
    }

    let model_ref = &model;
    let reports: Vec<MetricsReport> = par_map(&test, cfg.workers, |_, (x, y)| {
        MetricsReport::compute(&model_ref.predict_labels(x, cfg.precision), y)
    });

    let mut csv = Csv::new(&["sample", "dsc", "hd95", "hd95_undefined"]);
    for (i, r) in reports.iter().enumerate() {
        csv.row(&[
            CsvCell::Int(i as i64),
            CsvCell::Num(r.mean_dsc),
            CsvCell::OptNum(r.mean_hd95),
            CsvCell::Int(r.hd95_undefined as i64),
        ]);
    }
    write_text(&cfg.out.join("per_sample.csv"), &csv.finish())?;

    let slices = cfg.out.join("slices");
    std::fs::create_dir_all(&slices).map_err(io_err("create slices dir"))?;
    {
        let (x, y) = &test[0];
        let mid = x.extent()[2] / 2;
        let err = |e: vafa_core::error::VolumeError| CmdError::Io(e.to_string());
        pgm::render_volume_slice(x, 2, mid, &slices.join("x.pgm")).map_err(err)?;
        pgm::render_label_slice(y, 2, mid, &slices.join("gt.pgm")).map_err(err)?;
        pgm::render_label_slice(
            &model.predict_labels(x, cfg.precision),
            2,
            mid,
            &slices.join("pred.pgm"),
        )
        .map_err(err)?;
    }

    let mut j = super::config_echo(cfg);
    let mut res = Json::obj();
    res.push("samples", Json::Int(reports.len() as i64));
    res.push("mean_dsc", Json::Num(mean(&reports.iter().map(|r| r.mean_dsc).collect::<Vec<_>>())));
    res.push(
        "mean_hd95",
        Json::opt_num(mean_defined(&reports.iter().map(|r| r.mean_hd95).collect::<Vec<_>>())),
    );
    res.push(
        "hd95_undefined_total",
        Json::Int(reports.iter().map(|r| r.hd95_undefined as i64).sum()),
    );
    j.push("results", res);
    write_text(&cfg.out.join("report.json"), &j.render())
}

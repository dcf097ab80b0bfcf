//! `compare`: models x attacks grid over the test split, mirroring the
//! shape of a robustness comparison table. The "clean" pseudo-attack
//! column is marked in the report; every grid cell is the mean of the
//! matching per_sample.csv rows.

use vafa_core::attacks::AttackKind;
use vafa_core::metrics::MetricsReport;
use vafa_core::model::SegModel;
use vafa_core::parallel::par_map;
use vafa_core::volfile;

use super::attack_cmd::attack_and_score;
use super::{mean, mean_defined, write_text, CmdError};
use crate::config::RunConfig;
use crate::report::{Csv, CsvCell, Json};

struct Cell {
    dsc: Vec<f64>,
    hd95: Vec<Option<f64>>,
    hd95_undefined: usize,
    ssim: Vec<Option<f64>>,
}

pub fn run(cfg: &RunConfig) -> Result<(), CmdError> {
    let test = volfile::load_split(&cfg.data_dir, "test")
        .map_err(|e| CmdError::Io(format!("load test split: {e}")))?;
    if test.is_empty() {
        return Err(CmdError::Numerical("test split is empty".into()));
    }

    let mut csv = Csv::new(&[
        "model",
        "attack",
        "sample",
        "dsc",
        "hd95",
        "hd95_undefined",
        "ssim",
    ]);
    let mut grid: Vec<(String, Vec<(String, Cell)>)> = Vec::new();

    for (model_name, path) in &cfg.compare_models {
        let model = SegModel::load(path)
            .map_err(|e| CmdError::Io(format!("load checkpoint {model_name}: {e}")))?;
        let model_ref = &model;
        let mut row = Vec::new();
        for attack_name in &cfg.compare_attacks {
            let per_sample: Vec<Result<(f64, Option<f64>, usize, Option<f64>), CmdError>> =
                par_map(&test, cfg.workers, |i, (x, y)| {
                    if attack_name == "clean" {
                        let report =
                            MetricsReport::compute(&model_ref.predict_labels(x, cfg.precision), y);
                        Ok((report.mean_dsc, report.mean_hd95, report.hd95_undefined, None))
                    } else {
                        let kind = AttackKind::parse(attack_name).expect("validated");
                        let mut atk = cfg.attack.clone();
                        atk.kind = kind;
                        let o = attack_and_score(model_ref, x, y, cfg, &atk, i)?;
                        Ok((
                            o.report.mean_dsc,
                            o.report.mean_hd95,
                            o.report.hd95_undefined,
                            o.report.mean_ssim_vs_clean,
                        ))
                    }
                });
            let mut cell = Cell {
                dsc: Vec::new(),
                hd95: Vec::new(),
                hd95_undefined: 0,
                ssim: Vec::new(),
            };
            for (i, r) in per_sample.into_iter().enumerate() {
                let (dsc, hd95, undef, ssim) = r?;
                csv.row(&[
                    CsvCell::Str(model_name.clone()),
                    CsvCell::Str(attack_name.clone()),
                    CsvCell::Int(i as i64),
                    CsvCell::Num(dsc),
                    CsvCell::OptNum(hd95),
                    CsvCell::Int(undef as i64),
                    CsvCell::OptNum(ssim),
                ]);
                cell.dsc.push(dsc);
                cell.hd95.push(hd95);
                cell.hd95_undefined += undef;
                cell.ssim.push(ssim);
            }
            row.push((attack_name.clone(), cell));
        }
        grid.push((model_name.clone(), row));
    }
    write_text(&cfg.out.join("per_sample.csv"), &csv.finish())?;

    let mut j = super::config_echo(cfg);
    let mut a = Json::obj();
    a.push("steps", Json::Int(cfg.attack.steps as i64));
    a.push("q_max", Json::Num(cfg.attack.q_max));
    a.push("patch_size", Json::Int(cfg.attack.patch_side as i64));
    a.push("epsilon", Json::Num(cfg.attack.epsilon));
    j.push("attack", a);
    let mut models = Json::obj();
    for (model_name, row) in &grid {
        let mut attacks = Json::obj();
        for (attack_name, cell) in row {
            let mut c = Json::obj();
            c.push("clean", Json::Bool(attack_name == "clean"));
            c.push("mean_dsc", Json::Num(mean(&cell.dsc)));
            c.push("mean_hd95", Json::opt_num(mean_defined(&cell.hd95)));
            c.push("hd95_undefined_total", Json::Int(cell.hd95_undefined as i64));
            c.push("mean_ssim", Json::opt_num(mean_defined(&cell.ssim)));
            attacks.push(attack_name, c);
        }
        models.push(model_name, attacks);
    }
    j.push("grid", models);
    write_text(&cfg.out.join("report.json"), &j.render())
}

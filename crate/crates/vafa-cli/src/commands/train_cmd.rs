//! `train`: fit a model on the dataset's train split per `[train]`,
//! checkpointing to the output directory.

use vafa_core::metrics::dsc;
use vafa_core::model::SegModel;
use vafa_core::parallel::par_map;
use vafa_core::train::{self, TrainError};
use vafa_core::volfile;

use super::{io_err, write_text, CmdError};
use crate::config::RunConfig;
use crate::report::{Csv, CsvCell, Json};

pub fn run(cfg: &RunConfig) -> Result<(), CmdError> {
    let data = volfile::load_split(&cfg.data_dir, "train")
        .map_err(|e| CmdError::Io(format!("load train split: {e}")))?;
    if data.is_empty() {
        return Err(CmdError::Numerical("train split is empty".into()));
    }
    let num_class = data[0].1.num_class();

    let model = match &cfg.model_path {
        Some(p) => SegModel::load(p)
            .map_err(|e| CmdError::Io(format!("load warm-start checkpoint: {e}")))?,
        None => SegModel::init(num_class, cfg.seed),
    };

    let ckpt_dir = cfg.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(io_err("create checkpoints dir"))?;
    let mut hook_failed: Option<String> = None;
    let result = {
        let mut hook = |epoch: usize, m: &SegModel, _log: &train::EpochLog| {
            let path = ckpt_dir.join(format!("epoch_{epoch:04}.ckpt"));
            if let Err(e) = m.save(&path) {
                hook_failed = Some(format!("save {}: {e}", path.display()));
            }
        };
        train::train(model, &data, &cfg.train, cfg.precision, cfg.workers, Some(&mut hook))
    };
    if let Some(msg) = hook_failed {
        return Err(CmdError::Io(msg));
    }

    let (model, report) = match result {
        Ok(pair) => pair,
        Err(TrainError::Config(e)) => return Err(CmdError::Numerical(e.to_string())),
        Err(e @ TrainError::NonFinite { .. }) => {
            // keep the last good checkpoint next to the failure marker
            if let TrainError::NonFinite { last_good, .. } = &e {
                let _ = last_good.save(&cfg.out.join("model.ckpt"));
            }
            return Err(CmdError::Numerical(e.to_string()));
        }
    };
    model
        .save(&cfg.out.join("model.ckpt"))
        .map_err(|e| CmdError::Io(format!("save final checkpoint: {e}")))?;

    // loss curves
    let mut curves = Csv::new(&["epoch", "clean_loss", "adv_loss", "fr_loss", "total_loss"]);
    for e in &report.epochs {
        curves.row(&[
            CsvCell::Int(e.epoch as i64),
            CsvCell::Num(e.clean_loss),
            CsvCell::OptNum(e.adv_loss),
            CsvCell::OptNum(e.fr_loss),
            CsvCell::Num(e.total_loss),
        ]);
    }
    write_text(&cfg.out.join("epochs.csv"), &curves.finish())?;

    // final model on each training sample
    let precision = cfg.precision;
    let model_ref = &model;
    let per_sample: Vec<f64> = par_map(&data, cfg.workers, |_, (x, y)| {
        dsc(&model_ref.predict_labels(x, precision), y).1
    });
    let mut csv = Csv::new(&["sample", "train_dsc"]);
    for (i, d) in per_sample.iter().enumerate() {
        csv.row(&[CsvCell::Int(i as i64), CsvCell::Num(*d)]);
    }
    write_text(&cfg.out.join("per_sample.csv"), &csv.finish())?;

    let mut j = super::config_echo(cfg);
    let mut t = Json::obj();
    t.push("mode", Json::Str(report.mode.name().into()));
    t.push("epochs", Json::Int(cfg.train.epochs as i64));
    t.push("batch_size", Json::Int(cfg.train.batch_size as i64));
    t.push("lr", Json::Num(cfg.train.lr));
    t.push("momentum", Json::Num(cfg.train.momentum));
    t.push("lambda_fr", Json::Num(cfg.train.lambda_fr));
    if report.mode.is_adversarial() {
        let mut a = Json::obj();
        a.push("kind", Json::Str(cfg.train.attack.kind.name().into()));
        a.push("steps", Json::Int(cfg.train.attack.steps as i64));
        a.push("q_max", Json::Num(cfg.train.attack.q_max));
        a.push("patch_size", Json::Int(cfg.train.attack.patch_side as i64));
        a.push("epsilon", Json::Num(cfg.train.attack.epsilon));
        t.push("attack", a);
    }
    j.push("train", t);
    let mut res = Json::obj();
    res.push("final_clean_dsc", Json::Num(report.final_clean_dsc));
    res.push("final_adv_dsc", Json::opt_num(report.final_adv_dsc));
    res.push(
        "loss_curve",
        Json::num_arr(&report.epochs.iter().map(|e| e.total_loss).collect::<Vec<_>>()),
    );
    j.push("results", res);
    write_text(&cfg.out.join("report.json"), &j.render())
}

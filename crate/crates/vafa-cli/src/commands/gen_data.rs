//! `gen-data`: synthesize the dataset directory (train/, test/,
//! manifest.txt) and record checksums in the report.

use vafa_core::synth;
use vafa_core::volfile;

use super::{io_err, mean, write_text, CmdError};
use crate::config::RunConfig;
use crate::pgm;
use crate::report::{Csv, CsvCell, Json};

pub fn run(cfg: &RunConfig) -> Result<(), CmdError> {
    let (train, test) = synth::generate_split(&cfg.synth, cfg.workers)
        .map_err(|e| CmdError::Numerical(format!("dataset generation failed: {e}")))?;
    std::fs::create_dir_all(&cfg.data_dir).map_err(io_err("create data dir"))?;
    volfile::save_dataset(&cfg.data_dir, &train, &test)
        .map_err(|e| CmdError::Io(format!("save dataset: {e}")))?;
    let manifest = volfile::read_manifest(&cfg.data_dir)
        .map_err(|e| CmdError::Io(format!("read manifest: {e}")))?;

    let mut csv = Csv::new(&["file", "checksum", "foreground_fraction"]);
    let mut fractions = Vec::new();
    for (split, samples) in [("train", &train), ("test", &test)] {
        for (i, (_, labels)) in samples.iter().enumerate() {
            let counts = labels.class_counts();
            let total: usize = counts.iter().sum();
            let fg = 1.0 - counts[0] as f64 / total as f64;
            fractions.push(fg);
            csv.row(&[
                CsvCell::Str(format!("{split}/sample_{i:03}.vvol")),
                CsvCell::Str(format!(
                    "{:016x}",
                    manifest
                        .iter()
                        .find(|(name, _)| name == &format!("{split}/sample_{i:03}.vvol"))
                        .map(|(_, sum)| *sum)
                        .unwrap_or(0)
                )),
                CsvCell::Num(fg),
            ]);
        }
    }
    write_text(&cfg.out.join("per_sample.csv"), &csv.finish())?;

    // qualitative slices of the first test sample
    let slices = cfg.out.join("slices");
    std::fs::create_dir_all(&slices).map_err(io_err("create slices dir"))?;
    if let Some((x, y)) = test.first() {
        let mid = x.extent()[2] / 2;
        pgm::render_volume_slice(x, 2, mid, &slices.join("sample_x.pgm"))
            .map_err(|e| CmdError::Io(e.to_string()))?;
        pgm::render_label_slice(y, 2, mid, &slices.join("sample_gt.pgm"))
            .map_err(|e| CmdError::Io(e.to_string()))?;
    }

    let mut report = super::config_echo(cfg);
    let mut data = Json::obj();
    data.push("extent", Json::Int(cfg.synth.extent[0] as i64));
    data.push("num_class", Json::Int(cfg.synth.num_class as i64));
    data.push("train_count", Json::Int(train.len() as i64));
    data.push("test_count", Json::Int(test.len() as i64));
    data.push("noise_sigma", Json::Num(cfg.synth.noise_sigma));
    data.push("texture_amp", Json::Num(cfg.synth.texture_amp));
    data.push("texture_freq", Json::Num(cfg.synth.texture_freq));
    data.push("mean_foreground_fraction", Json::Num(mean(&fractions)));
    report.push("data", data);
    let manifest_json = Json::Arr(
        manifest
            .iter()
            .map(|(name, sum)| {
                let mut e = Json::obj();
                e.push("file", Json::Str(name.clone()));
                e.push("checksum", Json::Str(format!("{sum:016x}")));
                e
            })
            .collect(),
    );
    report.push("manifest", manifest_json);
    write_text(&cfg.out.join("report.json"), &report.render())
}

//! Line-oriented `key = value` configuration with `[section]` headers,
//! `#` comments, environment overrides, and field-level validation.
//!
//! Every key can be overridden by an environment variable named
//! `VAFA_<SECTION>_<KEY>` (uppercased, e.g. `VAFA_ATTACK_Q_MAX=30`), and
//! the run-level keys by CLI flags, with precedence
//! flags > environment > file > defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vafa_core::attacks::{AttackConfig, AttackKind};
use vafa_core::autodiff::Precision;
use vafa_core::synth::SynthSpec;
use vafa_core::train::{TrainConfig, TrainMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Attack,
    Eval,
    Compare,
    Gradcheck,
}

impl Command {
    pub fn parse(s: &str) -> Option<Command> {
        Some(match s {
            "gen-data" => Command::GenData,
            "train" => Command::Train,
            "attack" => Command::Attack,
            "eval" => Command::Eval,
            "compare" => Command::Compare,
            "gradcheck" => Command::Gradcheck,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Attack => "attack",
            Command::Eval => "eval",
            Command::Compare => "compare",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Fully validated run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: Command,
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub precision: Precision,
    /// Dataset directory (written by gen-data, read by everything else).
    pub data_dir: PathBuf,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    /// Checkpoint consumed by attack/eval and (as initialization) train.
    pub model_path: Option<PathBuf>,
    /// (label, checkpoint path) pairs for the compare grid.
    pub compare_models: Vec<(String, PathBuf)>,
    /// Attack column names for the compare grid ("clean" allowed).
    pub compare_attacks: Vec<String>,
}

/// CLI-level overrides for run keys.
#[derive(Clone, Debug, Default)]
pub struct CliOverrides {
    pub out: Option<String>,
    pub seed: Option<String>,
    pub workers: Option<String>,
    pub precision: Option<String>,
}

/// Raw parsed file: section -> key -> (value, provenance for messages).
type RawConfig = BTreeMap<String, BTreeMap<String, String>>;

pub fn parse_raw(text: &str) -> Result<RawConfig, Vec<String>> {
    let mut raw: RawConfig = BTreeMap::new();
    let mut section = String::from("run");
    let mut errors = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            if section.is_empty() {
                errors.push(format!("line {}: empty section name", lineno + 1));
            }
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                let key = k.trim().to_string();
                if key.is_empty() {
                    errors.push(format!("line {}: empty key", lineno + 1));
                    continue;
                }
                raw.entry(section.clone()).or_default().insert(key, v.trim().to_string());
            }
            None => errors.push(format!(
                "line {}: expected `key = value` or `[section]`, got {line:?}",
                lineno + 1
            )),
        }
    }
    if errors.is_empty() {
        Ok(raw)
    } else {
        Err(errors)
    }
}

/// Applies `VAFA_<SECTION>_<KEY>` environment overrides. Section names
/// contain no underscores, so the first `_` after the prefix splits
/// section from key.
pub fn apply_env_overrides(raw: &mut RawConfig) {
    for (name, value) in std::env::vars() {
        let Some(rest) = name.strip_prefix("VAFA_") else { continue };
        let Some((section, key)) = rest.split_once('_') else { continue };
        if section.is_empty() || key.is_empty() {
            continue;
        }
        raw.entry(section.to_lowercase())
            .or_default()
            .insert(key.to_lowercase(), value);
    }
}

struct Reader<'a> {
    raw: &'a RawConfig,
    errors: Vec<String>,
}

impl<'a> Reader<'a> {
    fn get(&self, section: &str, key: &str) -> Option<&'a str> {
        self.raw.get(section).and_then(|s| s.get(key)).map(|v| v.as_str())
    }

    fn parse<T: std::str::FromStr>(&mut self, section: &str, key: &str, default: T) -> T {
        match self.get(section, key) {
            None => default,
            Some(v) => match v.parse::<T>() {
                Ok(t) => t,
                Err(_) => {
                    self.errors.push(format!(
                        "{section}.{key}: cannot parse {v:?} as {}",
                        std::any::type_name::<T>()
                    ));
                    default
                }
            },
        }
    }

    fn parse_opt<T: std::str::FromStr>(&mut self, section: &str, key: &str) -> Option<T> {
        let v = self.get(section, key)?;
        if v.is_empty() {
            return None;
        }
        match v.parse::<T>() {
            Ok(t) => Some(t),
            Err(_) => {
                self.errors.push(format!(
                    "{section}.{key}: cannot parse {v:?} as {}",
                    std::any::type_name::<T>()
                ));
                None
            }
        }
    }

    fn parse_bool(&mut self, section: &str, key: &str, default: bool) -> bool {
        match self.get(section, key) {
            None => default,
            Some("true") | Some("1") | Some("yes") => true,
            Some("false") | Some("0") | Some("no") => false,
            Some(v) => {
                self.errors.push(format!("{section}.{key}: {v:?} is not a boolean"));
                default
            }
        }
    }
}

/// Builds and validates the run configuration. `command_arg` comes from
/// the CLI (None means: read `run.command` from the file).
pub fn build(
    file_text: Option<&str>,
    command_arg: Option<Command>,
    cli: &CliOverrides,
) -> Result<RunConfig, Vec<String>> {
    let mut raw = match file_text {
        Some(text) => parse_raw(text)?,
        None => RawConfig::new(),
    };
    apply_env_overrides(&mut raw);
    // CLI flags take highest precedence
    let run = raw.entry("run".into()).or_default();
    if let Some(v) = &cli.out {
        run.insert("out".into(), v.clone());
    }
    if let Some(v) = &cli.seed {
        run.insert("seed".into(), v.clone());
    }
    if let Some(v) = &cli.workers {
        run.insert("workers".into(), v.clone());
    }
    if let Some(v) = &cli.precision {
        run.insert("precision".into(), v.clone());
    }

    let mut r = Reader { raw: &raw, errors: Vec::new() };

    let command = match command_arg {
        Some(c) => c,
        None => match r.get("run", "command") {
            Some(name) => match Command::parse(name) {
                Some(c) => c,
                None => {
                    r.errors.push(format!(
                        "run.command: unknown command {name:?} (expected gen-data, train, attack, eval, compare, or gradcheck)"
                    ));
                    Command::Gradcheck
                }
            },
            None => {
                r.errors.push("run.command: missing (pass a subcommand or set it in the config)".into());
                Command::Gradcheck
            }
        },
    };

    let out = PathBuf::from(r.parse("run", "out", String::from("out")));
    let seed: u64 = r.parse("run", "seed", 7u64);
    let workers: usize = r.parse("run", "workers", 0usize);
    let precision = match r.parse("run", "precision", 64u32) {
        64 => Precision::F64,
        32 => Precision::F32,
        other => {
            r.errors.push(format!("run.precision: {other} is not 32 or 64"));
            Precision::F64
        }
    };

    let data_dir = PathBuf::from(r.parse("data", "dir", String::from("data")));
    let extent: usize = r.parse("data", "extent", 64usize);
    let synth = SynthSpec {
        extent: [extent; 3],
        num_class: r.parse("data", "num_class", 4usize),
        shapes_per_class: r.parse("data", "shapes_per_class", 2usize),
        radius_range: [
            r.parse("data", "radius_min", 7.0f64),
            r.parse("data", "radius_max", 11.0f64),
        ],
        class_gap: r.parse("data", "class_gap", 0.2f64),
        noise_sigma: r.parse("data", "noise_sigma", 0.035f64),
        texture_amp: r.parse("data", "texture_amp", 0.08f64),
        texture_freq: r.parse("data", "texture_freq", 3.0f64),
        center_jitter: r.parse("data", "center_jitter", 1.0f64),
        train_count: r.parse("data", "train_count", 40usize),
        test_count: r.parse("data", "test_count", 10usize),
        seed,
    };
    if let Err(e) = synth.validate() {
        if command == Command::GenData {
            r.errors.push(format!("data: {e}"));
        }
    }

    let attack_kind = {
        let name = r.parse("attack", "kind", String::from("vafa"));
        match AttackKind::parse(&name) {
            Some(k) => k,
            None => {
                r.errors.push(format!(
                    "attack.kind: unknown attack {name:?} (expected vafa, vafa2d, pgd, fgsm, bim, or gn)"
                ));
                AttackKind::Vafa
            }
        }
    };
    let mut attack = AttackConfig::new(attack_kind);
    attack.steps = r.parse("attack", "steps", attack.steps);
    attack.q_max = r.parse("attack", "q_max", attack.q_max);
    attack.patch_side = r.parse("attack", "patch_size", attack.patch_side);
    attack.epsilon = r.parse("attack", "epsilon", attack.epsilon);
    attack.step_size = r.parse_opt("attack", "step_size");
    attack.snap_integer = r.parse_bool("attack", "snap_integer", false);
    attack.per_patch_tables = r.parse_bool("attack", "per_patch", false);
    attack.ssim_window = r.parse("attack", "ssim_window", attack.ssim_window);
    attack.seed = seed;
    if let Some(surrogate) = r.get("attack", "round_surrogate") {
        if surrogate != "ste" {
            r.errors.push(format!(
                "attack.round_surrogate: only \"ste\" is implemented (got {surrogate:?})"
            ));
        }
    }
    if matches!(command, Command::Attack | Command::Compare) || r.raw.contains_key("attack") {
        if let Err(e) = attack.validate() {
            r.errors.push(format!("attack: {e}"));
        }
    }

    let train_mode = {
        let name = r.parse("train", "mode", String::from("standard"));
        match TrainMode::parse(&name) {
            Some(m) => m,
            None => {
                r.errors.push(format!(
                    "train.mode: unknown mode {name:?} (expected standard, adv-voxel, vaft, or vaft-fr)"
                ));
                TrainMode::Standard
            }
        }
    };
    let mut train = TrainConfig::new(train_mode);
    train.epochs = r.parse("train", "epochs", 60usize);
    train.batch_size = r.parse("train", "batch_size", train.batch_size);
    train.lr = r.parse("train", "lr", 0.1f64);
    train.momentum = r.parse("train", "momentum", train.momentum);
    train.lambda_fr = r.parse("train", "lambda_fr", train.lambda_fr);
    train.checkpoint_every = r.parse("train", "checkpoint_every", 0usize);
    train.seed = seed;
    // the training attack reuses the [attack] section with a shorter
    // default inner loop
    train.attack = attack.clone();
    if !attack_kind.is_frequency() && matches!(train_mode, TrainMode::Vaft | TrainMode::VaftFr) {
        train.attack.kind = AttackKind::Vafa;
    }
    if attack_kind.is_frequency() && train_mode == TrainMode::AdvVoxel {
        train.attack.kind = AttackKind::Pgd;
    }
    train.attack.steps = r.parse("train", "attack_steps", 5usize);
    if command == Command::Train {
        if let Err(e) = train.validate() {
            r.errors.push(format!("train: {e}"));
        }
    }

    let model_path: Option<PathBuf> =
        r.get("model", "checkpoint").map(PathBuf::from).or_else(|| {
            r.get("eval", "model").map(PathBuf::from)
        });

    let compare_models: Vec<(String, PathBuf)> = r
        .get("eval", "models")
        .map(|list| {
            list.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|pair| match pair.split_once('=') {
                    Some((name, path)) => (name.trim().to_string(), PathBuf::from(path.trim())),
                    None => {
                        let path = PathBuf::from(pair.trim());
                        let name = path
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| pair.trim().to_string());
                        (name, path)
                    }
                })
                .collect()
        })
        .unwrap_or_default();

    let compare_attacks: Vec<String> = r
        .get("eval", "attacks")
        .map(|list| {
            list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
        })
        .unwrap_or_else(|| {
            ["clean", "fgsm", "pgd", "bim", "gn", "vafa"].iter().map(|s| s.to_string()).collect()
        });
    for a in &compare_attacks {
        if a != "clean" && AttackKind::parse(a).is_none() {
            r.errors.push(format!("eval.attacks: unknown attack {a:?}"));
        }
    }

    // referenced inputs must exist at validation time
    match command {
        Command::Train | Command::Eval | Command::Attack | Command::Compare => {
            if !data_dir.is_dir() {
                r.errors.push(format!(
                    "data.dir: {} does not exist (run gen-data first)",
                    data_dir.display()
                ));
            }
        }
        _ => {}
    }
    if matches!(command, Command::Attack | Command::Eval) {
        match &model_path {
            None => r.errors.push("model.checkpoint: required for attack/eval".into()),
            Some(p) if !p.is_file() => {
                r.errors.push(format!("model.checkpoint: {} does not exist", p.display()))
            }
            _ => {}
        }
    }
    if command == Command::Compare {
        if compare_models.is_empty() {
            r.errors.push("eval.models: required for compare (name=path, comma separated)".into());
        }
        for (name, p) in &compare_models {
            if !p.is_file() {
                r.errors.push(format!("eval.models: {} ({name}) does not exist", p.display()));
            }
        }
    }

    if r.errors.is_empty() {
        Ok(RunConfig {
            command,
            out,
            seed,
            workers,
            precision,
            data_dir,
            synth,
            train,
            attack,
            model_path,
            compare_models,
            compare_attacks,
        })
    } else {
        Err(r.errors)
    }
}

/// Loads, overrides, and validates a config for a command.
pub fn load(
    path: Option<&Path>,
    command_arg: Option<Command>,
    cli: &CliOverrides,
) -> Result<RunConfig, Vec<String>> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
            vec![format!("config file {}: {e}", p.display())]
        })?),
        None => None,
    };
    build(text.as_deref(), command_arg, cli)
}

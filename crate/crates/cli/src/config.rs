//! Flat dotted-key configuration: a `key = value` file merged with
//! `--key=value` command-line overrides, resolved against a named profile.

use std::collections::BTreeMap;
use std::path::PathBuf;

use cropmap_core::data::GenConfig;
use cropmap_core::decoder::{DecoderConfig, DeconvBlockConfig};
use cropmap_core::model::{desk_model_config, paper_model_config, ModelConfig, Paradigm};
use cropmap_core::train::TrainConfig;

use crate::error::CliError;

/// Which dataset split an eval runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub threads: usize,
    pub gen: GenConfig,
    pub paradigm: Paradigm,
    pub separable: bool,
    pub separable_depth: usize,
    pub heads: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub train: TrainConfig,
    pub ensemble_members: usize,
    pub ensemble_threshold: f64,
    pub eval_split: EvalSplit,
}

impl RunConfig {
    fn profile_defaults(profile: Profile) -> RunConfig {
        match profile {
            Profile::Desk => RunConfig {
                profile,
                seed: 42,
                threads: 0,
                gen: GenConfig::default(),
                paradigm: Paradigm::Esd,
                separable: true,
                separable_depth: 2,
                heads: 4,
                lstm_layers: 3,
                lstm_hidden: 32,
                train: TrainConfig {
                    lr: 3e-3,
                    batch_size: 8,
                    weight_decay: 1e-4,
                    epochs: 30,
                    seed: 42,
                    train_fraction: 0.8,
                },
                ensemble_members: 5,
                ensemble_threshold: 0.2,
                eval_split: EvalSplit::Test,
            },
            Profile::Paper => RunConfig {
                profile,
                seed: 42,
                threads: 0,
                gen: GenConfig {
                    n_scenes: 250,
                    frames: 71,
                    bands: 4,
                    height: 24,
                    width: 24,
                    classes: 48,
                    noise: 0.05,
                },
                paradigm: Paradigm::Esd,
                separable: true,
                separable_depth: 2,
                heads: 6,
                lstm_layers: 3,
                lstm_hidden: 256,
                train: TrainConfig::default(),
                ensemble_members: 5,
                ensemble_threshold: 0.2,
                eval_split: EvalSplit::Test,
            },
        }
    }

    /// Resolve a key/value map (file plus overrides) into a run config.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<RunConfig, CliError> {
        let profile = match map.get("profile").map(String::as_str) {
            None | Some("desk") => Profile::Desk,
            Some("paper") => Profile::Paper,
            Some(other) => return Err(CliError::UnknownPreset(format!("profile {other:?}"))),
        };
        let mut cfg = RunConfig::profile_defaults(profile);

        for (key, value) in map {
            cfg.apply(key, value)?;
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
            value.parse().map_err(|_| {
                CliError::Usage(format!("config key {key:?} has invalid value {value:?}"))
            })
        }
        match key {
            "profile" => {} // handled before field overrides
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "gen.scenes" => self.gen.n_scenes = parse(key, value)?,
            "gen.frames" => self.gen.frames = parse(key, value)?,
            "gen.bands" => self.gen.bands = parse(key, value)?,
            "gen.height" => self.gen.height = parse(key, value)?,
            "gen.width" => self.gen.width = parse(key, value)?,
            "gen.classes" => self.gen.classes = parse(key, value)?,
            "gen.noise" => self.gen.noise = parse(key, value)?,
            "model.paradigm" => {
                self.paradigm = value
                    .parse()
                    .map_err(|_| CliError::UnknownPreset(format!("paradigm {value:?}")))?
            }
            "model.separable" => self.separable = parse(key, value)?,
            "model.separable_depth" => self.separable_depth = parse(key, value)?,
            "model.heads" => self.heads = parse(key, value)?,
            "model.lstm_layers" => self.lstm_layers = parse(key, value)?,
            "model.lstm_hidden" => self.lstm_hidden = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.batch" => self.train.batch_size = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.fraction" => self.train.train_fraction = parse(key, value)?,
            "ensemble.members" => self.ensemble_members = parse(key, value)?,
            "ensemble.threshold" => self.ensemble_threshold = parse(key, value)?,
            "eval.split" => {
                self.eval_split = match value {
                    "train" => EvalSplit::Train,
                    "test" => EvalSplit::Test,
                    "all" => EvalSplit::All,
                    other => {
                        return Err(CliError::Usage(format!(
                            "eval.split must be train, test or all, got {other:?}"
                        )))
                    }
                }
            }
            other => return Err(CliError::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Derive the model architecture for this run. The profile fixes the
    /// encoder family; dataset geometry and the preset axes are applied
    /// on top.
    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        self.model_config_for(self.paradigm, self.separable)
    }

    /// Model config for an explicit (paradigm, separable) combination,
    /// used by the ablation grid.
    pub fn model_config_for(
        &self,
        paradigm: Paradigm,
        separable: bool,
    ) -> Result<ModelConfig, CliError> {
        let mut cfg = match self.profile {
            Profile::Desk => desk_model_config(paradigm, separable),
            Profile::Paper => paper_model_config(paradigm, separable),
        };
        if separable {
            cfg.encoder.shallow_separable_depth = self.separable_depth;
        }
        cfg.encoder.in_channels = self.gen.bands;
        cfg.encoder.input_hw = (self.gen.height, self.gen.width);
        cfg.attention.n_heads = self.heads;
        cfg.lstm.layers = self.lstm_layers;
        cfg.lstm.hidden = self.lstm_hidden;
        cfg.decoder = derive_decoder(
            cfg.encoder.embed_dim,
            self.gen.classes,
            (self.gen.height, self.gen.width),
        )?;
        cfg.validate().map_err(CliError::Other)?;
        Ok(cfg)
    }
}

/// Build a transposed-conv chain from a 4x4 seed to the target extent by
/// stride-2 doubling blocks (the desk family), or the paper profile's
/// 4 -> 8 -> 24 chain.
fn derive_decoder(
    embed_dim: usize,
    n_classes: usize,
    target_hw: (usize, usize),
) -> Result<DecoderConfig, CliError> {
    let (h, w) = target_hw;
    if h != w {
        return Err(CliError::Usage(format!(
            "decoder derivation needs square extents, got {h}x{w}"
        )));
    }
    const SEED_EXTENT: usize = 4;
    if embed_dim % (SEED_EXTENT * SEED_EXTENT) != 0 {
        return Err(CliError::Usage(format!(
            "embed dim {embed_dim} is not divisible by the {SEED_EXTENT}x{SEED_EXTENT} decoder seed"
        )));
    }
    let seed_channels = embed_dim / (SEED_EXTENT * SEED_EXTENT);

    let mut blocks = Vec::new();
    if h == 24 {
        // paper geometry: 4 -> 8 -> 24
        blocks.push(DeconvBlockConfig { out_channels: seed_channels.max(8) * 2, kernel: 4, stride: 2, padding: 1 });
        blocks.push(DeconvBlockConfig { out_channels: n_classes, kernel: 3, stride: 3, padding: 0 });
    } else {
        let mut extent = SEED_EXTENT;
        let mut doublings = 0;
        while extent < h {
            extent *= 2;
            doublings += 1;
        }
        if extent != h || doublings == 0 {
            return Err(CliError::Usage(format!(
                "decoder derivation supports extents 4*2^n or 24, got {h}"
            )));
        }
        for i in 0..doublings {
            let last = i == doublings - 1;
            let out_channels = if last { n_classes } else { 1usize << (4 + doublings - 1 - i) };
            blocks.push(DeconvBlockConfig { out_channels, kernel: 4, stride: 2, padding: 1 });
        }
    }
    Ok(DecoderConfig {
        seed_channels,
        seed_extent: SEED_EXTENT,
        blocks,
        n_classes,
        target_hw,
    })
}

/// Parse a flat `key = value` config file. `#` starts a comment.
pub fn parse_flat_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("config line {} has no '=': {raw:?}", lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Parsed command line.
#[derive(Debug, Clone)]
pub struct Cli {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Eval,
    Ablate,
    Bench,
    Help,
}

pub const USAGE: &str = "\
usage: cropmap <command> [flags]

commands:
  generate   write a synthetic dataset container
  train      train one model; writes checkpoints and per-epoch metrics
  eval       evaluate a checkpoint; writes metric reports and map images
  ablate     run the 12-preset grid (paradigm x conv mode x ensemble)
  bench      report parameter counts and forward timings
  help       print this text

flags:
  --config PATH      flat key = value config file
  --dataset PATH     dataset container (input for train/eval/ablate,
                     output of generate when --out is not given)
  --checkpoint PATH  checkpoint archive (eval)
  --out DIR          output directory (default .)
  --seed N           override the seed
  --threads N        cap worker threads (1 = fully sequential)
  --split S          eval split: train | test | all
  --key=value        override any config key, e.g. --model.paradigm=esd
";

/// Parse command-line arguments (without the program name).
pub fn parse_args(args: &[String]) -> Result<Cli, CliError> {
    let mut iter = args.iter().peekable();
    let command = match iter.next().map(String::as_str) {
        Some("generate") => Command::Generate,
        Some("train") => Command::Train,
        Some("eval") => Command::Eval,
        Some("ablate") => Command::Ablate,
        Some("bench") => Command::Bench,
        Some("help") | Some("--help") | Some("-h") => Command::Help,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown command {other:?}; run `cropmap help`"
            )))
        }
        None => return Err(CliError::Usage("missing command; run `cropmap help`".into())),
    };

    let mut cli = Cli {
        command,
        config_path: None,
        dataset: None,
        checkpoint: None,
        out: None,
        overrides: Vec::new(),
    };

    while let Some(arg) = iter.next() {
        let mut take_value = |name: &str, inline: Option<&str>| -> Result<String, CliError> {
            if let Some(v) = inline {
                return Ok(v.to_string());
            }
            iter.next()
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("flag {name} needs a value")))
        };
        let (name, inline) = match arg.split_once('=') {
            Some((n, v)) => (n, Some(v)),
            None => (arg.as_str(), None),
        };
        match name {
            "--config" => cli.config_path = Some(PathBuf::from(take_value(name, inline)?)),
            "--dataset" => cli.dataset = Some(PathBuf::from(take_value(name, inline)?)),
            "--checkpoint" => cli.checkpoint = Some(PathBuf::from(take_value(name, inline)?)),
            "--out" => cli.out = Some(PathBuf::from(take_value(name, inline)?)),
            "--seed" => cli.overrides.push(("seed".into(), take_value(name, inline)?)),
            "--threads" => cli.overrides.push(("threads".into(), take_value(name, inline)?)),
            "--split" => cli.overrides.push(("eval.split".into(), take_value(name, inline)?)),
            _ => match (name.strip_prefix("--"), inline) {
                (Some(key), Some(value)) if !key.is_empty() => {
                    cli.overrides.push((key.to_string(), value.to_string()));
                }
                _ => {
                    return Err(CliError::Usage(format!(
                        "unrecognized argument {arg:?}; overrides take the form --key=value"
                    )))
                }
            },
        }
    }
    Ok(cli)
}

/// Load the config file (when given), apply overrides, resolve.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut map = match &cli.config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            parse_flat_config(&text)?
        }
        None => BTreeMap::new(),
    };
    for (k, v) in &cli.overrides {
        map.insert(k.clone(), v.clone());
    }
    RunConfig::from_map(&map)
}

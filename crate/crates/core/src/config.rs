//! Run configuration: a flat `key = value` file (TOML syntax) with
//! command-line overrides on top.
//!
//! Every key has a default; [`RunConfig::render`] prints the resolved
//! configuration in the same format, one key per line, in a fixed order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::SplitSpec;
use crate::matching::{MatcherWeights, O2MConfig};
use crate::model::ModelConfig;
use crate::objective::ObjectiveWeights;
use crate::schedule::RatePlan;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Directory holding `train.txt`, `val.txt` and `concepts.tsv`; empty
    /// means the manifest's directory.
    pub split_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Checkpoint to resume from; empty for a fresh run.
    pub resume: PathBuf,
    /// Seeds parameter initialization and the per-epoch data order.
    pub seed: u64,
    pub split: SplitSpec,
    pub max_epochs: usize,
    /// Stops after this many optimizer steps; 0 means epochs decide.
    pub max_steps: usize,
    pub batch_size: usize,
    /// Validation (and best-checkpoint selection) period in steps.
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub matcher: MatcherWeights,
    pub o2m: O2MConfig,
    pub objective: ObjectiveWeights,
    pub rates: RatePlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::new(),
            split_dir: PathBuf::new(),
            output_dir: PathBuf::from("runs/default"),
            resume: PathBuf::new(),
            seed: 42,
            split: SplitSpec::default(),
            max_epochs: 10,
            max_steps: 0,
            batch_size: 8,
            eval_every: 500,
            checkpoint_every: 1000,
            model: ModelConfig::default(),
            matcher: MatcherWeights::default(),
            o2m: O2MConfig::default(),
            objective: ObjectiveWeights::default(),
            rates: RatePlan::default(),
        }
    }
}

/// Conversion between config values and their textual/TOML forms.
trait ConfigValue: Sized {
    fn show(&self) -> String;
    fn parse(value: &toml::Value) -> Option<Self>;
}

impl ConfigValue for f64 {
    fn show(&self) -> String {
        format!("{self:?}")
    }

    fn parse(value: &toml::Value) -> Option<Self> {
        match value {
            toml::Value::Float(f) => Some(*f),
            toml::Value::Integer(i) => Some(*i as f64),
            _ => None,
        }
    }
}

impl ConfigValue for usize {
    fn show(&self) -> String {
        self.to_string()
    }

    fn parse(value: &toml::Value) -> Option<Self> {
        value.as_integer().and_then(|i| usize::try_from(i).ok())
    }
}

impl ConfigValue for u64 {
    fn show(&self) -> String {
        self.to_string()
    }

    fn parse(value: &toml::Value) -> Option<Self> {
        value.as_integer().and_then(|i| u64::try_from(i).ok())
    }
}

impl ConfigValue for bool {
    fn show(&self) -> String {
        self.to_string()
    }

    fn parse(value: &toml::Value) -> Option<Self> {
        value.as_bool()
    }
}

impl ConfigValue for PathBuf {
    fn show(&self) -> String {
        toml::Value::String(self.to_string_lossy().into_owned()).to_string()
    }

    fn parse(value: &toml::Value) -> Option<Self> {
        value.as_str().map(PathBuf::from)
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:tt).+;)*) => {
        impl RunConfig {
            /// Every accepted key, in print order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, ConfigValue::show(&self.$($field).+))),*]
            }

            fn set_value(&mut self, key: &str, value: &toml::Value) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse(value).ok_or_else(|| {
                            Error::Config(format!("{key}: unsupported value {value}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }
        }
    };
}

config_keys! {
    "manifest" => manifest;
    "split_dir" => split_dir;
    "output_dir" => output_dir;
    "resume" => resume;
    "seed" => seed;
    "split_seed" => split.seed;
    "train_fraction" => split.train_fraction;
    "max_epochs" => max_epochs;
    "max_steps" => max_steps;
    "batch_size" => batch_size;
    "eval_every" => eval_every;
    "checkpoint_every" => checkpoint_every;
    "n_q" => model.n_q;
    "canvas" => model.canvas;
    "embed_dim" => model.embed_dim;
    "text_dim" => model.text_dim;
    "stem_dim" => model.stem_dim;
    "mask_dim" => model.mask_dim;
    "heads" => model.heads;
    "encoder_depth" => model.encoder_depth;
    "decoder_layers" => model.decoder_layers;
    "w_cls" => matcher.w_cls;
    "w_box" => matcher.w_box;
    "w_giou" => matcher.w_giou;
    "alpha_match" => matcher.alpha_match;
    "gamma_match" => matcher.gamma_match;
    "stable" => matcher.stable;
    "o2m_top_k" => o2m.top_k;
    "o2m_threshold" => o2m.threshold;
    "alpha_o2m" => o2m.alpha_o2m;
    "lambda_o2m" => objective.lambda_o2m;
    "lambda_ce" => objective.find.lambda_ce;
    "lambda_pr" => objective.find.lambda_pr;
    "alpha_cls" => objective.find.alpha_cls;
    "gamma_cls" => objective.find.gamma_cls;
    "pos_weight" => objective.find.pos_weight;
    "lambda_l1" => objective.find.lambda_l1;
    "lambda_g" => objective.find.lambda_g;
    "alpha_seg" => objective.seg.alpha_seg;
    "gamma_seg" => objective.seg.gamma_seg;
    "lambda_f" => objective.seg.lambda_f;
    "lambda_d" => objective.seg.lambda_d;
    "lambda_sp" => objective.seg.lambda_sp;
    "dice_eps" => objective.seg.dice_eps;
    "lr_decoder_seg_dot" => rates.groups.decoder_seg_dot;
    "lr_vision_backbone" => rates.groups.vision_backbone;
    "lr_language_backbone" => rates.groups.language_backbone;
    "lr_geometry_prompt" => rates.groups.geometry_prompt;
    "llrd_gamma" => rates.llrd_gamma;
    "llrd_layers" => rates.llrd_layers;
    "warmup_steps" => rates.schedule.warmup_steps;
    "beta1" => rates.schedule.betas.0;
    "beta2" => rates.schedule.betas.1;
    "adam_eps" => rates.schedule.eps;
    "weight_decay" => rates.schedule.weight_decay;
}

/// Parses a command-line value: anything TOML understands as a scalar, and
/// otherwise a bare string.
fn parse_cli_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Loads a config file over the defaults. Relative paths inside the file
    /// are resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let table: toml::Table = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (key, value) in &table {
            cfg.set_value(key, value)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.split_dir, &mut cfg.output_dir, &mut cfg.resume] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies one `key value` override.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        self.set_value(key, &parse_cli_value(raw))
    }

    /// The resolved configuration, one `key = value` line per key.
    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Query count padding follows the model's query count.
    pub fn sync(&mut self) {
        self.objective.find.n_q = self.model.n_q;
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.model.validate()?;
        self.matcher.validate()?;
        self.o2m.validate()?;
        self.objective.validate()?;
        self.rates.validate()?;
        if self.rates.llrd_layers != self.model.encoder_depth {
            return Err(Error::Config(format!(
                "llrd_layers ({}) must equal encoder_depth ({})",
                self.rates.llrd_layers, self.model.encoder_depth
            )));
        }
        if self.objective.find.n_q != self.model.n_q {
            return Err(Error::Config("padded query count differs from the model's".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, eval_every and checkpoint_every must be positive".into()));
        }
        if self.max_steps == 0 && self.max_epochs == 0 {
            return Err(Error::Config("one of max_steps or max_epochs must be positive".into()));
        }
        Ok(())
    }

    /// Where split lists and the concept dictionary live.
    pub fn split_directory(&self) -> PathBuf {
        if self.split_dir.as_os_str().is_empty() {
            self.manifest.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            self.split_dir.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips_through_file() {
        let mut cfg = RunConfig::default();
        cfg.set("w_box", "7.5").unwrap();
        cfg.set("stable", "true").unwrap();
        cfg.set("output_dir", "/tmp/run x").unwrap();
        cfg.set("beta2", "0.99").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, cfg.render()).unwrap();
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.rates.schedule.betas, (0.9, 0.99));
    }

    #[test]
    fn every_key_is_rendered_once() {
        let text = RunConfig::default().render();
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        for key in RunConfig::KEYS {
            assert_eq!(text.lines().filter(|l| l.starts_with(&format!("{key} = "))).count(), 1);
        }
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("batch_size", "-3"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("w_cls", "\"x\""), Err(Error::Config(_))));
        cfg.set("train_fraction", "1.5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "manifest = \"data/m.jsonl\"\n").unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.manifest, dir.path().join("data/m.jsonl"));
        assert_eq!(cfg.split_directory(), dir.path().join("data"));
    }
}

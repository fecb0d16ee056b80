//! `RunConfig`: every knob of a CLI run, as flat `key=value` pairs.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use dico_core::diagnostics::{BenchSpec, BlockKind, DIT_PRESETS};
use dico_core::diffusion::BetaSchedule;
use dico_core::kv;
use dico_core::{Error, ModelConfig, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Sample,
    Flops,
    Bench,
    InspectChannels,
    MakeData,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Train,
        Command::Sample,
        Command::Flops,
        Command::Bench,
        Command::InspectChannels,
        Command::MakeData,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Sample => "sample",
            Self::Flops => "flops",
            Self::Bench => "bench",
            Self::InspectChannels => "inspect-channels",
            Self::MakeData => "make-data",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Self::Train => "train a model on a dataset file; writes a checkpoint and a loss CSV",
            Self::Sample => "sample images from a checkpoint; writes an image grid and a raw dump",
            Self::Flops => "write the MAC/parameter report of a preset",
            Self::Bench => "time conv-module and self-attention forwards",
            Self::InspectChannels => "write per-channel activation scores of a traced layer",
            Self::MakeData => "write the two-class stripe dataset",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command {s:?}")))
    }
}

/// `(key, default, help)` for every run key. Model keys
/// ([`ModelConfig::KEYS`]) are accepted on top of these and override the
/// preset.
pub const RUN_KEYS: &[(&str, &str, &str)] = &[
    ("preset", "dico-s", "model preset (dico-s/b/l/xl/h, dico-tiny, dico-micro; flops also takes dit-s2/b2/l2/xl2)"),
    ("input_size", "32", "spatial size of model inputs and samples"),
    ("seed", "0", "seed for initialization, training and sampling"),
    ("out_dir", "out", "directory receiving every artifact"),
    ("beta_schedule", "linear", "noise schedule kind"),
    ("diffusion_steps", "1000", "training diffusion steps T"),
    ("beta_start", "0.0001", "first beta"),
    ("beta_end", "0.02", "last beta"),
    ("lr", "0.0001", "AdamW learning rate"),
    ("batch_size", "256", "training batch size"),
    ("steps", "1000", "training steps"),
    ("weight_decay", "0", "AdamW decoupled weight decay"),
    ("ema_decay", "0.9999", "EMA decay"),
    ("hflip_prob", "0.5", "horizontal flip probability"),
    ("vlb_weight", "0.001", "weight of the bound term in the hybrid loss"),
    ("log_every", "100", "print training progress every N steps (0 = never)"),
    ("data_path", "", "dataset file (default <out_dir>/data.dids)"),
    ("checkpoint", "", "checkpoint file (default <out_dir>/model.ckpt)"),
    ("resume", "false", "train: continue from the checkpoint instead of a fresh model"),
    ("num_samples", "16", "images to sample"),
    ("sample_class", "", "label for every sample (default: cycle through classes)"),
    ("guidance", "true", "enable classifier-free guidance"),
    ("cfg_scale", "1.5", "guidance scale s"),
    ("sample_steps", "250", "respaced sampling steps"),
    ("clip_x0", "true", "clip predicted x0 to [-1, 1] while sampling"),
    ("use_ema", "true", "sample from EMA weights"),
    ("data_count", "1024", "stripe images to generate"),
    ("data_channels", "1", "channels per stripe image"),
    ("data_size", "16", "stripe image size"),
    ("data_period", "4", "stripe period in pixels"),
    ("data_amplitude", "0.8", "stripe amplitude"),
    ("data_noise", "0.1", "pixel noise std"),
    ("bench_tokens", "64,256,1024", "token counts to time"),
    ("bench_widths", "64,128", "channel widths to time"),
    ("bench_warmup", "2", "untimed warmup forwards"),
    ("bench_iters", "10", "timed forwards"),
    ("inspect_layer", "stages.4.blocks.0.conv_module.mixed", "traced feature to score"),
    ("inspect_count", "64", "dataset images to run"),
    ("inspect_t", "500", "diffusion step at which images are noised"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub preset: String,
    /// Resolved DiCo config; `None` for the DiT reference presets.
    pub model: Option<ModelConfig>,
    pub input_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub beta_schedule: BetaSchedule,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub hflip_prob: f64,
    pub vlb_weight: f64,
    pub log_every: usize,
    pub data_path: String,
    pub checkpoint: String,
    pub resume: bool,
    pub num_samples: usize,
    pub sample_class: Option<usize>,
    pub guidance: bool,
    pub cfg_scale: f64,
    pub sample_steps: usize,
    pub clip_x0: bool,
    pub use_ema: bool,
    pub data_count: usize,
    pub data_channels: usize,
    pub data_size: usize,
    pub data_period: usize,
    pub data_amplitude: f64,
    pub data_noise: f64,
    pub bench_tokens: Vec<usize>,
    pub bench_widths: Vec<usize>,
    pub bench_warmup: usize,
    pub bench_iters: usize,
    pub inspect_layer: String,
    pub inspect_count: usize,
    pub inspect_t: usize,
}

fn is_dit(preset: &str) -> bool {
    DIT_PRESETS.contains(&preset.trim().to_ascii_lowercase().as_str())
}

fn unit_interval(key: &str, x: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(Error::Config(format!("{key}={x} outside [0, 1]")))
    }
}

fn positive(key: &str, x: usize) -> Result<usize> {
    if x > 0 {
        Ok(x)
    } else {
        Err(Error::Config(format!("{key} must be positive")))
    }
}

impl RunConfig {
    /// All defaults for `command`.
    pub fn defaults(command: Command) -> Self {
        Self::resolve(command, &[]).expect("defaults are valid")
    }

    /// Applies `pairs` in order (later wins) over the defaults. The preset
    /// is resolved first so model keys override it wherever they appear.
    pub fn resolve(command: Command, pairs: &[(String, String)]) -> Result<Self> {
        let mut merged: Vec<(String, String)> = RUN_KEYS
            .iter()
            .map(|(k, v, _)| (k.to_string(), v.to_string()))
            .collect();
        let mut model_pairs: Vec<(String, String)> = Vec::new();
        for (k, v) in pairs {
            if let Some(slot) = merged.iter_mut().find(|(mk, _)| mk == k) {
                slot.1 = v.clone();
            } else if ModelConfig::KEYS.contains(&k.as_str()) {
                model_pairs.retain(|(mk, _)| mk != k);
                model_pairs.push((k.clone(), v.clone()));
            } else {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        let get = |key: &str| -> &str {
            &merged.iter().find(|(k, _)| k == key).expect("known key").1
        };

        let preset = get("preset").trim().to_string();
        let model = if is_dit(&preset) {
            if let Some((k, _)) = model_pairs.first() {
                return Err(Error::Config(format!(
                    "model key {k:?} cannot override reference preset {preset}"
                )));
            }
            if command != Command::Flops {
                return Err(Error::Config(format!(
                    "preset {preset} is a cost reference and only works with flops"
                )));
            }
            None
        } else {
            let mut m = ModelConfig::preset(&preset)?;
            for (k, v) in &model_pairs {
                m.set(k, v)?;
            }
            m.validate()?;
            unit_interval("label_dropout_prob", m.label_dropout_prob)?;
            Some(m)
        };

        let u = |key: &str| kv::parse_usize(key, get(key));
        let f = |key: &str| kv::parse_f64(key, get(key));
        let b = |key: &str| kv::parse_bool(key, get(key));
        let list = |key: &str| kv::parse_usize_list(key, get(key));
        let sample_class = match get("sample_class") {
            "" => None,
            v => Some(kv::parse_usize("sample_class", v)?),
        };

        let cfg = Self {
            command,
            preset,
            model,
            input_size: positive("input_size", u("input_size")?)?,
            seed: kv::parse_u64("seed", get("seed"))?,
            out_dir: PathBuf::from(get("out_dir")),
            beta_schedule: get("beta_schedule").parse()?,
            diffusion_steps: u("diffusion_steps")?,
            beta_start: f("beta_start")?,
            beta_end: f("beta_end")?,
            lr: f("lr")?,
            batch_size: positive("batch_size", u("batch_size")?)?,
            steps: u("steps")?,
            weight_decay: f("weight_decay")?,
            ema_decay: unit_interval("ema_decay", f("ema_decay")?)?,
            hflip_prob: unit_interval("hflip_prob", f("hflip_prob")?)?,
            vlb_weight: f("vlb_weight")?,
            log_every: u("log_every")?,
            data_path: get("data_path").to_string(),
            checkpoint: get("checkpoint").to_string(),
            resume: b("resume")?,
            num_samples: positive("num_samples", u("num_samples")?)?,
            sample_class,
            guidance: b("guidance")?,
            cfg_scale: f("cfg_scale")?,
            sample_steps: u("sample_steps")?,
            clip_x0: b("clip_x0")?,
            use_ema: b("use_ema")?,
            data_count: u("data_count")?,
            data_channels: positive("data_channels", u("data_channels")?)?,
            data_size: positive("data_size", u("data_size")?)?,
            data_period: positive("data_period", u("data_period")?)?,
            data_amplitude: f("data_amplitude")?,
            data_noise: f("data_noise")?,
            bench_tokens: list("bench_tokens")?,
            bench_widths: list("bench_widths")?,
            bench_warmup: u("bench_warmup")?,
            bench_iters: positive("bench_iters", u("bench_iters")?)?,
            inspect_layer: get("inspect_layer").to_string(),
            inspect_count: positive("inspect_count", u("inspect_count")?)?,
            inspect_t: u("inspect_t")?,
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.vlb_weight < 0.0 {
            return Err(Error::Config("lr, weight_decay and vlb_weight must be nonnegative".into()));
        }
        if self.sample_steps < 2 || self.sample_steps > self.diffusion_steps {
            return Err(Error::Config(format!(
                "sample_steps={} must be in [2, diffusion_steps={}]",
                self.sample_steps, self.diffusion_steps
            )));
        }
        if self.inspect_t >= self.diffusion_steps {
            return Err(Error::Config(format!(
                "inspect_t={} must be below diffusion_steps={}",
                self.inspect_t, self.diffusion_steps
            )));
        }
        if let (Some(m), Some(c)) = (&self.model, self.sample_class) {
            if c > m.num_classes {
                return Err(Error::Config(format!(
                    "sample_class={c} exceeds the null label {}",
                    m.num_classes
                )));
            }
        }
        if self.data_noise < 0.0 || self.data_amplitude < 0.0 {
            return Err(Error::Config("data_noise and data_amplitude must be nonnegative".into()));
        }
        Ok(())
    }

    /// Parses a config file's text with optional flag pairs on top.
    pub fn parse(command: Command, text: &str, flags: &[(String, String)]) -> Result<Self> {
        let mut pairs = kv::parse_lines(text)?;
        pairs.extend_from_slice(flags);
        Self::resolve(command, &pairs)
    }

    /// Every run key, then every model key when a DiCo preset is in use.
    /// Parsing the result reproduces `self`.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let fmt_bool = |b: bool| b.to_string();
        let mut out: Vec<(String, String)> = vec![
            ("preset".into(), self.preset.clone()),
            ("input_size".into(), self.input_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("out_dir".into(), self.out_dir.display().to_string()),
            (
                "beta_schedule".into(),
                match self.beta_schedule {
                    BetaSchedule::Linear => "linear".into(),
                },
            ),
            ("diffusion_steps".into(), self.diffusion_steps.to_string()),
            ("beta_start".into(), self.beta_start.to_string()),
            ("beta_end".into(), self.beta_end.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("ema_decay".into(), self.ema_decay.to_string()),
            ("hflip_prob".into(), self.hflip_prob.to_string()),
            ("vlb_weight".into(), self.vlb_weight.to_string()),
            ("log_every".into(), self.log_every.to_string()),
            ("data_path".into(), self.data_path.clone()),
            ("checkpoint".into(), self.checkpoint.clone()),
            ("resume".into(), fmt_bool(self.resume)),
            ("num_samples".into(), self.num_samples.to_string()),
            (
                "sample_class".into(),
                self.sample_class.map(|c| c.to_string()).unwrap_or_default(),
            ),
            ("guidance".into(), fmt_bool(self.guidance)),
            ("cfg_scale".into(), self.cfg_scale.to_string()),
            ("sample_steps".into(), self.sample_steps.to_string()),
            ("clip_x0".into(), fmt_bool(self.clip_x0)),
            ("use_ema".into(), fmt_bool(self.use_ema)),
            ("data_count".into(), self.data_count.to_string()),
            ("data_channels".into(), self.data_channels.to_string()),
            ("data_size".into(), self.data_size.to_string()),
            ("data_period".into(), self.data_period.to_string()),
            ("data_amplitude".into(), self.data_amplitude.to_string()),
            ("data_noise".into(), self.data_noise.to_string()),
            ("bench_tokens".into(), kv::render_list(&self.bench_tokens)),
            ("bench_widths".into(), kv::render_list(&self.bench_widths)),
            ("bench_warmup".into(), self.bench_warmup.to_string()),
            ("bench_iters".into(), self.bench_iters.to_string()),
            ("inspect_layer".into(), self.inspect_layer.clone()),
            ("inspect_count".into(), self.inspect_count.to_string()),
            ("inspect_t".into(), self.inspect_t.to_string()),
        ];
        debug_assert_eq!(out.len(), RUN_KEYS.len());
        if let Some(m) = &self.model {
            out.extend(m.to_kv());
        }
        out
    }

    pub fn render(&self) -> String {
        format!("# command={}\n{}", self.command.name(), kv::render(&self.to_kv()))
    }

    pub fn model_config(&self) -> Result<&ModelConfig> {
        self.model.as_ref().ok_or_else(|| {
            Error::Config(format!("preset {} has no DiCo model", self.preset))
        })
    }

    fn path_or(&self, explicit: &str, default: &str) -> PathBuf {
        if explicit.is_empty() {
            self.out_dir.join(default)
        } else {
            PathBuf::from(explicit)
        }
    }

    pub fn data_file(&self) -> PathBuf {
        self.path_or(&self.data_path, "data.dids")
    }

    pub fn checkpoint_file(&self) -> PathBuf {
        self.path_or(&self.checkpoint, "model.ckpt")
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn bench_specs(&self) -> Vec<BenchSpec> {
        let mut specs = Vec::new();
        for &d in &self.bench_widths {
            for &tokens in &self.bench_tokens {
                for block in [BlockKind::ConvModule, BlockKind::SelfAttention] {
                    specs.push(BenchSpec { block, tokens, d });
                }
            }
        }
        specs
    }
}

/// Reads a config file, or the empty config when `path` is `None`.
pub fn read_config_text(path: Option<&Path>) -> Result<String> {
    match path {
        None => Ok(String::new()),
        Some(p) => Ok(std::fs::read_to_string(p)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_recipe() {
        let c = RunConfig::parse(Command::Train, "", &[]).unwrap();
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.ema_decay, 0.9999);
        assert_eq!(c.diffusion_steps, 1000);
        assert_eq!(c.sample_steps, 250);
        assert_eq!(c.batch_size, 256);
    }

    #[test]
    fn even_kernel_rejected() {
        let err = RunConfig::parse(Command::Train, "kernel_size=4", &[]).unwrap_err();
        assert!(err.to_string().contains("even kernel"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse(Command::Train, "learning_rate=1", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("learning_rate")), "{err}");
        assert!(RunConfig::parse(Command::Train, "lr=fast", &[]).is_err());
        assert!(RunConfig::parse(Command::Train, "ema_decay=2", &[]).is_err());
    }

    #[test]
    fn flags_win_and_round_trip() {
        let flags = vec![("lr".to_string(), "0.003".to_string())];
        let c = RunConfig::parse(
            Command::Sample,
            "lr=0.5\nhidden_size=48\npreset=dico-tiny\nsample_class=1",
            &flags,
        )
        .unwrap();
        assert_eq!(c.lr, 0.003);
        assert_eq!(c.model.as_ref().unwrap().hidden_size, 48);
        let again = RunConfig::parse(Command::Sample, &c.render(), &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn reference_presets_only_for_flops() {
        let c = RunConfig::parse(Command::Flops, "preset=dit-s2", &[]).unwrap();
        assert!(c.model.is_none());
        assert_eq!(RunConfig::parse(Command::Flops, &c.render(), &[]).unwrap(), c);
        assert!(RunConfig::parse(Command::Train, "preset=dit-s2", &[]).is_err());
        assert!(RunConfig::parse(Command::Flops, "preset=dit-s2\nhidden_size=3", &[]).is_err());
    }
}

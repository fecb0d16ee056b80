use crate::error::{config_err, Result};
use crate::kernels::Activation;
use crate::kv;

/// Frequency count of the sinusoidal timestep features fed to the timestep MLP.
pub const TIMESTEP_FREQ_DIM: usize = 256;

/// Number of U-shape stages: two encoder stages, bottleneck, two decoder stages.
pub const NUM_STAGES: usize = 5;

/// Describes one DiCo variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub depths: [usize; NUM_STAGES],
    pub ffn_ratio: f64,
    pub kernel_size: usize,
    pub activation: Activation,
    pub use_cca: bool,
    pub in_channels: usize,
    pub num_classes: usize,
    pub label_dropout_prob: f64,
    pub stage_width_multipliers: [usize; NUM_STAGES],
    pub cond_dim: usize,
}

/// Named presets understood by [`ModelConfig::preset`].
pub const PRESETS: &[&str] = &[
    "dico-s",
    "dico-b",
    "dico-l",
    "dico-xl",
    "dico-h",
    "dico-tiny",
    "dico-micro",
];

impl ModelConfig {
    /// A latent-space variant: 4 input channels, 1000 classes.
    pub fn latent(hidden_size: usize, depths: [usize; NUM_STAGES], ffn_ratio: f64) -> Self {
        Self {
            hidden_size,
            depths,
            ffn_ratio,
            kernel_size: 3,
            activation: Activation::Gelu,
            use_cca: true,
            in_channels: 4,
            num_classes: 1000,
            label_dropout_prob: 0.1,
            stage_width_multipliers: [1, 2, 4, 2, 1],
            cond_dim: hidden_size,
        }
    }

    /// A pixel-space toy variant: one input channel, two classes.
    pub fn toy(hidden_size: usize, depths: [usize; NUM_STAGES]) -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            ..Self::latent(hidden_size, depths, 2.0)
        }
    }

    pub fn dico_s() -> Self {
        Self::latent(128, [5, 4, 4, 4, 4], 2.0)
    }

    pub fn dico_b() -> Self {
        Self::latent(256, [5, 4, 4, 4, 4], 2.0)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name.trim().to_ascii_lowercase().as_str() {
            "dico-s" => Self::dico_s(),
            "dico-b" => Self::dico_b(),
            "dico-l" => Self::latent(352, [9, 8, 9, 8, 9], 2.0),
            "dico-xl" => Self::latent(416, [9, 9, 10, 9, 9], 2.0),
            "dico-h" => Self::latent(416, [14, 12, 10, 12, 14], 4.0),
            "dico-tiny" => Self::toy(32, [1, 1, 1, 1, 1]),
            "dico-micro" => Self::toy(8, [1, 1, 1, 1, 1]),
            other => {
                return config_err(format!(
                    "unknown model preset {other:?} (known: {})",
                    PRESETS.join(", ")
                ))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.cond_dim == 0 {
            return config_err("hidden_size and cond_dim must be positive");
        }
        if self.kernel_size % 2 == 0 {
            return config_err(format!(
                "kernel_size={} is an even kernel; same padding needs an odd size",
                self.kernel_size
            ));
        }
        if ![3, 5, 7].contains(&self.kernel_size) {
            return config_err(format!("kernel_size={} not in {{3, 5, 7}}", self.kernel_size));
        }
        if !(self.ffn_ratio.is_finite() && self.ffn_ratio > 0.0) {
            return config_err(format!("ffn_ratio={} must be positive", self.ffn_ratio));
        }
        if self.ffn_hidden(self.hidden_size) == 0 {
            return config_err("ffn_ratio too small: FFN has no hidden channels");
        }
        if !(0.0..=1.0).contains(&self.label_dropout_prob) {
            return config_err(format!(
                "label_dropout_prob={} outside [0, 1]",
                self.label_dropout_prob
            ));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return config_err("in_channels and num_classes must be positive");
        }
        if self.stage_width_multipliers.contains(&0) {
            return config_err("stage_width_multipliers must be positive");
        }
        let w = self.stage_widths();
        if w[3] != w[1] || w[4] != w[0] {
            return config_err(format!(
                "decoder widths {:?} must mirror encoder widths {:?} for skip fusion",
                [w[3], w[4]],
                [w[1], w[0]]
            ));
        }
        Ok(())
    }

    pub fn stage_widths(&self) -> [usize; NUM_STAGES] {
        self.stage_width_multipliers.map(|m| m * self.hidden_size)
    }

    /// FFN hidden width for a stage of `width` channels.
    pub fn ffn_hidden(&self, width: usize) -> usize {
        (width as f64 * self.ffn_ratio).round() as usize
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("hidden_size".into(), self.hidden_size.to_string()),
            ("depths".into(), kv::render_list(&self.depths)),
            ("ffn_ratio".into(), self.ffn_ratio.to_string()),
            ("kernel_size".into(), self.kernel_size.to_string()),
            ("activation".into(), self.activation.name().into()),
            ("use_cca".into(), self.use_cca.to_string()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("label_dropout_prob".into(), self.label_dropout_prob.to_string()),
            (
                "stage_width_multipliers".into(),
                kv::render_list(&self.stage_width_multipliers),
            ),
            ("cond_dim".into(), self.cond_dim.to_string()),
        ]
    }

    pub const KEYS: &'static [&'static str] = &[
        "hidden_size",
        "depths",
        "ffn_ratio",
        "kernel_size",
        "activation",
        "use_cca",
        "in_channels",
        "num_classes",
        "label_dropout_prob",
        "stage_width_multipliers",
        "cond_dim",
    ];

    /// Applies one `key=value` override. Returns `Ok(false)` for keys that
    /// are not model keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "hidden_size" => self.hidden_size = kv::parse_usize(key, value)?,
            "depths" => self.depths = five(key, &kv::parse_usize_list(key, value)?)?,
            "ffn_ratio" => self.ffn_ratio = kv::parse_f64(key, value)?,
            "kernel_size" => self.kernel_size = kv::parse_usize(key, value)?,
            "activation" => self.activation = value.parse()?,
            "use_cca" => self.use_cca = kv::parse_bool(key, value)?,
            "in_channels" => self.in_channels = kv::parse_usize(key, value)?,
            "num_classes" => self.num_classes = kv::parse_usize(key, value)?,
            "label_dropout_prob" => self.label_dropout_prob = kv::parse_f64(key, value)?,
            "stage_width_multipliers" => {
                self.stage_width_multipliers = five(key, &kv::parse_usize_list(key, value)?)?
            }
            "cond_dim" => self.cond_dim = kv::parse_usize(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Rebuilds a config from [`ModelConfig::to_kv`] output; every key is required.
    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::dico_s();
        for key in Self::KEYS {
            let Some((_, v)) = pairs.iter().find(|(k, _)| k == key) else {
                return config_err(format!("model config is missing key {key:?}"));
            };
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn five(key: &str, xs: &[usize]) -> Result<[usize; NUM_STAGES]> {
    xs.try_into()
        .or_else(|_| config_err(format!("{key}: expected {NUM_STAGES} entries, got {}", xs.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dico_s_preset() {
        let c = ModelConfig::preset("dico-s").unwrap();
        assert_eq!(c.hidden_size, 128);
        assert_eq!(c.depths, [5, 4, 4, 4, 4]);
        assert_eq!(c.ffn_ratio, 2.0);
        assert_eq!(c.stage_widths(), [128, 256, 512, 256, 128]);
    }

    #[test]
    fn unknown_preset() {
        assert!(ModelConfig::preset("dico-xxl").is_err());
    }

    #[test]
    fn every_preset_validates() {
        for p in PRESETS {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let mut c = ModelConfig::dico_s();
        c.set("kernel_size", "4").unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("even kernel"), "{err}");
    }

    #[test]
    fn asymmetric_widths_rejected() {
        let mut c = ModelConfig::dico_s();
        c.stage_width_multipliers = [1, 2, 4, 4, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::preset("dico-tiny").unwrap();
        c.ffn_ratio = 1.5;
        c.activation = Activation::Relu;
        c.use_cca = false;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }
}

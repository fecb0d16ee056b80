//! Analytic multiply-accumulate and parameter counts.
//!
//! Only products are counted: convolutions, linear maps and the two
//! attention matmuls. Normalization, activations and elementwise
//! modulation are free under this convention.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::kernels::conv2d_macs;
use crate::nn::{DiCo, ModelConfig, TIMESTEP_FREQ_DIM};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

pub const MAC_CONVENTION: &str = "1 multiply-accumulate = 1 FLOP";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub model: String,
    /// `(channels, height, width)` of one input sample.
    pub input: (usize, usize, usize),
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// Rows keyed by name, for order-insensitive comparison.
    pub fn by_name(&self) -> BTreeMap<&str, (u64, u64)> {
        self.rows
            .iter()
            .map(|r| (r.name.as_str(), (r.macs, r.params)))
            .collect()
    }

    /// Header row, one row per layer, a `total` row, and a trailing comment
    /// stating the convention.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,macs,params\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.name, r.kind, r.macs, r.params);
        }
        let _ = writeln!(s, "total,,{},{}", self.total_macs(), self.total_params());
        let (c, h, w) = self.input;
        let _ = writeln!(
            s,
            "# model {}; input {c}x{h}x{w}; {MAC_CONVENTION}",
            self.model
        );
        s
    }
}

struct Rows(Vec<CostRow>);

impl Rows {
    fn push(&mut self, name: impl Into<String>, kind: &str, macs: usize, params: usize) {
        self.0.push(CostRow {
            name: name.into(),
            kind: kind.into(),
            macs: macs as u64,
            params: params as u64,
        });
    }

    /// Same-padded stride-1 convolution with bias over `pixels` outputs.
    fn conv(&mut self, name: impl Into<String>, c_in: usize, c_out: usize, k: usize, groups: usize, pixels: usize) {
        let w = c_out * (c_in / groups) * k * k;
        let kind = if groups > 1 { "conv-depthwise" } else { "conv" };
        self.push(name, kind, w * pixels, w + c_out);
    }

    fn linear(&mut self, name: impl Into<String>, d_in: usize, d_out: usize, tokens: usize) {
        self.push(name, "linear", d_in * d_out * tokens, d_in * d_out + d_out);
    }
}

/// Closed-form costs of a DiCo config for one `(c, h, w)` input.
pub fn count_dico(config: &ModelConfig, name: &str, input: (usize, usize, usize)) -> Result<CostReport> {
    config.validate()?;
    let (c, h, w) = input;
    if c != config.in_channels {
        return dim_err(format!("input has {c} channels, config expects {}", config.in_channels));
    }
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return dim_err(format!("input {h}x{w} must be divisible by 4"));
    }
    let wd = config.stage_widths();
    let cd = config.cond_dim;
    let k = config.kernel_size;
    let px = [h * w, h * w / 4, h * w / 16, h * w / 4, h * w];
    let mut r = Rows(Vec::new());

    r.linear("t_embed.fc1", TIMESTEP_FREQ_DIM, cd, 1);
    r.linear("t_embed.fc2", cd, cd, 1);
    r.push("y_embed", "embedding", 0, (config.num_classes + 1) * cd);
    r.conv("stem", c, config.hidden_size, 3, 1, px[0]);
    for (s, &depth) in config.depths.iter().enumerate() {
        let (cw, n) = (wd[s], px[s]);
        let hidden = config.ffn_hidden(cw);
        for i in 0..depth {
            let pre = format!("stages.{s}.blocks.{i}");
            r.linear(format!("{pre}.ada"), cd, 6 * cw, 1);
            r.linear(format!("{pre}.conv_module.pw1"), cw, cw, n);
            r.conv(format!("{pre}.conv_module.dw"), cw, cw, k, cw, n);
            if config.use_cca {
                r.linear(format!("{pre}.conv_module.cca"), cw, cw, 1);
            }
            r.linear(format!("{pre}.conv_module.pw2"), cw, cw, n);
            r.linear(format!("{pre}.ffn.fc1"), cw, hidden, n);
            r.linear(format!("{pre}.ffn.fc2"), hidden, cw, n);
        }
    }
    r.linear("down.0", 4 * wd[0], wd[1], px[1]);
    r.linear("down.1", 4 * wd[1], wd[2], px[2]);
    r.linear("up.0", wd[2], 4 * wd[3], px[2]);
    r.linear("skip.0", 2 * wd[3], wd[3], px[3]);
    r.linear("up.1", wd[3], 4 * wd[4], px[3]);
    r.linear("skip.1", 2 * wd[4], wd[4], px[4]);
    r.linear("final.ada", cd, 2 * wd[4], 1);
    r.conv("head", wd[4], 2 * c, 3, 1, px[4]);
    Ok(CostReport {
        model: name.into(),
        input,
        rows: r.0,
    })
}

/// Independent count: runs a batch-1 forward of the instantiated model and
/// walks every convolution the tape recorded, with parameter counts taken
/// from the registry. Parameters no convolution touched (the label table)
/// appear as zero-MAC rows.
pub fn enumerate_dico<T: Scalar>(model: &DiCo<T>, name: &str, input: (usize, usize, usize)) -> Result<CostReport> {
    let (c, h, w) = input;
    let mut tape = Tape::<T>::new();
    let bound = model.params.load(&mut tape, false);
    let z = tape.constant(Tensor::zeros(Shape::new(1, c, h, w)));
    model.forward(&mut tape, &bound, z, &[0], &[model.config.num_classes])?;

    let mut macs: BTreeMap<String, u64> = BTreeMap::new();
    for rec in tape.conv_records() {
        let id = bound
            .id_of(rec.weight_var)
            .ok_or_else(|| Error::Usage(format!("convolution at node {} has a non-parameter weight", rec.node)))?;
        let layer = model
            .params
            .name(id)
            .strip_suffix(".weight")
            .ok_or_else(|| Error::Usage(format!("weight parameter {} lacks the .weight suffix", model.params.name(id))))?
            .to_string();
        *macs.entry(layer).or_default() += conv2d_macs(rec.input, rec.weight, rec.spec)?;
    }

    let mut rows: Vec<CostRow> = Vec::new();
    for (pname, t) in model.params.iter() {
        let layer = pname.rsplit_once('.').map_or(pname, |(l, _)| l);
        match rows.iter_mut().find(|r| r.name == layer) {
            Some(r) => r.params += t.numel() as u64,
            None => rows.push(CostRow {
                name: layer.to_string(),
                kind: if macs.contains_key(layer) { "conv" } else { "embedding" }.into(),
                macs: macs.get(layer).copied().unwrap_or(0),
                params: t.numel() as u64,
            }),
        }
    }
    Ok(CostReport {
        model: name.into(),
        input,
        rows,
    })
}

/// Instantiates `config` and enumerates it; see [`enumerate_dico`].
pub fn enumerate_config(config: &ModelConfig, name: &str, input: (usize, usize, usize)) -> Result<CostReport> {
    let model = DiCo::<f32>::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    enumerate_dico(&model, name, input)
}

/// A DiT reference model: patchify, `depth` adaLN transformer blocks,
/// final adaLN layer and linear unpatchify, with learned variance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DitSpec {
    pub depth: usize,
    pub width: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl DitSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let (depth, width, patch) = match name.trim().to_ascii_lowercase().as_str() {
            "dit-s2" => (12, 384, 2),
            "dit-b2" => (12, 768, 2),
            "dit-l2" => (24, 1024, 2),
            "dit-xl2" => (28, 1152, 2),
            other => return config_err(format!("unknown reference preset {other:?}")),
        };
        Ok(Self {
            depth,
            width,
            patch,
            mlp_ratio: 4,
            in_channels: 4,
            num_classes: 1000,
        })
    }
}

pub const DIT_PRESETS: &[&str] = &["dit-s2", "dit-b2", "dit-l2", "dit-xl2"];

/// Each block costs `12·N·d² + 2·N²·d` plus its adaLN projection. The fixed
/// sinusoidal position table is not a parameter.
pub fn count_dit(spec: &DitSpec, name: &str, input: (usize, usize, usize)) -> Result<CostReport> {
    let (c, h, w) = input;
    let p = spec.patch;
    if c != spec.in_channels || p == 0 || h % p != 0 || w % p != 0 {
        return dim_err(format!("input {c}x{h}x{w} does not patchify with patch {p}"));
    }
    let d = spec.width;
    let n = (h / p) * (w / p);
    let mut r = Rows(Vec::new());
    r.push("x_embed", "conv", c * p * p * d * n, c * p * p * d + d);
    r.linear("t_embed.fc1", TIMESTEP_FREQ_DIM, d, 1);
    r.linear("t_embed.fc2", d, d, 1);
    r.push("y_embed", "embedding", 0, (spec.num_classes + 1) * d);
    for i in 0..spec.depth {
        let pre = format!("blocks.{i}");
        r.linear(format!("{pre}.ada"), d, 6 * d, 1);
        r.linear(format!("{pre}.attn.qkv"), d, 3 * d, n);
        r.push(format!("{pre}.attn.core"), "attention", 2 * n * n * d, 0);
        r.linear(format!("{pre}.attn.proj"), d, d, n);
        r.linear(format!("{pre}.mlp.fc1"), d, spec.mlp_ratio * d, n);
        r.linear(format!("{pre}.mlp.fc2"), spec.mlp_ratio * d, d, n);
    }
    r.linear("final.ada", d, 2 * d, 1);
    r.linear("final.linear", d, p * p * 2 * c, n);
    Ok(CostReport {
        model: name.into(),
        input,
        rows: r.0,
    })
}

/// Cost report for any named preset, DiCo or DiT reference.
pub fn count_preset(name: &str, input: (usize, usize, usize)) -> Result<CostReport> {
    if DIT_PRESETS.contains(&name.trim().to_ascii_lowercase().as_str()) {
        count_dit(&DitSpec::preset(name)?, name, input)
    } else {
        count_dico(&ModelConfig::preset(name)?, name, input)
    }
}

/// `4·N·d²` for the q/k/v/output projections plus `2·N²·d` for the logits
/// and the weighted sum.
pub fn attention_macs(tokens: u64, d: u64) -> u64 {
    4 * tokens * d * d + 2 * tokens * tokens * d
}

/// Two pointwise convs, a `k×k` depthwise conv, and (with channel attention)
/// one `d×d` projection of the pooled vector.
pub fn conv_module_macs(tokens: u64, d: u64, k: u64, cca: bool) -> u64 {
    2 * tokens * d * d + k * k * tokens * d + if cca { d * d } else { 0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_definition() {
        let mut r = Rows(Vec::new());
        r.linear("x", 128, 128, 32 * 32);
        assert_eq!(r.0[0].macs, 16_777_216);
    }

    #[test]
    fn tiny_counter_matches_enumerator() {
        for name in ["dico-tiny", "dico-micro"] {
            let cfg = ModelConfig::preset(name).unwrap();
            let a = count_dico(&cfg, name, (1, 16, 16)).unwrap();
            let b = enumerate_config(&cfg, name, (1, 16, 16)).unwrap();
            assert_eq!(a.by_name(), b.by_name());
        }
    }

    #[test]
    fn csv_has_total() {
        let rep = count_preset("dit-s2", (4, 32, 32)).unwrap();
        let csv = rep.to_csv();
        assert!(csv.starts_with("layer,kind,macs,params\n"));
        assert!(csv.contains(&format!("total,,{},", rep.total_macs())));
        assert!(count_preset("dit-q", (4, 32, 32)).is_err());
    }
}

//! `DICO` checkpoint files.
//!
//! Layout: magic, u32 version, length-prefixed `key=value` config text,
//! u32 record count, then records of (length-prefixed name, u8 rank, u32
//! dims, little-endian f32 data). Records are named `param/…`, `adam_m/…`,
//! `adam_v/…` and `ema/…`, each group in parameter order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{put_bytes, put_f32s, put_u32, Reader};
use crate::error::{Error, FormatError, Result};
use crate::kv;
use crate::nn::{DiCo, ModelConfig, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::ema::EmaState;
use super::optim::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DICO";
pub const CHECKPOINT_VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["param", "adam_m", "adam_v", "ema"];

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: DiCo<T>,
    pub opt: OptimizerState<T>,
    pub ema: EmaState<T>,
}

fn config_text<T: Scalar>(model: &DiCo<T>, opt: &OptimizerState<T>, ema: &EmaState<T>) -> String {
    let mut pairs = model.config.to_kv();
    pairs.extend([
        ("opt.step".into(), opt.step.to_string()),
        ("opt.lr".into(), opt.lr.to_string()),
        ("opt.beta1".into(), opt.beta1.to_string()),
        ("opt.beta2".into(), opt.beta2.to_string()),
        ("opt.eps".into(), opt.eps.to_string()),
        ("opt.weight_decay".into(), opt.weight_decay.to_string()),
        ("ema.decay".into(), ema.decay.to_string()),
    ]);
    kv::render(&pairs)
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_bytes(out, name.as_bytes());
    out.push(4);
    for d in t.shape().dims() {
        put_u32(out, d as u32);
    }
    put_f32s(out, t.data().iter().map(|x| x.to_f64_lossy() as f32));
}

pub fn encode_checkpoint<T: Scalar>(
    model: &DiCo<T>,
    opt: &OptimizerState<T>,
    ema: &EmaState<T>,
) -> Result<Vec<u8>> {
    ema.shadow.check_layout(&model.params)?;
    if opt.m.len() != model.params.len() || opt.v.len() != model.params.len() {
        return Err(Error::Dimension("optimizer moments do not mirror the parameters".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_bytes(&mut out, config_text(model, opt, ema).as_bytes());
    put_u32(&mut out, (GROUPS.len() * model.params.len()) as u32);
    for (name, t) in model.params.iter() {
        put_tensor(&mut out, &format!("param/{name}"), t);
    }
    for ((name, _), m) in model.params.iter().zip(&opt.m) {
        put_tensor(&mut out, &format!("adam_m/{name}"), m);
    }
    for ((name, _), v) in model.params.iter().zip(&opt.v) {
        put_tensor(&mut out, &format!("adam_v/{name}"), v);
    }
    for (name, t) in ema.shadow.iter() {
        put_tensor(&mut out, &format!("ema/{name}"), t);
    }
    Ok(out)
}

fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| FormatError::Malformed(format!("config text lacks {key:?}")).into())
}

fn read_tensor<T: Scalar>(r: &mut Reader<'_>, expect_name: &str, shape: Shape) -> Result<Tensor<T>> {
    let section = format!("record {expect_name}");
    let name = r.bytes(&section)?;
    if name != expect_name.as_bytes() {
        return Err(FormatError::Malformed(format!(
            "expected record {expect_name}, found {}",
            String::from_utf8_lossy(name)
        ))
        .into());
    }
    let rank = r.u8(&section)? as usize;
    let mut dims = [1usize; 4];
    if rank > 4 {
        return Err(FormatError::Malformed(format!("{expect_name}: rank {rank}")).into());
    }
    for d in dims.iter_mut().take(rank) {
        *d = r.u32(&section)? as usize;
    }
    let found = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    if found != shape {
        return Err(FormatError::ConfigMismatch(format!(
            "{expect_name} has shape {found}, config implies {shape}"
        ))
        .into());
    }
    let data = r.f32s(shape.numel(), &section)?;
    Tensor::from_vec(shape, data.into_iter().map(|x| T::of(f64::from(x))).collect())
}

/// Decodes a checkpoint. With `expected`, a file written for a different
/// model config is rejected before any tensor is read.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let text = std::str::from_utf8(r.bytes("config text")?)
        .map_err(|_| FormatError::Malformed("config text is not UTF-8".into()))?;
    let pairs = kv::parse_lines(text)?;
    let model_pairs: Vec<_> = pairs
        .iter()
        .filter(|(k, _)| ModelConfig::KEYS.contains(&k.as_str()))
        .cloned()
        .collect();
    let config = ModelConfig::from_kv(&model_pairs)
        .map_err(|e| FormatError::Malformed(format!("config text: {e}")))?;
    if let Some(want) = expected {
        if *want != config {
            let diff: Vec<String> = want
                .to_kv()
                .into_iter()
                .zip(config.to_kv())
                .filter(|(a, b)| a != b)
                .map(|((k, a), (_, b))| format!("{k}: expected {a}, file has {b}"))
                .collect();
            return Err(FormatError::ConfigMismatch(diff.join("; ")).into());
        }
    }

    let num = |key: &str| -> Result<f64> {
        kv::parse_f64(key, lookup(&pairs, key)?).map_err(|e| FormatError::Malformed(e.to_string()).into())
    };
    let step = kv::parse_u64("opt.step", lookup(&pairs, "opt.step")?)
        .map_err(|e| FormatError::Malformed(e.to_string()))?;

    let mut model = DiCo::<T>::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = r.u32("record count")? as usize;
    if count != GROUPS.len() * model.params.len() {
        return Err(FormatError::ConfigMismatch(format!(
            "{count} records, config implies {}",
            GROUPS.len() * model.params.len()
        ))
        .into());
    }
    let layout: Vec<(String, Shape)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape()))
        .collect();
    let mut groups: Vec<Vec<Tensor<T>>> = Vec::with_capacity(GROUPS.len());
    for g in GROUPS {
        let tensors = layout
            .iter()
            .map(|(name, shape)| read_tensor(&mut r, &format!("{g}/{name}"), *shape))
            .collect::<Result<Vec<_>>>()?;
        groups.push(tensors);
    }
    r.finish()?;

    let ema_t = groups.pop().expect("ema group");
    let v = groups.pop().expect("adam_v group");
    let m = groups.pop().expect("adam_m group");
    let params = groups.pop().expect("param group");
    let ids: Vec<_> = model.params.ids().collect();
    let mut shadow: ParamStore<T> = model.params.clone();
    for ((id, p), e) in ids.into_iter().zip(params).zip(ema_t) {
        model.params.set(id, p)?;
        shadow.set(id, e)?;
    }
    let opt = OptimizerState {
        m,
        v,
        step,
        lr: num("opt.lr")?,
        beta1: num("opt.beta1")?,
        beta2: num("opt.beta2")?,
        eps: num("opt.eps")?,
        weight_decay: num("opt.weight_decay")?,
    };
    let ema = EmaState {
        shadow,
        decay: num("ema.decay")?,
    };
    Ok(Checkpoint { model, opt, ema })
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &DiCo<T>,
    opt: &OptimizerState<T>,
    ema: &EmaState<T>,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, opt, ema)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    decode_checkpoint(&std::fs::read(path)?, expected)
}

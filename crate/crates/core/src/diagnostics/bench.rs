use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::kernels::{Activation, Conv2dSpec};
use crate::nn::{trunc_normal, ConvLayer, ConvModule, ParamStore, Trace};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

use super::attention::SelfAttention;
use super::cost::{attention_macs, conv_module_macs};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    ConvModule,
    SelfAttention,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::ConvModule => "conv_module",
            Self::SelfAttention => "self_attention",
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "conv_module" => Ok(Self::ConvModule),
            "self_attention" => Ok(Self::SelfAttention),
            other => config_err(format!("unknown block kind {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchSpec {
    pub block: BlockKind,
    pub tokens: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub spec: BenchSpec,
    pub macs: u64,
    pub iters: usize,
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

/// Grid for `tokens` positions: square when possible, else one row.
fn grid(tokens: usize) -> (usize, usize) {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side == tokens {
        (side, side)
    } else {
        (1, tokens)
    }
}

fn conv_module(d: usize, rng: &mut ChaCha8Rng) -> (ParamStore<f32>, ConvModule) {
    let mut p = ParamStore::new();
    let mut layer = |name: &str, c_in: usize, k: usize, groups: usize| {
        let weight = p.add(
            format!("{name}.weight"),
            trunc_normal(Shape::new(d, c_in / groups, k, k), 0.02, rng),
        );
        let bias = p.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(1, d)));
        ConvLayer {
            weight,
            bias: Some(bias),
            spec: Conv2dSpec::same(k, groups),
        }
    };
    let module = ConvModule {
        pw1: layer("pw1", d, 1, 1),
        dw: layer("dw", d, 3, d),
        cca: Some(layer("cca", d, 1, 1)),
        pw2: layer("pw2", d, 1, 1),
        activation: Activation::Gelu,
    };
    (p, module)
}

/// Times `warmup + iters` forwards per spec with a monotonic clock and
/// reports the distribution of the timed ones.
pub fn throughput_bench(specs: &[BenchSpec], warmup: usize, iters: usize) -> Result<Vec<BenchRow>> {
    if iters == 0 {
        return config_err("bench needs at least one timed iteration");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(specs.len());
    for &spec in specs {
        if spec.tokens == 0 || spec.d == 0 {
            return config_err(format!("bench spec {spec:?} has an empty dimension"));
        }
        let (h, w) = grid(spec.tokens);
        let x = Tensor::<f32>::randn(Shape::new(1, spec.d, h, w), 1.0, &mut rng);
        let mut run: Box<dyn FnMut() -> Result<()>> = match spec.block {
            BlockKind::ConvModule => {
                let (params, module) = conv_module(spec.d, &mut rng);
                let x = x.clone();
                Box::new(move || {
                    let mut tape = Tape::new();
                    let p = params.load(&mut tape, false);
                    let xv = tape.constant(x.clone());
                    module.forward(&mut tape, &p, xv, &mut Trace::off(), "bench")?;
                    Ok(())
                })
            }
            BlockKind::SelfAttention => {
                let att = SelfAttention::<f32>::random(spec.d, &mut rng);
                // tokens as rows: transpose the channel-major grid
                let tokens: Vec<f32> = (0..spec.tokens)
                    .flat_map(|i| (0..spec.d).map(move |c| (i, c)))
                    .map(|(i, c)| x.data()[c * spec.tokens + i])
                    .collect();
                Box::new(move || att.forward(&tokens, spec.tokens).map(|_| ()))
            }
        };
        for _ in 0..warmup {
            run()?;
        }
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let start = Instant::now();
            run()?;
            times.push(start.elapsed().as_secs_f64() * 1e6);
        }
        times.sort_by(f64::total_cmp);
        let (n, d) = (spec.tokens as u64, spec.d as u64);
        rows.push(BenchRow {
            spec,
            macs: match spec.block {
                BlockKind::ConvModule => conv_module_macs(n, d, 3, true),
                BlockKind::SelfAttention => attention_macs(n, d),
            },
            iters,
            median_us: percentile(&times, 0.5),
            p10_us: percentile(&times, 0.1),
            p90_us: percentile(&times, 0.9),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("block,tokens,d,macs,iters,median_us,p10_us,p90_us\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.3},{:.3},{:.3}",
            r.spec.block.name(),
            r.spec.tokens,
            r.spec.d,
            r.macs,
            r.iters,
            r.median_us,
            r.p10_us,
            r.p90_us
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_spec() {
        let specs = [
            BenchSpec {
                block: BlockKind::ConvModule,
                tokens: 16,
                d: 8,
            },
            BenchSpec {
                block: BlockKind::SelfAttention,
                tokens: 16,
                d: 8,
            },
        ];
        let rows = throughput_bench(&specs, 0, 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(bench_csv(&rows).lines().count(), 3);
        assert!(throughput_bench(&specs, 0, 0).is_err());
    }
}

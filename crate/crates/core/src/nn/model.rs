//! The DiCo network: embedders, gated conv blocks, U-shaped assembly and the
//! noise/variance head.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{Activation, Conv2dSpec, ResampleDirection};
use crate::nn::config::{ModelConfig, NUM_STAGES, TIMESTEP_FREQ_DIM};
use crate::nn::embed::sinusoidal_embedding;
use crate::nn::params::{trunc_normal, BoundParams, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Named intermediate values collected during a forward pass.
#[derive(Debug, Default)]
pub struct Trace {
    enabled: bool,
    pub entries: Vec<(String, Var)>,
}

impl Trace {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn on() -> Self {
        Self {
            enabled: true,
            entries: Vec::new(),
        }
    }

    fn record(&mut self, name: impl FnOnce() -> String, v: Var) {
        if self.enabled {
            self.entries.push((name(), v));
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl ConvLayer {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.spec)
    }
}

/// `x ⊙ sigmoid(W·GAP(x) + b)`: one gate per sample and channel.
pub fn cca<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let pooled = tape.global_avg_pool(x)?;
    let logits = tape.conv2d(pooled, weight, Some(bias), Conv2dSpec::POINTWISE)?;
    let gate = tape.activation(logits, Activation::Sigmoid);
    tape.channel_scale(x, gate)
}

/// Pointwise conv, depthwise conv, activation, optional channel attention,
/// pointwise conv.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub pw1: ConvLayer,
    pub dw: ConvLayer,
    pub cca: Option<ConvLayer>,
    pub pw2: ConvLayer,
    pub activation: Activation,
}

impl ConvModule {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        x: Var,
        trace: &mut Trace,
        prefix: &str,
    ) -> Result<Var> {
        let h = self.pw1.forward(tape, p, x)?;
        let h = self.dw.forward(tape, p, h)?;
        let mut h = tape.activation(h, self.activation);
        trace.record(|| format!("{prefix}.act"), h);
        if let Some(layer) = &self.cca {
            let bias = layer.bias.expect("cca layer has a bias");
            h = cca(tape, h, p.var(layer.weight), p.var(bias))?;
        }
        trace.record(|| format!("{prefix}.mixed"), h);
        self.pw2.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: ConvLayer,
    pub fc2: ConvLayer,
    pub activation: Activation,
}

impl Ffn {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.activation(h, self.activation);
        self.fc2.forward(tape, p, h)
    }
}

/// Two gated residual branches (conv module, then FFN), each pre-normalized
/// and modulated by the condition.
#[derive(Clone, Debug)]
pub struct DiCoBlock {
    pub width: usize,
    /// `silu(cond) → 6·width` values: γ1, β1, α1, γ2, β2, α2.
    pub ada: ConvLayer,
    pub conv_module: ConvModule,
    pub ffn: Ffn,
}

impl DiCoBlock {
    /// `cond_act` is `silu(cond)` of shape `(n, cond_dim, 1, 1)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        x: Var,
        cond_act: Var,
        trace: &mut Trace,
        prefix: &str,
    ) -> Result<Var> {
        let c = self.width;
        let m = self.ada.forward(tape, p, cond_act)?;
        let mut chunk = |i: usize| tape.slice_channels(m, i * c, c);
        let (g1, b1, a1) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (g2, b2, a2) = (chunk(3)?, chunk(4)?, chunk(5)?);

        let h = tape.channel_layer_norm(x, T::of(NORM_EPS))?;
        let h = tape.modulate(h, g1, b1)?;
        let h = self
            .conv_module
            .forward(tape, p, h, trace, &format!("{prefix}.conv_module"))?;
        let h = tape.channel_scale(h, a1)?;
        let x = tape.add(x, h)?;

        let h = tape.channel_layer_norm(x, T::of(NORM_EPS))?;
        let h = tape.modulate(h, g2, b2)?;
        let h = self.ffn.forward(tape, p, h)?;
        let h = tape.channel_scale(h, a2)?;
        let x = tape.add(x, h)?;
        trace.record(|| format!("{prefix}.out"), x);
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Down,
    Up,
}

/// Down: pixel-unshuffle by 2 then a 1×1 conv; up: a 1×1 conv then
/// pixel-shuffle by 2.
pub fn resample<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    x: Var,
    direction: Resample,
    layer: &ConvLayer,
) -> Result<Var> {
    match direction {
        Resample::Down => {
            let h = tape.pixel_resample(x, 2, ResampleDirection::Unshuffle)?;
            layer.forward(tape, p, h)
        }
        Resample::Up => {
            let h = layer.forward(tape, p, x)?;
            tape.pixel_resample(h, 2, ResampleDirection::Shuffle)
        }
    }
}

/// Concatenates decoder then encoder features and reduces back with a 1×1 conv.
pub fn skip_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    dec: Var,
    enc: Var,
    layer: &ConvLayer,
) -> Result<Var> {
    if tape.shape(dec) != tape.shape(enc) {
        return dim_err(format!(
            "skip_fuse: decoder {} and encoder {} shapes differ",
            tape.shape(dec),
            tape.shape(enc)
        ));
    }
    let cat = tape.concat_channels(dec, enc)?;
    layer.forward(tape, p, cat)
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub width: usize,
    pub blocks: Vec<DiCoBlock>,
}

/// Noise prediction and variance-interpolation output on a tape.
#[derive(Clone, Copy, Debug)]
pub struct NetOutputVars {
    pub eps: Var,
    pub v: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput<T> {
    pub eps: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DiCo<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub t_fc1: ConvLayer,
    pub t_fc2: ConvLayer,
    pub label_table: ParamId,
    pub stem: ConvLayer,
    pub stages: Vec<Stage>,
    pub down: [ConvLayer; 2],
    pub up: [ConvLayer; 2],
    pub skip: [ConvLayer; 2],
    pub final_ada: ConvLayer,
    pub head: ConvLayer,
}

enum Init {
    TruncNormal,
    FanInUniform,
    Zero,
}

struct Builder<'a, T, R: ?Sized> {
    params: ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn tensor(&mut self, name: String, shape: Shape, init: Init) -> ParamId {
        let value = match init {
            Init::TruncNormal => trunc_normal(shape, INIT_STD, self.rng),
            Init::FanInUniform => {
                let bound = 1.0 / ((shape.c * shape.h * shape.w) as f64).sqrt();
                Tensor::uniform(shape, -bound, bound, self.rng)
            }
            Init::Zero => Tensor::zeros(shape),
        };
        self.params.add(name, value)
    }

    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        groups: usize,
        init: Init,
    ) -> ConvLayer {
        let weight = self.tensor(
            format!("{name}.weight"),
            Shape::new(c_out, c_in / groups, k, k),
            init,
        );
        let bias = Some(self.tensor(format!("{name}.bias"), Shape::vector(1, c_out), Init::Zero));
        ConvLayer {
            weight,
            bias,
            spec: Conv2dSpec::same(k, groups),
        }
    }

    fn linear(&mut self, name: &str, c_in: usize, c_out: usize, init: Init) -> ConvLayer {
        self.conv(name, c_in, c_out, 1, 1, init)
    }
}

impl<T: Scalar> DiCo<T> {
    /// Builds and initializes a model. Linear and 1×1 weights are truncated
    /// normal (std 0.02), depthwise kernels fan-in uniform, biases zero; the
    /// adaLN gate rows and the output head start at zero.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let widths = config.stage_widths();
        let d = config.hidden_size;
        let cd = config.cond_dim;
        let k = config.kernel_size;
        let mut b = Builder {
            params: ParamStore::new(),
            rng,
        };

        let t_fc1 = b.linear("t_embed.fc1", TIMESTEP_FREQ_DIM, cd, Init::TruncNormal);
        let t_fc2 = b.linear("t_embed.fc2", cd, cd, Init::TruncNormal);
        let label_table = b.tensor(
            "y_embed.table".into(),
            Shape::new(config.num_classes + 1, cd, 1, 1),
            Init::TruncNormal,
        );
        let stem = b.conv("stem", config.in_channels, d, 3, 1, Init::TruncNormal);

        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (s, (&depth, &width)) in config.depths.iter().zip(&widths).enumerate() {
            let blocks = (0..depth)
                .map(|i| {
                    let pre = format!("stages.{s}.blocks.{i}");
                    let ada = Self::ada_layer(&mut b, &format!("{pre}.ada"), cd, width);
                    let conv_module = ConvModule {
                        pw1: b.linear(&format!("{pre}.conv_module.pw1"), width, width, Init::TruncNormal),
                        dw: b.conv(&format!("{pre}.conv_module.dw"), width, width, k, width, Init::FanInUniform),
                        cca: config.use_cca.then(|| {
                            b.linear(&format!("{pre}.conv_module.cca"), width, width, Init::TruncNormal)
                        }),
                        pw2: b.linear(&format!("{pre}.conv_module.pw2"), width, width, Init::TruncNormal),
                        activation: config.activation,
                    };
                    let hidden = config.ffn_hidden(width);
                    let ffn = Ffn {
                        fc1: b.linear(&format!("{pre}.ffn.fc1"), width, hidden, Init::TruncNormal),
                        fc2: b.linear(&format!("{pre}.ffn.fc2"), hidden, width, Init::TruncNormal),
                        activation: config.activation,
                    };
                    DiCoBlock {
                        width,
                        ada,
                        conv_module,
                        ffn,
                    }
                })
                .collect();
            stages.push(Stage { width, blocks });
        }

        let down = [
            b.linear("down.0", 4 * widths[0], widths[1], Init::TruncNormal),
            b.linear("down.1", 4 * widths[1], widths[2], Init::TruncNormal),
        ];
        let up = [
            b.linear("up.0", widths[2], 4 * widths[3], Init::TruncNormal),
            b.linear("up.1", widths[3], 4 * widths[4], Init::TruncNormal),
        ];
        let skip = [
            b.linear("skip.0", 2 * widths[3], widths[3], Init::TruncNormal),
            b.linear("skip.1", 2 * widths[4], widths[4], Init::TruncNormal),
        ];
        let final_ada = b.linear("final.ada", cd, 2 * widths[4], Init::TruncNormal);
        let head = b.conv("head", widths[4], 2 * config.in_channels, 3, 1, Init::Zero);

        Ok(Self {
            config,
            params: b.params,
            t_fc1,
            t_fc2,
            label_table,
            stem,
            stages,
            down,
            up,
            skip,
            final_ada,
            head,
        })
    }

    fn ada_layer<R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        cond_dim: usize,
        width: usize,
    ) -> ConvLayer {
        let layer = b.linear(name, cond_dim, 6 * width, Init::TruncNormal);
        // gates α1 (rows 2w..3w) and α2 (rows 5w..6w) start closed
        let w = b.params.get_mut(layer.weight);
        for row in (2 * width..3 * width).chain(5 * width..6 * width) {
            w.sample_mut(row).fill(T::zero());
        }
        layer
    }

    /// Scalar count of all parameters.
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, &DiCoBlock)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, st)| st.blocks.iter().enumerate().map(move |(i, b)| (s, i, b)))
    }

    /// Overwrites the zero-initialized gates and head with random values so
    /// every parameter influences the output.
    pub fn perturb_zero_init<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let mut ids = Vec::new();
        for (_, _, block) in self.blocks() {
            ids.push(block.ada.weight);
        }
        for id in ids {
            let w = self.params.get_mut(id);
            let rows = w.shape().n;
            let width = rows / 6;
            for row in (2 * width..3 * width).chain(5 * width..6 * width) {
                for v in w.sample_mut(row) {
                    *v = trunc_normal::<T, R>(Shape::scalar(), std, rng).data()[0];
                }
            }
        }
        for id in [self.head.weight, self.head.bias.expect("head bias")] {
            let shape = self.params.get(id).shape();
            self.params
                .set(id, trunc_normal(shape, std, rng))
                .expect("same shape");
        }
    }

    fn check_inputs(&self, z: Shape, t: &[usize], y: &[usize]) -> Result<()> {
        if z.c != self.config.in_channels {
            return dim_err(format!(
                "input has {} channels, model expects {}",
                z.c, self.config.in_channels
            ));
        }
        if z.h % 4 != 0 || z.w % 4 != 0 || z.h == 0 || z.w == 0 {
            return dim_err(format!("input spatial size {}x{} must be divisible by 4", z.h, z.w));
        }
        if t.len() != z.n || y.len() != z.n {
            return dim_err(format!(
                "batch {} but {} timesteps and {} labels",
                z.n,
                t.len(),
                y.len()
            ));
        }
        if let Some(&bad) = y.iter().find(|&&l| l > self.config.num_classes) {
            return Err(Error::Usage(format!(
                "label {bad} out of range (null index is {})",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Condition vector `t_emb + y_emb`, shape `(n, cond_dim, 1, 1)`.
    pub fn condition(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        t: &[usize],
        y: &[usize],
    ) -> Result<Var> {
        let freqs = tape.constant(sinusoidal_embedding(t, TIMESTEP_FREQ_DIM)?);
        let h = self.t_fc1.forward(tape, p, freqs)?;
        let h = tape.activation(h, Activation::Silu);
        let t_emb = self.t_fc2.forward(tape, p, h)?;
        let y_emb = tape.gather_rows(p.var(self.label_table), y)?;
        tape.add(t_emb, y_emb)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        z: Var,
        t: &[usize],
        y: &[usize],
    ) -> Result<NetOutputVars> {
        self.forward_traced(tape, p, z, t, y, &mut Trace::off())
    }

    /// Forward pass that also records named intermediate features in `trace`:
    /// `stages.{s}.blocks.{b}.conv_module.act`, `.conv_module.mixed` (after
    /// channel attention when enabled) and `.out`.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        z: Var,
        t: &[usize],
        y: &[usize],
        trace: &mut Trace,
    ) -> Result<NetOutputVars> {
        self.check_inputs(tape.shape(z), t, y)?;
        let cond = self.condition(tape, p, t, y)?;
        let cond_act = tape.activation(cond, Activation::Silu);

        let run_stage = |tape: &mut Tape<T>, trace: &mut Trace, s: usize, mut h: Var| {
            for (i, block) in self.stages[s].blocks.iter().enumerate() {
                h = block.forward(tape, p, h, cond_act, trace, &format!("stages.{s}.blocks.{i}"))?;
            }
            Ok::<_, Error>(h)
        };

        let h = self.stem.forward(tape, p, z)?;
        let enc0 = run_stage(tape, trace, 0, h)?;
        let h = resample(tape, p, enc0, Resample::Down, &self.down[0])?;
        let enc1 = run_stage(tape, trace, 1, h)?;
        let h = resample(tape, p, enc1, Resample::Down, &self.down[1])?;
        let h = run_stage(tape, trace, 2, h)?;
        let h = resample(tape, p, h, Resample::Up, &self.up[0])?;
        let h = skip_fuse(tape, p, h, enc1, &self.skip[0])?;
        let h = run_stage(tape, trace, 3, h)?;
        let h = resample(tape, p, h, Resample::Up, &self.up[1])?;
        let h = skip_fuse(tape, p, h, enc0, &self.skip[1])?;
        let h = run_stage(tape, trace, 4, h)?;

        let width = self.stages[4].width;
        let m = self.final_ada.forward(tape, p, cond_act)?;
        let gamma = tape.slice_channels(m, 0, width)?;
        let beta = tape.slice_channels(m, width, width)?;
        let h = tape.channel_layer_norm(h, T::of(NORM_EPS))?;
        let h = tape.modulate(h, gamma, beta)?;
        trace.record(|| "final.norm".into(), h);
        let out = self.head.forward(tape, p, h)?;
        let c = self.config.in_channels;
        let eps = tape.slice_channels(out, 0, c)?;
        let v = tape.slice_channels(out, c, c)?;
        Ok(NetOutputVars { eps, v })
    }

    /// Gradient-free evaluation returning plain tensors.
    pub fn forward_eval(&self, z: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<NetOutput<T>> {
        let mut tape = Tape::new();
        let p = self.params.load(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &p, zv, t, y)?;
        Ok(NetOutput {
            eps: tape.value(out.eps).clone(),
            v: tape.value(out.v).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn micro() -> ModelConfig {
        ModelConfig::preset("dico-micro").unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = DiCo::<f32>::new(micro(), &mut rng(5)).unwrap();
        let b = DiCo::<f32>::new(micro(), &mut rng(5)).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        let m = DiCo::<f32>::new(ModelConfig::preset("dico-tiny").unwrap(), &mut rng(0)).unwrap();
        let brute: usize = m.params.iter().map(|(_, t)| t.data().len()).sum();
        assert_eq!(m.num_params(), brute);
    }

    #[test]
    fn fresh_model_outputs_zero() {
        let m = DiCo::<f32>::new(micro(), &mut rng(1)).unwrap();
        let z = Tensor::randn(Shape::new(2, 1, 8, 8), 1.0, &mut rng(2));
        let out = m.forward_eval(&z, &[3, 900], &[0, 2]).unwrap();
        assert_eq!(out.eps.shape(), Shape::new(2, 1, 8, 8));
        assert_eq!(out.v.shape(), Shape::new(2, 1, 8, 8));
        assert!(out.eps.data().iter().all(|&v| v == 0.0));
        assert!(out.v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = DiCo::<f32>::new(micro(), &mut rng(1)).unwrap();
        let z = Tensor::zeros(Shape::new(1, 1, 6, 8));
        assert!(matches!(m.forward_eval(&z, &[0], &[0]), Err(Error::Dimension(_))));
        let z = Tensor::zeros(Shape::new(1, 1, 8, 8));
        assert!(matches!(m.forward_eval(&z, &[0], &[3]), Err(Error::Usage(_))));
        assert!(matches!(m.forward_eval(&z, &[0, 1], &[0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn label_reaches_output() {
        let mut m = DiCo::<f64>::new(micro(), &mut rng(1)).unwrap();
        m.perturb_zero_init(0.2, &mut rng(9));
        let z = Tensor::randn(Shape::new(1, 1, 8, 8), 1.0, &mut rng(2));
        let a = m.forward_eval(&z, &[10], &[0]).unwrap();
        let b = m.forward_eval(&z, &[10], &[1]).unwrap();
        assert!(a.eps.max_abs_diff(&b.eps).unwrap() > 1e-9);
    }

    #[test]
    fn kernel_sizes_preserve_shape() {
        for k in [3, 5, 7] {
            let mut cfg = micro();
            cfg.kernel_size = k;
            let mut m = DiCo::<f32>::new(cfg, &mut rng(1)).unwrap();
            m.perturb_zero_init(0.1, &mut rng(2));
            let z = Tensor::randn(Shape::new(1, 1, 8, 8), 1.0, &mut rng(3));
            let out = m.forward_eval(&z, &[5], &[1]).unwrap();
            assert_eq!(out.eps.shape(), z.shape());
        }
    }
}

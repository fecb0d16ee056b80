//! Finite-difference gradient checks shared by the core test suite and the
//! acceptance target. Checks return errors instead of asserting.

use dico_core::diffusion::{losses, training_losses, DiffusionSchedule};
use dico_core::gradcheck::{finite_diff_coords, finite_diff_grad, relative_error};
use dico_core::nn::cca;
use dico_core::{
    Activation, Conv2dSpec, DiCo, ModelConfig, NetOutput, ResampleDirection, Result, Shape, Tape,
    Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
// the t = 0 decoder term is steep; a smaller step keeps truncation error
// well below the tolerance
const E2E_STEP: f64 = 1e-7;

fn randn(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `Σ w ⊙ f(inputs)` with fixed random `w`, so every output element matters.
fn projected(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(out), 999));
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

/// Worst relative error over the inputs of `f`.
fn check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let root = projected(&mut tape, out).unwrap();
    tape.backward(root).unwrap();

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad_or_zeros(vars[i]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.leaf(if j == i { probe.clone() } else { x.clone() }, false))
                    .collect();
                let out = f(&mut t, &vs).unwrap();
                let root = projected(&mut t, out).unwrap();
                t.value(root).data()[0]
            },
            x,
            STEP,
        );
        worst = worst.max(relative_error(analytic.data(), numeric.data()));
    }
    worst
}

fn x4() -> Tensor<f64> {
    randn(Shape::new(2, 4, 4, 4), 1)
}

/// `(primitive, worst relative error)` for every tape operation.
pub fn primitive_errors() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, err: f64| out.push((name.to_string(), err));

    let convs = [
        ("conv dense 3x3", 4, 3, Conv2dSpec::same(3, 1)),
        ("conv depthwise 3x3", 1, 3, Conv2dSpec::same(3, 4)),
        ("conv depthwise 5x5", 1, 5, Conv2dSpec::same(5, 4)),
        ("conv grouped 3x3", 2, 3, Conv2dSpec::same(3, 2)),
        ("conv pointwise", 4, 1, Conv2dSpec::POINTWISE),
    ];
    for (name, c_in, k, spec) in convs {
        let w = randn(Shape::new(4, c_in, k, k), 2);
        let b = randn(Shape::vector(1, 4), 3);
        let with_bias = check(&[x4(), w.clone(), b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec));
        let no_bias = check(&[x4(), w], |t, v| t.conv2d(v[0], v[1], None, spec));
        push(name, with_bias.max(no_bias));
    }

    for kind in [Activation::Gelu, Activation::Relu, Activation::Sigmoid, Activation::Silu] {
        push(kind.name(), check(&[x4()], |t, v| Ok(t.activation(v[0], kind))));
    }

    push("global_avg_pool", check(&[x4()], |t, v| t.global_avg_pool(v[0])));
    push(
        "unshuffle",
        check(&[x4()], |t, v| t.pixel_resample(v[0], 2, ResampleDirection::Unshuffle)),
    );
    push(
        "shuffle",
        check(&[x4()], |t, v| t.pixel_resample(v[0], 2, ResampleDirection::Shuffle)),
    );

    push("channel_layer_norm", check(&[x4()], |t, v| t.channel_layer_norm(v[0], 1e-6)));
    let g = randn(Shape::vector(2, 4), 4);
    let b = randn(Shape::vector(2, 4), 5);
    push("modulate", check(&[x4(), g.clone(), b], |t, v| t.modulate(v[0], v[1], v[2])));
    push("channel_scale", check(&[x4(), g], |t, v| t.channel_scale(v[0], v[1])));
    let w = randn(Shape::new(4, 4, 1, 1), 6).scale(0.5);
    let bias = randn(Shape::vector(1, 4), 7);
    push("cca", check(&[x4(), w, bias], |t, v| cca(t, v[0], v[1], v[2])));

    let y = randn(Shape::new(2, 4, 4, 4), 8);
    push("add", check(&[x4(), y.clone()], |t, v| t.add(v[0], v[1])));
    push("mul", check(&[x4(), y.clone()], |t, v| t.mul(v[0], v[1])));
    push("scale", check(&[x4()], |t, v| Ok(t.scale(v[0], -1.7))));
    push("sum", check(&[x4()], |t, v| Ok(t.sum(v[0]))));
    push("concat_channels", check(&[x4(), y.clone()], |t, v| t.concat_channels(v[0], v[1])));
    push("slice_channels", check(&[x4()], |t, v| t.slice_channels(v[0], 1, 2)));
    let table = randn(Shape::vector(3, 5), 9);
    push("gather_rows", check(&[table], |t, v| t.gather_rows(v[0], &[2, 0, 2, 1])));
    push("mse", check(&[x4()], |t, v| t.mse(v[0], &y)));
    // f(x) = Σ x³, value and slope supplied by the caller
    push(
        "scalar_fn",
        check(&[x4()], |t, v| {
            let x = t.value(v[0]).clone();
            let value = x.data().iter().map(|a| a * a * a).sum();
            let grad = x.map(|a| 3.0 * a * a);
            t.scalar_fn(v[0], value, grad)
        }),
    );
    out
}

struct Fixture {
    model: DiCo<f64>,
    sched: DiffusionSchedule,
    x0: Tensor<f64>,
    xt: Tensor<f64>,
    eps: Tensor<f64>,
    t: Vec<usize>,
    y: Vec<usize>,
}

fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = DiCo::<f64>::new(ModelConfig::preset("dico-micro").unwrap(), &mut rng).unwrap();
    model.perturb_zero_init(0.3, &mut rng);
    let sched = DiffusionSchedule::linear_default(50).unwrap();
    let shape = Shape::new(3, 1, 8, 8);
    let x0 = Tensor::uniform(shape, -1.0, 1.0, &mut rng);
    let eps = Tensor::randn(shape, 1.0, &mut rng);
    // t = 0 exercises the decoder term, the others the Gaussian KL
    let t = vec![0, 120, 731];
    let xt = dico_core::diffusion::q_sample(&x0, &t, &eps, &sched).unwrap();
    Fixture {
        model,
        sched,
        x0,
        xt,
        eps,
        t,
        y: vec![0, 1, 2],
    }
}

/// The hybrid loss with the bound's noise prediction held at `eps_base`,
/// which is what the recorded gradient differentiates.
fn hybrid_value(f: &Fixture, model: &DiCo<f64>, eps_base: &Tensor<f64>, lambda: f64) -> f64 {
    let out = model.forward_eval(&f.xt, &f.t, &f.y).unwrap();
    let simple = losses(&out, &f.x0, &f.xt, &f.t, &f.eps, &f.sched).unwrap().l_simple;
    let held = NetOutput {
        eps: eps_base.clone(),
        v: out.v,
    };
    let vlb = losses(&held, &f.x0, &f.xt, &f.t, &f.eps, &f.sched).unwrap().l_vlb;
    simple + lambda * vlb
}

pub fn end_to_end_error(lambda: f64) -> f64 {
    let f = fixture();
    let mut tape = Tape::new();
    let p = f.model.params.load(&mut tape, true);
    let z = tape.constant(f.xt.clone());
    let out = f.model.forward(&mut tape, &p, z, &f.t, &f.y).unwrap();
    let eps_base = tape.value(out.eps).clone();
    let loss = training_losses(&mut tape, out, &f.x0, &f.xt, &f.t, &f.eps, &f.sched, lambda).unwrap();
    let direct = hybrid_value(&f, &f.model, &eps_base, lambda);
    assert!((tape.value(loss.total).data()[0] - direct).abs() <= 1e-10 * direct.abs().max(1.0));
    tape.backward(loss.total).unwrap();
    let grads = f.model.params.grads(&mut tape, &p);

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for id in f.model.params.ids() {
        let n = f.model.params.get(id).numel();
        let mut coords = vec![0, n / 2, n - 1];
        coords.dedup();
        let base = f.model.params.get(id).clone();
        let mut probe_model = f.model.clone();
        let fd = finite_diff_coords(
            |probe| {
                probe_model.params.set(id, probe.clone()).unwrap();
                hybrid_value(&f, &probe_model, &eps_base, lambda)
            },
            &base,
            &coords,
            E2E_STEP,
        );
        for (&c, d) in coords.iter().zip(fd) {
            analytic.push(grads[id.index()].data()[c]);
            numeric.push(d);
        }
    }
    assert!(analytic.iter().any(|&g| g != 0.0));
    relative_error(&analytic, &numeric)
}

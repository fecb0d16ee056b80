//! One function per subcommand. Each creates `out_dir`, writes its
//! artifacts plus a `<command>.config.txt` sidecar, and returns a summary
//! line for stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dico_core::diagnostics::{
    bench_csv, count_dico, count_preset, image_grid, model_channel_scores, throughput_bench,
};
use dico_core::diffusion::{p_sample_loop, q_sample, DiffusionSchedule, GuidanceConfig};
use dico_core::train::{
    load_checkpoint, make_toy_data, read_dataset, save_checkpoint, write_dataset, ToyDataset,
    ToySpec, TrainConfig, Trainer,
};
use dico_core::{DiCo, Error, ModelConfig, Result, Shape, Tensor};

use crate::config::{Command, RunConfig};

pub fn dispatch(cfg: &RunConfig) -> Result<String> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(
        cfg.artifact(&format!("{}.config.txt", cfg.command.name())),
        cfg.render(),
    )?;
    match cfg.command {
        Command::MakeData => make_data(cfg),
        Command::Train => train(cfg),
        Command::Sample => sample(cfg),
        Command::Flops => flops(cfg),
        Command::Bench => bench(cfg),
        Command::InspectChannels => inspect_channels(cfg),
    }
}

fn schedule(cfg: &RunConfig) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(
        cfg.beta_schedule,
        cfg.diffusion_steps,
        cfg.beta_start,
        cfg.beta_end,
        cfg.sample_steps,
    )
}

/// Loads a checkpoint and returns its raw or EMA weights.
fn load_model(cfg: &RunConfig, m: &ModelConfig) -> Result<DiCo<f32>> {
    let ckpt = load_checkpoint::<f32>(&cfg.checkpoint_file(), Some(m))?;
    let mut model = ckpt.model;
    if cfg.use_ema {
        model.params = ckpt.ema.shadow;
    }
    Ok(model)
}

fn check_data(data: &ToyDataset, m: &ModelConfig, path: &Path) -> Result<()> {
    let c = data.images.shape().c;
    if c != m.in_channels {
        return Err(Error::Dimension(format!(
            "{} has {c} channels but the model takes {}",
            path.display(),
            m.in_channels
        )));
    }
    if let Some(&y) = data.labels.iter().find(|&&y| y >= m.num_classes) {
        return Err(Error::Dimension(format!(
            "{} has label {y} but the model has {} classes",
            path.display(),
            m.num_classes
        )));
    }
    Ok(())
}

fn make_data(cfg: &RunConfig) -> Result<String> {
    let data = make_toy_data(&ToySpec {
        count: cfg.data_count,
        channels: cfg.data_channels,
        size: cfg.data_size,
        period: cfg.data_period,
        amplitude: cfg.data_amplitude,
        noise_std: cfg.data_noise,
        seed: cfg.seed,
    })?;
    let path = cfg.data_file();
    write_dataset(&path, &data)?;
    Ok(format!("wrote {} images to {}", data.len(), path.display()))
}

fn train(cfg: &RunConfig) -> Result<String> {
    let m = cfg.model_config()?;
    let data_path = cfg.data_file();
    let data = read_dataset(&data_path)?;
    check_data(&data, m, &data_path)?;
    let tc = TrainConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ema_decay: cfg.ema_decay,
        batch_size: cfg.batch_size,
        hflip_prob: cfg.hflip_prob,
        vlb_weight: cfg.vlb_weight,
    };
    let ckpt_path = cfg.checkpoint_file();
    let mut trainer = if cfg.resume {
        let ckpt = load_checkpoint::<f32>(&ckpt_path, Some(m))?;
        // fresh stream per resume point so a resumed run does not replay batches
        let seed = cfg.seed.wrapping_add(ckpt.opt.step);
        let mut t = Trainer::new(ckpt.model, schedule(cfg)?, tc, seed)?;
        t.opt = ckpt.opt;
        t.opt.lr = cfg.lr;
        t.opt.weight_decay = cfg.weight_decay;
        t.ema = ckpt.ema;
        t.ema.decay = cfg.ema_decay;
        t
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = DiCo::<f32>::new(m.clone(), &mut rng)?;
        Trainer::new(model, schedule(cfg)?, tc, cfg.seed.wrapping_add(1))?
    };

    let mut csv = String::from("step,l_simple,l_vlb,grad_norm\n");
    for i in 1..=cfg.steps {
        let l = trainer.step(&data)?;
        let _ = writeln!(csv, "{},{},{},{}", l.step, l.l_simple, l.l_vlb, l.grad_norm);
        if cfg.log_every > 0 && i % cfg.log_every == 0 {
            eprintln!(
                "step {} l_simple {:.5} l_vlb {:.5} grad_norm {:.4}",
                l.step, l.l_simple, l.l_vlb, l.grad_norm
            );
        }
    }
    fs::write(cfg.artifact("train_loss.csv"), csv)?;
    save_checkpoint(&ckpt_path, &trainer.model, &trainer.opt, &trainer.ema)?;
    Ok(format!(
        "trained to step {}; checkpoint {}",
        trainer.opt.step,
        ckpt_path.display()
    ))
}

fn sample(cfg: &RunConfig) -> Result<String> {
    let m = cfg.model_config()?;
    let model = load_model(cfg, m)?;
    let sched = schedule(cfg)?.respaced()?;
    let guidance = if cfg.guidance {
        GuidanceConfig::new(cfg.cfg_scale)?
    } else {
        GuidanceConfig::disabled()
    };
    if let Some(w) = guidance.warning() {
        eprintln!("warning: {w}");
    }
    let n = cfg.num_samples;
    let labels: Vec<usize> = match cfg.sample_class {
        Some(c) => vec![c; n],
        None => (0..n).map(|i| i % m.num_classes).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = Shape::new(n, m.in_channels, cfg.input_size, cfg.input_size);
    let images: Tensor<f32> =
        p_sample_loop(&model, shape, &labels, &sched, guidance, cfg.clip_x0, &mut rng)?;

    let mut written = Vec::new();
    let grid_name = match m.in_channels {
        1 => Some("samples.pgm"),
        3 => Some("samples.ppm"),
        _ => None,
    };
    if let Some(name) = grid_name {
        let cols = (n as f64).sqrt().ceil() as usize;
        fs::write(cfg.artifact(name), image_grid(&images, cols)?)?;
        written.push(name);
    }
    write_dataset(&cfg.artifact("samples.dids"), &ToyDataset { images, labels })?;
    written.push("samples.dids");
    Ok(format!(
        "sampled {n} images; wrote {} in {}",
        written.join(", "),
        cfg.out_dir.display()
    ))
}

fn flops(cfg: &RunConfig) -> Result<String> {
    let s = cfg.input_size;
    let report = match &cfg.model {
        Some(m) => count_dico(m, &cfg.preset, (m.in_channels, s, s))?,
        None => count_preset(&cfg.preset, (4, s, s))?,
    };
    fs::write(cfg.artifact("flops.csv"), report.to_csv())?;
    Ok(format!(
        "{}: {} MACs ({:.3} G), {} params",
        cfg.preset,
        report.total_macs(),
        report.total_macs() as f64 / 1e9,
        report.total_params()
    ))
}

fn bench(cfg: &RunConfig) -> Result<String> {
    let rows = throughput_bench(&cfg.bench_specs(), cfg.bench_warmup, cfg.bench_iters)?;
    fs::write(cfg.artifact("bench.csv"), bench_csv(&rows))?;
    Ok(format!("timed {} configurations", rows.len()))
}

fn inspect_channels(cfg: &RunConfig) -> Result<String> {
    let m = cfg.model_config()?;
    let model = load_model(cfg, m)?;
    let data_path = cfg.data_file();
    let data = read_dataset(&data_path)?;
    check_data(&data, m, &data_path)?;
    let n = cfg.inspect_count.min(data.len());
    if n == 0 {
        return Err(Error::Config(format!("{} is empty", data_path.display())));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (x0, labels) = data.batch::<f32>(&idx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = Tensor::<f32>::randn(x0.shape(), 1.0, &mut rng);
    let t = vec![cfg.inspect_t; n];
    let xt = q_sample(&x0, &t, &eps, &schedule(cfg)?)?;
    let report = model_channel_scores(&model, &xt, &t, &labels, &cfg.inspect_layer)?;
    fs::write(cfg.artifact("channels.csv"), report.to_csv())?;
    let dead = report.scores.iter().filter(|&&s| s == 0.0).count();
    Ok(format!(
        "{}: {} channels, {dead} with zero score",
        cfg.inspect_layer,
        report.scores.len()
    ))
}

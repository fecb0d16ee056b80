use dico_core::diagnostics::{
    attention_macs, conv_module_macs, count_dico, count_preset, enumerate_config, enumerate_dico,
    model_channel_scores, SelfAttention,
};
use dico_core::{DiCo, ModelConfig, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LATENT: (usize, usize, usize) = (4, 32, 32);

#[test]
fn counter_equals_enumerator_for_latent_presets() {
    for preset in ["dico-s", "dico-b"] {
        let cfg = ModelConfig::preset(preset).unwrap();
        let counted = count_dico(&cfg, preset, LATENT).unwrap();
        let listed = enumerate_config(&cfg, preset, LATENT).unwrap();
        assert_eq!(counted.by_name(), listed.by_name(), "{preset}");
        assert_eq!(counted.total_macs(), listed.total_macs());
        assert_eq!(counted.total_params(), listed.total_params());
    }
}

#[test]
fn enumerated_params_match_the_registry() {
    let cfg = ModelConfig::preset("dico-tiny").unwrap();
    let model = DiCo::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let r = enumerate_dico(&model, "dico-tiny", (1, 16, 16)).unwrap();
    assert_eq!(r.total_params() as usize, model.num_params());
}

#[test]
fn reference_transformer_costs() {
    // width 384, 12 blocks, 256 tokens: 12·(12·N·d² + 2·N²·d) dominates
    let s2 = count_preset("dit-s2", LATENT).unwrap();
    let (n, d) = (256u64, 384u64);
    let core = 12 * (12 * n * d * d + 2 * n * n * d);
    assert!(s2.total_macs() > core && s2.total_macs() < core + core / 50);
    let xl = count_preset("dit-xl2", LATENT).unwrap();
    assert!((xl.total_macs() as f64 / 118.66e9 - 1.0).abs() < 0.02);
    assert!((s2.total_params() as f64 / 32.9e6 - 1.0).abs() < 0.03);
}

#[test]
fn attention_call_counts_its_macs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (n, d) in [(1, 4), (9, 8), (16, 12)] {
        let att = SelfAttention::<f64>::random(d, &mut rng);
        let x = Tensor::<f64>::randn(Shape::new(1, 1, n, d), 1.0, &mut rng);
        let out = att.forward(x.data(), n).unwrap();
        assert_eq!(out.macs, attention_macs(n as u64, d as u64));
    }
}

#[test]
fn conv_module_cheaper_than_attention() {
    for (n, d) in [(256u64, 128u64), (1024, 128), (4096, 384)] {
        assert!(conv_module_macs(n, d, 3, true) < attention_macs(n, d));
        assert_eq!(conv_module_macs(n, d, 3, true), 2 * n * d * d + 9 * n * d + d * d);
    }
}

#[test]
fn forced_closed_gate_zeroes_its_channel() {
    let cfg = ModelConfig::preset("dico-tiny").unwrap();
    let mut model = DiCo::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let w = model.params.id("stages.4.blocks.0.conv_module.cca.weight").unwrap();
    let b = model.params.id("stages.4.blocks.0.conv_module.cca.bias").unwrap();
    let closed = 5;
    model.params.get_mut(w).sample_mut(closed).fill(0.0);
    model.params.get_mut(b).data_mut()[closed] = -1e4;
    let z = Tensor::randn(Shape::new(4, 1, 16, 16), 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let layer = "stages.4.blocks.0.conv_module.mixed";
    let r = model_channel_scores(&model, &z, &[10, 200, 500, 900], &[0, 1, 0, 2], layer).unwrap();
    assert_eq!(r.scores[closed], 0.0);
    assert_eq!(r.scores.iter().filter(|&&s| s == 0.0).count(), 1);
    assert!(model_channel_scores(&model, &z, &[1; 4], &[0; 4], "nope").is_err());
}

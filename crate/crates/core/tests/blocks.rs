mod common;

use a4unet::candle::{DType, Device, Tensor};
use a4unet::decoder::{build_dct_filter_bank, channel_pool, Decoder, DecoderConfig, OrthoChannelAttention};
use a4unet::encoder::{Encoder, EncoderConfig};
use a4unet::nn::ParamStore;
use a4unet::sspp::{Sspp, SsppConfig, SwinBranchConfig, WindowAttention};
use a4unet::{build_model, Ablation, Error, ModelConfig};
use common::*;

fn cpu() -> Device {
    Device::Cpu
}

fn tiny(ablation: Ablation) -> ModelConfig {
    ModelConfig::tiny().with_ablation(ablation)
}

#[test]
fn window_attention_with_uniform_scores_averages_each_window() {
    let store = ParamStore::new(0, DType::F64, &cpu());
    let attn = WindowAttention::new(4, 2, 1, store.builder()).unwrap();
    let mut qkv = vec![0.0f64; 12 * 4];
    for i in 0..4 {
        qkv[(8 + i) * 4 + i] = 1.0;
    }
    let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    store.set("qkv.weight", &Tensor::from_vec(qkv, (12, 4), &cpu()).unwrap()).unwrap();
    store.set("qkv.bias", &Tensor::zeros(12, DType::F64, &cpu()).unwrap()).unwrap();
    store.set("proj.weight", &Tensor::from_vec(eye, (4, 4), &cpu()).unwrap()).unwrap();
    store.set("proj.bias", &Tensor::zeros(4, DType::F64, &cpu()).unwrap()).unwrap();

    let x = randn(&mut rng(1), &[1, 4, 4, 4], 1.0);
    let y = attn.forward(&x, false).unwrap();
    let xv = to_vec(&x);
    let yv = to_vec(&y);
    let at = |v: &[f64], i: usize, j: usize, c: usize| v[(i * 4 + j) * 4 + c];
    for i in 0..4 {
        for j in 0..4 {
            for c in 0..4 {
                let (bi, bj) = (i / 2 * 2, j / 2 * 2);
                let mean = (at(&xv, bi, bj, c) + at(&xv, bi + 1, bj, c) + at(&xv, bi, bj + 1, c) + at(&xv, bi + 1, bj + 1, c)) / 4.0;
                assert!((at(&yv, i, j, c) - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn channel_pool_example() {
    let x = Tensor::from_vec(vec![1.0f64, 2.0, 2.0, 2.0, 2.0, 3.0, 5.0, 7.0], (1, 2, 2, 2), &cpu()).unwrap();
    let (max, avg) = channel_pool(&x).unwrap();
    assert_eq!(to_vec(&max), vec![2.0, 3.0, 5.0, 7.0]);
    assert_eq!(to_vec(&avg), vec![1.5, 2.5, 3.5, 4.5]);
}

#[test]
fn four_channel_dct_bank_is_orthonormal() {
    let bank = build_dct_filter_bank(4, 4, 4).unwrap();
    assert_eq!(bank.len(), 4);
    let g = bank.gram();
    for (i, row) in g.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-6);
        }
    }
}

#[test]
fn constant_map_has_scaled_dc_descriptor() {
    let store = ParamStore::new(0, DType::F64, &cpu());
    let oca = OrthoChannelAttention::new(4, 6, 6, 2, store.builder()).unwrap();
    let k = 2.5;
    let x = (Tensor::ones((1, 4, 6, 6), DType::F64, &cpu()).unwrap() * k).unwrap();
    let d = to_vec(&oca.descriptor(&x).unwrap());
    assert!((d[0] - k * 6.0).abs() < 1e-12, "{}", d[0]);
}

#[test]
fn encoder_pyramid_shapes() {
    let store = ParamStore::new(0, DType::F32, &cpu());
    let enc = Encoder::new(&EncoderConfig::default(), store.builder()).unwrap();
    let x = Tensor::zeros((1, 4, 224, 224), DType::F32, &cpu()).unwrap();
    let out = enc.forward(&x).unwrap();
    assert_eq!(out.stem.dims(), &[1, 32, 224, 224]);
    let dims: Vec<Vec<usize>> = out.pyramid.iter().map(|t| t.dims().to_vec()).collect();
    assert_eq!(
        dims,
        vec![vec![1, 64, 112, 112], vec![1, 128, 56, 56], vec![1, 256, 28, 28], vec![1, 512, 14, 14]]
    );

    let bad = Tensor::zeros((1, 4, 225, 225), DType::F32, &cpu()).unwrap();
    let err = enc.forward(&bad).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    assert!(err.to_string().contains("divisible by 16"), "{err}");
}

#[test]
fn default_bottleneck_token_matrix() {
    let cfg = SsppConfig::default();
    assert_eq!(cfg.embed_dim().unwrap() * cfg.branches.len(), 384);
    let store = ParamStore::new(0, DType::F32, &cpu());
    let sspp = Sspp::new(&cfg, 512, 512, (14, 14), store.builder()).unwrap();
    let x = randn(&mut rng(2), &[1, 512, 14, 14], 1.0).to_dtype(DType::F32).unwrap();
    let out = sspp.forward(&x).unwrap();
    assert_eq!(out.z_all.dims(), &[1, 196, 384]);
    assert_eq!(out.w_scale.dims(), &[1, 384]);
    assert_eq!(out.w_tokens.dims(), &[1, 196]);
    assert_eq!(out.fused.dims(), &[1, 512, 14, 14]);
}

#[test]
fn single_branch_tokens_are_the_branch_output() {
    let cfg = SsppConfig {
        branches: vec![SwinBranchConfig {
            window_size: 2,
            heads: 2,
            depth: 1,
            embed_dim: 8,
        }],
        scale_reduction: 2,
        token_reduction: 2,
        mlp_ratio: 2,
    };
    let store = ParamStore::new(3, DType::F64, &cpu());
    let sspp = Sspp::new(&cfg, 6, 6, (4, 4), store.builder()).unwrap();
    let x = randn(&mut rng(3), &[2, 6, 4, 4], 1.0);
    let z = sspp.tokens(&x).unwrap();
    assert_eq!(max_abs_diff(&z, &sspp.branches()[0].forward(&x).unwrap()), 0.0);
}

#[test]
fn zero_dlka_matches_disabled_dlka() {
    let with = build_model(&tiny(Ablation::FULL), DType::F64, &cpu()).unwrap();
    let without = build_model(
        &tiny(Ablation {
            use_dlka: false,
            ..Ablation::FULL
        }),
        DType::F64,
        &cpu(),
    )
    .unwrap();
    let prefixes: Vec<String> = (1..=4).map(|i| format!("encoder.stage{i}.dlka.out_proj")).collect();
    let prefixes: Vec<&str> = prefixes.iter().map(String::as_str).collect();
    let zeroed = with.params().zero_matching(&prefixes).unwrap();
    assert_eq!(zeroed, 8);
    let x = randn(&mut rng(4), &[2, 4, 32, 32], 1.0);
    let a = with.forward(&x).unwrap().logits;
    let b = without.forward(&x).unwrap().logits;
    assert_eq!(to_vec(&a), to_vec(&b));
}

#[test]
fn baseline_parameters_are_shared_with_the_full_model() {
    let full = build_model(&tiny(Ablation::FULL), DType::F32, &cpu()).unwrap();
    let base = build_model(&tiny(Ablation::BASELINE), DType::F32, &cpu()).unwrap();
    let full_vars: std::collections::BTreeMap<_, _> = full.params().vars().into_iter().collect();
    for (name, var) in base.params().vars() {
        let other = full_vars.get(&name).unwrap_or_else(|| panic!("{name} missing from the full model"));
        assert_eq!(to_vec(var.as_tensor()), to_vec(other.as_tensor()), "{name}");
    }
    assert!(base.params().num_params() < full.params().num_params());
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = build_model(&ModelConfig::tiny(), DType::F32, &cpu()).unwrap();
    let b = build_model(&ModelConfig::tiny(), DType::F32, &cpu()).unwrap();
    assert_eq!(a.params().names(), b.params().names());
    for ((_, x), (_, y)) in a.params().vars().into_iter().zip(b.params().vars()) {
        assert_eq!(to_vec(x.as_tensor()), to_vec(y.as_tensor()));
    }
    let mut cfg = ModelConfig::tiny();
    cfg.seed = 1;
    let c = build_model(&cfg, DType::F32, &cpu()).unwrap();
    let name = "decoder.head.weight";
    assert_ne!(
        to_vec(a.params().get(name).unwrap().as_tensor()),
        to_vec(c.params().get(name).unwrap().as_tensor())
    );
}

#[test]
fn summary_structure() {
    let full = build_model(&ModelConfig::tiny(), DType::F32, &cpu()).unwrap().describe();
    assert_eq!(full.stage_count(), 9);
    assert_eq!(full.branch_count(), 2);
    assert_eq!(full.total_params, full.entries.iter().map(|e| e.params).sum::<usize>());
    assert_eq!(full.entries.last().unwrap().output_shape, vec![1, 2, 32, 32]);

    let no_sspp = build_model(
        &tiny(Ablation {
            use_sspp: false,
            ..Ablation::FULL
        }),
        DType::F32,
        &cpu(),
    )
    .unwrap()
    .describe();
    assert_eq!(no_sspp.stage_count(), 9);
    assert_eq!(no_sspp.branch_count(), 0);
    assert_eq!(no_sspp.total_params, no_sspp.entries.iter().map(|e| e.params).sum::<usize>());
    assert!(full.to_string().contains("window=2"));
}

#[test]
fn every_parameter_receives_gradient() {
    let model = build_model(&ModelConfig::tiny(), DType::F64, &cpu()).unwrap();
    let mut r = rng(5);
    let x = randn(&mut r, &[2, 4, 32, 32], 1.0);
    let logits = model.logits(&x).unwrap();
    let w = randn(&mut r, logits.dims(), 1.0);
    let grads = (logits * w).unwrap().sum_all().unwrap().backward().unwrap();
    for (name, var) in model.params().vars() {
        // a one-token window has a constant softmax
        if name.starts_with("bottleneck.sspp.branch0.") && name.contains("rel_bias") {
            continue;
        }
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(to_vec(g).iter().any(|v| *v != 0.0), "zero gradient for {name}");
    }
}

#[test]
fn forward_is_deterministic() {
    let model = build_model(&ModelConfig::tiny(), DType::F32, &cpu()).unwrap();
    let x = randn(&mut rng(6), &[2, 4, 32, 32], 1.0);
    let a = model.forward(&x).unwrap();
    let b = model.forward(&x).unwrap();
    assert_eq!(to_vec(&a.probabilities), to_vec(&b.probabilities));
    let sums = a.probabilities.sum(1).unwrap();
    assert!(to_vec(&sums).iter().all(|s| (s - 1.0).abs() < 1e-5));
}

#[test]
fn decoder_stage_gradients() {
    let store = ParamStore::new(7, DType::F64, &cpu());
    let cfg = DecoderConfig {
        channel_reduction: 2,
        ..DecoderConfig::default()
    };
    let dec = Decoder::new(&cfg, 8, &[4], &[(8, 8)], store.builder()).unwrap();
    let mut r = rng(7);
    let skip = randn(&mut r, &[1, 4, 8, 8], 1.0);
    let x = randn(&mut r, &[1, 8, 4, 4], 1.0);
    let report = grad_check(&store, &x, |t| dec.forward(t, &[&skip]), 12, 8);
    let (name, err) = worst(&report);
    assert!(err < 1e-3, "{name}: {err:.2e}");
}

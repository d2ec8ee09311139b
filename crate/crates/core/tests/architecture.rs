mod common;

use common::{perturb_norms, rand_tensor};
use dtrattunet::engine::{Graph, Mode, ParamKind, Tensor};
use dtrattunet::model::{
    decoder_forward, encoder_fusion, transformer_ladder, transformer_path, EncoderBundle, LayerManifest,
    INFECTION_DECODER, LUNG_DECODER,
};
use dtrattunet::training::joint_loss;
use dtrattunet::{build_variant, DTrAttUnet, Error, ModelConfig, Task, Variant};

/// 224² geometry with narrow widths so full-resolution checks stay cheap.
fn narrow_224() -> ModelConfig {
    ModelConfig {
        embed_dim: 48,
        heads: 4,
        mlp_dim: 96,
        encoder_channels: [4, 8, 8, 16, 16],
        ..ModelConfig::default()
    }
}

fn model(config: ModelConfig, seed: u64) -> DTrAttUnet {
    let mut m = build_variant(&config, seed).unwrap();
    perturb_norms(m.params_mut(), seed + 100);
    m
}

#[test]
fn transformer_path_taps_at_224() {
    let config = narrow_224();
    let m = model(config.clone(), 1);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[2, 3, 224, 224], 2));
    let taps = transformer_path(&mut g, &m.params().scope("transformer"), x, &config).unwrap();
    for z in taps {
        assert_eq!(g.shape(z), &[2, 196, 48]);
    }
    assert_eq!(g.block_calls("transformer_layer"), 12);
}

#[test]
fn zeroed_transformer_makes_taps_equal() {
    let config = ModelConfig::desk();
    let mut m = model(config.clone(), 3);
    m.params_mut()
        .map_prefix("transformer.layers", |_, t| t.scale_inplace(0.0));
    m.params_mut()
        .map_prefix("transformer.embed.position", |_, t| t.scale_inplace(0.0));
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[1, 3, 64, 64], 4));
    let taps = transformer_path(&mut g, &m.params().scope("transformer"), x, &config).unwrap();
    let z0 = g.value(taps[0]).clone();
    assert!(z0.max_abs() > 0.0);
    for z in &taps[1..] {
        assert_eq!(g.value(*z), &z0);
    }
}

#[test]
fn ladder_resolutions_at_224() {
    let config = narrow_224();
    let m = model(config.clone(), 5);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[1, 3, 224, 224], 6));
    let taps = transformer_path(&mut g, &m.params().scope("transformer"), x, &config).unwrap();
    let before = g.block_calls("res_block");
    let ups = transformer_ladder(&mut g, &m.params().scope("ladder"), taps).unwrap();
    assert_eq!(g.block_calls("res_block") - before, 3 + 2 + 1 + 1);
    let inj = config.injection_channels();
    for (i, (z, side)) in ups.iter().zip([112, 56, 28, 14]).enumerate() {
        assert_eq!(g.shape(*z), &[1, inj[i], side, side]);
    }
}

#[test]
fn plain_encoder_at_224_with_default_widths() {
    let config = ModelConfig::default().with_variant(Variant::Unet);
    let m = model(config, 7);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[1, 3, 224, 224], 8));
    let bundle = encoder_fusion(&mut g, &m.params().scope("encoder"), x, None).unwrap();
    let expected = [(64, 224), (128, 112), (256, 56), (512, 28), (1024, 14)];
    for (v, (c, s)) in bundle.stages.iter().zip(expected) {
        assert_eq!(g.shape(*v), &[1, c, s, s]);
    }
    let stage2 = m.params().get("encoder.stage2.conv1.weight").unwrap();
    assert_eq!(stage2.shape(), &[128, 64, 3, 3]);
}

#[test]
fn fused_stage_input_is_injection_plus_pooled() {
    let config = ModelConfig::desk();
    let m = model(config.clone(), 9);
    let inj = config.injection_channels();
    let c = config.encoder_channels;
    for i in 0..4 {
        let w = m.params().get(&format!("encoder.stage{}.conv1.weight", i + 2)).unwrap();
        assert_eq!(w.shape()[1], inj[i] + c[i]);
        let skip = m.params().get(&format!("encoder.stage{}.skip.weight", i + 2)).unwrap();
        assert_eq!(skip.shape()[1], inj[i] + c[i]);
    }
}

#[test]
fn misaligned_injection_is_rejected() {
    let config = ModelConfig::desk();
    let m = model(config, 10);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[1, 3, 64, 64], 11));
    let wrong: [_; 4] = std::array::from_fn(|i| g.constant(Tensor::zeros(&[1, 8 << i, 3, 3])));
    let err = encoder_fusion(&mut g, &m.params().scope("encoder"), x, Some(wrong)).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
}

#[test]
fn decoder_reaches_full_resolution() {
    let config = ModelConfig::desk();
    let m = model(config, 12);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(rand_tensor(&[2, 3, 64, 64], 13));
    let out = m.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(out.infection), &[2, 1, 64, 64]);
    assert_eq!(g.shape(out.lung.unwrap()), &[2, 1, 64, 64]);
    assert_eq!(g.block_calls("attention_gate"), 8);
}

#[test]
fn zeroed_psi_decoder_equals_plain_decoder_on_half_skips() {
    let config = ModelConfig::desk();
    let mut m = model(config, 14);
    let p = m.params_mut();
    p.map_prefix(INFECTION_DECODER, |name, t| {
        if name.contains(".gate.psi.") {
            t.scale_inplace(0.0);
        }
    });
    for level in 1..=4 {
        let bn = format!("{INFECTION_DECODER}.stage{level}.gate.psi_bn");
        p.set(&format!("{bn}.running_mean"), Tensor::zeros(&[1])).unwrap();
        p.set(&format!("{bn}.running_var"), Tensor::full(&[1], 1.0 - 1e-5))
            .unwrap();
        p.set(&format!("{bn}.weight"), Tensor::ones(&[1])).unwrap();
        p.set(&format!("{bn}.bias"), Tensor::zeros(&[1])).unwrap();
    }
    let stages: Vec<Tensor> = [16, 32, 64, 128, 256]
        .iter()
        .zip([64, 32, 16, 8, 4])
        .enumerate()
        .map(|(i, (&c, s))| rand_tensor(&[2, c, s, s], 20 + i as u64))
        .collect();

    let mut g = Graph::new(Mode::Eval);
    let vars: Vec<_> = stages.iter().map(|t| g.constant(t.clone())).collect();
    let bundle = EncoderBundle {
        stages: [vars[0], vars[1], vars[2], vars[3], vars[4]],
    };
    let gated = decoder_forward(&mut g, &m.params().scope(INFECTION_DECODER), &bundle, true).unwrap();
    let gated = g.value(gated).clone();

    let mut g = Graph::new(Mode::Eval);
    let vars: Vec<_> = stages
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut t = t.clone();
            if i < 4 {
                t.scale_inplace(0.5);
            }
            g.constant(t)
        })
        .collect();
    let bundle = EncoderBundle {
        stages: [vars[0], vars[1], vars[2], vars[3], vars[4]],
    };
    let plain = decoder_forward(&mut g, &m.params().scope(INFECTION_DECODER), &bundle, false).unwrap();
    let plain = g.value(plain);

    let diff = gated
        .data()
        .iter()
        .zip(plain.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-9, "max difference {diff}");
}

#[test]
fn head_widths_follow_task() {
    for (task, classes) in [(Task::Binary, 1), (Task::Multiclass, 3)] {
        let m = model(ModelConfig::desk().with_task(task), 15);
        let out = m.predict(&rand_tensor(&[1, 3, 64, 64], 16)).unwrap();
        assert_eq!(out.infection_logits.shape(), &[1, classes, 64, 64]);
        assert_eq!(out.lung_logits.unwrap().shape(), &[1, 1, 64, 64]);
    }
    let single = model(ModelConfig::desk().with_variant(Variant::TrAttUnet), 15);
    let out = single.predict(&rand_tensor(&[1, 3, 64, 64], 16)).unwrap();
    assert!(out.lung_logits.is_none());
    assert!(!single.params().contains("lung_head.weight"));
}

#[test]
fn lung_decoder_does_not_touch_infection_logits() {
    let m = model(ModelConfig::desk(), 17);
    let x = rand_tensor(&[1, 3, 64, 64], 18);
    let before = m.predict(&x).unwrap();
    let mut changed = m.clone();
    changed
        .params_mut()
        .map_prefix(LUNG_DECODER, |_, t| t.map_inplace(|v| v * 1.7 + 0.1));
    changed
        .params_mut()
        .map_prefix("lung_head", |_, t| t.map_inplace(|v| v - 0.3));
    let after = changed.predict(&x).unwrap();
    assert_eq!(before.infection_logits, after.infection_logits);
    assert_ne!(before.lung_logits, after.lung_logits);
}

fn grads_for(m: &DTrAttUnet, weights: [f64; 2], seed: u64) -> indexmap::IndexMap<String, Tensor> {
    let config = m.config();
    let s = config.image_size;
    let mut g = Graph::new(Mode::Train);
    let x = g.constant(rand_tensor(&[2, 3, s, s], seed));
    let out = m.forward(&mut g, x).unwrap();
    let n = 2 * s * s;
    let inf: Vec<u8> = (0..n).map(|i| ((i * 7 + seed as usize) % 5 == 0) as u8).collect();
    let lung: Vec<u8> = (0..n).map(|i| ((i / s) % s > s / 4) as u8).collect();
    let loss = joint_loss(
        &mut g,
        out.infection,
        out.lung,
        &inf,
        Some(&lung),
        config.task(),
        weights,
    )
    .unwrap();
    let grads = g.backward(loss.total).unwrap();
    g.param_grads(&grads)
}

#[test]
fn decoders_receive_gradients_only_from_their_task() {
    let m = model(ModelConfig::desk(), 19);
    let nonzero = |t: &Tensor| t.data().iter().any(|&v| v != 0.0);
    for (weights, silent, active) in [([1.0, 0.0], "lung_", "infection_"), ([0.0, 1.0], "infection_", "lung_")] {
        let grads = grads_for(&m, weights, 21);
        for (name, grad) in &grads {
            if name.starts_with(silent) {
                assert!(!nonzero(grad), "{name} received gradient from the other task");
            }
        }
        assert!(grads.iter().any(|(n, t)| n.starts_with(active) && nonzero(t)));
        assert!(nonzero(&grads["encoder.stage1.conv1.weight"]));
        assert!(nonzero(&grads["transformer.layers.0.attn.query.weight"]));
    }
}

#[test]
fn every_trainable_tensor_gets_gradient() {
    // four strictly increasing taps need at least four layers
    let config = ModelConfig {
        embed_dim: 96,
        depth: 4,
        ..ModelConfig::desk()
    };
    let m = model(config, 23);
    let grads = grads_for(&m, [0.7, 0.3], 24);
    let mut trainable = 0;
    for (name, entry) in m.params().iter() {
        if entry.kind != ParamKind::Trainable {
            continue;
        }
        trainable += 1;
        let g = &grads[name];
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
    assert_eq!(trainable, grads.len());
}

#[test]
fn eval_forward_is_bit_deterministic() {
    let x = rand_tensor(&[2, 3, 64, 64], 25);
    let a = model(ModelConfig::desk(), 26).predict(&x).unwrap();
    let b = model(ModelConfig::desk(), 26).predict(&x).unwrap();
    assert_eq!(a, b);
    let c = model(ModelConfig::desk(), 27).predict(&x).unwrap();
    assert_ne!(a.infection_logits, c.infection_logits);
}

#[test]
fn variants_map_to_flags_and_names() {
    let cases = [
        (Variant::DTrAttUnet, (true, true, true), "D-TrAttUnet"),
        (Variant::DTrUnet, (false, true, true), "D-TrUnet"),
        (Variant::DAttUnet, (true, true, false), "D-AttUnet"),
        (Variant::TrAttUnet, (true, false, true), "TrAttUnet"),
        (Variant::AttUnet, (true, false, false), "AttUnet"),
        (Variant::Unet, (false, false, false), "Unet"),
    ];
    for (v, flags, name) in cases {
        let config = ModelConfig::desk().with_variant(v);
        assert_eq!(
            (
                config.use_attention_gates,
                config.use_dual_decoder,
                config.use_transformer_encoder
            ),
            flags
        );
        let m = build_variant(&config, 0).unwrap();
        assert_eq!(m.variant(), v);
        assert_eq!(m.variant().display_name(), name);
    }
}

#[test]
fn dual_decoder_adds_parameters() {
    for ag in [false, true] {
        for tr in [false, true] {
            let count = |dd| {
                let c = ModelConfig::desk().with_variant(Variant::from_flags(ag, dd, tr));
                LayerManifest::from_config(&c).unwrap().total_trainable
            };
            assert!(count(true) > count(false), "ag={ag} tr={tr}");
        }
    }
    let built = build_variant(&ModelConfig::desk(), 0).unwrap();
    assert_eq!(built.num_parameters(), built.manifest().total_trainable);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let m = model(ModelConfig::desk(), 28);
    for shape in [[1, 3, 32, 32], [1, 1, 64, 64]] {
        let err = m.predict(&Tensor::zeros(&shape)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }
}

#[test]
fn manifest_json_roundtrip_and_diff() {
    let full = LayerManifest::from_config(&ModelConfig::desk()).unwrap();
    let json = serde_json::to_string(&full).unwrap();
    let back: LayerManifest = serde_json::from_str(&json).unwrap();
    assert_eq!(back, full);
    let unet = LayerManifest::from_config(&ModelConfig::desk().with_variant(Variant::Unet)).unwrap();
    assert!(unet
        .entries
        .iter()
        .all(|e| !e.name.starts_with("transformer") && !e.name.contains("gate")));
    assert!(unet.total_trainable < full.total_trainable);
}

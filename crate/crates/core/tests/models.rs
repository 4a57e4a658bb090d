mod common;

use common::*;
use mulvit::analysis::{count_flops, count_params, head_flops};
use mulvit::model::{Architecture, Model, ModelOverrides, Preset};
use mulvit::session::Session;
use mulvit::tape::GeluMode;
use mulvit::vit::{multi_head_attention, BlockParams};
use mulvit::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn tape_forward_matches_loop_reference() {
    for preset in Preset::ALL {
        for seed in 0..5 {
            let o = ModelOverrides {
                image_height: Some(8),
                image_width: Some(12),
                patch_size: Some(4),
                embed_dim: Some(6),
                depth: Some(2),
                heads: Some(3),
                ..toy_overrides()
            };
            let mut model = Model::<f64>::new(preset.spec().with_overrides(&o).unwrap(), seed).unwrap();
            randomize(&mut model, seed, 0.4);
            let images = toy_inputs(&model, seed + 9);
            let (pred, cls) = tape_cls(&model, &images);
            let r = reference_forward(&model, &images);
            assert!((pred - r.prediction).abs() < 1e-10, "{preset:?}: {pred} vs {}", r.prediction);
            for (a, b) in cls.iter().zip(&r.cls) {
                assert!(rel_err(a, b) < 1e-12);
            }
        }
    }
}

#[test]
fn exact_gelu_forward_matches_reference() {
    let mut spec = Preset::MulvitTwdnn.spec().with_overrides(&toy_overrides()).unwrap();
    spec.gelu = GeluMode::Exact;
    let mut model = Model::<f64>::new(spec, 1).unwrap();
    randomize(&mut model, 2, 0.8);
    let images = toy_inputs(&model, 3);
    let (pred, _) = tape_cls(&model, &images);
    assert!((pred - reference_forward(&model, &images).prediction).abs() < 1e-10);
}

#[test]
fn attention_matches_brute_force() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, d, heads) = (5, 6, 3);
        let mut store = mulvit::params::ParamStore::<f64>::new();
        let bp = BlockParams::register(&mut store, "b", d, 8, mulvit::params::ParamGroup::Backbone, &mut rng);
        for name in ["b.attn.qkv.weight", "b.attn.qkv.bias"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.set(name, random(&shape, &mut rng)).unwrap();
        }
        let x = random(&[t, d], &mut rng);
        let mut s = Session::inference(&store, GeluMode::Tanh, 1e-6);
        let xv = s.tape.constant(x.clone());
        let out = multi_head_attention(&mut s, xv, &bp, heads).unwrap();
        let got = s.tape.value(out).data().to_vec();

        let w = store.get("b.attn.qkv.weight").unwrap();
        let w: Vec<Vec<f64>> = (0..d).map(|i| w.row(i).to_vec()).collect();
        let rows: Vec<Vec<f64>> = (0..t).map(|i| x.row(i).to_vec()).collect();
        let want = brute_force_attention(&rows, &w, store.get("b.attn.qkv.bias").unwrap().data(), heads);
        assert!(rel_err(&got, &want.concat()) < 1e-13);
    }
}

#[test]
fn fusion_couples_views_and_token_wise_does_not() {
    for seed in 0..50 {
        let (same, change) = cross_view_change(Preset::MulvitTf, seed);
        assert!(!same && change > 1e-9, "seed {seed}: TF CLS A barely moved ({change:e})");
        let (same, _) = cross_view_change(Preset::MulvitTwdnn, seed);
        assert!(same, "seed {seed}: TWDNN CLS A changed");
    }
}

fn swap_cameras(model: &Model<f64>) -> Model<f64> {
    let mut swapped = model.clone();
    for e in model.params.entries() {
        let other = if let Some(rest) = e.name.strip_prefix("encoder0") {
            format!("encoder1{rest}")
        } else if let Some(rest) = e.name.strip_prefix("encoder1") {
            format!("encoder0{rest}")
        } else if e.name == "twdnn.segment0" {
            "twdnn.segment1".into()
        } else if e.name == "twdnn.segment1" {
            "twdnn.segment0".into()
        } else {
            continue;
        };
        swapped.params.set(&other, e.value.clone()).unwrap();
    }
    swapped
}

/// Swap the two halves of the head's first-layer input rows.
fn swap_head_rows(model: &mut Model<f64>) {
    let w = model.params.get("head.fc1.weight").unwrap().clone();
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let half = rows / 2;
    let data = (0..rows)
        .flat_map(|r| w.row((r + half) % rows).to_vec())
        .collect();
    model.params.set("head.fc1.weight", Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
}

#[test]
fn camera_order_equivariance() {
    for preset in [Preset::MulvitTf, Preset::MulvitTwdnn] {
        for seed in 0..10 {
            let mut model = toy(preset, seed);
            randomize(&mut model, seed, 0.6);
            let images = toy_inputs(&model, seed + 1);
            let (pred, cls) = tape_cls(&model, &images);
            let mut swapped = swap_cameras(&model);
            let flipped = vec![images[1].clone(), images[0].clone()];
            let (_, cls_swapped) = tape_cls(&swapped, &flipped);
            if preset == Preset::MulvitTwdnn {
                assert_eq!(cls[0], cls_swapped[1]);
                assert_eq!(cls[1], cls_swapped[0]);
            } else {
                assert!(rel_err(&cls[0], &cls_swapped[1]) < 1e-13);
                assert!(rel_err(&cls[1], &cls_swapped[0]) < 1e-13);
            }
            swap_head_rows(&mut swapped);
            let (pred_swapped, _) = tape_cls(&swapped, &flipped);
            assert!((pred - pred_swapped).abs() < 1e-12, "{preset:?}: {pred} vs {pred_swapped}");
        }
    }
}

#[test]
fn encoders_see_only_their_own_camera() {
    for preset in [Preset::MulvitTf, Preset::MulvitTwdnn] {
        let model = toy(preset, 4);
        let mut images = toy_inputs(&model, 5);
        let tokens = |imgs: &[Tensor<f64>]| {
            let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
            let mut s = model.inference_session();
            let out = model.forward(&mut s, &refs).unwrap();
            s.tape.value(out.tokens[0]).clone()
        };
        let before = tokens(&images);
        images[1].data_mut()[0] += 1.0;
        assert_eq!(tokens(&images), before);
    }
}

#[test]
fn empty_fusion_is_head_on_raw_cls() {
    let o = ModelOverrides {
        fusion_depth: Some(0),
        ..toy_overrides()
    };
    let mut model = Model::<f64>::new(Preset::MulvitTf.spec().with_overrides(&o).unwrap(), 0).unwrap();
    randomize(&mut model, 1, 0.5);
    let images = toy_inputs(&model, 2);
    let (pred, cls) = tape_cls(&model, &images);
    for (k, img) in images.iter().enumerate() {
        assert!(rel_err(&cls[k], &encoder_tokens(&model, k, img)[0]) < 1e-13);
    }
    assert!((pred - reference_forward(&model, &images).prediction).abs() < 1e-12);
}

#[test]
fn preset_shapes_and_instrumented_costs() {
    for preset in Preset::ALL {
        let model = Model::<f32>::new(preset.spec(), 0).unwrap();
        let spec = &model.spec;
        assert_eq!(model.params.scalar_count() as u64, count_params(spec), "{preset}");
        let images: Vec<Tensor<f32>> = (0..spec.camera_count()).map(|_| Tensor::zeros(&[3, 240, 320])).collect();
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        let mut s = model.inference_session();
        let out = model.forward(&mut s, &refs).unwrap();
        let d = spec.embed_dim();
        for t in &out.tokens {
            assert_eq!(s.tape.shape(*t), &[301, d]);
        }
        for c in &out.cls {
            assert_eq!(s.tape.shape(*c), &[1, d]);
        }
        let m = spec.camera_count();
        assert_eq!(s.tape.shape(out.features), &[1, if spec.architecture == Architecture::SinVit { d } else { m * d }]);
        assert_eq!(s.tape.matmul_flops(), count_flops(spec) + head_flops(spec), "{preset}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn outputs_finite_for_finite_inputs(seed in 0u64..1000, scale in 0.0f64..3.0) {
        let mut model = toy(Preset::MulvitTf, seed);
        randomize(&mut model, seed, scale);
        let images: Vec<Tensor<f64>> = toy_inputs(&model, seed)
            .into_iter()
            .map(|t| Tensor::from_fn(t.shape(), |i| t.data()[i] * 100.0))
            .collect();
        let (pred, cls) = tape_cls(&model, &images);
        prop_assert!(pred.is_finite());
        prop_assert!(cls.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn prediction_is_translation_covariant_in_output_bias(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let model = toy(Preset::SinvitD, seed);
        let images = toy_inputs(&model, seed);
        let (base, _) = tape_cls(&model, &images);
        let mut moved = model.clone();
        moved.params.get_mut("head.out.bias").unwrap().data_mut()[0] += shift;
        let (p, _) = tape_cls(&moved, &images);
        prop_assert!((p - base - shift).abs() < 1e-12);
    }
}

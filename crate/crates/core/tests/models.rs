mod common;

use std::collections::BTreeSet;

use common::*;
use isunet::losses::{self, LossWeights};
use isunet::models::{ForwardOutputs, Model, ModelConfig, Variant};
use isunet::nn::{ParamHandle, ParamStore};
use isunet::{Tape, Tensor};
use rand::Rng;

fn build(variant: Variant, base: usize) -> (Model, ParamStore<f64>) {
    let mut store = ParamStore::new(42);
    let cfg = ModelConfig { base_channels: base, ..ModelConfig::new(variant) };
    let model = Model::build(&cfg, &mut store).unwrap();
    (model, store)
}

fn binary(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| if r.random_bool(0.3) { 1.0 } else { 0.0 })
}

/// Values of every head of one forward pass.
struct Snapshot {
    y: Tensor<f64>,
    y_prime: Option<Tensor<f64>>,
    y_j: Vec<Tensor<f64>>,
    y_prime_j: Vec<Tensor<f64>>,
    x_tilde: Option<Tensor<f64>>,
}

fn run(model: &Model, store: &ParamStore<f64>, x: &Tensor<f64>, m: &Tensor<f64>) -> Snapshot {
    let mut tape = Tape::with_params(store);
    let out: ForwardOutputs = model.forward(&mut tape, x, Some(m)).unwrap();
    let get = |v| tape.value(v).clone();
    Snapshot {
        y: get(out.y),
        y_prime: out.y_prime.map(get),
        y_j: out.y_j.unwrap_or_default().into_iter().map(get).collect(),
        y_prime_j: out.y_prime_j.unwrap_or_default().into_iter().map(get).collect(),
        x_tilde: out.x_tilde.map(get),
    }
}

fn perturb(store: &mut ParamStore<f64>, h: ParamHandle) {
    for v in store.value_mut(h).data_mut() {
        *v += 0.25;
    }
}

#[test]
fn parameter_counts_match_closed_forms() {
    for base in [16, 4] {
        for v in Variant::ALL {
            let (model, store) = build(v, base);
            assert_eq!(model.parameter_count(&store), expected_params(v.name(), base, 1, true), "{v} base {base}");
        }
    }
    for v in [Variant::Sae, Variant::Twae] {
        let mut store = ParamStore::<f32>::new(0);
        let cfg = ModelConfig { base_channels: 4, share_heads: false, ..ModelConfig::new(v) };
        let model = Model::build(&cfg, &mut store).unwrap();
        assert_eq!(model.parameter_count(&store), expected_params(v.name(), 4, 1, false));
    }
}

#[test]
fn frozen_parameter_counts() {
    let count = |v| {
        let (m, s) = build(v, 16);
        m.parameter_count(&s)
    };
    assert_eq!(count(Variant::Unet), 1_420_881);
    assert_eq!(count(Variant::Inter), 1_421_254);
    assert_eq!(count(Variant::Twae), 2_009_895);
}

#[test]
fn variants_differ_by_exactly_their_extra_parts() {
    let (unet, su) = build(Variant::Unet, 16);
    let (inter, si) = build(Variant::Inter, 16);
    let (twi, st) = build(Variant::Twi, 16);
    let (sae, ss) = build(Variant::Sae, 16);
    let (twae, sw) = build(Variant::Twae, 16);
    // inter adds five 1×1 heads at channel widths 128,128,64,32,16
    let heads: usize = [128, 128, 64, 32, 16].iter().map(|c| c + 1).sum();
    assert_eq!(inter.parameter_count(&si) - unet.parameter_count(&su), heads);
    // tied decoders add biases only, sized by each encoder level's input width
    let tied = twi.tied_bias_handles();
    assert_eq!(tied.len(), 5);
    assert!(tied.iter().all(|&h| st.value(h).shape().len() == 1));
    let bias_total: usize = tied.iter().map(|&h| st.value(h).len()).sum();
    assert_eq!(bias_total, 1 + 16 + 32 + 64 + 128);
    assert_eq!(twi.parameter_count(&st) - inter.parameter_count(&si), bias_total);
    assert_eq!(twae.parameter_count(&sw) - sae.parameter_count(&ss), bias_total);
    // the SAE decoder is shared, so it is counted once
    assert!(!sae.shared_decoder_handles().is_empty());
    assert_eq!(sae.parameter_count(&ss), ss.param_count());
}

#[test]
fn output_shapes_follow_the_level_arithmetic() {
    let (unet, su) = build(Variant::Unet, 4);
    let x = binary(&[1, 1, 64, 64], 1);
    let mut tape = Tape::with_params(&su);
    let out = unet.forward(&mut tape, &x, None).unwrap();
    assert_eq!(tape.shape(out.y), &[1, 1, 64, 64]);
    assert!(out.y_j.is_none() && out.y_prime.is_none() && out.x_tilde.is_none());

    let (inter, si) = build(Variant::Inter, 4);
    let s = run(&inter, &si, &x, &binary(&[1, 1, 64, 64], 2));
    let extents: Vec<usize> = s.y_j.iter().map(|t| t.shape()[2]).collect();
    assert_eq!(extents, vec![4, 8, 16, 32, 64]);
    for (a, b) in s.y_j.iter().zip(&s.y_prime_j) {
        assert_eq!(a.shape(), b.shape());
    }
}

#[test]
fn heads_present_match_each_loss() {
    let x = binary(&[1, 1, 32, 32], 3);
    let m = binary(&[1, 1, 32, 32], 4);
    for v in Variant::ALL {
        let (model, store) = build(v, 2);
        let s = run(&model, &store, &x, &m);
        assert_eq!(s.y_prime.is_some(), v != Variant::Unet, "{v}");
        assert_eq!(s.y_j.len(), if v == Variant::Unet { 0 } else { 5 }, "{v}");
        assert_eq!(s.x_tilde.is_some(), matches!(v, Variant::Twi | Variant::Twae), "{v}");
        if let Some(xt) = &s.x_tilde {
            assert_eq!(xt.shape(), x.shape());
        }
        let all = std::iter::once(&s.y).chain(&s.y_prime).chain(&s.y_j).chain(&s.y_prime_j).chain(&s.x_tilde);
        for t in all {
            assert!(t.data().iter().all(|&p| p > 0.0 && p < 1.0), "{v}: sigmoid output outside (0,1)");
        }
    }
}

#[test]
fn dual_input_variants_require_the_mask() {
    for v in [Variant::Inter, Variant::Ae, Variant::Sae, Variant::Twi, Variant::Twae] {
        let (model, store) = build(v, 2);
        let mut tape = Tape::with_params(&store);
        assert!(model.forward(&mut tape, &Tensor::zeros(&[1, 1, 16, 16]), None).is_err(), "{v}");
    }
    let (unet, store) = build(Variant::Unet, 2);
    let mut tape = Tape::with_params(&store);
    assert!(unet.forward(&mut tape, &Tensor::zeros(&[1, 1, 24, 24]), None).is_err());
}

#[test]
fn inter_on_identical_inputs_has_zero_intermediate_loss() {
    let (inter, store) = build(Variant::Inter, 4);
    let m = binary(&[2, 1, 32, 32], 5);
    let mut tape = Tape::with_params(&store);
    let out = inter.forward(&mut tape, &m, Some(&m)).unwrap();
    for (a, b) in out.y_j.as_ref().unwrap().iter().zip(out.y_prime_j.as_ref().unwrap()) {
        assert_eq!(tape.value(*a), tape.value(*b));
    }
    let mv = tape.leaf(m, false);
    let (_, b) = losses::hybrid_h1(&mut tape, &out, mv, &LossWeights::default(), false).unwrap();
    assert_eq!(b.l_j, [0.0; 5]);
}

#[test]
fn inter_swapping_inputs_swaps_branches() {
    let (inter, store) = build(Variant::Inter, 4);
    let x = random_unit(&[1, 1, 32, 32], &mut rng(6));
    let m = binary(&[1, 1, 32, 32], 7);
    let a = run(&inter, &store, &x, &m);
    let b = run(&inter, &store, &m, &x);
    assert_eq!(&a.y, b.y_prime.as_ref().unwrap());
    assert_eq!(a.y_prime.as_ref().unwrap(), &b.y);
    assert_eq!(a.y_j, b.y_prime_j);
    assert_eq!(a.y_prime_j, b.y_j);
}

#[test]
fn sae_mask_encoder_does_not_reach_the_image_output() {
    for v in [Variant::Sae, Variant::Twae] {
        let (model, mut store) = build(v, 4);
        let x = random_unit(&[1, 1, 32, 32], &mut rng(8));
        let m = binary(&[1, 1, 32, 32], 9);
        let base = run(&model, &store, &x, &m);
        let mask_enc = model.mask_encoder_handles();
        assert!(!mask_enc.is_empty());
        for &h in &mask_enc {
            perturb(&mut store, h);
        }
        let after = run(&model, &store, &x, &m);
        assert_eq!(base.y, after.y, "{v}");
        assert_eq!(base.y_j, after.y_j, "{v}");
        assert_ne!(base.y_prime, after.y_prime, "{v}");
    }
}

#[test]
fn sae_shared_decoder_reaches_both_outputs() {
    let (model, mut store) = build(Variant::Sae, 4);
    let x = random_unit(&[1, 1, 32, 32], &mut rng(10));
    let m = binary(&[1, 1, 32, 32], 11);
    let base = run(&model, &store, &x, &m);
    let shared = model.shared_decoder_handles();
    let h = *shared.iter().find(|&&h| store.name(h).contains("dec.0.block.conv2.weight")).unwrap();
    perturb(&mut store, h);
    let after = run(&model, &store, &x, &m);
    assert_ne!(base.y, after.y);
    assert_ne!(base.y_prime, after.y_prime);
}

#[test]
fn tied_reconstruction_ignores_the_expanding_path() {
    for v in [Variant::Twi, Variant::Twae] {
        let (model, mut store) = build(v, 4);
        let x = random_unit(&[1, 1, 32, 32], &mut rng(12));
        let m = binary(&[1, 1, 32, 32], 13);
        let base = run(&model, &store, &x, &m);
        for &h in &model.expansion_only_handles() {
            perturb(&mut store, h);
        }
        let after = run(&model, &store, &x, &m);
        assert_eq!(base.x_tilde, after.x_tilde, "{v}");
        assert_ne!(base.y, after.y, "{v}");
        // the tied biases do feed the reconstruction
        let bias = *model.tied_bias_handles().iter().next().unwrap();
        perturb(&mut store, bias);
        assert_ne!(run(&model, &store, &x, &m).x_tilde, after.x_tilde, "{v}");
    }
}

#[test]
fn full_tied_model_loss_gradient_matches_finite_differences() {
    let (model, mut store) = build(Variant::Twi, 2);
    let mut r = rng(14);
    // move biases off zero so every path is exercised
    for h in store.handles().collect::<Vec<_>>() {
        if store.value(h).shape().len() == 1 {
            *store.value_mut(h) = random(store.value(h).shape(), &mut r).map(|v| 0.1 * v);
        }
    }
    let x = random_unit(&[2, 1, 16, 16], &mut r);
    let m = binary(&[2, 1, 16, 16], 15);
    let w = LossWeights { beta: 0.7, ..LossWeights::default() };
    let loss = |store: &ParamStore<f64>, backward: bool| {
        let mut tape = Tape::with_params(store);
        let out = model.forward(&mut tape, &x, Some(&m)).unwrap();
        let (xv, mv) = (tape.leaf(x.clone(), false), tape.leaf(m.clone(), false));
        let (l, _) = losses::total_h(&mut tape, &out, xv, mv, &w, false).unwrap();
        if backward {
            tape.backward(l).unwrap();
        }
        tape.value(l).item()
    };
    loss(&store, true);
    let handles: Vec<ParamHandle> = model.handles().into_iter().collect();
    let grads: Vec<Tensor<f64>> = handles.iter().map(|&h| store.grad(h).clone()).collect();
    let h = 1e-5;
    // directional derivatives along random directions over all parameters
    for trial in 0..5 {
        let dirs: Vec<Tensor<f64>> = handles.iter().map(|&p| random(store.value(p).shape(), &mut r)).collect();
        let analytic: f64 = grads.iter().zip(&dirs).map(|(g, d)| inner(g, d)).sum();
        let shift = |store: &mut ParamStore<f64>, s: f64| {
            for (&p, d) in handles.iter().zip(&dirs) {
                for (v, dv) in store.value_mut(p).data_mut().iter_mut().zip(d.data()) {
                    *v += s * dv;
                }
            }
        };
        shift(&mut store, h);
        let up = loss(&store, false);
        shift(&mut store, -2.0 * h);
        let down = loss(&store, false);
        shift(&mut store, h);
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-3, "direction {trial}: analytic {analytic} numeric {numeric}");
    }
    // single coordinates of every parameter tensor, tied kernels included
    for (k, &p) in handles.iter().enumerate() {
        let i = r.random_range(0..store.value(p).len());
        let orig = store.value(p).data()[i];
        store.value_mut(p).data_mut()[i] = orig + h;
        let up = loss(&store, false);
        store.value_mut(p).data_mut()[i] = orig - h;
        let down = loss(&store, false);
        store.value_mut(p).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[k].data()[i];
        assert!(
            (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-7,
            "{}[{i}]: analytic {analytic} numeric {numeric}",
            store.name(p)
        );
    }
}

#[test]
fn handles_cover_the_whole_registry_once() {
    for v in Variant::ALL {
        let (model, store) = build(v, 2);
        let all: BTreeSet<_> = store.handles().collect();
        assert_eq!(model.handles(), all, "{v}");
    }
}

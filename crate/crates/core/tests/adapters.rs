use boxadapt_core::hf_adapter::{extract_hfc, suppressed_half_width};
use boxadapt_core::ms_adapter::{pyramid_pool, PYRAMID_SIZES};
use boxadapt_core::selector::fuse;
use boxadapt_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(3, size, size, |_, _, _| rng.random_range(0.0..1.0))
}

fn zero_prefix(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
}

#[test]
fn zero_adapters_leave_the_encoder_untouched() {
    let cfg = ModelConfig::for_encoder(EncoderConfig::desk32());
    let mut model = Model::new(&cfg, 1).unwrap();
    for p in ["hfa.", "msfa.", "selector."] {
        zero_prefix(&mut model.store, p);
    }
    let img = noise_image(32, 3);
    let plain = model.encoder.encode(&model.store, &img, None).unwrap();
    let injected = model.encoder.encode(&model.store, &img, model.adapters.as_ref()).unwrap();
    for (a, b) in plain.layers.iter().zip(&injected.layers) {
        let scale = a.tensor().data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(a.tensor().max_abs_diff(b.tensor()) <= 1e-6 * scale);
    }
    assert_eq!(plain.final_embedding, injected.final_embedding);
}

#[test]
fn adapters_change_the_encoding() {
    let model = Model::new(&ModelConfig::for_encoder(EncoderConfig::desk32()), 1).unwrap();
    let img = noise_image(32, 3);
    let plain = model.encoder.encode(&model.store, &img, None).unwrap();
    let injected = model.encoder.encode(&model.store, &img, model.adapters.as_ref()).unwrap();
    assert!(plain.final_embedding.tensor().max_abs_diff(injected.final_embedding.tensor()) > 1e-3);
}

#[test]
fn suppressed_frequencies_do_not_reach_the_output() {
    let n = 32;
    let tau = 0.25;
    let half = suppressed_half_width(n, n, tau) as f64;
    let img = noise_image(n, 8);
    let wave = ImageTensor::from_fn(3, n, n, |c, y, x| {
        let t = std::f64::consts::TAU * (half * x as f64 + (half - 1.0) * y as f64) / n as f64;
        img.get(c, y, x) + 0.3 * t.cos() + 0.1 * (c as f64 + 1.0)
    });
    let a = extract_hfc(&img, tau).unwrap();
    let b = extract_hfc(&wave, tau).unwrap();
    assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-12);
}

#[test]
fn clue_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = 16;
    let hfa = HfAdapter::new(&mut store, &HfaConfig { tau: 0.25, hidden_dim: 8 }, 4, 4, c, &mut rng).unwrap();
    let img = noise_image(16, 2);
    let embed = Tensor::from_fn(&[16, c], |_| rng.random_range(-1.0..1.0));
    let total = |store: &ParamStore| -> (f64, Vec<(boxadapt_core::params::ParamId, Tensor)>) {
        let mut ctx = Ctx::new(store);
        let e = ctx.constant(embed.clone());
        let clue = hfa.forward_var(&mut ctx, &img, e).unwrap();
        let s = ctx.graph.sum(clue);
        let grads = ctx.graph.backward(s);
        let out = ctx.bound().filter_map(|(id, v)| grads.get(v).map(|g| (id, g.clone()))).collect();
        (ctx.graph.value(s).data()[0], out)
    };
    let (_, grads) = total(&store);
    let mut checked = 0;
    for (id, g) in &grads {
        let name = store.get(*id).name.clone();
        if !name.starts_with("hfa.mlp") {
            continue;
        }
        for i in (0..g.numel()).step_by(g.numel() / 5 + 1) {
            let eps = 1e-4;
            let mut plus = store.clone();
            plus.get_mut(*id).value.data_mut()[i] += eps;
            let mut minus = store.clone();
            minus.get_mut(*id).value.data_mut()[i] -= eps;
            let fd = (total(&plus).0 - total(&minus).0) / (2.0 * eps);
            let an = g.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{i}]: fd {fd} analytic {an}");
            checked += 1;
        }
    }
    assert!(checked >= 12);
}

#[test]
fn decoder_is_deterministic() {
    let model = Model::new(&ModelConfig::for_encoder(EncoderConfig::desk32()), 5).unwrap();
    let img = noise_image(32, 1);
    let b = coarse_bbox(32, 32, 0.9).unwrap();
    let a = model.predict(&img, &b).unwrap();
    let c = model.predict(&img, &b).unwrap();
    assert_eq!(a.logits, c.logits);
    assert!(a.logits.all_finite());
}

fn feature(g: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::new(Tensor::from_fn(&[1, 2, g, g], |_| rng.random_range(-4.0..4.0)), Some(1)).unwrap()
}

fn grid_strategy() -> impl Strategy<Value = usize> {
    prop_oneof![Just(8usize), Just(16), Just(64)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_shapes(grid in 2usize..5, patch in 1usize..4, heads in 1usize..3, per_head in 1usize..5, blocks in 1usize..4, seed in any::<u64>()) {
        let cfg = EncoderConfig {
            input_size: grid * patch,
            patch_size: patch,
            embed_dim: heads * per_head * 2,
            num_blocks: blocks,
            num_heads: heads,
            mlp_ratio: 2,
            pretrained_weights: None,
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, seed).unwrap();
        let f = enc.encode(&store, &noise_image(cfg.input_size, seed), None).unwrap();
        prop_assert_eq!(f.layers.len(), blocks);
        for (k, l) in f.layers.iter().enumerate() {
            prop_assert_eq!(l.shape(), [1, cfg.embed_dim, grid, grid]);
            prop_assert_eq!(l.layer, Some(k + 1));
        }
        prop_assert_eq!(f.final_embedding.shape(), [1, cfg.embed_dim, grid, grid]);
    }

    #[test]
    fn hfa_energy_bounded(seed in any::<u64>(), tau in 0.05f64..0.95) {
        let img = noise_image(16, seed);
        let out = extract_hfc(&img, tau).unwrap();
        for c in 0..3 {
            let ch = img.channel(c);
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            let e_in: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum();
            let e_out: f64 = out.channel(c).iter().map(|v| v * v).sum();
            prop_assert!(e_out <= e_in + 1e-9);
        }
    }

    #[test]
    fn pooling_preserves_the_mean(g in grid_strategy(), seed in any::<u64>()) {
        let f = feature(g, seed);
        for lvl in pyramid_pool(&f).unwrap() {
            for c in 0..2 {
                let s = lvl.grid();
                let input: f64 = (0..g * g).map(|i| f.get(c, i / g, i % g)).sum::<f64>() / (g * g) as f64;
                let level: f64 = (0..s * s).map(|i| lvl.get(c, i / s, i % s)).sum::<f64>() / (s * s) as f64;
                prop_assert!((input - level).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_ignores_order_within_a_bin(g in grid_strategy(), seed in any::<u64>(), level in 0usize..4) {
        let f = feature(g, seed);
        let s = PYRAMID_SIZES[level];
        let bin = g / s;
        // reverse the pixels of the first bin of every channel
        let mut data = f.tensor().data().to_vec();
        for c in 0..2 {
            let idx: Vec<usize> = (0..bin * bin).map(|i| c * g * g + (i / bin) * g + i % bin).collect();
            let vals: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
            for (i, v) in idx.iter().zip(vals.iter().rev()) {
                data[*i] = *v;
            }
        }
        let p = FeatureMap::new(Tensor::new(&[1, 2, g, g], data).unwrap(), Some(1)).unwrap();
        let (a, b) = (&pyramid_pool(&f).unwrap()[level], &pyramid_pool(&p).unwrap()[level]);
        prop_assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-12);
    }

    #[test]
    fn pooling_is_linear(g in grid_strategy(), seed in any::<u64>(), k in -4i32..5, lambda in 0.01f64..10.0) {
        let f = feature(g, seed);
        let base = pyramid_pool(&f).unwrap();
        // powers of two scale every rounding step identically
        let two = 2f64.powi(k);
        let scaled = FeatureMap::new(f.tensor().map(|v| v * two), Some(1)).unwrap();
        for (a, b) in base.iter().zip(pyramid_pool(&scaled).unwrap()) {
            prop_assert!(a.tensor().data().iter().zip(b.tensor().data()).all(|(x, y)| x * two == *y));
        }
        let scaled = FeatureMap::new(f.tensor().map(|v| v * lambda), Some(1)).unwrap();
        for (a, b) in base.iter().zip(pyramid_pool(&scaled).unwrap()) {
            prop_assert!(a.tensor().data().iter().zip(b.tensor().data()).all(|(x, y)| (x * lambda - y).abs() < 1e-12 * lambda.max(1.0) * 8.0));
        }
    }

    #[test]
    fn selector_weights_are_a_distribution(seed in any::<u64>(), shift in -20.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sel = Selector::new(&mut store, &SelectorConfig::default(), 6, 1, true, &mut rng);
        let st = sel.state(0).clone();
        store.set_value(st.decision.weight, Tensor::from_fn(&[6, 2], |_| rng.random_range(-2.0..2.0))).unwrap();
        let bias = Tensor::from_fn(&[2], |_| rng.random_range(-2.0..2.0));
        store.set_value(st.decision.bias, bias.clone()).unwrap();
        let x = FeatureMap::new(Tensor::from_fn(&[1, 6, 3, 3], |_| rng.random_range(-3.0..3.0)), Some(1)).unwrap();
        let (w1, w2) = sel.select_weights(&store, &x).unwrap();
        prop_assert!(w1 > 0.0 && w1 < 1.0 && w2 > 0.0 && w2 < 1.0);
        prop_assert!((w1 + w2 - 1.0).abs() < 1e-12);
        store.set_value(st.decision.bias, bias.map(|v| v + shift)).unwrap();
        let (s1, s2) = sel.select_weights(&store, &x).unwrap();
        prop_assert!((s1 - w1).abs() < 1e-12 && (s2 - w2).abs() < 1e-12);
    }

    #[test]
    fn pinned_zero_bias_equals_zeroed_learnable_bias(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut learn_store = ParamStore::new();
        let learn = Selector::new(&mut learn_store, &SelectorConfig::default(), 4, 1, true, &mut rng.clone());
        let mut pin_store = ParamStore::new();
        let pinned = Selector::new(&mut pin_store, &SelectorConfig::default(), 4, 1, false, &mut rng.clone());
        let w = Tensor::from_fn(&[4, 2], |_| rng.random_range(-1.0..1.0));
        for (s, sel) in [(&mut learn_store, &learn), (&mut pin_store, &pinned)] {
            s.set_value(sel.state(0).decision.weight, w.clone()).unwrap();
        }
        learn_store.set_value(learn.state(0).bias, Tensor::zeros(&[2])).unwrap();
        let mk = |rng: &mut ChaCha8Rng| FeatureMap::new(Tensor::from_fn(&[1, 4, 2, 2], |_| rng.random_range(-2.0..2.0)), Some(1)).unwrap();
        let (x, a, b) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let y1 = learn.selector_forward(&learn_store, &x, &a, &b).unwrap();
        let y2 = pinned.selector_forward(&pin_store, &x, &a, &b).unwrap();
        prop_assert_eq!(y1, y2);
        prop_assert!(!pin_store.get(pinned.state(0).bias).trainable);
    }

    #[test]
    fn fusion_is_affine(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = || FeatureMap::new(Tensor::from_fn(&[1, 3, 2, 2], |_| rng.random_range(-2.0..2.0)), Some(1)).unwrap();
        let (a, b) = (mk(), mk());
        let w1 = 0.3;
        let (w, bias) = ((w1, 1.0 - w1), (0.4, -1.1));
        let bt = bias.0 + bias.1;
        let scale = |f: &FeatureMap| FeatureMap::new(f.tensor().map(|v| v * alpha), f.layer).unwrap();
        let lhs = fuse(&scale(&a), &scale(&b), w, bias).unwrap();
        let rhs = fuse(&a, &b, w, bias).unwrap();
        for (l, r) in lhs.tensor().data().iter().zip(rhs.tensor().data()) {
            prop_assert!(((l - bt) - alpha * (r - bt)).abs() < 1e-12);
        }
    }
}

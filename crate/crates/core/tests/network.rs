use panoseg::network::{checkpoint, DecoderBlock, EncoderBlock, ModelConfig, Network, WConv};
use panoseg::nn::{check_params, Mode, ModelState, Session};
use panoseg::tensor::gradcheck::GradCheck;
use panoseg::tensor::{Padding, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        extractor_widths: [4, 8, 8, 8, 8, 8],
        block_width: 8,
        branch_width: 4,
        ..ModelConfig::default()
    }
    .with_extent(64, 128)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn uniform_image(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[b, 3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn session(state: &ModelState, mode: Mode, trainable: bool) -> Session<'_> {
    Session::new(state, mode, trainable, Padding::CircularHReplicateV)
}

/// Weighted sum of a tensor with fixed random weights, as a scalar probe loss.
fn probe(s: &mut Session, y: panoseg::Var, seed: u64) -> panoseg::Var {
    let w = s.graph.constant(randn(s.graph.shape(y), seed));
    let p = s.graph.mul(y, w).unwrap();
    s.graph.sum(p)
}

/// Probes straddling a ReLU/PReLU seam are excluded from the error; make sure
/// they stay rare so the check keeps its teeth.
fn assert_few_kinks(r: &[panoseg::tensor::gradcheck::GradComparison]) {
    let total: usize = r.iter().map(|c| c.indices.len()).sum();
    let kinks: usize = r.iter().map(|c| c.kinks.len()).sum();
    assert!(kinks * 10 <= total, "{kinks} of {total} probes hit a kink");
}

fn init<F: Fn(&mut ModelState, &mut ChaCha8Rng)>(seed: u64, f: F) -> ModelState {
    let mut state = ModelState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    f(&mut state, &mut rng);
    state
}

#[test]
fn wconv_shape_identity_and_gradients() {
    assert!(WConv::new("w", 6).is_err());
    let wc = WConv::new("w", 8).unwrap();
    let mut state = init(1, |st, rng| wc.init(st, 0.25, rng));
    let x = randn(&[2, 8, 8, 16], 2);

    let mut s = session(&state, Mode::Train, false);
    let xv = s.graph.constant(x.clone());
    let y = wc.forward(&mut s, xv).unwrap();
    assert_eq!(s.graph.shape(y), x.shape());

    let names: Vec<String> = state.params.keys().cloned().collect();
    let opts = GradCheck {
        max_entries: Some(16),
        ..Default::default()
    };
    let r = check_params(&state, &names, &opts, |st, tr| session(st, Mode::Train, tr), |s| {
        let xv = s.graph.constant(x.clone());
        let y = wc.forward(s, xv)?;
        Ok(probe(s, y, 3))
    })
    .unwrap();
    for (n, c) in names.iter().zip(&r) {
        assert!(c.relative_error() < 1e-4, "{n}: {}", c.relative_error());
    }
    assert_few_kinks(&r);

    state.param_mut(&wc.final_gain_name()).unwrap().data_mut().fill(0.0);
    let mut s = session(&state, Mode::Train, false);
    let xv = s.graph.constant(x.clone());
    let y = wc.forward(&mut s, xv).unwrap();
    assert_eq!(s.graph.value(y).data(), x.data());
}

#[test]
fn encoder_block_shapes_and_skip() {
    let enc = EncoderBlock::new("e", 8, 0.5).unwrap();
    let state = init(4, |st, rng| enc.init(st, 0.25, rng));
    let mut s = session(&state, Mode::Train, false);
    let x = s.graph.constant(randn(&[2, 8, 16, 32], 5));
    let (out, skip) = enc.forward(&mut s, x).unwrap();
    assert_eq!(s.graph.shape(out), &[2, 8, 8, 16]);
    assert_eq!(s.graph.shape(skip), &[2, 8, 16, 32]);
    let fb_out = enc.fb.forward(&mut s, x).unwrap();
    assert_eq!(s.graph.value(skip).data(), s.graph.value(fb_out).data());

    let bad = s.graph.constant(Tensor::zeros(&[2, 8, 4, 8]));
    assert!(enc.forward_fused(&mut s, x, bad).is_err());
}

#[test]
fn decoder_block_skip_behaviour() {
    let dec = DecoderBlock::new("d", 8, 0.5, true).unwrap();
    let mut state = init(6, |st, rng| dec.init(st, 0.25, 1.0, rng));
    let x = randn(&[1, 8, 2, 4], 7);
    let skip = randn(&[1, 8, 4, 8], 8);

    let mut s = session(&state, Mode::Train, true);
    let xv = s.graph.constant(x.clone());
    let sv = s.graph.constant(skip.clone());
    let y = dec.forward(&mut s, xv, Some(sv)).unwrap();
    assert_eq!(s.graph.shape(y), &[1, 8, 4, 8]);
    let l = probe(&mut s, y, 9);
    s.graph.backward(l).unwrap();
    let w = s.bound()[dec.skip_weight.as_deref().unwrap()];
    assert!(s.graph.grad(w).unwrap().item().abs() > 1e-12);

    let wrong = s.graph.constant(Tensor::zeros(&[1, 8, 8, 16]));
    assert!(dec.forward(&mut s, xv, Some(wrong)).is_err());
    assert!(dec.forward(&mut s, xv, None).is_err());
    let plain = DecoderBlock::new("p", 8, 0.5, false).unwrap();
    assert!(plain.forward(&mut s, xv, Some(sv)).is_err());

    state.param_mut(dec.skip_weight.as_deref().unwrap()).unwrap().data_mut()[0] = 0.0;
    let run = |skip: Tensor| {
        let mut s = session(&state, Mode::Train, false);
        let xv = s.graph.constant(x.clone());
        let sv = s.graph.constant(skip);
        let y = dec.forward(&mut s, xv, Some(sv)).unwrap();
        s.graph.value(y).clone()
    };
    assert_eq!(run(skip.clone()).data(), run(randn(&[1, 8, 4, 8], 99)).data());
}

#[test]
fn forward_shapes_and_extent_check() {
    let config = ModelConfig {
        num_classes: 5,
        ..ModelConfig::default()
    }
    .with_extent(64, 128);
    let net = Network::new(config).unwrap();
    let state = net.init(0);
    let mut s = net.session(&state, Mode::Train, false);
    let x = s.graph.constant(uniform_image(2, 64, 128, 1));
    let out = net.forward(&mut s, x).unwrap();
    assert_eq!(s.graph.shape(out.logits), &[2, 5, 64, 128]);
    assert_eq!(s.graph.shape(out.depth), &[2, 1, 64, 128]);
    let heights: Vec<usize> = out.decoder.iter().map(|&d| s.graph.shape(d)[2]).collect();
    assert_eq!(heights, vec![2, 4, 8, 16, 32, 64]);
    let skips: Vec<usize> = out.skips.iter().map(|&d| s.graph.shape(d)[2]).collect();
    assert_eq!(skips, vec![16, 8, 4, 2]);
    assert!(s.graph.value(out.depth).data().iter().all(|&v| v >= 0.0));

    let wrong = s.graph.constant(uniform_image(1, 32, 128, 2));
    assert!(net.forward(&mut s, wrong).is_err());
    assert!(Network::new(ModelConfig::default().with_extent(64, 64)).is_err());
    assert!(Network::new(ModelConfig::default().with_extent(96, 192)).is_err());
}

#[test]
fn depth_is_nonnegative_for_any_parameters() {
    let net = Network::new(tiny_config()).unwrap();
    for seed in 0..3 {
        let mut state = net.init(seed);
        // push the output bias strongly negative
        state.param_mut(&net.depth_branch().out_bias_name()).unwrap().data_mut()[0] = -0.5;
        let (_, depth) = net.predict(&state, &uniform_image(1, 64, 128, seed)).unwrap();
        assert!(depth.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn zero_fusion_gives_constant_logit_maps() {
    let net = Network::new(tiny_config()).unwrap();
    let mut state = net.init(3);
    let branch = net.semantic_branch();
    for i in 0..branch.inputs() {
        state.param_mut(&branch.fusion_name(i)).unwrap().data_mut()[0] = 0.0;
    }
    let (logits, _) = net.predict(&state, &uniform_image(2, 64, 128, 4)).unwrap();
    let [b, c, h, w] = logits.dims4("t").unwrap();
    for plane in 0..b * c {
        let p = &logits.data()[plane * h * w..(plane + 1) * h * w];
        assert!(p.iter().all(|&v| v == p[0]));
    }
}

#[test]
fn gradients_reach_every_parameter() {
    let net = Network::new(tiny_config()).unwrap();
    let state = net.init(5);
    let mut s = net.session(&state, Mode::Train, true);
    let x = s.graph.constant(uniform_image(2, 64, 128, 6));
    let out = net.forward(&mut s, x).unwrap();
    let a = probe(&mut s, out.logits, 7);
    let b = probe(&mut s, out.depth, 8);
    let l = s.graph.add(a, b).unwrap();
    s.graph.backward(l).unwrap();
    let grads = s.gradients();
    let missing: Vec<&String> = state
        .params
        .keys()
        .filter(|k| !grads.get(*k).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)))
        .collect();
    assert!(missing.is_empty(), "no gradient for {missing:?}");
    assert!(state.params.keys().any(|k| k.starts_with("extractor.")));
    for i in 0..5 {
        assert!(grads.contains_key(&net.semantic_branch().fusion_name(i)));
    }
}

#[test]
fn network_parameters_match_finite_differences() {
    let net = Network::new(tiny_config()).unwrap();
    let state = net.init(11);
    let x = uniform_image(2, 64, 128, 12);
    let names: Vec<String> = [
        "extractor.0.down.weight",
        "extractor.3.res_a.weight",
        "encoder.1.fb.spectral.conv_freq.weight",
        "encoder.2.wconv.conv2.weight",
        "decoder.0.w_skip",
        "decoder.3.fb.conv_gl.weight",
        "decoder.5.fb.bn_g.weight",
        "semantic.fusion.2",
        "semantic.lateral.4.weight",
        "depth.lateral.0.weight",
        "depth.act_refine.slope",
        "depth.out.bias",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for n in &names {
        assert!(state.params.contains_key(n), "{n}");
    }
    // ~10⁵ activations: a smaller step keeps seam crossings rare
    let opts = GradCheck {
        step: 1e-6,
        max_entries: Some(3),
        ..Default::default()
    };
    let r = check_params(&state, &names, &opts, |st, tr| net.session(st, Mode::Train, tr), |s| {
        let xv = s.graph.constant(x.clone());
        let out = net.forward(s, xv)?;
        let a = probe(s, out.logits, 13);
        let b = probe(s, out.depth, 14);
        s.graph.add(a, b)
    })
    .unwrap();
    for (n, c) in names.iter().zip(&r) {
        assert!(c.relative_error() < 1e-4, "{n}: {}", c.relative_error());
    }
    assert_few_kinks(&r);
}

#[test]
fn branches_match_finite_differences() {
    let net = Network::new(tiny_config()).unwrap();
    let state = net.init(15);
    // small maps keep ReLU seam crossings rare
    let feats = [randn(&[2, 8, 2, 4], 16), randn(&[2, 8, 4, 8], 17), randn(&[2, 8, 8, 16], 18)];
    let branch = net.depth_branch();
    let names: Vec<String> = state.names_with_prefix("depth.").cloned().collect();
    let opts = GradCheck {
        max_entries: Some(6),
        ..Default::default()
    };
    let r = check_params(&state, &names, &opts, |st, tr| net.session(st, Mode::Train, tr), |s| {
        let fs: Vec<_> = feats.iter().map(|f| s.graph.constant(f.clone())).collect();
        let y = branch.forward(s, &fs)?;
        Ok(probe(s, y, 19))
    })
    .unwrap();
    for (n, c) in names.iter().zip(&r) {
        assert!(c.relative_error() < 1e-4, "{n}: {}", c.relative_error());
    }
    assert_few_kinks(&r);
    let mut s = net.session(&state, Mode::Train, false);
    let f = s.graph.constant(feats[0].clone());
    assert!(branch.forward(&mut s, &[f]).is_err());
}

#[test]
fn longitude_shift_equivariance() {
    for padding in [Padding::Circular, Padding::CircularHReplicateV] {
        let config = ModelConfig {
            padding,
            ..tiny_config()
        };
        let net = Network::new(config).unwrap();
        let mut state = net.init(20);
        // non-trivial running statistics for evaluation-mode batch norm
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for t in state.buffers.values_mut() {
            *t = Tensor::uniform(t.shape(), 0.5, 1.5, &mut rng);
        }
        // A 64-column shift multiplies every spectrum by ±1 per column
        // frequency. Real-linear maps commute with that sign flip; PReLU and
        // batch-norm offsets on the real/imaginary parts do not, so the test
        // network keeps its frequency-domain stage linear and odd.
        for (k, t) in state.params.iter_mut().chain(state.buffers.iter_mut()) {
            if k.ends_with("act_freq.slope") {
                t.data_mut().fill(1.0);
            }
            if k.ends_with("bn_freq.bias") || k.ends_with("bn_freq.running_mean") {
                t.data_mut().fill(0.0);
            }
        }
        let x = uniform_image(1, 64, 128, 22);
        // a full cell at the coarsest scale is 64 columns
        let k = 64;
        let (l0, d0) = net.predict(&state, &x).unwrap();
        let (l1, d1) = net.predict(&state, &x.roll_width(k).unwrap()).unwrap();
        for (a, b) in [(l0.roll_width(k).unwrap(), l1), (d0.roll_width(k).unwrap(), d1)] {
            let err = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{padding:?}: {err}");
        }
    }
}

#[test]
fn forward_is_deterministic_and_seeds_are_reproducible() {
    let net = Network::new(tiny_config()).unwrap();
    let a = net.init(30);
    assert_eq!(a, net.init(30));
    assert_ne!(a, net.init(31));
    let x = uniform_image(2, 64, 128, 31);
    let (l0, d0) = net.predict(&a, &x).unwrap();
    let (l1, d1) = net.predict(&a, &x).unwrap();
    assert_eq!(l0.data(), l1.data());
    assert_eq!(d0.data(), d1.data());
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let config = tiny_config();
    let net = Network::new(config.clone()).unwrap();
    let mut state = net.init(40);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for t in state.buffers.values_mut() {
        *t = Tensor::uniform(t.shape(), 0.5, 1.5, &mut rng);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fdsn");
    checkpoint::save(&path, &config, &state).unwrap();
    let (c2, s2) = checkpoint::load(&path).unwrap();
    assert_eq!(c2, config);
    assert_eq!(s2, state);
    for (k, v) in &state.params {
        let bits: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
        let back: Vec<u64> = s2.params[k].data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, back);
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"FDSN");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::from_bytes(&bad).is_err());

    let x = uniform_image(1, 64, 128, 42);
    let (l0, d0) = net.predict(&state, &x).unwrap();
    let (l1, d1) = Network::new(c2).unwrap().predict(&s2, &x).unwrap();
    assert_eq!(l0.data(), l1.data());
    assert_eq!(d0.data(), d1.data());
}



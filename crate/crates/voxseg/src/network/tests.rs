use super::*;
use crate::gradcheck;
use crate::rng::SplitMix64;

fn rand_vec(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

/// Tiny single-module config for unit-level checks.
fn micro_cfg(channels: usize) -> ModelConfig {
    ModelConfig {
        in_channels: channels,
        trunk: vec![TrunkLayer::Conv { out_channels: channels, stride: 1 }, TrunkLayer::ScaVoxRes],
        taps: vec![TapSpec { after_layer: 1, chain: vec![] }],
        n_classes: 2,
        sca: ScaConfig { reduction: 2, omega_init: 0.0, attention_limit: 4096 },
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

fn module_params(channels: usize, seed: u64, omega: f64) -> ModelParams<f64> {
    // Build just the parameters an SCA-VoxRes block needs, under "trunk01".
    let mut rng = SplitMix64::derive(seed, 1);
    let mut p = ModelParams::empty();
    let c = channels;
    p.insert_bn("trunk01.bn1", c).unwrap();
    p.insert_conv(&mut rng, "trunk01.conv1", c, c, 3).unwrap();
    p.insert_bn("trunk01.bn2", c).unwrap();
    p.insert_conv(&mut rng, "trunk01.conv2", c, c, 3).unwrap();
    p.insert_fc(&mut rng, "trunk01.sca.fc1", c / 2, c).unwrap();
    p.insert_fc(&mut rng, "trunk01.sca.fc2", c, c / 2).unwrap();
    for proj in ["proj_a", "proj_b", "proj_c"] {
        p.insert_conv(&mut rng, &format!("trunk01.sca.{proj}"), c, c, 1).unwrap();
    }
    p.insert("trunk01.sca.omega".into(), Tensor::new(&[1], vec![omega]).unwrap(), true);
    p
}

// ───────────────────────── channel attention ─────────────────────────

#[test]
fn channel_attention_zero_weights_halve_features() {
    let c = 4;
    let mut params = module_params(c, 3, 0.0);
    for name in ["trunk01.sca.fc1.weight", "trunk01.sca.fc2.weight"] {
        let t = params.get_mut(name).unwrap();
        for v in t.data_mut() {
            *v = 0.0;
        }
    }
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    let mut rng = SplitMix64::new(5);
    let data = rand_vec(&mut rng, c * 27, -1.0, 1.0);
    let f = tape.constant(&[c, 3, 3, 3], data.clone()).unwrap();
    let out = channel_attention(&mut tape, &bound, "trunk01.sca", f).unwrap();
    for (o, x) in tape.value(out).iter().zip(&data) {
        assert!((o - 0.5 * x).abs() < 1e-12);
    }
}

#[test]
fn channel_attention_of_zero_input_is_zero() {
    let c = 4;
    let params = module_params(c, 7, 0.0);
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    let f = tape.constant(&[c, 2, 2, 2], vec![0.0; c * 8]).unwrap();
    let out = channel_attention(&mut tape, &bound, "trunk01.sca", f).unwrap();
    assert!(tape.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn channel_attention_scales_each_channel_uniformly() {
    let c = 4;
    let params = module_params(c, 11, 0.0);
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    let mut rng = SplitMix64::new(13);
    let data = rand_vec(&mut rng, c * 27, 0.2, 1.5);
    let f = tape.constant(&[c, 3, 3, 3], data.clone()).unwrap();
    let out = channel_attention(&mut tape, &bound, "trunk01.sca", f).unwrap();
    let o = tape.value(out);
    for ch in 0..c {
        let ratios: Vec<f64> =
            (0..27).map(|i| o[ch * 27 + i] / data[ch * 27 + i]).collect();
        for r in &ratios {
            assert!((r - ratios[0]).abs() < 1e-9, "ratio drift in channel {ch}");
            assert!(*r > 0.0 && *r < 1.0, "gate outside (0,1): {r}");
        }
    }
}

// ───────────────────────── spatial attention ─────────────────────────

#[test]
fn spatial_attention_with_zero_omega_is_bitwise_identity() {
    let c = 4;
    let params = module_params(c, 17, 0.0);
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    let mut rng = SplitMix64::new(19);
    let data = rand_vec(&mut rng, c * 64, -2.0, 2.0);
    let f = tape.constant(&[c, 4, 4, 4], data.clone()).unwrap();
    let out = spatial_attention(&mut tape, &bound, "trunk01.sca", f, 4096).unwrap();
    assert!(tape
        .value(out)
        .iter()
        .zip(&data)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn spatial_affinity_columns_sum_to_one() {
    let c = 4;
    let params = module_params(c, 23, 0.3);
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    let mut rng = SplitMix64::new(29);
    let data = rand_vec(&mut rng, c * 27, -1.0, 1.0);
    let f = tape.constant(&[c, 3, 3, 3], data).unwrap();
    let e = spatial_affinity(&mut tape, &bound, "trunk01.sca", f).unwrap();
    let n = 27;
    let ev = tape.value(e);
    for j in 0..n {
        let col: f64 = (0..n).map(|i| ev[i * n + j]).sum();
        assert!((col - 1.0).abs() < 1e-6, "column {j} sums to {col}");
        for i in 0..n {
            let v = ev[i * n + j];
            assert!(v > 0.0 && v < 1.0);
        }
    }
}

#[test]
fn spatial_attention_two_voxel_hand_case() {
    // C=1, N=2, projections chosen by hand:
    // F = [1, 2], A = F, B = 2F, C = F + 1, omega = 0.5.
    let mut params = ModelParams::<f64>::empty();
    let set_proj = |p: &mut ModelParams<f64>, name: &str, w: f64, b: f64| {
        p.insert(format!("sca.{name}.weight"), Tensor::new(&[1, 1, 1, 1, 1], vec![w]).unwrap(), true);
        p.insert(format!("sca.{name}.bias"), Tensor::new(&[1], vec![b]).unwrap(), true);
    };
    set_proj(&mut params, "proj_a", 1.0, 0.0);
    set_proj(&mut params, "proj_b", 2.0, 0.0);
    set_proj(&mut params, "proj_c", 1.0, 1.0);
    params.insert("sca.omega".into(), Tensor::new(&[1], vec![0.5]).unwrap(), true);

    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    let f = tape.constant(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
    let out = spatial_attention(&mut tape, &bound, "sca", f, 4096).unwrap();

    // Hand expansion: M[i][j] = B_i * A_j -> [[2,4],[4,8]];
    // E = column softmax; O_j = 0.5 * sum_i(E_ij * C_i) + F_j.
    let a = [1.0, 2.0];
    let b = [2.0, 4.0];
    let cm = [2.0, 3.0];
    let mut expected = [0.0; 2];
    for j in 0..2 {
        let m: Vec<f64> = (0..2).map(|i| b[i] * a[j]).collect();
        let mx = m[0].max(m[1]);
        let e: Vec<f64> = m.iter().map(|v| (v - mx).exp()).collect();
        let z = e[0] + e[1];
        let mixed = (e[0] / z) * cm[0] + (e[1] / z) * cm[1];
        expected[j] = 0.5 * mixed + a[j];
    }
    let got = tape.value(out);
    assert!((got[0] - expected[0]).abs() < 1e-6, "{got:?} vs {expected:?}");
    assert!((got[1] - expected[1]).abs() < 1e-6, "{got:?} vs {expected:?}");
}

#[test]
fn spatial_attention_rejects_oversized_resolution() {
    let c = 2;
    let params = module_params(c, 31, 0.1);
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    let f = tape.constant(&[c, 4, 4, 4], vec![0.0; c * 64]).unwrap();
    let err = spatial_attention(&mut tape, &bound, "trunk01.sca", f, 63).unwrap_err();
    match err {
        Error::AttentionTooLarge { n, limit } => {
            assert_eq!(n, 64);
            assert_eq!(limit, 63);
        }
        other => panic!("unexpected error {other}"),
    }
}

// ───────────────────────── SCA-VoxRes ─────────────────────────

#[test]
fn sca_voxres_with_zero_branch_is_identity() {
    let c = 4;
    let cfg = micro_cfg(c);
    let mut params = module_params(c, 37, 0.0);
    for name in ["trunk01.conv1.weight", "trunk01.conv2.weight"] {
        for v in params.get_mut(name).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    let mut rng = SplitMix64::new(41);
    let data = rand_vec(&mut rng, c * 64, -1.0, 1.0);
    let x = tape.constant(&[c, 4, 4, 4], data.clone()).unwrap();
    let out = sca_voxres_forward(&mut tape, &cfg, &params, &bound, "trunk01", x, Mode::Train)
        .unwrap();
    for (o, i) in tape.value(out.output).iter().zip(&data) {
        assert!((o - i).abs() < 1e-12);
    }
}

#[test]
fn sca_voxres_preserves_shape() {
    let c = 4;
    let cfg = micro_cfg(c);
    let params = module_params(c, 43, 0.2);
    for dims in [[4usize, 4, 4], [2, 4, 6]] {
        let mut tape = Tape::<f64>::new();
        let bound = bind_params(&mut tape, &params);
        let n = c * dims.iter().product::<usize>();
        let x = tape.constant(&[c, dims[0], dims[1], dims[2]], vec![0.3; n]).unwrap();
        let out =
            sca_voxres_forward(&mut tape, &cfg, &params, &bound, "trunk01", x, Mode::Train)
                .unwrap();
        assert_eq!(tape.shape(out.output), &[c, dims[0], dims[1], dims[2]]);
    }
}

#[test]
fn sca_voxres_gradient_matches_finite_differences() {
    let c = 4;
    let cfg = micro_cfg(c);
    let params = module_params(c, 47, 0.3);
    let mut rng = SplitMix64::new(53);
    let x0 = rand_vec(&mut rng, c * 27, -1.0, 1.0);

    // Flatten all trainable parameters into one vector for the FD harness.
    let names: Vec<String> = params.trainable().map(|(n, _)| n.clone()).collect();
    let mut theta0 = Vec::new();
    for n in &names {
        theta0.extend_from_slice(params.get(n).unwrap().data());
    }

    let run = |x: &[f64], theta: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let mut p = params.clone();
        let mut off = 0;
        for n in &names {
            let t = p.get_mut(n).unwrap();
            let len = t.numel();
            t.data_mut().copy_from_slice(&theta[off..off + len]);
            off += len;
        }
        let mut tape = Tape::<f64>::new();
        let bound = bind_params(&mut tape, &p);
        let xi = tape.param(&[c, 3, 3, 3], x.to_vec()).unwrap();
        let out = sca_voxres_forward(&mut tape, &cfg, &p, &bound, "trunk01", xi, Mode::Train)
            .unwrap();
        let sq = tape.mul(out.output, out.output).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let gx = tape.grad(xi).unwrap().to_vec();
        let mut gt = Vec::new();
        for n in &names {
            gt.extend_from_slice(tape.grad(bound[n]).unwrap());
        }
        (tape.value(loss)[0], gx, gt)
    };

    let (_, gx, gt) = run(&x0, &theta0);
    let rep_x = gradcheck::check_all(|x| run(x, &theta0).0, &x0, &gx, 1e-4, 1e-6);
    assert!(rep_x.max_rel_err <= 1e-4, "input grad: {rep_x:?}");
    // Sampled parameter components keep the test quick.
    let mut rng = SplitMix64::new(59);
    let comps: Vec<usize> = (0..120).map(|_| rng.below(theta0.len())).collect();
    let rep_t =
        gradcheck::check_components(|t| run(&x0, t).0, &theta0, &gt, &comps, 1e-4, 1e-6);
    assert!(rep_t.max_rel_err <= 1e-4, "param grad: {rep_t:?}");
}

// ───────────────────────── config validator ─────────────────────────

#[test]
fn paper_preset_reports_canonical_counts() {
    let summary = ModelConfig::paper().validate().unwrap();
    assert_eq!(summary.conv_deconv_layers, 25);
    assert_eq!(summary.sca_voxres_modules, 6);
    assert_eq!(summary.stride2_convs, 3);
    assert_eq!(summary.tap_channels, 224);
}

#[test]
fn toy_preset_shares_topology() {
    let summary = ModelConfig::toy().validate().unwrap();
    assert_eq!(summary.conv_deconv_layers, 25);
    assert_eq!(summary.sca_voxres_modules, 6);
    assert_eq!(summary.stride2_convs, 3);
    assert_eq!(summary.tap_channels, 28);
}

#[test]
fn validator_rejects_broken_tap_chain() {
    let mut cfg = ModelConfig::toy();
    cfg.taps[3].chain.pop();
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
}

#[test]
fn validator_rejects_indivisible_reduction() {
    let mut cfg = ModelConfig::toy();
    cfg.sca.reduction = 3;
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
}

// ───────────────────────── base model & head ─────────────────────────

#[test]
fn toy_base_model_output_shape() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
    let mut tape = Tape::<f32>::new();
    let bound = bind_params(&mut tape, &params);
    let p = 16;
    let x = tape.constant(&[2, p, p, p], vec![0.1; 2 * p * p * p]).unwrap();
    let out = base_model_forward(&mut tape, &cfg, &params, &bound, x, Mode::Train).unwrap();
    assert_eq!(tape.shape(out.output), &[28, p, p, p]);
}

#[test]
fn paper_base_model_yields_224_features_per_voxel() {
    let cfg = ModelConfig::paper();
    let params = ModelParams::<f32>::init(&cfg, 4).unwrap();
    let mut tape = Tape::<f32>::new();
    let bound = bind_params(&mut tape, &params);
    let p = 16;
    let x = tape.constant(&[2, p, p, p], vec![0.1; 2 * p * p * p]).unwrap();
    let out = base_model_forward(&mut tape, &cfg, &params, &bound, x, Mode::Train).unwrap();
    assert_eq!(tape.shape(out.output), &[224, p, p, p]);
}

#[test]
fn base_model_rejects_indivisible_patch() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::<f32>::init(&cfg, 5).unwrap();
    let mut tape = Tape::<f32>::new();
    let bound = bind_params(&mut tape, &params);
    let x = tape.constant(&[2, 12, 12, 12], vec![0.0; 2 * 12usize.pow(3)]).unwrap();
    assert!(base_model_forward(&mut tape, &cfg, &params, &bound, x, Mode::Train).is_err());
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::<f64>::init(&cfg, 6).unwrap();
    let (input, stem, body, r) = (2usize, 4usize, 8usize, 4usize);
    let conv = |co: usize, ci: usize, k: usize| co * ci * k * k * k + co;
    let bn = |c: usize| 4 * c; // gamma, beta, running mean, running var
    let module = |c: usize| {
        2 * bn(c)
            + 2 * conv(c, c, 3)
            + ((c / r) * c + c / r)      // fc1
            + (c * (c / r) + c)          // fc2
            + 3 * conv(c, c, 1)          // projections
            + 1                          // omega
    };
    let deconv = |ci: usize, co: usize| ci * co * 64;
    let expected =
        // stem and strided trunk convolutions with their BN layers
        conv(stem, input, 3) + bn(stem)
        + conv(stem, stem, 3) + bn(stem)
        + conv(body, stem, 3) + bn(body)
        + conv(body, body, 3) + bn(body)
        + conv(body, body, 3) + bn(body)
        + 6 * module(body)
        // taps: 1, 1, 2, 3 deconvolutions with BN each
        + deconv(body, stem) + bn(stem)
        + deconv(body, body) + bn(body)
        + deconv(body, body) + bn(body) + deconv(body, body) + bn(body)
        + deconv(body, body) + bn(body) + deconv(body, body) + bn(body) + deconv(body, body) + bn(body)
        // head: 1x1x1 over the 28-channel concatenation
        + conv(2, 28, 1);
    assert_eq!(params.scalar_count(), expected);
}

#[test]
fn segmentation_head_probabilities_sum_to_one() {
    let mut params = ModelParams::<f64>::empty();
    let mut rng = SplitMix64::new(61);
    params.insert_conv(&mut rng, "head", 2, 3, 1).unwrap();
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    let f = tape.constant(&[3, 2, 2, 2], rand_vec(&mut rng, 24, -1.0, 1.0)).unwrap();
    let probs = segmentation_head(&mut tape, &bound, f).unwrap();
    let v = tape.value(probs);
    for i in 0..8 {
        assert!((v[i] + v[8 + i] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn segmentation_head_zero_weights_give_uniform() {
    let mut params = ModelParams::<f64>::empty();
    params.insert("head.weight".into(), Tensor::zeros(&[2, 3, 1, 1, 1]), true);
    params.insert("head.bias".into(), Tensor::zeros(&[2]), true);
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    let mut rng = SplitMix64::new(67);
    let f = tape.constant(&[3, 2, 2, 2], rand_vec(&mut rng, 24, -1.0, 1.0)).unwrap();
    let probs = segmentation_head(&mut tape, &bound, f).unwrap();
    assert!(tape.value(probs).iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn segmentation_head_threshold_on_crafted_logits() {
    // Features are the logits themselves via an identity-selecting head.
    let mut params = ModelParams::<f64>::empty();
    let mut w = Tensor::zeros(&[2, 2, 1, 1, 1]);
    w.data_mut()[0] = 1.0; // class 0 reads feature channel 0
    w.data_mut()[3] = 1.0; // class 1 reads feature channel 1
    params.insert("head.weight".into(), w, true);
    params.insert("head.bias".into(), Tensor::zeros(&[2]), true);
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    // Lesion logits: +2 (-> p=0.88), -1 (-> p=0.27), 0 (tie -> background).
    let f = tape
        .constant(&[2, 1, 1, 3], vec![0.0, 0.0, 0.0, 2.0, -1.0, 0.0])
        .unwrap();
    let probs = segmentation_head(&mut tape, &bound, f).unwrap();
    let lesion = &tape.value(probs)[3..6];
    let mask: Vec<u8> = lesion.iter().map(|&p| (p > 0.5) as u8).collect();
    assert_eq!(mask, vec![1, 0, 0]);
}

#[test]
fn segmentation_head_rejects_wrong_feature_count() {
    let mut params = ModelParams::<f64>::empty();
    params.insert("head.weight".into(), Tensor::zeros(&[2, 4, 1, 1, 1]), true);
    params.insert("head.bias".into(), Tensor::zeros(&[2]), true);
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params);
    let f = tape.constant(&[3, 2, 2, 2], vec![0.0; 24]).unwrap();
    assert!(matches!(
        segmentation_head(&mut tape, &bound, f),
        Err(Error::ShapeMismatch { .. })
    ));
}

// ───────────────────────── two-path fusion ─────────────────────────

#[test]
fn two_path_fuses_double_the_channels() {
    let cfg = ModelConfig::toy();
    let flair = ModelParams::<f32>::init(&cfg, 8).unwrap();
    let t1 = ModelParams::<f32>::init(&cfg, 9).unwrap();
    let head = ModelParams::<f32>::init_fusion_head(&cfg, 2, 10).unwrap();
    let mut tape = Tape::<f32>::new();
    let fb = bind_params(&mut tape, &flair);
    let tb = bind_params(&mut tape, &t1);
    let hb = bind_params(&mut tape, &head);
    let p = 8;
    let xf = tape.constant(&[2, p, p, p], vec![0.2; 2 * p * p * p]).unwrap();
    let xt = tape.constant(&[2, p, p, p], vec![-0.1; 2 * p * p * p]).unwrap();
    let out = two_path_forward(
        &mut tape, &cfg, &flair, &t1, &fb, &tb, &hb, xf, xt, Mode::Train,
    )
    .unwrap();
    assert_eq!(tape.shape(out.fused_features)[0], 56);
    assert_eq!(tape.shape(out.output), &[2, p, p, p]);
}

#[test]
fn two_path_paper_width_fuses_448_channels() {
    let cfg = ModelConfig::paper();
    let flair = ModelParams::<f32>::init(&cfg, 21).unwrap();
    let t1 = ModelParams::<f32>::init(&cfg, 22).unwrap();
    let head = ModelParams::<f32>::init_fusion_head(&cfg, 2, 23).unwrap();
    let mut tape = Tape::<f32>::new();
    let fb = bind_params(&mut tape, &flair);
    let tb = bind_params(&mut tape, &t1);
    let hb = bind_params(&mut tape, &head);
    let p = 8;
    let xf = tape.constant(&[2, p, p, p], vec![0.1; 2 * p * p * p]).unwrap();
    let xt = tape.constant(&[2, p, p, p], vec![0.2; 2 * p * p * p]).unwrap();
    let out = two_path_forward(
        &mut tape, &cfg, &flair, &t1, &fb, &tb, &hb, xf, xt, Mode::Train,
    )
    .unwrap();
    assert_eq!(tape.shape(out.fused_features)[0], 448);
}

#[test]
fn two_path_with_zeroed_t1_head_block_matches_single_path() {
    let cfg = ModelConfig::toy();
    let flair = ModelParams::<f32>::init(&cfg, 11).unwrap();
    let t1 = ModelParams::<f32>::init(&cfg, 12).unwrap();
    let k = cfg.tap_channels();

    // Fusion head whose T1 block is zero and whose FLAIR block equals the
    // single-path head weights.
    let single_head_w = flair.get("head.weight").unwrap().clone();
    let single_head_b = flair.get("head.bias").unwrap().clone();
    let mut head = ModelParams::<f32>::empty();
    let mut w = Tensor::zeros(&[2, 2 * k, 1, 1, 1]);
    for class in 0..2 {
        for ch in 0..k {
            w.data_mut()[class * 2 * k + ch] = single_head_w.data()[class * k + ch];
        }
    }
    head.insert("head.weight".into(), w, true);
    head.insert("head.bias".into(), single_head_b, true);

    let p = 8;
    let mut rng = SplitMix64::new(71);
    let xdata: Vec<f32> =
        (0..2 * p * p * p).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();

    let mut tape = Tape::<f32>::new();
    let fb = bind_params(&mut tape, &flair);
    let tb = bind_params(&mut tape, &t1);
    let hb = bind_params(&mut tape, &head);
    let xf = tape.constant(&[2, p, p, p], xdata.clone()).unwrap();
    let xt = tape.constant(&[2, p, p, p], vec![0.5; 2 * p * p * p]).unwrap();
    let fused =
        two_path_forward(&mut tape, &cfg, &flair, &t1, &fb, &tb, &hb, xf, xt, Mode::Train)
            .unwrap();

    let mut tape2 = Tape::<f32>::new();
    let fb2 = bind_params(&mut tape2, &flair);
    let x2 = tape2.constant(&[2, p, p, p], xdata).unwrap();
    let single = single_path_forward(&mut tape2, &cfg, &flair, &fb2, x2, Mode::Train).unwrap();

    for (a, b) in tape.value(fused.output).iter().zip(tape2.value(single.output)) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn two_path_gradients_reach_both_paths() {
    let cfg = ModelConfig::toy();
    let flair = ModelParams::<f32>::init(&cfg, 13).unwrap();
    let t1 = ModelParams::<f32>::init(&cfg, 14).unwrap();
    let head = ModelParams::<f32>::init_fusion_head(&cfg, 2, 15).unwrap();
    let mut tape = Tape::<f32>::new();
    let fb = bind_params(&mut tape, &flair);
    let tb = bind_params(&mut tape, &t1);
    let hb = bind_params(&mut tape, &head);
    let p = 8;
    let mut rng = SplitMix64::new(73);
    let xf = tape
        .constant(&[2, p, p, p], (0..2 * p * p * p).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
        .unwrap();
    let xt = tape
        .constant(&[2, p, p, p], (0..2 * p * p * p).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
        .unwrap();
    let out =
        two_path_forward(&mut tape, &cfg, &flair, &t1, &fb, &tb, &hb, xf, xt, Mode::Train)
            .unwrap();
    let sq = tape.mul(out.output, out.output).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    // Each path's single-path head is unused under fusion; everything else
    // must receive gradient, as must the fusion head itself.
    for (bound, params) in [(&fb, &flair), (&tb, &t1)] {
        for (name, _) in params.trainable().filter(|(n, _)| !n.starts_with("head.")) {
            assert!(
                tape.grad(bound[name]).is_some(),
                "no gradient reached `{name}`"
            );
        }
    }
    for (name, _) in head.trainable() {
        assert!(tape.grad(hb[name]).is_some(), "no gradient reached fusion `{name}`");
    }
}

#[test]
fn two_path_rejects_mismatched_modalities() {
    let cfg = ModelConfig::toy();
    let flair = ModelParams::<f32>::init(&cfg, 16).unwrap();
    let t1 = ModelParams::<f32>::init(&cfg, 17).unwrap();
    let head = ModelParams::<f32>::init_fusion_head(&cfg, 2, 18).unwrap();
    let mut tape = Tape::<f32>::new();
    let fb = bind_params(&mut tape, &flair);
    let tb = bind_params(&mut tape, &t1);
    let hb = bind_params(&mut tape, &head);
    let xf = tape.constant(&[2, 8, 8, 8], vec![0.0; 1024]).unwrap();
    let xt = tape.constant(&[2, 16, 16, 16], vec![0.0; 8192]).unwrap();
    assert!(two_path_forward(&mut tape, &cfg, &flair, &t1, &fb, &tb, &hb, xf, xt, Mode::Train)
        .is_err());
}

// ───────────────────────── modes & statistics ─────────────────────────

#[test]
fn eval_before_any_training_is_rejected() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::<f32>::init(&cfg, 19).unwrap();
    let mut tape = Tape::<f32>::new();
    let bound = bind_params(&mut tape, &params);
    let x = tape.constant(&[2, 8, 8, 8], vec![0.1; 1024]).unwrap();
    match base_model_forward(&mut tape, &cfg, &params, &bound, x, Mode::Eval) {
        Err(Error::UninitializedStatistics) => {}
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("eval without train-mode statistics must fail"),
    }
}

#[test]
fn bn_updates_cover_every_bn_layer_once() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::<f32>::init(&cfg, 20).unwrap();
    let mut tape = Tape::<f32>::new();
    let bound = bind_params(&mut tape, &params);
    let x = tape.constant(&[2, 8, 8, 8], vec![0.1; 1024]).unwrap();
    let out = single_path_forward(&mut tape, &cfg, &params, &bound, x, Mode::Train).unwrap();
    let bn_names: Vec<&str> = out.bn_updates.iter().map(|(n, _)| n.as_str()).collect();
    let expected = params
        .iter()
        .filter(|(n, _)| n.ends_with(".running_mean"))
        .count();
    assert_eq!(bn_names.len(), expected);
    let mut unique = bn_names.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), bn_names.len());
}

use acnet_core::backbone::{build_desk_backbone, BlockSpec, DeskBackbone, DeskBackboneSpec, FeatureExtractor};
use acnet_core::tree::*;
use acnet_core::AcnetError;
use acnet_numeric::{argmax, ConvSpec, Mode, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_backbone(seed: u64) -> DeskBackbone {
    let spec = DeskBackboneSpec {
        input_channels: 3,
        side: 16,
        blocks: vec![BlockSpec { width: 8, downsample: true }, BlockSpec { width: 8, downsample: false }],
    };
    build_desk_backbone(&spec, seed).unwrap()
}

fn small_config(height: usize, k: usize) -> TreeConfig {
    let mut channels = vec![8];
    channels.extend(std::iter::repeat_n(4, height - 1));
    TreeConfig {
        height,
        channels,
        dilations: vec![1, 2, 3],
        ..TreeConfig::desk(height, k)
    }
}

fn small_model(height: usize, seed: u64) -> TreeModel {
    build_tree(&small_config(height, 5), small_backbone(seed), seed + 1000).unwrap()
}

fn images(n: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, side, side], |_| rng.random_range(-1.0..1.0))
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn sum(t: &Tensor) -> f64 {
    t.data().iter().sum()
}

// ---- topology ----

#[test]
fn topology_counts_follow_the_height() {
    for h in 1..=6 {
        assert_eq!(node_count(h), (1 << h) - 1);
        assert_eq!(edge_count(h), (1 << h) - 2);
        assert_eq!(leaf_count(h), 1 << (h - 1));
        assert_eq!(internal_count(h), node_count(h) - leaf_count(h));
        assert_eq!(nodes(h).count(), node_count(h));
        assert_eq!(leaves(h).count(), leaf_count(h));
    }
    assert_eq!((node_count(3), edge_count(3), leaf_count(3)), (7, 6, 4));
}

#[test]
fn node_ids_round_trip_through_level_order() {
    for flat in 0..node_count(6) {
        let n = NodeId::from_flat(flat);
        assert_eq!(n.flat(), flat);
    }
    let root = NodeId::new(1, 1);
    assert_eq!(root.left(), NodeId::new(2, 1));
    assert_eq!(root.right(), NodeId::new(2, 2));
    assert_eq!(NodeId::new(2, 2).left(), NodeId::new(3, 3));
    assert_eq!(NodeId::new(2, 2).right(), NodeId::new(3, 4));
}

#[test]
fn height_three_model_has_seven_nodes() {
    let m = small_model(3, 0);
    assert_eq!(m.routers().len(), 3);
    assert_eq!(m.leaves().len(), 4);
    let edges: usize = nodes(3).skip(1).map(|n| usize::from(!m.edge(n).is_empty())).sum();
    assert_eq!(edges, 6);
}

#[test]
fn height_one_degenerates_to_a_single_leaf() {
    let mut m = small_model(1, 3);
    assert!(m.routers().is_empty());
    assert_eq!(m.leaves().len(), 1);
    let p = m.forward(&images(3, 16, 1), Mode::Train).unwrap();
    assert!(p.gates.is_empty());
    assert_eq!(p.leaf_probs.len(), 1);
    assert_eq!(p.combined, p.leaf_probs[0]);
}

#[test]
fn asymmetric_edges_hold_two_left_and_one_right_transformer() {
    let m = small_model(2, 0);
    assert_eq!(m.edge(NodeId::new(2, 1)).len(), 2);
    assert_eq!(m.edge(NodeId::new(2, 2)).len(), 1);
    let sym = TreeConfig {
        edge_mode: EdgeMode::Symmetric,
        ..small_config(3, 5)
    };
    let m = build_tree(&sym, small_backbone(0), 1).unwrap();
    for n in nodes(3).skip(1) {
        assert_eq!(m.edge(n).len(), 1, "{n}");
    }
}

#[test]
fn every_parameter_has_a_unique_name() {
    let m = small_model(3, 0);
    let mut names: Vec<&str> = m.stores().iter().flat_map(|s| s.params().iter().map(|p| p.name.as_str())).collect();
    let total = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), total);
}

#[test]
fn building_is_deterministic_given_the_seed() {
    let a = small_model(3, 9);
    let b = small_model(3, 9);
    let c = small_model(3, 10);
    let values = |m: &TreeModel| -> Vec<Tensor> { m.stores().iter().flat_map(|s| s.params().iter().map(|p| p.value.clone())).collect() };
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}

#[test]
fn inconsistent_channel_chain_is_a_config_error() {
    let mut cfg = small_config(2, 3);
    cfg.channels[0] = 16;
    assert!(matches!(build_tree(&cfg, small_backbone(0), 0), Err(AcnetError::Config(_))));
    cfg.channels = vec![8];
    assert!(matches!(build_tree(&cfg, small_backbone(0), 0), Err(AcnetError::Config(_))));
}

#[test]
fn rates_that_leave_only_the_center_tap_are_config_errors() {
    let cfg = TreeConfig {
        dilations: vec![1, 8],
        ..small_config(2, 3)
    };
    assert!(matches!(build_tree(&cfg, small_backbone(0), 0), Err(AcnetError::Config(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TreeConfig { height: 0, ..small_config(1, 3) },
        TreeConfig { dilations: vec![], ..small_config(2, 3) },
        TreeConfig { dilations: vec![2, 2], ..small_config(2, 3) },
        TreeConfig { dilations: vec![0, 1], ..small_config(2, 3) },
        TreeConfig { num_classes: 0, ..small_config(2, 3) },
        TreeConfig { channels: vec![8, 0], ..small_config(2, 3) },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

// ---- routing ----

fn routing_unit(channels: usize, pool: Pooling, gc: bool, seed: u64) -> (ParamStore, RoutingUnit) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = RoutingUnit::new(&mut store, "r", channels, pool, gc, &mut rng).unwrap();
    (store, unit)
}

#[test]
fn zero_gate_head_gives_even_split() {
    let (mut store, unit) = routing_unit(4, Pooling::Gap, true, 0);
    for id in [unit.fc.weight, unit.fc.bias] {
        let p = store.param_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[3, 4, 5, 5], &mut rng));
    let (g, _) = unit.forward(&store, &mut tape, x).unwrap();
    assert_eq!(tape.value(g).data(), &[0.5; 3]);
}

#[test]
fn without_gc_the_passed_map_is_the_pointwise_conv() {
    let (store, unit) = routing_unit(4, Pooling::Gmp, false, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 4, 3, 3], &mut rng));
    let (_, passed) = unit.forward(&store, &mut tape, x).unwrap();
    let direct = unit.conv.forward(&store, &mut tape, x).unwrap();
    assert_eq!(tape.value(passed), tape.value(direct));
}

#[test]
fn gates_lie_in_the_unit_interval() {
    for (pool, gc) in [(Pooling::Gap, true), (Pooling::Gmp, false), (Pooling::Gmp, true)] {
        let (store, unit) = routing_unit(4, pool, gc, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[6, 4, 4, 4], |_| rng.random_range(-20.0..20.0)));
        let (g, _) = unit.forward(&store, &mut tape, x).unwrap();
        assert!(tape.value(g).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

/// Layer-by-layer scalar evaluation of the gate: 1×1 conv, global average,
/// signed square root, L2 normalization, linear, sigmoid.
#[test]
fn gate_matches_scalar_composition_oracle() {
    let (mut store, unit) = routing_unit(2, Pooling::Gap, false, 0);
    let w = [[0.3, -0.7], [0.5, 0.2]];
    let b = [0.1, -0.2];
    let fw = [0.8, -0.6];
    let fb = 0.05;
    store.param_mut(unit.conv.weight).value = Tensor::from_fn(&[2, 2, 1, 1], |i| w[i / 2][i % 2]);
    store.param_mut(unit.conv.bias.unwrap()).value = Tensor::from_fn(&[2], |i| b[i]);
    store.param_mut(unit.fc.weight).value = Tensor::from_fn(&[2, 1], |i| fw[i]);
    store.param_mut(unit.fc.bias).value = Tensor::scalar(fb).reshape(&[1]).unwrap();
    let input = [[[1.0, -2.0], [0.5, 3.0]], [[-1.5, 0.25], [2.0, -0.75]]];
    let x = Tensor::from_fn(&[1, 2, 2, 2], |i| input[i / 4][(i / 2) % 2][i % 2]);

    let mut pooled = [0.0; 2];
    for (o, p) in pooled.iter_mut().enumerate() {
        for y in 0..2 {
            for xx in 0..2 {
                *p += w[o][0] * input[0][y][xx] + w[o][1] * input[1][y][xx] + b[o];
            }
        }
        *p /= 4.0;
    }
    let s: Vec<f64> = pooled.iter().map(|v| v.signum() * v.abs().sqrt()).collect();
    let norm = (s[0] * s[0] + s[1] * s[1]).sqrt();
    let logit = fw[0] * s[0] / norm + fw[1] * s[1] / norm + fb;
    let expected = 1.0 / (1.0 + (-logit).exp());

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (g, _) = unit.forward(&store, &mut tape, xv).unwrap();
    assert!((tape.value(g).item() - expected).abs() <= 1e-9);
}

// ---- attention transformers ----

fn transformer(rates: Option<&[usize]>, attention: bool, seed: u64) -> (ParamStore, AttentionTransformer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = AttentionTransformer::new(&mut store, "t", 4, 3, rates, attention, &mut rng).unwrap();
    (store, t)
}

#[test]
fn transformer_preserves_spatial_shape() {
    for (rates, att) in [(Some(&[1, 2, 3][..]), true), (None, true), (Some(&[1, 2][..]), false), (None, false)] {
        let (mut store, t) = transformer(rates, att, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[2, 4, 6, 5], &mut rng));
        let out = t.forward_detailed(&mut store, &mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(out.output), &[2, 3, 6, 5]);
        if let Some(s) = out.scales {
            assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        } else {
            assert_eq!(out.output, out.fused);
        }
    }
}

#[test]
fn zero_attention_head_halves_every_channel() {
    let (mut store, t) = transformer(Some(&[1, 2]), true, 4);
    let att = t.attention.as_ref().unwrap();
    for id in [att.fc2.weight, att.fc2.bias] {
        let p = store.param_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 4, 4, 4], &mut rng));
    let out = t.forward_detailed(&mut store, &mut tape, x, Mode::Train).unwrap();
    let fused = tape.value(out.fused).clone();
    let y = tape.value(out.output);
    assert!(y.data().iter().zip(fused.data()).all(|(a, b)| *a == 0.5 * b));
}

#[test]
fn identical_branches_at_rate_one_give_identical_outputs() {
    let (mut store, mut t) = transformer(Some(&[1, 2, 3, 4]), true, 6);
    let kernel = store.param(t.branches[0].weight).value.clone();
    let bias = store.param(t.branches[0].bias.unwrap()).value.clone();
    for b in &mut t.branches {
        b.spec = ConvSpec::new(4, 3, 3, 1);
        store.param_mut(b.weight).value = kernel.clone();
        store.param_mut(b.bias.unwrap()).value = bias.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[1, 4, 5, 5], &mut rng));
    let outs: Vec<Tensor> = t.branches.iter().map(|b| tape_out(b.forward(&store, &mut tape, x).unwrap(), &tape)).collect();
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

fn tape_out(v: acnet_numeric::Var, tape: &Tape) -> Tensor {
    tape.value(v).clone()
}

/// Zero-padded cross-correlation by direct summation.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let mut out = Tensor::zeros(&[n, o, h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k]);
    let (ho, wo) = (out.shape()[2], out.shape()[3]);
    for s in 0..n {
        for oc in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = ((y + ky) as isize - pad as isize, (xx + kx) as isize - pad as isize);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.get(&[oc, ic, ky, kx]) * x.get(&[s, ic, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[s, oc, y, xx], acc);
                }
            }
        }
    }
    out
}

#[test]
fn without_aspp_the_edge_is_a_single_convolution() {
    let (mut store, t) = transformer(None, false, 8);
    assert_eq!(t.branches.len(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xt = random(&[2, 4, 5, 6], &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(xt.clone());
    let y = t.forward(&mut store, &mut tape, x, Mode::Train).unwrap();
    let w = &store.param(t.branches[0].weight).value;
    let b = &store.param(t.branches[0].bias.unwrap()).value;
    let expected = conv_oracle(&xt, w, b, 1);
    let diff = tape.value(y).data().iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-10, "{diff}");
}

// ---- leaves ----

fn leaf(k: usize, seed: u64) -> (ParamStore, LeafHead) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = LeafHead::new(&mut store, "leaf", 3, k, &mut rng).unwrap();
    (store, head)
}

#[test]
fn zero_leaf_weights_predict_uniformly() {
    let (mut store, head) = leaf(5, 0);
    for id in [head.conv.weight, head.conv.bias.unwrap(), head.fc.weight, head.fc.bias] {
        let p = store.param_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[3, 3, 4, 4], &mut rng));
    let (p, _) = head.forward(&mut store, &mut tape, x, Mode::Train).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn leaf_rows_are_distributions() {
    for seed in 0..10 {
        let (mut store, head) = leaf(7, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[4, 3, 3, 3], |_| rng.random_range(-5.0..5.0)));
        let (p, _) = head.forward(&mut store, &mut tape, x, Mode::Train).unwrap();
        for row in tape.value(p).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

/// Eval-mode batch norm with set statistics, 1×1 conv, global max,
/// signed square root, L2 normalization, linear, softmax — all scalar.
#[test]
fn leaf_matches_scalar_composition_oracle() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = LeafHead::new(&mut store, "leaf", 2, 3, &mut rng).unwrap();
    let (gamma, beta) = ([1.5, 0.5], [0.1, -0.3]);
    let (mean, var) = ([0.2, -0.1], [2.0, 0.5]);
    let w = [[0.4, -0.9], [0.7, 0.3]];
    let cb = [0.05, -0.15];
    let fw = [[0.2, -0.4, 0.6], [-0.8, 0.1, 0.5]];
    let fb = [0.0, 0.3, -0.2];
    store.param_mut(head.bn.gamma).value = Tensor::from_fn(&[2], |i| gamma[i]);
    store.param_mut(head.bn.beta).value = Tensor::from_fn(&[2], |i| beta[i]);
    {
        let st = store.bn_state_mut(head.bn.state);
        st.running_mean = mean.to_vec();
        st.running_var = var.to_vec();
        st.updates = 1;
    }
    store.param_mut(head.conv.weight).value = Tensor::from_fn(&[2, 2, 1, 1], |i| w[i / 2][i % 2]);
    store.param_mut(head.conv.bias.unwrap()).value = Tensor::from_fn(&[2], |i| cb[i]);
    store.param_mut(head.fc.weight).value = Tensor::from_fn(&[2, 3], |i| fw[i / 3][i % 3]);
    store.param_mut(head.fc.bias).value = Tensor::from_fn(&[3], |i| fb[i]);
    let input = [[1.0, -2.0, 0.5, 3.0], [-1.5, 0.25, 2.0, -0.75]];
    let x = Tensor::from_fn(&[1, 2, 2, 2], |i| input[i / 4][i % 4]);

    let bn: Vec<Vec<f64>> = (0..2)
        .map(|c| input[c].iter().map(|v| gamma[c] * (v - mean[c]) / (var[c] + 1e-5f64).sqrt() + beta[c]).collect())
        .collect();
    let pooled: Vec<f64> = (0..2)
        .map(|o| (0..4).map(|p| w[o][0] * bn[0][p] + w[o][1] * bn[1][p] + cb[o]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let s: Vec<f64> = pooled.iter().map(|v| v.signum() * v.abs().sqrt()).collect();
    let norm = (s[0] * s[0] + s[1] * s[1]).sqrt();
    let logits: Vec<f64> = (0..3).map(|k| s[0] / norm * fw[0][k] + s[1] / norm * fw[1][k] + fb[k]).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (p, _) = head.forward(&mut store, &mut tape, xv, Mode::Eval).unwrap();
    for k in 0..3 {
        let expected = (logits[k] - m).exp() / z;
        assert!((tape.value(p).data()[k] - expected).abs() <= 1e-9);
    }
}

// ---- path probabilities and aggregation ----

fn gates(values: &[f64]) -> Vec<Tensor> {
    values.iter().map(|&g| Tensor::full(&[1], g)).collect()
}

fn leaf_r(h: usize, r: &[Tensor]) -> Vec<f64> {
    leaf_slice(h, r).iter().map(|t| t.item()).collect()
}

#[test]
fn even_gates_split_mass_evenly() {
    let r = accumulate_path_probabilities(3, 1, &gates(&[0.5; 3])).unwrap();
    assert_eq!(leaf_r(3, &r), vec![0.25; 4]);
}

#[test]
fn height_two_leaves_follow_the_root_gate() {
    let r = accumulate_path_probabilities(2, 1, &gates(&[0.7])).unwrap();
    assert_eq!(r[0].item(), 1.0);
    let l = leaf_r(2, &r);
    assert!((l[0] - 0.7).abs() < 1e-15 && (l[1] - 0.3).abs() < 1e-15);
}

#[test]
fn height_three_leaves_match_path_products() {
    let r = accumulate_path_probabilities(3, 1, &gates(&[0.6, 0.8, 0.3])).unwrap();
    for (got, want) in leaf_r(3, &r).iter().zip([0.48, 0.12, 0.12, 0.28]) {
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

/// Product of gate factors along the root-to-leaf bit path, enumerated
/// independently of the level-order recursion.
fn enumerate_paths(h: usize, g: &[f64]) -> Vec<f64> {
    (0..leaf_count(h))
        .map(|leaf| {
            let mut p = 1.0;
            let mut node = 0usize;
            for depth in (0..h - 1).rev() {
                let right = (leaf >> depth) & 1 == 1;
                p *= if right { 1.0 - g[node] } else { g[node] };
                node = 2 * node + 1 + usize::from(right);
            }
            p
        })
        .collect()
}

#[test]
fn accumulation_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for h in 1..=5 {
        for _ in 0..50 {
            let g: Vec<f64> = (0..internal_count(h)).map(|_| rng.random_range(0.0..=1.0)).collect();
            let r = accumulate_path_probabilities(h, 1, &gates(&g)).unwrap();
            for (a, b) in leaf_r(h, &r).iter().zip(enumerate_paths(h, &g)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn out_of_range_gate_is_a_numeric_error() {
    for bad in [1.01, -0.5, f64::NAN] {
        let e = accumulate_path_probabilities(2, 1, &gates(&[bad])).unwrap_err();
        assert!(matches!(e, AcnetError::Numeric(_)), "{bad}: {e}");
    }
    assert!(accumulate_path_probabilities(2, 1, &gates(&[1.0 + 1e-7])).is_ok());
}

#[test]
fn aggregation_is_the_weighted_sum() {
    let p = [Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap()];
    let r = [Tensor::full(&[1], 0.7), Tensor::full(&[1], 0.3)];
    let c = aggregate(&p, &r).unwrap();
    assert!((c.data()[0] - 0.7).abs() < 1e-15 && (c.data()[1] - 0.3).abs() < 1e-15);
}

#[test]
fn single_leaf_aggregation_is_the_identity() {
    let p = Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3]).unwrap();
    let c = aggregate(std::slice::from_ref(&p), &[Tensor::ones(&[2])]).unwrap();
    assert_eq!(c, p);
}

#[test]
fn leaf_mass_violation_is_a_numeric_error() {
    let p = [Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap(), Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap()];
    let r = [Tensor::full(&[1], 0.7), Tensor::full(&[1], 0.7)];
    assert!(matches!(aggregate(&p, &r), Err(AcnetError::Numeric(_))));
}

fn random_distribution(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::from_fn(&[n, k], |_| rng.random_range(0.0..1.0));
    for row in t.data_mut().chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

#[test]
fn random_aggregates_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for draw in 0..1000 {
        let h = 1 + draw % 5;
        let g: Vec<Tensor> = (0..internal_count(h)).map(|_| Tensor::from_fn(&[2], |_| rng.random_range(0.0..=1.0))).collect();
        let r = accumulate_path_probabilities(h, 2, &g).unwrap();
        let p: Vec<Tensor> = (0..leaf_count(h)).map(|_| random_distribution(2, 6, &mut rng)).collect();
        let c = aggregate(&p, leaf_slice(h, &r)).unwrap();
        for row in c.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

// ---- full forward ----

#[test]
fn random_height_three_model_is_normalized() {
    let mut m = small_model(3, 4);
    let p = m.forward(&images(5, 16, 2), Mode::Train).unwrap();
    let leaf_mass: Vec<f64> = (0..5).map(|n| p.leaf_path_probs().iter().map(|r| r.data()[n]).sum()).collect();
    assert!(leaf_mass.iter().all(|s| (s - 1.0).abs() <= 1e-6));
    for row in p.combined.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    assert_eq!(p.predicted(), (0..5).map(|n| argmax(p.combined.row(n))).collect::<Vec<_>>());
}

#[test]
fn argmax_ties_go_to_the_lowest_class() {
    assert_eq!(argmax(&[0.25, 0.5, 0.5, 0.25]), 1);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
}

#[test]
fn duplicated_samples_get_identical_rows_in_eval_mode() {
    let mut m = small_model(3, 5);
    m.forward(&images(4, 16, 3), Mode::Train).unwrap();
    let one = images(1, 16, 4);
    let two = Tensor::stack(&[one.index_outer(0), one.index_outer(0)]).unwrap();
    let p = m.predict(&two).unwrap();
    let (a, b) = (p.sample(0), p.sample(1));
    assert_eq!(a, b);
    assert_eq!(a, m.predict(&one).unwrap());
}

#[test]
fn eval_before_any_training_step_is_an_error() {
    let mut m = small_model(2, 0);
    assert!(m.predict(&images(1, 16, 0)).is_err());
}

#[test]
fn wrong_input_shape_is_an_error() {
    let mut m = small_model(2, 0);
    assert!(m.forward(&images(1, 12, 0), Mode::Train).is_err());
}

#[test]
fn repeated_forward_is_bit_deterministic() {
    let mut m = small_model(4, 6);
    m.forward(&images(4, 16, 3), Mode::Train).unwrap();
    let x = images(3, 16, 7);
    let a = m.predict(&x).unwrap();
    let b = m.predict(&x).unwrap();
    assert_eq!(a, b);
    let c = aggregate(&a.leaf_probs, a.leaf_path_probs()).unwrap();
    assert_eq!(c, aggregate(&a.leaf_probs, a.leaf_path_probs()).unwrap());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let reports = acnet_core::train::model_gradcheck(0).unwrap();
    assert!(reports.len() > 10);
    for r in &reports {
        assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_error);
    }
    let m = acnet_core::train::gradcheck_model(0).unwrap();
    assert_eq!(m.config().height, 2);
    assert_eq!(m.backbone().output_shape(), (4, 4, 4));
    assert_eq!(m.config().num_classes, 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn siblings_sum_to_their_parent(h in 1usize..=5, seed in 0u64..1000) {
        let mut m = small_model(h, seed);
        let p = m.forward(&images(3, 16, seed), Mode::Train).unwrap();
        for i in 0..internal_count(h) {
            let node = NodeId::from_flat(i);
            let (l, r) = (&p.path_probs[node.left().flat()], &p.path_probs[node.right().flat()]);
            for n in 0..3 {
                prop_assert!((l.data()[n] + r.data()[n] - p.path_probs[i].data()[n]).abs() <= 1e-9);
            }
        }
        let total: f64 = p.leaf_path_probs().iter().map(sum).sum();
        prop_assert!((total - 3.0).abs() <= 3e-6);
        for lp in &p.leaf_probs {
            for row in lp.data().chunks(5) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn any_gates_in_range_give_unit_leaf_mass(g in prop::collection::vec(0.0f64..=1.0, 15)) {
        let r = accumulate_path_probabilities(5, 1, &gates(&g)).unwrap();
        let s: f64 = leaf_r(5, &r).iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
    }
}

use acnet_core::backbone::{build_desk_backbone, BlockSpec, DeskBackboneSpec, FeatureExtractor};
use acnet_core::data::{generate_synthetic, AugmentPolicy, Dataset, NormStats, SyntheticSpec};
use acnet_core::train::*;
use acnet_core::tree::{accumulate_path_probabilities, build_tree, leaf_count, Prediction, TreeConfig, TreeModel};
use acnet_core::AcnetError;
use acnet_numeric::init::xavier_bound;
use acnet_numeric::{Linear, Mode, ParamKind, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- losses ----

fn uniform(n: usize, k: usize) -> Tensor {
    Tensor::full(&[n, k], 1.0 / k as f64)
}

#[test]
fn uniform_nll_is_log_k() {
    let l = nll(&uniform(3, 200), &[0, 17, 199]).unwrap();
    assert!((l - 200f64.ln()).abs() < 1e-12);
    assert!((l - 5.2983).abs() < 1e-4);
}

#[test]
fn confident_correct_prediction_costs_nothing() {
    let d = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    assert!(nll(&d, &[1, 0]).unwrap() <= 1e-9);
}

#[test]
fn coin_flip_nll_is_log_two() {
    let d = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    assert!((nll(&d, &[0]).unwrap() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn zero_probability_is_clamped() {
    let d = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    assert!((nll(&d, &[1]).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
}

#[test]
fn out_of_range_label_is_an_input_error() {
    assert!(matches!(nll(&uniform(2, 3), &[0, 3]), Err(AcnetError::Input(_))));
    assert!(matches!(nll(&uniform(2, 3), &[0]), Err(AcnetError::Input(_))));
}

fn prediction(h: usize, gates: Vec<Tensor>, leaf_probs: Vec<Tensor>) -> Prediction {
    let n = leaf_probs[0].shape()[0];
    let path_probs = accumulate_path_probabilities(h, n, &gates).unwrap();
    let combined = acnet_core::tree::aggregate(&leaf_probs, acnet_core::tree::leaf_slice(h, &path_probs)).unwrap();
    Prediction {
        height: h,
        gates,
        path_probs,
        leaf_probs,
        combined,
    }
}

fn random_distribution(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::from_fn(&[n, k], |_| rng.random_range(0.01..1.0));
    for row in t.data_mut().chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

#[test]
fn single_leaf_loss_counts_the_leaf_twice() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = random_distribution(4, 5, &mut rng);
    let labels = [0, 4, 2, 2];
    let pred = prediction(1, vec![], vec![p.clone()]);
    assert_eq!(total_loss(&pred, &labels).unwrap(), 2.0 * nll(&p, &labels).unwrap());
}

#[test]
fn uniform_leaves_cost_three_log_four_whatever_the_gates() {
    for g in [0.0, 0.2, 0.5, 0.93, 1.0] {
        let pred = prediction(2, vec![Tensor::full(&[2], g)], vec![uniform(2, 4), uniform(2, 4)]);
        let l = total_loss(&pred, &[1, 3]).unwrap();
        assert!((l - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 4.1589).abs() < 1e-4);
    }
}

#[test]
fn loss_decomposes_into_final_and_leaf_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for h in 1..=4 {
        let gates = (0..(1 << (h - 1)) - 1).map(|_| Tensor::from_fn(&[3], |_| rng.random_range(0.0..=1.0))).collect();
        let leaves = (0..leaf_count(h)).map(|_| random_distribution(3, 6, &mut rng)).collect();
        let pred = prediction(h, gates, leaves);
        let labels = [5, 0, 3];
        let expected = nll(&pred.combined, &labels).unwrap()
            + pred.leaf_probs.iter().map(|p| nll(p, &labels).unwrap()).sum::<f64>();
        assert!((total_loss(&pred, &labels).unwrap() - expected).abs() <= 1e-9);
    }
}

#[test]
fn taped_loss_matches_plain_loss_on_a_model() {
    let mut model = small_model(3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[4, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let labels = [0, 1, 2, 3];
    let mut tape = acnet_numeric::Tape::new();
    let xv = tape.constant(x);
    let trace = model.forward_tape(&mut tape, xv, Mode::Train).unwrap();
    let l = total_loss_tape(&mut tape, &trace, &labels).unwrap();
    let pred = trace.to_prediction(&tape);
    assert!((tape.value(l).item() - total_loss(&pred, &labels).unwrap()).abs() <= 1e-9);
}

// ---- initialization ----

#[test]
fn xavier_variance_matches_the_fan_rule() {
    for (fi, fo) in [(16, 32), (200, 4), (3, 3)] {
        let t = xavier_init(&[100_000], fi, fo, 5);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let var = t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.numel() as f64;
        let expected = 2.0 / (fi + fo) as f64;
        assert!((var / expected - 1.0).abs() < 0.05, "{fi}/{fo}: {var} vs {expected}");
        let bound = xavier_bound(fi, fo);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }
}

#[test]
fn xavier_is_deterministic_by_seed() {
    assert_eq!(xavier_init(&[7, 5], 5, 7, 9), xavier_init(&[7, 5], 5, 7, 9));
    assert_ne!(xavier_init(&[7, 5], 5, 7, 9), xavier_init(&[7, 5], 5, 7, 10));
}

#[test]
fn biases_start_at_zero() {
    let mut store = ParamStore::new();
    let fc = Linear::new(&mut store, "fc", 6, 4, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(store.param(fc.bias).value.data().iter().all(|&b| b == 0.0));
    assert!(store.param(fc.weight).value.data().iter().any(|&w| w != 0.0));
}

// ---- optimizer ----

#[test]
fn plain_sgd_steps_against_the_gradient() {
    let mut w = vec![1.0, -2.0];
    let mut v = vec![0.0; 2];
    sgd_update(&mut w, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0);
    assert_eq!(w, vec![1.0 - 0.05, -2.0 + 0.1]);
}

#[test]
fn zero_gradient_without_decay_changes_nothing() {
    let mut w = vec![1.0, -2.0, 3.0];
    let mut v = vec![0.0; 3];
    sgd_update(&mut w, &[0.0; 3], &mut v, 0.1, 0.9, 0.0);
    assert_eq!(w, vec![1.0, -2.0, 3.0]);
}

#[test]
fn two_momentum_steps_follow_the_recurrence() {
    let (lr, m, wd) = (0.1, 0.9, 0.01);
    let (g1, g2) = (0.5, -0.25);
    let mut w = [2.0];
    let mut v = [0.0];
    sgd_update(&mut w, &[g1], &mut v, lr, m, wd);
    sgd_update(&mut w, &[g2], &mut v, lr, m, wd);
    let v1 = g1 + wd * 2.0;
    let w1 = 2.0 - lr * v1;
    let v2 = m * v1 + g2 + wd * w1;
    let w2 = w1 - lr * v2;
    assert!((w[0] - w2).abs() <= 1e-12);
    assert!((v[0] - v2).abs() <= 1e-12);
}

fn values(store: &ParamStore) -> Vec<Tensor> {
    store.params().iter().map(|p| p.value.clone()).collect()
}

fn decay_store() -> ParamStore {
    let mut store = ParamStore::new();
    store.add("w", Tensor::full(&[3], 1.0), ParamKind::Weight);
    store.add("b", Tensor::full(&[3], 1.0), ParamKind::Bias);
    store.add("gamma", Tensor::full(&[3], 1.0), ParamKind::Norm);
    store
}

#[test]
fn weight_decay_spares_biases_and_norm_parameters() {
    let mut store = decay_store();
    Sgd::new().step(&mut [&mut store], 0.1, 0.9, 0.5);
    let vals: Vec<f64> = store.params().iter().map(|p| p.value.data()[0]).collect();
    assert!((vals[0] - 0.95).abs() < 1e-15);
    assert_eq!(&vals[1..], &[1.0, 1.0]);
}

#[test]
fn zero_learning_rate_changes_no_parameter() {
    let mut store = decay_store();
    for p in store.params_mut() {
        p.grad = Tensor::full(&[3], 0.7);
    }
    let before = store.clone();
    let mut sgd = Sgd::new();
    sgd.step(&mut [&mut store], 0.0, 0.9, 5e-4);
    sgd.step(&mut [&mut store], 0.0, 0.9, 5e-4);
    assert_eq!(values(&before), values(&store));
}

#[test]
fn frozen_stores_are_not_stepped() {
    let mut store = decay_store();
    for p in store.params_mut() {
        p.grad = Tensor::full(&[3], 0.7);
    }
    store.set_frozen(true);
    let before = store.clone();
    Sgd::new().step(&mut [&mut store], 0.1, 0.9, 5e-4);
    assert_eq!(values(&before), values(&store));
}

// ---- schedules and plans ----

#[test]
fn full_schedule_examples() {
    let p = TrainPlan::full(0);
    assert_eq!(lr_at(&p.stages[0], 12), 0.25);
    assert_eq!(lr_at(&p.stages[0], 45), 0.00390625);
    assert!((lr_at(&p.stages[1], 35) - 1e-4).abs() < 1e-18);
    assert_eq!(lr_at(&p.stages[0], 1), 1.0);
    assert_eq!(lr_at(&p.stages[0], 10), 0.25);
}

#[test]
fn full_preset_values() {
    let p = TrainPlan::full(3);
    let s1 = StageConfig {
        freeze_backbone: true,
        epochs: 60,
        batch_size: 24,
        initial_lr: 1.0,
        lr_divisor: 4.0,
        milestones: vec![10, 20, 30, 40],
        weight_decay: 5e-6,
    };
    let s2 = StageConfig {
        freeze_backbone: false,
        epochs: 200,
        batch_size: 16,
        initial_lr: 0.001,
        lr_divisor: 10.0,
        milestones: vec![30, 40, 50],
        weight_decay: 5e-4,
    };
    assert_eq!(p.stages, vec![s1, s2]);
    assert_eq!(p.momentum, 0.9);
    assert_eq!(p.seed, 3);
    p.validate().unwrap();
}

#[test]
fn desk_preset_values() {
    let p = TrainPlan::desk(0);
    assert!(p.stages[0].freeze_backbone);
    assert_eq!(p.stages[0].epochs, 5);
    let s2 = &p.stages[1];
    assert!(!s2.freeze_backbone);
    assert_eq!((s2.epochs, s2.batch_size, s2.initial_lr, s2.lr_divisor, s2.weight_decay), (30, 16, 0.01, 10.0, 5e-4));
    assert_eq!(s2.milestones, vec![15, 25]);
    assert_eq!(p.total_epochs(), 35);
    p.validate().unwrap();
}

#[test]
fn invalid_stages_are_rejected() {
    let good = TrainPlan::desk(0).stages[1].clone();
    for bad in [
        StageConfig { epochs: 0, ..good.clone() },
        StageConfig { lr_divisor: 1.0, ..good.clone() },
        StageConfig { milestones: vec![20, 10], ..good.clone() },
        StageConfig { milestones: vec![10, 10], ..good.clone() },
        StageConfig { milestones: vec![30], ..good.clone() },
        StageConfig { batch_size: 0, ..good.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(AcnetError::Config(_))), "{bad:?}");
    }
}

proptest! {
    #[test]
    fn lr_never_increases_within_a_stage(
        lr in 1e-4f64..2.0,
        div in 1.01f64..20.0,
        mut ms in prop::collection::btree_set(1usize..50, 0..5),
    ) {
        let milestones: Vec<usize> = std::mem::take(&mut ms).into_iter().collect();
        let stage = StageConfig {
            freeze_backbone: false,
            epochs: 50,
            batch_size: 4,
            initial_lr: lr,
            lr_divisor: div,
            milestones,
            weight_decay: 0.0,
        };
        stage.validate().unwrap();
        for e in 1..50 {
            prop_assert!(stage.lr_at(e + 1) <= stage.lr_at(e));
        }
    }
}

// ---- the staged driver ----

const POLICY: AugmentPolicy = AugmentPolicy {
    resize_shorter: 18,
    crop: 16,
    hflip_prob: 0.5,
};

fn small_model(h: usize, seed: u64) -> TreeModel {
    let spec = DeskBackboneSpec {
        input_channels: 3,
        side: 16,
        blocks: vec![BlockSpec { width: 8, downsample: true }, BlockSpec { width: 8, downsample: false }],
    };
    let mut channels = vec![8];
    channels.extend(std::iter::repeat_n(4, h - 1));
    let cfg = TreeConfig {
        channels,
        dilations: vec![1, 2, 3],
        ..TreeConfig::desk(h, 4)
    };
    build_tree(&cfg, build_desk_backbone(&spec, seed).unwrap(), seed + 1000).unwrap()
}

fn small_data() -> (Dataset, Dataset, NormStats) {
    let (train, test) = generate_synthetic(&SyntheticSpec::new(4, 6, 16, 3)).unwrap();
    let stats = train.compute_stats().unwrap();
    (train, test, stats)
}

fn short_plan(seed: u64) -> TrainPlan {
    let mut plan = TrainPlan::desk(seed);
    plan.stages[0].epochs = 2;
    plan.stages[0].batch_size = 8;
    plan.stages[1].epochs = 2;
    plan.stages[1].batch_size = 8;
    plan.stages[1].milestones = vec![1];
    plan
}

struct Snapshots {
    backbone_after: Vec<Vec<Tensor>>,
    bn_updates: Vec<u64>,
}

impl TrainObserver<acnet_core::DeskBackbone> for Snapshots {
    fn epoch_end(&mut self, _: &EpochRecord, _: &TreeModel) -> acnet_core::Result<()> {
        Ok(())
    }

    fn stage_end(&mut self, _: usize, model: &TreeModel) -> acnet_core::Result<()> {
        self.backbone_after.push(model.backbone().params().params().iter().map(|p| p.value.clone()).collect());
        self.bn_updates.push(model.backbone().params().bn_states()[0].state.updates);
        Ok(())
    }
}

#[test]
fn frozen_stage_leaves_backbone_bytes_unchanged() {
    let (train, test, stats) = small_data();
    let mut model = small_model(2, 0);
    let before: Vec<Tensor> = model.backbone().params().params().iter().map(|p| p.value.clone()).collect();
    let tree_before = values(model.tree_params());
    let mut snaps = Snapshots {
        backbone_after: vec![],
        bn_updates: vec![],
    };
    let data = TrainData {
        train: &train,
        test: &test,
        policy: POLICY,
        stats: &stats,
    };
    fit_two_stage(&mut model, data, &short_plan(0), 0, &mut snaps).unwrap();
    let bytes = |ts: &[Tensor]| ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bytes(&before), bytes(&snaps.backbone_after[0]));
    assert_ne!(bytes(&before), bytes(&snaps.backbone_after[1]));
    assert_ne!(tree_before, values(model.tree_params()));
    // running statistics keep tracking the data while frozen
    assert!(snaps.bn_updates[0] > 0);
}

#[test]
fn same_seed_gives_byte_identical_metric_logs() {
    let (train, test, stats) = small_data();
    let run = |seed: u64| {
        let mut model = small_model(2, 1);
        let mut sink = JsonLines(Vec::new());
        let data = TrainData {
            train: &train,
            test: &test,
            policy: POLICY,
            stats: &stats,
        };
        let records = fit_two_stage(&mut model, data, &short_plan(seed), 0, &mut sink).unwrap();
        (sink.0, records)
    };
    let (a, ra) = run(5);
    let (b, _) = run(5);
    let (c, _) = run(6);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(ra.len(), 4);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["stage", "epoch", "lr", "train_loss", "train_top1", "val_top1", "leaf_top1"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(first["leaf_top1"].as_array().unwrap().len(), 2);
    assert_eq!(
        ra.iter().map(|r| (r.stage, r.epoch, r.lr)).collect::<Vec<_>>(),
        vec![(1, 1, 0.1), (1, 2, 0.1), (2, 1, 0.001), (2, 2, 0.001)]
    );
}

#[test]
fn starting_at_stage_two_skips_stage_one() {
    let (train, test, stats) = small_data();
    let mut model = small_model(2, 1);
    let data = TrainData {
        train: &train,
        test: &test,
        policy: POLICY,
        stats: &stats,
    };
    let records = fit_two_stage(&mut model, data, &short_plan(0), 1, &mut Vec::new()).unwrap();
    assert!(records.iter().all(|r| r.stage == 2));
    assert!(!model.backbone().is_frozen());
}

#[test]
fn non_finite_loss_aborts_naming_the_operation() {
    let (train, test, stats) = small_data();
    let mut model = small_model(2, 1);
    let id = model.tree_params().find("leaf1.fc.bias").unwrap();
    model.tree_params_mut().param_mut(id).value.data_mut()[0] = f64::NAN;
    let data = TrainData {
        train: &train,
        test: &test,
        policy: POLICY,
        stats: &stats,
    };
    match fit_two_stage(&mut model, data, &short_plan(0), 0, &mut Vec::new()) {
        Err(AcnetError::NonFiniteLoss { stage, epoch, batch, op }) => {
            assert_eq!((stage, epoch, batch), (1, 1, 0));
            assert!(!op.is_empty() && op != "unknown", "{op}");
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn empty_splits_and_bad_labels_are_rejected() {
    let (train, test, stats) = small_data();
    let mut model = small_model(2, 1);
    let empty = Dataset {
        samples: vec![],
        ..test.clone()
    };
    let data = TrainData {
        train: &train,
        test: &empty,
        policy: POLICY,
        stats: &stats,
    };
    assert!(fit_two_stage(&mut model, data, &short_plan(0), 0, &mut Vec::new()).is_err());
    let mut bad = train.clone();
    bad.samples[0].label = 9;
    let data = TrainData {
        train: &bad,
        test: &test,
        policy: POLICY,
        stats: &stats,
    };
    assert!(matches!(fit_two_stage(&mut model, data, &short_plan(0), 0, &mut Vec::new()), Err(AcnetError::Input(_))));
}

#[test]
fn desk_preset_training_lowers_the_loss() {
    let (train, test) = generate_synthetic(&SyntheticSpec {
        classes: 4,
        train_per_class: 50,
        test_per_class: 25,
        side: 32,
        seed: 7,
    })
    .unwrap();
    let stats = train.compute_stats().unwrap();
    let cfg = acnet_core::persist::RunConfig {
        tree: TreeConfig::desk(2, 4),
        ..Default::default()
    };
    let mut model = cfg.build_model().unwrap();
    let data = TrainData {
        train: &train,
        test: &test,
        policy: AugmentPolicy::DESK,
        stats: &stats,
    };
    let records = fit_two_stage(&mut model, data, &TrainPlan::desk(0), 0, &mut Vec::new()).unwrap();
    assert_eq!(records.len(), 35);
    let (first, last) = (&records[0], records.last().unwrap());
    assert!(last.train_loss < first.train_loss, "{} vs {}", last.train_loss, first.train_loss);
}

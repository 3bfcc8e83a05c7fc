use std::collections::BTreeSet;

use proptest::prelude::*;

use cdsl::data::{make_folds, split_train_val, Grid};
use cdsl::experiment::{apply_override, ExperimentConfig};
use cdsl::loss::{bce_loss, combined_loss, soft_dice, DICE_SMOOTH};
use cdsl::metrics::{background_iou, confusion, foreground_iou, hard_dice, mean_iou};
use cdsl::nn::{build_network, init_parameters, predict, NetworkConfig, ParamTensor, ParameterStore};
use cdsl::resize::ScaleFactor;
use cdsl::train::checkpoint::{decode, encode};
use cdsl::train::sgd_momentum_step;
use cdsl::Tensor4;

fn mask_pair() -> impl Strategy<Value = (Grid<u8>, Grid<u8>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(0u8..2, h * w),
            proptest::collection::vec(0u8..2, h * w),
        )
            .prop_map(move |(a, b)| (Grid::new(h, w, a).unwrap(), Grid::new(h, w, b).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_are_bounded_and_consistent((p, g) in mask_pair()) {
        let c = confusion(&p, &g).unwrap();
        prop_assert_eq!(c.total() as usize, p.data().len());
        let d = hard_dice(&c);
        let j = foreground_iou(&c);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert!(j <= d + 1e-15);
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        prop_assert!((mean_iou(&c) - (j + background_iou(&c)) / 2.0).abs() <= 1e-15);
        // swapping prediction and truth leaves the symmetric scores unchanged
        let swapped = confusion(&g, &p).unwrap();
        prop_assert_eq!(hard_dice(&swapped), d);
        prop_assert_eq!(mean_iou(&swapped), mean_iou(&c));
    }

    #[test]
    fn loss_terms_in_range(
        p in proptest::collection::vec(0.0f64..=1.0, 16),
        g in proptest::collection::vec(0u8..2, 16),
    ) {
        let p = Tensor4::from_vec([1, 1, 4, 4], p).unwrap();
        let g = Tensor4::from_vec([1, 1, 4, 4], g.into_iter().map(f64::from).collect()).unwrap();
        let bce = bce_loss(&p, &g).unwrap();
        let dice = soft_dice(&p, &g, DICE_SMOOTH).unwrap();
        prop_assert!(bce >= 0.0 && bce.is_finite());
        prop_assert!((0.0..=1.0).contains(&dice));
        prop_assert!((combined_loss(&p, &g, true).unwrap() - (bce - dice)).abs() < 1e-12);
        prop_assert_eq!(combined_loss(&p, &g, false).unwrap(), bce);
        prop_assert!((combined_loss(&g, &g, true).unwrap() + 1.0).abs() < 1e-5);
    }

    #[test]
    fn momentum_matches_closed_form(g in -10.0f64..10.0, mu in 0.0f64..0.99, n in 1usize..60) {
        let one = |v: f64| {
            let mut s = ParameterStore::new();
            s.insert("w", ParamTensor { dims: vec![1], data: vec![v] }).unwrap();
            s
        };
        let (mut w, mut v, grad) = (one(0.0), one(0.0), one(g));
        let lr = 0.01;
        for _ in 0..n {
            sgd_momentum_step(&mut w, &grad, &mut v, lr, mu).unwrap();
        }
        let expected_v = g * (1.0 - mu.powi(n as i32)) / (1.0 - mu);
        // w_n = -lr · Σ_k v_k
        let expected_w = -lr * g * (n as f64 - mu * (1.0 - mu.powi(n as i32)) / (1.0 - mu)) / (1.0 - mu);
        prop_assert!((v.get("w").unwrap().data[0] - expected_v).abs() <= 1e-10 * expected_v.abs().max(1.0));
        prop_assert!((w.get("w").unwrap().data[0] - expected_w).abs() <= 1e-10 * expected_w.abs().max(1.0));
    }

    #[test]
    fn folds_partition_ids(n in 2usize..60, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let ids: Vec<String> = (0..n).map(|i| format!("id{i:03}")).collect();
        let plan = make_folds(&ids, k, seed).unwrap();
        let sizes = plan.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen = BTreeSet::new();
        for f in 0..k {
            let test = plan.test_ids(f);
            let train = plan.train_ids(f);
            prop_assert_eq!(test.len() + train.len(), n);
            for id in &test {
                prop_assert!(seen.insert(id.clone()));
                prop_assert!(!train.contains(id));
            }
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert_eq!(make_folds(&ids, k, seed).unwrap(), plan);
    }

    #[test]
    fn validation_split_sizes(n in 1usize..80, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let (train, val) = split_train_val(&ids, frac, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert_eq!(val.len(), ((frac * n as f64) - 1e-9).ceil() as usize);
        let all: BTreeSet<&String> = train.iter().chain(&val).collect();
        prop_assert_eq!(all.len(), n);
    }

    #[test]
    fn checkpoint_round_trips(
        tensors in proptest::collection::vec(
            (proptest::collection::vec(1usize..4, 0..4), any::<u32>()),
            0..6,
        )
    ) {
        let mut store = ParameterStore::new();
        for (i, (dims, salt)) in tensors.into_iter().enumerate() {
            let len: usize = dims.iter().product();
            // arbitrary bit patterns, NaNs and negative zero included
            let data = (0..len).map(|j| f32::from_bits(salt.wrapping_mul(2654435761).wrapping_add(j as u32))).collect();
            store.insert(format!("t{i}.weight"), ParamTensor { dims, data }).unwrap();
        }
        let bytes = encode(&store).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn overrides_reach_nested_fields(epochs in 1usize..1000, lr in 1e-6f64..1.0) {
        let ov = vec![
            ("train.epochs".to_string(), epochs.to_string()),
            ("train.learning_rate".to_string(), format!("{lr:e}")),
        ];
        let c = ExperimentConfig::load(None, None, &ov).unwrap();
        prop_assert_eq!(c.train.epochs, epochs);
        prop_assert_eq!(c.train.learning_rate, lr);
        let mut v = serde_json::to_value(&c).unwrap();
        prop_assert!(apply_override(&mut v, "train.nope", "1").is_err());
    }
}

fn network_config() -> impl Strategy<Value = NetworkConfig> {
    (
        1usize..3,
        1usize..3,
        1usize..3,
        prop::sample::subsequence(ScaleFactor::ALL.to_vec(), 0..=3),
        1usize..4,
        1usize..4,
    )
        .prop_map(|(in_c, base, step, scales, h, w)| {
            let b = 4 * base;
            let s = 4 * step;
            NetworkConfig {
                in_channels: in_c,
                base_channels: b,
                encoder_channels: vec![4, 4 + s, 4 + 2 * s, 4 + 3 * s],
                scale_inputs: scales.into_iter().collect(),
                input_size: (32 * h, 32 * w),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn inferred_shapes_match_runtime(config in network_config(), seed in any::<u64>()) {
        let graph = build_network(&config).unwrap();
        let (h, w) = config.input_size;
        prop_assert_eq!(graph.output_shape(), [1, h, w]);
        let params = init_parameters(&graph, seed);
        let x = Tensor4::filled([2, config.in_channels, h, w], 0.5f32);
        let pass = cdsl::nn::forward(&graph, &params, &x, cdsl::nn::Mode::Train).unwrap();
        for node in graph.nodes() {
            let a = pass.activation(&graph, node.name()).unwrap();
            prop_assert_eq!([a.channels(), a.height(), a.width()], node.shape, "{}", node.name());
        }
        let y = predict(&graph, &params, &x).unwrap();
        prop_assert_eq!(y.dims(), [2, 1, h, w]);
        prop_assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

use proptest::prelude::*;

use tttlin::align::{key_shift_ratio, normalize_inputs, KeyNorm};
use tttlin::analysis::flops::{flops_breakdown, flops_model, Arch};
use tttlin::attention::{softmax_attention, AttentionInputs};
use tttlin::conv::dwconv_tokens;
use tttlin::convert::checkpoint::{decode_checkpoint, encode_checkpoint};
use tttlin::convert::{ConvertSpec, ModelConfig, VitModel};
use tttlin::locality::{implicit_attention, locality_index, MixerLayer};
use tttlin::rng::seeded;
use tttlin::ttt::{ttt_forward, InnerModel, InnerVariant, TttConfig};
use tttlin::{ActivationKind, DType, Tape, Tensor};

fn inputs(seed: u64, h: usize, w: usize, d: usize) -> AttentionInputs {
    AttentionInputs::random((h, w), d, &mut seeded(seed))
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        model_dim: 8,
        heads: 2,
        patch: 4,
        image_size: 8,
        in_chans: 3,
        num_classes: 5,
        ..ModelConfig::deit_t()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.01f64..20.0) {
        let x = Tensor::randn(&[rows, cols], 5.0, &mut seeded(seed));
        let tape = Tape::new();
        let y = tape.constant(x).softmax_rows(scale).unwrap();
        let y = y.value();
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn dwconv_is_linear(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, c in 1usize..4, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = seeded(seed);
        let x = Tensor::randn(&[h * w, c], 1.0, &mut rng);
        let y = Tensor::randn(&[h * w, c], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 3, c], 1.0, &mut rng);
        let lhs = dwconv_tokens(&x.scale(a).add(&y.scale(b)).unwrap(), &k, (h, w)).unwrap();
        let rhs = dwconv_tokens(&x, &k, (h, w)).unwrap().scale(a).add(&dwconv_tokens(&y, &k, (h, w)).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn key_shift_ratio_is_scale_invariant(seed in any::<u64>(), n in 2usize..40, d in 1usize..8, s in 0.01f64..100.0) {
        let k = Tensor::randn(&[n, d], 1.0, &mut seeded(seed)).add_row(&Tensor::full(&[1, d], 0.4)).unwrap();
        let a = key_shift_ratio(&k).unwrap().shift_ratio;
        let b = key_shift_ratio(&k.scale(s)).unwrap().shift_ratio;
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
    }

    #[test]
    fn softmax_ignores_any_key_shift(seed in any::<u64>(), h in 1usize..4, w in 1usize..4, d in 1usize..6, mag in 0.0f64..50.0) {
        let x = inputs(seed, h, w, d);
        let delta = Tensor::randn(&[1, d], mag, &mut seeded(seed ^ 1));
        let shifted = x.with_keys(x.k.add_row(&delta).unwrap()).unwrap();
        let diff = softmax_attention(&x).unwrap().max_abs_diff(&softmax_attention(&shifted).unwrap()).unwrap();
        prop_assert!(diff < 1e-10);
    }

    #[test]
    fn instance_norm_makes_ttt_shift_invariant(seed in any::<u64>(), n in 3usize..10, d in 2usize..6, mag in 0.0f64..20.0) {
        let x = inputs(seed, n, 1, d);
        let delta = Tensor::randn(&[1, d], mag, &mut seeded(seed ^ 2));
        let shifted = x.with_keys(x.k.add_row(&delta).unwrap()).unwrap();
        let m = InnerModel::init(InnerVariant::TwoLayerMlp, ActivationKind::Silu, d, d, 0.3, &mut seeded(seed ^ 3)).unwrap();
        let cfg = TttConfig::default();
        let a = ttt_forward(&m, &normalize_inputs(&x, KeyNorm::Instance).unwrap(), &cfg).unwrap();
        let b = ttt_forward(&m, &normalize_inputs(&shifted, KeyNorm::Instance).unwrap(), &cfg).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9 * (1.0 + a.max_abs()));
    }

    #[test]
    fn zero_linear_ttt_is_unnormalized_linear_attention(seed in any::<u64>(), n in 1usize..9, d in 1usize..6) {
        let x = inputs(seed, n, 1, d);
        let m = InnerModel::zeros(InnerVariant::Linear, ActivationKind::Silu, d, d).unwrap();
        let got = ttt_forward(&m, &x, &TttConfig::default()).unwrap();
        let want = x.q.matmul(&x.k.transpose().unwrap().matmul(&x.v).unwrap()).unwrap();
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
    }

    #[test]
    fn locality_index_is_a_fraction(seed in any::<u64>(), g in 2usize..5, window in prop::sample::select(vec![1usize, 3, 5])) {
        let x = inputs(seed, g, g, 3);
        let map = implicit_attention(&MixerLayer::Softmax, &x).unwrap();
        let idx = locality_index(&map.scores, x.grid, window).unwrap();
        prop_assert!((0.0..=1.0).contains(&idx));
    }

    #[test]
    fn flops_are_additive_and_monotone(arch in prop::sample::select(vec!["softmax", "linear", "ttt", "ttt_swiglu+dwc_qk", "t5+nat5", "ttt_three_layer+l2"]), depth in 1usize..16, res_mult in 1usize..6) {
        let arch: Arch = arch.parse().unwrap();
        let cfg = ModelConfig { depth, ..ModelConfig::deit_t().with_resolution(112 * res_mult) };
        let b = flops_breakdown(&cfg, &arch).unwrap();
        prop_assert_eq!(b.total, b.patch_embed + b.blocks + b.head);
        let deeper = ModelConfig { depth: depth + 1, ..cfg.clone() };
        let bigger = cfg.clone().with_resolution(112 * (res_mult + 1));
        let f = flops_model(&cfg, &arch).unwrap().flops;
        prop_assert!(flops_model(&deeper, &arch).unwrap().flops > f);
        prop_assert!(flops_model(&bigger, &arch).unwrap().flops > f);
    }

    #[test]
    fn checkpoint_round_trip(seed in 0u64..1000, variant in prop::sample::select(vec!["two_layer", "swiglu", "linear_projqk", "t5"])) {
        let spec: ConvertSpec = variant.parse().unwrap();
        let model = VitModel::random(tiny_config(), true, seed).unwrap().convert(&spec, seed).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&model, DType::F64).unwrap()).unwrap();
        prop_assert_eq!(back, model);
    }
}

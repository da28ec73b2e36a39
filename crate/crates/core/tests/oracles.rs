use tttlin::analysis::flops::{flops_model, param_count, Arch};
use tttlin::attention::{softmax_attention, AttentionInputs};
use tttlin::convert::checkpoint::{read_checkpoint, write_checkpoint};
use tttlin::convert::{ModelConfig, VitModel};
use tttlin::verify::gaussian_key_ratio;
use tttlin::{DType, Tape, Tensor};

const DEIT_T_FLOPS: [(&str, u64); 10] = [
    ("softmax", 1_246_563_840),
    ("linear", 1_128_248_832),
    ("linear_projqk", 1_186_051_584),
    ("ttt", 1_242_951_168),
    ("ttt_one_layer_gate", 1_242_951_168),
    ("ttt_three_layer", 1_358_556_672),
    ("ttt_swiglu", 1_329_655_296),
    ("t5", 1_337_783_808),
    ("t5+nat3", 1_345_912_320),
    ("t5+nat5", 1_360_363_008),
];

const DEIT_T_PARAMS: [(&str, usize, usize); 8] = [
    ("softmax", 5_717_032, 0),
    ("linear", 5_717_032, 0),
    ("linear_projqk", 6_011_944, 294_912),
    ("ttt", 6_011_944, 294_912),
    ("ttt_one_layer_gate", 6_011_944, 294_912),
    ("ttt_three_layer", 6_159_400, 442_368),
    ("ttt_swiglu", 6_159_400, 442_368),
    ("t5", 6_200_872, 483_840),
];

#[test]
fn deit_t_flops_are_frozen() {
    let cfg = ModelConfig::deit_t();
    for (name, want) in DEIT_T_FLOPS {
        let arch: Arch = name.parse().unwrap();
        assert_eq!(flops_model(&cfg, &arch).unwrap().flops, want, "{name}");
    }
}

#[test]
fn deit_t_params_are_frozen() {
    let cfg = ModelConfig::deit_t();
    for (name, total, new) in DEIT_T_PARAMS {
        let arch: Arch = name.parse().unwrap();
        let p = param_count(&cfg, &arch).unwrap();
        assert_eq!((p.total, p.new), (total, new), "{name}");
        assert_eq!(p.inherited + p.new, p.total);
    }
}

#[test]
fn gaussian_key_ratio_is_frozen() {
    let r = gaussian_key_ratio(0, 100, 196, 64).unwrap();
    assert!((r - 0.071_531_276_972_067_68).abs() < 1e-12, "{r}");
}

#[test]
fn softmax_of_log_counts_gives_proportions() {
    let tape = Tape::new();
    let x = Tensor::row_vector(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
    let y = tape.constant(x).softmax_rows(1.0).unwrap();
    let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
    for (a, b) in y.value().data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn two_token_softmax_attention_by_hand() {
    let q = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
    let k = Tensor::from_rows(&[vec![0.0], vec![4f64.ln()]]).unwrap();
    let v = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    let out = softmax_attention(&AttentionInputs::new(q, k, v, (2, 1)).unwrap()).unwrap();
    assert!((out.at(0, 0) - 0.8).abs() < 1e-15);
    assert!((out.at(1, 0) - 0.5).abs() < 1e-15);
}

#[test]
fn checkpoint_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { depth: 2, model_dim: 8, heads: 2, patch: 4, image_size: 8, num_classes: 3, ..ModelConfig::deit_t() };
    let spec = "t5+nat3".parse::<Arch>().unwrap().convert_spec().unwrap();
    let model = VitModel::random(cfg, true, 11).unwrap().convert(&spec, 11).unwrap();
    let path = dir.path().join("m.ckpt");
    let bytes = write_checkpoint(&path, &model, DType::F64).unwrap();
    assert_eq!(bytes, std::fs::metadata(&path).unwrap().len());
    assert_eq!(read_checkpoint(&path).unwrap(), model);
}

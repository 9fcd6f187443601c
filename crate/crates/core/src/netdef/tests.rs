use super::*;
use crate::reparam::RepConvUnit;
use crate::rng::Rng;
use crate::tensor::{Activation, Shape, Tensor};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        width_mult: 0.25,
        num_classes: 3,
        ..ModelConfig::for_variant(Variant::N)
    }
}

// ------------------------------------------------------------- layer table

/// Golden test: the compiled default N graph reproduces the reference layer
/// table row for row (kind, filters, size, repeat, output size at 640).
#[test]
fn n_variant_graph_matches_reference_table() {
    let cfg = ModelConfig::for_variant(Variant::N);
    let graph = GraphDef::from_config(&cfg);
    let rows = graph.render_rows(640).unwrap();
    let want: [[&str; 5]; 22] = [
        ["Conv", "16", "3 × 3 / 2", "1", "320 × 320"],
        ["Conv", "32", "3 × 3 / 2", "1", "160 × 160"],
        ["RepBlock", "32", "1 × 1 / 1", "1", "160 × 160"],
        ["Conv", "64", "3 × 3 / 2", "1", "80 × 80"],
        ["RepBlock", "64", "1 × 1 / 1", "2", "80 × 80"],
        ["Conv", "128", "3 × 3 / 2", "1", "40 × 40"],
        ["RepBlock", "128", "1 × 1 / 1", "2", "40 × 40"],
        ["Conv", "256", "3 × 3 / 2", "1", "20 × 20"],
        ["CSPStackRep", "256", "1 × 1 / 1", "1", "20 × 20"],
        ["Upsample", "-", "2 ×", "1", "40 × 40"],
        ["Concat", "-", "-", "1", "40 × 40"],
        ["RepBlock", "128", "1 × 1 / 1", "1", "40 × 40"],
        ["Upsample", "-", "2 ×", "1", "80 × 80"],
        ["Concat", "-", "-", "1", "80 × 80"],
        ["RepBlock", "64", "1 × 1 / 1", "1", "80 × 80"],
        ["Conv", "64", "3 × 3 / 2", "1", "40 × 40"],
        ["Concat", "-", "-", "1", "40 × 40"],
        ["RepBlock", "128", "1 × 1 / 1", "1", "40 × 40"],
        ["Conv", "128", "3 × 3 / 2", "1", "20 × 20"],
        ["Concat", "-", "-", "1", "20 × 20"],
        ["CSPStackRep", "256", "1 × 1 / 1", "1", "20 × 20"],
        [
            "Efficient Decoupled Head",
            "64, 128, 256",
            "-",
            "1",
            "80 × 80, 40 × 40, 20 × 20",
        ],
    ];
    assert_eq!(rows.len(), want.len());
    for (i, (got, want)) in rows.iter().zip(want.iter()).enumerate() {
        for f in 0..5 {
            assert_eq!(got[f], want[f], "row {i}, field {f}");
        }
    }
}

#[test]
fn head_strides_are_8_16_32() {
    let cfg = ModelConfig::for_variant(Variant::N);
    let graph = GraphDef::from_config(&cfg);
    assert_eq!(graph.head_strides().unwrap(), vec![8, 16, 32]);
}

#[test]
fn concat_of_mismatched_scales_is_a_structured_error() {
    let cfg = ModelConfig::for_variant(Variant::N);
    let mut graph = GraphDef::from_config(&cfg);
    // point the first neck concat at a /8 producer instead of /16
    graph.rows[10].inputs = vec![RowInput::Row(9), RowInput::Row(4)];
    match graph.validate() {
        Err(crate::error::Error::GraphDef { row, msg }) => {
            assert_eq!(row, 10);
            assert!(msg.contains("scales"), "{msg}");
        }
        other => panic!("expected GraphDef error, got {other:?}"),
    }
}

#[test]
fn dangling_reference_names_row() {
    let cfg = ModelConfig::for_variant(Variant::N);
    let mut graph = GraphDef::from_config(&cfg);
    graph.rows[5].inputs = vec![RowInput::Row(19)];
    match graph.validate() {
        Err(crate::error::Error::GraphDef { row, .. }) => assert_eq!(row, 5),
        other => panic!("expected GraphDef error, got {other:?}"),
    }
}

// ------------------------------------------------------------------ forward

#[test]
fn forward_grid_sizes_scale_with_input() {
    let m = Model::build(&tiny_config(), 7).unwrap();
    let x = Tensor::zeros(Shape::new(1, 3, 320, 320));
    let h = m.forward(&x).unwrap();
    assert_eq!(h.cls[0].shape().h, 40);
    assert_eq!(h.cls[1].shape().h, 20);
    assert_eq!(h.cls[2].shape().h, 10);
    assert_eq!(h.boxes[0].shape().c, 4);
    assert_eq!(h.cls[0].shape().c, 3);

    let bad = Tensor::zeros(Shape::new(1, 3, 100, 100));
    assert!(m.forward(&bad).is_err());
}

#[test]
fn forward_is_pure() {
    let m = Model::build(&tiny_config(), 3).unwrap();
    let mut rng = Rng::new(5);
    let x = Tensor::rand_uniform(Shape::new(1, 3, 64, 64), &mut rng, 0.0, 1.0);
    let a = m.forward(&x).unwrap();
    let b = m.forward(&x).unwrap();
    for (ta, tb) in a.cls.iter().zip(b.cls.iter()) {
        assert!(ta.bit_eq(tb));
    }
}

#[test]
fn taped_forward_matches_plain_forward() {
    let m = Model::build(&tiny_config(), 11).unwrap();
    let mut rng = Rng::new(6);
    let x = Tensor::rand_uniform(Shape::new(1, 3, 64, 64), &mut rng, 0.0, 1.0);
    let plain = m.forward(&x).unwrap();
    let mut tape = crate::tensor::Tape::new();
    let (taped, _vars) = m.forward_taped(&mut tape, &x).unwrap();
    for (s, (&cv, &bv)) in taped.cls.iter().zip(taped.boxes.iter()).enumerate() {
        assert!(tape.value(cv).unwrap().bit_eq(&plain.cls[s]));
        assert!(tape.value(bv).unwrap().bit_eq(&plain.boxes[s]));
    }
}

// --------------------------------------------------------------------- fuse

#[test]
fn fused_model_matches_unfused_within_1e4() {
    let m = Model::build(&tiny_config(), 9).unwrap();
    let fused = fuse_model(&m).unwrap();
    assert!(fused.fused);
    let mut rng = Rng::new(10);
    for _ in 0..5 {
        let x = Tensor::rand_uniform(Shape::new(1, 3, 64, 64), &mut rng, 0.0, 1.0);
        let a = m.forward(&x).unwrap();
        let b = fused.forward(&x).unwrap();
        for (ta, tb) in a.cls.iter().zip(b.cls.iter()) {
            assert!(ta.max_abs_diff(tb) <= 1e-4);
        }
        for (ta, tb) in a.boxes.iter().zip(b.boxes.iter()) {
            assert!(ta.max_abs_diff(tb) <= 1e-4);
        }
    }
    assert!(fused.param_count() < m.param_count());
    assert!(matches!(fuse_model(&fused), Err(crate::error::Error::InvalidArgument { .. })));
}

#[test]
fn stride32_translation_equivariance_with_wrap_padding() {
    let mut m = Model::build(&tiny_config(), 13).unwrap();
    m.set_wrap_padding();
    let mut rng = Rng::new(14);
    let x = Tensor::rand_uniform(Shape::new(1, 3, 128, 128), &mut rng, 0.0, 1.0);
    // roll the image right by one coarse stride (32 px)
    let s = x.shape();
    let mut rolled = vec![0.0f32; x.numel()];
    for c in 0..s.c {
        for y in 0..s.h {
            for xx in 0..s.w {
                let src = x.at(0, c, y, xx);
                rolled[(c * s.h + y) * s.w + (xx + 32) % s.w] = src;
            }
        }
    }
    let rolled = Tensor::new(s, rolled).unwrap();

    let coarse = |h: HeadOutputs| HeadOutputs {
        cls: vec![h.cls[2].clone()],
        boxes: vec![h.boxes[2].clone()],
        strides: vec![h.strides[2]],
        reg_max: h.reg_max,
    };
    let d0 = decode(&coarse(m.forward(&x).unwrap()), 0.03).unwrap();
    let d1 = decode(&coarse(m.forward(&rolled).unwrap()), 0.03).unwrap();
    assert_eq!(d0.len(), d1.len());
    assert!(!d0.is_empty(), "need detections for the check to bite");

    let key = |d: &Detection, shift: f32| {
        let cx = ((d.x1 + d.x2) / 2.0 + shift).rem_euclid(128.0);
        (
            (cx * 16.0).round() as i64,
            (((d.y1 + d.y2) / 2.0) * 16.0).round() as i64,
            ((d.x2 - d.x1) * 16.0).round() as i64,
            ((d.y2 - d.y1) * 16.0).round() as i64,
            d.class_id,
            (d.score * 1e6).round() as i64,
        )
    };
    let mut k0: Vec<_> = d0.iter().map(|d| key(d, 32.0)).collect();
    let mut k1: Vec<_> = d1.iter().map(|d| key(d, 0.0)).collect();
    k0.sort();
    k1.sort();
    assert_eq!(k0, k1, "stride-32 detections must shift by exactly 32 px");
}

// ------------------------------------------------------------------- decode

fn single_cell_outputs(cls_logit: f32, box_vals: &[f32], stride: usize, reg_max: usize) -> HeadOutputs {
    HeadOutputs {
        cls: vec![Tensor::new(Shape::new(1, 1, 1, 1), vec![cls_logit]).unwrap()],
        boxes: vec![
            Tensor::new(Shape::new(1, box_vals.len(), 1, 1), box_vals.to_vec()).unwrap(),
        ],
        strides: vec![stride],
        reg_max,
    }
}

#[test]
fn decode_single_cell_box_arithmetic() {
    // distances (16,16,16,16) px at stride 32 means raw value 0.5 per side
    let h = single_cell_outputs(5.0, &[0.5, 0.5, 0.5, 0.5], 32, 0);
    let dets = decode(&h, 0.03).unwrap();
    assert_eq!(dets.len(), 1);
    let d = dets[0];
    assert_eq!((d.x1, d.y1, d.x2, d.y2), (0.0, 0.0, 32.0, 32.0));
}

#[test]
fn decode_all_negative_infinity_logits_is_empty() {
    let h = single_cell_outputs(f32::NEG_INFINITY, &[0.5; 4], 32, 0);
    assert!(decode(&h, 0.03).unwrap().is_empty());
}

#[test]
fn decode_uniform_dfl_logits_gives_midpoint_distance() {
    // reg_max 16: uniform logits over 17 bins -> expectation 8 bins -> 8 * s px
    let h = single_cell_outputs(5.0, &[0.3; 4 * 17], 32, 16);
    let dets = decode(&h, 0.03).unwrap();
    assert_eq!(dets.len(), 1);
    let d = dets[0];
    let want = 8.0 * 32.0;
    assert!(((16.0 - d.x1) - want).abs() < 1e-3, "left distance {}", 16.0 - d.x1);
    assert!(((d.x2 - 16.0) - want).abs() < 1e-3, "right distance {}", d.x2 - 16.0);
}

// ---------------------------------------------------------------------- nms

fn det(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize, score: f32) -> Detection {
    Detection {
        x1,
        y1,
        x2,
        y2,
        class_id,
        score,
    }
}

#[test]
fn nms_identical_boxes_keep_one() {
    let dets = vec![det(0.0, 0.0, 10.0, 10.0, 0, 0.9), det(0.0, 0.0, 10.0, 10.0, 0, 0.8)];
    let kept = nms(&dets, 0.65).unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);
}

#[test]
fn nms_disjoint_boxes_both_survive() {
    let dets = vec![det(0.0, 0.0, 10.0, 10.0, 0, 0.9), det(50.0, 50.0, 60.0, 60.0, 0, 0.8)];
    assert_eq!(nms(&dets, 0.5).unwrap().len(), 2);
    // different classes never suppress each other
    let dets = vec![det(0.0, 0.0, 10.0, 10.0, 0, 0.9), det(0.0, 0.0, 10.0, 10.0, 1, 0.8)];
    assert_eq!(nms(&dets, 0.5).unwrap().len(), 2);
}

/// Independent suppression oracle: repeatedly scan for the best remaining
/// detection without pre-sorting.
fn nms_oracle(dets: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut alive: Vec<Detection> = dets.to_vec();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for i in 1..alive.len() {
            let (a, b) = (&alive[i], &alive[best]);
            let better = a.score > b.score
                || (a.score == b.score
                    && (a.x1 < b.x1
                        || (a.x1 == b.x1 && (a.y1 < b.y1 || (a.y1 == b.y1 && a.class_id < b.class_id)))));
            if better {
                best = i;
            }
        }
        let chosen = alive.remove(best);
        alive.retain(|d| d.class_id != chosen.class_id || chosen.iou(d) <= iou_thresh);
        kept.push(chosen);
    }
    kept
}

#[test]
fn nms_matches_brute_force_oracle_on_random_sets() {
    let mut rng = Rng::new(77);
    for _ in 0..20 {
        let dets: Vec<Detection> = (0..50)
            .map(|_| {
                let x1 = rng.range(0.0, 80.0) as f32;
                let y1 = rng.range(0.0, 80.0) as f32;
                det(
                    x1,
                    y1,
                    x1 + rng.range(2.0, 30.0) as f32,
                    y1 + rng.range(2.0, 30.0) as f32,
                    rng.below(3),
                    (rng.range(0.05, 1.0) * 100.0).round() as f32 / 100.0,
                )
            })
            .collect();
        let got = nms(&dets, 0.5).unwrap();
        let want = nms_oracle(&dets, 0.5);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want.iter()) {
            assert_eq!(g, w);
        }
        // emitted scores are non-increasing and output is a subset
        for pair in got.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        for g in &got {
            assert!(dets.iter().any(|d| d == g));
        }
    }
}

// -------------------------------------------------------------------- count

#[test]
fn count_single_conv_row_formula() {
    let cfg = tiny_config();
    let graph = GraphDef {
        rows: vec![GraphRow {
            kind: RowKind::Conv,
            filters: vec![32],
            kernel_stride: Some((3, 2)),
            repeat: 1,
            inputs: vec![RowInput::Image],
        }],
        ..GraphDef::from_config(&cfg)
    };
    let m = Model::build_from_graph(graph, &cfg, 1).unwrap();
    let fused = fuse_model(&m).unwrap();
    let r = count_params_flops(&fused, (640, 640)).unwrap();
    assert_eq!(r.params, (32 * 3 * 9 + 32) as u64);
    assert_eq!(r.flops, 2 * 32 * 3 * 9 * 320 * 320);
    // FLOPs scale linearly with H*W
    let quarter = count_params_flops(&fused, (320, 320)).unwrap();
    assert_eq!(r.flops, 4 * quarter.flops);
}

#[test]
fn fused_unit_param_count_matches_hand_formula() {
    let mut rng = Rng::new(15);
    let u = RepConvUnit::new(16, 32, 2, Activation::Relu, true, &mut rng).unwrap();
    let fused = u.fuse().unwrap();
    assert_eq!(fused.param_count(), 32 * 16 * 9 + 32);
    assert!(fused.param_count() < u.param_count());
}

#[test]
fn unfused_count_exceeds_fused_count() {
    let m = Model::build(&tiny_config(), 4).unwrap();
    let fused = fuse_model(&m).unwrap();
    let a = count_params_flops(&m, (64, 64)).unwrap();
    let b = count_params_flops(&fused, (64, 64)).unwrap();
    assert!(a.params > b.params);
    assert!(a.flops > b.flops);
}

// ------------------------------------------------------------------ weights

#[test]
fn save_load_roundtrip_is_bit_exact() {
    let dir = std::env::temp_dir().join(format!("repdet-test-{}", std::process::id()));
    let path = dir.join("model.rdet");
    let m = Model::build(&tiny_config(), 21).unwrap();
    save_weights(&m, &path).unwrap();
    let loaded = load_weights(&path).unwrap();
    let mut rng = Rng::new(22);
    let x = Tensor::rand_uniform(Shape::new(1, 3, 64, 64), &mut rng, 0.0, 1.0);
    let a = m.forward(&x).unwrap();
    let b = loaded.forward(&x).unwrap();
    for (ta, tb) in a.cls.iter().zip(b.cls.iter()) {
        assert!(ta.bit_eq(tb));
    }
    for (ta, tb) in a.boxes.iter().zip(b.boxes.iter()) {
        assert!(ta.bit_eq(tb));
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn fused_save_load_roundtrip_keeps_outputs_bit_exact() {
    let dir = std::env::temp_dir().join(format!("repdet-fused-rt-{}", std::process::id()));
    let path = dir.join("fused.rdet");
    let fused = fuse_model(&Model::build(&tiny_config(), 31).unwrap()).unwrap();
    save_weights(&fused, &path).unwrap();
    let loaded = load_weights(&path).unwrap();
    assert!(loaded.fused);
    let mut rng = Rng::new(32);
    let x = Tensor::rand_uniform(Shape::new(1, 3, 64, 64), &mut rng, 0.0, 1.0);
    let a = fused.forward(&x).unwrap();
    let b = loaded.forward(&x).unwrap();
    for (ta, tb) in a.cls.iter().chain(a.boxes.iter()).zip(b.cls.iter().chain(b.boxes.iter())) {
        assert!(ta.bit_eq(tb));
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn corrupted_magic_is_rejected() {
    let m = Model::build(&tiny_config(), 23).unwrap();
    let mut bytes = weights::encode_container(&Container {
        meta: vec![("kind".into(), "model".into())],
        tensors: m.collect_tensors(),
    });
    bytes[0] = b'X';
    assert!(matches!(
        weights::decode_container(&bytes),
        Err(crate::error::Error::Format { .. })
    ));
}

#[test]
fn truncated_file_is_rejected() {
    let m = Model::build(&tiny_config(), 24).unwrap();
    let dir = std::env::temp_dir().join(format!("repdet-trunc-{}", std::process::id()));
    let path = dir.join("model.rdet");
    save_weights(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let cut = &bytes[..bytes.len() / 2];
    assert!(matches!(
        weights::decode_container(cut),
        Err(crate::error::Error::Format { .. })
    ));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn fused_checkpoint_refuses_unfused_graph_shape() {
    let dir = std::env::temp_dir().join(format!("repdet-tamper-{}", std::process::id()));
    let path = dir.join("fused.rdet");
    let m = fuse_model(&Model::build(&tiny_config(), 25).unwrap()).unwrap();
    save_weights(&m, &path).unwrap();
    let mut c = load_container(&path).unwrap();
    for (k, v) in c.meta.iter_mut() {
        if k == "fused" {
            *v = "0".into();
        }
    }
    let err = weights::model_from_container(&c).unwrap_err();
    assert!(matches!(err, crate::error::Error::Format { .. }), "{err}");
    std::fs::remove_dir_all(&dir).ok();
}

// ------------------------------------------------------------------- config

#[test]
fn config_rejects_unknown_keys() {
    let err = ModelConfig::parse("variant = n\nhidden_layers = 3\n").unwrap_err();
    assert!(err.to_string().contains("unknown config key"), "{err}");
}

#[test]
fn config_parse_applies_overrides() {
    let cfg = ModelConfig::parse(
        "variant = m\n# comment\nnum_classes = 3\ncc = 1/2\nactivation = silu\n",
    )
    .unwrap();
    assert_eq!(cfg.variant, Variant::M);
    assert_eq!(cfg.num_classes, 3);
    assert_eq!(cfg.cc, 0.5);
    assert_eq!(cfg.activation, Activation::Silu);
    assert_eq!(cfg.reg_max, 16);
}

#[test]
fn variant_presets_follow_the_block_table() {
    let n = ModelConfig::for_variant(Variant::N);
    assert_eq!(n.block_type, BlockType::RepBlock);
    assert_eq!(n.reg_max, 0);
    let m = ModelConfig::for_variant(Variant::M);
    assert_eq!(m.block_type, BlockType::CspStackRep);
    assert!((m.cc - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(m.reg_max, 16);
    let l = ModelConfig::for_variant(Variant::L);
    assert_eq!(l.block_type, BlockType::CspStackRep);
    assert_eq!(l.cc, 0.5);
}

use super::*;
use crate::geometry::BBox;
use crate::sampling::{FeatureMap, SparseKv};

fn rand_tensor(dims: &[usize], seed: u64) -> Tensor {
    Tensor::create(dims, Init::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
}

fn pyramid(sizes: &[usize], c: usize, seed: u64) -> FeaturePyramid {
    let levels = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| FeatureMap::new(8 << i, rand_tensor(&[s, s, c], seed + i as u64)).unwrap())
        .collect();
    FeaturePyramid::new(levels).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        num_queries: 6,
        hidden_dim: 16,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 3,
        ffn_dim: 32,
        num_classes: 3,
        roi_resolution: 2,
        in_channels: 5,
        num_levels: 3,
        levels_used: vec![0, 1, 2],
        toggles: Toggles::default(),
    }
}

fn attn_vars(tape: &mut Tape, d: usize, seed: u64) -> AttnVars {
    let mut c = |k: u64, dims: &[usize]| tape.constant(rand_tensor(dims, seed * 100 + k));
    AttnVars {
        wq: c(0, &[d, d]),
        bq: c(1, &[d]),
        wk: c(2, &[d, d]),
        bk: c(3, &[d]),
        wv: c(4, &[d, d]),
        bv: c(5, &[d]),
        wo: c(6, &[d, d]),
        bo: c(7, &[d]),
    }
}

fn affine_rows(x: &[f64], rows: usize, w: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        for o in 0..d {
            let mut s = b[o];
            for i in 0..d {
                s += x[r * d + i] * w[i * d + o];
            }
            out[r * d + o] = s;
        }
    }
    out
}

#[test]
fn single_head_attention_matches_naive_loops() {
    let (nq, nk, d) = (3, 5, 8);
    let mut tape = Tape::new();
    let w = attn_vars(&mut tape, d, 1);
    let q = tape.constant(rand_tensor(&[nq, d], 10));
    let k = tape.constant(rand_tensor(&[nk, d], 11));
    let v = tape.constant(rand_tensor(&[nk, d], 12));
    let qp = tape.constant(rand_tensor(&[nq, d], 13));
    let kp = tape.constant(rand_tensor(&[nk, d], 14));
    let out = multi_head_attention(&mut tape, &w, 1, q, k, v, Some(qp), Some(kp), None).unwrap();

    let val = |x: Var| tape.data(x).to_vec();
    let add = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>();
    let qq = affine_rows(&add(val(q), val(qp)), nq, &val(w.wq), &val(w.bq), d);
    let kk = affine_rows(&add(val(k), val(kp)), nk, &val(w.wk), &val(w.bk), d);
    let vv = affine_rows(&val(v), nk, &val(w.wv), &val(w.bv), d);
    let mut ctx = vec![0.0; nq * d];
    for i in 0..nq {
        let s: Vec<f64> = (0..nk)
            .map(|j| (0..d).map(|c| qq[i * d + c] * kk[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..nk {
            for c in 0..d {
                ctx[i * d + c] += e[j] / z * vv[j * d + c];
            }
        }
    }
    let expect = affine_rows(&ctx, nq, &val(w.wo), &val(w.bo), d);
    for (a, b) in tape.data(out).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn single_key_returns_projected_value() {
    let d = 8;
    let mut tape = Tape::new();
    let w = attn_vars(&mut tape, d, 2);
    let q = tape.constant(rand_tensor(&[4, d], 20));
    let k = tape.constant(rand_tensor(&[1, d], 21));
    let v = tape.constant(rand_tensor(&[1, d], 22));
    let out = multi_head_attention(&mut tape, &w, 2, q, k, v, None, None, None).unwrap();
    let vv = tape.linear(v, w.wv, w.bv).unwrap();
    let expect = tape.linear(vv, w.wo, w.bo).unwrap();
    for row in tape.data(out).chunks(d) {
        for (a, b) in row.iter().zip(tape.data(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_average_values() {
    let d = 8;
    let mut tape = Tape::new();
    let w = attn_vars(&mut tape, d, 3);
    let q = tape.constant(rand_tensor(&[2, d], 30));
    let key_row = rand_tensor(&[1, d], 31);
    let k = tape.constant(Tensor::new(vec![3, d], key_row.data().repeat(3)).unwrap());
    let v = tape.constant(rand_tensor(&[3, d], 32));
    let out = multi_head_attention(&mut tape, &w, 4, q, k, v, None, None, None).unwrap();
    let mean = tape.mean(v, 0).unwrap();
    let mean = tape.reshape(mean, &[1, d]).unwrap();
    let vv = tape.linear(mean, w.wv, w.bv).unwrap();
    let expect = tape.linear(vv, w.wo, w.bo).unwrap();
    for row in tape.data(out).chunks(d) {
        for (a, b) in row.iter().zip(tape.data(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_width_mismatch() {
    let mut tape = Tape::new();
    let w = attn_vars(&mut tape, 8, 4);
    let q = tape.constant(rand_tensor(&[2, 8], 1));
    let k = tape.constant(rand_tensor(&[2, 4], 2));
    let r = multi_head_attention(&mut tape, &w, 2, q, k, k, None, None, None);
    assert!(matches!(r, Err(Error::Shape(_))));
}

#[test]
fn config_invariants() {
    let mut c = small_config();
    c.num_heads = 3;
    assert!(matches!(Model::new(c, 0), Err(Error::Config(_))));
    let mut c = small_config();
    c.dec_layers = 0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = small_config();
    c.hidden_dim = 18;
    c.num_heads = 2;
    assert!(c.validate().is_err());
    let mut c = small_config();
    c.levels_used = vec![3];
    assert!(c.validate().is_err());
}

#[test]
fn encoder_without_layers_is_identity_and_deterministic() {
    let mut c = small_config();
    c.enc_layers = 0;
    let m = Model::new(c, 1).unwrap();
    let p = pyramid(&[8, 4, 2], 5, 0);
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &p, false).unwrap();
    let mut t2 = Tape::new();
    let (w, b) = m.embed[2];
    let w = load(&mut t2, &m.params, w, false);
    let b = load(&mut t2, &m.params, b, false);
    let raw = flatten_embed(&mut t2, p.top(), w, Some(b)).unwrap();
    assert_eq!(tape.data(enc.encoded_top().values), t2.data(raw));

    let m = Model::new(small_config(), 1).unwrap();
    let a = m.predict(&p).unwrap();
    let b = m.predict(&p).unwrap();
    assert_eq!(a, b);
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &p, false).unwrap();
    assert_eq!(tape.dims(enc.encoded_top().values), &[4, 16]);
}

#[test]
fn forward_shapes_at_reference_size() {
    let c = ModelConfig {
        num_queries: 25,
        hidden_dim: 64,
        num_heads: 4,
        dec_layers: 3,
        roi_resolution: 4,
        num_levels: 3,
        num_classes: 4,
        ..ModelConfig::default()
    };
    let m = Model::new(c, 3).unwrap();
    let out = m.predict(&pyramid(&[16, 8, 4], 16, 5)).unwrap();
    assert_eq!(out.len(), 3);
    for o in &out {
        assert_eq!(o.class_probs.dims(), &[25, 5]);
        assert_eq!(o.boxes.len(), 25);
        for row in o.class_probs.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn degenerate_stacks() {
    let p = pyramid(&[8, 4, 2], 5, 1);
    let mut c = small_config();
    c.dec_layers = 1;
    let m = Model::new(c.clone(), 0).unwrap();
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, &p, false).unwrap();
    assert_eq!(out.len(), 1);

    // dense only: same parameters, same shapes, different values
    c.dec_layers = 3;
    let sparse = Model::new(c.clone(), 0).unwrap();
    c.toggles.sparse_sampling = false;
    let mut dense = Model::new(c, 0).unwrap();
    dense.load_values(&sparse.params).unwrap();
    let a = sparse.predict(&p).unwrap();
    let b = dense.predict(&p).unwrap();
    assert_eq!(a[0], b[0]);
    assert_eq!(a[2].class_probs.dims(), b[2].class_probs.dims());
}

#[test]
fn heads_zero_cases() {
    let m = Model::new(small_config(), 2).unwrap();
    let mut tape = Tape::new();
    let state = m.initial_state(&mut tape, false).unwrap();
    let content = tape.constant(rand_tensor(&[6, 16], 9));
    let h = m.heads[0].load(&mut tape, &m.params, false);
    let pred = heads_forward(&mut tape, &h, content, state.reference_logits, true).unwrap();
    let out = pred.to_output(&tape).unwrap();
    for (b, g) in out.boxes.iter().zip(grid_reference_boxes(6)) {
        for (x, y) in b.v.iter().zip(g) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    let zero = |tape: &mut Tape, v: Var| tape.constant(Tensor::zeros(tape.dims(v)).unwrap());
    let h0 = HeadVars {
        cls_w: zero(&mut tape, h.cls_w),
        cls_b: zero(&mut tape, h.cls_b),
        ..h
    };
    let pred = heads_forward(&mut tape, &h0, content, state.reference_logits, true).unwrap();
    let out = pred.to_output(&tape).unwrap();
    assert!(out.class_probs.data().iter().all(|p| (p - 0.25).abs() < 1e-12));
}

#[test]
fn single_query_self_attention_is_identity_weighted() {
    let d = 8;
    let mut tape = Tape::new();
    let w = attn_vars(&mut tape, d, 5);
    let q = tape.constant(rand_tensor(&[1, d], 1));
    let pos = tape.constant(rand_tensor(&[1, d], 2));
    let out = multi_head_attention(&mut tape, &w, 2, q, q, q, Some(pos), Some(pos), None).unwrap();
    let vv = tape.linear(q, w.wv, w.bv).unwrap();
    let expect = tape.linear(vv, w.wo, w.bo).unwrap();
    for (a, b) in tape.data(out).iter().zip(tape.data(expect)) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Boxes whose `k x k` bins are single cells of an `s x s` map.
fn aligned_box(s: usize, k: usize, row: usize, col: usize) -> BBox {
    let c = 1.0 / s as f64;
    BBox::cxcywh(
        (col as f64 + k as f64 / 2.0) * c,
        (row as f64 + k as f64 / 2.0) * c,
        k as f64 * c,
        k as f64 * c,
    )
    .unwrap()
}

fn sparse_and_masked_dense(boxes: &[BBox], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut c = small_config();
    c.num_queries = boxes.len();
    c.roi_resolution = k;
    let m = Model::new(c, 7).unwrap();
    let p = pyramid(&[8, 4, 4], 5, 2);
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &p, false).unwrap();
    let mut state = m.initial_state(&mut tape, false).unwrap();
    state.content = tape.constant(rand_tensor(&[boxes.len(), 16], 77));
    let w = m.decoder[1].load(&mut tape, &m.params, false);
    let kv: SparseKv = build_multiscale_kv(&mut tape, &enc, boxes, k, &[2]).unwrap();
    let sparse = sparse_decoder_layer(&mut tape, &w, 2, &state, &kv).unwrap();

    let top = enc.encoded_top();
    let (h, wd) = (top.height, top.width);
    let mut mask = vec![false; boxes.len() * h * wd];
    for (n, b) in boxes.iter().enumerate() {
        let [x1, y1, x2, y2] = b.corners();
        for i in 0..h {
            for j in 0..wd {
                let (cx, cy) = ((j as f64 + 0.5) / wd as f64, (i as f64 + 0.5) / h as f64);
                mask[n * h * wd + i * wd + j] = cx > x1 && cx < x2 && cy > y1 && cy < y2;
            }
        }
    }
    let dense = dense_decoder_layer(&mut tape, &w, 2, &state, top.values, enc.pos_top, Some(&mask)).unwrap();
    (tape.data(sparse).to_vec(), tape.data(dense).to_vec())
}

#[test]
fn aligned_sparse_attention_equals_masked_dense() {
    let boxes = [
        aligned_box(4, 2, 0, 0),
        aligned_box(4, 2, 1, 2),
        aligned_box(4, 2, 2, 1),
    ];
    let (s, d) = sparse_and_masked_dense(&boxes, 2);
    for (a, b) in s.iter().zip(&d) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn whole_image_box_equals_unmasked_dense() {
    let full = BBox::cxcywh(0.5, 0.5, 1.0, 1.0).unwrap();
    let (s, d) = sparse_and_masked_dense(&[full, full], 4);
    for (a, b) in s.iter().zip(&d) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn sparse_layer_rejects_wrong_query_count() {
    let m = Model::new(small_config(), 0).unwrap();
    let p = pyramid(&[8, 4, 2], 5, 2);
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &p, false).unwrap();
    let state = m.initial_state(&mut tape, false).unwrap();
    let w = m.decoder[1].load(&mut tape, &m.params, false);
    let b = BBox::cxcywh(0.5, 0.5, 0.5, 0.5).unwrap();
    let kv = build_multiscale_kv(&mut tape, &enc, &[b; 2], 2, &[2]).unwrap();
    let r = sparse_decoder_layer(&mut tape, &w, 2, &state, &kv);
    assert!(matches!(r, Err(Error::Shape(_))));
}

#[test]
fn query_permutation_permutes_outputs() {
    let m = Model::new(small_config(), 4).unwrap();
    let perm = [3, 0, 5, 1, 4, 2];
    let mut pm = m.clone();
    for name in ["query.pos", "query.ref"] {
        let id = m.params.find(name).unwrap();
        let t = m.params.get(id);
        let w = t.dims()[1];
        let data: Vec<f64> = perm.iter().flat_map(|&r| t.row(r).to_vec()).collect();
        assert_eq!(data.len(), 6 * w);
        pm.params.set_value(name, data).unwrap();
    }
    let p = pyramid(&[8, 4, 2], 5, 3);
    let a = m.predict(&p).unwrap();
    let b = pm.predict(&p).unwrap();
    for (la, lb) in a.iter().zip(&b) {
        for (i, &src) in perm.iter().enumerate() {
            for (x, y) in lb.class_probs.row(i).iter().zip(la.class_probs.row(src)) {
                assert!((x - y).abs() < 1e-9);
            }
            for (x, y) in lb.boxes[i].v.iter().zip(la.boxes[src].v) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn load_values_checks_names_and_shapes() {
    let a = Model::new(small_config(), 0).unwrap();
    let mut b = Model::new(small_config(), 1).unwrap();
    b.load_values(&a.params).unwrap();
    assert_eq!(a.params.get(ParamId(0)).data(), b.params.get(ParamId(0)).data());
    let mut c = small_config();
    c.hidden_dim = 8;
    let mut other = Model::new(c, 0).unwrap();
    assert!(matches!(other.load_values(&a.params), Err(Error::Shape(_))));
}

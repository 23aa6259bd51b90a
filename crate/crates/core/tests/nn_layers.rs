use rand::Rng;
use sghf_core::gradcheck;
use sghf_core::nn::{
    patch_tokens, volume_tokens, CnnConfig, CnnDepth, CnnEncoder, Mode, MultiHeadAttention,
    ParamStore, Scope, VitConfig, VitEncoder,
};
use sghf_core::rng;
use sghf_core::tensor::{Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Explicit per-pair attention: weights by exp/sum over keys, then weighted value sums.
fn attention_oracle(store: &ParamStore, x: &Tensor, heads: usize, d_k: usize) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut concat = vec![0.0; n * heads * d_k];
    for t in 0..heads {
        let w = |k: &str| store.get(&format!("attn.{k}.{t}")).unwrap().data().to_vec();
        let q = matmul(x.data(), &w("wq"), n, d, d_k);
        let k = matmul(x.data(), &w("wk"), n, d, d_k);
        let v = matmul(x.data(), &w("wv"), n, d, d_k);
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d_k).map(|c| q[i * d_k + c] * k[j * d_k + c]).sum::<f64>() / (d_k as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..d_k {
                let val: f64 = (0..n).map(|j| exps[j] / z * v[j * d_k + c]).sum();
                concat[i * heads * d_k + t * d_k + c] = val;
            }
        }
    }
    let wo = store.get("attn.wo").unwrap();
    matmul(&concat, wo.data(), n, heads * d_k, d)
}

fn attention_fixture(heads: usize, d_k: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, &[1]);
    let attn = MultiHeadAttention::init(&mut store, "attn", heads, d_k, &mut r).unwrap();
    (store, attn)
}

#[test]
fn attention_matches_loop_oracle() {
    for seed in 0..10 {
        let (store, attn) = attention_fixture(2, 3, seed);
        let x = random(&[5, 6], 100 + seed);
        let mut tape = Tape::new();
        let scope = Scope::bind(&mut tape, &store, false, Mode::Eval);
        let vx = tape.constant(x.clone());
        let (y, weights) = attn.attend(&mut tape, &scope, vx, vx).unwrap();
        let expect = attention_oracle(&store, &x, 2, 3);
        let diff = tape
            .value(y)
            .data()
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-10, "diff {diff}");
        for w in weights {
            for row in tape.value(w).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn attention_single_token_passes_values_through() {
    let (store, attn) = attention_fixture(2, 4, 3);
    let x = random(&[1, 8], 4);
    let mut tape = Tape::new();
    let scope = Scope::bind(&mut tape, &store, false, Mode::Eval);
    let vx = tape.constant(x.clone());
    let (y, weights) = attn.attend(&mut tape, &scope, vx, vx).unwrap();
    for w in &weights {
        assert_eq!(tape.value(*w).data(), &[1.0]);
    }
    let mut concat = Vec::new();
    for t in 0..2 {
        let wv = store.get(&format!("attn.wv.{t}")).unwrap();
        concat.extend(matmul(x.data(), wv.data(), 1, 8, 4));
    }
    let expect = matmul(&concat, store.get("attn.wo").unwrap().data(), 1, 8, 8);
    for (a, b) in tape.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn attention_identical_tokens_give_identical_rows() {
    let (store, attn) = attention_fixture(2, 2, 5);
    let row = random(&[1, 4], 6);
    let x = Tensor::new(vec![3, 4], row.data().repeat(3)).unwrap();
    let mut tape = Tape::new();
    let scope = Scope::bind(&mut tape, &store, false, Mode::Eval);
    let vx = tape.constant(x);
    let y = attn.forward(&mut tape, &scope, vx).unwrap();
    let out = tape.value(y).data();
    assert_eq!(&out[0..4], &out[4..8]);
    assert_eq!(&out[0..4], &out[8..12]);
}

#[test]
fn attention_rejects_width_mismatch() {
    let (store, attn) = attention_fixture(2, 2, 7);
    let mut tape = Tape::new();
    let scope = Scope::bind(&mut tape, &store, false, Mode::Eval);
    let x = tape.constant(Tensor::zeros(&[3, 5]));
    assert!(attn.forward(&mut tape, &scope, x).is_err());
}

fn cnn(depth: CnnDepth, rank: usize, feature_dim: usize) -> (ParamStore, CnnEncoder) {
    let mut store = ParamStore::new();
    let cfg = CnnConfig {
        depth,
        in_channels: 2,
        spatial_rank: rank,
        base_width: 3,
        feature_dim,
    };
    let enc = CnnEncoder::init(&mut store, "enc", &cfg, &mut rng::stream(9, &[])).unwrap();
    (store, enc)
}

#[test]
fn cnn_output_is_feature_dim_for_all_configs() {
    for depth in [CnnDepth::Small, CnnDepth::Medium] {
        for (rank, shape) in [(3, vec![3, 2, 6, 8, 4]), (2, vec![2, 2, 9, 7])] {
            for mode in [Mode::Train, Mode::Eval] {
                let (store, enc) = cnn(depth, rank, 5);
                let mut tape = Tape::new();
                let mut scope = Scope::bind(&mut tape, &store, true, mode);
                let x = tape.constant(random(&shape, 11));
                let y = enc.forward(&mut tape, &mut scope, x).unwrap();
                assert_eq!(tape.shape(y), &[shape[0], 5]);
            }
        }
    }
}

#[test]
fn cnn_zero_input_yields_head_bias() {
    let (store, enc) = cnn(CnnDepth::Small, 3, 4);
    for mode in [Mode::Train, Mode::Eval] {
        let mut tape = Tape::new();
        let mut scope = Scope::bind(&mut tape, &store, false, mode);
        let x = tape.constant(Tensor::zeros(&[2, 2, 4, 4, 4]));
        let y = enc.forward(&mut tape, &mut scope, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-12));
    }
}

#[test]
fn cnn_eval_forward_is_deterministic_and_rejects_bad_shapes() {
    let (store, enc) = cnn(CnnDepth::Medium, 3, 4);
    let x = random(&[1, 2, 6, 6, 6], 12);
    let run = || {
        let mut tape = Tape::new();
        let mut scope = Scope::bind(&mut tape, &store, false, Mode::Eval);
        let v = tape.constant(x.clone());
        let y = enc.forward(&mut tape, &mut scope, v).unwrap();
        tape.value(y).to_bytes()
    };
    assert_eq!(run(), run());
    let mut tape = Tape::new();
    let mut scope = Scope::bind(&mut tape, &store, false, Mode::Eval);
    let bad = tape.constant(Tensor::zeros(&[1, 3, 6, 6, 6]));
    assert!(enc.forward(&mut tape, &mut scope, bad).is_err());
}

#[test]
fn cnn_full_network_gradients_match_finite_differences() {
    // Tiny config: F = 8, one residual stage beyond the stem.
    let (store, enc) = cnn(CnnDepth::Small, 3, 8);
    let x = random(&[3, 2, 4, 4, 4], 13);
    let w = random(&[3, 8], 14);
    for mode in [Mode::Train, Mode::Eval] {
        let report = gradcheck::check_params(&store, &[], mode, 1e-5, |tape, scope| {
            let vx = tape.constant(x.clone());
            let f = enc.forward(tape, scope, vx)?;
            let vw = tape.constant(w.clone());
            let p = tape.mul(f, vw)?;
            let p = tape.sigmoid(p);
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{mode:?}: {report:?}");
    }
}

fn vit(position_embeddings: bool, feature_dim: usize, depth: usize) -> (ParamStore, VitEncoder) {
    let cfg = VitConfig {
        token_dim: 4,
        heads: 2,
        d_k: 3,
        depth,
        mlp_hidden: 5,
        max_tokens: 8,
        position_embeddings,
        feature_dim,
    };
    let mut store = ParamStore::new();
    let enc = VitEncoder::init(&mut store, "vit", &cfg, &mut rng::stream(21, &[])).unwrap();
    (store, enc)
}

fn encode(store: &ParamStore, enc: &VitEncoder, tokens: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let scope = Scope::bind(&mut tape, store, false, Mode::Eval);
    let v = tape.constant(tokens.clone());
    let y = enc.forward(&mut tape, &scope, v).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn vit_single_patch_is_valid() {
    let (store, enc) = vit(true, 6, 2);
    let out = encode(&store, &enc, &random(&[1, 4], 22));
    assert_eq!(out.len(), 6);
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn vit_is_permutation_invariant_without_positions() {
    let (store, enc) = vit(false, 6, 2);
    let tokens = random(&[5, 4], 23);
    let perm = [3, 0, 4, 1, 2];
    let permuted: Vec<f64> = perm
        .iter()
        .flat_map(|&i| tokens.data()[i * 4..(i + 1) * 4].to_vec())
        .collect();
    let permuted = Tensor::new(vec![5, 4], permuted).unwrap();
    let a = encode(&store, &enc, &tokens);
    let b = encode(&store, &enc, &permuted);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-10);
    }
    // with positions, order matters
    let (store, enc) = vit(true, 6, 2);
    let a = encode(&store, &enc, &tokens);
    let b = encode(&store, &enc, &permuted);
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn vit_rejects_empty_and_oversized_inputs() {
    let (store, enc) = vit(true, 6, 1);
    let mut tape = Tape::new();
    let scope = Scope::bind(&mut tape, &store, false, Mode::Eval);
    assert!(enc.forward_batch(&mut tape, &scope, &[]).is_err());
    let too_many = tape.constant(Tensor::zeros(&[9, 4]));
    assert!(enc.forward(&mut tape, &scope, too_many).is_err());
    assert!(patch_tokens(&[], 2).is_err());
}

#[test]
fn vit_embedding_gradients_match_finite_differences() {
    let (store, enc) = vit(true, 8, 1);
    let tokens = random(&[3, 4], 24);
    let head = random(&[1, 8], 25);
    let report = gradcheck::check_params(
        &store,
        &["vit.embed.weight", "vit.embed.bias"],
        Mode::Eval,
        1e-5,
        |tape, scope| {
            let v = tape.constant(tokens.clone());
            let f = enc.forward(tape, scope, v)?;
            let w = tape.constant(head.clone());
            let s = tape.mul(f, w)?;
            let s = tape.sum(s);
            Ok(tape.sigmoid(s))
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn vit_full_network_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (store, enc) = vit(true, 8, 1);
        let tokens = random(&[4, 4], 30 + seed);
        let report = gradcheck::check_params(&store, &[], Mode::Eval, 1e-5, |tape, scope| {
            let v = tape.constant(tokens.clone());
            let f = enc.forward(tape, scope, v)?;
            let s = tape.sigmoid(f);
            Ok(tape.sum(s))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

#[test]
fn patch_tokens_average_cells() {
    let p = Tensor::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
    let t = patch_tokens(&[p.clone(), p], 2).unwrap();
    assert_eq!(t.shape(), &[2, 4]);
    assert_eq!(&t.data()[..4], &[2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn volume_tokens_tile_cubes() {
    let v = Tensor::new(vec![1, 2, 2, 4], (0..16).map(f64::from).collect()).unwrap();
    let t = volume_tokens(&v, 2).unwrap();
    assert_eq!(t.shape(), &[2, 8]);
    assert_eq!(t.data()[..8], [0.0, 1.0, 4.0, 5.0, 8.0, 9.0, 12.0, 13.0]);
}

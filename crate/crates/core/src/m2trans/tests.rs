use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_with_version;
use super::model::decode_rows;
use super::*;
use crate::corpus::{Grid, BOS, EOS, PAD};
use crate::diffmath::{grad_check_at, LAYER_NORM_EPS};

fn tiny(n_mem: usize, layers: usize, k: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        layers,
        n_mem,
        ff_dim: 12,
        vocab: 12,
        max_len: 10,
        k,
        grid: GridShape {
            rows: 2,
            cols: 2,
            dim: 3,
        },
    }
}

fn images(config: &ModelConfig, seed: u64) -> Vec<Grid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.k)
        .map(|_| Grid {
            shape: config.grid,
            data: Tensor::randn(&[config.grid.len()], 1.0, &mut rng).into_data(),
        })
        .collect()
}

/// Scales every weight so random models produce peaked distributions.
fn sharpen(p: &mut ModelParams, factor: f64) {
    for (name, t) in p.tensors_mut() {
        if name.starts_with("out.") {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

// ---------------------------------------------------------------------------
// Plain-loop reference forward pass.

type Mat = Vec<Vec<f64>>;

fn mat(p: &ModelParams, name: &str) -> Mat {
    let t = p.get(name).unwrap();
    if t.shape().len() == 1 {
        return vec![t.data().to_vec()];
    }
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

fn vecp(p: &ModelParams, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add_rows(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

fn layer_norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + LAYER_NORM_EPS).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) / s * g[i] + b[i]).collect()
        })
        .collect()
}

/// Attention where query row `i` sees keys `0..limit(i)`.
fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, limit: impl Fn(usize) -> usize) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let n = limit(i);
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| qi[c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

fn ff(p: &ModelParams, prefix: &str, x: &Mat) -> Mat {
    let h = add_bias(&mm(x, &mat(p, &format!("{prefix}.ff.w1"))), &vecp(p, &format!("{prefix}.ff.b1")));
    let h: Mat = h.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    add_bias(&mm(&h, &mat(p, &format!("{prefix}.ff.w2"))), &vecp(p, &format!("{prefix}.ff.b2")))
}

fn ln(p: &ModelParams, prefix: &str, x: &Mat) -> Mat {
    layer_norm(x, &vecp(p, &format!("{prefix}.g")), &vecp(p, &format!("{prefix}.b")))
}

fn ref_encode(p: &ModelParams, imgs: &[Grid]) -> Vec<Vec<Mat>> {
    let c = p.config();
    let mut out = vec![Vec::new(); c.layers];
    for g in imgs {
        let raw: Mat = g.data.chunks(c.grid.dim).map(|r| r.to_vec()).collect();
        let mut x = add_rows(&add_bias(&mm(&raw, &mat(p, "img.w")), &vecp(p, "img.b")), &mat(p, "img.pos"));
        for l in 0..c.layers {
            let e = format!("enc.{l}");
            let q = mm(&x, &mat(p, &format!("{e}.wq")));
            let mut k = mm(&x, &mat(p, &format!("{e}.wk")));
            let mut v = mm(&x, &mat(p, &format!("{e}.wv")));
            if c.n_mem > 0 {
                k.extend(mat(p, &format!("{e}.mk")));
                v.extend(mat(p, &format!("{e}.mv")));
            }
            let n = k.len();
            let a = mm(&attend(&q, &k, &v, c.heads, |_| n), &mat(p, &format!("{e}.wo")));
            let x1 = ln(p, &format!("{e}.ln1"), &add_rows(&x, &a));
            x = ln(p, &format!("{e}.ln2"), &add_rows(&x1, &ff(p, &e, &x1)));
            out[l].push(x.clone());
        }
    }
    out
}

fn ref_logits(p: &ModelParams, imgs: &[Grid], prefix: &[usize]) -> Mat {
    let c = p.config();
    let enc = ref_encode(p, imgs);
    let emb = mat(p, "tok.emb");
    let pos = mat(p, "tok.pos");
    let mut y: Mat = prefix
        .iter()
        .enumerate()
        .map(|(i, &t)| emb[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    for l in 0..c.layers {
        let dp = format!("dec.{l}");
        let sq = mm(&y, &mat(p, &format!("{dp}.self.wq")));
        let sk = mm(&y, &mat(p, &format!("{dp}.self.wk")));
        let sv = mm(&y, &mat(p, &format!("{dp}.self.wv")));
        let a = mm(&attend(&sq, &sk, &sv, c.heads, |i| i + 1), &mat(p, &format!("{dp}.self.wo")));
        let s = ln(p, &format!("{dp}.ln1"), &add_rows(&y, &a));
        let mut mesh = vec![vec![0.0; c.d]; y.len()];
        for (n, enc_n) in enc.iter().enumerate() {
            let cp = format!("{dp}.cross.{n}");
            let q = mm(&s, &mat(p, &format!("{cp}.wq")));
            let per_k: Vec<Mat> = enc_n
                .iter()
                .map(|x| {
                    let k = mm(x, &mat(p, &format!("{cp}.wk")));
                    let v = mm(x, &mat(p, &format!("{cp}.wv")));
                    let len = k.len();
                    mm(&attend(&q, &k, &v, c.heads, |_| len), &mat(p, &format!("{cp}.wo")))
                })
                .collect();
            let cn: Mat = (0..y.len())
                .map(|i| {
                    (0..c.d)
                        .map(|j| per_k.iter().map(|m| m[i][j]).fold(f64::NEG_INFINITY, f64::max))
                        .collect()
                })
                .collect();
            let joined: Mat = y.iter().zip(&cn).map(|(a, b)| a.iter().chain(b).cloned().collect()).collect();
            let g = add_bias(&mm(&joined, &mat(p, &format!("{dp}.gate.{n}.w"))), &vecp(p, &format!("{dp}.gate.{n}.b")));
            for i in 0..y.len() {
                for j in 0..c.d {
                    mesh[i][j] += 1.0 / (1.0 + (-g[i][j]).exp()) * cn[i][j];
                }
            }
        }
        let z = ln(p, &format!("{dp}.ln2"), &add_rows(&s, &mesh));
        y = ln(p, &format!("{dp}.ln3"), &add_rows(&z, &ff(p, &dp, &z)));
    }
    add_bias(&mm(&y, &mat(p, "out.w")), &vecp(p, "out.b"))
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

// ---------------------------------------------------------------------------

#[test]
fn config_validation_and_shapes() {
    let c = tiny(2, 2, 2);
    c.validate().unwrap();
    let mut bad = c.clone();
    bad.heads = 3;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let p = ModelParams::init(&c, 0).unwrap();
    assert_eq!(p.tensors().len(), c.param_shapes().len());
    assert_eq!(p.get("enc.1.mk").unwrap().shape(), &[2, 8]);
    assert!(ModelParams::init(&tiny(0, 1, 1), 0).unwrap().get("enc.0.mk").is_none());
    assert_eq!(p, ModelParams::init(&c, 0).unwrap());
    assert_ne!(p, ModelParams::init(&c, 1).unwrap());
    let desk = ModelConfig::desk(50, c.grid, 2, 60);
    assert_eq!((desk.d, desk.heads, desk.layers, desk.n_mem), (64, 4, 2, 8));
}

#[test]
fn encoder_matches_reference_with_and_without_memory() {
    for n_mem in [0, 3] {
        for seed in 0..10 {
            let c = tiny(n_mem, 2, 2);
            let p = ModelParams::init(&c, seed).unwrap();
            let imgs = images(&c, seed + 100);
            let got = p.encode_images(&imgs).unwrap();
            let want = ref_encode(&p, &imgs);
            for (gl, wl) in got.iter().zip(&want) {
                for (g, w) in gl.iter().zip(wl) {
                    assert_close(g.data(), &w.concat(), 1e-12);
                }
            }
        }
    }
}

#[test]
fn decoder_matches_reference() {
    for seed in 0..10 {
        let c = tiny(2, 2, 2);
        let p = ModelParams::init(&c, seed).unwrap();
        let imgs = images(&c, seed + 7);
        let prefix = [BOS, 5, 7, 4, 9];
        let got = p.decode_logits(&imgs, &prefix).unwrap();
        assert_close(got.data(), &ref_logits(&p, &imgs, &prefix).concat(), 1e-12);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    for seed in 0..10 {
        let c = tiny(3, 2, 2);
        let p = ModelParams::init(&c, seed).unwrap();
        let w = attention_weights(&p, &images(&c, seed)).unwrap();
        assert_eq!(w.len(), c.layers * c.k * c.heads);
        for t in &w {
            assert_eq!(t.cols(), c.grid.positions() + c.n_mem);
            for r in 0..t.rows() {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn memory_participates_in_encoding() {
    let c = tiny(2, 1, 1);
    let mut p = ModelParams::init(&c, 3).unwrap();
    let imgs = images(&c, 3);
    let before = p.encode_images(&imgs).unwrap();
    p.get_mut("enc.0.mk").unwrap().data_mut()[0] += 0.5;
    let after = p.encode_images(&imgs).unwrap();
    let delta: f64 = before[0][0].data().iter().zip(after[0][0].data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(delta > 1e-6);
}

#[test]
fn duplicated_image_equals_single_image() {
    let one = tiny(2, 2, 1);
    let two = tiny(2, 2, 2);
    let p1 = ModelParams::init(&one, 4).unwrap();
    let p2 = ModelParams::from_tensors(two.clone(), p1.tensors().clone()).unwrap();
    let img = images(&one, 4);
    let doubled = vec![img[0].clone(), img[0].clone()];
    let prefix = [BOS, 6, 8];
    assert_eq!(p1.decode_logits(&img, &prefix).unwrap(), p2.decode_logits(&doubled, &prefix).unwrap());
}

#[test]
fn causal_mask_hides_future_tokens() {
    for seed in 0..10 {
        let c = tiny(2, 2, 2);
        let p = ModelParams::init(&c, seed).unwrap();
        let imgs = images(&c, seed);
        let short = p.decode_logits(&imgs, &[BOS, 4, 5]).unwrap();
        let long = p.decode_logits(&imgs, &[BOS, 4, 5, 9, 10]).unwrap();
        assert_close(short.data(), &long.data()[..short.len()], 1e-12);
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let c = tiny(2, 2, 2);
    let p = ModelParams::init(&c, 9).unwrap();
    let imgs = images(&c, 9);
    let prefix = [BOS, 4, 7, 7, 11, 5];
    let full = p.decode_logits(&imgs, &prefix).unwrap();
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let enc = encode(&mut tape, &b, &c, &imgs, None).unwrap();
    let ctx = DecodeContext::new(&mut tape, &b, enc).unwrap();
    let mut state = DecoderState::new(&c);
    for (i, &t) in prefix.iter().enumerate() {
        let row = decode_rows(&mut tape, &b, &c, &ctx, &mut state, &[t], None).unwrap();
        assert_close(tape.value(row).data(), full.row(i), 1e-12);
    }
    assert_eq!(state.position(), prefix.len());
}

#[test]
fn gates_lie_strictly_inside_unit_interval() {
    let c = tiny(2, 2, 2);
    let p = ModelParams::init(&c, 2).unwrap();
    let gates = p.gate_values(&images(&c, 2), &[BOS, 3, 4]).unwrap();
    assert_eq!(gates.len(), c.layers * c.layers);
    for g in gates {
        assert!(g.data().iter().all(|&a| a > 0.0 && a < 1.0));
    }
}

#[test]
fn uniform_model_loss_is_log_vocab() {
    let mut c = tiny(2, 2, 2);
    c.vocab = 20;
    let mut p = ModelParams::init(&c, 0).unwrap();
    for name in ["out.w", "out.b"] {
        p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let imgs = images(&c, 0);
    let targets = [5, 6, 7, EOS];
    let loss = p.nll_loss(&[(&imgs, &targets)]).unwrap();
    assert!((loss - 20f64.ln()).abs() < 1e-9);
}

#[test]
fn trailing_pad_is_masked() {
    let c = tiny(2, 2, 2);
    let p = ModelParams::init(&c, 1).unwrap();
    let a = images(&c, 1);
    let b = images(&c, 2);
    let plain = p.nll_loss(&[(&a, &[5, 6, EOS][..]), (&b, &[7, EOS][..])]).unwrap();
    let padded = p
        .nll_loss(&[(&a, &[5, 6, EOS, PAD, PAD][..]), (&b, &[7, EOS, PAD][..])])
        .unwrap();
    assert!((plain - padded).abs() < 1e-12);
}

#[test]
fn invalid_inputs_are_rejected() {
    let c = tiny(2, 2, 2);
    let p = ModelParams::init(&c, 1).unwrap();
    let imgs = images(&c, 1);
    assert!(matches!(p.nll_loss(&[]), Err(Error::Empty(_))));
    assert!(matches!(
        p.decode_logits(&imgs, &[BOS, 99]),
        Err(Error::TokenOutOfRange { id: 99, .. })
    ));
    assert!(matches!(p.decode_logits(&imgs[..1], &[BOS]), Err(Error::Shape { .. })));
    assert!(p.decode_logits(&imgs, &[BOS; 11]).is_err());
}

/// Element-wise comparison against central differences. Elements whose
/// gradient is below `floor` are held to an absolute bound instead, since
/// the difference quotient cannot resolve them below one ulp of the loss.
fn check_model_gradients(c: &ModelConfig, seed: u64, floor: f64) -> f64 {
    let p = ModelParams::init(c, seed).unwrap();
    let a = images(c, seed + 50);
    let b = images(c, seed + 60);
    let batch: Vec<(&[Grid], &[usize])> = vec![(&a, &[4, 5, 6, EOS][..]), (&b, &[7, 8, EOS][..])];
    let f = |q: &ModelParams| q.nll_loss(&batch).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, true);
    let loss = nll_on_tape(&mut tape, &bound, c, &batch).unwrap();
    tape.backward(loss).unwrap();
    let h = crate::diffmath::FD_STEP;
    let mut worst: f64 = 0.0;
    for (name, var) in bound.named() {
        let n = p.get(name).unwrap().len();
        let g = tape.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let mut q = p.clone();
            q.get_mut(name).unwrap().data_mut()[i] += h;
            let fp = f(&q);
            q.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let fm = f(&q);
            let num = (fp - fm) / (2.0 * h);
            if g[i].abs().max(num.abs()) < floor {
                assert!((g[i] - num).abs() < 1e-10, "{name}[{i}]: {} vs {num}", g[i]);
            } else {
                worst = worst.max(crate::diffmath::relative_error(g[i], num));
            }
        }
    }
    worst
}

#[test]
fn full_model_gradient_check() {
    let c = tiny(2, 2, 2);
    for seed in 0..3 {
        let err = check_model_gradients(&c, seed, 1e-6);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn gradient_checker_agrees_on_a_well_conditioned_seed() {
    let c = tiny(2, 2, 2);
    let p = ModelParams::init(&c, 0).unwrap();
    let names: Vec<String> = p.tensors().keys().cloned().collect();
    let inputs: Vec<Tensor> = p.tensors().values().cloned().collect();
    let a = images(&c, 50);
    let b = images(&c, 60);
    let err = grad_check_at(
        |tape, vars| {
            let map = names.iter().cloned().zip(vars.iter().copied()).collect();
            let bound = Bound::build(&c, &map);
            nll_on_tape(tape, &bound, &c, &[(&a, &[4, 5, 6, EOS][..]), (&b, &[7, 8, EOS][..])])
        },
        &inputs,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..20 {
        let c = tiny(2, 2, 2);
        let mut p = ModelParams::init(&c, seed).unwrap();
        sharpen(&mut p, 3.0);
        let imgs = images(&c, seed);
        assert_eq!(p.decode_beam(&imgs, 1).unwrap(), p.decode_greedy(&imgs).unwrap());
    }
}

#[test]
fn wider_beam_scores_at_least_greedy() {
    for seed in 0..50 {
        let c = tiny(2, 2, 2);
        let p = ModelParams::init(&c, seed).unwrap();
        let imgs = images(&c, seed);
        let g = p.decode_greedy(&imgs).unwrap();
        let b = p.decode_beam(&imgs, 4).unwrap();
        assert!(b.log_prob >= g.log_prob - 1e-12, "seed {seed}: {} < {}", b.log_prob, g.log_prob);
    }
}

#[test]
fn sampling_is_seeded() {
    let c = tiny(2, 2, 2);
    let p = ModelParams::init(&c, 5).unwrap();
    let imgs = images(&c, 5);
    let mode = DecodeMode::Sample {
        seed: 11,
        temperature: 1.0,
    };
    assert_eq!(p.decode(&imgs, mode).unwrap(), p.decode(&imgs, mode).unwrap());
    let outputs: std::collections::HashSet<Vec<usize>> = (0..20)
        .map(|s| {
            p.decode(&imgs, DecodeMode::Sample { seed: s, temperature: 1.0 })
                .unwrap()
                .tokens
        })
        .collect();
    assert!(outputs.len() > 1);
}

#[test]
fn decoded_log_prob_matches_teacher_forcing() {
    let c = tiny(2, 2, 2);
    for seed in 0..5 {
        let p = ModelParams::init(&c, seed).unwrap();
        let imgs = images(&c, seed);
        for d in [
            p.decode_greedy(&imgs).unwrap(),
            p.decode(&imgs, DecodeMode::Sample { seed, temperature: 1.0 }).unwrap(),
            p.decode_beam(&imgs, 3).unwrap(),
        ] {
            let lp = p.log_prob(&imgs, &d.targets()).unwrap();
            assert!((lp - d.log_prob).abs() < 1e-9);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let c = tiny(2, 2, 2);
    let p = ModelParams::init(&c, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&p, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), p.config());
    for ((n1, t1), (n2, t2)) in back.tensors().iter().zip(p.tensors()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }
    assert_eq!(&std::fs::read(&path).unwrap()[..4], CHECKPOINT_MAGIC);
}

#[test]
fn checkpoint_errors() {
    let c = tiny(2, 2, 2);
    let p = ModelParams::init(&c, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&p, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let truncated = dir.path().join("t.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(load_checkpoint(&truncated), Err(Error::Checksum(_))));

    let flipped = dir.path().join("f.ckpt");
    let mut b = bytes.clone();
    let mid = b.len() / 2;
    b[mid] ^= 1;
    std::fs::write(&flipped, &b).unwrap();
    assert!(matches!(load_checkpoint(&flipped), Err(Error::Checksum(_))));

    let future = dir.path().join("v.ckpt");
    save_with_version(&p, &future, CHECKPOINT_VERSION + 1).unwrap();
    match load_checkpoint(&future) {
        Err(Error::CheckpointVersion { found, expected }) => {
            assert_eq!((found, expected), (CHECKPOINT_VERSION + 1, CHECKPOINT_VERSION))
        }
        other => panic!("unexpected {other:?}"),
    }

    let mut narrow = c.clone();
    narrow.d = 4;
    assert!(matches!(load_checkpoint_for(&path, &narrow), Err(Error::ConfigMismatch(_))));
    assert!(load_checkpoint_for(&path, &c).is_ok());
}

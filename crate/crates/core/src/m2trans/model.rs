//! Forward pass: memory-augmented encoder and meshed decoder on a tape.

use super::{AttnVars, Bound, FfVars, ModelConfig, ModelParams};
use crate::corpus::{Grid, BOS, PAD};
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Encoder outputs indexed by `[layer][image]`, each `positions × d`.
pub struct Encoded {
    pub layers: Vec<Vec<Var>>,
}

/// Multi-head scaled dot-product attention of `q` (`r×d`) over `k`, `v`
/// (`t×d`). `mask` is added to the scores before the softmax.
fn multi_head(
    tape: &mut Tape,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
    mut capture: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                tape.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, scale)?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let weights = tape.softmax(scores, 1)?;
        if let Some(c) = capture.as_deref_mut() {
            c.push(weights);
        }
        outs.push(tape.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn feed_forward(tape: &mut Tape, x: Var, ff: &FfVars) -> Result<Var> {
    let h = linear(tape, x, ff.w1, ff.b1)?;
    let h = tape.relu(h)?;
    linear(tape, h, ff.w2, ff.b2)
}

fn residual_norm(tape: &mut Tape, x: Var, delta: Var, ln: (Var, Var)) -> Result<Var> {
    let s = tape.add(x, delta)?;
    tape.layer_norm(s, ln.0, ln.1)
}

fn check_images(config: &ModelConfig, images: &[Grid]) -> Result<()> {
    if images.len() != config.k {
        return Err(Error::shape(
            "encode_images",
            format!("expected {} images, got {}", config.k, images.len()),
        ));
    }
    for g in images {
        if g.shape != config.grid || g.data.len() != config.grid.len() {
            return Err(Error::shape(
                "encode_images",
                format!("grid {:?} does not match {:?}", g.shape, config.grid),
            ));
        }
    }
    Ok(())
}

/// Projects each image grid to width `d` and runs the encoder stack,
/// keeping every layer's output.
pub(crate) fn encode(
    tape: &mut Tape,
    b: &Bound,
    config: &ModelConfig,
    images: &[Grid],
    mut capture: Option<&mut Vec<Var>>,
) -> Result<Encoded> {
    check_images(config, images)?;
    let mut layers = vec![Vec::with_capacity(images.len()); config.layers];
    for g in images {
        let raw = tape.constant(Tensor::matrix(config.grid.positions(), config.grid.dim, g.data.clone())?);
        let x = linear(tape, raw, b.img_w, b.img_b)?;
        let mut x = tape.add(x, b.img_pos)?;
        for (l, lv) in b.enc.iter().enumerate() {
            let q = tape.matmul(x, lv.wq)?;
            let mut k = tape.matmul(x, lv.wk)?;
            let mut v = tape.matmul(x, lv.wv)?;
            if let Some((mk, mv)) = lv.mem {
                k = tape.concat(&[k, mk], 0)?;
                v = tape.concat(&[v, mv], 0)?;
            }
            let a = multi_head(tape, config.heads, q, k, v, None, capture.as_deref_mut())?;
            let a = tape.matmul(a, lv.wo)?;
            let x1 = residual_norm(tape, x, a, lv.ln1)?;
            let f = feed_forward(tape, x1, &lv.ff)?;
            x = residual_norm(tape, x1, f, lv.ln2)?;
            layers[l].push(x);
        }
    }
    Ok(Encoded { layers })
}

/// Encoder outputs plus the cross-attention keys and values every decoder
/// layer needs, computed once per decode.
pub struct DecodeContext {
    pub encoded: Encoded,
    /// `[decoder layer][encoder layer][image]` key/value pairs.
    cross_kv: Vec<Vec<Vec<(Var, Var)>>>,
}

impl DecodeContext {
    pub fn new(tape: &mut Tape, b: &Bound, encoded: Encoded) -> Result<Self> {
        let mut cross_kv = Vec::with_capacity(b.dec.len());
        for lv in &b.dec {
            let mut per_n = Vec::with_capacity(lv.cross.len());
            for (n, c) in lv.cross.iter().enumerate() {
                let mut per_k = Vec::new();
                for &x in &encoded.layers[n] {
                    per_k.push((tape.matmul(x, c.wk)?, tape.matmul(x, c.wv)?));
                }
                per_n.push(per_k);
            }
            cross_kv.push(per_n);
        }
        Ok(DecodeContext { encoded, cross_kv })
    }
}

/// Self-attention keys and values of the positions decoded so far.
#[derive(Clone, Debug)]
pub struct DecoderState {
    caches: Vec<Option<(Var, Var)>>,
    pos: usize,
}

impl DecoderState {
    pub fn new(config: &ModelConfig) -> Self {
        DecoderState {
            caches: vec![None; config.layers],
            pos: 0,
        }
    }

    /// Number of positions already fed.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Additive mask letting row `i` see key columns `0..=offset+i`.
fn causal_mask(rows: usize, offset: usize) -> Result<Tensor> {
    let cols = offset + rows;
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in offset + i + 1..cols {
            data[i * cols + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::matrix(rows, cols, data)
}

fn cross_attend(tape: &mut Tape, heads: usize, query: Var, c: &AttnVars, kv: &[(Var, Var)]) -> Result<Var> {
    let q = tape.matmul(query, c.wq)?;
    let mut per_image = Vec::with_capacity(kv.len());
    for &(k, v) in kv {
        let a = multi_head(tape, heads, q, k, v, None, None)?;
        per_image.push(tape.matmul(a, c.wo)?);
    }
    if per_image.len() == 1 {
        Ok(per_image[0])
    } else {
        tape.max_over_set(&per_image)
    }
}

/// Feeds `tokens` after the positions already in `state` and returns their
/// next-token logits (`tokens.len() × vocab`).
pub(crate) fn decode_rows(
    tape: &mut Tape,
    b: &Bound,
    config: &ModelConfig,
    ctx: &DecodeContext,
    state: &mut DecoderState,
    tokens: &[usize],
    mut gates: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let r = tokens.len();
    if r == 0 {
        return Err(Error::Validation("decoder input is empty".into()));
    }
    if state.pos + r > config.max_len {
        return Err(Error::Validation(format!(
            "sequence of {} positions exceeds max_len {}",
            state.pos + r,
            config.max_len
        )));
    }
    let positions: Vec<usize> = (state.pos..state.pos + r).collect();
    let emb = tape.embedding(b.tok_emb, tokens)?;
    let pos = tape.embedding(b.tok_pos, &positions)?;
    let mut y = tape.add(emb, pos)?;
    let mask = if r > 1 {
        Some(tape.constant(causal_mask(r, state.pos)?))
    } else {
        None
    };
    for (l, lv) in b.dec.iter().enumerate() {
        let q = tape.matmul(y, lv.attn.wq)?;
        let k_new = tape.matmul(y, lv.attn.wk)?;
        let v_new = tape.matmul(y, lv.attn.wv)?;
        let (k, v) = match state.caches[l] {
            Some((kc, vc)) => (tape.concat(&[kc, k_new], 0)?, tape.concat(&[vc, v_new], 0)?),
            None => (k_new, v_new),
        };
        state.caches[l] = Some((k, v));
        let a = multi_head(tape, config.heads, q, k, v, mask, None)?;
        let a = tape.matmul(a, lv.attn.wo)?;
        let s = residual_norm(tape, y, a, lv.ln1)?;

        let mut mesh: Option<Var> = None;
        for (n, c) in lv.cross.iter().enumerate() {
            let cn = cross_attend(tape, config.heads, s, c, &ctx.cross_kv[l][n])?;
            let joined = tape.concat(&[y, cn], 1)?;
            let (gw, gb) = lv.gates[n];
            let g = linear(tape, joined, gw, gb)?;
            let alpha = tape.sigmoid(g)?;
            if let Some(c) = gates.as_deref_mut() {
                c.push(alpha);
            }
            let term = tape.mul(alpha, cn)?;
            mesh = Some(match mesh {
                Some(m) => tape.add(m, term)?,
                None => term,
            });
        }
        let z = residual_norm(tape, s, mesh.expect("at least one encoder layer"), lv.ln2)?;
        let f = feed_forward(tape, z, &lv.ff)?;
        y = residual_norm(tape, z, f, lv.ln3)?;
    }
    state.pos += r;
    linear(tape, y, b.out_w, b.out_b)
}

/// Teacher-forcing inputs for `targets`: BOS followed by all but the last
/// target.
pub(crate) fn shifted_inputs(targets: &[usize]) -> Vec<usize> {
    let mut inputs = Vec::with_capacity(targets.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
    inputs
}

/// `weight · Σ_t CE_t` over the non-pad positions of `targets` under
/// teacher forcing. Returns the loss and the number of counted positions.
pub fn sequence_loss(
    tape: &mut Tape,
    b: &Bound,
    config: &ModelConfig,
    ctx: &DecodeContext,
    targets: &[usize],
    weight: f64,
) -> Result<(Var, usize)> {
    if targets.is_empty() {
        return Err(Error::Empty("target sequence"));
    }
    let inputs = shifted_inputs(targets);
    let mut state = DecoderState::new(config);
    let logits = decode_rows(tape, b, config, ctx, &mut state, &inputs, None)?;
    let weights: Vec<f64> = targets.iter().map(|&t| if t == PAD { 0.0 } else { weight }).collect();
    let counted = targets.iter().filter(|&&t| t != PAD).count();
    Ok((tape.cross_entropy(logits, targets, &weights)?, counted))
}

/// Mean token cross-entropy over a batch of `(images, targets)` pairs, where
/// targets end with EOS and may carry trailing PAD.
pub fn nll_on_tape(tape: &mut Tape, b: &Bound, config: &ModelConfig, batch: &[(&[Grid], &[usize])]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let total: usize = batch.iter().map(|(_, t)| t.iter().filter(|&&x| x != PAD).count()).sum();
    if total == 0 {
        return Err(Error::Empty("batch targets"));
    }
    let w = 1.0 / total as f64;
    let mut loss: Option<Var> = None;
    for (images, targets) in batch {
        let enc = encode(tape, b, config, images, None)?;
        let ctx = DecodeContext::new(tape, b, enc)?;
        let (l, _) = sequence_loss(tape, b, config, &ctx, targets, w)?;
        loss = Some(match loss {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(loss.expect("non-empty batch"))
}

/// Encoder self-attention weight matrices of every layer, image and head.
pub fn attention_weights(params: &ModelParams, images: &[Grid]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let mut captured = Vec::new();
    encode(&mut tape, &b, params.config(), images, Some(&mut captured))?;
    Ok(captured.into_iter().map(|v| tape.value(v).clone()).collect())
}

impl ModelParams {
    /// Encoder outputs as `[layer][image]` tensors.
    pub fn encode_images(&self, images: &[Grid]) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let enc = encode(&mut tape, &b, &self.config, images, None)?;
        Ok(enc
            .layers
            .iter()
            .map(|per_k| per_k.iter().map(|v| tape.value(*v).clone()).collect())
            .collect())
    }

    /// Next-token logits for every position of `prefix` (`len × vocab`).
    pub fn decode_logits(&self, images: &[Grid], prefix: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let enc = encode(&mut tape, &b, &self.config, images, None)?;
        let ctx = DecodeContext::new(&mut tape, &b, enc)?;
        let mut state = DecoderState::new(&self.config);
        let logits = decode_rows(&mut tape, &b, &self.config, &ctx, &mut state, prefix, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Gate activations of every decoder layer and encoder layer for `prefix`.
    pub fn gate_values(&self, images: &[Grid], prefix: &[usize]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let enc = encode(&mut tape, &b, &self.config, images, None)?;
        let ctx = DecodeContext::new(&mut tape, &b, enc)?;
        let mut state = DecoderState::new(&self.config);
        let mut gates = Vec::new();
        decode_rows(&mut tape, &b, &self.config, &ctx, &mut state, prefix, Some(&mut gates))?;
        Ok(gates.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Mean token cross-entropy under teacher forcing.
    pub fn nll_loss(&self, batch: &[(&[Grid], &[usize])]) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let loss = nll_on_tape(&mut tape, &b, &self.config, batch)?;
        Ok(tape.value(loss).item())
    }

    /// `log P(targets | images)` under teacher forcing.
    pub fn log_prob(&self, images: &[Grid], targets: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let enc = encode(&mut tape, &b, &self.config, images, None)?;
        let ctx = DecodeContext::new(&mut tape, &b, enc)?;
        let (loss, _) = sequence_loss(&mut tape, &b, &self.config, &ctx, targets, 1.0)?;
        Ok(-tape.value(loss).item())
    }

    /// Teacher-forced next-token accuracy over non-pad targets:
    /// `(correct, counted)`.
    pub fn token_accuracy(&self, images: &[Grid], targets: &[usize]) -> Result<(usize, usize)> {
        if targets.is_empty() {
            return Err(Error::Empty("target sequence"));
        }
        let logits = self.decode_logits(images, &shifted_inputs(targets))?;
        let v = logits.cols();
        let mut correct = 0;
        let mut counted = 0;
        for (i, &t) in targets.iter().enumerate() {
            if t == PAD {
                continue;
            }
            counted += 1;
            let row = logits.row(i);
            let best = (0..v).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            if best == t {
                correct += 1;
            }
        }
        Ok((correct, counted))
    }
}

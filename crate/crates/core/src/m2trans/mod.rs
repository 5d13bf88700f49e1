//! Meshed-memory transformer over K image feature grids: a
//! memory-augmented encoder, a meshed decoder with per-layer sigmoid gates
//! and greedy, sampling and beam decoding.

mod checkpoint;
mod decode;
mod model;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::GridShape;
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{DecodeMode, Decoded};
pub use model::{attention_weights, nll_on_tape, sequence_loss, DecodeContext, DecoderState, Encoded};
pub(crate) use model::encode;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    pub heads: usize,
    /// Encoder and decoder layer count.
    pub layers: usize,
    /// Persistent memory slots per encoder layer.
    pub n_mem: usize,
    pub ff_dim: usize,
    pub vocab: usize,
    /// Maximum generated tokens, EOS included; also the position table size.
    pub max_len: usize,
    /// Images per study.
    pub k: usize,
    pub grid: GridShape,
}

impl ModelConfig {
    /// Desk-scale defaults: d=64, 4 heads, 2 layers, 8 memory slots.
    pub fn desk(vocab: usize, grid: GridShape, k: usize, max_len: usize) -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            layers: 2,
            n_mem: 8,
            ff_dim: 128,
            vocab,
            max_len,
            k,
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("width {} must be a positive multiple of heads {}", self.d, self.heads));
        }
        if self.layers == 0 || self.ff_dim == 0 {
            return fail("layers and ff_dim must be positive".into());
        }
        if self.vocab <= crate::corpus::UNK {
            return fail(format!("vocabulary of {} cannot hold the special tokens", self.vocab));
        }
        if self.max_len == 0 || self.k == 0 || self.grid.is_empty() {
            return fail("max_len, k and the grid shape must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d, self.ff_dim);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        push("img.w".into(), vec![self.grid.dim, d]);
        push("img.b".into(), vec![d]);
        push("img.pos".into(), vec![self.grid.positions(), d]);
        for l in 0..self.layers {
            let p = format!("enc.{l}");
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.{w}"), vec![d, d]);
            }
            if self.n_mem > 0 {
                push(format!("{p}.mk"), vec![self.n_mem, d]);
                push(format!("{p}.mv"), vec![self.n_mem, d]);
            }
            push_ff(&mut push, &p, d, f);
            for ln in ["ln1", "ln2"] {
                push(format!("{p}.{ln}.g"), vec![d]);
                push(format!("{p}.{ln}.b"), vec![d]);
            }
        }
        for l in 0..self.layers {
            let p = format!("dec.{l}");
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.self.{w}"), vec![d, d]);
            }
            for n in 0..self.layers {
                for w in ["wq", "wk", "wv", "wo"] {
                    push(format!("{p}.cross.{n}.{w}"), vec![d, d]);
                }
                push(format!("{p}.gate.{n}.w"), vec![2 * d, d]);
                push(format!("{p}.gate.{n}.b"), vec![d]);
            }
            push_ff(&mut push, &p, d, f);
            for ln in ["ln1", "ln2", "ln3"] {
                push(format!("{p}.{ln}.g"), vec![d]);
                push(format!("{p}.{ln}.b"), vec![d]);
            }
        }
        push("tok.emb".into(), vec![self.vocab, d]);
        push("tok.pos".into(), vec![self.max_len, d]);
        push("out.w".into(), vec![d, self.vocab]);
        push("out.b".into(), vec![self.vocab]);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

fn push_ff(push: &mut impl FnMut(String, Vec<usize>), prefix: &str, d: usize, f: usize) {
    push(format!("{prefix}.ff.w1"), vec![d, f]);
    push(format!("{prefix}.ff.b1"), vec![f]);
    push(format!("{prefix}.ff.w2"), vec![f, d]);
    push(format!("{prefix}.ff.b2"), vec![d]);
}

/// Named parameter tensors of one model, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Random initialization: weights ~ N(0, 1/fan_in), layer-norm gains 1,
    /// biases 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".g") {
                Tensor::filled(&shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let fan_in = if name.ends_with("emb") || name.ends_with("pos") || name.ends_with(".mk") || name.ends_with(".mv") {
                    shape[1]
                } else {
                    shape[0]
                };
                Tensor::randn(&shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    /// Assembles params from named tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ConfigMismatch(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::ConfigMismatch(format!("missing tensor {name}"))),
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Registers every tensor on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound::build(&self.config, &vars)
    }
}

pub(crate) struct EncLayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mem: Option<(Var, Var)>,
    pub ff: FfVars,
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
}

pub(crate) struct FfVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub(crate) struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

pub(crate) struct DecLayerVars {
    pub attn: AttnVars,
    /// Cross-attention per encoder layer.
    pub cross: Vec<AttnVars>,
    /// Gate weight and bias per encoder layer.
    pub gates: Vec<(Var, Var)>,
    pub ff: FfVars,
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
    pub ln3: (Var, Var),
}

/// Parameter handles on a tape, grouped by layer.
pub struct Bound {
    pub(crate) img_w: Var,
    pub(crate) img_b: Var,
    pub(crate) img_pos: Var,
    pub(crate) enc: Vec<EncLayerVars>,
    pub(crate) dec: Vec<DecLayerVars>,
    pub(crate) tok_emb: Var,
    pub(crate) tok_pos: Var,
    pub(crate) out_w: Var,
    pub(crate) out_b: Var,
    names: Vec<(String, Var)>,
}

impl Bound {
    /// Groups already-registered variables by their parameter names.
    /// Panics if a name required by `config` is missing.
    pub fn build(config: &ModelConfig, vars: &HashMap<String, Var>) -> Bound {
        let v = |name: &str| -> Var { *vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound")) };
        let ff = |p: &str| FfVars {
            w1: v(&format!("{p}.ff.w1")),
            b1: v(&format!("{p}.ff.b1")),
            w2: v(&format!("{p}.ff.w2")),
            b2: v(&format!("{p}.ff.b2")),
        };
        let ln = |p: &str, n: &str| (v(&format!("{p}.{n}.g")), v(&format!("{p}.{n}.b")));
        let attn = |p: &str| AttnVars {
            wq: v(&format!("{p}.wq")),
            wk: v(&format!("{p}.wk")),
            wv: v(&format!("{p}.wv")),
            wo: v(&format!("{p}.wo")),
        };
        let enc = (0..config.layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncLayerVars {
                    wq: v(&format!("{p}.wq")),
                    wk: v(&format!("{p}.wk")),
                    wv: v(&format!("{p}.wv")),
                    wo: v(&format!("{p}.wo")),
                    mem: (config.n_mem > 0).then(|| (v(&format!("{p}.mk")), v(&format!("{p}.mv")))),
                    ff: ff(&p),
                    ln1: ln(&p, "ln1"),
                    ln2: ln(&p, "ln2"),
                }
            })
            .collect();
        let dec = (0..config.layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecLayerVars {
                    attn: attn(&format!("{p}.self")),
                    cross: (0..config.layers).map(|n| attn(&format!("{p}.cross.{n}"))).collect(),
                    gates: (0..config.layers)
                        .map(|n| (v(&format!("{p}.gate.{n}.w")), v(&format!("{p}.gate.{n}.b"))))
                        .collect(),
                    ff: ff(&p),
                    ln1: ln(&p, "ln1"),
                    ln2: ln(&p, "ln2"),
                    ln3: ln(&p, "ln3"),
                }
            })
            .collect();
        let mut names: Vec<(String, Var)> = vars.iter().map(|(n, v)| (n.clone(), *v)).collect();
        names.sort();
        Bound {
            img_w: v("img.w"),
            img_b: v("img.b"),
            img_pos: v("img.pos"),
            enc,
            dec,
            tok_emb: v("tok.emb"),
            tok_pos: v("tok.pos"),
            out_w: v("out.w"),
            out_b: v("out.b"),
            names,
        }
    }

    /// Bound variables ordered by parameter name.
    pub fn named(&self) -> &[(String, Var)] {
        &self.names
    }
}

#[cfg(test)]
mod tests;

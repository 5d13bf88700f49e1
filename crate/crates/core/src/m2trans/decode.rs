//! Greedy, sampling and beam decoding with cached self-attention keys.

use std::cmp::Ordering;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{decode_rows, encode, DecodeContext, DecoderState};
use super::{Bound, ModelConfig, ModelParams};
use crate::corpus::{Grid, BOS, EOS, PAD};
use crate::diffmath::Tape;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample { seed: u64, temperature: f64 },
    Beam { width: usize },
}

/// A decoded sequence without BOS and EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// Total model log-probability, EOS included when emitted.
    pub log_prob: f64,
    /// Whether EOS was emitted before `max_len`.
    pub finished: bool,
}

impl Decoded {
    /// Target sequence for teacher forcing: tokens plus EOS when finished.
    pub fn targets(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if self.finished {
            t.push(EOS);
        }
        t
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    (1..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
}

struct Session<'a> {
    tape: Tape,
    bound: Bound,
    config: &'a ModelConfig,
    ctx: DecodeContext,
}

impl<'a> Session<'a> {
    fn new(params: &'a ModelParams, images: &[Grid]) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let enc = encode(&mut tape, &bound, params.config(), images, None)?;
        let ctx = DecodeContext::new(&mut tape, &bound, enc)?;
        Ok(Session {
            tape,
            bound,
            config: params.config(),
            ctx,
        })
    }

    /// Model log-probabilities of the next token after feeding `token`,
    /// with PAD and BOS set to `-inf` so they are never emitted.
    fn step(&mut self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        let logits = decode_rows(&mut self.tape, &self.bound, self.config, &self.ctx, state, &[token], None)?;
        let mut lp = log_softmax(self.tape.value(logits).data());
        lp[PAD] = f64::NEG_INFINITY;
        lp[BOS] = f64::NEG_INFINITY;
        Ok(lp)
    }
}

impl ModelParams {
    pub fn decode(&self, images: &[Grid], mode: DecodeMode) -> Result<Decoded> {
        match mode {
            DecodeMode::Greedy => self.decode_greedy(images),
            DecodeMode::Sample { seed, temperature } => {
                self.decode_sample(images, temperature, &mut ChaCha8Rng::seed_from_u64(seed))
            }
            DecodeMode::Beam { width } => self.decode_beam(images, width),
        }
    }

    pub fn decode_greedy(&self, images: &[Grid]) -> Result<Decoded> {
        let mut s = Session::new(self, images)?;
        let mut state = DecoderState::new(&self.config);
        let mut out = Decoded {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        };
        let mut last = BOS;
        for _ in 0..self.config.max_len {
            let lp = s.step(&mut state, last)?;
            let t = argmax(&lp);
            out.log_prob += lp[t];
            if t == EOS {
                out.finished = true;
                break;
            }
            out.tokens.push(t);
            last = t;
        }
        Ok(out)
    }

    /// Draws each token from `softmax(logits / temperature)`; the reported
    /// log-probability is under the untempered model.
    pub fn decode_sample<R: Rng + ?Sized>(&self, images: &[Grid], temperature: f64, rng: &mut R) -> Result<Decoded> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Validation(format!("temperature {temperature} must be positive")));
        }
        let mut s = Session::new(self, images)?;
        let mut state = DecoderState::new(&self.config);
        let mut out = Decoded {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        };
        let mut last = BOS;
        for _ in 0..self.config.max_len {
            let lp = s.step(&mut state, last)?;
            let scaled: Vec<f64> = lp.iter().map(|x| x / temperature).collect();
            let probs: Vec<f64> = log_softmax(&scaled).iter().map(|x| x.exp()).collect();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut t = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    t = i;
                    break;
                }
            }
            out.log_prob += lp[t];
            if t == EOS {
                out.finished = true;
                break;
            }
            out.tokens.push(t);
            last = t;
        }
        Ok(out)
    }

    /// Beam search over summed log-probability without length
    /// normalization. Returns the best hypothesis that emitted EOS or
    /// reached `max_len`; ties keep the earliest completed one.
    pub fn decode_beam(&self, images: &[Grid], width: usize) -> Result<Decoded> {
        if width == 0 {
            return Err(Error::Validation("beam width must be at least 1".into()));
        }
        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
            state: DecoderState,
        }
        let mut s = Session::new(self, images)?;
        let mut alive = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            state: DecoderState::new(&self.config),
        }];
        let mut best: Option<Decoded> = None;
        for step in 0..self.config.max_len {
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            let mut next_states = Vec::with_capacity(alive.len());
            for (bi, h) in alive.iter().enumerate() {
                let mut state = h.state.clone();
                let last = h.tokens.last().copied().unwrap_or(BOS);
                let lp = s.step(&mut state, last)?;
                cands.extend(
                    lp.iter()
                        .enumerate()
                        .filter(|(_, l)| l.is_finite())
                        .map(|(t, l)| (h.score + l, bi, t)),
                );
                next_states.push(state);
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let last_step = step + 1 == self.config.max_len;
            let mut next = Vec::with_capacity(width);
            for &(score, bi, t) in cands.iter().take(width) {
                let mut tokens = alive[bi].tokens.clone();
                let finished = t == EOS;
                if !finished {
                    tokens.push(t);
                }
                if finished || last_step {
                    if best.as_ref().map_or(true, |b| score > b.log_prob) {
                        best = Some(Decoded {
                            tokens,
                            log_prob: score,
                            finished,
                        });
                    }
                } else {
                    next.push(Hyp {
                        tokens,
                        score,
                        state: next_states[bi].clone(),
                    });
                }
            }
            alive = next;
            // scores only decrease, so no live hypothesis can beat a
            // completed one that already scores at least as high
            let top_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if alive.is_empty() || best.as_ref().is_some_and(|b| b.log_prob >= top_alive) {
                break;
            }
        }
        Ok(best.expect("max_len >= 1 completes at least one hypothesis"))
    }
}

//! Encoder-decoder dialog model with an optional latent action layer.
//!
//! Parameters named `enc.*` form the encoder side θe (context encoder,
//! policy and posterior heads); `dec.*` form the decoder side θd (decoder,
//! output projection, latent embeddings and fusion weights).

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{EncoderKind, Fusion, ModelConfig, Objective};

use larl_tensor::{GradMode, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;

use crate::error::{LarlError, Result};
use crate::latent::{
    categorical_params, fuse_summation, gaussian_params, AttentionFusion, LatentEmbeddings, LatentKind, LatentParams,
    LatentSample,
};
use crate::nn::{dropout, uniform_param, AttnGruEncoder, Cell, Linear, Padded, RnnState};
use crate::rng::Rng;

/// Which half of the θe/θd partition a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn of(name: &str) -> Option<Side> {
        if name.starts_with("enc.") {
            Some(Side::Encoder)
        } else if name.starts_with("dec.") {
            Some(Side::Decoder)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// One decoded response.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Emitted tokens, EOS excluded.
    pub tokens: Vec<usize>,
    /// Log-probability of each emitted token, plus EOS when `ended`.
    pub logps: Vec<f64>,
    pub ended: bool,
}

impl Decoded {
    pub fn log_prob(&self) -> f64 {
        self.logps.iter().sum()
    }
}

/// Decoder recurrence state, including attention-fusion memory.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub rnn: RnnState,
    rows: Option<Vec<Var>>,
    attended: Option<Var>,
    batch: usize,
}

impl DecoderState {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Teacher-forced decoder outputs for a padded batch of targets.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// `[steps * batch, 1]`, time-major, zero at padding.
    pub token_logp: Var,
    /// `[batch, 1]` summed log-likelihood per target.
    pub row_ll: Var,
    pub steps: usize,
    pub lengths: Vec<usize>,
}

impl TeacherForced {
    pub fn tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct DialogModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    enc_embed: ParamId,
    utt: Option<AttnGruEncoder>,
    ctx: Option<Cell>,
    flat: Option<AttnGruEncoder>,
    policy: Option<Linear>,
    posterior: Option<Linear>,
    dec_embed: ParamId,
    dec_cell: Cell,
    dec_feed: Option<ParamId>,
    init_proj: Option<Linear>,
    out: Linear,
    latent_emb: Option<LatentEmbeddings>,
    attention: Option<AttentionFusion>,
}

impl<T: Scalar> DialogModel<T> {
    /// Builds a freshly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let r = c.init_range;
        let mut rng = Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let enc_embed = uniform_param(&mut s, "enc.embed", &[c.vocab_size, c.embed_size], r, &mut rng)?;
        let (utt, ctx, flat, resp_width) = match c.encoder {
            EncoderKind::Hierarchical => {
                let utt = AttnGruEncoder::new(&mut s, "enc.utt", c.embed_size, c.utt_size, r, &mut rng)?;
                let ctx = Cell::new(&mut s, "enc.ctx", crate::nn::CellKind::Gru, c.utt_size, c.ctx_size, r, &mut rng)?;
                (Some(utt), Some(ctx), None, c.utt_size)
            }
            EncoderKind::Flat => {
                let flat = AttnGruEncoder::new(&mut s, "enc.flat", c.embed_size, c.ctx_size, r, &mut rng)?;
                (None, None, Some(flat), c.ctx_size)
            }
        };
        let width = c.latent_params_width();
        let policy = match c.latent {
            Some(_) => Some(Linear::new(&mut s, "enc.policy", c.ctx_size, width, true, r, &mut rng)?),
            None => None,
        };
        let posterior = match (c.latent, c.objective) {
            (Some(_), config::Objective::FullElbo) => {
                Some(Linear::new(&mut s, "enc.post", c.ctx_size + resp_width, width, true, r, &mut rng)?)
            }
            _ => None,
        };
        let dec_embed = uniform_param(&mut s, "dec.embed", &[c.vocab_size, c.embed_size], r, &mut rng)?;
        let dec_cell = Cell::new(&mut s, "dec.rnn", c.decoder_cell, c.embed_size, c.dec_size, r, &mut rng)?;
        let gates = match c.decoder_cell {
            crate::nn::CellKind::Gru => 3,
            crate::nn::CellKind::Lstm => 4,
        };
        let dec_feed = match c.fusion {
            Fusion::Attention => Some(uniform_param(&mut s, "dec.feed", &[c.dec_size, gates * c.dec_size], r, &mut rng)?),
            _ => None,
        };
        let init_proj = if c.init_width() != c.dec_size {
            Some(Linear::new(&mut s, "dec.init", c.init_width(), c.dec_size, true, r, &mut rng)?)
        } else {
            None
        };
        let out = Linear::new(&mut s, "dec.out", c.dec_size, c.vocab_size, true, r, &mut rng)?;
        let latent_emb = match c.latent {
            Some(LatentKind::Categorical) => {
                let mut tables = Vec::with_capacity(c.m);
                for j in 0..c.m {
                    tables.push(uniform_param(&mut s, &format!("dec.latent.emb.{j}"), &[c.k, c.d], r, &mut rng)?);
                }
                Some(LatentEmbeddings { tables, k: c.k, d: c.d })
            }
            _ => None,
        };
        let attention = match c.fusion {
            Fusion::Attention => Some(AttentionFusion {
                wa: uniform_param(&mut s, "dec.att.wa", &[c.dec_size, c.d], r, &mut rng)?,
                ws: uniform_param(&mut s, "dec.att.ws", &[c.dec_size + c.d, c.dec_size], r, &mut rng)?,
            }),
            _ => None,
        };
        Ok(Self {
            config,
            store: s,
            enc_embed,
            utt,
            ctx,
            flat,
            policy,
            posterior,
            dec_embed,
            dec_cell,
            dec_feed,
            init_proj,
            out,
            latent_emb,
            attention,
        })
    }

    /// Rebuilds a model from `config` and a complete set of named tensors.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected = model.store.len();
        if tensors.len() != expected {
            return Err(LarlError::Checkpoint(format!(
                "expected {expected} parameter tensors, found {}",
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .store
                .id(&name)
                .map_err(|_| LarlError::Checkpoint(format!("unknown parameter {name}")))?;
            model
                .store
                .set(id, t)
                .map_err(|e| LarlError::Checkpoint(format!("parameter {name}: {e}")))?;
        }
        Ok(model)
    }

    pub fn side(&self, id: ParamId) -> Side {
        Side::of(self.store.name(id)).expect("every parameter is named enc.* or dec.*")
    }

    pub fn params_on(&self, side: Side) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.side(id) == side).collect()
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Gradient mode that tracks only the given side.
    pub fn grad_mode(&self, side: Side) -> GradMode {
        GradMode::Only(self.store.ids().map(|id| self.side(id) == side).collect())
    }

    pub fn latent_embeddings(&self) -> Option<&LatentEmbeddings> {
        self.latent_emb.as_ref()
    }

    /// Encodes a batch of contexts into `[B, ctx_size]`.
    pub fn encode_contexts(&self, tape: &mut Tape<T>, contexts: &[&[Vec<usize>]], rng: &mut Rng) -> Result<Var> {
        if contexts.is_empty() || contexts.iter().any(|c| c.is_empty()) {
            return Err(LarlError::Input("empty context".into()));
        }
        let c = &self.config;
        let h = match c.encoder {
            EncoderKind::Hierarchical => {
                let kept: Vec<Vec<&[usize]>> = contexts.iter().map(|ctx| self.truncate_turns(ctx)).collect();
                let utts: Vec<&[usize]> = kept.iter().flatten().copied().collect();
                let utt_enc = self.encode_sequences(tape, self.utt.as_ref().expect("hierarchical"), &utts, rng)?;
                let mut offset = 0;
                let mut index_seqs = Vec::with_capacity(kept.len());
                for turns in &kept {
                    index_seqs.push((offset..offset + turns.len()).collect::<Vec<_>>());
                    offset += turns.len();
                }
                let refs: Vec<&[usize]> = index_seqs.iter().map(Vec::as_slice).collect();
                let seq = Padded::new(&refs, 0)?;
                let rows = tape.embedding(utt_enc, &seq.ids)?;
                let cell = self.ctx.as_ref().expect("hierarchical");
                let xp = cell.project(tape, &self.store, rows)?;
                let mut s = cell.zero_state(tape, seq.batch);
                for t in 0..seq.steps {
                    let xt = tape.slice(xp, 0, t * seq.batch, seq.batch)?;
                    let next = cell.step(tape, &self.store, xt, s)?;
                    s.h = match seq.step_mask::<T>(t) {
                        Some(m) => {
                            let m = tape.constant(m);
                            crate::nn::masked_update(tape, s.h, next.h, m)?
                        }
                        None => next.h,
                    };
                }
                s.h
            }
            EncoderKind::Flat => {
                let flat: Vec<Vec<usize>> = contexts.iter().map(|ctx| self.flatten(ctx)).collect();
                let refs: Vec<&[usize]> = flat.iter().map(Vec::as_slice).collect();
                self.encode_sequences(tape, self.flat.as_ref().expect("flat"), &refs, rng)?
            }
        };
        dropout(tape, h, c.dropout, rng)
    }

    fn truncate_turns<'a>(&self, ctx: &'a [Vec<usize>]) -> Vec<&'a [usize]> {
        let max = self.config.max_context_turns;
        if max == 0 || ctx.len() <= max {
            return ctx.iter().map(Vec::as_slice).collect();
        }
        let mut out = vec![ctx[0].as_slice()];
        out.extend(ctx[ctx.len() - (max - 1)..].iter().map(Vec::as_slice));
        out
    }

    fn flatten(&self, ctx: &[Vec<usize>]) -> Vec<usize> {
        let all: Vec<usize> = ctx.iter().flatten().copied().collect();
        let max = self.config.max_context_tokens;
        if max == 0 || all.len() <= max {
            all
        } else {
            all[all.len() - max..].to_vec()
        }
    }

    fn encode_sequences(&self, tape: &mut Tape<T>, enc: &AttnGruEncoder, seqs: &[&[usize]], rng: &mut Rng) -> Result<Var> {
        let seq = Padded::new(seqs, 0)?;
        let table = tape.param(&self.store, self.enc_embed);
        let x = tape.embedding(table, &seq.ids)?;
        let x = dropout(tape, x, self.config.dropout, rng)?;
        enc.encode(tape, &self.store, x, &seq)
    }

    /// Prior policy `π(z|c)` from context encodings `h`.
    pub fn policy_params(&self, tape: &mut Tape<T>, h: Var) -> Result<LatentParams> {
        let head = self
            .policy
            .as_ref()
            .ok_or_else(|| LarlError::Config("word-level models have no latent policy".into()))?;
        let raw = head.forward(tape, &self.store, h)?;
        self.latent_params(tape, raw)
    }

    /// Recognition network `q(z|x, c)`; `responses` are target sequences.
    pub fn posterior_params(&self, tape: &mut Tape<T>, h: Var, responses: &[&[usize]], rng: &mut Rng) -> Result<LatentParams> {
        let head = self.posterior.as_ref().ok_or_else(|| {
            LarlError::Config(match self.config.objective {
                config::Objective::LiteElbo => "lite-elbo ties the posterior to the policy; no posterior network exists".into(),
                _ => "this model has no posterior network".into(),
            })
        })?;
        let enc = self.utt.as_ref().or(self.flat.as_ref()).expect("one encoder exists");
        let x = self.encode_sequences(tape, enc, responses, rng)?;
        let hx = tape.concat(&[h, x], 1)?;
        let raw = head.forward(tape, &self.store, hx)?;
        self.latent_params(tape, raw)
    }

    fn latent_params(&self, tape: &mut Tape<T>, raw: Var) -> Result<LatentParams> {
        let c = &self.config;
        match c.latent.expect("latent head exists") {
            LatentKind::Gaussian => Ok(LatentParams::Gaussian(gaussian_params(tape, raw, c.m)?)),
            LatentKind::Categorical => Ok(LatentParams::Categorical(categorical_params(tape, raw, c.m, c.k)?)),
        }
    }

    /// Initial decoder state from context encodings (word-level models) or
    /// a latent sample (latent models).
    pub fn decoder_init(&self, tape: &mut Tape<T>, h: Option<Var>, z: Option<&LatentSample>, batch: usize) -> Result<DecoderState> {
        let (base, rows) = match (self.config.latent, z) {
            (None, _) => {
                let h = h.ok_or_else(|| LarlError::Input("word-level decoding needs context encodings".into()))?;
                (h, None)
            }
            (Some(LatentKind::Gaussian), Some(LatentSample::Gaussian(z))) => (*z, None),
            (Some(LatentKind::Categorical), Some(z @ (LatentSample::Categorical(_) | LatentSample::Relaxed { .. }))) => {
                let emb = self.latent_emb.as_ref().expect("categorical model");
                let rows = emb.rows(tape, &self.store, z, batch)?;
                (fuse_summation(tape, &rows)?, Some(rows))
            }
            (Some(kind), _) => {
                return Err(LarlError::Input(format!("decoder needs a {kind:?} latent sample")));
            }
        };
        if tape.shape(base)[0] != batch {
            return Err(LarlError::Input(format!(
                "decoder init has {} rows, expected {batch}",
                tape.shape(base)[0]
            )));
        }
        let h0 = match &self.init_proj {
            Some(p) => p.forward(tape, &self.store, base)?,
            None => base,
        };
        let rnn = self.dec_cell.state_from(tape, h0);
        let (rows, attended) = match (&self.attention, rows) {
            (Some(att), Some(rows)) => {
                let a = att.step(tape, &self.store, h0, &rows)?.attended;
                (Some(rows), Some(a))
            }
            (_, rows) => (rows, None),
        };
        Ok(DecoderState {
            rnn,
            rows,
            attended,
            batch,
        })
    }

    /// Advances one step from projected inputs and returns output features.
    fn decoder_step(&self, tape: &mut Tape<T>, s: &mut DecoderState, xp: Var) -> Result<Var> {
        match (&self.attention, s.attended) {
            (Some(att), Some(prev)) => {
                let wf = tape.param(&self.store, self.dec_feed.expect("attention model"));
                let fp = tape.matmul(prev, wf)?;
                let xp = tape.add(xp, fp)?;
                s.rnn = self.dec_cell.step(tape, &self.store, xp, s.rnn)?;
                let rows = s.rows.as_ref().expect("attention state has rows");
                let a = att.step(tape, &self.store, s.rnn.h, rows)?.attended;
                s.attended = Some(a);
                Ok(a)
            }
            _ => {
                s.rnn = self.dec_cell.step(tape, &self.store, xp, s.rnn)?;
                Ok(s.rnn.h)
            }
        }
    }

    fn project_inputs(&self, tape: &mut Tape<T>, ids: &[usize], rng: &mut Rng) -> Result<Var> {
        let table = tape.param(&self.store, self.dec_embed);
        let x = tape.embedding(table, ids)?;
        let x = dropout(tape, x, self.config.dropout, rng)?;
        self.dec_cell.project(tape, &self.store, x)
    }

    /// Scores `targets` (each ending in EOS) under teacher forcing.
    pub fn teacher_forced(&self, tape: &mut Tape<T>, mut state: DecoderState, targets: &[&[usize]], rng: &mut Rng) -> Result<TeacherForced> {
        if targets.len() != state.batch {
            return Err(LarlError::Input(format!(
                "{} targets for a decoder batch of {}",
                targets.len(),
                state.batch
            )));
        }
        let v = self.config.vocab_size;
        if let Some(&bad) = targets.iter().flat_map(|t| t.iter()).find(|&&id| id >= v) {
            return Err(LarlError::Input(format!("token id {bad} outside vocabulary of {v}")));
        }
        let inputs: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| {
                let mut x = vec![self.config.bos_id];
                x.extend_from_slice(&t[..t.len().saturating_sub(1)]);
                x
            })
            .collect();
        let input_refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let ins = Padded::new(&input_refs, 0)?;
        let outs = Padded::new(targets, 0)?;
        let b = ins.batch;
        let xp = self.project_inputs(tape, &ins.ids, rng)?;
        let mut feats = Vec::with_capacity(ins.steps);
        for t in 0..ins.steps {
            let xt = tape.slice(xp, 0, t * b, b)?;
            feats.push(self.decoder_step(tape, &mut state, xt)?);
        }
        let stacked = tape.concat(&feats, 0)?;
        let logits = self.out.forward(tape, &self.store, stacked)?;
        let logp = tape.log_softmax(logits);
        let picked = tape.gather(logp, &outs.ids)?;
        let mask = tape.constant(outs.mask());
        let token_logp = tape.mul(picked, mask)?;
        let per = tape.reshape(token_logp, vec![outs.steps, b])?;
        let per = tape.transpose(per)?;
        let row_ll = tape.sum_last(per);
        Ok(TeacherForced {
            token_logp,
            row_ll,
            steps: outs.steps,
            lengths: outs.lengths,
        })
    }

    /// Generates up to `max_len` tokens (EOS included) per batch row.
    pub fn decode(&self, tape: &mut Tape<T>, mut state: DecoderState, mode: DecodeMode, max_len: usize, rng: &mut Rng) -> Result<Vec<Decoded>> {
        if max_len < 1 {
            return Err(LarlError::Input("max_len must be at least 1".into()));
        }
        let b = state.batch;
        let mut out: Vec<Decoded> = (0..b)
            .map(|_| Decoded {
                tokens: Vec::new(),
                logps: Vec::new(),
                ended: false,
            })
            .collect();
        let mut current = vec![self.config.bos_id; b];
        for _ in 0..max_len {
            let xp = self.project_inputs(tape, &current, rng)?;
            let feat = self.decoder_step(tape, &mut state, xp)?;
            let logits = self.out.forward(tape, &self.store, feat)?;
            let logp = tape.log_softmax(logits);
            let lp = tape.value(logp);
            for (row, d) in out.iter_mut().enumerate() {
                if d.ended {
                    continue;
                }
                let dist = lp.row_slice(row);
                let tok = match mode {
                    DecodeMode::Greedy => argmax(dist),
                    DecodeMode::Sample => sample_log_probs(dist, rng),
                };
                d.logps.push(dist[tok].to_f64_lossy());
                if tok == self.config.eos_id {
                    d.ended = true;
                } else {
                    d.tokens.push(tok);
                }
                current[row] = tok;
            }
            if out.iter().all(|d| d.ended) {
                break;
            }
        }
        Ok(out)
    }

    /// Teacher-forced log-likelihood of each response (EOS appended) given
    /// latent `z` or, for word-level models, context encodings `h`.
    pub fn response_log_likelihood(
        &self,
        tape: &mut Tape<T>,
        h: Option<Var>,
        z: Option<&LatentSample>,
        responses: &[&[usize]],
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        let targets: Vec<Vec<usize>> = responses
            .iter()
            .map(|r| r.iter().copied().chain(std::iter::once(self.config.eos_id)).collect())
            .collect();
        let refs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        let state = self.decoder_init(tape, h, z, refs.len())?;
        let tf = self.teacher_forced(tape, state, &refs, rng)?;
        Ok(tape.value(tf.row_ll).to_f64_vec())
    }

    /// Parameter tensors with their names, in insertion order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect()
    }
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_log_probs<T: Scalar>(logp: &[T], rng: &mut Rng) -> usize {
    use rand::Rng as _;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in logp.iter().enumerate() {
        acc += lp.to_f64_lossy().exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

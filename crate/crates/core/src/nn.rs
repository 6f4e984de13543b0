//! Recurrent and feed-forward building blocks on the tape.
//!
//! Sequences are processed time-major: row `t * B + b` of a stacked matrix
//! holds step `t` of batch row `b`.

use larl_tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng as _;

use crate::error::{LarlError, Result};
use crate::rng::Rng;

/// Inserts a `shape` parameter drawn uniformly from `[-range, range]`.
pub fn uniform_param<T: Scalar>(store: &mut ParamStore<T>, name: &str, shape: &[usize], range: f64, rng: &mut Rng) -> Result<ParamId> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-range..=range))).collect();
    Ok(store.insert(name, Tensor::new(shape.to_vec(), data)?)?)
}

pub fn zero_param<T: Scalar>(store: &mut ParamStore<T>, name: &str, shape: &[usize]) -> Result<ParamId> {
    Ok(store.insert(name, Tensor::zeros(shape))?)
}

/// Applies dropout when the tape is in train mode.
pub fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
    Ok(tape.dropout(x, rate, || rng.random::<f64>())?)
}

/// `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, bias: bool, range: f64, rng: &mut Rng) -> Result<Self> {
        let w = uniform_param(store, &format!("{name}.w"), &[inp, out], range, rng)?;
        let b = if bias {
            Some(zero_param(store, &format!("{name}.b"), &[out])?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                Ok(tape.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Gru,
    Lstm,
}

/// Recurrent state; `c` is present for LSTM cells only.
#[derive(Clone, Copy, Debug)]
pub struct RnnState {
    pub h: Var,
    pub c: Option<Var>,
}

/// GRU or LSTM cell. Input projections are computed outside the cell so a
/// whole sequence can be projected with one matmul.
#[derive(Clone, Debug)]
pub struct Cell {
    pub kind: CellKind,
    pub hidden: usize,
    /// `[in, G * H]`
    pub wx: ParamId,
    /// `[G * H]`
    pub bx: ParamId,
    /// `[H, G * H]`
    pub wh: ParamId,
    /// `[G * H]`, GRU only (the candidate gate needs it separate).
    pub bh: Option<ParamId>,
}

impl Cell {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, kind: CellKind, inp: usize, hidden: usize, range: f64, rng: &mut Rng) -> Result<Self> {
        let g = match kind {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        };
        let wx = uniform_param(store, &format!("{name}.wx"), &[inp, g * hidden], range, rng)?;
        let bx = zero_param(store, &format!("{name}.bx"), &[g * hidden])?;
        let wh = uniform_param(store, &format!("{name}.wh"), &[hidden, g * hidden], range, rng)?;
        let bh = match kind {
            CellKind::Gru => Some(zero_param(store, &format!("{name}.bh"), &[g * hidden])?),
            CellKind::Lstm => None,
        };
        Ok(Self {
            kind,
            hidden,
            wx,
            bx,
            wh,
            bh,
        })
    }

    /// `x W_x + b_x` for stacked inputs.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.wx);
        let b = tape.param(store, self.bx);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize) -> RnnState {
        let h = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        self.state_from(tape, h)
    }

    /// State with hidden `h` and, for LSTMs, a zero memory cell.
    pub fn state_from<T: Scalar>(&self, tape: &mut Tape<T>, h: Var) -> RnnState {
        let c = match self.kind {
            CellKind::Gru => None,
            CellKind::Lstm => {
                let b = tape.shape(h)[0];
                Some(tape.constant(Tensor::zeros(&[b, self.hidden])))
            }
        };
        RnnState { h, c }
    }

    /// One step from a projected input `xp` (`[B, G * H]`).
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, xp: Var, s: RnnState) -> Result<RnnState> {
        let hd = self.hidden;
        let wh = tape.param(store, self.wh);
        let hp = tape.matmul(s.h, wh)?;
        match self.kind {
            CellKind::Gru => {
                let bh = tape.param(store, self.bh.expect("gru has bh"));
                let hp = tape.add_row(hp, bh)?;
                let xr = tape.slice(xp, 1, 0, 2 * hd)?;
                let hr = tape.slice(hp, 1, 0, 2 * hd)?;
                let rz = tape.add(xr, hr)?;
                let rz = tape.sigmoid(rz);
                let r = tape.slice(rz, 1, 0, hd)?;
                let z = tape.slice(rz, 1, hd, hd)?;
                let xn = tape.slice(xp, 1, 2 * hd, hd)?;
                let hn = tape.slice(hp, 1, 2 * hd, hd)?;
                let rhn = tape.mul(r, hn)?;
                let n = tape.add(xn, rhn)?;
                let n = tape.tanh(n);
                // h' = n + z ⊙ (h − n)
                let d = tape.sub(s.h, n)?;
                let zd = tape.mul(z, d)?;
                let h = tape.add(n, zd)?;
                Ok(RnnState { h, c: None })
            }
            CellKind::Lstm => {
                let c = s.c.ok_or_else(|| LarlError::Input("lstm state without memory cell".into()))?;
                let pre = tape.add(xp, hp)?;
                let ifo = tape.slice(pre, 1, 0, 3 * hd)?;
                let ifo = tape.sigmoid(ifo);
                let g = tape.slice(pre, 1, 3 * hd, hd)?;
                let g = tape.tanh(g);
                let i = tape.slice(ifo, 1, 0, hd)?;
                let f = tape.slice(ifo, 1, hd, hd)?;
                let o = tape.slice(ifo, 1, 2 * hd, hd)?;
                let fc = tape.mul(f, c)?;
                let ig = tape.mul(i, g)?;
                let c = tape.add(fc, ig)?;
                let tc = tape.tanh(c);
                let h = tape.mul(o, tc)?;
                Ok(RnnState { h, c: Some(c) })
            }
        }
    }
}

/// `new` where `mask` is 1, `old` where it is 0; `mask` is `[B, 1]`.
pub fn masked_update<T: Scalar>(tape: &mut Tape<T>, old: Var, new: Var, mask: Var) -> Result<Var> {
    let d = tape.sub(new, old)?;
    let md = tape.mul_col(d, mask)?;
    Ok(tape.add(old, md)?)
}

/// Padded batch of id sequences in time-major order.
#[derive(Clone, Debug)]
pub struct Padded {
    pub batch: usize,
    pub steps: usize,
    /// `steps * batch` ids, pad positions hold `pad`.
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Padded {
    pub fn new(seqs: &[&[usize]], pad: usize) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(LarlError::Input("cannot pad an empty sequence".into()));
        }
        let batch = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![pad; steps * batch];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &id) in s.iter().enumerate() {
                ids[t * batch + b] = id;
            }
        }
        Ok(Self {
            batch,
            steps,
            ids,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    /// `[B, 1]` validity column for step `t`, or `None` when all rows are valid.
    pub fn step_mask<T: Scalar>(&self, t: usize) -> Option<Tensor<T>> {
        if self.lengths.iter().all(|&l| l > t) {
            return None;
        }
        let data = self
            .lengths
            .iter()
            .map(|&l| if l > t { T::one() } else { T::zero() })
            .collect();
        Some(Tensor::new(vec![self.batch, 1], data).expect("batch > 0"))
    }

    /// Time-major `[steps * batch, 1]` validity column.
    pub fn mask<T: Scalar>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.steps * self.batch);
        for t in 0..self.steps {
            for &l in &self.lengths {
                data.push(if l > t { T::one() } else { T::zero() });
            }
        }
        Tensor::new(vec![self.steps * self.batch, 1], data).expect("non-empty")
    }
}

/// GRU over token sequences followed by additive attention pooling of
/// its hidden states: `α = softmax_t(vᵀ tanh(W h_t + b))`, `out = Σ α_t h_t`.
#[derive(Clone, Debug)]
pub struct AttnGruEncoder {
    pub cell: Cell,
    pub att: Linear,
    pub att_v: Linear,
}

impl AttnGruEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inp: usize, hidden: usize, range: f64, rng: &mut Rng) -> Result<Self> {
        let cell = Cell::new(store, name, CellKind::Gru, inp, hidden, range, rng)?;
        let att = Linear::new(store, &format!("{name}.att"), hidden, hidden, true, range, rng)?;
        let att_v = Linear::new(store, &format!("{name}.att_v"), hidden, 1, false, range, rng)?;
        Ok(Self { cell, att, att_v })
    }

    pub fn hidden(&self) -> usize {
        self.cell.hidden
    }

    /// Encodes `seq.batch` sequences whose stacked input embeddings are `x`
    /// (`[steps * batch, in]`), returning `[batch, hidden]`.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, seq: &Padded) -> Result<Var> {
        let (b, n) = (seq.batch, seq.steps);
        let xp = self.cell.project(tape, store, x)?;
        let g = tape.shape(xp)[1];
        let mut s = self.cell.zero_state(tape, b);
        let mut hs = Vec::with_capacity(n);
        for t in 0..n {
            let xt = tape.slice(xp, 0, t * b, b)?;
            let next = self.cell.step(tape, store, xt, s)?;
            s.h = match seq.step_mask::<T>(t) {
                Some(m) => {
                    let m = tape.constant(m);
                    masked_update(tape, s.h, next.h, m)?
                }
                None => next.h,
            };
            hs.push(s.h);
        }
        debug_assert_eq!(g, 3 * self.cell.hidden);
        let stacked = tape.concat(&hs, 0)?;
        let e = self.att.forward(tape, store, stacked)?;
        let e = tape.tanh(e);
        let scores = self.att_v.forward(tape, store, e)?;
        let scores = tape.reshape(scores, vec![n, b])?;
        let scores = tape.transpose(scores)?;
        let bias: Vec<T> = (0..b)
            .flat_map(|r| (0..n).map(move |t| (r, t)))
            .map(|(r, t)| if t < seq.lengths[r] { T::zero() } else { T::lit(-1e9) })
            .collect();
        let bias = tape.constant(Tensor::new(vec![b, n], bias)?);
        let scores = tape.add(scores, bias)?;
        let alpha = tape.softmax(scores);
        let alpha_tm = tape.transpose(alpha)?;
        let alpha_tm = tape.reshape(alpha_tm, vec![n * b, 1])?;
        let weighted = tape.mul_col(stacked, alpha_tm)?;
        let hd = self.cell.hidden;
        let weighted = tape.reshape(weighted, vec![n, b * hd])?;
        let weighted = tape.transpose(weighted)?;
        let pooled = tape.sum_last(weighted);
        Ok(tape.reshape(pooled, vec![b, hd])?)
    }
}

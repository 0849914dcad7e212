//! GRU sequence model for the repeat task.
//!
//! Row-vector convention (`x W`), per step:
//!
//! ```text
//! z = σ(x W_z + h U_z + b_z)
//! r = σ(x W_r + h U_r + b_r)
//! u = tanh(x W_h + (r ⊙ h) U_h + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ u
//! y = softmax(h W_o + b_o)
//! ```
//!
//! A sequence `i_1..i_L` is encoded by feeding the tokens and then `S`
//! (`L + 1` steps from `h_0 = 0`). The state after `S` is the encoding. The
//! first output is read from it directly; each later output is read after
//! one more step that feeds the previous output (autoregressive) or `PAD`
//! (no-input). Outputs are greedy over the `n_symbols` real tokens.
//!
//! Batches are right-aligned during encoding so every row reaches `S` on the
//! same step: rows shorter than the batch maximum are held at `h = 0` until
//! their first token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::taskgen::RepeatExample;
use crate::tensor::{Real, Tensor};

/// Examples per graph when evaluating without gradients.
pub const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    /// Decode steps receive the previous output token.
    Autoregressive,
    /// Decode steps receive `PAD`.
    NoInput,
}

impl DecodeMode {
    pub fn tag(self) -> &'static str {
        match self {
            DecodeMode::Autoregressive => "ar",
            DecodeMode::NoInput => "noinput",
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" | "autoregressive" => Ok(Self::Autoregressive),
            "noinput" | "no-input" => Ok(Self::NoInput),
            other => Err(Error::contract(format!("unknown decode mode `{other}`"))),
        }
    }
}

/// Which token an autoregressive decoder is fed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feedback {
    /// The gold previous target.
    TeacherForced,
    /// The model's own greedy previous output (not differentiated through).
    SelfFed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T: Real> {
    pub hidden: usize,
    pub n_symbols: usize,
    /// `(n_symbols + 2) × N`
    pub embedding: Tensor<T>,
    pub w_z: Tensor<T>,
    pub u_z: Tensor<T>,
    pub b_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub u_r: Tensor<T>,
    pub b_r: Tensor<T>,
    pub w_h: Tensor<T>,
    pub u_h: Tensor<T>,
    pub b_h: Tensor<T>,
    /// `N × (n_symbols + 2)`
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
}

pub const GRU_ARRAYS: [&str; 12] = [
    "embedding", "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h", "w_o", "b_o",
];

impl<T: Real> ParamSet<T> for GruParams<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        GRU_ARRAYS
            .iter()
            .copied()
            .zip([
                &self.embedding,
                &self.w_z,
                &self.u_z,
                &self.b_z,
                &self.w_r,
                &self.u_r,
                &self.b_r,
                &self.w_h,
                &self.u_h,
                &self.b_h,
                &self.w_o,
                &self.b_o,
            ])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        GRU_ARRAYS
            .iter()
            .copied()
            .zip([
                &mut self.embedding,
                &mut self.w_z,
                &mut self.u_z,
                &mut self.b_z,
                &mut self.w_r,
                &mut self.u_r,
                &mut self.b_r,
                &mut self.w_h,
                &mut self.u_h,
                &mut self.b_h,
                &mut self.w_o,
                &mut self.b_o,
            ])
            .collect()
    }
}

impl<T: Real> GruParams<T> {
    /// Uniform(±1/√N) matrices and biases, standard normal embeddings.
    pub fn init(hidden: usize, n_symbols: usize, rng: &mut Rng) -> Self {
        let n = hidden;
        let v = n_symbols + 2;
        let k = 1.0 / (n as f64).sqrt();
        let embedding = Tensor::normal(&[v, n], 0.0, 1.0, rng);
        let mut mat = |rows, cols| Tensor::uniform(&[rows, cols], -k, k, rng);
        let w_z = mat(n, n);
        let u_z = mat(n, n);
        let w_r = mat(n, n);
        let u_r = mat(n, n);
        let w_h = mat(n, n);
        let u_h = mat(n, n);
        let w_o = mat(n, v);
        let b_z = mat(1, n);
        let b_r = mat(1, n);
        let b_h = mat(1, n);
        let b_o = mat(1, v);
        Self {
            hidden,
            n_symbols,
            embedding,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
            w_o,
            b_o,
        }
    }

    pub fn zeros(hidden: usize, n_symbols: usize) -> Self {
        let n = hidden;
        let v = n_symbols + 2;
        let z = |r, c| Tensor::zeros(&[r, c]);
        Self {
            hidden,
            n_symbols,
            embedding: z(v, n),
            w_z: z(n, n),
            u_z: z(n, n),
            b_z: z(1, n),
            w_r: z(n, n),
            u_r: z(n, n),
            b_r: z(1, n),
            w_h: z(n, n),
            u_h: z(n, n),
            b_h: z(1, n),
            w_o: z(n, v),
            b_o: z(1, v),
        }
    }

    /// Expected `(name, shape)` list for this size.
    pub fn layout(hidden: usize, n_symbols: usize) -> Vec<(&'static str, Vec<usize>)> {
        let (n, v) = (hidden, n_symbols + 2);
        let shapes = [
            vec![v, n],
            vec![n, n],
            vec![n, n],
            vec![1, n],
            vec![n, n],
            vec![n, n],
            vec![1, n],
            vec![n, n],
            vec![n, n],
            vec![1, n],
            vec![n, v],
            vec![1, v],
        ];
        GRU_ARRAYS.iter().copied().zip(shapes).collect()
    }

    pub fn from_tensors(hidden: usize, n_symbols: usize, t: Vec<Tensor<T>>) -> Self {
        let mut it = t.into_iter();
        let mut next = || it.next().expect("12 tensors");
        Self {
            hidden,
            n_symbols,
            embedding: next(),
            w_z: next(),
            u_z: next(),
            b_z: next(),
            w_r: next(),
            u_r: next(),
            b_r: next(),
            w_h: next(),
            u_h: next(),
            b_h: next(),
            w_o: next(),
            b_o: next(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.n_symbols + 2
    }

    pub fn start_token(&self) -> usize {
        self.n_symbols
    }

    pub fn pad_token(&self) -> usize {
        self.n_symbols + 1
    }

    pub fn cast<U: Real>(&self) -> GruParams<U> {
        GruParams::from_tensors(
            self.hidden,
            self.n_symbols,
            self.tensors().into_iter().map(|(_, t)| t.cast()).collect(),
        )
    }

    /// Bind all parameters on `g` as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> GruVars {
        let vars = ParamSet::bind(self, g, &|_| trainable);
        GruVars::from_vars(&vars, self.hidden, self.n_symbols)
    }
}

/// Graph handles for the GRU parameters (same order as [`GRU_ARRAYS`]).
#[derive(Debug, Clone)]
pub struct GruVars {
    pub hidden: usize,
    pub n_symbols: usize,
    pub all: Vec<Var>,
    pub embedding: Var,
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl GruVars {
    pub fn from_vars(v: &[Var], hidden: usize, n_symbols: usize) -> Self {
        assert_eq!(v.len(), 12);
        Self {
            hidden,
            n_symbols,
            all: v.to_vec(),
            embedding: v[0],
            w_z: v[1],
            u_z: v[2],
            b_z: v[3],
            w_r: v[4],
            u_r: v[5],
            b_r: v[6],
            w_h: v[7],
            u_h: v[8],
            b_h: v[9],
            w_o: v[10],
            b_o: v[11],
        }
    }

    pub fn pad_token(&self) -> usize {
        self.n_symbols + 1
    }

    pub fn start_token(&self) -> usize {
        self.n_symbols
    }
}

/// A GRU cell on a graph with the input projections precomputed per token.
pub struct Cell {
    pub vars: GruVars,
    xz: Var,
    xr: Var,
    xh: Var,
}

/// Output of one batched step.
pub struct Step {
    pub h: Var,
    pub z: Var,
}

impl Cell {
    pub fn new<T: Real>(g: &mut Graph<T>, vars: &GruVars) -> Self {
        let proj = |g: &mut Graph<T>, w, b| {
            let xw = g.matmul(vars.embedding, w);
            g.add_row(xw, b)
        };
        Self {
            xz: proj(g, vars.w_z, vars.b_z),
            xr: proj(g, vars.w_r, vars.b_r),
            xh: proj(g, vars.w_h, vars.b_h),
            vars: vars.clone(),
        }
    }

    pub fn step<T: Real>(&self, g: &mut Graph<T>, h: Var, tokens: &[usize]) -> Step {
        let v = &self.vars;
        let xz = g.gather_rows(self.xz, tokens.to_vec());
        let hz = g.matmul(h, v.u_z);
        let za = g.add(xz, hz);
        let z = g.sigmoid(za);
        let xr = g.gather_rows(self.xr, tokens.to_vec());
        let hr = g.matmul(h, v.u_r);
        let ra = g.add(xr, hr);
        let r = g.sigmoid(ra);
        let rh = g.mul(r, h);
        let xh = g.gather_rows(self.xh, tokens.to_vec());
        let hh = g.matmul(rh, v.u_h);
        let ua = g.add(xh, hh);
        let u = g.tanh(ua);
        let du = g.sub(u, h);
        let zdu = g.mul(z, du);
        let h_next = g.add(h, zdu);
        Step { h: h_next, z }
    }

    pub fn logits<T: Real>(&self, g: &mut Graph<T>, h: Var) -> Var {
        let o = g.matmul(h, self.vars.w_o);
        g.add_row(o, self.vars.b_o)
    }
}

/// Result of encoding a batch on a graph.
pub struct Encoded {
    /// `B × N` state after the `S` token.
    pub h: Var,
    /// Update gates per step (right-aligned; see module docs).
    pub gates: Vec<Var>,
    /// Number of input steps before `S` (the batch's maximum length).
    pub steps: usize,
}

pub fn encode_on_graph<T: Real>(g: &mut Graph<T>, cell: &Cell, seqs: &[&[usize]]) -> Encoded {
    let b = seqs.len();
    let n = cell.vars.hidden;
    let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let pad = cell.vars.pad_token();
    let mut h = g.constant(Tensor::zeros(&[b, n]));
    let mut gates = Vec::with_capacity(steps + 1);
    for t in 0..steps {
        let mut all_active = true;
        let mut mask = Vec::with_capacity(b);
        let tokens: Vec<usize> = seqs
            .iter()
            .map(|s| {
                let offset = steps - s.len();
                if t >= offset {
                    mask.push(T::one());
                    s[t - offset]
                } else {
                    all_active = false;
                    mask.push(T::zero());
                    pad
                }
            })
            .collect();
        let st = cell.step(g, h, &tokens);
        h = if all_active {
            st.h
        } else {
            g.scale_rows(st.h, mask)
        };
        gates.push(st.z);
    }
    let start = vec![cell.vars.start_token(); b];
    let st = cell.step(g, h, &start);
    gates.push(st.z);
    Encoded {
        h: st.h,
        gates,
        steps,
    }
}

/// Result of a batched decode on a graph.
pub struct Decoded {
    /// Mean cross-entropy over all target positions, when requested.
    pub loss: Option<Var>,
    pub predictions: Vec<Vec<usize>>,
}

/// Greedy argmax over real tokens (specials masked).
fn greedy<T: Real>(logits: &Tensor<T>, row: usize, n_symbols: usize) -> usize {
    logits.argmax_row(row, n_symbols)
}

/// Decode `targets[k].len()` tokens for each row of `h0`.
///
/// With `with_loss`, the mean cross-entropy against `targets` is built on the
/// graph. Feeding follows `mode` and, for autoregressive decoding, `feedback`.
pub fn decode_on_graph<T: Real>(
    g: &mut Graph<T>,
    cell: &Cell,
    h0: Var,
    targets: &[&[usize]],
    mode: DecodeMode,
    feedback: Feedback,
    with_loss: bool,
) -> Decoded {
    let b = targets.len();
    let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0);
    let total: usize = targets.iter().map(|t| t.len()).sum();
    let denom = T::from_usize(total.max(1)).unwrap();
    let n_sym = cell.vars.n_symbols;
    let pad = cell.vars.pad_token();
    let mut predictions: Vec<Vec<usize>> = targets.iter().map(|t| Vec::with_capacity(t.len())).collect();
    let mut terms = Vec::new();
    let mut h = h0;
    for d in 0..steps {
        let logits = cell.logits(g, h);
        {
            let lv = g.value(logits);
            for (k, t) in targets.iter().enumerate() {
                if d < t.len() {
                    predictions[k].push(greedy(lv, k, n_sym));
                }
            }
        }
        if with_loss {
            let tg: Vec<Option<usize>> = targets.iter().map(|t| t.get(d).copied()).collect();
            terms.push(g.cross_entropy(logits, tg, denom));
        }
        if d + 1 < steps {
            let fed: Vec<usize> = (0..b)
                .map(|k| {
                    if d >= targets[k].len() {
                        return pad;
                    }
                    match (mode, feedback) {
                        (DecodeMode::NoInput, _) => pad,
                        (DecodeMode::Autoregressive, Feedback::TeacherForced) => targets[k][d],
                        (DecodeMode::Autoregressive, Feedback::SelfFed) => predictions[k][d],
                    }
                })
                .collect();
            h = cell.step(g, h, &fed).h;
        }
    }
    let loss = if with_loss {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t);
        }
        Some(acc)
    } else {
        None
    };
    Decoded { loss, predictions }
}

/// Training-time forward pass: encode then decode with loss.
pub fn batch_loss<T: Real>(
    g: &mut Graph<T>,
    vars: &GruVars,
    batch: &[&[usize]],
    mode: DecodeMode,
    feedback: Feedback,
) -> Decoded {
    let cell = Cell::new(g, vars);
    let enc = encode_on_graph(g, &cell, batch);
    decode_on_graph(g, &cell, enc.h, batch, mode, feedback, true)
}

/// Per-step update-gate values, channels × timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    /// `N × (L + 1)`; column `L` is the `S` step.
    pub values: Tensor<f64>,
    /// Column index of the `S` step.
    pub boundary: usize,
}

impl GateTrace {
    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn steps(&self) -> usize {
        self.values.cols()
    }

    /// Mean over channels for each timestep.
    pub fn channel_mean(&self) -> Vec<f64> {
        let (n, t) = (self.channels(), self.steps());
        (0..t)
            .map(|c| (0..n).map(|r| self.values.get(r, c)).sum::<f64>() / n as f64)
            .collect()
    }
}

fn validate_tokens<T: Real>(params: &GruParams<T>, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::contract("sequences must contain at least one token"));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= params.vocab_size()) {
        return Err(Error::contract(format!(
            "token {t} outside vocabulary of {}",
            params.vocab_size()
        )));
    }
    Ok(())
}

/// One GRU step for a single state. Returns the new state and the update gate.
pub fn gru_step<T: Real>(params: &GruParams<T>, h: &[T], token: usize) -> Result<(Vec<T>, Vec<T>)> {
    if token >= params.vocab_size() {
        return Err(Error::contract(format!("token {token} outside vocabulary")));
    }
    if h.len() != params.hidden {
        return Err(Error::contract("state size does not match hidden size"));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let cell = Cell::new(&mut g, &vars);
    let hv = g.constant(Tensor::row(h.to_vec()));
    let st = cell.step(&mut g, hv, &[token]);
    g.check()?;
    Ok((g.value(st.h).data().to_vec(), g.value(st.z).data().to_vec()))
}

/// Encode one sequence; returns the state after `S` (`1 × N`) and the gate trace.
pub fn encode<T: Real>(params: &GruParams<T>, tokens: &[usize]) -> Result<(Tensor<T>, GateTrace)> {
    validate_tokens(params, tokens)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let cell = Cell::new(&mut g, &vars);
    let enc = encode_on_graph(&mut g, &cell, &[tokens]);
    g.check()?;
    let n = params.hidden;
    let t = enc.gates.len();
    let mut values = Tensor::zeros(&[n, t]);
    for (c, &z) in enc.gates.iter().enumerate() {
        for (r, &v) in g.value(z).data().iter().enumerate() {
            values.set(r, c, v.to_f64_lossy());
        }
    }
    Ok((
        g.value(enc.h).clone(),
        GateTrace {
            values,
            boundary: tokens.len(),
        },
    ))
}

/// Encode many sequences; row `k` of the result is the state of `seqs[k]`.
pub fn encode_batch<T: Real>(params: &GruParams<T>, seqs: &[&[usize]]) -> Result<Tensor<T>> {
    let n = params.hidden;
    let mut out = Vec::with_capacity(seqs.len() * n);
    for chunk in seqs.chunks(EVAL_CHUNK) {
        for s in chunk {
            validate_tokens(params, s)?;
        }
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let cell = Cell::new(&mut g, &vars);
        let enc = encode_on_graph(&mut g, &cell, chunk);
        g.check()?;
        out.extend_from_slice(g.value(enc.h).data());
    }
    Ok(Tensor::from_vec(&[seqs.len(), n], out))
}

/// Greedy decode of `lens[k]` tokens from row `k` of `states`.
pub fn decode<T: Real>(
    params: &GruParams<T>,
    states: &Tensor<T>,
    lens: &[usize],
    mode: DecodeMode,
) -> Result<Vec<Vec<usize>>> {
    if states.rows() != lens.len() || states.cols() != params.hidden {
        return Err(Error::contract("decode: state matrix does not match lengths / hidden size"));
    }
    if lens.iter().any(|&l| l == 0) {
        return Err(Error::contract("decode length must be at least 1"));
    }
    let n = params.hidden;
    let mut out = Vec::with_capacity(lens.len());
    for (ci, chunk) in lens.chunks(EVAL_CHUNK).enumerate() {
        let start = ci * EVAL_CHUNK;
        let rows = states.data()[start * n..(start + chunk.len()) * n].to_vec();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let cell = Cell::new(&mut g, &vars);
        let h = g.constant(Tensor::from_vec(&[chunk.len(), n], rows));
        // Only lengths matter when decoding without loss.
        let dummy: Vec<Vec<usize>> = chunk.iter().map(|&l| vec![0; l]).collect();
        let refs: Vec<&[usize]> = dummy.iter().map(|v| v.as_slice()).collect();
        let dec = decode_on_graph(&mut g, &cell, h, &refs, mode, Feedback::SelfFed, false);
        g.check()?;
        out.extend(dec.predictions);
    }
    Ok(out)
}

/// Greedy encode-decode predictions for a dataset.
pub fn predict<T: Real>(
    params: &GruParams<T>,
    dataset: &[RepeatExample],
    mode: DecodeMode,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(EVAL_CHUNK) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        for s in &seqs {
            validate_tokens(params, s)?;
        }
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let cell = Cell::new(&mut g, &vars);
        let enc = encode_on_graph(&mut g, &cell, &seqs);
        let dec = decode_on_graph(&mut g, &cell, enc.h, &seqs, mode, Feedback::SelfFed, false);
        g.check()?;
        out.extend(dec.predictions);
    }
    Ok(out)
}

/// Fraction of sequences reproduced exactly.
pub fn exact_match<T: Real>(params: &GruParams<T>, dataset: &[RepeatExample], mode: DecodeMode) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract("exact_match needs a non-empty dataset"));
    }
    let preds = predict(params, dataset, mode)?;
    let hits = preds
        .iter()
        .zip(dataset)
        .filter(|(p, e)| **p == e.tokens)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Mean decode cross-entropy of one example.
pub fn sequence_loss<T: Real>(
    params: &GruParams<T>,
    example: &RepeatExample,
    mode: DecodeMode,
    feedback: Feedback,
) -> Result<T> {
    validate_tokens(params, &example.tokens)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let dec = batch_loss(&mut g, &vars, &[example.tokens.as_slice()], mode, feedback);
    g.check()?;
    Ok(g.scalar(dec.loss.expect("loss requested")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(n: usize, n_symbols: usize, seed: u64) -> GruParams<f64> {
        let mut rng = Rng::new(seed);
        let mut p = GruParams::init(n, n_symbols, &mut rng);
        for (_, t) in p.tensors_mut() {
            for x in t.data_mut() {
                *x += rng.normal(0.0, 0.3);
            }
        }
        p
    }

    #[test]
    fn zero_weights_halve_state() {
        let p = GruParams::<f64>::zeros(2, 3);
        let (h, z) = gru_step(&p, &[1.0, 1.0], 0).unwrap();
        assert_eq!(z, vec![0.5, 0.5]);
        assert_eq!(h, vec![0.5, 0.5]);
    }

    #[test]
    fn saturated_update_gate_takes_candidate() {
        let mut p = GruParams::<f64>::zeros(3, 3);
        p.b_z = Tensor::full(&[1, 3], 20.0);
        let (h, _) = gru_step(&p, &[0.7, -0.2, 0.9], 1).unwrap();
        assert!(h.iter().all(|x| x.abs() < 1e-6), "{h:?}");
    }

    #[test]
    fn step_rejects_bad_token() {
        let p = GruParams::<f64>::zeros(2, 3);
        assert!(gru_step(&p, &[0.0, 0.0], 5).is_err());
    }

    #[test]
    fn encode_shapes_and_zero_model() {
        let p = GruParams::<f64>::zeros(4, 5);
        let (h, trace) = encode(&p, &[0, 1, 2]).unwrap();
        assert_eq!(h.data(), &[0.0; 4]);
        assert_eq!(trace.steps(), 4);
        assert_eq!(trace.channels(), 4);
        assert_eq!(trace.boundary, 3);
        let (_, trace) = encode(&p, &[2]).unwrap();
        assert_eq!(trace.steps(), 2);
    }

    #[test]
    fn zero_model_decodes_bias_argmax() {
        let mut p = GruParams::<f64>::zeros(4, 5);
        p.b_o = Tensor::row(vec![0.0, 0.0, 0.0, 1.0, 0.0, 9.0, 9.0]);
        let preds = predict(&p, &[RepeatExample::new(vec![0, 1, 2, 4])], DecodeMode::Autoregressive).unwrap();
        assert_eq!(preds[0], vec![3; 4]);
    }

    #[test]
    fn uniform_predictor_loss_is_log_vocab() {
        let p = GruParams::<f64>::zeros(4, 30);
        let ex = RepeatExample::new(vec![1, 2, 3]);
        let loss = sequence_loss(&p, &ex, DecodeMode::Autoregressive, Feedback::TeacherForced).unwrap();
        assert!((loss - (32f64).ln()).abs() < 1e-4);
    }

    #[test]
    fn batched_encoding_matches_single() {
        let p = random_params(6, 5, 3);
        let seqs: Vec<Vec<usize>> = vec![vec![1], vec![2, 0, 4], vec![3, 3], vec![0, 1, 2, 3, 4]];
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let batch = encode_batch(&p, &refs).unwrap();
        for (k, s) in seqs.iter().enumerate() {
            let (h, _) = encode(&p, s).unwrap();
            for (a, b) in h.data().iter().zip(batch.row_slice(k)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_loss_matches_single_examples() {
        let p = random_params(5, 4, 8);
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2], vec![3], vec![0, 1, 2, 3]];
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false);
        let dec = batch_loss(&mut g, &vars, &refs, DecodeMode::Autoregressive, Feedback::TeacherForced);
        let batch = g.scalar(dec.loss.unwrap());
        let mut weighted = 0.0;
        for s in &seqs {
            let l = sequence_loss(&p, &RepeatExample::new(s.clone()), DecodeMode::Autoregressive, Feedback::TeacherForced)
                .unwrap();
            weighted += l * s.len() as f64;
        }
        assert!((batch - weighted / 7.0).abs() < 1e-12);
    }

    #[test]
    fn state_stays_in_open_unit_box() {
        let p = random_params(8, 6, 1);
        let (h, trace) = encode(&p, &[0, 1, 2, 3, 4, 5, 0, 1, 2]).unwrap();
        assert!(h.data().iter().all(|x| x.abs() < 1.0));
        assert!(trace.values.data().iter().all(|&z| z > 0.0 && z < 1.0));
    }

    #[test]
    fn encoding_is_causal() {
        let p = random_params(6, 5, 2);
        let full = [1usize, 4, 2, 0, 3];
        let mut h = vec![0.0; 6];
        let mut prefix_states = Vec::new();
        for &t in &full {
            h = gru_step(&p, &h, t).unwrap().0;
            prefix_states.push(h.clone());
        }
        for k in 1..=full.len() {
            let mut h = vec![0.0; 6];
            for &t in &full[..k] {
                h = gru_step(&p, &h, t).unwrap().0;
            }
            assert_eq!(h, prefix_states[k - 1]);
        }
    }
}

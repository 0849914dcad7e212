//! Decoding probes on the final encoding state, and the onion featurizer.
//!
//! Probe families:
//!
//! - flat probes (`linear`, `mlp`) map `h` to `L_max` independent token
//!   distributions at once;
//! - GRU probes re-learn a GRU decoder from `h` (autoregressive or
//!   no-input);
//! - the onion probe peels tokens off one at a time: classify, then
//!   subtract the scaled embedding of the prediction,
//!   `h ← h − s_k ⊙ E[y_k]` with `s_k = g ⊙ γ^k + β·k + b`.
//!
//! Flat and onion probes are trained with gold tokens; evaluation is greedy.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::gru::{self, Cell, DecodeMode, GruParams, GruVars};
use crate::interventions::onion::{onion_scale, OnionParams};
use crate::params::{load_aux, save_aux, take_named, ParamSet};
use crate::rng::Rng;
use crate::taskgen::RepeatExample;
use crate::tensor::{Real, Tensor};
use crate::trainer::{run_loop, AuxConfig, EpochSampler, LoopReport, MetricRecord};

pub const PROBE_OBJECTIVE: &str = "probe";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    Linear,
    Mlp,
    GruAr,
    GruNoInput,
    Onion,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 5] = [
        ProbeKind::Linear,
        ProbeKind::Mlp,
        ProbeKind::GruAr,
        ProbeKind::GruNoInput,
        ProbeKind::Onion,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Mlp => "mlp",
            ProbeKind::GruAr => "gru-ar",
            ProbeKind::GruNoInput => "gru-noinput",
            ProbeKind::Onion => "onion",
        }
    }
}

impl FromStr for ProbeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::contract(format!("unknown probe kind `{s}`")))
    }
}

fn uniform_fan_in<T: Real>(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<T> {
    let k = 1.0 / (rows as f64).sqrt();
    Tensor::uniform(&[rows, cols], -k, k, rng)
}

/// Linear or one-hidden-layer probe onto `l_max × n_symbols` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatProbe<T: Real> {
    pub hidden: usize,
    pub n_symbols: usize,
    pub l_max: usize,
    /// `(w, b)` per layer; one layer for linear, two (ReLU between) for MLP.
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

const FLAT_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl<T: Real> ParamSet<T> for FlatProbe<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((FLAT_NAMES[2 * i], w));
            out.push((FLAT_NAMES[2 * i + 1], b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            out.push((FLAT_NAMES[2 * i], w));
            out.push((FLAT_NAMES[2 * i + 1], b));
        }
        out
    }
}

impl<T: Real> FlatProbe<T> {
    pub fn init(mlp: bool, hidden: usize, n_symbols: usize, l_max: usize, rng: &mut Rng) -> Self {
        let out = n_symbols * l_max;
        let layers = if mlp {
            let width = 4 * hidden;
            vec![
                (uniform_fan_in(hidden, width, rng), Tensor::zeros(&[1, width])),
                (uniform_fan_in(width, out, rng), Tensor::zeros(&[1, out])),
            ]
        } else {
            vec![(uniform_fan_in(hidden, out, rng), Tensor::zeros(&[1, out]))]
        };
        Self {
            hidden,
            n_symbols,
            l_max,
            layers,
        }
    }

    pub fn is_mlp(&self) -> bool {
        self.layers.len() == 2
    }

    fn logits_on_graph(&self, g: &mut Graph<T>, vars: &[Var], h: Var) -> Var {
        let mut x = h;
        for (i, pair) in vars.chunks(2).enumerate() {
            let xw = g.matmul(x, pair[0]);
            x = g.add_row(xw, pair[1]);
            if i + 1 < vars.len() / 2 {
                x = g.relu(x);
            }
        }
        x
    }

    /// Mean cross-entropy over the positions present in `targets`.
    fn loss_on_graph(&self, g: &mut Graph<T>, vars: &[Var], h: Var, targets: &[&[usize]]) -> Var {
        let logits = self.logits_on_graph(g, vars, h);
        let total: usize = targets.iter().map(|t| t.len()).sum();
        let denom = T::from_usize(total.max(1)).unwrap();
        let ns = self.n_symbols;
        let mut acc: Option<Var> = None;
        for p in 0..self.l_max {
            let tg: Vec<Option<usize>> = targets.iter().map(|t| t.get(p).copied()).collect();
            if tg.iter().all(|t| t.is_none()) {
                continue;
            }
            let block = g.slice_cols(logits, p * ns, (p + 1) * ns);
            let ce = g.cross_entropy(block, tg, denom);
            acc = Some(match acc {
                Some(a) => g.add(a, ce),
                None => ce,
            });
        }
        acc.expect("at least one target position")
    }

    pub fn predict(&self, states: &Tensor<T>, lens: &[usize]) -> Result<Vec<Vec<usize>>> {
        if lens.iter().any(|&l| l == 0 || l > self.l_max) {
            return Err(Error::contract("flat probe lengths must be in 1..=l_max"));
        }
        let mut g = Graph::new();
        let vars = ParamSet::bind(self, &mut g, &|_| false);
        let h = g.constant(states.clone());
        let logits = self.logits_on_graph(&mut g, &vars, h);
        g.check()?;
        let lv = g.value(logits);
        let ns = self.n_symbols;
        Ok(lens
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                let row = lv.row_slice(r);
                (0..l)
                    .map(|p| argmax(&row[p * ns..(p + 1) * ns]))
                    .collect()
            })
            .collect())
    }
}

fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Onion denoising probe.
#[derive(Debug, Clone, PartialEq)]
pub struct OnionProbe<T: Real> {
    pub hidden: usize,
    pub n_symbols: usize,
    /// `n_symbols × N`
    pub embedding: Tensor<T>,
    pub g: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub b: Tensor<T>,
    /// Classifier `softmax(W2 · relu(LN(h W1 + b1)) + b2)`, LN with gain/bias.
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub ln_gain: Tensor<T>,
    pub ln_bias: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

const ONION_PROBE_NAMES: [&str; 11] = [
    "embedding", "g", "gamma", "beta", "b", "w1", "b1", "ln_gain", "ln_bias", "w2", "b2",
];

impl<T: Real> ParamSet<T> for OnionProbe<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        ONION_PROBE_NAMES
            .iter()
            .copied()
            .zip([
                &self.embedding,
                &self.g,
                &self.gamma,
                &self.beta,
                &self.b,
                &self.w1,
                &self.b1,
                &self.ln_gain,
                &self.ln_bias,
                &self.w2,
                &self.b2,
            ])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        ONION_PROBE_NAMES
            .iter()
            .copied()
            .zip([
                &mut self.embedding,
                &mut self.g,
                &mut self.gamma,
                &mut self.beta,
                &mut self.b,
                &mut self.w1,
                &mut self.b1,
                &mut self.ln_gain,
                &mut self.ln_bias,
                &mut self.w2,
                &mut self.b2,
            ])
            .collect()
    }
}

impl<T: Real> OnionProbe<T> {
    pub fn init(hidden: usize, n_symbols: usize, rng: &mut Rng) -> Self {
        let n = hidden;
        let w = 4 * n;
        let row = |v: f64, c: usize| Tensor::from_f64(&[1, c], &vec![v; c]);
        Self {
            hidden,
            n_symbols,
            embedding: Tensor::normal(&[n_symbols, n], 0.0, 1.0 / (n as f64).sqrt(), rng),
            g: row(1.0, n),
            gamma: row(0.5, n),
            beta: row(0.0, n),
            b: row(0.0, n),
            w1: uniform_fan_in(n, w, rng),
            b1: row(0.0, w),
            ln_gain: row(1.0, w),
            ln_bias: row(0.0, w),
            w2: uniform_fan_in(w, n_symbols, rng),
            b2: row(0.0, n_symbols),
        }
    }

    fn from_tensors(hidden: usize, n_symbols: usize, t: Vec<Tensor<T>>) -> Self {
        let mut it = t.into_iter();
        let mut next = || it.next().expect("11 tensors");
        Self {
            hidden,
            n_symbols,
            embedding: next(),
            g: next(),
            gamma: next(),
            beta: next(),
            b: next(),
            w1: next(),
            b1: next(),
            ln_gain: next(),
            ln_bias: next(),
            w2: next(),
            b2: next(),
        }
    }

    fn layout(hidden: usize, n_symbols: usize) -> Vec<(&'static str, Vec<usize>)> {
        let (n, w) = (hidden, 4 * hidden);
        let shapes = [
            vec![n_symbols, n],
            vec![1, n],
            vec![1, n],
            vec![1, n],
            vec![1, n],
            vec![n, w],
            vec![1, w],
            vec![1, w],
            vec![1, w],
            vec![w, n_symbols],
            vec![1, n_symbols],
        ];
        ONION_PROBE_NAMES.iter().copied().zip(shapes).collect()
    }

    /// Peeling scale `s_k` (`k ≥ 1`).
    pub fn scale(&self, k: usize) -> Vec<T> {
        let kt = T::from_usize(k).unwrap();
        (0..self.hidden)
            .map(|c| {
                self.g.data()[c] * self.gamma.data()[c].powi(k as i32) + self.beta.data()[c] * kt + self.b.data()[c]
            })
            .collect()
    }

    /// Classifier logits for the rows of `h` (no gradients).
    pub fn classify(&self, h: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let vars = ParamSet::bind(self, &mut g, &|_| false);
        let v = OnionProbeVars::from_vars(&vars);
        let hv = g.constant(h.clone());
        let l = classifier_on_graph(&mut g, &v, hv);
        g.value(l).clone()
    }

    /// Greedy peeling decode of `lens[k]` tokens from row `k` of `states`.
    pub fn decode(&self, states: &Tensor<T>, lens: &[usize]) -> Result<Vec<Vec<usize>>> {
        if states.rows() != lens.len() || states.cols() != self.hidden {
            return Err(Error::contract("onion probe: state matrix does not match lengths"));
        }
        if lens.iter().any(|&l| l == 0) {
            return Err(Error::contract("onion probe lengths must be at least 1"));
        }
        let steps = lens.iter().copied().max().unwrap_or(0);
        let mut h = states.clone();
        let mut out: Vec<Vec<usize>> = lens.iter().map(|&l| Vec::with_capacity(l)).collect();
        for k in 1..=steps {
            let logits = self.classify(&h);
            if !logits.is_finite() {
                return Err(Error::Numeric {
                    node: 0,
                    op: "onion-probe",
                });
            }
            let s = self.scale(k);
            for (r, len) in lens.iter().enumerate() {
                if k > *len {
                    continue;
                }
                let y = argmax(logits.row_slice(r));
                out[r].push(y);
                let e = self.embedding.row_slice(y).to_vec();
                for (c, x) in h.row_slice_mut(r).iter_mut().enumerate() {
                    *x = *x - s[c] * e[c];
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
struct OnionProbeVars {
    embedding: Var,
    g: Var,
    gamma: Var,
    beta: Var,
    b: Var,
    w1: Var,
    b1: Var,
    ln_gain: Var,
    ln_bias: Var,
    w2: Var,
    b2: Var,
}

impl OnionProbeVars {
    fn from_vars(v: &[Var]) -> Self {
        Self {
            embedding: v[0],
            g: v[1],
            gamma: v[2],
            beta: v[3],
            b: v[4],
            w1: v[5],
            b1: v[6],
            ln_gain: v[7],
            ln_bias: v[8],
            w2: v[9],
            b2: v[10],
        }
    }
}

fn classifier_on_graph<T: Real>(g: &mut Graph<T>, v: &OnionProbeVars, h: Var) -> Var {
    let a = g.matmul(h, v.w1);
    let a = g.add_row(a, v.b1);
    let n = g.layer_norm(a);
    let n = g.mul_row(n, v.ln_gain);
    let n = g.add_row(n, v.ln_bias);
    let r = g.relu(n);
    let o = g.matmul(r, v.w2);
    g.add_row(o, v.b2)
}

/// `1 × N` scale `g ⊙ γ^k + β·k + b` on a graph.
fn probe_scale_on_graph<T: Real>(g: &mut Graph<T>, v: &OnionProbeVars, k: usize) -> Var {
    let p = g.powi(v.gamma, k as i32);
    let d = g.mul(p, v.g);
    let l = g.scale(v.beta, T::from_usize(k).unwrap());
    let s = g.add(d, l);
    g.add(s, v.b)
}

/// Teacher-forced peeling loss.
fn onion_probe_loss<T: Real>(g: &mut Graph<T>, v: &OnionProbeVars, h0: Var, targets: &[&[usize]]) -> Var {
    let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0);
    let total: usize = targets.iter().map(|t| t.len()).sum();
    let denom = T::from_usize(total.max(1)).unwrap();
    let mut h = h0;
    let mut acc: Option<Var> = None;
    for k in 1..=steps {
        let logits = classifier_on_graph(g, v, h);
        let tg: Vec<Option<usize>> = targets.iter().map(|t| t.get(k - 1).copied()).collect();
        let ce = g.cross_entropy(logits, tg.clone(), denom);
        acc = Some(match acc {
            Some(a) => g.add(a, ce),
            None => ce,
        });
        if k < steps {
            // Rows that already ended subtract token 0; their later outputs are ignored.
            let idx: Vec<usize> = tg.iter().map(|t| t.unwrap_or(0)).collect();
            let e = g.gather_rows(v.embedding, idx);
            let s = probe_scale_on_graph(g, v, k);
            let se = g.mul_row(e, s);
            h = g.sub(h, se);
        }
    }
    acc.expect("non-empty targets")
}

/// A trained probe of any family.
#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    Flat(FlatProbe<f32>),
    Gru(GruParams<f32>, DecodeMode),
    Onion(OnionProbe<f32>),
}

impl Probe {
    pub fn kind(&self) -> ProbeKind {
        match self {
            Probe::Flat(p) if p.is_mlp() => ProbeKind::Mlp,
            Probe::Flat(_) => ProbeKind::Linear,
            Probe::Gru(_, DecodeMode::Autoregressive) => ProbeKind::GruAr,
            Probe::Gru(_, DecodeMode::NoInput) => ProbeKind::GruNoInput,
            Probe::Onion(_) => ProbeKind::Onion,
        }
    }

    /// Greedy decode of `lens[k]` tokens from each row of `states`.
    pub fn predict(&self, states: &Tensor<f32>, lens: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(lens.len());
        let n = states.cols();
        for (ci, chunk) in lens.chunks(gru::EVAL_CHUNK).enumerate() {
            let start = ci * gru::EVAL_CHUNK;
            let rows = Tensor::from_vec(
                &[chunk.len(), n],
                states.data()[start * n..(start + chunk.len()) * n].to_vec(),
            );
            out.extend(match self {
                Probe::Flat(p) => p.predict(&rows, chunk)?,
                Probe::Gru(p, mode) => gru::decode(p, &rows, chunk, *mode)?,
                Probe::Onion(p) => p.decode(&rows, chunk)?,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeAccuracy {
    /// Fraction of sequences decoded exactly.
    pub exact: f64,
    /// Fraction of individual tokens decoded correctly.
    pub per_token: f64,
}

/// Probe accuracy on the encodings of `examples` under `model`.
pub fn eval_probe(model: &GruParams<f32>, probe: &Probe, examples: &[RepeatExample]) -> Result<ProbeAccuracy> {
    if examples.is_empty() {
        return Err(Error::contract("eval_probe needs examples"));
    }
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let states = gru::encode_batch(model, &seqs)?;
    let lens: Vec<usize> = examples.iter().map(|e| e.len()).collect();
    let preds = probe.predict(&states, &lens)?;
    let mut exact = 0;
    let mut tok = 0;
    let mut total = 0;
    for (p, e) in preds.iter().zip(examples) {
        exact += usize::from(*p == e.tokens);
        tok += p.iter().zip(&e.tokens).filter(|(a, b)| a == b).count();
        total += e.len();
    }
    Ok(ProbeAccuracy {
        exact: exact as f64 / examples.len() as f64,
        per_token: tok as f64 / total as f64,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub probe: Probe,
    pub report: LoopReport,
}

/// Shared loop: batches of train sequences, frozen encodings as constants.
fn fit<P, F, W>(
    mut params: P,
    model: &GruParams<f32>,
    train: &[RepeatExample],
    eval_set: &[RepeatExample],
    cfg: &AuxConfig,
    label: &str,
    loss: F,
    wrap: W,
    observe: impl FnMut(&MetricRecord),
) -> Result<TrainedProbe>
where
    P: ParamSet<f32> + Clone,
    F: Fn(&mut Graph<f32>, &[Var], Var, &[&[usize]]) -> Var,
    W: Fn(P) -> Probe,
{
    let mut sampler = EpochSampler::new(train.len(), cfg.batch_size, crate::rng::derive_seed(cfg.seed, label));
    let report = run_loop(
        &mut params,
        &cfg.loop_spec(),
        &|_| true,
        |g, vars, _| {
            let idx = sampler.next_batch();
            let seqs: Vec<&[usize]> = idx.iter().map(|&i| train[i].tokens.as_slice()).collect();
            let h = g.constant(gru::encode_batch(model, &seqs)?);
            Ok(loss(g, vars, h, &seqs))
        },
        |p| Ok(eval_probe(model, &wrap(p.clone()), eval_set)?.exact),
        observe,
    )?;
    Ok(TrainedProbe {
        probe: wrap(params),
        report,
    })
}

/// Train a probe of `kind` on the frozen encodings of `model`.
pub fn train_probe(
    kind: ProbeKind,
    model: &GruParams<f32>,
    l_max: usize,
    train: &[RepeatExample],
    test: &[RepeatExample],
    cfg: &AuxConfig,
    observe: impl FnMut(&MetricRecord),
) -> Result<TrainedProbe> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract("probe training needs train and test sequences"));
    }
    if let Some(e) = train.iter().chain(test).find(|e| e.len() > l_max || e.is_empty()) {
        return Err(Error::contract(format!("sequence of length {} outside 1..={l_max}", e.len())));
    }
    let eval_set = &test[..cfg.eval_size.min(test.len())];
    let (n, ns) = (model.hidden, model.n_symbols);
    let mut rng = Rng::derive(cfg.seed, &format!("probe/{}/init", kind.tag()));
    let label = format!("probe/{}/batches", kind.tag());
    match kind {
        ProbeKind::Linear | ProbeKind::Mlp => {
            let p = FlatProbe::<f32>::init(kind == ProbeKind::Mlp, n, ns, l_max, &mut rng);
            let shape = p.clone();
            fit(
                p,
                model,
                train,
                eval_set,
                cfg,
                &label,
                move |g, vars, h, t| shape.loss_on_graph(g, vars, h, t),
                Probe::Flat,
                observe,
            )
        }
        ProbeKind::GruAr | ProbeKind::GruNoInput => {
            let mode = if kind == ProbeKind::GruAr {
                DecodeMode::Autoregressive
            } else {
                DecodeMode::NoInput
            };
            let feedback = crate::interventions::training_feedback(mode);
            let p = GruParams::<f32>::init(n, ns, &mut rng);
            fit(
                p,
                model,
                train,
                eval_set,
                cfg,
                &label,
                move |g, vars, h, t| {
                    let v = GruVars::from_vars(vars, n, ns);
                    let cell = Cell::new(g, &v);
                    gru::decode_on_graph(g, &cell, h, t, mode, feedback, true)
                        .loss
                        .expect("loss requested")
                },
                move |p| Probe::Gru(p, mode),
                observe,
            )
        }
        ProbeKind::Onion => {
            let p = OnionProbe::<f32>::init(n, ns, &mut rng);
            fit(
                p,
                model,
                train,
                eval_set,
                cfg,
                &label,
                |g, vars, h, t| onion_probe_loss(g, &OnionProbeVars::from_vars(vars), h, t),
                Probe::Onion,
                observe,
            )
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    kind: ProbeKind,
    hidden: usize,
    n_symbols: usize,
    l_max: usize,
}

pub fn save_probe(path: &Path, probe: &Probe, l_max: usize, extra: serde_json::Value) -> Result<()> {
    let (hidden, n_symbols) = match probe {
        Probe::Flat(p) => (p.hidden, p.n_symbols),
        Probe::Gru(p, _) => (p.hidden, p.n_symbols),
        Probe::Onion(p) => (p.hidden, p.n_symbols),
    };
    let meta = json!({
        "kind": probe.kind(),
        "hidden": hidden,
        "n_symbols": n_symbols,
        "l_max": l_max,
        "run": extra,
    });
    match probe {
        Probe::Flat(p) => save_aux(path, PROBE_OBJECTIVE, meta, p),
        Probe::Gru(p, _) => save_aux(path, PROBE_OBJECTIVE, meta, p),
        Probe::Onion(p) => save_aux(path, PROBE_OBJECTIVE, meta, p),
    }
}

pub fn load_probe(path: &Path) -> Result<Probe> {
    let (meta, arrays) = load_aux(path, PROBE_OBJECTIVE)?;
    let m: ProbeMeta = serde_json::from_value(meta).map_err(|e| Error::Format {
        path: path.to_owned(),
        field: "meta".into(),
        reason: e.to_string(),
    })?;
    let (n, ns) = (m.hidden, m.n_symbols);
    Ok(match m.kind {
        ProbeKind::Linear | ProbeKind::Mlp => {
            let out = ns * m.l_max;
            let layout: Vec<(&str, Vec<usize>)> = if m.kind == ProbeKind::Mlp {
                vec![
                    ("w1", vec![n, 4 * n]),
                    ("b1", vec![1, 4 * n]),
                    ("w2", vec![4 * n, out]),
                    ("b2", vec![1, out]),
                ]
            } else {
                vec![("w1", vec![n, out]), ("b1", vec![1, out])]
            };
            let t = take_named(arrays, &layout, path)?;
            let mut it = t.into_iter();
            let mut layers = Vec::new();
            while let (Some(w), Some(b)) = (it.next(), it.next()) {
                layers.push((w, b));
            }
            Probe::Flat(FlatProbe {
                hidden: n,
                n_symbols: ns,
                l_max: m.l_max,
                layers,
            })
        }
        ProbeKind::GruAr | ProbeKind::GruNoInput => {
            let t = take_named(arrays, &GruParams::<f32>::layout(n, ns), path)?;
            let mode = if m.kind == ProbeKind::GruAr {
                DecodeMode::Autoregressive
            } else {
                DecodeMode::NoInput
            };
            Probe::Gru(GruParams::from_tensors(n, ns, t), mode)
        }
        ProbeKind::Onion => {
            let t = take_named(arrays, &OnionProbe::<f32>::layout(n, ns), path)?;
            Probe::Onion(OnionProbe::from_tensors(n, ns, t))
        }
    })
}

/// How the residual feature is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeaturizerVariant {
    /// Residual subtracts scaled features for positions `2..=L` only, while
    /// the inverse adds back positions `1..=L`.
    Literal,
    /// Residual subtracts positions `1..=L`, so the inverse is exact.
    Consistent,
}

/// Per-position features `f_1..f_L` plus residual `f_{L+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurization<T: Real> {
    pub features: Vec<Vec<T>>,
    pub residual: Vec<T>,
}

/// `f_j = E'[tokens_j]`, residual per `variant`.
pub fn featurize<T: Real>(
    h: &[T],
    tokens: &[usize],
    op: &OnionParams<T>,
    variant: FeaturizerVariant,
) -> Result<Featurization<T>> {
    if h.len() != op.hidden {
        return Err(Error::contract("state size does not match featurizer"));
    }
    if tokens.iter().any(|&t| t >= op.n_symbols) {
        return Err(Error::contract("featurizer token outside the symbol range"));
    }
    let features: Vec<Vec<T>> = tokens.iter().map(|&t| op.embedding.row_slice(t).to_vec()).collect();
    let first = match variant {
        FeaturizerVariant::Literal => 2,
        FeaturizerVariant::Consistent => 1,
    };
    let mut residual = h.to_vec();
    for j in first..=tokens.len() {
        let s = onion_scale(op, j);
        for c in 0..op.hidden {
            residual[c] = residual[c] - s[c] * features[j - 1][c];
        }
    }
    Ok(Featurization { features, residual })
}

/// `F⁻¹ = f_{L+1} + Σ_{j=1..L} s_j ⊙ f_j`.
pub fn defeaturize<T: Real>(f: &Featurization<T>, op: &OnionParams<T>) -> Vec<T> {
    let mut h = f.residual.clone();
    for (j, feat) in f.features.iter().enumerate() {
        let s = onion_scale(op, j + 1);
        for c in 0..op.hidden {
            h[c] = h[c] + s[c] * feat[c];
        }
    }
    h
}

/// `‖F⁻¹(F(h)) − h‖₂ / ‖h‖₂`.
pub fn reconstruction_error<T: Real>(
    h: &[T],
    tokens: &[usize],
    op: &OnionParams<T>,
    variant: FeaturizerVariant,
) -> Result<f64> {
    let back = defeaturize(&featurize(h, tokens, op, variant)?, op);
    let num: f64 = h
        .iter()
        .zip(&back)
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum();
    let den: f64 = h.iter().map(|a| a.to_f64_lossy().powi(2)).sum();
    Ok((num / den.max(f64::MIN_POSITIVE)).sqrt())
}

/// Both routes of an onion interchange.
#[derive(Debug, Clone, PartialEq)]
pub struct InterchangeRoutes<T: Real> {
    /// Tokens the probe read from `h_a`.
    pub predicted: Vec<usize>,
    /// `F⁻¹` of the features of `h_a` with `f_j` replaced by `E'[b_j]`.
    pub featurizer: Vec<T>,
    /// `h_a + s(j) ⊙ (E'[b_j] − E'[a_j])`.
    pub direct: Vec<T>,
}

/// Interchange position `j` (1-based) of `b_tokens` into `h_a`, using the
/// probe's reading of `h_a` for the current tokens. Uses the consistent
/// featurizer.
pub fn onion_interchange(
    op: &OnionParams<f32>,
    probe: &Probe,
    h_a: &[f32],
    b_tokens: &[usize],
    j: usize,
) -> Result<InterchangeRoutes<f32>> {
    if j == 0 || j > b_tokens.len() {
        return Err(Error::contract("interchange position outside the sequence"));
    }
    let predicted = probe
        .predict(&Tensor::from_vec(&[1, h_a.len()], h_a.to_vec()), &[b_tokens.len()])?
        .remove(0);
    let mut feats = featurize(h_a, &predicted, op, FeaturizerVariant::Consistent)?;
    feats.features[j - 1] = op.embedding.row_slice(b_tokens[j - 1]).to_vec();
    let featurizer = defeaturize(&feats, op);
    let s = onion_scale(op, j);
    let new = op.embedding.row_slice(b_tokens[j - 1]);
    let old = op.embedding.row_slice(predicted[j - 1]);
    let direct = (0..op.hidden).map(|c| h_a[c] + s[c] * (new[c] - old[c])).collect();
    Ok(InterchangeRoutes {
        predicted,
        featurizer,
        direct,
    })
}

/// Row-softmax of the onion-probe classifier (used in diagnostics).
pub fn onion_probe_probs(p: &OnionProbe<f32>, h: &Tensor<f32>) -> Tensor<f32> {
    softmax_rows(&p.classify(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::onion::OnionConstraint;

    /// One-hot embeddings, classifier reading the first `n_symbols` channels.
    fn hand_probe(n: usize, ns: usize) -> OnionProbe<f64> {
        let mut p = OnionProbe::<f64>::init(n, ns, &mut Rng::new(0));
        p.embedding = Tensor::zeros(&[ns, n]);
        for t in 0..ns {
            p.embedding.set(t, t, 1.0);
        }
        p.g = Tensor::full(&[1, n], 1.0);
        p.gamma = Tensor::full(&[1, n], 0.4);
        p.beta = Tensor::zeros(&[1, n]);
        p.b = Tensor::zeros(&[1, n]);
        // W1 = [I | -I] spreads each channel into a +/- pair; LN then ReLU keep
        // the ordering of the positive half, which W2 reads back.
        let w = 4 * n;
        p.w1 = Tensor::zeros(&[n, w]);
        for c in 0..n {
            p.w1.set(c, c, 1.0);
            p.w1.set(c, n + c, -1.0);
        }
        p.b1 = Tensor::zeros(&[1, w]);
        p.ln_gain = Tensor::full(&[1, w], 1.0);
        p.ln_bias = Tensor::zeros(&[1, w]);
        p.w2 = Tensor::zeros(&[w, ns]);
        for t in 0..ns {
            p.w2.set(t, t, 1.0);
        }
        p.b2 = Tensor::zeros(&[1, ns]);
        p
    }

    #[test]
    fn hand_built_probe_peels_two_tokens() {
        let p = hand_probe(6, 4);
        let (a, b) = (2usize, 1usize);
        let mut h = vec![0.0; 6];
        h[a] += 0.4;
        h[b] += 0.16;
        let out = p.decode(&Tensor::from_vec(&[1, 6], h), &[2]).unwrap();
        assert_eq!(out, vec![vec![a, b]]);
    }

    #[test]
    fn peeling_inverts_accumulation() {
        let n = 8;
        let p = hand_probe(n, 5);
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let len = rng.range_inclusive(1, 4);
            let toks: Vec<usize> = (0..len).map(|_| rng.below(5)).collect();
            let mut h = vec![0.0; n];
            for (k, &t) in toks.iter().enumerate() {
                let s = p.scale(k + 1);
                h[t] += s[t];
            }
            let out = p.decode(&Tensor::from_vec(&[1, n], h), &[len]).unwrap();
            assert_eq!(out[0], toks);
        }
    }

    #[test]
    fn flat_probe_shapes() {
        let p = FlatProbe::<f64>::init(true, 4, 3, 5, &mut Rng::new(0));
        assert_eq!(p.layers[1].0.shape(), &[16, 15]);
        let out = p.predict(&Tensor::zeros(&[2, 4]), &[1, 5]).unwrap();
        assert_eq!(out[0].len(), 1);
        assert_eq!(out[1].len(), 5);
        assert!(p.predict(&Tensor::zeros(&[1, 4]), &[6]).is_err());
    }

    #[test]
    fn flat_loss_ignores_missing_positions() {
        let p = FlatProbe::<f64>::init(false, 3, 2, 3, &mut Rng::new(1));
        let mut g = Graph::new();
        let vars = ParamSet::bind(&p, &mut g, &|_| true);
        let h = g.constant(Tensor::full(&[1, 3], 0.5));
        let loss = p.loss_on_graph(&mut g, &vars, h, &[&[1]]);
        let grads = g.backward(loss).unwrap();
        let gw = grads.get(vars[0]).unwrap();
        for r in 0..3 {
            for c in 2..6 {
                assert_eq!(gw.get(r, c), 0.0);
            }
        }
    }

    fn onion_params(seed: u64) -> OnionParams<f64> {
        let mut rng = Rng::new(seed);
        let mut op = OnionParams::<f64>::init(5, 4, OnionConstraint::Free, &mut rng);
        op.gamma = Tensor::normal(&[1, 5], 0.5, 0.1, &mut rng);
        op.b = Tensor::normal(&[1, 5], 0.0, 0.1, &mut rng);
        op
    }

    #[test]
    fn single_token_literal_residual_is_state() {
        let op = onion_params(0);
        let h = vec![0.1, 0.2, -0.3, 0.4, 0.5];
        let f = featurize(&h, &[2], &op, FeaturizerVariant::Literal).unwrap();
        assert_eq!(f.residual, h);
        let back = defeaturize(&f, &op);
        let s = onion_scale(&op, 1);
        for c in 0..5 {
            assert!((back[c] - (h[c] + s[c] * op.embedding.get(2, c))).abs() < 1e-12);
        }
    }

    #[test]
    fn consistent_featurizer_roundtrips() {
        let op = onion_params(1);
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let h: Vec<f64> = (0..5).map(|_| rng.normal(0.0, 1.0)).collect();
            let toks: Vec<usize> = (0..rng.range_inclusive(1, 6)).map(|_| rng.below(4)).collect();
            let err = reconstruction_error(&h, &toks, &op, FeaturizerVariant::Consistent).unwrap();
            assert!(err < 1e-12);
        }
    }
}

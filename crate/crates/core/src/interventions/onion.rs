//! Magnitude-scaled ("onion") embedding interventions.
//!
//! Replacing the token at position `j` adds a scaled embedding difference to
//! the final state:
//!
//! ```text
//! s(j) = g ⊙ γ^j + β·j + b
//! h'   = h + s(j) ⊙ (E'[new] − E'[old])
//! ```
//!
//! `E'` is a table separate from the GRU input embedding.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::training_feedback;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::gru::{self, Cell, DecodeMode, GruParams};
use crate::params::{load_aux, save_aux, take_named, ParamSet};
use crate::rng::Rng;
use crate::taskgen::{make_onion_edit, OnionEditExample, RepeatExample};
use crate::tensor::{Real, Tensor};
use crate::trainer::{run_loop, AuxConfig, LoopReport, MetricRecord};

pub const ONION_OBJECTIVE: &str = "onion-intervention";

/// Which scale-law parameters are learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OnionConstraint {
    /// All of `E'`, `g`, `γ`, `β`, `b`.
    Free,
    /// `γ = 1` and `β = 1` held constant; `E'`, `g`, `b` learned.
    FixedGammaBetaOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnionParams<T: Real> {
    pub hidden: usize,
    pub n_symbols: usize,
    /// `n_symbols × N`
    pub embedding: Tensor<T>,
    pub g: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub b: Tensor<T>,
}

const ONION_ARRAYS: [&str; 5] = ["embedding", "g", "gamma", "beta", "b"];

impl<T: Real> ParamSet<T> for OnionParams<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        ONION_ARRAYS
            .iter()
            .copied()
            .zip([&self.embedding, &self.g, &self.gamma, &self.beta, &self.b])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        ONION_ARRAYS
            .iter()
            .copied()
            .zip([
                &mut self.embedding,
                &mut self.g,
                &mut self.gamma,
                &mut self.beta,
                &mut self.b,
            ])
            .collect()
    }
}

impl<T: Real> OnionParams<T> {
    /// `E' ~ Normal(0, 1/√N)`, `g = 1`, `b = 0`; `γ = 0.5, β = 0` when free,
    /// `γ = β = 1` under the control constraint.
    pub fn init(hidden: usize, n_symbols: usize, constraint: OnionConstraint, rng: &mut Rng) -> Self {
        let (gamma, beta) = match constraint {
            OnionConstraint::Free => (0.5, 0.0),
            OnionConstraint::FixedGammaBetaOne => (1.0, 1.0),
        };
        let row = |v: f64| Tensor::from_f64(&[1, hidden], &vec![v; hidden]);
        Self {
            hidden,
            n_symbols,
            embedding: Tensor::normal(&[n_symbols, hidden], 0.0, 1.0 / (hidden as f64).sqrt(), rng),
            g: row(1.0),
            gamma: row(gamma),
            beta: row(beta),
            b: row(0.0),
        }
    }

    /// True if any channel of `γ` went negative.
    pub fn gamma_negative(&self) -> bool {
        self.gamma.data().iter().any(|&x| x < T::zero())
    }

    pub fn cast<U: Real>(&self) -> OnionParams<U> {
        OnionParams {
            hidden: self.hidden,
            n_symbols: self.n_symbols,
            embedding: self.embedding.cast(),
            g: self.g.cast(),
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            b: self.b.cast(),
        }
    }
}

/// `s(j)` for a 1-based position.
pub fn onion_scale<T: Real>(op: &OnionParams<T>, j: usize) -> Vec<T> {
    let jt = T::from_usize(j).unwrap();
    (0..op.hidden)
        .map(|c| {
            op.g.data()[c] * op.gamma.data()[c].powi(j as i32) + op.beta.data()[c] * jt + op.b.data()[c]
        })
        .collect()
}

fn check_edit<T: Real>(op: &OnionParams<T>, edit: &OnionEditExample) -> Result<()> {
    if edit.j == 0 || edit.j > edit.base.len() {
        return Err(Error::contract(format!("edit position {} outside the sequence", edit.j)));
    }
    if edit.old_token >= op.n_symbols || edit.new_token >= op.n_symbols {
        return Err(Error::contract("edit token outside the symbol range"));
    }
    Ok(())
}

pub fn onion_intervene<T: Real>(op: &OnionParams<T>, h: &[T], edit: &OnionEditExample) -> Result<Vec<T>> {
    check_edit(op, edit)?;
    if h.len() != op.hidden {
        return Err(Error::contract("state size does not match onion hidden size"));
    }
    if edit.new_token == edit.old_token {
        return Ok(h.to_vec());
    }
    let s = onion_scale(op, edit.j);
    let new = op.embedding.row_slice(edit.new_token);
    let old = op.embedding.row_slice(edit.old_token);
    Ok((0..op.hidden).map(|c| h[c] + s[c] * (new[c] - old[c])).collect())
}

/// Graph handles for [`OnionParams`], in [`ParamSet`] order.
#[derive(Debug, Clone, Copy)]
pub struct OnionVars {
    pub embedding: Var,
    pub g: Var,
    pub gamma: Var,
    pub beta: Var,
    pub b: Var,
}

impl OnionVars {
    pub fn from_vars(v: &[Var]) -> Self {
        Self {
            embedding: v[0],
            g: v[1],
            gamma: v[2],
            beta: v[3],
            b: v[4],
        }
    }
}

/// `B × N` scales, row `k` for position `positions[k]`.
pub fn scale_on_graph<T: Real>(g: &mut Graph<T>, v: &OnionVars, positions: &[usize]) -> Var {
    let b = positions.len();
    let gam = g.broadcast_rows(v.gamma, b);
    let pw = g.pow_rows(gam, positions.iter().map(|&j| j as i32).collect());
    let decay = g.mul_row(pw, v.g);
    let bet = g.broadcast_rows(v.beta, b);
    let lin = g.scale_rows(bet, positions.iter().map(|&j| T::from_usize(j).unwrap()).collect());
    let s = g.add(decay, lin);
    g.add_row(s, v.b)
}

/// Batched `h + s(j) ⊙ (E'[new] − E'[old])`.
pub fn intervene_on_graph<T: Real>(g: &mut Graph<T>, v: &OnionVars, h: Var, edits: &[OnionEditExample]) -> Var {
    let positions: Vec<usize> = edits.iter().map(|e| e.j).collect();
    let s = scale_on_graph(g, v, &positions);
    let new = g.gather_rows(v.embedding, edits.iter().map(|e| e.new_token).collect());
    let old = g.gather_rows(v.embedding, edits.iter().map(|e| e.old_token).collect());
    let d = g.sub(new, old);
    let sd = g.mul(s, d);
    g.add(h, sd)
}

/// Random single-token edits of sequences drawn from `source`.
pub fn edit_set(source: &[RepeatExample], n: usize, n_symbols: usize, rng: &mut Rng) -> Result<Vec<OnionEditExample>> {
    if source.is_empty() {
        return Err(Error::contract("edit source set is empty"));
    }
    (0..n)
        .map(|_| {
            let base = &source[rng.below(source.len())];
            make_onion_edit(rng, base, n_symbols)
        })
        .collect()
}

pub fn predict_onion(
    model: &GruParams<f32>,
    op: &OnionParams<f32>,
    edits: &[OnionEditExample],
    mode: DecodeMode,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(edits.len());
    for chunk in edits.chunks(gru::EVAL_CHUNK) {
        let bases: Vec<&[usize]> = chunk.iter().map(|e| e.base.as_slice()).collect();
        let h = gru::encode_batch(model, &bases)?;
        let mut states = Vec::with_capacity(h.len());
        for (k, e) in chunk.iter().enumerate() {
            states.extend(onion_intervene(op, h.row_slice(k), e)?);
        }
        let states = Tensor::from_vec(&[chunk.len(), op.hidden], states);
        let lens: Vec<usize> = chunk.iter().map(|e| e.base.len()).collect();
        out.extend(gru::decode(model, &states, &lens, mode)?);
    }
    Ok(out)
}

/// Fraction of edits whose intervened decode equals the edited sequence.
pub fn eval_onion(
    model: &GruParams<f32>,
    op: &OnionParams<f32>,
    edits: &[OnionEditExample],
    mode: DecodeMode,
) -> Result<f64> {
    if edits.is_empty() {
        return Err(Error::contract("eval_onion needs edits"));
    }
    let preds = predict_onion(model, op, edits, mode)?;
    let hits = preds.iter().zip(edits).filter(|(p, e)| **p == e.target()).count();
    Ok(hits as f64 / edits.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainedOnion {
    pub params: OnionParams<f32>,
    pub constraint: OnionConstraint,
    pub report: LoopReport,
}

impl TrainedOnion {
    pub fn gamma_negative(&self) -> bool {
        self.params.gamma_negative()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn train_onion(
    model: &GruParams<f32>,
    mode: DecodeMode,
    constraint: OnionConstraint,
    train: &[RepeatExample],
    test: &[RepeatExample],
    cfg: &AuxConfig,
    observe: impl FnMut(&MetricRecord),
) -> Result<TrainedOnion> {
    cfg.validate()?;
    let n_symbols = model.n_symbols;
    if n_symbols < 2 {
        return Err(Error::contract("onion edits need at least two symbols"));
    }
    let eval_set = edit_set(test, cfg.eval_size, n_symbols, &mut Rng::derive(cfg.seed, "onion/eval"))?;
    let mut params = OnionParams::<f32>::init(
        model.hidden,
        n_symbols,
        constraint,
        &mut Rng::derive(cfg.seed, "onion/init"),
    );
    let feedback = training_feedback(mode);
    let trainable = move |name: &str| match constraint {
        OnionConstraint::Free => true,
        OnionConstraint::FixedGammaBetaOne => name != "gamma" && name != "beta",
    };
    let report = run_loop(
        &mut params,
        &cfg.loop_spec(),
        &trainable,
        |g, vars, step| {
            let mut rng = Rng::derive(cfg.seed, &format!("onion/batch/{step}"));
            let edits = edit_set(train, cfg.batch_size, n_symbols, &mut rng)?;
            let bases: Vec<&[usize]> = edits.iter().map(|e| e.base.as_slice()).collect();
            let targets: Vec<Vec<usize>> = edits.iter().map(|e| e.target()).collect();
            let trefs: Vec<&[usize]> = targets.iter().map(|t| t.as_slice()).collect();
            let h = g.constant(gru::encode_batch(model, &bases)?);
            let ov = OnionVars::from_vars(vars);
            let hi = intervene_on_graph(g, &ov, h, &edits);
            let mv = model.bind(g, false);
            let cell = Cell::new(g, &mv);
            let dec = gru::decode_on_graph(g, &cell, hi, &trefs, mode, feedback, true);
            Ok(dec.loss.expect("loss requested"))
        },
        |p| eval_onion(model, p, &eval_set, mode),
        observe,
    )?;
    if params.gamma_negative() {
        log::warn!("onion intervention learned a negative gamma channel");
    }
    Ok(TrainedOnion {
        params,
        constraint,
        report,
    })
}

#[derive(Deserialize, Serialize)]
struct OnionMeta {
    hidden: usize,
    n_symbols: usize,
    constraint: OnionConstraint,
}

pub fn save_onion(
    path: &std::path::Path,
    op: &OnionParams<f32>,
    constraint: OnionConstraint,
    extra: serde_json::Value,
) -> Result<()> {
    save_aux(
        path,
        ONION_OBJECTIVE,
        json!({
            "hidden": op.hidden,
            "n_symbols": op.n_symbols,
            "constraint": constraint,
            "run": extra,
        }),
        op,
    )
}

pub fn load_onion(path: &std::path::Path) -> Result<(OnionParams<f32>, OnionConstraint)> {
    let (meta, arrays) = load_aux(path, ONION_OBJECTIVE)?;
    let m: OnionMeta = serde_json::from_value(meta).map_err(|e| Error::Format {
        path: path.to_owned(),
        field: "meta".into(),
        reason: e.to_string(),
    })?;
    let n = m.hidden;
    let layout = [
        ("embedding", vec![m.n_symbols, n]),
        ("g", vec![1, n]),
        ("gamma", vec![1, n]),
        ("beta", vec![1, n]),
        ("b", vec![1, n]),
    ];
    let mut t = take_named(arrays, &layout, path)?.into_iter();
    let mut next = || t.next().unwrap();
    Ok((
        OnionParams {
            hidden: n,
            n_symbols: m.n_symbols,
            embedding: next(),
            g: next(),
            gamma: next(),
            beta: next(),
            b: next(),
        },
        m.constraint,
    ))
}

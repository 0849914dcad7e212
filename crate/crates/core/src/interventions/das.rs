//! Distributed alignment search over the final encoding state.
//!
//! A rotation `R` (Cayley map of a free matrix) moves the state into a basis
//! where each coordinate is assigned to one causal variable, or to none.
//! The assignment `A` is a hard one-hot per row drawn from Gumbel-softmax
//! over learned logits `Â` (`N × (V + 1)`, column 0 = unassigned). With
//! `m = Σ_{v ∈ vars} A[:, v]`:
//!
//! ```text
//! h̄_b = R h_b,  h̄_s = R h_s
//! h̄   = (1 − m) ⊙ h̄_b + m ⊙ h̄_s
//! h   = Rᵀ h̄
//! ```
//!
//! States are row vectors here, so `R h` is computed as `h Rᵀ`. Evaluation
//! uses the per-row argmax of `Â` instead of a sample.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::training_feedback;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::gru::{self, Cell, DecodeMode, GruParams};
use crate::ortho::{cayley, orthogonalize};
use crate::params::{load_aux, save_aux, take_named, ParamSet};
use crate::rng::Rng;
use crate::taskgen::{
    bigram_counterfactual_from, unigram_counterfactual_from, CounterfactualExample, Granularity, RepeatExample,
};
use crate::tensor::{Real, Tensor};
use crate::trainer::{run_loop, AuxConfig, LoopReport, MetricRecord};

pub const DAS_OBJECTIVE: &str = "das";
pub const GUMBEL_TAU: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DasParams<T: Real> {
    pub hidden: usize,
    pub granularity: Granularity,
    pub n_variables: usize,
    /// Free `N × N` parameter of the rotation.
    pub skew: Tensor<T>,
    /// `N × (V + 1)` assignment logits; column 0 means unassigned.
    pub logits: Tensor<T>,
}

impl<T: Real> ParamSet<T> for DasParams<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("skew", &self.skew), ("assignment_logits", &self.logits)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("skew", &mut self.skew), ("assignment_logits", &mut self.logits)]
    }
}

impl<T: Real> DasParams<T> {
    /// `skew ~ Normal(0, 1/√N)`, logits zero.
    pub fn init(hidden: usize, granularity: Granularity, l_max: usize, rng: &mut Rng) -> Self {
        let v = granularity.num_variables(l_max);
        Self {
            hidden,
            granularity,
            n_variables: v,
            skew: Tensor::normal(&[hidden, hidden], 0.0, 1.0 / (hidden as f64).sqrt(), rng),
            logits: Tensor::zeros(&[hidden, v + 1]),
        }
    }

    pub fn rotation(&self) -> Result<Tensor<T>> {
        cayley(&self.skew)
    }

    /// Deterministic assignment: column index (0 = unassigned) per row.
    pub fn assignment(&self) -> Vec<usize> {
        (0..self.hidden)
            .map(|r| self.logits.argmax_row(r, self.n_variables + 1))
            .collect()
    }

    pub fn check_variables(&self, vars: &[usize]) -> Result<()> {
        match vars.iter().find(|&&v| v == 0 || v > self.n_variables) {
            Some(v) => Err(Error::contract(format!(
                "variable {v} outside 1..={}",
                self.n_variables
            ))),
            None => Ok(()),
        }
    }
}

/// Replacement mask for `vars` under a per-row assignment.
pub fn mask_from_assignment(assignment: &[usize], vars: &[usize]) -> Vec<bool> {
    assignment.iter().map(|a| *a != 0 && vars.contains(a)).collect()
}

/// Interchange with an explicit rotation and assignment (row vectors).
pub fn replace_with<T: Real>(r: &Tensor<T>, assignment: &[usize], hb: &[T], hs: &[T], vars: &[usize]) -> Vec<T> {
    let mask = mask_from_assignment(assignment, vars);
    if !mask.contains(&true) {
        return hb.to_vec();
    }
    let n = hb.len();
    let rt = r.transpose();
    let hbr = Tensor::from_vec(&[1, n], hb.to_vec()).matmul(&rt);
    let hsr = Tensor::from_vec(&[1, n], hs.to_vec()).matmul(&rt);
    let mixed: Vec<T> = (0..n)
        .map(|i| if mask[i] { hsr.data()[i] } else { hbr.data()[i] })
        .collect();
    Tensor::from_vec(&[1, n], mixed).matmul(r).into_data()
}

/// Evaluation-mode interchange of `vars` from `h_source` into `h_base`.
pub fn subspace_replace<T: Real>(das: &DasParams<T>, h_base: &[T], h_source: &[T], vars: &[usize]) -> Result<Vec<T>> {
    das.check_variables(vars)?;
    if h_base.len() != das.hidden || h_source.len() != das.hidden {
        return Err(Error::contract("state size does not match DAS hidden size"));
    }
    if vars.is_empty() {
        return Ok(h_base.to_vec());
    }
    let r = das.rotation()?;
    Ok(replace_with(&r, &das.assignment(), h_base, h_source, vars))
}

/// Batched interchange on a graph. `assign` is an `N × (V + 1)` one-hot
/// matrix; `vars[k]` lists the variables exchanged for row `k`.
pub fn replace_on_graph<T: Real>(g: &mut Graph<T>, r: Var, assign: Var, hb: Var, hs: Var, vars: &[Vec<usize>]) -> Var {
    let cols = g.value(assign).cols();
    let mut sel = Tensor::zeros(&[vars.len(), cols]);
    for (k, vs) in vars.iter().enumerate() {
        for &v in vs {
            sel.set(k, v, T::one());
        }
    }
    let sel = g.constant(sel);
    let at = g.transpose(assign);
    let mask = g.matmul(sel, at);
    let rt = g.transpose(r);
    let hbr = g.matmul(hb, rt);
    let hsr = g.matmul(hs, rt);
    let diff = g.sub(hsr, hbr);
    let md = g.mul(mask, diff);
    let mixed = g.add(hbr, md);
    g.matmul(mixed, r)
}

/// Counterfactual dataset whose targets are drawn from `source`.
pub fn counterfactual_set(
    source: &[RepeatExample],
    granularity: Granularity,
    n: usize,
    n_symbols: usize,
    rng: &mut Rng,
) -> Result<Vec<CounterfactualExample>> {
    if granularity == Granularity::Bigram && (n_symbols < 2 || source.iter().all(|e| e.len() < 2)) {
        return Err(Error::contract("bigram counterfactuals need sequences of length >= 2"));
    }
    if source.is_empty() {
        return Err(Error::contract("counterfactual source set is empty"));
    }
    Ok((0..n)
        .map(|_| loop {
            let y = source[rng.below(source.len())].tokens.clone();
            match granularity {
                Granularity::Unigram => break unigram_counterfactual_from(rng, y, n_symbols),
                Granularity::Bigram if y.len() >= 2 => break bigram_counterfactual_from(rng, y, n_symbols),
                Granularity::Bigram => continue,
            }
        })
        .collect())
}

/// Greedy outputs after intervening on each example.
pub fn predict_das(
    model: &GruParams<f32>,
    das: &DasParams<f32>,
    examples: &[CounterfactualExample],
    mode: DecodeMode,
) -> Result<Vec<Vec<usize>>> {
    let r = das.rotation()?;
    let assignment = das.assignment();
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(gru::EVAL_CHUNK) {
        let bs: Vec<&[usize]> = chunk.iter().map(|e| e.b.as_slice()).collect();
        let ss: Vec<&[usize]> = chunk.iter().map(|e| e.s.as_slice()).collect();
        let hb = gru::encode_batch(model, &bs)?;
        let hs = gru::encode_batch(model, &ss)?;
        let mut states = Vec::with_capacity(hb.len());
        for (k, e) in chunk.iter().enumerate() {
            let vars = e.variables();
            das.check_variables(&vars)?;
            states.extend(replace_with(&r, &assignment, hb.row_slice(k), hs.row_slice(k), &vars));
        }
        let states = Tensor::from_vec(&[chunk.len(), das.hidden], states);
        let lens: Vec<usize> = chunk.iter().map(|e| e.y.len()).collect();
        out.extend(gru::decode(model, &states, &lens, mode)?);
    }
    Ok(out)
}

/// Fraction of examples whose intervened decode equals `y` exactly.
pub fn eval_das(
    model: &GruParams<f32>,
    das: &DasParams<f32>,
    examples: &[CounterfactualExample],
    mode: DecodeMode,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("eval_das needs examples"));
    }
    let preds = predict_das(model, das, examples, mode)?;
    let hits = preds.iter().zip(examples).filter(|(p, e)| **p == e.y).count();
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainedDas {
    pub params: DasParams<f32>,
    pub report: LoopReport,
}

/// Learn rotation and assignment against a frozen model.
///
/// Training targets come from `train`, the held-out evaluation set from
/// `test`. Each step draws a fresh batch of counterfactuals.
#[allow(clippy::too_many_arguments)]
pub fn train_das(
    model: &GruParams<f32>,
    mode: DecodeMode,
    granularity: Granularity,
    l_max: usize,
    train: &[RepeatExample],
    test: &[RepeatExample],
    cfg: &AuxConfig,
    observe: impl FnMut(&MetricRecord),
) -> Result<TrainedDas> {
    cfg.validate()?;
    let n_symbols = model.n_symbols;
    let eval_set = counterfactual_set(
        test,
        granularity,
        cfg.eval_size,
        n_symbols,
        &mut Rng::derive(cfg.seed, "das/eval"),
    )?;
    let mut params = DasParams::<f32>::init(model.hidden, granularity, l_max, &mut Rng::derive(cfg.seed, "das/init"));
    let feedback = training_feedback(mode);
    let mut gumbel = Rng::derive(cfg.seed, "das/gumbel");
    let report = run_loop(
        &mut params,
        &cfg.loop_spec(),
        &|_| true,
        |g, vars, step| {
            let mut rng = Rng::derive(cfg.seed, &format!("das/batch/{step}"));
            let batch = counterfactual_set(train, granularity, cfg.batch_size, n_symbols, &mut rng)?;
            let bs: Vec<&[usize]> = batch.iter().map(|e| e.b.as_slice()).collect();
            let ss: Vec<&[usize]> = batch.iter().map(|e| e.s.as_slice()).collect();
            let ys: Vec<&[usize]> = batch.iter().map(|e| e.y.as_slice()).collect();
            let hb = gru::encode_batch(model, &bs)?;
            let hs = gru::encode_batch(model, &ss)?;
            let hb = g.constant(hb);
            let hs = g.constant(hs);
            let r = orthogonalize(g, vars[0])?;
            let a = g.gumbel_softmax_hard(vars[1], GUMBEL_TAU as f32, &mut gumbel);
            let variables: Vec<Vec<usize>> = batch.iter().map(|e| e.variables()).collect();
            let h = replace_on_graph(g, r, a, hb, hs, &variables);
            let mv = model.bind(g, false);
            let cell = Cell::new(g, &mv);
            let dec = gru::decode_on_graph(g, &cell, h, &ys, mode, feedback, true);
            Ok(dec.loss.expect("loss requested"))
        },
        |p| eval_das(model, p, &eval_set, mode),
        observe,
    )?;
    Ok(TrainedDas { params, report })
}

pub fn save_das(path: &std::path::Path, das: &DasParams<f32>, extra: serde_json::Value) -> Result<()> {
    save_aux(
        path,
        DAS_OBJECTIVE,
        json!({
            "hidden": das.hidden,
            "granularity": das.granularity,
            "n_variables": das.n_variables,
            "run": extra,
        }),
        das,
    )
}

#[derive(Deserialize, Serialize)]
struct DasMeta {
    hidden: usize,
    granularity: Granularity,
    n_variables: usize,
}

pub fn load_das(path: &std::path::Path) -> Result<DasParams<f32>> {
    let (meta, arrays) = load_aux(path, DAS_OBJECTIVE)?;
    let m: DasMeta = serde_json::from_value(meta).map_err(|e| Error::Format {
        path: path.to_owned(),
        field: "meta".into(),
        reason: e.to_string(),
    })?;
    let layout = [
        ("skew", vec![m.hidden, m.hidden]),
        ("assignment_logits", vec![m.hidden, m.n_variables + 1]),
    ];
    let mut t = take_named(arrays, &layout, path)?.into_iter();
    Ok(DasParams {
        hidden: m.hidden,
        granularity: m.granularity,
        n_variables: m.n_variables,
        skew: t.next().unwrap(),
        logits: t.next().unwrap(),
    })
}

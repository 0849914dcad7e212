//! Hand-designed onion memory with a scalar scale state.
//!
//! ```text
//! h_1 = 0,   h_{t+1} = h_t + s_t x_t
//! s_1 = 1,   s_{L+1} = −1,   otherwise s_t = γ s_{t−1}
//! ```
//!
//! During encoding `x_t` is the embedding of input token `t`. During
//! decoding step `k` emits `y_k = argmax(h W_o + b_o)` from `h_{L+k}` and
//! feeds `x_{L+k} = E[y_k]` back, so each output is subtracted from the
//! memory with the same magnitude it was stored with. `γ = 0.4` is fixed;
//! only `E`, `W_o` and `b_o` are learned. Outputs range over the real
//! symbols only.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{load_aux, save_aux, take_named, ParamSet};
use crate::rng::Rng;
use crate::taskgen::RepeatExample;
use crate::tensor::{Real, Tensor};
use crate::trainer::{run_loop, AuxConfig, EpochSampler, LoopReport, MetricRecord};

pub const TOY_GAMMA: f64 = 0.4;
pub const TOY_OBJECTIVE: &str = "toy";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams<T: Real> {
    pub hidden: usize,
    pub n_symbols: usize,
    pub gamma: f64,
    /// `n_symbols × N`
    pub embedding: Tensor<T>,
    /// `N × n_symbols`
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
}

impl<T: Real> ParamSet<T> for ToyParams<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("embedding", &self.embedding), ("w_o", &self.w_o), ("b_o", &self.b_o)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("embedding", &mut self.embedding),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
        ]
    }
}

impl<T: Real> ToyParams<T> {
    pub fn init(hidden: usize, n_symbols: usize, rng: &mut Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        Self {
            hidden,
            n_symbols,
            gamma: TOY_GAMMA,
            embedding: Tensor::normal(&[n_symbols, hidden], 0.0, k, rng),
            w_o: Tensor::uniform(&[hidden, n_symbols], -k, k, rng),
            b_o: Tensor::zeros(&[1, n_symbols]),
        }
    }
}

/// Scales `s_1..s_{2L}`.
pub fn scale_trace(len: usize, gamma: f64) -> Vec<f64> {
    let mut s = Vec::with_capacity(2 * len);
    for t in 0..2 * len {
        s.push(if t == 0 {
            1.0
        } else if t == len {
            -1.0
        } else {
            gamma * s[t - 1]
        });
    }
    s
}

/// Memory after encoding `tokens`.
pub fn toy_encode<T: Real>(p: &ToyParams<T>, tokens: &[usize]) -> Vec<T> {
    let scales = scale_trace(tokens.len(), p.gamma);
    let mut h = vec![T::zero(); p.hidden];
    for (t, &tok) in tokens.iter().enumerate() {
        let s = T::from_f64_lossy(scales[t]);
        for (x, &e) in h.iter_mut().zip(p.embedding.row_slice(tok)) {
            *x = *x + s * e;
        }
    }
    h
}

/// Greedy decode; returns the outputs and the memory after the final feedback.
pub fn toy_decode<T: Real>(p: &ToyParams<T>, h: &[T], len: usize) -> (Vec<usize>, Vec<T>) {
    let scales = scale_trace(len, p.gamma);
    let mut h = h.to_vec();
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let hv = Tensor::from_vec(&[1, p.hidden], h.clone());
        let logits = hv.matmul(&p.w_o).zip_map(&p.b_o, |a, b| a + b);
        let y = logits.argmax_row(0, p.n_symbols);
        out.push(y);
        let s = T::from_f64_lossy(scales[len + k]);
        for (x, &e) in h.iter_mut().zip(p.embedding.row_slice(y)) {
            *x = *x + s * e;
        }
    }
    (out, h)
}

pub fn toy_run<T: Real>(p: &ToyParams<T>, tokens: &[usize]) -> Result<Vec<usize>> {
    if tokens.is_empty() || tokens.iter().any(|&t| t >= p.n_symbols) {
        return Err(Error::Contract("toy input must be non-empty real symbols".into()));
    }
    Ok(toy_decode(p, &toy_encode(p, tokens), tokens.len()).0)
}

pub fn toy_exact_match<T: Real>(p: &ToyParams<T>, examples: &[RepeatExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Contract("toy evaluation needs examples".into()));
    }
    let mut hits = 0;
    for e in examples {
        hits += usize::from(toy_run(p, &e.tokens)? == e.tokens);
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Teacher-forced mean cross-entropy over decode steps, batched.
fn toy_loss<T: Real>(g: &mut Graph<T>, vars: &[Var], gamma: f64, hidden: usize, batch: &[&[usize]]) -> Var {
    let (e, w_o, b_o) = (vars[0], vars[1], vars[2]);
    let b = batch.len();
    let steps = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    let total: usize = batch.iter().map(|s| s.len()).sum();
    let denom = T::from_usize(total.max(1)).unwrap();
    let mut h = g.constant(Tensor::zeros(&[b, hidden]));
    let scale_at = |len: usize, t: usize| scale_trace(len, gamma)[t];
    for t in 0..steps {
        let idx: Vec<usize> = batch.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
        let f: Vec<T> = batch
            .iter()
            .map(|s| {
                if t < s.len() {
                    T::from_f64_lossy(scale_at(s.len(), t))
                } else {
                    T::zero()
                }
            })
            .collect();
        let x = g.gather_rows(e, idx);
        let sx = g.scale_rows(x, f);
        h = g.add(h, sx);
    }
    let mut acc: Option<Var> = None;
    for k in 0..steps {
        let o = g.matmul(h, w_o);
        let logits = g.add_row(o, b_o);
        let tg: Vec<Option<usize>> = batch.iter().map(|s| s.get(k).copied()).collect();
        let ce = g.cross_entropy(logits, tg, denom);
        acc = Some(match acc {
            Some(a) => g.add(a, ce),
            None => ce,
        });
        if k + 1 < steps {
            let idx: Vec<usize> = batch.iter().map(|s| s.get(k).copied().unwrap_or(0)).collect();
            let f: Vec<T> = batch
                .iter()
                .map(|s| {
                    if k < s.len() {
                        T::from_f64_lossy(scale_at(s.len(), s.len() + k))
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let x = g.gather_rows(e, idx);
            let sx = g.scale_rows(x, f);
            h = g.add(h, sx);
        }
    }
    acc.expect("non-empty batch")
}

#[derive(Debug, Clone)]
pub struct TrainedToy {
    pub params: ToyParams<f32>,
    pub report: LoopReport,
}

pub fn toy_train(
    hidden: usize,
    n_symbols: usize,
    train: &[RepeatExample],
    test: &[RepeatExample],
    cfg: &AuxConfig,
    observe: impl FnMut(&MetricRecord),
) -> Result<TrainedToy> {
    cfg.validate()?;
    if hidden == 0 || train.is_empty() || test.is_empty() {
        return Err(Error::Contract("toy training needs N > 0 and data".into()));
    }
    let mut params = ToyParams::<f32>::init(hidden, n_symbols, &mut Rng::derive(cfg.seed, "toy/init"));
    let mut sampler = EpochSampler::new(train.len(), cfg.batch_size, crate::rng::derive_seed(cfg.seed, "toy/batches"));
    let eval_set = &test[..cfg.eval_size.min(test.len())];
    let report = run_loop(
        &mut params,
        &cfg.loop_spec(),
        &|_| true,
        |g, vars, _| {
            let idx = sampler.next_batch();
            let batch: Vec<&[usize]> = idx.iter().map(|&i| train[i].tokens.as_slice()).collect();
            Ok(toy_loss(g, vars, TOY_GAMMA, hidden, &batch))
        },
        |p| toy_exact_match(p, eval_set),
        observe,
    )?;
    Ok(TrainedToy { params, report })
}

#[derive(Serialize, Deserialize)]
struct ToyMeta {
    hidden: usize,
    n_symbols: usize,
    gamma: f64,
}

pub fn save_toy(path: &std::path::Path, p: &ToyParams<f32>, extra: serde_json::Value) -> Result<()> {
    save_aux(
        path,
        TOY_OBJECTIVE,
        json!({"hidden": p.hidden, "n_symbols": p.n_symbols, "gamma": p.gamma, "run": extra}),
        p,
    )
}

pub fn load_toy(path: &std::path::Path) -> Result<ToyParams<f32>> {
    let (meta, arrays) = load_aux(path, TOY_OBJECTIVE)?;
    let m: ToyMeta = serde_json::from_value(meta).map_err(|e| Error::Format {
        path: path.to_owned(),
        field: "meta".into(),
        reason: e.to_string(),
    })?;
    let layout = [
        ("embedding", vec![m.n_symbols, m.hidden]),
        ("w_o", vec![m.hidden, m.n_symbols]),
        ("b_o", vec![1, m.n_symbols]),
    ];
    let mut t = take_named(arrays, &layout, path)?.into_iter();
    Ok(ToyParams {
        hidden: m.hidden,
        n_symbols: m.n_symbols,
        gamma: m.gamma,
        embedding: t.next().unwrap(),
        w_o: t.next().unwrap(),
        b_o: t.next().unwrap(),
    })
}

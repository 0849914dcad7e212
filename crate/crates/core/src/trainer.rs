//! Training loops, metrics and GRU checkpoints.
//!
//! [`run_loop`] is the generic optimisation loop used by the base model and
//! by every auxiliary model (interventions, probes, toy model): it binds a
//! [`ParamSet`], asks a closure for the loss, applies AdamW and evaluates on
//! a fixed cadence. A numeric failure stops the loop and rolls the
//! parameters back to the last evaluated (finite) snapshot.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Container, Magic};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::gru::{self, DecodeMode, Feedback, GruParams};
use crate::optim::AdamWConfig;
use crate::params::{take_named, ParamSet};
use crate::rng::{Rng, RNG_ALGORITHM};
use crate::taskgen::{RepeatExample, TaskConfig};
use crate::tensor::Real;

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopSpec {
    pub steps: usize,
    pub eval_every: usize,
    pub adam: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub metrics: Vec<MetricRecord>,
    pub steps_completed: usize,
    /// Set when training stopped on a NaN/Inf; parameters hold the last
    /// finite evaluated snapshot.
    pub failure: Option<String>,
}

impl LoopReport {
    /// First recorded step whose evaluation reached `threshold`.
    pub fn first_step_reaching(&self, threshold: f64) -> Option<usize> {
        self.metrics
            .iter()
            .find(|m| m.eval_accuracy >= threshold)
            .map(|m| m.step)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.eval_accuracy)
    }
}

/// Generic AdamW loop.
///
/// `loss_fn(graph, vars, step)` builds the loss for step `step` (0-based) on a
/// graph where `params` are already bound (`trainable` picks which tensors get
/// gradients). `eval_fn` runs after every `eval_every` steps and after the
/// last one; `observe` sees each metric record as it is produced.
pub fn run_loop<T, P, L, E, O>(
    params: &mut P,
    spec: &LoopSpec,
    trainable: &dyn Fn(&str) -> bool,
    mut loss_fn: L,
    mut eval_fn: E,
    mut observe: O,
) -> Result<LoopReport>
where
    T: Real,
    P: ParamSet<T> + Clone,
    L: FnMut(&mut Graph<T>, &[Var], usize) -> Result<Var>,
    E: FnMut(&P) -> Result<f64>,
    O: FnMut(&MetricRecord),
{
    if spec.eval_every == 0 {
        return Err(Error::contract("eval_every must be positive"));
    }
    let mut opt = params.optimizer(spec.adam);
    let mut last_good = params.clone();
    let mut metrics = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut failure = None;
    let mut completed = 0;
    for step in 0..spec.steps {
        let outcome = (|| -> Result<f64> {
            let mut g = Graph::new();
            let vars = params.bind(&mut g, trainable);
            let loss = loss_fn(&mut g, &vars, step)?;
            let (value, grads) = g.forward_backward(loss)?;
            params.apply(&mut opt, &vars, &grads)?;
            if !params.is_finite() {
                return Err(Error::Numeric {
                    node: usize::MAX,
                    op: "optimizer",
                });
            }
            Ok(value.to_f64_lossy())
        })();
        match outcome {
            Ok(v) => {
                loss_sum += v;
                loss_count += 1;
                completed = step + 1;
            }
            Err(e @ Error::Numeric { .. }) => {
                log::warn!("numeric failure at step {step}: {e}; restoring last good parameters");
                failure = Some(format!("step {step}: {e}"));
                *params = last_good.clone();
                break;
            }
            Err(e) => return Err(e),
        }
        if completed % spec.eval_every == 0 || completed == spec.steps {
            let acc = eval_fn(params)?;
            let rec = MetricRecord {
                step: completed,
                train_loss: loss_sum / loss_count.max(1) as f64,
                eval_accuracy: acc,
            };
            log::info!(
                "step {} loss {:.5} eval {:.4}",
                rec.step,
                rec.train_loss,
                rec.eval_accuracy
            );
            observe(&rec);
            metrics.push(rec);
            loss_sum = 0.0;
            loss_count = 0;
            last_good = params.clone();
        }
    }
    Ok(LoopReport {
        metrics,
        steps_completed: completed,
        failure,
    })
}

/// Mini-batches of indices, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        assert!(n > 0 && batch > 0);
        let mut s = Self {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = Rng::derive(self.seed, &format!("shuffle/{}", self.epoch));
        rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    /// Next batch; the last batch of an epoch may be short.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.batch).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Budget shared by interventions, probes and the toy model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Examples in the held-out evaluation set.
    pub eval_size: usize,
    pub seed: u64,
    pub adam: AdamWConfig,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 256,
            eval_every: 1_000,
            eval_size: 1_000,
            seed: 0,
            adam: AdamWConfig::default(),
        }
    }
}

impl AuxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_size == 0 {
            return Err(Error::contract(
                "batch_size, eval_every and eval_size must be positive",
            ));
        }
        Ok(())
    }

    pub fn loop_spec(&self) -> LoopSpec {
        LoopSpec {
            steps: self.steps,
            eval_every: self.eval_every,
            adam: self.adam,
        }
    }
}

/// Hyper-parameters of a base GRU run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub mode: DecodeMode,
    pub feedback: Feedback,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    /// Number of test sequences used for periodic evaluation.
    pub eval_size: usize,
    pub seed: u64,
    pub adam: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Batch 256, 40K steps, AdamW lr 1e-3 / weight decay 0.1, teacher-forced
    /// decoder inputs.
    pub fn paper() -> Self {
        Self {
            hidden: 64,
            mode: DecodeMode::Autoregressive,
            feedback: Feedback::TeacherForced,
            batch_size: 256,
            steps: 40_000,
            eval_every: 1_000,
            eval_size: 5_000,
            seed: 0,
            adam: AdamWConfig::default(),
        }
    }

    /// Same optimiser settings with a 10K-step budget.
    pub fn desk() -> Self {
        Self {
            steps: 10_000,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_size == 0 {
            return Err(Error::contract(
                "hidden, batch_size, eval_every and eval_size must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedGru {
    pub params: GruParams<f32>,
    pub report: LoopReport,
}

/// Train a GRU from scratch on `train`, evaluating exact match on the first
/// `eval_size` sequences of `test`.
pub fn train_gru(
    task: &TaskConfig,
    train: &[RepeatExample],
    test: &[RepeatExample],
    cfg: &TrainConfig,
    observe: impl FnMut(&MetricRecord),
) -> Result<TrainedGru> {
    task.validate()?;
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract("training needs non-empty train and test sets"));
    }
    let mut init_rng = Rng::derive(cfg.seed, "gru/init");
    let mut params = GruParams::<f32>::init(cfg.hidden, task.n_symbols, &mut init_rng);
    let mut sampler = EpochSampler::new(train.len(), cfg.batch_size, derive(cfg.seed, "gru/batches"));
    let eval_set = &test[..cfg.eval_size.min(test.len())];
    let (hidden, n_symbols) = (cfg.hidden, task.n_symbols);
    let spec = LoopSpec {
        steps: cfg.steps,
        eval_every: cfg.eval_every,
        adam: cfg.adam,
    };
    let report = run_loop(
        &mut params,
        &spec,
        &|_| true,
        |g, vars, _| {
            let idx = sampler.next_batch();
            let batch: Vec<&[usize]> = idx.iter().map(|&i| train[i].tokens.as_slice()).collect();
            let v = gru::GruVars::from_vars(vars, hidden, n_symbols);
            let dec = gru::batch_loss(g, &v, &batch, cfg.mode, cfg.feedback);
            Ok(dec.loss.expect("loss requested"))
        },
        |p| gru::exact_match(p, eval_set, cfg.mode),
        observe,
    )?;
    Ok(TrainedGru { params, report })
}

fn derive(seed: u64, label: &str) -> u64 {
    crate::rng::derive_seed(seed, label)
}

/// Metadata stored alongside GRU weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub hidden: usize,
    pub n_symbols: usize,
    pub l_max: usize,
    pub mode: DecodeMode,
    pub feedback: Feedback,
    pub seed: u64,
    pub step: usize,
    pub rng: String,
}

impl CheckpointMeta {
    pub fn new(task: &TaskConfig, cfg: &TrainConfig, step: usize) -> Self {
        Self {
            hidden: cfg.hidden,
            n_symbols: task.n_symbols,
            l_max: task.l_max,
            mode: cfg.mode,
            feedback: cfg.feedback,
            seed: cfg.seed,
            step,
            rng: RNG_ALGORITHM.to_owned(),
        }
    }
}

pub fn save_checkpoint(path: &Path, params: &GruParams<f32>, meta: &CheckpointMeta) -> Result<()> {
    if params.hidden != meta.hidden || params.n_symbols != meta.n_symbols {
        return Err(Error::contract("checkpoint metadata does not match parameters"));
    }
    let c = Container {
        magic: Magic::Checkpoint,
        meta: json!(meta),
        arrays: params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n.to_owned(), t.clone()))
            .collect(),
    };
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(GruParams<f32>, CheckpointMeta)> {
    let c = Container::load(path, Magic::Checkpoint)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format {
        path: path.to_owned(),
        field: "meta".into(),
        reason: e.to_string(),
    })?;
    let layout = GruParams::<f32>::layout(meta.hidden, meta.n_symbols);
    let tensors = take_named(c.arrays, &layout, path)?;
    Ok((
        GruParams::from_tensors(meta.hidden, meta.n_symbols, tensors),
        meta,
    ))
}

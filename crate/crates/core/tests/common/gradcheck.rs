//! Central finite-difference checks for the autodiff tape (f64).

use onion_core::gru::{self, GruParams};
use onion_core::ortho::orthogonalize;
use onion_core::{DecodeMode, Feedback, Graph, ParamSet, Rng, Tensor, Var};

const EPS: f64 = 1e-6;

/// Largest relative error between analytic and numeric gradients over all
/// inputs, with the relative error of an input measured as
/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-8)`.
pub fn max_rel_error<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("finite backward");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for k in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let a = analytic.data()[k];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::normal(shape, 0.0, 1.0, rng)
}

/// Scalar loss `Σ out ⊙ W` with fixed random `W`.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::normal(&shape, 0.0, 1.0, &mut Rng::new(seed)));
    let p = g.mul(out, w);
    g.sum(p)
}

/// `(name, max relative error)` for every primitive and composite check.
pub fn all_checks() -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(2024);
    let a = rand(&[3, 4], &mut rng);
    let b = rand(&[4, 5], &mut rng);
    let c = rand(&[3, 4], &mut rng);
    let row = rand(&[1, 4], &mut rng);
    let sq = {
        let mut m = rand(&[4, 4], &mut rng).scaled(0.3);
        for i in 0..4 {
            m.set(i, i, m.get(i, i) + 2.0);
        }
        m
    };
    // Keep ReLU inputs away from the kink.
    let away = a.map(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    macro_rules! check {
        ($name:expr, $inputs:expr, |$g:ident, $v:ident| $body:expr) => {{
            let err = max_rel_error(&$inputs, |$g: &mut Graph<f64>, $v: &[Var]| {
                let o = $body;
                project($g, o, 7)
            });
            out.push(($name, err));
        }};
    }
    check!("matmul", [a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
    check!("transpose", [a.clone()], |g, v| g.transpose(v[0]));
    check!("add", [a.clone(), c.clone()], |g, v| g.add(v[0], v[1]));
    check!("sub", [a.clone(), c.clone()], |g, v| g.sub(v[0], v[1]));
    check!("mul", [a.clone(), c.clone()], |g, v| g.mul(v[0], v[1]));
    check!("mul-self", [a.clone()], |g, v| g.mul(v[0], v[0]));
    check!("add_row", [a.clone(), row.clone()], |g, v| g.add_row(v[0], v[1]));
    check!("mul_row", [a.clone(), row.clone()], |g, v| g.mul_row(v[0], v[1]));
    check!("broadcast_rows", [row.clone()], |g, v| g.broadcast_rows(v[0], 3));
    check!("scale", [a.clone()], |g, v| g.scale(v[0], -1.7));
    check!("add_scalar", [a.clone()], |g, v| g.add_scalar(v[0], 0.4));
    check!("sigmoid", [a.clone()], |g, v| g.sigmoid(v[0]));
    check!("tanh", [a.clone()], |g, v| g.tanh(v[0]));
    check!("relu", [away.clone()], |g, v| g.relu(v[0]));
    check!("pow_rows", [a.clone()], |g, v| g.pow_rows(v[0], vec![0, 1, 3]));
    check!("powi", [a.clone()], |g, v| g.powi(v[0], 4));
    check!("scale_rows", [a.clone()], |g, v| g.scale_rows(v[0], vec![0.5, -2.0, 0.0]));
    check!("gather_rows", [a.clone()], |g, v| g.gather_rows(v[0], vec![2, 0, 2, 1, 2]));
    check!("slice_cols", [a.clone()], |g, v| g.slice_cols(v[0], 1, 3));
    check!("concat_cols", [a.clone(), c.clone()], |g, v| g.concat_cols(&[v[0], v[1], v[0]]));
    check!("softmax", [a.clone()], |g, v| g.softmax(v[0]));
    check!("layer_norm", [a.clone()], |g, v| g.layer_norm(v[0]));
    check!("sum", [a.clone()], |g, v| g.sum(v[0]));
    check!("mean", [a.clone()], |g, v| g.mean(v[0]));
    check!("inverse", [sq.clone()], |g, v| g.inverse(v[0]).unwrap());
    check!("cayley", [sq.scaled(0.2)], |g, v| orthogonalize(g, v[0]).unwrap());
    let ce = max_rel_error(&[a.clone()], |g, v| {
        g.cross_entropy(v[0], vec![Some(1), None, Some(3)], 2.0)
    });
    out.push(("cross_entropy", ce));
    out.push(("gumbel_softmax_hard", gumbel_check(&a)));
    out.push(("gru_step", gru_step_check()));
    out.push(("gru_sequence_loss", gru_loss_check()));
    out
}

/// The straight-through gradient must equal the gradient of the soft
/// relaxation evaluated at the same noise draw.
fn gumbel_check(logits: &Tensor<f64>) -> f64 {
    let tau = 0.7;
    let w = Tensor::normal(logits.shape(), 0.0, 1.0, &mut Rng::new(3));
    let mut g = Graph::new();
    let l = g.param(logits.clone());
    let hard = g.gumbel_softmax_hard(l, tau, &mut Rng::new(11));
    let wv = g.constant(w.clone());
    let p = g.mul(hard, wv);
    let loss = g.sum(p);
    let st = g.backward(loss).unwrap().get(l).unwrap().clone();
    let mut noise = Rng::new(11);
    let offsets: Vec<f64> = (0..logits.len()).map(|_| noise.gumbel()).collect();
    let soft_grad = {
        let mut g = Graph::new();
        let l = g.param(logits.clone());
        let o = g.constant(Tensor::from_vec(logits.shape(), offsets.clone()));
        let z = g.add(l, o);
        let z = g.scale(z, 1.0 / tau);
        let s = g.softmax(z);
        let wv = g.constant(w);
        let p = g.mul(s, wv);
        let loss = g.sum(p);
        g.backward(loss).unwrap().get(l).unwrap().clone()
    };
    let num: f64 = st
        .data()
        .iter()
        .zip(soft_grad.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den = soft_grad.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    num / den
}

fn small_gru(seed: u64) -> GruParams<f64> {
    let mut rng = Rng::new(seed);
    let mut p = GruParams::<f64>::init(5, 4, &mut rng);
    for (_, t) in p.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.normal(0.0, 0.3);
        }
    }
    p
}

/// Gradient of `‖h'‖²` for one step w.r.t. every GRU weight and `h`.
fn gru_step_check() -> f64 {
    let p = small_gru(5);
    let mut inputs: Vec<Tensor<f64>> = p.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.push(Tensor::normal(&[2, 5], 0.0, 0.5, &mut Rng::new(6)));
    max_rel_error(&inputs, |g, v| {
        let vars = gru::GruVars::from_vars(&v[..12], 5, 4);
        let cell = gru::Cell::new(g, &vars);
        let st = cell.step(g, v[12], &[1, 5]);
        let sq = g.mul(st.h, st.h);
        g.sum(sq)
    })
}

/// Full encode + teacher-forced decode loss on a ragged batch.
fn gru_loss_check() -> f64 {
    let p = small_gru(8);
    let inputs: Vec<Tensor<f64>> = p.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let batch: Vec<Vec<usize>> = vec![vec![0, 3, 1], vec![2], vec![1, 1]];
    max_rel_error(&inputs, |g, v| {
        let vars = gru::GruVars::from_vars(v, 5, 4);
        let refs: Vec<&[usize]> = batch.iter().map(|s| s.as_slice()).collect();
        gru::batch_loss(g, &vars, &refs, DecodeMode::Autoregressive, Feedback::TeacherForced)
            .loss
            .unwrap()
    })
}

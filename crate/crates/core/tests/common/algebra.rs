//! Randomised instances for the intervention identities.

use onion_core::interventions::das::{replace_with, subspace_replace, DasParams};
use onion_core::interventions::onion::{onion_intervene, OnionConstraint, OnionParams};
use onion_core::taskgen::{random_tokens, OnionEditExample};
use onion_core::{Granularity, Rng, Tensor};

fn jitter(t: &mut Tensor<f32>, std: f64, rng: &mut Rng) {
    for x in t.data_mut() {
        *x += rng.normal(0.0, std) as f32;
    }
}

fn state(n: usize, rng: &mut Rng) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()
}

/// A DAS instance with a non-trivial rotation and random logits.
pub fn random_das(seed: u64) -> (DasParams<f32>, Vec<f32>, Vec<f32>) {
    let mut rng = Rng::new(seed);
    let n = rng.range_inclusive(4, 64);
    let g = if rng.below(2) == 0 { Granularity::Unigram } else { Granularity::Bigram };
    let mut das = DasParams::<f32>::init(n, g, 9, &mut rng);
    jitter(&mut das.skew, 0.5, &mut rng);
    jitter(&mut das.logits, 1.0, &mut rng);
    let hb = state(n, &mut rng);
    let hs = state(n, &mut rng);
    (das, hb, hs)
}

fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

/// Exchanging no variables returns the base state bit-for-bit.
pub fn empty_mask_is_noop(seed: u64) -> bool {
    let (das, hb, hs) = random_das(seed);
    let out = subspace_replace(&das, &hb, &hs, &[]).unwrap();
    let r = das.rotation().unwrap();
    // A non-empty variable list that no coordinate is assigned to.
    let unassigned = vec![0; das.hidden];
    let via_mask = replace_with(&r, &unassigned, &hb, &hs, &[1]);
    out == hb && via_mask == hb
}

/// Every coordinate assigned to variable 1 and variable 1 exchanged: the
/// source state comes back (up to rounding).
pub fn full_mask_copy_error(seed: u64) -> f64 {
    let (mut das, hb, hs) = random_das(seed);
    let cols = das.logits.cols();
    for r in 0..das.hidden {
        for c in 0..cols {
            das.logits.set(r, c, if c == 1 { 10.0 } else { 0.0 });
        }
    }
    let out = subspace_replace(&das, &hb, &hs, &[1]).unwrap();
    max_abs(&out, &hs)
}

/// `h Rᵀ R` against `h`, and `R Rᵀ` against the identity.
pub fn rotation_roundtrip_error(seed: u64) -> f64 {
    let (das, hb, _) = random_das(seed);
    let n = das.hidden;
    let r = das.rotation().unwrap();
    let h = Tensor::from_vec(&[1, n], hb.clone());
    let back = h.matmul(&r.transpose()).matmul(&r);
    let rrt = r.matmul(&r.transpose());
    let mut ortho: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let e = if i == j { 1.0 } else { 0.0 };
            ortho = ortho.max((rrt.get(i, j) as f64 - e).abs());
        }
    }
    max_abs(back.data(), &hb).max(ortho)
}

pub fn random_onion(seed: u64) -> (OnionParams<f32>, Rng) {
    let mut rng = Rng::new(seed);
    let n = rng.range_inclusive(2, 64);
    let ns = rng.range_inclusive(2, 30);
    let mut op = OnionParams::<f32>::init(n, ns, OnionConstraint::Free, &mut rng);
    jitter(&mut op.embedding, 1.0, &mut rng);
    jitter(&mut op.g, 0.5, &mut rng);
    jitter(&mut op.gamma, 0.3, &mut rng);
    jitter(&mut op.beta, 0.3, &mut rng);
    jitter(&mut op.b, 0.3, &mut rng);
    (op, rng)
}

/// Replacing a token with itself leaves the state untouched.
pub fn onion_same_token_is_noop(seed: u64) -> bool {
    let (op, mut rng) = random_onion(seed);
    let len = rng.range_inclusive(1, 9);
    let base = random_tokens(&mut rng, op.n_symbols, len);
    let j = rng.range_inclusive(1, len);
    let edit = OnionEditExample {
        old_token: base[j - 1],
        new_token: base[j - 1],
        base,
        j,
    };
    let h = state(op.hidden, &mut rng);
    onion_intervene(&op, &h, &edit).unwrap() == h
}

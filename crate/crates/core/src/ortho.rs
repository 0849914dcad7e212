//! Orthogonal matrices from unconstrained parameters (Cayley transform).
//!
//! `R = (I - S)(I + S)^{-1}` with `S = (P - Pᵀ) / 2`. For real skew-symmetric
//! `S`, `I + S` is always invertible and `R` is a rotation (`det R = +1`).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

const MAX_RETRIES: usize = 4;

/// Differentiable Cayley map from a free square parameter to an orthogonal matrix.
///
/// If `I + S` is numerically singular the parameters are halved and the
/// transform retried; the number of retries is logged.
pub fn orthogonalize<T: Real>(g: &mut Graph<T>, params: Var) -> Result<Var> {
    let (rows, cols) = (g.value(params).rows(), g.value(params).cols());
    if rows != cols {
        return Err(Error::contract(format!(
            "orthogonalize needs a square matrix, got {rows}x{cols}"
        )));
    }
    let eye = g.constant(Tensor::eye(rows));
    let mut p = params;
    for attempt in 0..=MAX_RETRIES {
        let pt = g.transpose(p);
        let diff = g.sub(p, pt);
        let skew = g.scale(diff, T::from_f64_lossy(0.5));
        let minus = g.sub(eye, skew);
        let plus = g.add(eye, skew);
        match g.inverse(plus) {
            Ok(inv) => {
                if attempt > 0 {
                    log::warn!("cayley transform needed {attempt} rescaling retries");
                }
                return Ok(g.matmul(minus, inv));
            }
            Err(Error::Singular(_)) => {
                p = g.scale(p, T::from_f64_lossy(0.5));
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Singular("cayley transform"))
}

/// Non-differentiable convenience wrapper.
pub fn cayley<T: Real>(params: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = g.constant(params.clone());
    let r = orthogonalize(&mut g, p)?;
    Ok(g.value(r).clone())
}

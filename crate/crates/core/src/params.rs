//! Named parameter collections shared by every trainable model.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::optim::{AdamWConfig, AdamWState};
use crate::tensor::{Real, Tensor};

/// A model whose parameters are a fixed, ordered list of named tensors.
///
/// The order is part of the file formats: checkpoints store arrays in
/// exactly this order.
pub trait ParamSet<T: Real> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)>;

    /// Put every tensor on the graph; `trainable(name)` decides between a
    /// parameter and a constant leaf.
    fn bind(&self, g: &mut Graph<T>, trainable: &dyn Fn(&str) -> bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|(name, t)| {
                if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn optimizer(&self, config: AdamWConfig) -> AdamWState<T> {
        let tensors = self.tensors();
        let shapes: Vec<&[usize]> = tensors.iter().map(|(_, t)| t.shape()).collect();
        AdamWState::new(config, &shapes)
    }

    /// AdamW update from the gradients of the vars returned by [`ParamSet::bind`].
    fn apply(&mut self, opt: &mut AdamWState<T>, vars: &[Var], grads: &Gradients<T>) -> Result<()> {
        let gs: Vec<Option<&Tensor<T>>> = vars.iter().map(|&v| grads.get(v)).collect();
        let mut tensors = self.tensors_mut();
        let mut refs: Vec<&mut Tensor<T>> = tensors.iter_mut().map(|(_, t)| &mut **t).collect();
        opt.step(&mut refs, &gs)
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian `f64` values.
    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Pull named tensors out of `(name, tensor)` pairs, in order.
pub(crate) fn take_named<T: Real>(
    arrays: Vec<(String, Tensor<T>)>,
    expected: &[(&str, Vec<usize>)],
    path: &std::path::Path,
) -> Result<Vec<Tensor<T>>> {
    if arrays.len() != expected.len() {
        return Err(Error::Format {
            path: path.to_owned(),
            field: "arrays".into(),
            reason: format!("expected {} arrays, found {}", expected.len(), arrays.len()),
        });
    }
    arrays
        .into_iter()
        .zip(expected)
        .map(|((name, t), (want, shape))| {
            if name != *want {
                return Err(Error::Format {
                    path: path.to_owned(),
                    field: name,
                    reason: format!("expected array `{want}`"),
                });
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::Format {
                    path: path.to_owned(),
                    field: name,
                    reason: format!("shape {:?} does not match metadata {:?}", t.shape(), shape),
                });
            }
            Ok(t)
        })
        .collect()
}

/// Save an auxiliary model (`ONAUX1`) tagged with `objective`.
pub fn save_aux<P: ParamSet<f32>>(
    path: &std::path::Path,
    objective: &str,
    mut meta: serde_json::Value,
    params: &P,
) -> Result<()> {
    if let serde_json::Value::Object(m) = &mut meta {
        m.insert("objective".into(), serde_json::Value::String(objective.into()));
    } else {
        return Err(Error::contract("auxiliary metadata must be a JSON object"));
    }
    crate::container::Container {
        magic: crate::container::Magic::Auxiliary,
        meta,
        arrays: params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n.to_owned(), t.clone()))
            .collect(),
    }
    .save(path)
}

/// Load an auxiliary file, checking its objective tag. Returns the metadata
/// and the raw named arrays.
pub fn load_aux(
    path: &std::path::Path,
    objective: &str,
) -> Result<(serde_json::Value, Vec<(String, Tensor<f32>)>)> {
    let c = crate::container::Container::load(path, crate::container::Magic::Auxiliary)?;
    let found: String = c.meta_field("objective", path)?;
    if found != objective {
        return Err(Error::Mismatch(format!(
            "{} holds a `{found}` model, expected `{objective}`",
            path.display()
        )));
    }
    Ok((c.meta, c.arrays))
}

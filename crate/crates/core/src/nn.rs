//! Named parameter storage, layer helpers and optimisers shared by the models.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, slot)) => *slot = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Put every parameter on `tape`: as leaves when `trainable`, else as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let mut index = HashMap::with_capacity(self.entries.len());
        let vars = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (name, t))| {
                index.insert(name.clone(), i);
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars, index }
    }

    /// Shape signature `name:d0xd1..;` used to validate checkpoints on load.
    pub fn signature(&self) -> String {
        self.entries
            .iter()
            .map(|(n, t)| {
                let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                format!("{n}:{}", dims.join("x"))
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: Default::default(),
            tensors: self.entries.clone(),
        }
    }

    /// Parameters under `prefix.` with the prefix stripped.
    pub fn from_checkpoint_prefix(ck: &Checkpoint, prefix: &str) -> Self {
        let p = format!("{prefix}.");
        Self {
            entries: ck
                .tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn extend_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.tensors
            .extend(self.entries.iter().map(|(n, t)| (format!("{prefix}.{n}"), t.clone())));
    }

    pub fn apply(&mut self, f: impl Fn(usize, &Tensor) -> Tensor) {
        for (i, (_, t)) in self.entries.iter_mut().enumerate() {
            *t = f(i, t);
        }
    }
}

/// A [`ParamStore`] bound to a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<&Var<'t>> {
        self.index
            .get(name)
            .map(|&i| &self.vars[i])
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(v)).collect()
    }

    /// `x @ W + b` with `W: [in, out]` stored as `{name}.w` and `b` as `{name}.b`.
    pub fn linear(&self, name: &str, x: &Var<'t>) -> Result<Var<'t>> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b"))?;
        x.matmul(w)?.add_row_vector(b)
    }

    pub fn conv(&self, name: &str, x: &Var<'t>) -> Result<Var<'t>> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b"))?;
        x.conv2d(w, Some(b))
    }
}

pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let bound = (1.0 / fan_in as f64).sqrt();
    store.insert(
        format!("{name}.w"),
        Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng).expect("positive dims"),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]).expect("positive dims"));
}

/// He-uniform conv initialisation; `gain` scales the bound (0 gives a zero init).
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    gain: f64,
    rng: &mut R,
) {
    let fan_in = (in_ch * k * k) as f64;
    let bound = gain * (6.0 / fan_in).sqrt();
    let w = if bound > 0.0 {
        Tensor::uniform(&[out_ch, in_ch, k, k], -bound, bound, rng)
    } else {
        Tensor::zeros(&[out_ch, in_ch, k, k])
    };
    store.insert(format!("{name}.w"), w.expect("positive dims"));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out_ch]).expect("positive dims"));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimiser over a [`ParamStore`].
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
                v: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            }),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        debug_assert_eq!(grads.len(), store.len());
        match self {
            Optimizer::Sgd { lr } => {
                let lr = *lr;
                store.apply(|i, t| t.axpy(-lr, &grads[i]).expect("gradient shape matches parameter"));
            }
            Optimizer::Adam(a) => {
                a.step += 1;
                let bc1 = 1.0 - a.beta1.powi(a.step);
                let bc2 = 1.0 - a.beta2.powi(a.step);
                for (i, g) in grads.iter().enumerate() {
                    let (m, v) = (&mut a.m[i], &mut a.v[i]);
                    for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *mi = a.beta1 * *mi + (1.0 - a.beta1) * gi;
                        *vi = a.beta2 * *vi + (1.0 - a.beta2) * gi * gi;
                    }
                }
                let (lr, eps) = (a.lr, a.eps);
                let (m, v) = (&a.m, &a.v);
                store.apply(|i, t| {
                    let data = t
                        .data()
                        .iter()
                        .zip(&m[i])
                        .zip(&v[i])
                        .map(|((&p, &mi), &vi)| p - lr * (mi / bc1) / ((vi / bc2).sqrt() + eps))
                        .collect();
                    Tensor::new(t.shape().to_vec(), data).expect("same shape")
                });
            }
        }
    }
}

/// Sinusoidal embedding of integer timesteps: `[len(ts), dim]`.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Tensor::new(vec![ts.len().max(1), dim], data).expect("positive dims")
}

/// One-hot rows `[ids.len(), classes]`.
pub fn one_hot(ids: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; ids.len() * classes];
    for (r, &id) in ids.iter().enumerate() {
        data[r * classes + id] = 1.0;
    }
    Tensor::new(vec![ids.len(), classes], data).expect("positive dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::from_vec(vec![3.0, -2.0]));
        s
    }

    fn minimise(kind: OptimizerKind, lr: f64, steps: usize) -> f64 {
        let mut store = quadratic_store();
        let mut opt = Optimizer::new(kind, lr, &store);
        for _ in 0..steps {
            let tape = Tape::new();
            let b = store.bind(&tape, true);
            let loss = b.get("x").unwrap().square().sum();
            let g = tape.backward(&loss).unwrap();
            opt.step(&mut store, &b.gradients(&g));
        }
        store.get("x").unwrap().max_abs()
    }

    #[test]
    fn optimisers_reduce_quadratic() {
        assert!(minimise(OptimizerKind::Sgd, 0.1, 100) < 1e-6);
        assert!(minimise(OptimizerKind::Adam, 0.05, 500) < 1e-2);
    }

    #[test]
    fn store_round_trips_through_checkpoint_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        init_conv(&mut s, "c1", 2, 3, 3, 1.0, &mut rng);
        init_linear(&mut s, "fc", 4, 5, &mut rng);
        let mut ck = Checkpoint::default();
        s.extend_checkpoint(&mut ck, "net");
        let back = ParamStore::from_checkpoint_prefix(&ck, "net");
        assert_eq!(back, s);
        assert_eq!(back.signature(), "c1.w:3x2x3x3;c1.b:3;fc.w:4x5;fc.b:5");
    }

    #[test]
    fn missing_param_named() {
        let s = ParamStore::new();
        let err = s.get("enc.w").unwrap_err().to_string();
        assert!(err.contains("enc.w"));
    }

    #[test]
    fn sinusoidal_rows_differ_by_timestep() {
        let e = sinusoidal_embedding(&[0, 1, 500], 8);
        assert_eq!(e.shape(), &[3, 8]);
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_ne!(e.data()[8..16], e.data()[16..24]);
    }
}

//! Named parameters, Adam state and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u64`):
//! `b"VP2CKPT1"`, record count, then per record: name length, UTF-8 name,
//! rank, extents, and the raw `f32` values.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VP2CKPT1";

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    fn zeros(n: usize) -> Self {
        AdamState {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }
}

/// Learning rate and decoupled weight decay for one parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Named trainable tensors with per-parameter Adam moments.
///
/// Iteration is in sorted name order. Moments exist exactly for the
/// parameters that are not frozen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
    adam: BTreeMap<String, AdamState<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
            adam: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// Inserts or replaces a parameter; it starts trainable.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<T>) {
        let name = name.into();
        t.grad = None;
        t.requires_grad = true;
        self.adam.insert(name.clone(), AdamState::zeros(t.numel()));
        self.frozen.remove(&name);
        self.tensors.insert(name, t);
    }

    pub fn init_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f64) {
        self.insert(name, Tensor::full(shape, s::<T>(v)));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.adam.remove(name);
        self.frozen.remove(name);
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn adam_state(&self, name: &str) -> Option<&AdamState<T>> {
        self.adam.get(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let n = self
            .tensors
            .get(name)
            .ok_or_else(|| CoreError::UnknownParam(name.to_string()))?
            .numel();
        if frozen {
            self.frozen.insert(name.to_string());
            self.adam.remove(name);
        } else if self.frozen.remove(name) {
            self.adam.insert(name.to_string(), AdamState::zeros(n));
        }
        Ok(())
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        let names: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        for n in names {
            self.set_frozen(&n, frozen)
                .expect("name taken from the store");
        }
    }

    /// Moves gradients of this store's parameters out of `graph`.
    ///
    /// Every trainable parameter ends with a gradient buffer, zero-filled
    /// when the graph did not touch it.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (name, var) in graph.params() {
            if self.frozen.contains(name) {
                continue;
            }
            if let (Some(t), Some(g)) = (self.tensors.get_mut(name), graph.grad(var)) {
                t.accumulate_grad(g);
            }
        }
        for (name, t) in &mut self.tensors {
            if !self.frozen.contains(name) && t.grad.is_none() {
                t.grad = Some(vec![T::zero(); t.numel()]);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Global L2 norm over the gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|(k, _)| !self.frozen.contains(*k))
            .filter_map(|(_, t)| t.grad.as_ref())
            .flat_map(|g| g.iter().map(|v| v.to_f64_lossy().powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam step with a shared learning rate and weight decay.
    pub fn adam_step(&mut self, lr: f64, weight_decay: f64, clip: Option<f64>) -> Result<()> {
        self.adam_step_with(|_| AdamHyper { lr, weight_decay }, clip)
    }

    /// One Adam step (β1 0.9, β2 0.999, ε 1e-8) with decoupled weight decay
    /// and per-parameter hyperparameters. Frozen parameters are skipped;
    /// all gradients are cleared afterwards.
    pub fn adam_step_with(
        &mut self,
        hyper: impl Fn(&str) -> AdamHyper,
        clip: Option<f64>,
    ) -> Result<()> {
        for (name, t) in &self.tensors {
            if !self.frozen.contains(name) && t.grad.is_none() {
                return Err(CoreError::MissingGrad(name.clone()));
            }
        }
        let clip_scale = match clip {
            Some(c) => {
                let norm = self.grad_norm();
                if norm > c && norm > 0.0 {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, t) in self.tensors.iter_mut() {
            if self.frozen.contains(name) {
                continue;
            }
            let h = hyper(name);
            let st = self
                .adam
                .get_mut(name)
                .expect("trainable parameters carry moments");
            st.step += 1;
            let bc1 = 1.0 - BETA1.powi(st.step as i32);
            let bc2 = 1.0 - BETA2.powi(st.step as i32);
            let (b1, b2) = (s::<T>(BETA1), s::<T>(BETA2));
            let step_size = s::<T>(h.lr / bc1);
            let inv_bc2 = s::<T>(1.0 / bc2);
            let eps = s::<T>(ADAM_EPS);
            let decay = s::<T>(1.0 - h.lr * h.weight_decay);
            let cs = s::<T>(clip_scale);
            let grad = t.grad.take().expect("checked above");
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad[i] * cs;
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
                let vhat = st.v[i] * inv_bc2;
                data[i] = data[i] * decay - step_size * st.m[i] / (vhat.sqrt() + eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Copies every parameter of `other` whose name starts with `prefix`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> usize {
        let mut n = 0;
        for (name, t) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.insert(name, t.clone());
            n += 1;
        }
        n
    }

    /// Stable digest input: names, shapes and values in sorted order.
    pub fn fingerprint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.tensors {
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        out
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a checkpoint; every parameter comes back trainable with fresh moments.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CoreError::Checkpoint("bad magic".into()));
        }
        let count = read_u64(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u64(&mut r)? as usize;
            if len > 1 << 16 {
                return Err(CoreError::Checkpoint(format!(
                    "name length {len} is implausible"
                )));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
            let rank = read_u64(&mut r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(CoreError::Checkpoint(format!("`{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            store.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64, g: f64) -> ParamStore<f64> {
        let mut st = ParamStore::new();
        st.insert("w", Tensor::from_f64(&[1], &[w]).unwrap());
        st.get_mut("w").unwrap().grad = Some(vec![g]);
        st
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+ε).
        let mut st = scalar_store(1.0, 1.0);
        st.adam_step(0.1, 0.0, None).unwrap();
        let w = st.get("w").unwrap().data()[0];
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-12, "{w}");
        assert!((w - 0.9).abs() < 1e-6);
        assert!(st.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn zero_grad_and_no_decay_is_identity() {
        let mut st = scalar_store(0.37, 0.0);
        st.adam_step(0.5, 0.0, None).unwrap();
        assert_eq!(st.get("w").unwrap().data()[0], 0.37);
    }

    #[test]
    fn frozen_params_do_not_move_and_drop_moments() {
        let mut st = scalar_store(2.0, 5.0);
        st.set_frozen("w", true).unwrap();
        assert!(st.adam_state("w").is_none());
        st.adam_step(0.1, 0.01, None).unwrap();
        assert_eq!(st.get("w").unwrap().data()[0], 2.0);
        st.set_frozen("w", false).unwrap();
        assert!(st.adam_state("w").is_some());
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut st = scalar_store(1.0, 0.0);
        st.get_mut("w").unwrap().grad = None;
        assert!(matches!(
            st.adam_step(0.1, 0.0, None),
            Err(CoreError::MissingGrad(_))
        ));
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut st = scalar_store(2.0, 0.0);
        st.adam_step(0.1, 0.5, None).unwrap();
        assert!((st.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_the_gradient() {
        // With clipping the first Adam step is still lr·sign(g): moments are
        // scale invariant. The second step exposes the clip through m/√v.
        let mut a = scalar_store(0.0, 10.0);
        a.adam_step(0.1, 0.0, Some(1.0)).unwrap();
        assert!((a.get("w").unwrap().data()[0] + 0.1).abs() < 1e-6);
        a.get_mut("w").unwrap().grad = Some(vec![-10.0]);
        let mut b = a.clone();
        a.adam_step(0.1, 0.0, Some(1.0)).unwrap();
        b.adam_step(0.1, 0.0, None).unwrap();
        assert_ne!(a.get("w").unwrap().data(), b.get("w").unwrap().data());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut st = ParamStore::<f32>::new();
        let mut rng = rand::rng();
        st.init_normal("b.x", &[3, 4], 1.0, &mut rng);
        st.init_normal("a.y", &[5], 0.3, &mut rng);
        let mut buf = Vec::new();
        st.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = ParamStore::<f32>::read_checkpoint(&buf[..]).unwrap();
        for (name, t) in st.iter() {
            let u = back.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(u));
        }
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let buf = b"NOTACKPT\0\0\0\0\0\0\0\0".to_vec();
        assert!(ParamStore::<f32>::read_checkpoint(&buf[..]).is_err());
    }
}

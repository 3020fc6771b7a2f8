//! Dense tensors, the autodiff tape, parameter storage and the named-tensor
//! checkpoint format.

mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use gradcheck::{check_gradients, GradCheck};
pub use tape::{Gradients, Mask, Tape, Var};
pub(crate) use tape::softplus;
pub use tensor::Tensor;

use crate::{Error, Result};

/// Scaled dot-product attention `softmax(QKᵀ/√d ⊙ mask) V`.
///
/// Returns the output rows and the attention weights (n_q × n_k).
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &Mask) -> Result<(Var, Var)> {
    let (n_q, d) = tape.value(q).dims2()?;
    let (n_k, d_k) = tape.value(k).dims2()?;
    let (n_v, _) = tape.value(v).dims2()?;
    if d != d_k || n_k != n_v {
        return Err(Error::Shape(format!(
            "attention: Q {n_q}×{d}, K {n_k}×{d_k}, V rows {n_v}"
        )));
    }
    if (mask.rows(), mask.cols()) != (n_q, n_k) {
        return Err(Error::Shape(format!(
            "attention mask {}×{} for {n_q} queries and {n_k} keys",
            mask.rows(),
            mask.cols()
        )));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.masked_softmax(scaled, mask)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("xavier dims")
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles for the parameters of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn extend(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    /// Copy of the tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts every tensor of `other`, replacing same-named entries.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Puts tensors on the tape. Names starting with any of `trainable`
    /// become gradient-carrying leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, prefix: &str, trainable: &[&str]) -> Bindings {
        let mut vars = BTreeMap::new();
        for (name, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let v = if trainable.iter().any(|p| name.starts_with(p)) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Bindings { vars }
    }

    /// SHA-256 over names, shapes and values of tensors under `prefixes`.
    pub fn digest(&self, prefixes: &[&str]) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_attention_broadcasts_value() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.3, 0.1], vec![5.0, 5.0]]).unwrap());
        let k = tape.constant(Tensor::row(&[0.7, 0.2]));
        let v = tape.constant(Tensor::row(&[4.0, -1.0, 2.5]));
        let (out, w) = attention(&mut tape, q, k, v, &Mask::ones(3, 1)).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(out).row_slice(i), &[4.0, -1.0, 2.5]);
            assert_eq!(tape.value(w).get(i, 0), 1.0);
        }
    }

    #[test]
    fn identity_mask_with_orthonormal_keys() {
        // Q = K = 10·I₃, mask = I₃: each query sees only its own key.
        let d = 3;
        let scaled: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 10.0 } else { 0.0 }).collect())
            .collect();
        let vrows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&scaled).unwrap());
        let k = tape.constant(Tensor::from_rows(&scaled).unwrap());
        let v = tape.constant(Tensor::from_rows(&vrows).unwrap());
        let (out, _) = attention(&mut tape, q, k, v, &Mask::from_fn(3, 3, |i, j| i == j)).unwrap();
        for (i, row) in vrows.iter().enumerate() {
            assert_eq!(tape.value(out).row_slice(i), &row[..]);
        }

        // With a full mask the hand-computed softmax at scale 10: the own
        // key scores 100/√3, the others 0.
        let own = (100.0 / 3f64.sqrt()).exp();
        let p_own = own / (own + 2.0);
        let (out, w) = attention(&mut tape, q, k, v, &Mask::ones(3, 3)).unwrap();
        assert!((tape.value(w).get(0, 0) - p_own).abs() < 1e-15);
        let expect = p_own * 1.0 + (1.0 - p_own) / 2.0 * (3.0 + 5.0);
        assert!((tape.value(out).get(0, 0) - expect).abs() < 1e-12);
        assert!((tape.value(out).get(0, 0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let q = tape.constant(xavier_uniform(&mut rng, 5, 4));
        let k = tape.constant(xavier_uniform(&mut rng, 7, 4));
        let v = tape.constant(xavier_uniform(&mut rng, 7, 2));
        let mask = Mask::from_fn(5, 7, |i, j| (i + j) % 3 != 0 || j == i);
        let (_, w) = attention(&mut tape, q, k, v, &mask).unwrap();
        for i in 0..5 {
            let s: f64 = tape.value(w).row_slice(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..7 {
                if !mask.get(i, j) {
                    assert_eq!(tape.value(w).get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = xavier_uniform(&mut rng, 10, 6);
        let s = (6.0f64 / 16.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < s));
    }

    #[test]
    fn digest_tracks_only_requested_prefixes() {
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::scalar(1.0));
        p.insert("b.w", Tensor::scalar(2.0));
        let before = p.digest(&["a."]);
        p.get_mut("b.w").unwrap().data_mut()[0] = 3.0;
        assert_eq!(before, p.digest(&["a."]));
        p.get_mut("a.w").unwrap().data_mut()[0] = 0.5;
        assert_ne!(before, p.digest(&["a."]));
    }
}

//! Single-head scaled dot-product self-attention with an optional key padding mask.

use ndarray::{Array2, Axis};

use super::layers::Linear;
use super::params::{Grads, ParamStore};
use super::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub dim: usize,
}

pub struct AttentionCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Row-stochastic attention matrix, `queries x keys`.
    pub weights: Mat,
    context: Mat,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, 1.0),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, 1.0),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, 1.0),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, 1.0),
            dim,
        }
    }

    /// `softmax(Q Kᵀ / sqrt(C)) V` followed by the output projection. `mask[t]` is
    /// true for real frames; padded keys receive zero weight.
    pub fn forward(
        &self,
        p: &ParamStore,
        x: &Mat,
        mask: Option<&[bool]>,
    ) -> Result<(Mat, AttentionCache)> {
        let t = x.nrows();
        if let Some(m) = mask {
            if m.len() != t {
                return Err(Error::Shape(format!(
                    "attention mask has {} entries for {t} frames",
                    m.len()
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Input("attention mask hides every frame".into()));
            }
        }
        let q = self.query.forward(p, x)?;
        let k = self.key.forward(p, x)?;
        let v = self.value.forward(p, x)?;
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut weights = q.dot(&k.t()) * scale;
        for mut row in weights.rows_mut() {
            if let Some(m) = mask {
                for (s, &keep) in row.iter_mut().zip(m) {
                    if !keep {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|s| (s - max).exp());
            let z = row.sum();
            row.mapv_inplace(|e| e / z);
        }
        let context = weights.dot(&v);
        let y = self.out.forward(p, &context)?;
        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                weights,
                context,
            },
        ))
    }

    pub fn backward(&self, p: &ParamStore, cache: &AttentionCache, dy: &Mat, g: &mut Grads) -> Mat {
        let scale = 1.0 / (self.dim as f64).sqrt();
        let dcontext = self.out.backward(p, &cache.context, dy, g);
        let dweights = dcontext.dot(&cache.v.t());
        let dv = cache.weights.t().dot(&dcontext);
        // Softmax backward, row-wise.
        let row_dot = (&dweights * &cache.weights).sum_axis(Axis(1)).insert_axis(Axis(1));
        let dscores: Array2<f64> = &cache.weights * &(&dweights - &row_dot) * scale;
        let dq = dscores.dot(&cache.k);
        let dk = dscores.t().dot(&cache.q);
        let mut dx = self.query.backward(p, &cache.x, &dq, g);
        dx += &self.key.backward(p, &cache.x, &dk, g);
        dx += &self.value.backward(p, &cache.x, &dv, g);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup(dim: usize) -> (ParamStore, SelfAttention) {
        let mut store = ParamStore::new(11);
        let attn = SelfAttention::new(&mut store, "attn", dim);
        (store, attn)
    }

    fn random(t: usize, c: usize, seed: u64) -> Mat {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((t, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_frame_attends_to_itself() {
        let (store, attn) = setup(4);
        let x = random(1, 4, 1);
        let (y, cache) = attn.forward(&store, &x, None).unwrap();
        assert_eq!(cache.weights[[0, 0]], 1.0);
        let v = attn.value.forward(&store, &x).unwrap();
        let expected = attn.out.forward(&store, &v).unwrap();
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_frames_attend_uniformly() {
        let (store, attn) = setup(4);
        let row = random(1, 4, 2);
        let x = Array2::from_shape_fn((5, 4), |(_, c)| row[[0, c]]);
        let (y, cache) = attn.forward(&store, &x, None).unwrap();
        assert!(cache.weights.iter().all(|w| (w - 0.2).abs() < 1e-12));
        for t in 1..5 {
            assert_eq!(y.row(t), y.row(0));
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let (store, attn) = setup(3);
        let x = random(6, 3, 3);
        let mask = [true, true, false, true, false, false];
        let (_, cache) = attn.forward(&store, &x, Some(&mask)).unwrap();
        // Brute-force softmax over the unmasked logits only.
        let q = attn.query.forward(&store, &x).unwrap();
        let k = attn.key.forward(&store, &x).unwrap();
        for i in 0..6 {
            let logits: Vec<f64> = (0..6)
                .map(|j| q.row(i).dot(&k.row(j)) / 3f64.sqrt())
                .collect();
            let z: f64 = (0..6).filter(|&j| mask[j]).map(|j| logits[j].exp()).sum();
            for j in 0..6 {
                let expected = if mask[j] { logits[j].exp() / z } else { 0.0 };
                assert!((cache.weights[[i, j]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let (store, attn) = setup(5);
        let x = random(13, 5, 4);
        let (_, cache) = attn.forward(&store, &x, None).unwrap();
        for row in cache.weights.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_length_mismatch() {
        let (store, attn) = setup(3);
        let x = random(4, 3, 5);
        assert!(matches!(
            attn.forward(&store, &x, Some(&[true, false])),
            Err(Error::Shape(_))
        ));
    }
}

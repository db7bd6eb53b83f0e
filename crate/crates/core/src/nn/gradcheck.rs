//! Central finite-difference checks of the hand-written backward passes.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::SelfAttention;
use super::layers::{relu, relu_backward, Conv1d, Embedding, Linear, ResBlock};
use super::norm::{affine_norm, affine_norm_backward, instance_norm, instance_norm_backward};
use super::params::{Grads, ParamStore};
use super::Mat;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Points with a ReLU pre-activation closer than this to the kink are re-sampled.
pub const KINK_MARGIN: f64 = 1e-3;

/// A scalar function of a flat point with an analytic gradient.
pub trait Differentiable {
    fn name(&self) -> &str;
    fn point(&self) -> Vec<f64>;
    fn value(&self, point: &[f64]) -> Result<f64>;
    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>>;
    /// Coordinates to probe; all of them unless overridden.
    fn coordinates(&self) -> Vec<usize> {
        (0..self.point().len()).collect()
    }
}

/// Max over probed coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check(op: &dyn Differentiable, point: &[f64], h: f64) -> Result<f64> {
    let non_finite = || Error::NonFinite {
        op: op.name().to_string(),
    };
    let analytic = op.gradient(point)?;
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(non_finite());
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in op.coordinates() {
        probe[i] = point[i] + h;
        let fp = op.value(&probe)?;
        probe[i] = point[i] - h;
        let fm = op.value(&probe)?;
        probe[i] = point[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(non_finite());
        }
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Writes a flat point back into a parameter store (in store order).
pub fn unflatten_params(store: &mut ParamStore, flat: &[f64]) {
    let mut at = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        let n = p.len();
        p.as_slice_mut()
            .expect("parameters are contiguous")
            .copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

pub fn flatten_params(store: &ParamStore) -> Vec<f64> {
    store
        .iter()
        .flat_map(|(_, _, v)| v.iter().copied().collect::<Vec<_>>())
        .collect()
}

pub fn flatten_grads(grads: &Grads) -> Vec<f64> {
    grads.0.iter().flat_map(|g| g.iter().copied()).collect()
}

type ValueFn = Box<dyn Fn(&ParamStore, &Mat) -> Result<f64>>;
type GradFn = Box<dyn Fn(&ParamStore, &Mat) -> Result<(Mat, Grads)>>;

/// An op over one input matrix and a parameter store, reduced to a scalar by a
/// fixed random projection. The point is `input ‖ parameters`.
pub struct OpCase {
    name: String,
    store: ParamStore,
    input: Mat,
    value_fn: ValueFn,
    grad_fn: GradFn,
}

impl OpCase {
    fn split(&self, point: &[f64]) -> (ParamStore, Mat) {
        let n = self.input.len();
        let input = Array2::from_shape_vec(self.input.raw_dim(), point[..n].to_vec())
            .expect("input shape");
        let mut store = self.store.clone();
        unflatten_params(&mut store, &point[n..]);
        (store, input)
    }
}

impl Differentiable for OpCase {
    fn name(&self) -> &str {
        &self.name
    }

    fn point(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.input.iter().copied().collect();
        p.extend(flatten_params(&self.store));
        p
    }

    fn value(&self, point: &[f64]) -> Result<f64> {
        let (store, input) = self.split(point);
        (self.value_fn)(&store, &input)
    }

    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        let (store, input) = self.split(point);
        let (dx, grads) = (self.grad_fn)(&store, &input)?;
        let mut g: Vec<f64> = dx.iter().copied().collect();
        g.extend(flatten_grads(&grads));
        Ok(g)
    }
}

fn random_mat(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Mat {
    Array2::from_shape_simple_fn(shape, || scale * rng.random_range(-1.0..1.0))
}

fn dot(a: &Mat, b: &Mat) -> f64 {
    (a * b).sum()
}

const T: usize = 7;
const C: usize = 4;

/// One check per kernel at a random 64-bit point drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    {
        let mut store = ParamStore::new(rng.random());
        let lin = Linear::new(&mut store, "linear", C, 3, 1.0);
        randomize(&mut store, &mut rng);
        let r = random_mat(&mut rng, (T, 3), 1.0);
        let (l1, l2, r1) = (lin.clone(), lin, r.clone());
        cases.push(OpCase {
            name: "linear".into(),
            store,
            input: random_mat(&mut rng, (T, C), 1.0),
            value_fn: Box::new(move |p, x| Ok(dot(&l1.forward(p, x)?, &r1))),
            grad_fn: Box::new(move |p, x| {
                let mut g = p.zero_grads();
                let dx = l2.backward(p, x, &r, &mut g);
                Ok((dx, g))
            }),
        });
    }

    for kernel in [1, 3, 9] {
        let mut store = ParamStore::new(rng.random());
        let conv = Conv1d::new(&mut store, "conv", C, 3, kernel, 1.0);
        randomize(&mut store, &mut rng);
        let r = random_mat(&mut rng, (T, 3), 1.0);
        let (c1, c2, r1) = (conv.clone(), conv, r.clone());
        cases.push(OpCase {
            name: format!("conv1d_k{kernel}"),
            store,
            input: random_mat(&mut rng, (T, C), 1.0),
            value_fn: Box::new(move |p, x| Ok(dot(&c1.forward(p, x)?.0, &r1))),
            grad_fn: Box::new(move |p, x| {
                let mut g = p.zero_grads();
                let (_, cache) = c2.forward(p, x)?;
                let dx = c2.backward(p, &cache, &r, &mut g);
                Ok((dx, g))
            }),
        });
    }

    // conv1d followed by relu, away from the kink.
    {
        let (store, conv, input) = loop {
            let mut store = ParamStore::new(rng.random());
            let conv = Conv1d::new(&mut store, "conv", C, C, 3, 1.0);
            randomize(&mut store, &mut rng);
            let input = random_mat(&mut rng, (T, C), 1.0);
            let pre = conv.forward(&store, &input).unwrap().0;
            if pre.iter().all(|v| v.abs() >= KINK_MARGIN) {
                break (store, conv, input);
            }
        };
        let r = random_mat(&mut rng, (T, C), 1.0);
        let (c1, c2, r1) = (conv.clone(), conv, r.clone());
        cases.push(OpCase {
            name: "conv1d_relu".into(),
            store,
            input,
            value_fn: Box::new(move |p, x| Ok(dot(&relu(&c1.forward(p, x)?.0), &r1))),
            grad_fn: Box::new(move |p, x| {
                let mut g = p.zero_grads();
                let (pre, cache) = c2.forward(p, x)?;
                let dpre = relu_backward(&pre, &r);
                let dx = c2.backward(p, &cache, &dpre, &mut g);
                Ok((dx, g))
            }),
        });
    }

    {
        let (store, block, input) = loop {
            let mut store = ParamStore::new(rng.random());
            let block = ResBlock::new(&mut store, "res", C, 3);
            randomize(&mut store, &mut rng);
            let input = random_mat(&mut rng, (T, C), 1.0);
            let (_, cache) = block.forward(&store, &input).unwrap();
            if cache.pre.iter().all(|v| v.abs() >= KINK_MARGIN) {
                break (store, block, input);
            }
        };
        let r = random_mat(&mut rng, (T, C), 1.0);
        let (b1, b2, r1) = (block.clone(), block, r.clone());
        cases.push(OpCase {
            name: "rescnn_block".into(),
            store,
            input,
            value_fn: Box::new(move |p, x| Ok(dot(&b1.forward(p, x)?.0, &r1))),
            grad_fn: Box::new(move |p, x| {
                let mut g = p.zero_grads();
                let (_, cache) = b2.forward(p, x)?;
                let dx = b2.backward(p, &cache, &r, &mut g);
                Ok((dx, g))
            }),
        });
    }

    // Instance norm, including gradients flowing through the returned stats.
    {
        let r = random_mat(&mut rng, (T, C), 1.0);
        let rm = Array1::from_shape_simple_fn(C, || rng.random_range(-1.0..1.0));
        let rs = Array1::from_shape_simple_fn(C, || rng.random_range(-1.0..1.0));
        let (r1, rm1, rs1) = (r.clone(), rm.clone(), rs.clone());
        cases.push(OpCase {
            name: "instance_norm".into(),
            store: ParamStore::new(0),
            input: random_mat(&mut rng, (T, C), 2.0),
            value_fn: Box::new(move |_, x| {
                let (y, s) = instance_norm(x);
                Ok(dot(&y, &r1) + s.mean.dot(&rm1) + s.std.dot(&rs1))
            }),
            grad_fn: Box::new(move |p, x| {
                let (y, s) = instance_norm(x);
                let dx = instance_norm_backward(&y, &s, &r, Some(&rm), Some(&rs));
                Ok((dx, p.zero_grads()))
            }),
        });
    }

    // AdaIN: scale and shift are parameters here so their gradients are checked too.
    {
        let mut store = ParamStore::new(rng.random());
        let scale = store.add("scale", (1, C), super::params::Init::Normal { std: 1.0 });
        let shift = store.add("shift", (1, C), super::params::Init::Normal { std: 1.0 });
        let r = random_mat(&mut rng, (T, C), 1.0);
        let r1 = r.clone();
        let row = |p: &ParamStore, id| p.get(id).row(0).to_owned();
        cases.push(OpCase {
            name: "adain".into(),
            store,
            input: random_mat(&mut rng, (T, C), 1.5),
            value_fn: Box::new(move |p, x| {
                Ok(dot(&affine_norm(x, &row(p, scale), &row(p, shift))?.0, &r1))
            }),
            grad_fn: Box::new(move |p, x| {
                let sc = row(p, scale);
                let (_, cache) = affine_norm(x, &sc, &row(p, shift))?;
                let (dx, dscale, dshift) = affine_norm_backward(&cache, &sc, &r);
                let mut g = p.zero_grads();
                g.get_mut(scale).row_mut(0).assign(&dscale);
                g.get_mut(shift).row_mut(0).assign(&dshift);
                Ok((dx, g))
            }),
        });
    }

    for masked in [false, true] {
        let mut store = ParamStore::new(rng.random());
        let attn = SelfAttention::new(&mut store, "attn", C);
        randomize(&mut store, &mut rng);
        let r = random_mat(&mut rng, (T, C), 1.0);
        let mask: Option<Vec<bool>> = masked.then(|| (0..T).map(|t| t % 3 != 2).collect());
        let (a1, a2, r1, m1) = (attn.clone(), attn, r.clone(), mask.clone());
        cases.push(OpCase {
            name: if masked { "self_attention_masked" } else { "self_attention" }.into(),
            store,
            input: random_mat(&mut rng, (T, C), 1.0),
            value_fn: Box::new(move |p, x| Ok(dot(&a1.forward(p, x, m1.as_deref())?.0, &r1))),
            grad_fn: Box::new(move |p, x| {
                let mut g = p.zero_grads();
                let (_, cache) = a2.forward(p, x, mask.as_deref())?;
                let dx = a2.backward(p, &cache, &r, &mut g);
                Ok((dx, g))
            }),
        });
    }

    {
        // Embedding gradients only reach the table; the input carries fixed ids.
        let mut store = ParamStore::new(rng.random());
        let emb = Embedding::new(&mut store, "embed", 5, C, 1.0);
        let ids = vec![0usize, 3, 3, 1, 4];
        let r = random_mat(&mut rng, (ids.len(), C), 1.0);
        let (e1, e2, r1, ids1) = (emb.clone(), emb, r.clone(), ids.clone());
        cases.push(OpCase {
            name: "embedding".into(),
            store,
            input: Array2::zeros((0, 0)),
            value_fn: Box::new(move |p, _| Ok(dot(&e1.forward(p, &ids1)?, &r1))),
            grad_fn: Box::new(move |p, _| {
                let mut g = p.zero_grads();
                e2.backward(&ids, &r, &mut g);
                Ok((Array2::zeros((0, 0)), g))
            }),
        });
    }

    cases
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        store
            .get_mut(id)
            .mapv_inplace(|_| rng.random_range(-0.8..0.8));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Affine;

    impl Differentiable for Affine {
        fn name(&self) -> &str {
            "affine"
        }
        fn point(&self) -> Vec<f64> {
            vec![0.3, -1.2, 2.0]
        }
        fn value(&self, p: &[f64]) -> Result<f64> {
            Ok(2.0 * p[0] - 3.0 * p[1] + 0.5 * p[2] + 1.0)
        }
        fn gradient(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![2.0, -3.0, 0.5])
        }
    }

    struct Blowup;

    impl Differentiable for Blowup {
        fn name(&self) -> &str {
            "blowup"
        }
        fn point(&self) -> Vec<f64> {
            vec![0.0]
        }
        fn value(&self, p: &[f64]) -> Result<f64> {
            Ok(1.0 / p[0].abs().min(0.0))
        }
        fn gradient(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0])
        }
    }

    #[test]
    fn linear_map_is_exact() {
        let err = finite_diff_check(&Affine, &Affine.point(), DEFAULT_STEP).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_names_the_op() {
        match finite_diff_check(&Blowup, &[0.0], DEFAULT_STEP) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "blowup"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn every_kernel_passes_at_ten_points() {
        for seed in 0..10 {
            for case in op_cases(seed) {
                let err = finite_diff_check(&case, &case.point(), DEFAULT_STEP).unwrap();
                assert!(err < 1e-4, "{} seed {seed}: {err}", case.name());
            }
        }
    }

    #[test]
    fn tight_bounds_for_smooth_kernels() {
        for case in op_cases(99) {
            let err = finite_diff_check(&case, &case.point(), DEFAULT_STEP).unwrap();
            match case.name() {
                "conv1d_relu" => assert!(err < 1e-6, "{err}"),
                "instance_norm" => assert!(err < 1e-5, "{err}"),
                _ => {}
            }
        }
    }
}

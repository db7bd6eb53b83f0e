//! Dense, convolutional and embedding layers with explicit backward passes.
//!
//! Activations are `frames x channels` matrices. `backward` methods accumulate
//! parameter gradients into a [`Grads`] and return the gradient w.r.t. the input.

use ndarray::{s, Array2, Axis};

use super::params::{Grads, Init, ParamId, ParamStore};
use super::Mat;
use crate::error::{Error, Result};

fn check_width(op: &str, x: &Mat, expected: usize) -> Result<()> {
    if x.ncols() != expected {
        return Err(Error::Shape(format!(
            "{op}: expected {expected} input channels, got {}",
            x.ncols()
        )));
    }
    Ok(())
}

/// `y = x W + b`, applied per frame.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, gain: f64) -> Self {
        let w = store.add(
            &format!("{name}.weight"),
            (d_in, d_out),
            Init::Uniform { fan_in: d_in, gain },
        );
        let b = store.add(&format!("{name}.bias"), (1, d_out), Init::Zeros);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> Result<Mat> {
        check_width("linear", x, self.d_in)?;
        Ok(x.dot(p.get(self.w)) + p.get(self.b))
    }

    pub fn backward(&self, p: &ParamStore, x: &Mat, dy: &Mat, g: &mut Grads) -> Mat {
        *g.get_mut(self.w) += &x.t().dot(dy);
        *g.get_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&p.get(self.w).t())
    }
}

/// 1-D cross-correlation over time with odd kernel and zero "same" padding.
///
/// The weight is stored as `(kernel * c_in) x c_out`; row `j * c_in + c` is tap `j`
/// (time offset `j - pad`) of input channel `c`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct ConvCache {
    cols: Mat,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        gain: f64,
    ) -> Self {
        assert!(kernel % 2 == 1, "conv kernel must be odd, got {kernel}");
        let fan_in = kernel * c_in;
        let w = store.add(
            &format!("{name}.weight"),
            (fan_in, c_out),
            Init::Uniform { fan_in, gain },
        );
        let b = store.add(&format!("{name}.bias"), (1, c_out), Init::Zeros);
        Self {
            w,
            b,
            kernel,
            c_in,
            c_out,
        }
    }

    fn im2col(&self, x: &Mat) -> Mat {
        let t = x.nrows();
        let pad = (self.kernel - 1) / 2;
        let mut cols = Array2::zeros((t, self.kernel * self.c_in));
        for j in 0..self.kernel {
            // Output frame `o` reads input frame `o + j - pad`.
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(t);
            if lo >= hi {
                continue;
            }
            let src = (lo + j - pad)..(hi + j - pad);
            cols.slice_mut(s![lo..hi, j * self.c_in..(j + 1) * self.c_in])
                .assign(&x.slice(s![src, ..]));
        }
        cols
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> Result<(Mat, ConvCache)> {
        check_width("conv1d", x, self.c_in)?;
        let cols = self.im2col(x);
        let y = cols.dot(p.get(self.w)) + p.get(self.b);
        Ok((y, ConvCache { cols }))
    }

    pub fn backward(&self, p: &ParamStore, cache: &ConvCache, dy: &Mat, g: &mut Grads) -> Mat {
        *g.get_mut(self.w) += &cache.cols.t().dot(dy);
        *g.get_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dcols = dy.dot(&p.get(self.w).t());
        let t = dy.nrows();
        let pad = (self.kernel - 1) / 2;
        let mut dx = Array2::zeros((t, self.c_in));
        for j in 0..self.kernel {
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(t);
            if lo >= hi {
                continue;
            }
            let dst = (lo + j - pad)..(hi + j - pad);
            let mut view = dx.slice_mut(s![dst, ..]);
            view += &dcols.slice(s![lo..hi, j * self.c_in..(j + 1) * self.c_in]);
        }
        dx
    }
}

pub fn relu(x: &Mat) -> Mat {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(pre: &Mat, dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &a| {
        if a <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// `y = x + conv2(relu(conv1(x)))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
}

pub struct ResCache {
    c1: ConvCache,
    pub pre: Mat,
    c2: ConvCache,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Self {
        Self {
            conv1: Conv1d::new(
                store,
                &format!("{name}.conv1"),
                channels,
                channels,
                kernel,
                2f64.sqrt(),
            ),
            conv2: Conv1d::new(
                store,
                &format!("{name}.conv2"),
                channels,
                channels,
                kernel,
                0.5,
            ),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> Result<(Mat, ResCache)> {
        let (pre, c1) = self.conv1.forward(p, x)?;
        let (inner, c2) = self.conv2.forward(p, &relu(&pre))?;
        Ok((x + &inner, ResCache { c1, pre, c2 }))
    }

    pub fn backward(&self, p: &ParamStore, cache: &ResCache, dy: &Mat, g: &mut Grads) -> Mat {
        let dr = self.conv2.backward(p, &cache.c2, dy, g);
        let da = relu_backward(&cache.pre, &dr);
        dy + &self.conv1.backward(p, &cache.c1, &da, g)
    }
}

/// Row lookup into an `n x dim` table.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub n: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, dim: usize, std: f64) -> Self {
        let table = store.add(&format!("{name}.table"), (n, dim), Init::Normal { std });
        Self { table, n, dim }
    }

    pub fn forward(&self, p: &ParamStore, ids: &[usize]) -> Result<Mat> {
        let table = p.get(self.table);
        let mut out = Array2::zeros((ids.len(), self.dim));
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.n {
                return Err(Error::Input(format!(
                    "index {id} out of range for embedding of size {}",
                    self.n
                )));
            }
            out.row_mut(i).assign(&table.row(id));
        }
        Ok(out)
    }

    pub fn backward(&self, ids: &[usize], dy: &Mat, g: &mut Grads) {
        let gt = g.get_mut(self.table);
        for (i, &id) in ids.iter().enumerate() {
            let mut row = gt.row_mut(id);
            row += &dy.row(i);
        }
    }
}

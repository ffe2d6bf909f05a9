use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RenConfig;
use crate::error::{Error, Result};
use crate::num::Real;

/// Weights of one cross-attention block. Matrices act on row vectors as
/// `x · Wᵀ`, i.e. `W` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub w_q: Array2<T>,
    pub w_o: Array2<T>,
    pub ln1_gamma: Array1<T>,
    pub ln1_beta: Array1<T>,
    pub ln2_gamma: Array1<T>,
    pub ln2_beta: Array1<T>,
    pub w1: Array2<T>,
    pub w2: Array2<T>,
}

/// All learnable weights of the region encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RenParams<T> {
    /// `d_model × d_model`, projects the prompt embedding.
    pub w_prompt: Array2<T>,
    /// `d_model × encoder_dim`, shared key projection.
    pub w_k: Array2<T>,
    /// `d_model × encoder_dim`, shared value projection.
    pub w_v: Array2<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// `encoder_dim × d_model`, REN token to aligned token.
    pub w_align: Array2<T>,
}

/// Borrowed view of one named parameter tensor.
pub struct Tensor<'a, T> {
    pub name: String,
    pub data: &'a [T],
    /// Subject to weight decay (false for LayerNorm parameters).
    pub decay: bool,
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub data: &'a mut [T],
    pub decay: bool,
}

impl<T: Real> RenParams<T> {
    pub fn zeros(config: &RenConfig) -> Self {
        let d = config.d_model;
        let f = config.ffn_dim();
        let e = config.encoder_dim;
        Self {
            w_prompt: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, e)),
            w_v: Array2::zeros((d, e)),
            blocks: (0..config.n_blocks)
                .map(|_| BlockParams {
                    w_q: Array2::zeros((d, d)),
                    w_o: Array2::zeros((d, d)),
                    ln1_gamma: Array1::zeros(d),
                    ln1_beta: Array1::zeros(d),
                    ln2_gamma: Array1::zeros(d),
                    ln2_beta: Array1::zeros(d),
                    w1: Array2::zeros((f, d)),
                    w2: Array2::zeros((d, f)),
                })
                .collect(),
            w_align: Array2::zeros((e, d)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, data, _| data.iter_mut().for_each(|v| *v = T::zero()));
        out
    }

    pub fn tensors(&self) -> Vec<Tensor<'_, T>> {
        fn t<'a, T>(name: String, data: &'a [T], decay: bool) -> Tensor<'a, T> {
            Tensor { name, data, decay }
        }
        fn s<T>(a: &Array2<T>) -> &[T] {
            a.as_slice().expect("standard layout")
        }
        fn v<T>(a: &Array1<T>) -> &[T] {
            a.as_slice().expect("standard layout")
        }
        let mut out = vec![
            t("w_prompt".into(), s(&self.w_prompt), true),
            t("w_k".into(), s(&self.w_k), true),
            t("w_v".into(), s(&self.w_v), true),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(t(format!("blocks.{i}.w_q"), s(&b.w_q), true));
            out.push(t(format!("blocks.{i}.w_o"), s(&b.w_o), true));
            out.push(t(format!("blocks.{i}.ln1.gamma"), v(&b.ln1_gamma), false));
            out.push(t(format!("blocks.{i}.ln1.beta"), v(&b.ln1_beta), false));
            out.push(t(format!("blocks.{i}.ln2.gamma"), v(&b.ln2_gamma), false));
            out.push(t(format!("blocks.{i}.ln2.beta"), v(&b.ln2_beta), false));
            out.push(t(format!("blocks.{i}.w1"), s(&b.w1), true));
            out.push(t(format!("blocks.{i}.w2"), s(&b.w2), true));
        }
        out.push(t("w_align".into(), s(&self.w_align), true));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        fn t<'a, T>(name: String, data: &'a mut [T], decay: bool) -> TensorMut<'a, T> {
            TensorMut { name, data, decay }
        }
        fn s<T>(a: &mut Array2<T>) -> &mut [T] {
            a.as_slice_mut().expect("standard layout")
        }
        fn v<T>(a: &mut Array1<T>) -> &mut [T] {
            a.as_slice_mut().expect("standard layout")
        }
        let RenParams {
            w_prompt,
            w_k,
            w_v,
            blocks,
            w_align,
        } = self;
        let mut out = vec![
            t("w_prompt".into(), s(w_prompt), true),
            t("w_k".into(), s(w_k), true),
            t("w_v".into(), s(w_v), true),
        ];
        for (i, b) in blocks.iter_mut().enumerate() {
            let BlockParams {
                w_q,
                w_o,
                ln1_gamma,
                ln1_beta,
                ln2_gamma,
                ln2_beta,
                w1,
                w2,
            } = b;
            out.push(t(format!("blocks.{i}.w_q"), s(w_q), true));
            out.push(t(format!("blocks.{i}.w_o"), s(w_o), true));
            out.push(t(format!("blocks.{i}.ln1.gamma"), v(ln1_gamma), false));
            out.push(t(format!("blocks.{i}.ln1.beta"), v(ln1_beta), false));
            out.push(t(format!("blocks.{i}.ln2.gamma"), v(ln2_gamma), false));
            out.push(t(format!("blocks.{i}.ln2.beta"), v(ln2_beta), false));
            out.push(t(format!("blocks.{i}.w1"), s(w1), true));
            out.push(t(format!("blocks.{i}.w2"), s(w2), true));
        }
        out.push(t("w_align".into(), s(w_align), true));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [T], bool)) {
        for t in self.tensors_mut() {
            f(&t.name, t.data, t.decay);
        }
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Elementwise `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d = *d + scale * s;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in self.tensors() {
            if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::numerics(&t.name, format!("non-finite value at index {i}")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> RenParams<U> {
        let m2 = |a: &Array2<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        let m1 = |a: &Array1<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        RenParams {
            w_prompt: m2(&self.w_prompt),
            w_k: m2(&self.w_k),
            w_v: m2(&self.w_v),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    w_q: m2(&b.w_q),
                    w_o: m2(&b.w_o),
                    ln1_gamma: m1(&b.ln1_gamma),
                    ln1_beta: m1(&b.ln1_beta),
                    ln2_gamma: m1(&b.ln2_gamma),
                    ln2_beta: m1(&b.ln2_beta),
                    w1: m2(&b.w1),
                    w2: m2(&b.w2),
                })
                .collect(),
            w_align: m2(&self.w_align),
        }
    }

    /// Check that every tensor has the shape `config` implies.
    pub fn check_shapes(&self, config: &RenConfig) -> Result<()> {
        let want = RenParams::<T>::zeros(config);
        let got = self.tensors();
        let exp = want.tensors();
        if got.len() != exp.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                exp.len(),
                got.len()
            )));
        }
        for (g, e) in got.iter().zip(&exp) {
            if g.data.len() != e.data.len() {
                return Err(Error::Config(format!(
                    "{}: {} values, expected {}",
                    g.name,
                    g.data.len(),
                    e.data.len()
                )));
            }
        }
        if self.w_k.dim() != want.w_k.dim() || self.w_align.dim() != want.w_align.dim() {
            return Err(Error::Config("projection shapes do not match config".into()));
        }
        Ok(())
    }
}

fn lecun_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    let bound = (3.0 / cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound) as f32)
}

/// Deterministic initialization.
///
/// Linear weights are uniform with fan-in scaling (std `1/√fan_in`); block
/// output projections `w_o` and `w2` start at zero so every block is the
/// identity on its residual stream; LayerNorm scales are 1 and offsets 0.
pub fn init_params(seed: u64, config: &RenConfig) -> Result<RenParams<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let e = config.encoder_dim;
    let f = config.ffn_dim();
    let w_prompt = lecun_uniform(&mut rng, d, d);
    let w_k = lecun_uniform(&mut rng, d, e);
    let w_v = lecun_uniform(&mut rng, d, e);
    let blocks = (0..config.n_blocks)
        .map(|_| BlockParams {
            w_q: lecun_uniform(&mut rng, d, d),
            w_o: Array2::zeros((d, d)),
            ln1_gamma: Array1::ones(d),
            ln1_beta: Array1::zeros(d),
            ln2_gamma: Array1::ones(d),
            ln2_beta: Array1::zeros(d),
            w1: lecun_uniform(&mut rng, f, d),
            w2: Array2::zeros((d, f)),
        })
        .collect();
    let w_align = lecun_uniform(&mut rng, e, d);
    Ok(RenParams {
        w_prompt,
        w_k,
        w_v,
        blocks,
        w_align,
    })
}

//! Kernel feature maps applied to Q and K.
//!
//! A feature map phi turns the similarity sim(x, y) = phi(x) phi(y)^T into a
//! decomposable kernel, which is what lets attention be reassociated. Maps
//! always act on full D-dimensional token rows, never on per-head slices —
//! with one-dimensional heads a per-slice map would see only scalars.
//!
//! The `post_layer_norm` flag on a spec ("+ln" in CLI names) does not change
//! the map itself; it asks the attention op to layer-normalize its output
//! before the projection.

use std::fmt;
use std::str::FromStr;

use crate::tensor::{NormP, Scalar, Tensor};
use crate::{Error, Result};

/// Epsilon guard in norm denominators; keeps zero rows at zero.
pub const NORM_EPS: f64 = 1e-12;

/// Epsilon inside layer-norm variance square roots.
pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMap {
    /// x / max(||x||_2, eps) per token row (cosine similarity kernel).
    CosineL2,
    /// x / sqrt(T) where T is the token count.
    MeanSqrtT,
    /// tanh(x) elementwise.
    Tanh,
    /// sigma(x) elementwise.
    Sigmoid,
    /// softmax along the token axis, per feature column.
    SoftmaxTokens,
    /// x / max(||x||_1, eps) per token row.
    L1Norm,
    Identity,
}

impl FeatureMap {
    /// Stable CLI name.
    pub fn name(&self) -> &'static str {
        match self {
            FeatureMap::CosineL2 => "cossim",
            FeatureMap::MeanSqrtT => "mean",
            FeatureMap::Tanh => "tanh",
            FeatureMap::Sigmoid => "sigmoid",
            FeatureMap::SoftmaxTokens => "softmax",
            FeatureMap::L1Norm => "l1",
            FeatureMap::Identity => "identity",
        }
    }

    pub const ALL: [FeatureMap; 7] = [
        FeatureMap::CosineL2,
        FeatureMap::MeanSqrtT,
        FeatureMap::Tanh,
        FeatureMap::Sigmoid,
        FeatureMap::SoftmaxTokens,
        FeatureMap::L1Norm,
        FeatureMap::Identity,
    ];
}

/// A feature map choice plus the "+ln" output-normalization flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMapSpec {
    pub map: FeatureMap,
    pub post_layer_norm: bool,
}

impl FeatureMapSpec {
    pub fn new(map: FeatureMap) -> Self {
        FeatureMapSpec {
            map,
            post_layer_norm: false,
        }
    }

    pub fn with_post_ln(mut self) -> Self {
        self.post_layer_norm = true;
        self
    }
}

impl fmt::Display for FeatureMapSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.map.name())?;
        if self.post_layer_norm {
            write!(f, "+ln")?;
        }
        Ok(())
    }
}

impl FromStr for FeatureMapSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, ln) = match s.strip_suffix("+ln") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let map = match base {
            "cossim" => FeatureMap::CosineL2,
            "mean" => FeatureMap::MeanSqrtT,
            "tanh" => FeatureMap::Tanh,
            "sigmoid" => FeatureMap::Sigmoid,
            "softmax" => FeatureMap::SoftmaxTokens,
            "l1" => FeatureMap::L1Norm,
            "identity" => FeatureMap::Identity,
            other => {
                return Err(Error::Spec(format!(
                    "unknown kernel '{other}' (expected cossim, mean, tanh, sigmoid, softmax, l1, identity; optional +ln suffix)"
                )))
            }
        };
        Ok(FeatureMapSpec {
            map,
            post_layer_norm: ln,
        })
    }
}

/// Kernels may differ between Q and K (e.g. sigmoid-softmax).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelPair {
    pub q: FeatureMapSpec,
    pub k: FeatureMapSpec,
}

impl KernelPair {
    pub fn symmetric(map: FeatureMap) -> Self {
        KernelPair {
            q: FeatureMapSpec::new(map),
            k: FeatureMapSpec::new(map),
        }
    }

    pub fn asymmetric(q: FeatureMap, k: FeatureMap) -> Self {
        KernelPair {
            q: FeatureMapSpec::new(q),
            k: FeatureMapSpec::new(k),
        }
    }

    pub fn cosine() -> Self {
        Self::symmetric(FeatureMap::CosineL2)
    }

    pub fn mean() -> Self {
        Self::symmetric(FeatureMap::MeanSqrtT)
    }

    pub fn identity() -> Self {
        Self::symmetric(FeatureMap::Identity)
    }

    pub fn tanh_softmax() -> Self {
        Self::asymmetric(FeatureMap::Tanh, FeatureMap::SoftmaxTokens)
    }

    pub fn sigmoid_softmax() -> Self {
        Self::asymmetric(FeatureMap::Sigmoid, FeatureMap::SoftmaxTokens)
    }

    pub fn tanh_l2() -> Self {
        Self::asymmetric(FeatureMap::Tanh, FeatureMap::CosineL2)
    }

    pub fn l1() -> Self {
        Self::symmetric(FeatureMap::L1Norm)
    }

    pub fn with_post_ln(mut self) -> Self {
        self.q.post_layer_norm = true;
        self.k.post_layer_norm = true;
        self
    }

    /// Whether the attention output should be layer-normalized.
    pub fn post_ln(&self) -> bool {
        self.q.post_layer_norm || self.k.post_layer_norm
    }

    /// The kernel rows of the comparison tables, by their CLI names.
    pub fn table_pairs() -> Vec<(&'static str, KernelPair)> {
        vec![
            ("cossim", Self::cosine()),
            ("tanh-l2", Self::tanh_l2()),
            ("mean", Self::mean()),
            ("cossim+ln", Self::cosine().with_post_ln()),
            ("tanh-l2+ln", Self::tanh_l2().with_post_ln()),
            ("tanh-softmax", Self::tanh_softmax()),
            ("sigmoid-softmax", Self::sigmoid_softmax()),
            ("l1", Self::l1()),
        ]
    }
}

/// Apply a feature map to every token row of `x`.
///
/// `t_for_mean` is the token count used by the mean map; callers pass the
/// attention operation's T. The `post_layer_norm` flag is ignored here.
pub fn apply_feature_map<T: Scalar>(
    x: &Tensor<T>,
    spec: &FeatureMapSpec,
    t_for_mean: usize,
) -> Result<Tensor<T>> {
    let eps = T::norm_guard();
    let out = match spec.map {
        FeatureMap::Identity => x.clone(),
        FeatureMap::Tanh => x.map(|v| v.tanh()),
        FeatureMap::Sigmoid => x.map(sigmoid),
        FeatureMap::SoftmaxTokens => x.softmax_cols(),
        FeatureMap::MeanSqrtT => {
            if t_for_mean == 0 {
                return Err(Error::Spec("mean kernel needs a positive token count".into()));
            }
            let inv = T::one() / T::from(t_for_mean).unwrap().sqrt();
            x.scale(inv)
        }
        FeatureMap::CosineL2 => normalize_rows(x, NormP::L2, eps),
        FeatureMap::L1Norm => normalize_rows(x, NormP::L1, eps),
    };
    Ok(out)
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn normalize_rows<T: Scalar>(x: &Tensor<T>, p: NormP, eps: T) -> Tensor<T> {
    let norms = x.norm_rows(p);
    let (m, n) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let denom = norms.data()[i].max(eps);
        for &v in x.row(i) {
            out.push(v / denom);
        }
    }
    Tensor::matrix(m, n, out).expect("shape preserved")
}

/// Vector-Jacobian product of [`apply_feature_map`]: given d(out), return d(x).
pub fn feature_map_vjp(
    x: &Tensor<f64>,
    spec: &FeatureMapSpec,
    t_for_mean: usize,
    upstream: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    if x.shape() != upstream.shape() {
        return Err(Error::Dimension(format!(
            "feature map vjp shapes differ: {:?} vs {:?}",
            x.shape(),
            upstream.shape()
        )));
    }
    let (m, n) = (x.rows(), x.cols());
    let out = match spec.map {
        FeatureMap::Identity => upstream.clone(),
        FeatureMap::Tanh => {
            let y = x.map(|v| v.tanh());
            Tensor::from_fn(m, n, |i, j| upstream.at(i, j) * (1.0 - y.at(i, j) * y.at(i, j)))
        }
        FeatureMap::Sigmoid => {
            let y = x.map(sigmoid);
            Tensor::from_fn(m, n, |i, j| {
                upstream.at(i, j) * y.at(i, j) * (1.0 - y.at(i, j))
            })
        }
        FeatureMap::MeanSqrtT => {
            if t_for_mean == 0 {
                return Err(Error::Spec("mean kernel needs a positive token count".into()));
            }
            upstream.scale(1.0 / (t_for_mean as f64).sqrt())
        }
        FeatureMap::SoftmaxTokens => {
            // softmax along each column: dz = s .* (du - <du, s>)
            let s = x.softmax_cols();
            let mut out = Tensor::zeros(&[m, n]);
            for j in 0..n {
                let mut dot = 0.0;
                for i in 0..m {
                    dot += upstream.at(i, j) * s.at(i, j);
                }
                for i in 0..m {
                    out.data_mut()[i * n + j] = s.at(i, j) * (upstream.at(i, j) - dot);
                }
            }
            out
        }
        FeatureMap::CosineL2 => {
            // y = x / r with r = max(||x||_2, eps).
            // Above the guard: dx = (du - <du, y> y) / r.
            // In the guarded region r is constant, so dx = du / eps.
            let norms = x.norm_rows(NormP::L2);
            let mut out = Tensor::zeros(&[m, n]);
            for i in 0..m {
                let r = norms.data()[i];
                if r > NORM_EPS {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += upstream.at(i, j) * x.at(i, j) / r;
                    }
                    for j in 0..n {
                        let y = x.at(i, j) / r;
                        out.data_mut()[i * n + j] = (upstream.at(i, j) - dot * y) / r;
                    }
                } else {
                    for j in 0..n {
                        out.data_mut()[i * n + j] = upstream.at(i, j) / NORM_EPS;
                    }
                }
            }
            out
        }
        FeatureMap::L1Norm => {
            // y = x / r with r = max(||x||_1, eps); d r / d x_j = sign(x_j).
            let norms = x.norm_rows(NormP::L1);
            let mut out = Tensor::zeros(&[m, n]);
            for i in 0..m {
                let r = norms.data()[i];
                if r > NORM_EPS {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += upstream.at(i, j) * x.at(i, j) / r;
                    }
                    for j in 0..n {
                        out.data_mut()[i * n + j] =
                            (upstream.at(i, j) - dot * x.at(i, j).signum()) / r;
                    }
                } else {
                    for j in 0..n {
                        out.data_mut()[i * n + j] = upstream.at(i, j) / NORM_EPS;
                    }
                }
            }
            out
        }
    };
    Ok(out)
}

/// Zero-mean, unit-variance normalization per token row, no learned affine.
pub fn layer_norm_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (x.rows(), x.cols());
    let nn = T::from(n).unwrap();
    let eps = T::from(LN_EPS).unwrap();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / nn;
        let var = row
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
            / nn;
        let inv = T::one() / (var + eps).sqrt();
        for &v in row {
            out.push((v - mean) * inv);
        }
    }
    Tensor::matrix(m, n, out).expect("shape preserved")
}

/// Vector-Jacobian product of [`layer_norm_rows`].
pub fn layer_norm_rows_vjp(x: &Tensor<f64>, upstream: &Tensor<f64>) -> Result<Tensor<f64>> {
    if x.shape() != upstream.shape() {
        return Err(Error::Dimension(format!(
            "layer norm vjp shapes differ: {:?} vs {:?}",
            x.shape(),
            upstream.shape()
        )));
    }
    let (m, n) = (x.rows(), x.cols());
    let nn = n as f64;
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / nn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nn;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let y: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
        let du = upstream.row(i);
        let du_mean = du.iter().sum::<f64>() / nn;
        let dy_dot = du.iter().zip(&y).map(|(&d, &yy)| d * yy).sum::<f64>() / nn;
        for j in 0..n {
            out.data_mut()[i * n + j] = inv * (du[j] - du_mean - y[j] * dy_dot);
        }
    }
    Ok(out)
}

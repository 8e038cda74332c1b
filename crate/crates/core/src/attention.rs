//! The attention variants and the equivalence structure connecting them.
//!
//! Five operations over Q, K, V in R^{T x D}:
//!
//! - `msa`: per-head softmax(Q_h K_h^T / sqrt(D)) V_h, heads concatenated.
//! - `mla`: the reassociated linear form phi(Q)_h (phi(K)_h^T V_h), with phi
//!   applied to full rows before head slicing.
//! - `hydra`: mla taken to H = D and vectorized,
//!   out = phi(Q) .* sum_t phi(K)^t .* V^t.
//! - `aft_simple`: sigma(Q) .* sum_t softmax(K)^t .* V^t, a hydra
//!   specialization with the (sigmoid, softmax) pair.
//! - `polynl`: (X .* (1/T) sum_t X W1 .* X W2) W3, a hydra specialization
//!   with the mean map on both sides followed by W3.
//!
//! None of these include projections or biases; those belong to the model
//! layer, which keeps the reductions exact.
//!
//! The scaling inside `msa` is 1/sqrt(D), not 1/sqrt(D/H). Common practice
//! differs; see the module tests pinning this behavior.

use crate::kernels::{self, FeatureMapSpec, KernelPair};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Which attention operation a layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Msa,
    Mla,
    Hydra,
    AftSimple,
    PolyNl,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Msa => "msa",
            Variant::Mla => "mla",
            Variant::Hydra => "hydra",
            Variant::AftSimple => "aft-simple",
            Variant::PolyNl => "polynl",
        }
    }
}

/// Attention configuration for one layer.
#[derive(Debug, Clone)]
pub struct AttentionLayerSpec {
    pub variant: Variant,
    pub heads: usize,
    pub kernel_pair: KernelPair,
    pub tokens: usize,
    pub dim: usize,
}

impl AttentionLayerSpec {
    pub fn new(variant: Variant, heads: usize, kernel_pair: KernelPair, tokens: usize, dim: usize) -> Self {
        AttentionLayerSpec {
            variant,
            heads,
            kernel_pair,
            tokens,
            dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.dim == 0 {
            return Err(Error::Spec("tokens and dim must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Spec(format!(
                "head count {} must divide feature dim {}",
                self.heads, self.dim
            )));
        }
        if self.variant == Variant::Hydra && self.heads != self.dim {
            return Err(Error::Spec(format!(
                "hydra uses one head per feature: heads {} != dim {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

/// Per-call instrumentation.
///
/// `attention_macs` counts multiply-accumulates in the mixing itself:
/// creating and applying attention matrices for `msa`, the two reassociated
/// products for `mla`, and the aggregate-then-gate elementwise products for
/// `hydra`. Feature map cost is reported separately; transcendentals,
/// additions, and divisions count zero. `peak_intermediate_elems` is the
/// element count of the largest buffer the op allocates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttnStats {
    pub attention_macs: u64,
    pub feature_map_macs: u64,
    pub peak_intermediate_elems: u64,
}

fn check_qkv_shapes<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize)> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Dimension(format!(
            "q, k, v must share a T x D shape; got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok((q.rows(), q.cols()))
}

fn feature_map_macs(spec: &FeatureMapSpec, t: usize, d: usize) -> u64 {
    use crate::kernels::FeatureMap::*;
    let td = (t * d) as u64;
    match spec.map {
        // norm accumulation plus the per-element normalization multiply
        CosineL2 | L1Norm => 2 * td,
        // one multiply per element
        MeanSqrtT | SoftmaxTokens => td,
        Tanh | Sigmoid | Identity => 0,
    }
}

// ---------------------------------------------------------------------------
// Multi-head softmax attention
// ---------------------------------------------------------------------------

/// Standard multi-head softmax attention.
pub fn msa<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    msa_instrumented(q, k, v, heads).map(|(out, _)| out)
}

/// `msa` with MAC and peak-buffer accounting.
pub fn msa_instrumented<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, AttnStats)> {
    let (t, d) = check_qkv_shapes(q, k, v)?;
    let stack = msa_weight_stack(q, k, heads)?;
    let dh = d / heads;

    let mut out = Tensor::zeros(&[t, d]);
    for h in 0..heads {
        let base = h * t * t;
        for i in 0..t {
            for j in 0..t {
                let w = stack[base + i * t + j];
                for c in 0..dh {
                    let col = h * dh + c;
                    out.data_mut()[i * d + col] = out.data_mut()[i * d + col] + w * v.at(j, col);
                }
            }
        }
    }

    let stats = AttnStats {
        // create (T^2 * D/H per head) + apply (same), over H heads
        attention_macs: 2 * (t * t * d) as u64,
        feature_map_macs: 0,
        peak_intermediate_elems: (heads * t * t) as u64,
    };
    Ok((out, stats))
}

/// The softmaxed per-head attention matrices, stacked head-major as one
/// buffer of H * T * T values. This is the op's largest intermediate.
fn msa_weight_stack<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Vec<T>> {
    let (t, d) = (q.rows(), q.cols());
    if heads == 0 || d % heads != 0 {
        return Err(Error::Spec(format!(
            "head count {heads} must divide feature dim {d}"
        )));
    }
    let dh = d / heads;
    // 1/sqrt(D), exactly as the multi-head formulation writes it.
    let scale = T::one() / T::from(d).unwrap().sqrt();

    let mut stack = vec![T::zero(); heads * t * t];
    for h in 0..heads {
        let base = h * t * t;
        for i in 0..t {
            for j in 0..t {
                let mut dot = T::zero();
                for c in 0..dh {
                    let col = h * dh + c;
                    dot = dot + q.at(i, col) * k.at(j, col);
                }
                stack[base + i * t + j] = dot * scale;
            }
        }
        // softmax each row of this head's matrix
        for i in 0..t {
            let row = &mut stack[base + i * t..base + (i + 1) * t];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
    }
    Ok(stack)
}

/// Per-head softmaxed attention matrices as tensors (test and inspection aid).
pub fn msa_attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    heads: usize,
) -> Result<Vec<Tensor<T>>> {
    let t = q.rows();
    let stack = msa_weight_stack(q, k, heads)?;
    (0..heads)
        .map(|h| Tensor::matrix(t, t, stack[h * t * t..(h + 1) * t * t].to_vec()))
        .collect()
}

// ---------------------------------------------------------------------------
// Multi-head linear attention
// ---------------------------------------------------------------------------

/// Multi-head linear attention in the reassociated order:
/// per head, phi(Q)_h (phi(K)_h^T V_h). phi is applied to full rows first.
pub fn mla<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    pair: &KernelPair,
) -> Result<Tensor<T>> {
    mla_instrumented(q, k, v, heads, pair).map(|(out, _)| out)
}

/// `mla` with MAC and peak-buffer accounting.
pub fn mla_instrumented<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    pair: &KernelPair,
) -> Result<(Tensor<T>, AttnStats)> {
    let (t, d) = check_qkv_shapes(q, k, v)?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Spec(format!(
            "head count {heads} must divide feature dim {d}"
        )));
    }
    let dh = d / heads;

    let phi_q = kernels::apply_feature_map(q, &pair.q, t)?;
    let phi_k = kernels::apply_feature_map(k, &pair.k, t)?;

    let mut out = Tensor::zeros(&[t, d]);
    // kv holds one head's phi(K)_h^T V_h, a (D/H)^2 matrix.
    let mut kv = vec![T::zero(); dh * dh];
    for h in 0..heads {
        let off = h * dh;
        for x in kv.iter_mut() {
            *x = T::zero();
        }
        // kv[a][b] = sum_t phi(K)[t, off+a] * V[t, off+b], t ascending
        for tok in 0..t {
            for a in 0..dh {
                let pk = phi_k.at(tok, off + a);
                for b in 0..dh {
                    kv[a * dh + b] = kv[a * dh + b] + pk * v.at(tok, off + b);
                }
            }
        }
        // out[i, off+b] = sum_a phi(Q)[i, off+a] * kv[a][b]
        for i in 0..t {
            for a in 0..dh {
                let pq = phi_q.at(i, off + a);
                for b in 0..dh {
                    out.data_mut()[i * d + off + b] =
                        out.data_mut()[i * d + off + b] + pq * kv[a * dh + b];
                }
            }
        }
    }

    let out = if pair.post_ln() {
        kernels::layer_norm_rows(&out)
    } else {
        out
    };

    let stats = AttnStats {
        // 2 * T * (D/H)^2 per head
        attention_macs: 2 * (heads * t * dh * dh) as u64,
        feature_map_macs: feature_map_macs(&pair.q, t, d) + feature_map_macs(&pair.k, t, d),
        peak_intermediate_elems: (t * d).max(dh * dh) as u64,
    };
    Ok((out, stats))
}

// ---------------------------------------------------------------------------
// Hydra attention
// ---------------------------------------------------------------------------

/// Hydra attention: H = D heads, vectorized across features.
///
/// out = phi(Q) .* sum_t phi(K)^t .* V^t — a global feature vector gated per
/// token. Exactly 2 T D multiply-accumulates plus the feature map cost.
pub fn hydra<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    pair: &KernelPair,
) -> Result<Tensor<T>> {
    hydra_instrumented(q, k, v, pair).map(|(out, _)| out)
}

/// `hydra` with MAC and peak-buffer accounting.
pub fn hydra_instrumented<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    pair: &KernelPair,
) -> Result<(Tensor<T>, AttnStats)> {
    let (t, d) = check_qkv_shapes(q, k, v)?;
    let phi_q = kernels::apply_feature_map(q, &pair.q, t)?;
    let phi_k = kernels::apply_feature_map(k, &pair.k, t)?;

    // global feature vector: kv[c] = sum over tokens of phi(K)[tok, c] * V[tok, c]
    let mut kv = vec![T::zero(); d];
    for tok in 0..t {
        let pk = phi_k.row(tok);
        let vr = v.row(tok);
        for c in 0..d {
            kv[c] = kv[c] + pk[c] * vr[c];
        }
    }

    let mut out = Tensor::zeros(&[t, d]);
    for tok in 0..t {
        let pq = phi_q.row(tok);
        for c in 0..d {
            out.data_mut()[tok * d + c] = pq[c] * kv[c];
        }
    }

    let out = if pair.post_ln() {
        kernels::layer_norm_rows(&out)
    } else {
        out
    };

    let stats = AttnStats {
        attention_macs: 2 * (t * d) as u64,
        feature_map_macs: feature_map_macs(&pair.q, t, d) + feature_map_macs(&pair.k, t, d),
        peak_intermediate_elems: (t * d) as u64,
    };
    Ok((out, stats))
}

/// Closed-form adjoints of [`hydra`] under an upstream gradient.
///
/// Returns (dQ, dK, dV). Agrees with the autodiff tape and with central
/// finite differences; the cosine adjoint stays finite at zero rows because
/// the epsilon guard makes the normalizer constant there.
pub fn hydra_backward(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    pair: &KernelPair,
    upstream: &Tensor<f64>,
) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    let (t, d) = check_qkv_shapes(q, k, v)?;
    if upstream.shape() != q.shape() {
        return Err(Error::Dimension(format!(
            "upstream shape {:?} must match q/k/v shape {:?}",
            upstream.shape(),
            q.shape()
        )));
    }

    let phi_q = kernels::apply_feature_map(q, &pair.q, t)?;
    let phi_k = kernels::apply_feature_map(k, &pair.k, t)?;

    let mut kv = vec![0.0f64; d];
    for tok in 0..t {
        for c in 0..d {
            kv[c] += phi_k.at(tok, c) * v.at(tok, c);
        }
    }

    // Backprop through the optional output layer norm first.
    let upstream_own;
    let upstream = if pair.post_ln() {
        let mut pre = Tensor::zeros(&[t, d]);
        for tok in 0..t {
            for c in 0..d {
                pre.data_mut()[tok * d + c] = phi_q.at(tok, c) * kv[c];
            }
        }
        upstream_own = kernels::layer_norm_rows_vjp(&pre, upstream)?;
        &upstream_own
    } else {
        upstream
    };

    // d phi(Q) = U .* kv (broadcast over rows)
    let mut d_phi_q = Tensor::zeros(&[t, d]);
    // d kv[c] = sum over tokens of U[tok, c] * phi(Q)[tok, c]
    let mut d_kv = vec![0.0f64; d];
    for tok in 0..t {
        for c in 0..d {
            let u = upstream.at(tok, c);
            d_phi_q.data_mut()[tok * d + c] = u * kv[c];
            d_kv[c] += u * phi_q.at(tok, c);
        }
    }

    let mut d_phi_k = Tensor::zeros(&[t, d]);
    let mut d_v = Tensor::zeros(&[t, d]);
    for tok in 0..t {
        for c in 0..d {
            d_phi_k.data_mut()[tok * d + c] = d_kv[c] * v.at(tok, c);
            d_v.data_mut()[tok * d + c] = d_kv[c] * phi_k.at(tok, c);
        }
    }

    let d_q = kernels::feature_map_vjp(q, &pair.q, t, &d_phi_q)?;
    let d_k = kernels::feature_map_vjp(k, &pair.k, t, &d_phi_k)?;
    Ok((d_q, d_k, d_v))
}

// ---------------------------------------------------------------------------
// Reductions of other linear-time attention forms
// ---------------------------------------------------------------------------

/// sigma(Q) .* sum_t softmax(K)^t .* V^t, with softmax along the token axis.
///
/// Equal, bit for bit, to `hydra` with the (sigmoid, softmax-tokens) pair.
pub fn aft_simple<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (t, d) = check_qkv_shapes(q, k, v)?;
    let gate = q.map(|x| T::one() / (T::one() + (-x).exp()));
    let mix = k.softmax_cols();

    let mut kv = vec![T::zero(); d];
    for tok in 0..t {
        let mr = mix.row(tok);
        let vr = v.row(tok);
        for c in 0..d {
            kv[c] = kv[c] + mr[c] * vr[c];
        }
    }

    let mut out = Tensor::zeros(&[t, d]);
    for tok in 0..t {
        let g = gate.row(tok);
        for c in 0..d {
            out.data_mut()[tok * d + c] = g[c] * kv[c];
        }
    }
    Ok(out)
}

/// Third-order polynomial attention:
/// (X .* (1/T) sum_t (X W1)^t .* (X W2)^t) W3.
///
/// Equal (to rounding) to `hydra(X, X W1, X W2; mean)` followed by W3.
pub fn polynl<T: Scalar>(
    x: &Tensor<T>,
    w1: &Tensor<T>,
    w2: &Tensor<T>,
    w3: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::Dimension("polynl expects a T x D input".into()));
    }
    let (t, d) = (x.rows(), x.cols());
    for (name, w) in [("w1", w1), ("w2", w2), ("w3", w3)] {
        if w.shape() != [d, d] {
            return Err(Error::Dimension(format!(
                "{name} must be {d} x {d}, got {:?}",
                w.shape()
            )));
        }
    }

    let k = x.matmul(w1)?;
    let v = x.matmul(w2)?;

    let inv_t = T::one() / T::from(t).unwrap();
    let mut m = vec![T::zero(); d];
    for tok in 0..t {
        for c in 0..d {
            m[c] = m[c] + k.at(tok, c) * v.at(tok, c);
        }
    }
    for c in 0..d {
        m[c] = m[c] * inv_t;
    }

    let mut gated = Tensor::zeros(&[t, d]);
    for tok in 0..t {
        for c in 0..d {
            gated.data_mut()[tok * d + c] = x.at(tok, c) * m[c];
        }
    }
    gated.matmul(w3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::FeatureMap;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    /// Explicit per-head oracle for msa: builds each head's T x T matrix the
    /// slow way, with its own softmax.
    fn msa_oracle(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
        let (t, d) = (q.rows(), q.cols());
        let dh = d / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Tensor::zeros(&[t, d]);
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let mut row = vec![0.0f64; t];
                for j in 0..t {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q.at(i, off + c) * k.at(j, off + c);
                    }
                    row[j] = dot * scale;
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&s| (s - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..t {
                    let w = exps[j] / sum;
                    for c in 0..dh {
                        out.data_mut()[i * d + off + c] += w * v.at(j, off + c);
                    }
                }
            }
        }
        out
    }

    /// The head-by-head loop with H = D and one-dimensional heads, phi still
    /// applied to full rows.
    fn hydra_per_head_oracle(q: &Tensor, k: &Tensor, v: &Tensor, pair: &KernelPair) -> Tensor {
        let (t, d) = (q.rows(), q.cols());
        let phi_q = kernels::apply_feature_map(q, &pair.q, t).unwrap();
        let phi_k = kernels::apply_feature_map(k, &pair.k, t).unwrap();
        let mut out = Tensor::zeros(&[t, d]);
        for h in 0..d {
            let mut kv = 0.0;
            for tok in 0..t {
                kv += phi_k.at(tok, h) * v.at(tok, h);
            }
            for tok in 0..t {
                out.data_mut()[tok * d + h] = phi_q.at(tok, h) * kv;
            }
        }
        if pair.post_ln() {
            kernels::layer_norm_rows(&out)
        } else {
            out
        }
    }

    fn random_qkv(seed: u64, t: usize, d: usize) -> (Tensor, Tensor, Tensor) {
        let mut rng = SeededRng::new(seed);
        (
            rng.uniform_matrix(t, d, -1.0, 1.0),
            rng.uniform_matrix(t, d, -1.0, 1.0),
            rng.uniform_matrix(t, d, -1.0, 1.0),
        )
    }

    #[test]
    fn msa_single_token_returns_v() {
        let (q, k, v) = random_qkv(0, 1, 4);
        let out = msa(&q, &k, &v, 2).unwrap();
        assert!(out.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn msa_zero_query_averages_v_per_head() {
        let mut rng = SeededRng::new(1);
        let t = 5;
        let d = 6;
        let q = Tensor::zeros(&[t, d]);
        let k: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
        let v: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
        let out = msa(&q, &k, &v, 3).unwrap();
        for i in 0..t {
            for c in 0..d {
                let mean: f64 = (0..t).map(|j| v.at(j, c)).sum::<f64>() / t as f64;
                assert!((out.at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_matches_per_head_loop_oracle_seed_3() {
        let (q, k, v) = random_qkv(3, 4, 6);
        for heads in [1, 2, 3] {
            let got = msa(&q, &k, &v, heads).unwrap();
            let want = msa_oracle(&q, &k, &v, heads);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "heads={heads}");
        }
    }

    #[test]
    fn msa_rejects_nondividing_heads() {
        let (q, k, v) = random_qkv(5, 3, 6);
        assert!(matches!(msa(&q, &k, &v, 4), Err(Error::Spec(_))));
    }

    #[test]
    fn mla_identity_single_head_matches_left_association() {
        let (q, k, v) = random_qkv(8, 5, 4);
        let got = mla(&q, &k, &v, 1, &KernelPair::identity()).unwrap();
        let want = q
            .matmul(&k.transpose())
            .unwrap()
            .matmul(&v)
            .unwrap();
        assert!(got.max_relative_error(&want).unwrap() < 1e-9);
    }

    #[test]
    fn mla_zero_v_gives_zero() {
        let (q, k, _) = random_qkv(9, 4, 4);
        let v = Tensor::zeros(&[4, 4]);
        let out = mla(&q, &k, &v, 2, &KernelPair::cosine()).unwrap();
        assert_eq!(out, Tensor::zeros(&[4, 4]));
    }

    #[test]
    fn mla_full_heads_equals_hydra_seed_5() {
        let (q, k, v) = random_qkv(5, 3, 4);
        let pair = KernelPair::cosine();
        let a = mla(&q, &k, &v, 4, &pair).unwrap();
        let b = hydra(&q, &k, &v, &pair).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn hydra_hand_evaluated_ones() {
        let ones: Tensor = Tensor::ones(&[2, 2]);
        let out = hydra(&ones, &ones, &ones, &KernelPair::cosine()).unwrap();
        // rows normalize to 1/sqrt(2), kv = sqrt(2) per feature, gate -> 1
        assert!(out.max_abs_diff(&Tensor::ones(&[2, 2])).unwrap() < 1e-12);
    }

    #[test]
    fn hydra_matches_per_head_oracle_all_kernels() {
        for (name, pair) in KernelPair::table_pairs() {
            for seed in 0..20u64 {
                let mut rng = SeededRng::new(seed * 31 + 7);
                let t = 2 + rng.uniform_usize(7);
                let d = 2 + rng.uniform_usize(7);
                let (q, k, v) = random_qkv(seed + 100, t, d);
                let got = hydra(&q, &k, &v, &pair).unwrap();
                let want = hydra_per_head_oracle(&q, &k, &v, &pair);
                assert!(
                    got.max_abs_diff(&want).unwrap() < 1e-12,
                    "kernel {name}, seed {seed}"
                );
            }
        }
    }

    #[test]
    fn hydra_permutation_equivariance() {
        let (q, k, v) = random_qkv(12, 6, 4);
        let mut rng = SeededRng::new(13);
        let perm = rng.permutation(6);
        let permute = |x: &Tensor| {
            let rows: Vec<&[f64]> = perm.iter().map(|&i| x.row(i)).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let pair = KernelPair::cosine();
        let direct = permute(&hydra(&q, &k, &v, &pair).unwrap());
        let permuted = hydra(&permute(&q), &permute(&k), &permute(&v), &pair).unwrap();
        assert!(direct.max_abs_diff(&permuted).unwrap() < 1e-12);
    }

    #[test]
    fn hydra_backward_zero_upstream() {
        let (q, k, v) = random_qkv(20, 4, 4);
        let zero = Tensor::zeros(&[4, 4]);
        let (dq, dk, dv) = hydra_backward(&q, &k, &v, &KernelPair::cosine(), &zero).unwrap();
        assert_eq!(dq, zero);
        assert_eq!(dk, zero);
        assert_eq!(dv, zero);
    }

    #[test]
    fn aft_simple_is_bitwise_hydra_specialization_seed_2() {
        let (q, k, v) = random_qkv(2, 3, 4);
        let a = aft_simple(&q, &k, &v).unwrap();
        let b = hydra(&q, &k, &v, &KernelPair::sigmoid_softmax()).unwrap();
        assert_eq!(a, b, "reduction must be exact to the bit");
    }

    #[test]
    fn aft_simple_single_token() {
        let (q, _, v) = random_qkv(21, 1, 5);
        let k = Tensor::zeros(&[1, 5]);
        let out = aft_simple(&q, &k, &v).unwrap();
        // softmax over one token is 1, so out = sigma(q) .* v
        for c in 0..5 {
            let want = 1.0 / (1.0 + (-q.at(0, c)).exp()) * v.at(0, c);
            assert!((out.at(0, c) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn polynl_matches_hydra_mean_route_seed_11() {
        let mut rng = SeededRng::new(11);
        let x: Tensor = rng.uniform_matrix(3, 4, -1.0, 1.0);
        let w1: Tensor = rng.uniform_matrix(4, 4, -1.0, 1.0);
        let w2: Tensor = rng.uniform_matrix(4, 4, -1.0, 1.0);
        let w3: Tensor = rng.uniform_matrix(4, 4, -1.0, 1.0);

        let direct = polynl(&x, &w1, &w2, &w3).unwrap();
        let k = x.matmul(&w1).unwrap();
        let v = x.matmul(&w2).unwrap();
        let via_hydra = hydra(&x, &k, &v, &KernelPair::mean())
            .unwrap()
            .matmul(&w3)
            .unwrap();
        assert!(direct.max_abs_diff(&via_hydra).unwrap() < 1e-12);
    }

    #[test]
    fn polynl_degenerate_cases() {
        let mut rng = SeededRng::new(14);
        let x: Tensor = rng.uniform_matrix(3, 3, -1.0, 1.0);
        let zero = Tensor::zeros(&[3, 3]);
        let eye = Tensor::identity(3);
        assert_eq!(polynl(&x, &zero, &zero, &eye).unwrap(), Tensor::zeros(&[3, 3]));
        let w: Tensor = rng.uniform_matrix(3, 3, -1.0, 1.0);
        assert_eq!(
            polynl(&Tensor::zeros(&[3, 3]), &w, &w, &eye).unwrap(),
            Tensor::zeros(&[3, 3])
        );
        let bad = Tensor::zeros(&[2, 3]);
        assert!(polynl(&x, &bad, &w, &w).is_err());
    }

    #[test]
    fn mac_counts_match_closed_forms() {
        let (q, k, v) = random_qkv(30, 8, 8);
        let (_, s_msa) = msa_instrumented(&q, &k, &v, 4).unwrap();
        assert_eq!(s_msa.attention_macs, 2 * 8 * 8 * 8);
        assert_eq!(s_msa.peak_intermediate_elems, 4 * 8 * 8);

        let (_, s_mla) = mla_instrumented(&q, &k, &v, 4, &KernelPair::cosine()).unwrap();
        assert_eq!(s_mla.attention_macs, 2 * 8 * 8 * 8 / 4);

        let (_, s_hydra) = hydra_instrumented(&q, &k, &v, &KernelPair::cosine()).unwrap();
        assert_eq!(s_hydra.attention_macs, 2 * 8 * 8);
        assert_eq!(s_hydra.peak_intermediate_elems, 8 * 8);
    }

    #[test]
    fn layer_spec_validation() {
        let spec = AttentionLayerSpec::new(Variant::Msa, 3, KernelPair::cosine(), 4, 8);
        assert!(spec.validate().is_err());
        let spec = AttentionLayerSpec::new(Variant::Hydra, 4, KernelPair::cosine(), 4, 8);
        assert!(spec.validate().is_err());
        let spec = AttentionLayerSpec::new(Variant::Hydra, 8, KernelPair::cosine(), 4, 8);
        assert!(spec.validate().is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        // per-head attention rows are a probability distribution
        #[test]
        fn msa_head_rows_sum_to_one(seed in 0u64..500) {
            let (q, k, _) = random_qkv(seed, 5, 6);
            for heads in [1usize, 2, 3, 6] {
                let ws = msa_attention_weights(&q, &k, heads).unwrap();
                for w in &ws {
                    for i in 0..w.rows() {
                        let s: f64 = w.row(i).iter().sum();
                        prop_assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
        }

        // hydra is linear in V
        #[test]
        fn hydra_linearity_in_v(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let (q, k, v) = random_qkv(seed, 4, 5);
            let mut rng = SeededRng::new(seed + 999);
            let v2: Tensor = rng.uniform_matrix(4, 5, -1.0, 1.0);
            let pair = KernelPair::cosine();

            let combo = v.scale(a).ewise_add(&v2.scale(b)).unwrap();
            let lhs = hydra(&q, &k, &combo, &pair).unwrap();
            let rhs = hydra(&q, &k, &v, &pair).unwrap().scale(a)
                .ewise_add(&hydra(&q, &k, &v2, &pair).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
        }

        // reassociation with identity kernels
        #[test]
        fn identity_kernel_association_orders_agree(seed in 0u64..500) {
            let (q, k, v) = random_qkv(seed, 6, 4);
            let left = q.matmul(&k.transpose()).unwrap().matmul(&v).unwrap();
            let right = mla(&q, &k, &v, 1, &KernelPair::identity()).unwrap();
            prop_assert!(left.max_relative_error(&right).unwrap() < 1e-9);
        }
    }
}

//! Single-head CAST layer: projections, surrogate affinities, gated cluster
//! affinity, intra-cluster attention, cluster summaries, and the final mix.
//!
//! The whole pipeline is recorded on a tape, so the output is differentiable
//! to the input and every parameter. Cluster index selection itself is
//! piecewise constant and carries no gradient; gradients flow through the
//! gathered values and the affinity scores.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{self, ClusterAssignment, Mechanism};
use crate::error::{CastError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub use crate::tensor::AttentionFn;

/// Structural hyperparameters of one CAST layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CastConfig {
    pub d: usize,
    pub heads: usize,
    pub n_clusters: usize,
    pub cluster_size: usize,
    pub attention_fn: AttentionFn,
    pub mechanism: Mechanism,
    pub tau: f64,
    pub tau_q: f64,
    pub tau_k: f64,
}

impl CastConfig {
    /// All three temperatures default to sqrt(d/heads), the usual softmax
    /// scaling for the per-head width.
    pub fn new(
        d: usize,
        heads: usize,
        n_clusters: usize,
        cluster_size: usize,
        attention_fn: AttentionFn,
        mechanism: Mechanism,
    ) -> Result<Self> {
        let cfg = CastConfig {
            d,
            heads,
            n_clusters,
            cluster_size,
            attention_fn,
            mechanism,
            tau: ((d / heads.max(1)) as f64).sqrt(),
            tau_q: ((d / heads.max(1)) as f64).sqrt(),
            tau_k: ((d / heads.max(1)) as f64).sqrt(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_clusters == 0 || self.cluster_size == 0 || self.heads == 0 {
            return Err(CastError::Config("d, heads, N_c and kappa must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(CastError::Config(format!("d = {} not divisible by heads = {}", self.d, self.heads)));
        }
        if self.tau <= 0.0 || self.tau_q <= 0.0 || self.tau_k <= 0.0 {
            return Err(CastError::Config("temperatures must be positive".into()));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    /// Padded sequence length: every cluster holds exactly kappa slots.
    pub fn padded_len(&self) -> usize {
        self.n_clusters * self.cluster_size
    }
}

/// Learnable parameters of one CAST layer. In the multi-head case `s` is
/// interpreted head-major: cluster row j holds heads 0..h of width d/h.
#[derive(Debug, Clone)]
pub struct CastParams<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub s: Tensor<T>,
    pub w_phi: Tensor<T>,
    pub b_phi: Tensor<T>,
}

/// Tape handles for one parameter set.
#[derive(Debug, Clone, Copy)]
pub struct CastParamVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub s: Var,
    pub w_phi: Var,
    pub b_phi: Var,
}

impl<T: Scalar> CastParams<T> {
    /// Scaled-uniform init with bound 1/sqrt(d); the gate bias starts at 0.
    pub fn init(config: &CastConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.d as f64).sqrt();
        let mut draw = |shape: &[usize]| -> Tensor<T> {
            let n: usize = shape.iter().product();
            Tensor::from_vec(
                shape.to_vec(),
                (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect(),
            )
        };
        let d = config.d;
        CastParams {
            w_q: draw(&[d, d]),
            w_k: draw(&[d, d]),
            w_v: draw(&[d, d]),
            w_o: draw(&[d, d]),
            s: draw(&[config.n_clusters, d]),
            w_phi: draw(&[d, 1]),
            b_phi: Tensor::scalar(T::ZERO),
        }
    }

    pub fn bind(&self, tape: &Tape<T>, requires_grad: bool) -> CastParamVars {
        CastParamVars {
            w_q: tape.input(self.w_q.clone(), requires_grad),
            w_k: tape.input(self.w_k.clone(), requires_grad),
            w_v: tape.input(self.w_v.clone(), requires_grad),
            w_o: tape.input(self.w_o.clone(), requires_grad),
            s: tape.input(self.s.clone(), requires_grad),
            w_phi: tape.input(self.w_phi.clone(), requires_grad),
            b_phi: tape.input(self.b_phi.clone(), requires_grad),
        }
    }

    /// Canonical (name, tensor) pairs for serialization and grad reports.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("W_q", &self.w_q),
            ("W_k", &self.w_k),
            ("W_v", &self.w_v),
            ("W_o", &self.w_o),
            ("S", &self.s),
            ("W_phi", &self.w_phi),
            ("b_phi", &self.b_phi),
        ]
    }

    pub fn to_f64(&self) -> CastParams<f64> {
        CastParams {
            w_q: self.w_q.to_f64_tensor(),
            w_k: self.w_k.to_f64_tensor(),
            w_v: self.w_v.to_f64_tensor(),
            w_o: self.w_o.to_f64_tensor(),
            s: self.s.to_f64_tensor(),
            w_phi: self.w_phi.to_f64_tensor(),
            b_phi: self.b_phi.to_f64_tensor(),
        }
    }
}

/// Forward intermediates retained for inspection and visualization. For
/// padded inputs these cover the padded length.
#[derive(Debug, Clone)]
pub struct CastIntermediates<T: Scalar> {
    pub a_q: Tensor<T>,
    pub a_k: Tensor<T>,
    pub phi: Tensor<T>,
    pub a_g: Tensor<T>,
    pub assignment: ClusterAssignment,
    pub r_intra: Tensor<T>,
    pub summary_weights: Tensor<T>,
    pub r_inter: Tensor<T>,
    pub a_sum: Tensor<T>,
    pub r: Tensor<T>,
}

pub struct ForwardOut<T: Scalar> {
    /// Output O, shape [N, d] (padding rows removed).
    pub output: Var,
    pub intermediates: CastIntermediates<T>,
}

pub(crate) fn apply_attn<T: Scalar>(
    tape: &Tape<T>,
    v: Var,
    axis: usize,
    f: AttentionFn,
) -> Result<Var> {
    match f {
        AttentionFn::Softmax => tape.softmax(v, axis),
        AttentionFn::Laplace => tape.laplace(v),
    }
}

/// Q = X W_q, K = X W_k, V = X W_v.
pub fn project_qkv<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    p: &CastParamVars,
) -> Result<(Var, Var, Var)> {
    Ok((tape.matmul(x, p.w_q)?, tape.matmul(x, p.w_k)?, tape.matmul(x, p.w_v)?))
}

/// A_q = Q S^T, A_k = K S^T.
pub fn surrogate_affinities<T: Scalar>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    s: Var,
) -> Result<(Var, Var)> {
    let st = tape.transpose_last2(s)?;
    Ok((tape.matmul(q, st)?, tape.matmul(k, st)?))
}

/// phi = X W_phi + b_phi, shape [N, 1].
pub fn gate<T: Scalar>(tape: &Tape<T>, x: Var, w_phi: Var, b_phi: Var) -> Result<Var> {
    tape.add_bias(tape.matmul(x, w_phi)?, b_phi)
}

/// A_g = sigma(phi) * f_2(A_q) + (1 - sigma(phi)) * f_2(A_k).
pub fn combined_affinity<T: Scalar>(
    tape: &Tape<T>,
    a_q: Var,
    a_k: Var,
    phi: Var,
    f: AttentionFn,
) -> Result<Var> {
    let n_c = *tape.shape_of(a_q).last().unwrap();
    let gate_q = tape.broadcast_last(tape.sigmoid(phi)?, n_c)?;
    let gate_k = tape.broadcast_last(tape.sigmoid(tape.neg(phi)?)?, n_c)?;
    let q_side = tape.mul(gate_q, apply_attn(tape, a_q, 1, f)?)?;
    let k_side = tape.mul(gate_k, apply_attn(tape, a_k, 1, f)?)?;
    tape.add(q_side, k_side)
}

/// R_intra = f(Q_g K_g^T / tau) V_g per cluster. The score matrices are
/// computed per cluster inside a fused tape op and never retained, so the
/// only score-sized activation kept alive is the weight tensor itself.
pub fn intra_attention<T: Scalar>(
    tape: &Tape<T>,
    q_g: Var,
    k_g: Var,
    v_g: Var,
    tau: f64,
    f: AttentionFn,
) -> Result<Var> {
    let weights = tape.cluster_attn(q_g, k_g, tau, f)?;
    tape.matmul(weights, v_g)
}

/// Per-cluster summary weights and summaries: weight of member s in cluster j
/// is entry (idx[j][s], j) of (A_k * phi_fn(-phi)) / tau_k, normalized by f
/// over the kappa members; R_inter[j] is the weighted sum of that cluster's
/// value rows.
pub fn cluster_summaries<T: Scalar>(
    tape: &Tape<T>,
    a_k: Var,
    phi: Var,
    assignment: &ClusterAssignment,
    v_g: Var,
    tau_k: f64,
    f: AttentionFn,
) -> Result<(Var, Var)> {
    let n_c = assignment.n_clusters;
    let kappa = assignment.cluster_size;
    let damp = tape.broadcast_last(tape.softplus_plus_one(tape.neg(phi)?)?, n_c)?;
    let weighted = tape.scale(tape.mul(a_k, damp)?, T::from_f64(1.0 / tau_k))?;
    let own = tape.gather_cluster_scores(weighted, assignment.flat_indices(), kappa)?;
    let summary_weights = apply_attn(tape, own, 1, f)?;
    let w_row = tape.reshape(summary_weights, &[n_c, 1, kappa])?;
    let r_inter = tape.reshape(tape.matmul(w_row, v_g)?, &[n_c, tape.shape_of(v_g)[2]])?;
    Ok((summary_weights, r_inter))
}

/// A_sum = f_3((A_q * phi_fn(phi)) / tau_q); each token's output is its own
/// intra-cluster rows weighted by A_sum * M, scattered back with duplicate
/// sum, plus the (A_sum * (1-M))-weighted combination of the other clusters'
/// summaries.
#[allow(clippy::too_many_arguments)]
pub fn mix<T: Scalar>(
    tape: &Tape<T>,
    a_q: Var,
    phi: Var,
    mask: Var,
    mask_complement: Var,
    assignment: &ClusterAssignment,
    r_intra: Var,
    r_inter: Var,
    tau_q: f64,
    f: AttentionFn,
) -> Result<(Var, Var)> {
    let n_c = assignment.n_clusters;
    let kappa = assignment.cluster_size;
    let n = assignment.n_tokens;
    let d = *tape.shape_of(r_intra).last().unwrap();
    let boost = tape.broadcast_last(tape.softplus_plus_one(phi)?, n_c)?;
    let scaled = tape.scale(tape.mul(a_q, boost)?, T::from_f64(1.0 / tau_q))?;
    let a_sum = apply_attn(tape, scaled, 1, f)?;

    let own_coef = tape.gather_cluster_scores(
        tape.mul(a_sum, mask)?,
        assignment.flat_indices(),
        kappa,
    )?;
    let coef = tape.broadcast_last(tape.reshape(own_coef, &[n_c, kappa, 1])?, d)?;
    let intra_rows = tape.reshape(tape.mul(coef, r_intra)?, &[n_c * kappa, d])?;
    let intra_part = tape.scatter_add_rows(intra_rows, assignment.flat_indices(), n)?;

    let inter_mix = tape.mul(a_sum, mask_complement)?;
    let inter_part = tape.matmul(inter_mix, r_inter)?;
    Ok((a_sum, tape.add(intra_part, inter_part)?))
}

/// Zeroes the affinity rows of padding tokens so Top-K never selects them;
/// SA Top-K lets padding participate (its output rows are discarded).
pub(crate) fn cluster_from_affinity<T: Scalar>(
    a_g: &Tensor<T>,
    n_real: usize,
    config: &CastConfig,
) -> Result<ClusterAssignment> {
    let n_pad = a_g.shape()[0];
    match config.mechanism {
        Mechanism::TopK => {
            let masked = if n_real < n_pad {
                let mut data = a_g.data().to_vec();
                for v in data.iter_mut().skip(n_real * config.n_clusters) {
                    *v = T::ZERO;
                }
                Tensor::from_vec(a_g.shape().to_vec(), data)
            } else {
                a_g.clone()
            };
            clustering::topk_cluster(&masked, config.cluster_size)
        }
        Mechanism::SATopK => clustering::sa_topk_cluster(a_g, config.cluster_size),
    }
}

/// Full single-head forward. `x` is [N, d] with N <= N_c * kappa; shorter
/// sequences are zero-padded to N_c * kappa internally and the padding rows
/// are dropped from the output.
pub fn forward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    params: &CastParamVars,
    config: &CastConfig,
) -> Result<ForwardOut<T>> {
    config.validate()?;
    let shape = tape.shape_of(x);
    if shape.len() != 2 || shape[1] != config.d {
        return Err(CastError::Shape(format!("expected [N, {}], got {:?}", config.d, shape)));
    }
    let n_real = shape[0];
    let n_pad = config.padded_len();
    if n_real > n_pad {
        return Err(CastError::Config(format!(
            "N = {} exceeds capacity N_c * kappa = {}",
            n_real, n_pad
        )));
    }
    let x = if n_real < n_pad { tape.pad_rows(x, n_pad)? } else { x };

    let (q, k, v) = project_qkv(tape, x, params)?;
    let (a_q, a_k) = surrogate_affinities(tape, q, k, params.s)?;
    let phi = gate(tape, x, params.w_phi, params.b_phi)?;
    let a_g = combined_affinity(tape, a_q, a_k, phi, config.attention_fn)?;

    let assignment = cluster_from_affinity(&*tape.value(a_g), n_real, config)?;
    let flat = assignment.flat_indices();
    let block = [config.n_clusters, config.cluster_size, config.d];
    let q_g = tape.reshape(tape.gather_rows(q, Rc::clone(&flat))?, &block)?;
    let k_g = tape.reshape(tape.gather_rows(k, Rc::clone(&flat))?, &block)?;
    let v_g = tape.reshape(tape.gather_rows(v, Rc::clone(&flat))?, &block)?;

    let r_intra = intra_attention(tape, q_g, k_g, v_g, config.tau, config.attention_fn)?;
    let (summary_weights, r_inter) =
        cluster_summaries(tape, a_k, phi, &assignment, v_g, config.tau_k, config.attention_fn)?;

    let m = clustering::membership_mask(&assignment);
    let mask = tape.constant(m.to_tensor());
    let mask_c = tape.constant(m.complement_tensor());
    let (a_sum, r) = mix(
        tape,
        a_q,
        phi,
        mask,
        mask_c,
        &assignment,
        r_intra,
        r_inter,
        config.tau_q,
        config.attention_fn,
    )?;

    let o_full = tape.matmul(r, params.w_o)?;
    let output = if n_real < n_pad {
        tape.gather_rows(o_full, Rc::new((0..n_real).collect()))?
    } else {
        o_full
    };

    let intermediates = CastIntermediates {
        a_q: tape.value_clone(a_q),
        a_k: tape.value_clone(a_k),
        phi: tape.value_clone(phi),
        a_g: tape.value_clone(a_g),
        assignment,
        r_intra: tape.value_clone(r_intra),
        summary_weights: tape.value_clone(summary_weights),
        r_inter: tape.value_clone(r_inter),
        a_sum: tape.value_clone(a_sum),
        r: tape.value_clone(r),
    };
    Ok(ForwardOut { output, intermediates })
}

//! Multi-head CAST: per-head affinities summed into one shared cluster
//! assignment, per-head attention, head-major concatenation before the
//! output projection. With one head this reproduces the single-head layer
//! bit for bit.

use std::rc::Rc;

use crate::clustering::ClusterAssignment;
use crate::error::{CastError, Result};
use crate::layer::{
    cluster_from_affinity, cluster_summaries, combined_affinity, gate,
    intra_attention, mix, project_qkv, CastConfig, CastParamVars,
};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Per-head score matrices plus the shared gated affinity.
pub struct MhAffinity {
    /// A_g, shape [N, N_c]; rows sum to 1 under softmax.
    pub a_g: Var,
    /// Per-head A_q and A_k, each [N, N_c].
    pub a_q_heads: Vec<Var>,
    pub a_k_heads: Vec<Var>,
    pub phi: Var,
}

/// Head h occupies feature columns [h * d_h, (h+1) * d_h).
fn head_slice<T: Scalar>(tape: &Tape<T>, v: Var, head: usize, d_h: usize) -> Result<Var> {
    tape.narrow_last(v, head * d_h, d_h)
}

/// Per-head surrogate scores are summed over heads, normalized over the
/// cluster axis, and gated by sigma(phi) as in the single-head layer.
pub fn mh_affinity<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    q: Var,
    k: Var,
    params: &CastParamVars,
    config: &CastConfig,
) -> Result<MhAffinity> {
    let d_h = config.head_width();
    let mut a_q_heads = Vec::with_capacity(config.heads);
    let mut a_k_heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let s_h = head_slice(tape, params.s, h, d_h)?;
        let st = tape.transpose_last2(s_h)?;
        a_q_heads.push(tape.matmul(head_slice(tape, q, h, d_h)?, st)?);
        a_k_heads.push(tape.matmul(head_slice(tape, k, h, d_h)?, st)?);
    }
    let sum_heads = |vars: &[Var]| -> Result<Var> {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = tape.add(acc, v)?;
        }
        Ok(acc)
    };
    let phi = gate(tape, x, params.w_phi, params.b_phi)?;
    let a_g = combined_affinity(
        tape,
        sum_heads(&a_q_heads)?,
        sum_heads(&a_k_heads)?,
        phi,
        config.attention_fn,
    )?;
    Ok(MhAffinity { a_g, a_q_heads, a_k_heads, phi })
}

pub struct MhForwardOut<T: Scalar> {
    /// Output O, shape [N, d] (padding rows removed).
    pub output: Var,
    pub a_g: Tensor<T>,
    pub assignment: ClusterAssignment,
}

/// Full multi-head forward: one shared assignment drives every head; per-head
/// results are concatenated head-major before the output projection.
pub fn mh_forward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    params: &CastParamVars,
    config: &CastConfig,
) -> Result<MhForwardOut<T>> {
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
    let aff = mh_affinity(tape, x, q, k, params, config)?;
    let assignment = cluster_from_affinity(&*tape.value(aff.a_g), n_real, config)?;
    let flat = assignment.flat_indices();

    let d_h = config.head_width();
    let block = [config.n_clusters, config.cluster_size, d_h];
    let m = crate::clustering::membership_mask(&assignment);
    let mask = tape.constant(m.to_tensor());
    let mask_c = tape.constant(m.complement_tensor());

    let mut head_outputs = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let q_g = tape.reshape(
            tape.gather_rows(head_slice(tape, q, h, d_h)?, Rc::clone(&flat))?,
            &block,
        )?;
        let k_g = tape.reshape(
            tape.gather_rows(head_slice(tape, k, h, d_h)?, Rc::clone(&flat))?,
            &block,
        )?;
        let v_g = tape.reshape(
            tape.gather_rows(head_slice(tape, v, h, d_h)?, Rc::clone(&flat))?,
            &block,
        )?;
        let r_intra = intra_attention(tape, q_g, k_g, v_g, config.tau, config.attention_fn)?;
        let (_, r_inter) = cluster_summaries(
            tape,
            aff.a_k_heads[h],
            aff.phi,
            &assignment,
            v_g,
            config.tau_k,
            config.attention_fn,
        )?;
        let (_, r_h) = mix(
            tape,
            aff.a_q_heads[h],
            aff.phi,
            mask,
            mask_c,
            &assignment,
            r_intra,
            r_inter,
            config.tau_q,
            config.attention_fn,
        )?;
        head_outputs.push(r_h);
    }
    let r = if head_outputs.len() == 1 { head_outputs[0] } else { tape.concat_last(&head_outputs)? };
    let o_full = tape.matmul(r, params.w_o)?;
    let output = if n_real < n_pad {
        tape.gather_rows(o_full, Rc::new((0..n_real).collect()))?
    } else {
        o_full
    };
    Ok(MhForwardOut { output, a_g: tape.value_clone(aff.a_g), assignment })
}

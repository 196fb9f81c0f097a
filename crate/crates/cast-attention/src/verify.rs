//! Ground-truth oracles and checkers: dense attention, loop transcriptions of
//! the CAST equations and of both clustering algorithms, finite-difference
//! gradient checking with an assignment-stability guard, and a toy overfit
//! smoke test.
//!
//! Everything here deliberately avoids the vectorized gather/scatter path of
//! the layer so the two routes stay independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{ClusterAssignment, Mechanism};
use crate::error::{CastError, Result};
use crate::layer::{forward, AttentionFn, CastConfig, CastParams};
use crate::multihead::mh_forward;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Scalar, Tensor};

// ---------------------------------------------------------------------------
// dense baseline

/// Standard O(N^2) softmax self-attention followed by the output projection,
/// recorded on a tape so it can serve as the bench baseline with backward.
pub fn dense_attention_oracle<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    params: &crate::layer::CastParamVars,
    tau: f64,
) -> Result<Var> {
    let q = tape.matmul(x, params.w_q)?;
    let k = tape.matmul(x, params.w_k)?;
    let v = tape.matmul(x, params.w_v)?;
    let scaled_q = tape.scale(q, T::from_f64(1.0 / tau))?;
    let scores = tape.matmul(scaled_q, tape.transpose_last2(k)?)?;
    let rank = tape.shape_of(scores).len();
    let weights = tape.softmax(scores, rank - 1)?;
    let out = tape.matmul(weights, v)?;
    tape.matmul(out, params.w_o)
}

/// Triple-loop transcription of dense attention, the independent route the
/// tape-based oracle is checked against.
pub fn dense_attention_loops(x: &Tensor<f64>, params: &CastParams<f64>, tau: f64) -> Tensor<f64> {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let q = matmul_loops(x.data(), params.w_q.data(), n, d, d);
    let k = matmul_loops(x.data(), params.w_k.data(), n, d, d);
    let v = matmul_loops(x.data(), params.w_v.data(), n, d, d);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let mut scores = vec![0.0; n];
        for (j, s) in scores.iter_mut().enumerate() {
            for a in 0..d {
                *s += q[i * d + a] * k[j * d + a];
            }
            *s /= tau;
        }
        let w = softmax_slice(&scores);
        for j in 0..n {
            for a in 0..d {
                out[i * d + a] += w[j] * v[j * d + a];
            }
        }
    }
    let o = matmul_loops(&out, params.w_o.data(), n, d, d);
    Tensor::from_vec(vec![n, d], o)
}

/// Multi-head dense attention by loops: per-head softmax(Q_h K_h^T / tau) V_h,
/// head-major concatenation, output projection.
pub fn dense_mh_attention_loops(
    x: &Tensor<f64>,
    params: &CastParams<f64>,
    heads: usize,
    tau: f64,
) -> Tensor<f64> {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let d_h = d / heads;
    let q = matmul_loops(x.data(), params.w_q.data(), n, d, d);
    let k = matmul_loops(x.data(), params.w_k.data(), n, d, d);
    let v = matmul_loops(x.data(), params.w_v.data(), n, d, d);
    let mut r = vec![0.0; n * d];
    for h in 0..heads {
        let off = h * d_h;
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for (j, s) in scores.iter_mut().enumerate() {
                for a in 0..d_h {
                    *s += q[i * d + off + a] * k[j * d + off + a];
                }
                *s /= tau;
            }
            let w = softmax_slice(&scores);
            for j in 0..n {
                for a in 0..d_h {
                    r[i * d + off + a] += w[j] * v[j * d + off + a];
                }
            }
        }
    }
    let o = matmul_loops(&r, params.w_o.data(), n, d, d);
    Tensor::from_vec(vec![n, d], o)
}

fn matmul_loops(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|&v| v / s).collect()
}

fn attn_slice(x: &[f64], f: AttentionFn) -> Vec<f64> {
    match f {
        AttentionFn::Softmax => softmax_slice(x),
        AttentionFn::Laplace => x
            .iter()
            .map(|&v| {
                let sigma = tensor::laplace_sigma();
                let u = (v - tensor::LAPLACE_MU) / (sigma * std::f64::consts::SQRT_2);
                0.5 * (1.0 + statrs::function::erf::erf(u))
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// literal clustering transcriptions

/// Per cluster, the indices of the kappa largest column entries. Written
/// against a full sort, independent of the optimized selection.
pub fn topk_reference(affinity: &Tensor<f64>, kappa: usize) -> Result<ClusterAssignment> {
    let n = affinity.shape()[0];
    let n_c = affinity.shape()[1];
    if kappa > n {
        return Err(CastError::Config(format!("kappa {} exceeds N {}", kappa, n)));
    }
    let mut indices = Vec::with_capacity(n_c);
    for j in 0..n_c {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            tensor::desc_order(affinity.data()[a * n_c + j], a, affinity.data()[b * n_c + j], b)
        });
        order.truncate(kappa);
        indices.push(order);
    }
    Ok(ClusterAssignment {
        n_tokens: n,
        n_clusters: n_c,
        cluster_size: kappa,
        indices,
        mechanism: Mechanism::TopK,
    })
}

/// Direct transcription of the single-assignment algorithm: per-token cluster
/// preferences sorted descending, tokens visited in descending order of their
/// best score, an assignment mask, and one outer pass per preference rank.
pub fn sa_topk_reference(affinity: &Tensor<f64>, kappa: usize) -> Result<ClusterAssignment> {
    let n = affinity.shape()[0];
    let n_c = affinity.shape()[1];
    if n_c * kappa < n {
        return Err(CastError::Config(format!("capacity {} below N {}", n_c * kappa, n)));
    }
    let a = affinity.data();
    // sort_2: per-token cluster order, highest to lowest
    let mut cluster_order = vec![0usize; n * n_c];
    for t in 0..n {
        let mut idx: Vec<usize> = (0..n_c).collect();
        idx.sort_by(|&p, &q| tensor::desc_order(a[t * n_c + p], p, a[t * n_c + q], q));
        cluster_order[t * n_c..(t + 1) * n_c].copy_from_slice(&idx);
    }
    // sort_1: token order by each token's best score, highest to lowest
    let mut token_order: Vec<usize> = (0..n).collect();
    token_order.sort_by(|&p, &q| {
        let best = |t: usize| a[t * n_c + cluster_order[t * n_c]];
        tensor::desc_order(best(p), p, best(q), q)
    });
    let mut clusters: Vec<Vec<usize>> = vec![Vec::with_capacity(kappa); n_c];
    let mut mask = vec![false; n];
    for i in 0..n_c {
        for &j_token in &token_order {
            let i_cluster = cluster_order[j_token * n_c + i];
            if mask[j_token] || clusters[i_cluster].len() == kappa {
                continue;
            }
            clusters[i_cluster].push(j_token);
            mask[j_token] = true;
        }
    }
    Ok(ClusterAssignment {
        n_tokens: n,
        n_clusters: n_c,
        cluster_size: kappa,
        indices: clusters,
        mechanism: Mechanism::SATopK,
    })
}

// ---------------------------------------------------------------------------
// naive CAST transcription

/// Loop transcription of the full CAST layer (any head count), using the
/// literal clustering transcriptions. Semantically identical to the
/// vectorized forward; used as its equivalence oracle.
pub fn naive_cast_oracle(
    x: &Tensor<f64>,
    params: &CastParams<f64>,
    config: &CastConfig,
) -> Result<Tensor<f64>> {
    let n_real = x.shape()[0];
    let d = config.d;
    let heads = config.heads;
    let d_h = d / heads;
    let n_c = config.n_clusters;
    let kappa = config.cluster_size;
    let n = config.padded_len();
    if n_real > n {
        return Err(CastError::Config("sequence exceeds capacity".into()));
    }
    let mut xd = x.data().to_vec();
    xd.resize(n * d, 0.0);

    let q = matmul_loops(&xd, params.w_q.data(), n, d, d);
    let k = matmul_loops(&xd, params.w_k.data(), n, d, d);
    let v = matmul_loops(&xd, params.w_v.data(), n, d, d);

    // per-head surrogate scores
    let mut a_q = vec![0.0; heads * n * n_c];
    let mut a_k = vec![0.0; heads * n * n_c];
    for h in 0..heads {
        for t in 0..n {
            for j in 0..n_c {
                let mut sq = 0.0;
                let mut sk = 0.0;
                for a in 0..d_h {
                    let col = h * d_h + a;
                    sq += q[t * d + col] * params.s.data()[j * d + col];
                    sk += k[t * d + col] * params.s.data()[j * d + col];
                }
                a_q[(h * n + t) * n_c + j] = sq;
                a_k[(h * n + t) * n_c + j] = sk;
            }
        }
    }
    let mut phi = vec![0.0; n];
    for t in 0..n {
        let mut s = params.b_phi.data()[0];
        for a in 0..d {
            s += xd[t * d + a] * params.w_phi.data()[a];
        }
        phi[t] = s;
    }
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let phi_fn = |v: f64| (1.0 + v.exp()).ln() + 1.0;

    // head-summed gated affinity
    let mut a_g = vec![0.0; n * n_c];
    for t in 0..n {
        let mut sum_q = vec![0.0; n_c];
        let mut sum_k = vec![0.0; n_c];
        for h in 0..heads {
            for j in 0..n_c {
                sum_q[j] += a_q[(h * n + t) * n_c + j];
                sum_k[j] += a_k[(h * n + t) * n_c + j];
            }
        }
        let fq = attn_slice(&sum_q, config.attention_fn);
        let fk = attn_slice(&sum_k, config.attention_fn);
        let g = sigmoid(phi[t]);
        for j in 0..n_c {
            a_g[t * n_c + j] = g * fq[j] + (1.0 - g) * fk[j];
        }
    }

    let assignment = match config.mechanism {
        Mechanism::TopK => {
            let mut masked = a_g.clone();
            for t in n_real..n {
                for j in 0..n_c {
                    masked[t * n_c + j] = 0.0;
                }
            }
            topk_reference(&Tensor::from_vec(vec![n, n_c], masked), kappa)?
        }
        Mechanism::SATopK => {
            sa_topk_reference(&Tensor::from_vec(vec![n, n_c], a_g.clone()), kappa)?
        }
    };

    let mut membership = vec![0.0; n * n_c];
    for (j, cluster) in assignment.indices.iter().enumerate() {
        for &t in cluster {
            membership[t * n_c + j] = 1.0;
        }
    }

    let mut r = vec![0.0; n * d];
    for h in 0..heads {
        let off = h * d_h;
        // intra-cluster attention per cluster, per member
        let mut r_intra = vec![0.0; n_c * kappa * d_h];
        for (j, cluster) in assignment.indices.iter().enumerate() {
            for (s_pos, &ts) in cluster.iter().enumerate() {
                let mut scores = vec![0.0; kappa];
                for (t_pos, &tt) in cluster.iter().enumerate() {
                    let mut s = 0.0;
                    for a in 0..d_h {
                        s += q[ts * d + off + a] * k[tt * d + off + a];
                    }
                    scores[t_pos] = s / config.tau;
                }
                let w = attn_slice(&scores, config.attention_fn);
                for (t_pos, &tt) in cluster.iter().enumerate() {
                    for a in 0..d_h {
                        r_intra[(j * kappa + s_pos) * d_h + a] += w[t_pos] * v[tt * d + off + a];
                    }
                }
            }
        }
        // cluster summaries from the key-side scores and the damped gate
        let mut r_inter = vec![0.0; n_c * d_h];
        for (j, cluster) in assignment.indices.iter().enumerate() {
            let mut weights = vec![0.0; kappa];
            for (s_pos, &ts) in cluster.iter().enumerate() {
                weights[s_pos] =
                    a_k[(h * n + ts) * n_c + j] * phi_fn(-phi[ts]) / config.tau_k;
            }
            let w = attn_slice(&weights, config.attention_fn);
            for (s_pos, &ts) in cluster.iter().enumerate() {
                for a in 0..d_h {
                    r_inter[j * d_h + a] += w[s_pos] * v[ts * d + off + a];
                }
            }
        }
        // mixing weights and the final combination
        for t in 0..n {
            let mut pre = vec![0.0; n_c];
            for (j, p) in pre.iter_mut().enumerate() {
                *p = a_q[(h * n + t) * n_c + j] * phi_fn(phi[t]) / config.tau_q;
            }
            let a_sum = attn_slice(&pre, config.attention_fn);
            for j in 0..n_c {
                if membership[t * n_c + j] == 0.0 {
                    for a in 0..d_h {
                        r[t * d + off + a] += a_sum[j] * r_inter[j * d_h + a];
                    }
                }
            }
        }
        // intra contributions scattered back with duplicate sum
        for (j, cluster) in assignment.indices.iter().enumerate() {
            for (s_pos, &ts) in cluster.iter().enumerate() {
                let mut pre = vec![0.0; n_c];
                for (jj, p) in pre.iter_mut().enumerate() {
                    *p = a_q[(h * n + ts) * n_c + jj] * phi_fn(phi[ts]) / config.tau_q;
                }
                let a_sum = attn_slice(&pre, config.attention_fn);
                for a in 0..d_h {
                    r[ts * d + off + a] += a_sum[j] * r_intra[(j * kappa + s_pos) * d_h + a];
                }
            }
        }
    }
    let o = matmul_loops(&r, params.w_o.data(), n, d, d);
    Ok(Tensor::from_vec(vec![n, d], o).reshaped(&[n, d])?.let_first_rows(n_real, d))
}

// ---------------------------------------------------------------------------
// gradient checking

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub step: f64,
    pub dtype: &'static str,
    pub stable: bool,
}

/// Scalar loss used for gradient checks: sum of O weighted elementwise by a
/// fixed random matrix, so every output coordinate contributes.
fn layer_loss(
    x: &Tensor<f64>,
    params: &CastParams<f64>,
    config: &CastConfig,
    loss_w: &Tensor<f64>,
    requires_grad: bool,
) -> Result<(Tape<f64>, Var, Var, crate::layer::CastParamVars, Vec<usize>)> {
    let tape = Tape::<f64>::new();
    let xv = tape.input(x.clone(), requires_grad);
    let pv = params.bind(&tape, requires_grad);
    let (out, fingerprint) = if config.heads == 1 {
        let fwd = forward(&tape, xv, &pv, config)?;
        (fwd.output, fwd.intermediates.assignment.fingerprint())
    } else {
        let fwd = mh_forward(&tape, xv, &pv, config)?;
        (fwd.output, fwd.assignment.fingerprint())
    };
    let w = tape.constant(loss_w.clone());
    let loss = tape.sum_all(tape.mul(out, w)?)?;
    Ok((tape, loss, xv, pv, fingerprint))
}

/// Central-difference gradient check of the full layer at a stable-assignment
/// base point. Coordinates are subsampled (at least 64 per tensor, seeded).
/// Probes that flip the cluster assignment mark the report unstable.
pub fn fd_gradcheck_layer(
    config: &CastConfig,
    seed: u64,
    step: f64,
    corrupt_adjoint: bool,
) -> Result<Vec<GradCheckReport>> {
    let n = config.padded_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_vec(
        vec![n, config.d],
        (0..n * config.d).map(|_| rng.gen::<f64>() - 0.5).collect(),
    );
    let params: CastParams<f64> = CastParams::init(config, seed.wrapping_add(1));
    let loss_w = Tensor::from_vec(
        vec![n, config.d],
        (0..n * config.d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
    );

    let (tape, loss, xv, pv, base_fp) = layer_loss(&x, &params, config, &loss_w, true)?;
    tape.set_corrupt_matmul_adjoint(corrupt_adjoint);
    let grads = tape.backward(loss, Tensor::scalar(1.0))?;

    let eval = |name: &str, coord: usize, delta: f64| -> Result<(f64, Vec<usize>)> {
        let mut x2 = x.clone();
        let mut p2 = params.clone();
        let target: &mut Tensor<f64> = match name {
            "X" => &mut x2,
            "W_q" => &mut p2.w_q,
            "W_k" => &mut p2.w_k,
            "W_v" => &mut p2.w_v,
            "W_o" => &mut p2.w_o,
            "S" => &mut p2.s,
            "W_phi" => &mut p2.w_phi,
            "b_phi" => &mut p2.b_phi,
            _ => unreachable!(),
        };
        let mut data = target.data().to_vec();
        data[coord] += delta;
        *target = Tensor::from_vec(target.shape().to_vec(), data);
        let (t2, l2, _, _, fp) = layer_loss(&x2, &p2, config, &loss_w, false)?;
        let val = t2.value(l2).data()[0];
        Ok((val, fp))
    };

    let tensors: Vec<(&str, &Tensor<f64>, Var)> = vec![
        ("X", &x, xv),
        ("W_q", &params.w_q, pv.w_q),
        ("W_k", &params.w_k, pv.w_k),
        ("W_v", &params.w_v, pv.w_v),
        ("W_o", &params.w_o, pv.w_o),
        ("S", &params.s, pv.s),
        ("W_phi", &params.w_phi, pv.w_phi),
        ("b_phi", &params.b_phi, pv.b_phi),
    ];
    let mut reports = Vec::with_capacity(tensors.len());
    for (name, tensor, var) in tensors {
        let analytic = grads.expect(var);
        let len = tensor.len();
        let n_probe = len.min(64);
        let mut coords: Vec<usize> = (0..len).collect();
        // seeded subsample
        for i in 0..n_probe {
            let j = rng.gen_range(i..len);
            coords.swap(i, j);
        }
        let mut max_rel = 0.0f64;
        let mut stable = true;
        for &c in &coords[..n_probe] {
            let (f_plus, fp_plus) = eval(name, c, step)?;
            let (f_minus, fp_minus) = eval(name, c, -step)?;
            if fp_plus != base_fp || fp_minus != base_fp {
                stable = false;
                continue;
            }
            let fd = (f_plus - f_minus) / (2.0 * step);
            let ad = analytic.data()[c];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        reports.push(GradCheckReport {
            name: name.to_string(),
            max_rel_err: max_rel,
            step,
            dtype: "f64",
            stable,
        });
    }
    Ok(reports)
}

/// Retries [`fd_gradcheck_layer`] at fresh base points until every probe kept
/// the cluster assignment stable, up to 10 attempts.
pub fn fd_gradcheck_stable(
    config: &CastConfig,
    seed: u64,
    step: f64,
    corrupt_adjoint: bool,
) -> Result<Vec<GradCheckReport>> {
    for attempt in 0..10 {
        let reports = fd_gradcheck_layer(config, seed.wrapping_add(attempt * 1000), step, corrupt_adjoint)?;
        if reports.iter().all(|r| r.stable) {
            return Ok(reports);
        }
    }
    Err(CastError::UnstableAssignment(
        "no stable base point found in 10 attempts".into(),
    ))
}

/// One JSON object per checked tensor.
pub fn reports_to_json_lines(reports: &[GradCheckReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serialization"))
        .collect::<Vec<_>>()
        .join("\n")
}

// ---------------------------------------------------------------------------
// toy overfit

/// Synthetic motif-detection dataset: label 1 sequences contain motif A,
/// label 0 sequences contain motif B, at a random position over background
/// noise.
pub struct ToyDataset {
    pub sequences: Vec<Tensor<f32>>,
    pub labels: Vec<f32>,
}

pub const TOY_SEQ_LEN: usize = 64;
pub const TOY_WIDTH: usize = 16;
const TOY_MOTIF_LEN: usize = 3;

pub fn toy_dataset(seed: u64, samples: usize) -> ToyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Both motifs are (u+w, u-w, u) so their token sums match exactly; the
    // classes differ only in the orientation of w (v for A, an orthogonal v'
    // for B). Linear readouts of the pooled input cannot separate them, so
    // the model has to learn content-dependent mixing.
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let raw: Vec<f64> = (0..TOY_WIDTH).map(|_| rng.gen::<f64>() - 0.5).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        raw.iter().map(|x| x / norm).collect()
    };
    let u = unit(&mut rng);
    let v = unit(&mut rng);
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    let v: Vec<f64> = v.iter().zip(&u).map(|(a, b)| a - dot * b).collect();
    let mut v_perp = unit(&mut rng);
    for basis in [&u, &v] {
        let dot: f64 = basis.iter().zip(&v_perp).map(|(a, b)| a * b).sum();
        let norm: f64 = basis.iter().map(|x| x * x).sum();
        for (p, b) in v_perp.iter_mut().zip(basis) {
            *p -= dot / norm * b;
        }
    }
    let rows = |w: &[f64]| -> Vec<f32> {
        let mut out = Vec::with_capacity(TOY_MOTIF_LEN * TOY_WIDTH);
        for (su, sw) in [(1.2, 1.5), (1.2, -1.5), (1.2, 0.0)] {
            out.extend(u.iter().zip(w).map(|(a, b)| (su * a + sw * b) as f32));
        }
        out
    };
    let motif_a = rows(&v);
    let motif_b = rows(&v_perp);
    let mut sequences = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = (i % 2) as f32;
        let chosen = if label > 0.5 { &motif_a } else { &motif_b };
        let mut data: Vec<f32> = (0..TOY_SEQ_LEN * TOY_WIDTH)
            .map(|_| (rng.gen::<f64>() * 0.4 - 0.2) as f32)
            .collect();
        let pos = rng.gen_range(0..TOY_SEQ_LEN - TOY_MOTIF_LEN);
        data[pos * TOY_WIDTH..(pos + TOY_MOTIF_LEN) * TOY_WIDTH].copy_from_slice(chosen);
        sequences.push(Tensor::from_vec(vec![TOY_SEQ_LEN, TOY_WIDTH], data));
        labels.push(label);
    }
    ToyDataset { sequences, labels }
}

struct ToyModel {
    params: CastParams<f32>,
    head_w: Tensor<f32>,
    head_b: Tensor<f32>,
}

impl ToyModel {
    fn init(config: &CastConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(77));
        let bound = 1.0 / (TOY_WIDTH as f64).sqrt();
        ToyModel {
            params: CastParams::init(config, seed),
            head_w: Tensor::from_vec(
                vec![TOY_WIDTH, 1],
                (0..TOY_WIDTH).map(|_| rng.gen_range(-bound..bound) as f32).collect(),
            ),
            head_b: Tensor::scalar(0.0f32),
        }
    }

    /// Logit for one sequence; returns the tape plus handles when grads are
    /// wanted.
    fn logit(
        &self,
        x: &Tensor<f32>,
        config: &CastConfig,
        requires_grad: bool,
    ) -> Result<(Tape<f32>, Var, crate::layer::CastParamVars, Var, Var)> {
        let tape = Tape::<f32>::new();
        let xv = tape.input(x.clone(), requires_grad);
        let pv = self.params.bind(&tape, requires_grad);
        let fwd = forward(&tape, xv, &pv, config)?;
        let pooled = tape.scale(tape.sum_axis(fwd.output, 0)?, 1.0 / TOY_SEQ_LEN as f32)?;
        let hw = tape.input(self.head_w.clone(), requires_grad);
        let hb = tape.input(self.head_b.clone(), requires_grad);
        let row = tape.reshape(pooled, &[1, TOY_WIDTH])?;
        let z = tape.add_bias(tape.matmul(row, hw)?, hb)?;
        let logit = tape.reshape(z, &[1])?;
        Ok((tape, logit, pv, hw, hb))
    }

    fn accuracy(&self, data: &ToyDataset, config: &CastConfig) -> Result<f64> {
        let mut correct = 0usize;
        for (x, &y) in data.sequences.iter().zip(data.labels.iter()) {
            let (tape, logit, _, _, _) = self.logit(x, config, false)?;
            let z = tape.value(logit).data()[0];
            if (z > 0.0) == (y > 0.5) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.sequences.len() as f64)
    }
}

fn sgd_step(t: &Tensor<f32>, g: &Tensor<f32>, lr: f32) -> Tensor<f32> {
    tensor::zip_map(t, g, |a, b| a - lr * b).expect("sgd shapes")
}

/// Trains the 2-layer toy model (CAST + mean pool + linear head) by plain
/// minibatch gradient descent and returns the final train accuracy.
pub fn toy_overfit(mechanism: Mechanism, seed: u64, lr: f32, max_steps: usize) -> Result<f64> {
    let config = CastConfig::new(TOY_WIDTH, 1, 4, 16, AttentionFn::Softmax, mechanism)?;
    let data = toy_dataset(seed, 256);
    let mut model = ToyModel::init(&config, seed.wrapping_add(1));
    let batch = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    for step in 0..max_steps {
        let mut acc: Option<Vec<(String, Tensor<f32>)>> = None;
        for _ in 0..batch {
            let i = rng.gen_range(0..data.sequences.len());
            let (tape, logit, pv, hw, hb) = model.logit(&data.sequences[i], &config, true)?;
            let z = tape.value(logit).data()[0];
            if !z.is_finite() {
                return Err(CastError::Diverged(format!("non-finite logit at step {}", step)));
            }
            let dz = tensor::sigmoid_scalar(z) - data.labels[i];
            let grads = tape.backward(logit, Tensor::from_vec(vec![1], vec![dz / batch as f32]))?;
            let named: Vec<(String, Tensor<f32>)> = [
                ("W_q", pv.w_q),
                ("W_k", pv.w_k),
                ("W_v", pv.w_v),
                ("W_o", pv.w_o),
                ("S", pv.s),
                ("W_phi", pv.w_phi),
                ("b_phi", pv.b_phi),
                ("head_w", hw),
                ("head_b", hb),
            ]
            .into_iter()
            .map(|(n, v)| (n.to_string(), grads.expect(v).clone()))
            .collect();
            acc = Some(match acc {
                None => named,
                Some(prev) => prev
                    .into_iter()
                    .zip(named)
                    .map(|((n, a), (_, b))| {
                        (n, tensor::zip_map(&a, &b, |p, q| p + q).expect("grad shapes"))
                    })
                    .collect(),
            });
        }
        let acc = acc.expect("nonzero batch");
        for (name, g) in &acc {
            match name.as_str() {
                "W_q" => model.params.w_q = sgd_step(&model.params.w_q, g, lr),
                "W_k" => model.params.w_k = sgd_step(&model.params.w_k, g, lr),
                "W_v" => model.params.w_v = sgd_step(&model.params.w_v, g, lr),
                "W_o" => model.params.w_o = sgd_step(&model.params.w_o, g, lr),
                "S" => model.params.s = sgd_step(&model.params.s, g, lr),
                "W_phi" => model.params.w_phi = sgd_step(&model.params.w_phi, g, lr),
                "b_phi" => model.params.b_phi = sgd_step(&model.params.b_phi, g, lr),
                "head_w" => model.head_w = sgd_step(&model.head_w, g, lr),
                "head_b" => model.head_b = sgd_step(&model.head_b, g, lr),
                _ => unreachable!(),
            }
        }
        if (step + 1) % 25 == 0 && model.accuracy(&data, &config)? >= 0.95 {
            break;
        }
    }
    model.accuracy(&data, &config)
}

// small extension used by the naive oracle
trait FirstRows {
    fn let_first_rows(self, rows: usize, width: usize) -> Tensor<f64>;
}

impl FirstRows for Tensor<f64> {
    fn let_first_rows(self, rows: usize, width: usize) -> Tensor<f64> {
        if self.shape()[0] == rows {
            return self;
        }
        Tensor::from_vec(vec![rows, width], self.data()[..rows * width].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::CastParamVars;

    fn rand_x(seed: u64, n: usize, d: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(vec![n, d], (0..n * d).map(|_| rng.gen::<f64>() - 0.5).collect())
    }

    fn bind(tape: &Tape<f64>, p: &CastParams<f64>) -> CastParamVars {
        p.bind(tape, false)
    }

    #[test]
    fn dense_oracle_matches_triple_loop() {
        let config = CastConfig::new(8, 1, 1, 16, AttentionFn::Softmax, Mechanism::TopK).unwrap();
        let params: CastParams<f64> = CastParams::init(&config, 50);
        let x = rand_x(51, 16, 8);
        let tape = Tape::<f64>::new();
        let pv = bind(&tape, &params);
        let xv = tape.input(x.clone(), false);
        let o = dense_attention_oracle(&tape, xv, &pv, config.tau).unwrap();
        let loops = dense_attention_loops(&x, &params, config.tau);
        assert!(tape.value(o).max_abs_diff(&loops) < 1e-6);
    }

    #[test]
    fn dense_oracle_single_token_and_uniform_keys() {
        let config = CastConfig::new(4, 1, 1, 1, AttentionFn::Softmax, Mechanism::TopK).unwrap();
        let params: CastParams<f64> = CastParams::init(&config, 52);
        // single token: output is that token's value row through W_o
        let x = rand_x(53, 1, 4);
        let tape = Tape::<f64>::new();
        let pv = bind(&tape, &params);
        let xv = tape.input(x.clone(), false);
        let o = dense_attention_oracle(&tape, xv, &pv, 2.0).unwrap();
        let v = tensor::matmul(&x, &params.w_v).unwrap();
        let expect = tensor::matmul(&v, &params.w_o).unwrap();
        assert!(tape.value(o).max_abs_diff(&expect) < 1e-12);

        // all keys equal (W_k = 0): attention averages all values
        let mut p2 = params.clone();
        p2.w_k = Tensor::<f64>::zeros(&[4, 4]);
        let x2 = rand_x(54, 6, 4);
        let tape2 = Tape::<f64>::new();
        let pv2 = bind(&tape2, &p2);
        let xv2 = tape2.input(x2.clone(), false);
        let o2 = dense_attention_oracle(&tape2, xv2, &pv2, 2.0).unwrap();
        let v2 = tensor::matmul(&x2, &p2.w_v).unwrap();
        let mut mean = vec![0.0; 4];
        for t in 0..6 {
            for a in 0..4 {
                mean[a] += v2.data()[t * 4 + a] / 6.0;
            }
        }
        let mean_o =
            tensor::matmul(&Tensor::from_vec(vec![1, 4], mean), &p2.w_o).unwrap();
        for t in 0..6 {
            for a in 0..4 {
                assert!((tape2.value(o2).data()[t * 4 + a] - mean_o.data()[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sa_reference_matches_optimized_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..100 {
            let a = Tensor::from_vec(vec![64, 8], (0..512).map(|_| rng.gen::<f64>()).collect());
            let reference = sa_topk_reference(&a, 8).unwrap();
            let optimized = crate::clustering::sa_topk_cluster(&a, 8).unwrap();
            assert_eq!(reference.indices, optimized.indices);
        }
    }

    #[test]
    fn sa_reference_hand_trace() {
        let a = Tensor::from_vec(vec![4, 2], vec![0.9, 0.8, 0.85, 0.1, 0.7, 0.6, 0.2, 0.3]);
        let c = sa_topk_reference(&a, 2).unwrap();
        assert_eq!(c.indices[0], vec![0, 1]);
        assert_eq!(c.indices[1], vec![3, 2]);
    }

    #[test]
    fn naive_oracle_zero_values_zero_output() {
        let config = CastConfig::new(8, 1, 2, 4, AttentionFn::Softmax, Mechanism::SATopK).unwrap();
        let mut params: CastParams<f64> = CastParams::init(&config, 61);
        params.w_v = Tensor::<f64>::zeros(&[8, 8]);
        let o = naive_cast_oracle(&rand_x(62, 8, 8), &params, &config).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn naive_oracle_matches_vectorized_forward() {
        for mech in [Mechanism::TopK, Mechanism::SATopK] {
            for heads in [1usize, 2] {
                let config =
                    CastConfig::new(8, heads, 2, 8, AttentionFn::Softmax, mech).unwrap();
                let params: CastParams<f64> = CastParams::init(&config, 70 + heads as u64);
                let x = rand_x(71, 16, 8);
                let oracle = naive_cast_oracle(&x, &params, &config).unwrap();
                let tape = Tape::<f64>::new();
                let pv = bind(&tape, &params);
                let xv = tape.input(x.clone(), false);
                let out = if heads == 1 {
                    forward(&tape, xv, &pv, &config).unwrap().output
                } else {
                    mh_forward(&tape, xv, &pv, &config).unwrap().output
                };
                let diff = tape.value(out).max_abs_diff(&oracle);
                assert!(diff < 1e-10, "mech {:?} heads {} diff {}", mech, heads, diff);
            }
        }
    }

    #[test]
    fn naive_oracle_laplace_matches_vectorized_forward() {
        let config = CastConfig::new(8, 1, 2, 8, AttentionFn::Laplace, Mechanism::SATopK).unwrap();
        let params: CastParams<f64> = CastParams::init(&config, 80);
        let x = rand_x(81, 16, 8);
        let oracle = naive_cast_oracle(&x, &params, &config).unwrap();
        let tape = Tape::<f64>::new();
        let pv = bind(&tape, &params);
        let xv = tape.input(x.clone(), false);
        let out = forward(&tape, xv, &pv, &config).unwrap().output;
        assert!(tape.value(out).max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn gradcheck_detects_corrupted_adjoint() {
        let config = CastConfig::new(8, 1, 2, 4, AttentionFn::Softmax, Mechanism::SATopK).unwrap();
        let reports = fd_gradcheck_stable(&config, 90, 1e-5, true).unwrap();
        let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        assert!(worst > 1e-2, "corrupted adjoint slipped through: {}", worst);
    }

    #[test]
    fn gradcheck_passes_on_clean_layer() {
        let config = CastConfig::new(8, 1, 2, 4, AttentionFn::Softmax, Mechanism::SATopK).unwrap();
        let reports = fd_gradcheck_stable(&config, 91, 1e-5, false).unwrap();
        for r in &reports {
            assert!(r.max_rel_err <= 1e-4, "{}: {}", r.name, r.max_rel_err);
            assert!(r.stable);
        }
        let json = reports_to_json_lines(&reports);
        assert_eq!(json.lines().count(), 8);
        assert!(json.contains("\"name\":\"W_phi\""));
    }

    #[test]
    fn toy_zero_learning_rate_stays_at_chance() {
        let acc = toy_overfit(Mechanism::SATopK, 7, 0.0, 10).unwrap();
        assert!((acc - 0.5).abs() < 0.15, "accuracy {}", acc);
    }
}

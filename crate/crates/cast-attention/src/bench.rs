//! Benchmark harness: wall-clock and peak-live-element measurements of CAST
//! against the dense baseline, plus sweeps over sequence length and cluster
//! size, CSV/JSON reporting, and the analytic peak-memory model the meter is
//! checked against.
//!
//! The `Forward` phase runs a tape-free inference evaluation that frees
//! intermediates eagerly; `ForwardBackward` records the full tape (training
//! memory profile) and runs backward with a ones adjoint. Timed regions are
//! single-threaded; the process-global meter makes concurrent benchmarks
//! unsupported.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{ClusterAssignment, Mechanism};
use crate::error::{CastError, Result};
use crate::layer::{cluster_from_affinity, forward, AttentionFn, CastConfig, CastParams};
use crate::meter;
use crate::tape::Tape;
use crate::tensor::{self, Tensor};
use crate::verify::dense_attention_oracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BenchMechanism {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "topk")]
    TopK,
    #[serde(rename = "satopk")]
    SATopK,
}

impl fmt::Display for BenchMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchMechanism::Dense => write!(f, "dense"),
            BenchMechanism::TopK => write!(f, "topk"),
            BenchMechanism::SATopK => write!(f, "satopk"),
        }
    }
}

impl FromStr for BenchMechanism {
    type Err = CastError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(BenchMechanism::Dense),
            "topk" => Ok(BenchMechanism::TopK),
            "satopk" => Ok(BenchMechanism::SATopK),
            other => Err(CastError::Format(format!("unknown mechanism {:?}", other))),
        }
    }
}

impl BenchMechanism {
    pub fn clustering(self) -> Option<Mechanism> {
        match self {
            BenchMechanism::Dense => None,
            BenchMechanism::TopK => Some(Mechanism::TopK),
            BenchMechanism::SATopK => Some(Mechanism::SATopK),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Phase {
    #[serde(rename = "forward")]
    Forward,
    #[serde(rename = "forward+backward")]
    ForwardBackward,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Forward => write!(f, "forward"),
            Phase::ForwardBackward => write!(f, "forward+backward"),
        }
    }
}

impl FromStr for Phase {
    type Err = CastError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Phase::Forward),
            "forward+backward" => Ok(Phase::ForwardBackward),
            other => Err(CastError::Format(format!("unknown phase {:?}", other))),
        }
    }
}

/// One measurement row. `n_c` and `kappa` are zero for dense records.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchRecord {
    pub mechanism: BenchMechanism,
    pub phase: Phase,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub h: usize,
    #[serde(rename = "Nc")]
    pub n_c: usize,
    pub kappa: usize,
    pub reps: usize,
    pub median_seconds: f64,
    pub peak_elements: u64,
}

pub const CSV_HEADER: &str = "mechanism,phase,N,d,h,Nc,kappa,reps,median_seconds,peak_elements";
pub const DEFAULT_REPS: usize = 5;
pub const DEFAULT_WARMUPS: usize = 2;

// ---------------------------------------------------------------------------
// workloads

fn workload_x(seed: u64, n: usize, d: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(vec![n, d], (0..n * d).map(|_| rng.gen::<f32>() - 0.5).collect())
}

fn row_attn(row: &[f32], f: AttentionFn) -> Vec<f32> {
    let t = Tensor::from_vec(vec![row.len()], row.to_vec());
    tensor::attn(&t, 0, f).expect("row attention").data().to_vec()
}

/// Dense softmax attention without a tape; intermediates freed as soon as
/// consumed (the softmax moment, scores plus weights, dominates the peak).
pub fn dense_infer(x: &Tensor<f32>, p: &CastParams<f32>, tau: f64) -> Result<Tensor<f32>> {
    let v = tensor::matmul(x, &p.w_v)?;
    let weights = {
        let scores = {
            let inv = (1.0 / tau) as f32;
            let q = tensor::matmul(x, &p.w_q)?.map(|t| t * inv);
            let kt = tensor::transpose_last2(&tensor::matmul(x, &p.w_k)?)?;
            tensor::matmul(&q, &kt)?
        };
        tensor::softmax(&scores, 1)?
    };
    let out = tensor::matmul(&weights, &v)?;
    drop(weights);
    drop(v);
    tensor::matmul(&out, &p.w_o)
}

/// Single-head CAST without a tape. The intra-cluster score matrix is
/// streamed one row at a time, so the largest live tensors are the [N, N_c]
/// affinity matrices and a handful of [N, d] projections.
pub fn cast_infer(
    x: &Tensor<f32>,
    p: &CastParams<f32>,
    config: &CastConfig,
) -> Result<(Tensor<f32>, ClusterAssignment)> {
    let n_real = x.shape()[0];
    let d = config.d;
    let n_c = config.n_clusters;
    let kappa = config.cluster_size;
    let n = config.padded_len();
    let f = config.attention_fn;
    if n_real > n {
        return Err(CastError::Config(format!("N = {} exceeds capacity {}", n_real, n)));
    }
    let xp = if n_real < n {
        let mut data = x.data().to_vec();
        data.resize(n * d, 0.0);
        Tensor::from_vec(vec![n, d], data)
    } else {
        x.clone()
    };
    let q = tensor::matmul(&xp, &p.w_q)?;
    let k = tensor::matmul(&xp, &p.w_k)?;
    let v = tensor::matmul(&xp, &p.w_v)?;
    let bias = p.b_phi.data()[0];
    let phi = tensor::matmul(&xp, &p.w_phi)?.map(|t| t + bias);
    drop(xp);
    let (a_q, a_k) = {
        let st = tensor::transpose_last2(&p.s)?;
        (tensor::matmul(&q, &st)?, tensor::matmul(&k, &st)?)
    };

    // A_g built row by row so only one extra [N, N_c] tensor is live.
    let assignment = {
        let mut ag = vec![0.0f32; n * n_c];
        for t in 0..n {
            let g = tensor::sigmoid_scalar(phi.data()[t]);
            let fq = row_attn(&a_q.data()[t * n_c..(t + 1) * n_c], f);
            let fk = row_attn(&a_k.data()[t * n_c..(t + 1) * n_c], f);
            for j in 0..n_c {
                ag[t * n_c + j] = g * fq[j] + (1.0 - g) * fk[j];
            }
        }
        let a_g = Tensor::from_vec(vec![n, n_c], ag);
        cluster_from_affinity(&a_g, n_real, config)?
    };
    let flat = assignment.flat_indices();

    let q_g = tensor::gather_rows(&q, &flat)?;
    drop(q);
    let k_g = tensor::gather_rows(&k, &flat)?;
    drop(k);
    let v_g = tensor::gather_rows(&v, &flat)?;
    drop(v);

    // streamed intra attention: one kappa-long score row at a time
    let inv_tau = (1.0 / config.tau) as f32;
    let mut intra = vec![0.0f32; n_c * kappa * d];
    for j in 0..n_c {
        let qd = &q_g.data()[j * kappa * d..(j + 1) * kappa * d];
        let kd = &k_g.data()[j * kappa * d..(j + 1) * kappa * d];
        let vd = &v_g.data()[j * kappa * d..(j + 1) * kappa * d];
        let mut row = vec![0.0f32; kappa];
        for a in 0..kappa {
            for (b, r) in row.iter_mut().enumerate() {
                let mut s = 0.0f32;
                for c in 0..d {
                    s += qd[a * d + c] * kd[b * d + c];
                }
                *r = s * inv_tau;
            }
            let w = row_attn(&row, f);
            for b in 0..kappa {
                for c in 0..d {
                    intra[(j * kappa + a) * d + c] += w[b] * vd[b * d + c];
                }
            }
        }
    }
    drop(q_g);
    drop(k_g);
    let r_intra = Tensor::from_vec(vec![n_c * kappa, d], intra);

    // cluster summaries
    let inv_tau_k = (1.0 / config.tau_k) as f32;
    let mut inter = vec![0.0f32; n_c * d];
    for (j, cluster) in assignment.indices.iter().enumerate() {
        let vd = &v_g.data()[j * kappa * d..(j + 1) * kappa * d];
        let mut wrow = vec![0.0f32; kappa];
        for (s, &t) in cluster.iter().enumerate() {
            wrow[s] =
                a_k.data()[t * n_c + j] * (tensor::softplus_scalar(-phi.data()[t]) + 1.0) * inv_tau_k;
        }
        let w = row_attn(&wrow, f);
        for s in 0..kappa {
            for c in 0..d {
                inter[j * d + c] += w[s] * vd[s * d + c];
            }
        }
    }
    drop(v_g);
    drop(a_k);
    let r_inter = Tensor::from_vec(vec![n_c, d], inter);

    // mixing: A_sum rows recomputed on the fly, never fully materialized
    let inv_tau_q = (1.0 / config.tau_q) as f32;
    let a_sum_row = |t: usize| -> Vec<f32> {
        let boost = tensor::softplus_scalar(phi.data()[t]) + 1.0;
        let pre: Vec<f32> =
            (0..n_c).map(|j| a_q.data()[t * n_c + j] * boost * inv_tau_q).collect();
        row_attn(&pre, f)
    };
    let mut member = vec![false; n * n_c];
    for (j, cluster) in assignment.indices.iter().enumerate() {
        for &t in cluster {
            member[t * n_c + j] = true;
        }
    }
    let mut r = vec![0.0f32; n * d];
    for t in 0..n {
        let a_sum = a_sum_row(t);
        for j in 0..n_c {
            if !member[t * n_c + j] {
                for c in 0..d {
                    r[t * d + c] += a_sum[j] * r_inter.data()[j * d + c];
                }
            }
        }
    }
    for (j, cluster) in assignment.indices.iter().enumerate() {
        for (s, &t) in cluster.iter().enumerate() {
            let a_sum = a_sum_row(t);
            for c in 0..d {
                r[t * d + c] += a_sum[j] * r_intra.data()[(j * kappa + s) * d + c];
            }
        }
    }
    drop(r_intra);
    drop(r_inter);
    drop(a_q);
    drop(phi);
    let r = Tensor::from_vec(vec![n, d], r);
    let out = tensor::matmul(&r, &p.w_o)?;
    drop(r);
    let out = if n_real < n {
        tensor::gather_rows(&out, &(0..n_real).collect::<Vec<_>>())?
    } else {
        out
    };
    Ok((out, assignment))
}

fn run_once(
    mech: BenchMechanism,
    phase: Phase,
    config: &CastConfig,
    x: &Tensor<f32>,
    params: &CastParams<f32>,
) -> Result<()> {
    match (mech, phase) {
        (BenchMechanism::Dense, Phase::Forward) => {
            dense_infer(x, params, config.tau)?;
        }
        (BenchMechanism::Dense, Phase::ForwardBackward) => {
            let tape = Tape::<f32>::new();
            let pv = params.bind(&tape, true);
            let xv = tape.input(x.clone(), true);
            let out = dense_attention_oracle(&tape, xv, &pv, config.tau)?;
            let ones = tape.value(out).map(|_| 1.0f32);
            tape.backward(out, ones)?;
        }
        (_, Phase::Forward) => {
            cast_infer(x, params, config)?;
        }
        (_, Phase::ForwardBackward) => {
            let tape = Tape::<f32>::new();
            let pv = params.bind(&tape, true);
            let xv = tape.input(x.clone(), true);
            let out = forward(&tape, xv, &pv, config)?;
            let ones = tape.value(out.output).map(|_| 1.0f32);
            tape.backward(out.output, ones)?;
        }
    }
    Ok(())
}

fn median(times: &mut [f64]) -> f64 {
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

/// Times one configuration: `warmups` unmeasured runs, then `reps` timed runs
/// with the meter reset before each; reports the median time and the peak.
pub fn time_config(
    mech: BenchMechanism,
    phase: Phase,
    config: &CastConfig,
    n: usize,
    reps: usize,
    warmups: usize,
    seed: u64,
) -> Result<BenchRecord> {
    if reps == 0 {
        return Err(CastError::Config("reps must be positive".into()));
    }
    if mech != BenchMechanism::Dense && n > config.padded_len() {
        return Err(CastError::Config(format!(
            "N = {} exceeds N_c * kappa = {}",
            n,
            config.padded_len()
        )));
    }
    let x = workload_x(seed, n, config.d);
    let params: CastParams<f32> = CastParams::init(config, seed.wrapping_add(1));
    for _ in 0..warmups {
        run_once(mech, phase, config, &x, &params)?;
    }
    let mut times = Vec::with_capacity(reps);
    let mut peak = 0usize;
    for _ in 0..reps {
        meter::reset_peak();
        let t0 = Instant::now();
        run_once(mech, phase, config, &x, &params)?;
        times.push(t0.elapsed().as_secs_f64());
        peak = peak.max(meter::peak_live_elements());
    }
    let (n_c, kappa) = match mech {
        BenchMechanism::Dense => (0, 0),
        _ => (config.n_clusters, config.cluster_size),
    };
    Ok(BenchRecord {
        mechanism: mech,
        phase,
        n,
        d: config.d,
        h: config.heads,
        n_c,
        kappa,
        reps,
        median_seconds: median(&mut times),
        peak_elements: peak as u64,
    })
}

fn cast_config(d: usize, n_c: usize, kappa: usize, mech: Mechanism) -> Result<CastConfig> {
    CastConfig::new(d, 1, n_c, kappa, AttentionFn::Softmax, mech)
}

/// Table-1 style sweep: fixed kappa, N_c = ceil(N / kappa) per point.
pub fn sweep_sequence_lengths(
    mechanisms: &[BenchMechanism],
    ns: &[usize],
    kappa: usize,
    d: usize,
    phase: Phase,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    let mut records = Vec::new();
    for &n in ns {
        let n_c = n.div_ceil(kappa);
        for &mech in mechanisms {
            let config = match mech.clustering() {
                None => cast_config(d, 1, n, Mechanism::TopK)?,
                Some(m) => cast_config(d, n_c, kappa, m)?,
            };
            records.push(time_config(mech, phase, &config, n, reps, DEFAULT_WARMUPS, seed)?);
        }
    }
    Ok(records)
}

/// Figure-2 style ablation: fixed N, kappa varies, N_c = N / kappa. TopK and
/// SATopK repetitions are interleaved so drift hits both mechanisms equally.
pub fn sweep_cluster_sizes(
    n: usize,
    kappas: &[usize],
    d: usize,
    phase: Phase,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    let mut records = Vec::new();
    for &kappa in kappas {
        if n % kappa != 0 {
            return Err(CastError::Config(format!("N = {} not divisible by kappa = {}", n, kappa)));
        }
        let n_c = n / kappa;
        let topk = cast_config(d, n_c, kappa, Mechanism::TopK)?;
        let satopk = cast_config(d, n_c, kappa, Mechanism::SATopK)?;
        let x = workload_x(seed, n, d);
        let params: CastParams<f32> = CastParams::init(&topk, seed.wrapping_add(1));
        for _ in 0..DEFAULT_WARMUPS {
            run_once(BenchMechanism::TopK, phase, &topk, &x, &params)?;
            run_once(BenchMechanism::SATopK, phase, &satopk, &x, &params)?;
        }
        let mut t_top = Vec::with_capacity(reps);
        let mut t_sa = Vec::with_capacity(reps);
        let mut peak_top = 0usize;
        let mut peak_sa = 0usize;
        for _ in 0..reps {
            meter::reset_peak();
            let t0 = Instant::now();
            run_once(BenchMechanism::TopK, phase, &topk, &x, &params)?;
            t_top.push(t0.elapsed().as_secs_f64());
            peak_top = peak_top.max(meter::peak_live_elements());

            meter::reset_peak();
            let t0 = Instant::now();
            run_once(BenchMechanism::SATopK, phase, &satopk, &x, &params)?;
            t_sa.push(t0.elapsed().as_secs_f64());
            peak_sa = peak_sa.max(meter::peak_live_elements());
        }
        for (mech, times, peak) in [
            (BenchMechanism::TopK, &mut t_top, peak_top),
            (BenchMechanism::SATopK, &mut t_sa, peak_sa),
        ] {
            records.push(BenchRecord {
                mechanism: mech,
                phase,
                n,
                d,
                h: 1,
                n_c,
                kappa,
                reps,
                median_seconds: median(times),
                peak_elements: peak as u64,
            });
        }
    }
    Ok(records)
}

/// Table-5 style comparison: forward-only (inference) records alongside
/// forward+backward (training) records for dense and TopK CAST.
pub fn inference_vs_training(
    ns: &[usize],
    kappa: usize,
    d: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    let mechs = [BenchMechanism::Dense, BenchMechanism::TopK];
    let mut records = sweep_sequence_lengths(&mechs, ns, kappa, d, Phase::Forward, reps, seed)?;
    records.extend(sweep_sequence_lengths(
        &mechs,
        ns,
        kappa,
        d,
        Phase::ForwardBackward,
        reps,
        seed,
    )?);
    Ok(records)
}

// ---------------------------------------------------------------------------
// reporting

fn fmt_f64(v: f64) -> String {
    format!("{:.8e}", v)
}

/// Fixed-format CSV; floats carry 9 significant digits so output bytes are a
/// pure function of the records.
pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.mechanism,
            r.phase,
            r.n,
            r.d,
            r.h,
            r.n_c,
            r.kappa,
            r.reps,
            fmt_f64(r.median_seconds),
            r.peak_elements
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(CastError::Format(format!("bad CSV header {:?}", other))),
    }
    let mut records = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(CastError::Format(format!("expected 10 columns, got {}", cols.len())));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| CastError::Format(format!("bad integer {:?}", s)))
        };
        records.push(BenchRecord {
            mechanism: cols[0].parse()?,
            phase: cols[1].parse()?,
            n: num(cols[2])?,
            d: num(cols[3])?,
            h: num(cols[4])?,
            n_c: num(cols[5])?,
            kappa: num(cols[6])?,
            reps: num(cols[7])?,
            median_seconds: cols[8]
                .parse()
                .map_err(|_| CastError::Format(format!("bad float {:?}", cols[8])))?,
            peak_elements: cols[9]
                .parse()
                .map_err(|_| CastError::Format(format!("bad integer {:?}", cols[9])))?,
        });
    }
    Ok(records)
}

/// Dense-relative ratios per (phase, N): dense/CAST time, CAST/dense peak.
pub fn ratios_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("phase,N,mechanism,speedup_vs_dense,peak_ratio_vs_dense\n");
    for r in records {
        if r.mechanism == BenchMechanism::Dense {
            continue;
        }
        let dense = records.iter().find(|q| {
            q.mechanism == BenchMechanism::Dense && q.phase == r.phase && q.n == r.n && q.d == r.d
        });
        if let Some(dense) = dense {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.phase,
                r.n,
                r.mechanism,
                fmt_f64(dense.median_seconds / r.median_seconds),
                fmt_f64(r.peak_elements as f64 / dense.peak_elements as f64)
            ));
        }
    }
    out
}

/// Writes `bench.csv`, `bench.json`, and `ratios.csv` under `dir`.
pub fn write_report(records: &[BenchRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("bench.csv"), records_to_csv(records))?;
    let json = serde_json::to_string_pretty(records)
        .map_err(|e| CastError::Format(e.to_string()))?;
    std::fs::write(dir.join("bench.json"), json + "\n")?;
    std::fs::write(dir.join("ratios.csv"), ratios_csv(records))?;
    Ok(())
}

/// Least-squares slope of ln(y) against ln(x).
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

// ---------------------------------------------------------------------------
// analytic peak model

/// Predicted peak live elements, from counting the tensors each execution
/// path keeps alive at its worst moment. Derivation (per term, h=1):
///
/// Dense forward (inference): scores + softmax output (2N^2) while X, V and
/// the softmax output's producer inputs (~3 Nd) are live, plus parameters.
/// Dense forward+backward: every tape activation (2N^2 + 8Nd) plus the
/// softmax adjoint moment (dweights + dscores = 2N^2) and ~4 Nd of pending
/// gradients.
/// CAST forward (inference): A_q/A_k/A_g (3 N*N_c), ~5 [N, d] tensors
/// (projections, gathers, accumulators), gathered value blocks (Nd), phi-size
/// vectors, parameters.
/// CAST forward+backward: tape retains the intra weight blocks (N*kappa, the
/// score blocks are fused away), ~23 [N, N_c] activations, ~20 [N, d]
/// activations; backward adds two weight-sized adjoint blocks (incoming
/// gradient plus the accumulating dQ/dK), a kappa^2 score block, ~2 [N, N_c]
/// and ~6 [N, d] pending gradients.
pub fn analytic_peak_model(mech: BenchMechanism, phase: Phase, n: usize, d: usize, n_c: usize, kappa: usize) -> f64 {
    let nf = n as f64;
    let df = d as f64;
    let params = 4.0 * df * df + n_c as f64 * df + df + 1.0;
    match (mech, phase) {
        (BenchMechanism::Dense, Phase::Forward) => 2.0 * nf * nf + 4.0 * nf * df + params,
        (BenchMechanism::Dense, Phase::ForwardBackward) => {
            4.0 * nf * nf + 12.0 * nf * df + params
        }
        (_, Phase::Forward) => {
            let nc = n_c as f64;
            3.0 * nf * nc + 5.0 * nf * df + params
        }
        (_, Phase::ForwardBackward) => {
            let nc = n_c as f64;
            let kf = kappa as f64;
            3.0 * nf * kf + kf * kf + 25.0 * nf * nc + 26.0 * nf * df + params
        }
    }
}

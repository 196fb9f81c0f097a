//! End-to-end acceptance suite. Runs all eleven checks sequentially (timing
//! comparisons need the machine to themselves) and prints one pass/fail line
//! per criterion.

use std::time::Instant;

use cast_attention::bench::{self, BenchMechanism, Phase};
use cast_attention::clustering::{sa_topk_cluster, topk_cluster, Mechanism};
use cast_attention::layer::{forward, AttentionFn, CastConfig, CastParams};
use cast_attention::multihead::mh_forward;
use cast_attention::tape::Tape;
use cast_attention::tensor::Tensor;
use cast_attention::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor<T: cast_attention::tensor::Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
) -> Tensor<T> {
    let len = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..len).map(|_| T::from_f64(rng.gen::<f64>() - 0.5)).collect(),
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// 1. Single-cluster collapse: with N_c=1 and kappa=N the layer reduces to
/// dense attention.
fn criterion_01() -> Result<String, String> {
    let config = CastConfig::new(32, 1, 1, 64, AttentionFn::Softmax, Mechanism::TopK)
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f32> = rand_tensor(&mut rng, &[64, 32]);
        let params: CastParams<f32> = CastParams::init(&config, seed.wrapping_add(100));
        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape, false);
        let xv = tape.input(x, false);
        let cast_out = forward(&tape, xv, &pv, &config).map_err(|e| e.to_string())?.output;
        let dense = verify::dense_attention_oracle(&tape, xv, &pv, config.tau)
            .map_err(|e| e.to_string())?;
        worst = worst.max(tape.value(cast_out).max_abs_diff(&tape.value(dense)));
    }
    let detail = format!("max abs diff {:.3e} over 10 seeds", worst);
    if worst <= 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 2. Oracle equivalence: vectorized forward matches the naive loop oracle
/// for h in {1,4} and both mechanisms.
fn criterion_02() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for mech in [Mechanism::TopK, Mechanism::SATopK] {
        for heads in [1usize, 4] {
            let config = CastConfig::new(16, heads, 4, 32, AttentionFn::Softmax, mech)
                .map_err(|e| e.to_string())?;
            for i in 0..5u64 {
                let x: Tensor<f64> = rand_tensor(&mut rng, &[128, 16]);
                let params: CastParams<f64> = CastParams::init(&config, i.wrapping_add(7));
                let oracle =
                    verify::naive_cast_oracle(&x, &params, &config).map_err(|e| e.to_string())?;
                let tape = Tape::<f64>::new();
                let pv = params.bind(&tape, false);
                let xv = tape.input(x, false);
                let out = if heads == 1 {
                    forward(&tape, xv, &pv, &config).map_err(|e| e.to_string())?.output
                } else {
                    mh_forward(&tape, xv, &pv, &config).map_err(|e| e.to_string())?.output
                };
                worst = worst.max(tape.value(out).max_abs_diff(&oracle));
                instances += 1;
            }
        }
    }
    let detail = format!("max abs diff {:.3e} over {} instances", worst, instances);
    if worst <= 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 3. Clustering oracles: optimized mechanisms match the literal
/// transcriptions; SA Top-K yields an exact partition.
fn criterion_03() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let a: Tensor<f64> = rand_tensor(&mut rng, &[64, 8]);
        let topk_ref = verify::topk_reference(&a, 8).map_err(|e| e.to_string())?;
        let topk_opt = topk_cluster(&a, 8).map_err(|e| e.to_string())?;
        if topk_ref.indices != topk_opt.indices {
            return Err(format!("TopK mismatch on instance {}", i));
        }
        let sa_ref = verify::sa_topk_reference(&a, 8).map_err(|e| e.to_string())?;
        let sa_opt = sa_topk_cluster(&a, 8).map_err(|e| e.to_string())?;
        if sa_ref.indices != sa_opt.indices {
            return Err(format!("SATopK mismatch on instance {}", i));
        }
        let mut seen = vec![0usize; 64];
        for cluster in &sa_opt.indices {
            if cluster.len() != 8 {
                return Err(format!("SATopK cluster size {} != 8 on instance {}", cluster.len(), i));
            }
            for &t in cluster {
                seen[t] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(format!("SATopK is not a partition on instance {}", i));
        }
    }
    Ok("100 instances, assignments identical, SATopK partitions".into())
}

/// 4. Gradient correctness for both mechanisms, plus the corrupted-adjoint
/// negative control.
fn criterion_04() -> Result<String, String> {
    let mut clean_worst = 0.0f64;
    let mut corrupt_best = f64::INFINITY;
    for mech in [Mechanism::TopK, Mechanism::SATopK] {
        let config = CastConfig::new(16, 2, 4, 8, AttentionFn::Softmax, mech)
            .map_err(|e| e.to_string())?;
        let reports =
            verify::fd_gradcheck_stable(&config, 41, 1e-5, false).map_err(|e| e.to_string())?;
        for r in &reports {
            clean_worst = clean_worst.max(r.max_rel_err);
            if !r.stable {
                return Err(format!("{} unstable under {}", r.name, mech));
            }
        }
        let corrupted =
            verify::fd_gradcheck_stable(&config, 41, 1e-5, true).map_err(|e| e.to_string())?;
        let peak = corrupted.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
        corrupt_best = corrupt_best.min(peak);
    }
    let detail = format!(
        "clean max rel err {:.3e}, corrupted control {:.3e}",
        clean_worst, corrupt_best
    );
    if clean_worst <= 1e-4 && corrupt_best > 1e-2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 5. Cross-cluster gradient flow: one token's loss reaches input rows in
/// every other cluster through the summary path.
fn criterion_05() -> Result<String, String> {
    let config = CastConfig::new(16, 1, 4, 16, AttentionFn::Softmax, Mechanism::SATopK)
        .map_err(|e| e.to_string())?;
    let mut weakest = f64::INFINITY;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(500));
        let x: Tensor<f64> = rand_tensor(&mut rng, &[64, 16]);
        let params: CastParams<f64> = CastParams::init(&config, seed);
        let tape = Tape::<f64>::new();
        let pv = params.bind(&tape, false);
        let xv = tape.input(x, true);
        let out = forward(&tape, xv, &pv, &config).map_err(|e| e.to_string())?;
        // loss = sum of token 0's output row
        let mut seed_grad = vec![0.0f64; 64 * 16];
        seed_grad[..16].fill(1.0);
        let grads = tape
            .backward(out.output, Tensor::from_vec(vec![64, 16], seed_grad))
            .map_err(|e| e.to_string())?;
        let gx = grads.expect(xv).clone();
        let own = out
            .intermediates
            .assignment
            .indices
            .iter()
            .position(|c| c.contains(&0))
            .expect("token 0 assigned");
        for (j, cluster) in out.intermediates.assignment.indices.iter().enumerate() {
            if j == own {
                continue;
            }
            let best = cluster
                .iter()
                .filter(|&&t| t < 64)
                .map(|&t| {
                    gx.data()[t * 16..(t + 1) * 16].iter().map(|g| g * g).sum::<f64>().sqrt()
                })
                .fold(0.0f64, f64::max);
            weakest = weakest.min(best);
        }
    }
    let detail = format!("weakest cross-cluster grad row norm {:.3e}", weakest);
    if weakest > 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 6. Complexity scaling: log-log time slopes and the forward-time ratio at
/// N=4096, kappa fixed at 200.
fn criterion_06() -> Result<String, String> {
    let mechs = [BenchMechanism::Dense, BenchMechanism::TopK];
    let recs =
        bench::sweep_sequence_lengths(&mechs, &[1024, 2048, 4096], 200, 64, Phase::Forward, 3, 6)
            .map_err(|e| e.to_string())?;
    let series = |mech: BenchMechanism| -> Vec<(f64, f64)> {
        recs.iter()
            .filter(|r| r.mechanism == mech)
            .map(|r| (r.n as f64, r.median_seconds))
            .collect()
    };
    let dense = series(BenchMechanism::Dense);
    let cast = series(BenchMechanism::TopK);
    let dense_slope = bench::log_log_slope(&dense);
    let cast_slope = bench::log_log_slope(&cast);
    let ratio = dense.last().unwrap().1 / cast.last().unwrap().1;
    let detail = format!(
        "slopes dense {:.2} / cast {:.2}, forward ratio at N=4096: {:.2}",
        dense_slope, cast_slope, ratio
    );
    if dense_slope >= 1.7 && cast_slope <= 1.4 && ratio >= 3.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 7. Memory scaling at N=4096, d=64: CAST/dense peak ratio and agreement
/// with the analytic peak model.
fn criterion_07() -> Result<String, String> {
    let config = CastConfig::new(64, 1, 21, 200, AttentionFn::Softmax, Mechanism::TopK)
        .map_err(|e| e.to_string())?;
    let mut worst_model_err = 0.0f64;
    let mut ratios = Vec::new();
    for phase in [Phase::Forward, Phase::ForwardBackward] {
        let mut peaks = Vec::new();
        for mech in [BenchMechanism::Dense, BenchMechanism::TopK] {
            let r = bench::time_config(mech, phase, &config, 4096, 1, 0, 7)
                .map_err(|e| e.to_string())?;
            let model = bench::analytic_peak_model(mech, phase, 4096, 64, r.n_c, r.kappa);
            let err = (model - r.peak_elements as f64).abs() / r.peak_elements as f64;
            worst_model_err = worst_model_err.max(err);
            peaks.push(r.peak_elements as f64);
        }
        ratios.push(peaks[1] / peaks[0]);
    }
    let worst_ratio = ratios.iter().fold(0.0f64, |a, &b| a.max(b));
    let detail = format!(
        "peak ratios fwd {:.3} / fwd+bwd {:.3}, model err {:.1}%",
        ratios[0],
        ratios[1],
        100.0 * worst_model_err
    );
    if worst_ratio <= 0.35 && worst_model_err <= 0.20 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 8. Memory-minimum location: the N_c sweep at N=4096 bottoms out at
/// N_c=16, where N_c^2 = kappa.
fn criterion_08() -> Result<String, String> {
    let mut peaks = Vec::new();
    for n_c in [4usize, 8, 16, 32, 64] {
        let kappa = 4096 / n_c;
        let config = CastConfig::new(32, 1, n_c, kappa, AttentionFn::Softmax, Mechanism::TopK)
            .map_err(|e| e.to_string())?;
        let r = bench::time_config(BenchMechanism::TopK, Phase::ForwardBackward, &config, 4096, 1, 0, 8)
            .map_err(|e| e.to_string())?;
        peaks.push((n_c, r.peak_elements));
    }
    let (argmin, _) = peaks.iter().fold((0usize, u64::MAX), |acc, &(n_c, p)| {
        if p < acc.1 {
            (n_c, p)
        } else {
            acc
        }
    });
    let detail = format!(
        "peaks {:?}, minimum at N_c={}",
        peaks.iter().map(|&(_, p)| p).collect::<Vec<_>>(),
        argmin
    );
    if argmin == 16 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 9. Mechanism speed ordering: Top-K clustering never slower than SA Top-K
/// at any kappa, N=4096 (interleaved reps, medians).
fn criterion_09() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut detail = String::new();
    for kappa in [32usize, 64, 128, 256, 512] {
        let n_c = 4096 / kappa;
        let a: Tensor<f32> = rand_tensor(&mut rng, &[4096, n_c]);
        // warmup
        topk_cluster(&a, kappa).map_err(|e| e.to_string())?;
        sa_topk_cluster(&a, kappa).map_err(|e| e.to_string())?;
        let (mut topk_times, mut sa_times) = (Vec::new(), Vec::new());
        for _ in 0..9 {
            let t0 = Instant::now();
            topk_cluster(&a, kappa).map_err(|e| e.to_string())?;
            topk_times.push(t0.elapsed().as_secs_f64());
            let t0 = Instant::now();
            sa_topk_cluster(&a, kappa).map_err(|e| e.to_string())?;
            sa_times.push(t0.elapsed().as_secs_f64());
        }
        let (mt, ms) = (median(topk_times), median(sa_times));
        detail.push_str(&format!(" kappa {}: {:.1}x;", kappa, ms / mt));
        if mt > ms {
            return Err(format!(
                "TopK {:.3e}s slower than SATopK {:.3e}s at kappa {}",
                mt, ms, kappa
            ));
        }
    }
    Ok(format!("SATopK/TopK time ratios:{}", detail))
}

/// 10. Toy overfit: >= 0.95 train accuracy within 500 steps on at least 4 of
/// 5 seeds, both mechanisms.
fn criterion_10() -> Result<String, String> {
    let mut detail = String::new();
    let mut ok = true;
    for mech in [Mechanism::TopK, Mechanism::SATopK] {
        let mut hits = 0;
        for seed in 0..5u64 {
            let acc = verify::toy_overfit(mech, seed, 2.0, 500).map_err(|e| e.to_string())?;
            if acc >= 0.95 {
                hits += 1;
            }
        }
        detail.push_str(&format!(" {}: {}/5;", mech, hits));
        ok &= hits >= 4;
    }
    let detail = format!("seeds reaching 0.95:{}", detail);
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 11. Determinism: repeated cluster-map runs emit byte-identical PGMs and
/// the bench CSV is byte-identical for a fixed record list.
fn criterion_11() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{}", run));
        let cfg = cast_attention::cli::RunConfig {
            n: 256,
            n_c: 4,
            kappa: 64,
            d: 32,
            heads: 2,
            mechanism: Mechanism::TopK,
            attn: AttentionFn::Softmax,
            dtype: cast_attention::cli::Dtype::F32,
            seed: 11,
            out: out.clone(),
            ns: vec![256],
            kappas: vec![64],
        };
        cast_attention::cli::cmd_cluster_map(cfg, None, None, None, None)
            .map_err(|e| e.to_string())?;
        let mut bytes = Vec::new();
        for name in
            ["cluster_map.pgm", "score_map_00.pgm", "score_map_01.pgm", "score_map_02.pgm", "score_map_03.pgm"]
        {
            bytes.push(std::fs::read(out.join(name)).map_err(|e| e.to_string())?);
        }
        outputs.push(bytes);
    }
    if outputs[0] != outputs[1] {
        return Err("cluster-map PGM bytes differ between runs".into());
    }
    let config = CastConfig::new(16, 1, 4, 16, AttentionFn::Softmax, Mechanism::TopK)
        .map_err(|e| e.to_string())?;
    let rec = bench::time_config(BenchMechanism::TopK, Phase::Forward, &config, 64, 2, 0, 11)
        .map_err(|e| e.to_string())?;
    let records = vec![rec];
    if bench::records_to_csv(&records) != bench::records_to_csv(&records) {
        return Err("bench CSV differs for a fixed record list".into());
    }
    Ok("5 PGM files byte-identical across runs; CSV stable".into())
}

#[test]
fn acceptance() {
    let criteria: Vec<(&str, fn() -> Result<String, String>)> = vec![
        ("single-cluster collapse", criterion_01),
        ("oracle equivalence", criterion_02),
        ("clustering oracles", criterion_03),
        ("gradient correctness", criterion_04),
        ("cross-cluster gradient flow", criterion_05),
        ("complexity scaling", criterion_06),
        ("memory scaling", criterion_07),
        ("memory-minimum location", criterion_08),
        ("mechanism speed ordering", criterion_09),
        ("toy overfit", criterion_10),
        ("determinism", criterion_11),
    ];
    let mut failures = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let result = f();
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[pass] criterion {:2} {}: {} ({:.1} s)", i + 1, name, detail, secs),
            Err(detail) => {
                println!("[FAIL] criterion {:2} {}: {} ({:.1} s)", i + 1, name, detail, secs);
                failures.push(format!("criterion {} {}", i + 1, name));
            }
        }
    }
    assert!(failures.is_empty(), "failed: {}", failures.join(", "));
}

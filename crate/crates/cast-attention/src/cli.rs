//! Command-line interface: flat-JSON config with flag overrides, and the
//! `bench`, `verify`, `gradcheck`, and `cluster-map` subcommands.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 failed check, 3 I/O
//! error. The `CAST_THREADS` environment variable caps matmul parallelism
//! (0 = single-threaded, the default; benchmarks should stay at 0).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, BenchMechanism, Phase};
use crate::clustering::Mechanism;
use crate::error::{CastError, Result};
use crate::io;
use crate::layer::{forward, AttentionFn, CastConfig, CastParams};
use crate::multihead::mh_forward;
use crate::tape::Tape;
use crate::tensor::{self, Tensor};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "cast", about = "CAST attention: benchmarks, checks, cluster maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sequence-length and cluster-size sweeps; writes CSV/JSON reports.
    Bench(CommonArgs),
    /// Oracle-equivalence and clustering-transcription checks.
    Verify(CommonArgs),
    /// Finite-difference gradient check (64-bit).
    Gradcheck(GradcheckArgs),
    /// Cluster-index and affinity score-map images (PGM).
    ClusterMap(ClusterMapArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Flat JSON config file; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for reports and images.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long = "Nc")]
    pub n_c: Option<usize>,
    #[arg(long)]
    pub kappa: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// topk | satopk
    #[arg(long)]
    pub mechanism: Option<String>,
    /// softmax | laplace
    #[arg(long)]
    pub attn: Option<String>,
    /// f32 | f64
    #[arg(long)]
    pub dtype: Option<String>,
    /// Sequence lengths for bench sweeps, comma separated.
    #[arg(long = "Ns", value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    /// Cluster sizes for bench sweeps, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub kappas: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Negative control: corrupt the matmul adjoint; the check must then fail.
    #[arg(long)]
    pub corrupt_adjoint: bool,
}

#[derive(Debug, Args)]
pub struct ClusterMapArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Parameter file written by the tensor container format; fresh seeded
    /// parameters when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Raw grayscale bytes, one per token; seeded random when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Explicit grid width when N is not a perfect square.
    #[arg(long)]
    pub width: Option<usize>,
    /// Explicit grid height when N is not a perfect square.
    #[arg(long)]
    pub height: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Optional fields as read from the flat JSON config file. Unknown keys are
/// rejected so typos fail loudly.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(rename = "N")]
    n: Option<usize>,
    #[serde(rename = "Nc")]
    n_c: Option<usize>,
    kappa: Option<usize>,
    d: Option<usize>,
    heads: Option<usize>,
    mechanism: Option<String>,
    attn: Option<String>,
    dtype: Option<String>,
    seed: Option<u64>,
    out: Option<String>,
    #[serde(rename = "Ns")]
    ns: Option<Vec<usize>>,
    kappas: Option<Vec<usize>>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub n: usize,
    pub n_c: usize,
    pub kappa: usize,
    pub d: usize,
    pub heads: usize,
    pub mechanism: Mechanism,
    pub attn: AttentionFn,
    pub dtype: Dtype,
    pub seed: u64,
    pub out: PathBuf,
    pub ns: Vec<usize>,
    pub kappas: Vec<usize>,
}

fn parse_mechanism(s: &str) -> Result<Mechanism> {
    match s {
        "topk" => Ok(Mechanism::TopK),
        "satopk" => Ok(Mechanism::SATopK),
        other => Err(CastError::Config(format!(
            "unknown mechanism {:?} (expected topk or satopk)",
            other
        ))),
    }
}

fn parse_attn(s: &str) -> Result<AttentionFn> {
    match s {
        "softmax" => Ok(AttentionFn::Softmax),
        "laplace" => Ok(AttentionFn::Laplace),
        other => Err(CastError::Config(format!(
            "unknown attention function {:?} (expected softmax or laplace)",
            other
        ))),
    }
}

fn parse_dtype(s: &str) -> Result<Dtype> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(CastError::Config(format!("unknown dtype {:?} (expected f32 or f64)", other))),
    }
}

/// Merges file values and flag overrides over the defaults (the Image-task
/// layout: d=128, h=2, N_c=16, N=1024) and validates the combination.
pub fn parse_config(args: &CommonArgs) -> Result<RunConfig> {
    let file: FileConfig = match &args.config {
        None => FileConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| CastError::Config(format!("config {}: {}", path.display(), e)))?
        }
    };
    let n = args.n.or(file.n).unwrap_or(1024);
    let n_c = args.n_c.or(file.n_c).unwrap_or(16);
    let kappa = args.kappa.or(file.kappa).unwrap_or_else(|| n.div_ceil(n_c.max(1)));
    let d = args.d.or(file.d).unwrap_or(128);
    let heads = args.heads.or(file.heads).unwrap_or(2);
    let mechanism = parse_mechanism(
        args.mechanism.as_deref().or(file.mechanism.as_deref()).unwrap_or("topk"),
    )?;
    let attn = parse_attn(args.attn.as_deref().or(file.attn.as_deref()).unwrap_or("softmax"))?;
    let dtype = parse_dtype(args.dtype.as_deref().or(file.dtype.as_deref()).unwrap_or("f32"))?;
    let cfg = RunConfig {
        n,
        n_c,
        kappa,
        d,
        heads,
        mechanism,
        attn,
        dtype,
        seed: args.seed.or(file.seed).unwrap_or(0),
        out: args
            .out
            .clone()
            .or_else(|| file.out.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out")),
        ns: args.ns.clone().or(file.ns).unwrap_or_else(|| vec![1024, 2048, 3072, 4096]),
        kappas: args.kappas.clone().or(file.kappas).unwrap_or_else(|| vec![32, 64, 128, 256, 512]),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CastError::Config("N must be positive".into()));
        }
        if self.n_c * self.kappa < self.n {
            return Err(CastError::Config(format!(
                "capacity N_c * kappa = {} is below N = {}; raise Nc or kappa",
                self.n_c * self.kappa,
                self.n
            )));
        }
        if self.ns.is_empty() || self.kappas.is_empty() {
            return Err(CastError::Config("Ns and kappas must be non-empty".into()));
        }
        self.cast_config()?.validate()
    }

    pub fn cast_config(&self) -> Result<CastConfig> {
        CastConfig::new(self.d, self.heads, self.n_c, self.kappa, self.attn, self.mechanism)
    }
}

// ---------------------------------------------------------------------------
// subcommands

/// Maps an error to the documented exit codes (1 validation, 2 failed check,
/// 3 I/O).
fn exit_code(e: &CastError) -> i32 {
    match e {
        CastError::Io(_) => 3,
        CastError::Config(_) | CastError::Shape(_) | CastError::Index(_) | CastError::Format(_) => 1,
        CastError::NonFinite(_) | CastError::UnstableAssignment(_) | CastError::Diverged(_) => 2,
    }
}

pub fn run(cli: Cli) -> i32 {
    if let Ok(v) = std::env::var("CAST_THREADS") {
        match v.parse::<usize>() {
            Ok(n) => tensor::set_threads(n),
            Err(_) => {
                eprintln!("invalid CAST_THREADS value {:?}", v);
                return 1;
            }
        }
    }
    let result = match &cli.command {
        Command::Bench(args) => parse_config(args).and_then(cmd_bench),
        Command::Verify(args) => parse_config(args).and_then(cmd_verify),
        Command::Gradcheck(args) => {
            parse_config(&args.common).and_then(|cfg| cmd_gradcheck(cfg, args.corrupt_adjoint))
        }
        Command::ClusterMap(args) => parse_config(&args.common).and_then(|cfg| {
            cmd_cluster_map(
                cfg,
                args.weights.as_deref(),
                args.input.as_deref(),
                args.width,
                args.height,
            )
        }),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}

pub fn cmd_bench(cfg: RunConfig) -> Result<bool> {
    let mechs = [BenchMechanism::Dense, BenchMechanism::TopK, BenchMechanism::SATopK];
    println!("sequence-length sweep: Ns {:?}, kappa {}", cfg.ns, cfg.kappa);
    let mut records = bench::sweep_sequence_lengths(
        &mechs,
        &cfg.ns,
        cfg.kappa,
        cfg.d,
        Phase::Forward,
        bench::DEFAULT_REPS,
        cfg.seed,
    )?;
    let sweep_n = *cfg.ns.iter().max().expect("validated non-empty");
    let kappas: Vec<usize> = cfg.kappas.iter().copied().filter(|k| sweep_n % k == 0).collect();
    println!("cluster-size sweep: N {}, kappas {:?}", sweep_n, kappas);
    if !kappas.is_empty() {
        records.extend(bench::sweep_cluster_sizes(
            sweep_n,
            &kappas,
            cfg.d,
            Phase::Forward,
            bench::DEFAULT_REPS,
            cfg.seed,
        )?);
    }
    bench::write_report(&records, &cfg.out)?;
    for r in &records {
        println!(
            "{} {} N={} Nc={} kappa={}: {:.6} s, peak {} elements",
            r.mechanism, r.phase, r.n, r.n_c, r.kappa, r.median_seconds, r.peak_elements
        );
    }
    println!("report written to {}", cfg.out.display());
    Ok(true)
}

struct Check {
    name: String,
    passed: bool,
    detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    println!("[{}] {}: {}", if passed { "pass" } else { "FAIL" }, name, detail);
    Check { name: name.to_string(), passed, detail }
}

fn write_checks(out: &Path, file: &str, checks: &[Check]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut text = String::new();
    for c in checks {
        text.push_str(&format!(
            "{{\"name\":{:?},\"passed\":{},\"detail\":{:?}}}\n",
            c.name, c.passed, c.detail
        ));
    }
    std::fs::write(out.join(file), text)?;
    Ok(())
}

pub fn cmd_verify(cfg: RunConfig) -> Result<bool> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();

    // vectorized forward vs the loop transcription, both mechanisms
    for mech in [Mechanism::TopK, Mechanism::SATopK] {
        let mut worst = 0.0f64;
        for i in 0..5 {
            let config = CastConfig::new(16, cfg.heads.min(4), 4, 16, cfg.attn, mech)?;
            let params: CastParams<f64> = CastParams::init(&config, cfg.seed.wrapping_add(i));
            let x = Tensor::from_vec(
                vec![64, 16],
                (0..64 * 16).map(|_| rng.gen::<f64>() - 0.5).collect(),
            );
            let oracle = verify::naive_cast_oracle(&x, &params, &config)?;
            let tape = Tape::<f64>::new();
            let pv = params.bind(&tape, false);
            let xv = tape.input(x.clone(), false);
            let out = if config.heads == 1 {
                forward(&tape, xv, &pv, &config)?.output
            } else {
                mh_forward(&tape, xv, &pv, &config)?.output
            };
            worst = worst.max(tape.value(out).max_abs_diff(&oracle));
        }
        checks.push(check(
            &format!("oracle-equivalence-{}", mech),
            worst <= 1e-5,
            format!("max abs diff {:.3e}", worst),
        ));
    }

    // clustering transcriptions against the optimized implementations
    let mut agree = true;
    for _ in 0..20 {
        let a = Tensor::from_vec(vec![64, 8], (0..512).map(|_| rng.gen::<f64>()).collect());
        agree &= verify::topk_reference(&a, 8)?.indices
            == crate::clustering::topk_cluster(&a, 8)?.indices;
        agree &= verify::sa_topk_reference(&a, 8)?.indices
            == crate::clustering::sa_topk_cluster(&a, 8)?.indices;
    }
    checks.push(check("clustering-transcriptions", agree, "20 random instances".into()));

    // single-cluster collapse to dense attention
    let config = CastConfig::new(32, 1, 1, 64, AttentionFn::Softmax, Mechanism::TopK)?;
    let params: CastParams<f32> = CastParams::init(&config, cfg.seed);
    let x = Tensor::from_vec(vec![64, 32], (0..64 * 32).map(|_| rng.gen::<f32>() - 0.5).collect());
    let tape = Tape::<f32>::new();
    let pv = params.bind(&tape, false);
    let xv = tape.input(x.clone(), false);
    let cast_out = forward(&tape, xv, &pv, &config)?.output;
    let dense_out = verify::dense_attention_oracle(&tape, xv, &pv, config.tau)?;
    let diff = tape.value(cast_out).max_abs_diff(&tape.value(dense_out));
    checks.push(check(
        "single-cluster-collapse",
        diff <= 1e-5,
        format!("max abs diff {:.3e}", diff),
    ));

    write_checks(&cfg.out, "verify.json", &checks)?;
    Ok(checks.iter().all(|c| c.passed))
}

pub fn cmd_gradcheck(cfg: RunConfig, corrupt_adjoint: bool) -> Result<bool> {
    let config = CastConfig::new(
        cfg.d.min(16),
        if cfg.d.min(16) % cfg.heads == 0 { cfg.heads } else { 1 },
        cfg.n_c.min(4),
        cfg.kappa.min(8),
        cfg.attn,
        cfg.mechanism,
    )?;
    println!(
        "gradcheck: d={} h={} Nc={} kappa={} mechanism={} corrupt_adjoint={}",
        config.d, config.heads, config.n_clusters, config.cluster_size, cfg.mechanism, corrupt_adjoint
    );
    let reports = verify::fd_gradcheck_stable(&config, cfg.seed, 1e-5, corrupt_adjoint)?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("gradcheck.json"), verify::reports_to_json_lines(&reports) + "\n")?;
    let mut all_ok = true;
    for r in &reports {
        let ok = r.max_rel_err <= 1e-4 && r.stable;
        all_ok &= ok;
        println!(
            "[{}] {}: max rel err {:.3e} (stable: {})",
            if ok { "pass" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.stable
        );
    }
    Ok(all_ok)
}

/// Grid dimensions for the cluster map: explicit width/height if given,
/// otherwise N must be a perfect square.
fn grid_dims(n: usize, width: Option<usize>, height: Option<usize>) -> Result<(usize, usize)> {
    match (width, height) {
        (Some(w), Some(h)) if w * h == n => Ok((w, h)),
        (Some(w), Some(h)) => {
            Err(CastError::Config(format!("{}x{} grid does not hold N = {} tokens", w, h, n)))
        }
        (None, None) => {
            let side = (n as f64).sqrt().round() as usize;
            if side * side == n {
                Ok((side, side))
            } else {
                Err(CastError::Config(format!(
                    "N = {} is not a perfect square; pass --width and --height",
                    n
                )))
            }
        }
        _ => Err(CastError::Config("pass both --width and --height".into())),
    }
}

pub fn cmd_cluster_map(
    cfg: RunConfig,
    weights: Option<&Path>,
    input: Option<&Path>,
    width: Option<usize>,
    height: Option<usize>,
) -> Result<bool> {
    use rand::{Rng, SeedableRng};
    let (w, h) = grid_dims(cfg.n, width, height)?;
    let (params, heads) = match weights {
        Some(path) => io::read_params(path)?,
        None => {
            let config = cfg.cast_config()?;
            (CastParams::init(&config, cfg.seed), cfg.heads)
        }
    };
    let d = params.w_q.shape()[0];
    let config = CastConfig::new(d, heads, cfg.n_c, cfg.kappa, cfg.attn, cfg.mechanism)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = match input {
        Some(path) => {
            let bytes = std::fs::read(path)?;
            if bytes.len() != cfg.n {
                return Err(CastError::Format(format!(
                    "input holds {} bytes, expected N = {}",
                    bytes.len(),
                    cfg.n
                )));
            }
            // grayscale embedded along a fixed random direction
            let basis: Vec<f32> = (0..d).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let mut data = vec![0.0f32; cfg.n * d];
            for (t, &b) in bytes.iter().enumerate() {
                let e = b as f32 / 255.0 - 0.5;
                for c in 0..d {
                    data[t * d + c] = e * basis[c];
                }
            }
            Tensor::from_vec(vec![cfg.n, d], data)
        }
        None => Tensor::from_vec(
            vec![cfg.n, d],
            (0..cfg.n * d).map(|_| rng.gen::<f32>() - 0.5).collect(),
        ),
    };

    let tape = Tape::<f32>::new();
    let pv = params.bind(&tape, false);
    let xv = tape.input(x, false);
    let (a_g, assignment) = if heads == 1 {
        let out = forward(&tape, xv, &pv, &config)?;
        (out.intermediates.a_g, out.intermediates.assignment)
    } else {
        let out = mh_forward(&tape, xv, &pv, &config)?;
        (out.a_g, out.assignment)
    };

    // one cluster index per token: the lowest cluster containing it, falling
    // back to the strongest affinity for tokens Top-K left unclustered
    let n_c = config.n_clusters;
    let mut index = vec![usize::MAX; cfg.n];
    for (j, cluster) in assignment.indices.iter().enumerate() {
        for &t in cluster {
            if t < cfg.n && index[t] == usize::MAX {
                index[t] = j;
            }
        }
    }
    for (t, idx) in index.iter_mut().enumerate() {
        if *idx == usize::MAX {
            let row = &a_g.data()[t * n_c..(t + 1) * n_c];
            *idx = (0..n_c)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite affinity").then(b.cmp(&a)))
                .expect("at least one cluster");
        }
    }
    let pixels: Vec<u8> = index
        .iter()
        .map(|&j| if n_c > 1 { (255 * j / (n_c - 1)) as u8 } else { 0 })
        .collect();
    std::fs::create_dir_all(&cfg.out)?;
    io::write_pgm(&cfg.out.join("cluster_map.pgm"), w, h, &pixels)?;

    // per-cluster score maps of A_g, min-max normalized per image
    for j in 0..n_c {
        let column: Vec<f32> = (0..cfg.n).map(|t| a_g.data()[t * n_c + j]).collect();
        let px = io::quantize_minmax(&column);
        io::write_pgm(&cfg.out.join(format!("score_map_{:02}.pgm", j)), w, h, &px)?;
    }
    println!(
        "wrote cluster_map.pgm and {} score maps ({}x{}) to {}",
        n_c,
        w,
        h,
        cfg.out.display()
    );
    Ok(true)
}

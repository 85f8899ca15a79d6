use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use midx_core::diagnostics::{
    divergence_report, grad_bias_mc_prepared, timing_profile, GradBiasConfig, TimingConfig,
};
use midx_core::io::{
    read_embeddings, read_index, read_labels, read_matrix, round_to_f32, write_index, write_labels,
    write_matrix,
};
use midx_core::rng::seeded;
use midx_core::toy_trainer::{gen_task, train};
use midx_core::{
    EmbeddingMatrix, Error, GradEstimator, GradientSource, IndexConfig, Matrix, MultiIndex,
    QuantizerKind, QueryVector, SamplerKind, SamplerSpec, TaskConfig, ToyTask, TrainConfig,
};

mod config;

#[derive(Parser, Debug)]
#[command(
    name = "midx",
    version,
    about = "Inverted multi-index samplers for sampled softmax"
)]
struct Cli {
    /// JSON object of flag values; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a clustered catalog, queries and labels.
    Gen(GenArgs),
    /// Build a multi-index over an embedding file.
    Build(BuildArgs),
    /// Draw classes for one query.
    Sample(SampleArgs),
    /// Divergence diagnostics per query.
    Eval(EvalArgs),
    /// Prepare and draw timings across catalog sizes.
    Bench(BenchArgs),
    /// Train the catalog of a generated task.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    classes: u32,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    dim: u32,
    #[arg(long, default_value_t = 1024, value_parser = clap::value_parser!(u32).range(1..))]
    queries: u32,
    /// Defaults to min(16, classes).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    clusters: Option<u32>,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for embeddings.bin, queries.bin and labels.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    k: u32,
    #[arg(long, default_value = "product")]
    kind: QuantizerKind,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    iters: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SamplerArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value = "midx_fast")]
    sampler: SamplerKind,
    /// Index file; required by the midx samplers.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Labels CSV; unigram frequencies are label counts plus one.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    query_id: usize,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    m: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: SamplerArgs,
    /// Sample size used in the bias bounds.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    m: u32,
    /// Queries to evaluate; all when omitted.
    #[arg(long, value_delimiter = ',')]
    query_ids: Option<Vec<usize>>,
    /// Monte-Carlo gradient-bias trials per query (0 disables; needs --labels).
    #[arg(long, default_value_t = 0)]
    trials: usize,
    #[arg(long, default_value = "self_normalized")]
    estimator: GradEstimator,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
    format: String,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
    n_values: Vec<usize>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "uniform,unigram,midx_exact,midx_fast"
    )]
    samplers: Vec<SamplerKind>,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    k: u32,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(2..))]
    dim: u32,
    /// Draws per timed call.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u32).range(1..))]
    m: u32,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(5..))]
    repeats: u32,
    #[arg(long, default_value = "product")]
    kind: QuantizerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Sampler kind, or `full` for exact gradients.
    #[arg(long, default_value = "midx_fast")]
    sampler: GradientSource,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    m: u32,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    rebuild_every: u32,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    k: u32,
    #[arg(long, default_value = "residual")]
    kind: QuantizerKind,
    #[arg(long, default_value = "sampled_softmax")]
    estimator: GradEstimator,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Lib(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match config::merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = Cli::parse_from(argv);
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Build(a) => cmd_build(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Train(a) => cmd_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn print_json<T: Serialize>(value: &T) -> CmdResult {
    let s = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn emit(text: &str) -> CmdResult {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).map_err(Error::from)?;
    Ok(())
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Format(format!("{}: {io}", path.display())),
        other => other,
    }
}

fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, Error> {
    read_embeddings(path).map_err(|e| with_path(path, e))
}

fn load_queries(path: &Path, dim: usize) -> Result<Matrix, Error> {
    let q = read_matrix(path).map_err(|e| with_path(path, e))?;
    if q.cols() != dim {
        return Err(Error::Format(format!(
            "{}: queries have dimension {}, embeddings have {dim}",
            path.display(),
            q.cols()
        )));
    }
    Ok(q)
}

fn load_labels(path: &Path) -> Result<Vec<usize>, Error> {
    read_labels(path).map_err(|e| with_path(path, e))
}

#[derive(Serialize)]
struct GenSummary {
    n: usize,
    d: usize,
    queries: usize,
    clusters: usize,
    noise: f64,
    seed: u64,
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let classes = a.classes as usize;
    let clusters = a.clusters.map(|c| c as usize).unwrap_or(classes.min(16));
    if clusters > classes {
        return Err(Failure::Usage(format!(
            "--clusters ({clusters}) must not exceed --classes ({classes})"
        )));
    }
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(Failure::Usage(format!(
            "--noise must be >= 0, got {}",
            a.noise
        )));
    }
    let cfg = TaskConfig {
        n_classes: classes,
        dim: a.dim as usize,
        n_queries: a.queries as usize,
        clusters,
        noise: a.noise,
        seed: a.seed,
    };
    let task = gen_task(&cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| with_path(&a.out, e.into()))?;
    let emb_path = a.out.join("embeddings.bin");
    let q_path = a.out.join("queries.bin");
    let l_path = a.out.join("labels.csv");
    write_matrix(&emb_path, &round_to_f32(task.catalog.matrix()))
        .map_err(|e| with_path(&emb_path, e))?;
    write_matrix(&q_path, &round_to_f32(&task.queries)).map_err(|e| with_path(&q_path, e))?;
    write_labels(&l_path, &task.labels).map_err(|e| with_path(&l_path, e))?;
    print_json(&GenSummary {
        n: cfg.n_classes,
        d: cfg.dim,
        queries: cfg.n_queries,
        clusters,
        noise: cfg.noise,
        seed: cfg.seed,
    })
}

#[derive(Serialize)]
struct BuildSummary {
    n: usize,
    d: usize,
    k: usize,
    kind: QuantizerKind,
    distortion: f64,
    nonempty_cells: usize,
}

fn cmd_build(a: BuildArgs) -> CmdResult {
    let emb = load_embeddings(&a.emb)?;
    let mut cfg = IndexConfig::new(a.k as usize, a.kind, a.seed);
    cfg.iters = a.iters as usize;
    let index = MultiIndex::build(&emb, &cfg)?;
    write_index(&a.out, &index).map_err(|e| with_path(&a.out, e))?;
    print_json(&BuildSummary {
        n: index.n_classes(),
        d: index.dim(),
        k: index.k(),
        kind: index.kind(),
        distortion: index.distortion(),
        nonempty_cells: index.nonempty_cells(),
    })
}

struct Loaded {
    emb: EmbeddingMatrix,
    queries: Matrix,
    labels: Option<Vec<usize>>,
    spec: SamplerSpec,
}

fn load_sampler(a: &SamplerArgs) -> Result<Loaded, Failure> {
    let emb = load_embeddings(&a.emb)?;
    let queries = load_queries(&a.queries, emb.dim())?;
    let labels = a.labels.as_deref().map(load_labels).transpose()?;
    if let Some(l) = &labels {
        if let Some(&bad) = l.iter().find(|&&y| y >= emb.n_classes()) {
            return Err(Error::Format(format!(
                "label {bad} is outside the catalog of {} classes",
                emb.n_classes()
            ))
            .into());
        }
    }
    let spec = match a.sampler {
        SamplerKind::Uniform => SamplerSpec::uniform(emb.n_classes())?,
        SamplerKind::Unigram => {
            let l = labels.as_ref().ok_or_else(|| {
                Failure::Usage("--sampler unigram needs --labels for its frequencies".into())
            })?;
            let mut f = vec![1.0; emb.n_classes()];
            for &y in l {
                f[y] += 1.0;
            }
            SamplerSpec::unigram(&f)?
        }
        kind => {
            let path = a
                .index
                .as_ref()
                .ok_or_else(|| Failure::Usage(format!("--sampler {kind} needs --index")))?;
            let index = read_index(path, &emb).map_err(|e| with_path(path, e))?;
            SamplerSpec::midx(kind, Arc::new(index))?
        }
    };
    Ok(Loaded {
        emb,
        queries,
        labels,
        spec,
    })
}

fn query(queries: &Matrix, j: usize) -> Result<QueryVector, Error> {
    if j >= queries.rows() {
        return Err(Error::OutOfRange {
            index: j,
            len: queries.rows(),
        });
    }
    QueryVector::new(queries.row(j).to_vec())
}

#[derive(Serialize)]
struct DrawRow {
    draw: usize,
    class_id: usize,
    prob: f64,
}

fn cmd_sample(a: SampleArgs) -> CmdResult {
    let loaded = load_sampler(&a.common)?;
    let z = query(&loaded.queries, a.query_id)?;
    let pq = loaded.spec.prepare(&z)?;
    let batch = pq.draw(a.m as usize, &mut seeded(a.seed));
    let rows =
        batch
            .indices
            .iter()
            .zip(&batch.probs)
            .enumerate()
            .map(|(draw, (&class_id, &prob))| DrawRow {
                draw,
                class_id,
                prob,
            });
    emit(&csv_string(rows)?)
}

#[derive(Serialize)]
struct EvalRow {
    query_id: usize,
    sampler: SamplerKind,
    n: usize,
    m: usize,
    kl: f64,
    d2: f64,
    kl_bound: f64,
    kl_within_bound: bool,
    grad_bias_bound: f64,
    d2_bias_bound: f64,
    o_inf_norm: f64,
    residual_inf_norm: Option<f64>,
    q_min: Option<f64>,
    q_max: Option<f64>,
    mc_bias: Option<f64>,
    mc_standard_error: Option<f64>,
    mc_within_bound: Option<bool>,
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let loaded = load_sampler(&a.common)?;
    if a.trials > 0 && loaded.labels.is_none() {
        return Err(Failure::Usage(
            "--trials needs --labels for the positive class".into(),
        ));
    }
    if a.trials == 1 {
        return Err(Failure::Usage("--trials must be 0 or at least 2".into()));
    }
    if let Some(l) = &loaded.labels {
        if l.len() != loaded.queries.rows() {
            return Err(Error::Format(format!(
                "{} labels for {} queries",
                l.len(),
                loaded.queries.rows()
            ))
            .into());
        }
    }
    let ids: Vec<usize> = match &a.query_ids {
        Some(ids) => ids.clone(),
        None => (0..loaded.queries.rows()).collect(),
    };
    let m = a.m as usize;
    let mut rows = Vec::with_capacity(ids.len());
    for &j in &ids {
        let z = query(&loaded.queries, j)?;
        let r = divergence_report(&loaded.spec, &loaded.emb, &z, m)?;
        let mut row = EvalRow {
            query_id: j,
            sampler: r.sampler,
            n: r.n,
            m: r.m,
            kl: r.kl,
            d2: r.d2,
            kl_bound: r.kl_bound,
            kl_within_bound: r.kl_within_bound,
            grad_bias_bound: r.grad_bias_bound,
            d2_bias_bound: r.d2_bias_bound,
            o_inf_norm: r.o_inf_norm,
            residual_inf_norm: r.residual_inf_norm,
            q_min: r.q_min,
            q_max: r.q_max,
            mc_bias: None,
            mc_standard_error: None,
            mc_within_bound: None,
        };
        if a.trials > 0 {
            let positive = loaded.labels.as_ref().expect("checked above")[j];
            let o = loaded.emb.logits(&z)?;
            let pq = loaded.spec.prepare(&z)?;
            let seed = a.seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut cfg = GradBiasConfig::new(m, a.trials, a.estimator, seed);
            cfg.threads = a.threads as usize;
            let b = grad_bias_mc_prepared(&pq, &o, positive, &cfg)?;
            let bound = r.grad_bias_bound.min(b.d2_bound);
            row.mc_bias = Some(b.measured_bias);
            row.mc_standard_error = Some(b.standard_error);
            row.mc_within_bound = Some(b.within(bound));
        }
        rows.push(row);
    }
    if a.format == "csv" {
        emit(&csv_string(&rows)?)
    } else {
        for r in &rows {
            print_json(r)?;
        }
        Ok(())
    }
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    if a.kind == QuantizerKind::Product && a.dim % 2 == 1 {
        return Err(Failure::Usage("--kind product needs an even --dim".into()));
    }
    let cfg = TimingConfig {
        kinds: a.samplers,
        n_values: a.n_values,
        k: a.k as usize,
        dim: a.dim as usize,
        m: a.m as usize,
        repeats: a.repeats as usize,
        seed: a.seed,
        quantizer: a.kind,
        ..TimingConfig::default()
    };
    let table = timing_profile(&cfg)?;
    emit(&csv_string(&table.rows)?)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    if !(a.lr >= 0.0 && a.lr.is_finite()) {
        return Err(Failure::Usage(format!("--lr must be >= 0, got {}", a.lr)));
    }
    let emb = load_embeddings(&a.emb)?;
    let queries = load_queries(&a.queries, emb.dim())?;
    let labels = load_labels(&a.labels)?;
    let task = ToyTask::from_parts(queries, emb, labels).map_err(|e| match e {
        Error::Dimension { .. } | Error::OutOfRange { .. } => {
            Error::Format(format!("queries, labels and embeddings do not match: {e}"))
        }
        other => other,
    })?;
    let cfg = TrainConfig {
        source: a.sampler,
        m: a.m as usize,
        epochs: a.epochs,
        lr: a.lr,
        rebuild_every: a.rebuild_every as usize,
        seed: a.seed,
        k: a.k as usize,
        quantizer: a.kind,
        estimator: a.estimator,
    };
    let report = train(&task, &cfg)?;
    let csv = report.to_csv()?;
    match &a.out {
        Some(path) => fs::write(path, csv).map_err(|e| with_path(path, e.into()))?,
        None => emit(&csv)?,
    }
    if report.aborted {
        return Err(Error::Numerical(format!(
            "training diverged after epoch {}",
            report.records.len() - 1
        ))
        .into());
    }
    Ok(())
}

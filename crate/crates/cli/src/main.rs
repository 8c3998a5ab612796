use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use hedra_core::harness::bench::{run_bench, BenchReport, BenchSpec};
use hedra_core::harness::config::{seed_from_env, ExperimentConfig};
use hedra_core::harness::corpus::{generate_corpus, topic_centers};
use hedra_core::harness::report::{read_trace, summarize_trace, write_trace, ExperimentReport};
use hedra_core::harness::workload::{generate_workload, Arrival, Workload};
use hedra_core::scheduler::{run, ClockMode, Strategy};
use hedra_core::tiered_cache::{solve_memory_budget, ThroughputProfile};
use hedra_core::vector_index::{
    read_assignment, read_centroids, read_corpus, write_assignment, write_centroids, write_corpus, Corpus, IvfIndex,
};

const CENTROIDS_FILE: &str = "centroids.hvec";
const ASSIGNMENT_FILE: &str = "assignment.bin";

#[derive(Parser)]
#[command(name = "hedra", version, about = "Co-scheduling of retrieval and generation stages in RAG workflows")]
struct Cli {
    /// TOML experiment config with [corpus], [index], [workload] and [run] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic Gaussian-mixture corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_vectors: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        n_topics: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Trains centroids and writes them with the cluster assignment.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k_clusters: Option<usize>,
        #[arg(long)]
        train_iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Writes a request trace as JSON lines.
    GenWorkload {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        requests: Option<usize>,
        #[arg(long)]
        rate_rps: Option<f64>,
        /// Restricts the mix to one workflow.
        #[arg(long)]
        workflow: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measures the throughput profile and calibration constants.
    Bench {
        #[command(flatten)]
        data: DataArgs,
        /// Profile CSV output.
        #[arg(long)]
        profile: PathBuf,
        /// Full bench results as JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serves a workload and writes the report.
    Run(Box<RunArgs>),
    /// Summarizes a trace file.
    Report {
        #[arg(long)]
        trace: PathBuf,
        /// Report to print alongside the trace summary.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Corpus and index files; generated from the config when omitted.
#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Directory written by build-index.
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Coarse,
    Naive,
    Hedra,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Live,
    Virtual,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Request trace; generated from the config when omitted.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Template name or workflow file; only matching requests are served.
    #[arg(long)]
    workflow: Option<String>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    clock: Option<ClockArg>,
    #[arg(long)]
    nprobe: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beta_ms: Option<f64>,
    /// Stops each retrieval once its heap is stable for E clusters.
    #[arg(long)]
    approx: bool,
    #[arg(long, value_enum)]
    speculation: Option<Switch>,
    #[arg(long, value_enum)]
    cache: Option<Switch>,
    #[arg(long)]
    slo_ms: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bench results whose calibration, beta and scan rate are used.
    #[arg(long)]
    bench: Option<PathBuf>,
    /// Profile CSV used to size the cluster cache.
    #[arg(long, requires_all = ["total_mem", "model_bytes"])]
    profile: Option<PathBuf>,
    #[arg(long)]
    total_mem: Option<u64>,
    #[arg(long)]
    model_bytes: Option<u64>,
    /// Generation load assumed by the memory solver.
    #[arg(long, default_value_t = 20.0)]
    rps_g: f64,
    /// Retrieval load assumed by the memory solver.
    #[arg(long, default_value_t = 20.0)]
    rps_r: f64,
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
    /// Per-event trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_seed_env()?;
    Ok(cfg)
}

/// Seed flag unless `HEDRA_SEED` is set.
fn pick_seed(flag: Option<u64>) -> Result<Option<u64>> {
    Ok(seed_from_env()?.or(flag))
}

fn load_corpus(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Corpus> {
    Ok(match path {
        Some(p) => read_corpus(p).with_context(|| format!("reading corpus {}", p.display()))?,
        None => {
            info!("generating corpus of {} vectors", cfg.corpus.n_vectors);
            generate_corpus(&cfg.corpus)?
        }
    })
}

fn load_index(cfg: &ExperimentConfig, data: &DataArgs) -> Result<IvfIndex> {
    let corpus = load_corpus(cfg, data.corpus.as_deref())?;
    Ok(match &data.index {
        Some(dir) => {
            let (centroids, _) = read_centroids(dir.join(CENTROIDS_FILE))?;
            let assignment = read_assignment(dir.join(ASSIGNMENT_FILE))?;
            IvfIndex::from_assignment(&corpus, centroids, assignment)?
        }
        None => {
            info!("training {} clusters", cfg.index.k_clusters);
            cfg.index.build(&corpus)?
        }
    })
}

fn run_cmd(mut cfg: ExperimentConfig, a: &RunArgs) -> Result<()> {
    let r = &mut cfg.run;
    if let Some(s) = a.strategy {
        r.strategy = match s {
            StrategyArg::Coarse => Strategy::CoarseSequential,
            StrategyArg::Naive => Strategy::NaiveAsync,
            StrategyArg::Hedra => Strategy::Hedra,
        };
    }
    if let Some(c) = a.clock {
        r.clock = match c {
            ClockArg::Live => ClockMode::Live,
            ClockArg::Virtual => ClockMode::Virtual,
        };
    }
    if let Some(n) = a.nprobe {
        r.nprobe = n;
    }
    if a.topk.is_some() {
        r.topk = a.topk;
    }
    if let Some(t) = a.tau {
        r.tau = t;
    }
    if let Some(b) = a.beta_ms {
        r.beta_ms = b;
    }
    r.approx |= a.approx;
    if let Some(s) = a.speculation {
        r.speculation = s.on();
    }
    if let Some(c) = a.cache {
        r.cache = c.on();
    }
    if a.slo_ms.is_some() {
        r.slo_ms = a.slo_ms;
    }
    if let Some(seed) = pick_seed(a.seed)? {
        r.seed = seed;
    }
    if let Some(path) = &a.bench {
        let b = BenchReport::read(path).with_context(|| format!("reading {}", path.display()))?;
        r.calibration = Some(b.calibration);
        r.ret_cost.per_vector_ns = b.per_vector_ns;
        if a.beta_ms.is_none() {
            r.beta_ms = b.beta_ms;
        }
    }
    if let (Some(path), Some(total), Some(model)) = (&a.profile, a.total_mem, a.model_bytes) {
        let profile = ThroughputProfile::read_csv(path)?;
        let plan = solve_memory_budget(&profile, a.rps_g, a.rps_r, total, model)?;
        info!("memory plan: {plan:?}");
        r.capacity_gc = Some(plan.capacity_gc);
    }

    let index = load_index(&cfg, &a.data)?;
    let mut workload = match &a.workload {
        Some(p) => Workload::read_jsonl(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            if let Some(w) = &a.workflow {
                cfg.workload.workflow_mix = [(w.clone(), 1.0)].into_iter().collect();
            }
            generate_workload(&cfg.workload, &topic_centers(&cfg.corpus)?)?
        }
    };
    if let Some(w) = &a.workflow {
        workload.requests.retain(|r| &r.workflow == w);
    }
    info!(
        "serving {} requests with {} on the {} clock",
        workload.requests.len(),
        cfg.run.strategy.name(),
        cfg.run.clock.name()
    );
    let out = run(&cfg.run, &index, &workload)?;
    out.report.write(&a.report)?;
    if let Some(t) = &a.trace {
        write_trace(t, &out.trace)?;
    }
    let s = &out.report.summary;
    println!(
        "{}: {} completed, {} failed, p50 {:.2} ms, p99 {:.2} ms, makespan {:.2} ms, {:.2} req/s",
        cfg.run.strategy.name(),
        s.completed,
        s.failed,
        s.p50_ms,
        s.p99_ms,
        s.makespan_ms,
        s.throughput_rps
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus {
            out,
            n_vectors,
            dim,
            n_topics,
            seed,
        } => {
            let c = &mut cfg.corpus;
            c.n_vectors = n_vectors.unwrap_or(c.n_vectors);
            c.dim = dim.unwrap_or(c.dim);
            c.n_topics = n_topics.unwrap_or(c.n_topics);
            c.seed = pick_seed(seed)?.unwrap_or(c.seed);
            write_corpus(&out, &generate_corpus(c)?)?;
            println!("wrote {} vectors to {}", c.n_vectors, out.display());
        }
        Command::BuildIndex {
            corpus,
            out,
            k_clusters,
            train_iters,
            seed,
        } => {
            let i = &mut cfg.index;
            i.k_clusters = k_clusters.unwrap_or(i.k_clusters);
            i.train_iters = train_iters.unwrap_or(i.train_iters);
            i.seed = pick_seed(seed)?.unwrap_or(i.seed);
            let corpus = read_corpus(&corpus)?;
            let index = i.build(&corpus)?;
            std::fs::create_dir_all(&out)?;
            write_centroids(out.join(CENTROIDS_FILE), index.centroids(), index.metric())?;
            write_assignment(out.join(ASSIGNMENT_FILE), index.assignment())?;
            println!("wrote {} clusters to {}", index.k_clusters(), out.display());
        }
        Command::GenWorkload {
            out,
            requests,
            rate_rps,
            workflow,
            seed,
        } => {
            let w = &mut cfg.workload;
            w.requests = requests.unwrap_or(w.requests);
            if let Some(rate_rps) = rate_rps {
                w.arrival = Arrival::Poisson { rate_rps };
            }
            if let Some(name) = workflow {
                w.workflow_mix = [(name, 1.0)].into_iter().collect();
            }
            w.seed = pick_seed(seed)?.unwrap_or(w.seed);
            let workload = generate_workload(w, &topic_centers(&cfg.corpus)?)?;
            workload.write_jsonl(&out)?;
            println!("wrote {} requests to {}", workload.requests.len(), out.display());
        }
        Command::Bench { data, profile, out } => {
            let index = load_index(&cfg, &data)?;
            let spec = BenchSpec {
                nprobe: cfg.run.nprobe,
                seed: cfg.run.seed,
                ..BenchSpec::default()
            };
            let b = run_bench(&spec, &cfg.run.gen_model, &index)?;
            b.profile.write_csv(&profile)?;
            b.write(&out)?;
            println!(
                "beta {:.4} ms, {:.2} ns per vector, {:.3} ms per query; calibration a={:.4} b={:.6} c={:.4}",
                b.beta_ms, b.per_vector_ns, b.query_ms, b.calibration.a, b.calibration.b, b.calibration.c
            );
        }
        Command::Run(args) => run_cmd(cfg, &args)?,
        Command::Report { trace, report } => {
            let events = read_trace(&trace)?;
            let s = summarize_trace(&events);
            println!("{}", serde_json::to_string_pretty(&s)?);
            if let Some(path) = report {
                let r = ExperimentReport::read(&path)?;
                println!("{}", serde_json::to_string_pretty(&r.summary)?);
            }
        }
    }
    Ok(())
}

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rt2v_core::bench::{generate_synthetic, load_benchmark, SyntheticSpec};
use rt2v_core::decomposer::decompose;
use rt2v_core::engine::{index_twins, Engine, EngineConfig, EngineError, RetrieveOptions};
use rt2v_core::index::{AggMode, HeadSet};
use rt2v_core::relations::{extract_relations, RelationConfig};
use rt2v_core::trainer::{heads_from_json, heads_to_json, mine_examples, train, TrainConfig};
use rt2v_core::twin::{parse_twin, serialize_twin, DigitalTwin};
use serde_json::json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PIPELINE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rt2v", version, about = "Reasoning text-to-video retrieval over digital twins")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EngineArgs {
    /// TOML engine configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Fixture directory with offline LLM responses.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub heads: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub agg: Option<AggMode>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate twins and write them in canonical form.
    Ingest {
        /// A twin file or a directory of twin files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract relation tuples for every twin of a benchmark.
    Relate {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and persist the component index.
    Index {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        heads: Option<PathBuf>,
        #[arg(long, default_value_t = rt2v_core::embedding::DEFAULT_DIM)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train projection heads on benchmark ground truth.
    Train {
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve videos for one query.
    Query {
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        query: String,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Evaluate a benchmark and report metrics.
    Eval {
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Write a seeded synthetic benchmark.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        videos: usize,
        #[arg(long, default_value_t = 10)]
        distractors: usize,
        #[arg(long, default_value_t = 10)]
        queries: usize,
    },
    /// Serve the retrieval API.
    Serve {
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

/// A failure carrying its exit status.
#[derive(Debug)]
pub struct Failure {
    pub status: i32,
    pub kind: &'static str,
    pub error: anyhow::Error,
}

impl Failure {
    fn usage(error: anyhow::Error) -> Self {
        Self { status: EXIT_USAGE, kind: "usage", error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let kind = match error.downcast_ref::<EngineError>() {
            Some(EngineError::EmptyQuery) => return Self::usage(error),
            Some(EngineError::Config(_)) => "config",
            Some(_) => "pipeline",
            None => "pipeline",
        };
        Self { status: EXIT_PIPELINE, kind, error }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        anyhow::Error::new(e).into()
    }
}

/// Build the engine configuration: file, then flags, then environment.
pub fn resolve_config(args: &EngineArgs) -> anyhow::Result<EngineConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            EngineConfig::from_toml(&text)?
        }
        None => EngineConfig::default(),
    };
    macro_rules! flag {
        ($($f:ident),*) => {$(if let Some(v) = &args.$f { config.$f = Some(v.clone()); })*};
    }
    flag!(benchmark, fixtures, index, heads);
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(tau) = args.tau {
        config.tau = tau;
    }
    if let Some(agg) = args.agg {
        config.agg = agg;
    }
    config.apply_env(|k| std::env::var(k).ok());
    if config.fixtures.is_none() {
        if let Some(root) = &config.benchmark {
            let candidate = root.join("fixtures");
            if config.llm_url.is_none() && candidate.is_dir() {
                config.fixtures = Some(candidate);
            }
        }
    }
    config.validate()?;
    Ok(config)
}

fn write_out(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => stdout.write_all(text.as_bytes()).context("writing output"),
    }
}

fn twin_files(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_owned()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn ingest(input: &Path, out: Option<&Path>, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let mut ids = Vec::new();
    for path in twin_files(input)? {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let twin = parse_twin(&text).with_context(|| format!("invalid twin {}", path.display()))?;
        if let Some(dir) = out {
            write_out(Some(&dir.join(format!("{}.json", twin.video_id))), &(serialize_twin(&twin) + "\n"), stdout)?;
        }
        ids.push(twin.video_id);
    }
    writeln!(stdout, "{}", json!({"ingested": ids.len(), "videos": ids}))?;
    Ok(())
}

fn relate(benchmark: &Path, out: &Path) -> anyhow::Result<()> {
    let bench = load_benchmark(benchmark)?;
    let cfg = RelationConfig::default();
    let relations: BTreeMap<&str, _> = bench.twins.iter().map(|(id, t)| (id.as_str(), extract_relations(t, &cfg))).collect();
    let text = rt2v_core::canonical::to_canonical_string(&relations)?;
    write_out(Some(out), &(text + "\n"), &mut std::io::sink())
}

fn load_heads(path: Option<&Path>, dim: usize) -> anyhow::Result<HeadSet> {
    match path {
        Some(p) => Ok(heads_from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => Ok(HeadSet::identity(dim)),
    }
}

fn build_index_file(benchmark: &Path, heads: Option<&Path>, dim: usize, out: &Path) -> anyhow::Result<()> {
    let bench = load_benchmark(benchmark)?;
    let heads = load_heads(heads, dim)?;
    let config = EngineConfig { dim: heads.object.in_dim, ..EngineConfig::default() };
    let provider = config.provider();
    let twins: Vec<DigitalTwin> = bench.twins.into_values().collect();
    let index = index_twins(&twins, provider.as_ref(), &heads)?;
    write_out(Some(out), &(index.to_json() + "\n"), &mut std::io::sink())
}

fn train_heads(args: &EngineArgs, seed: u64, epochs: usize, out: &Path) -> anyhow::Result<()> {
    let config = resolve_config(args)?;
    let root = config.benchmark.clone().context("train needs --benchmark")?;
    let bench = load_benchmark(&root)?;
    let provider = config.provider();
    let llm = config.llm();
    let twins: Vec<DigitalTwin> = bench.twins.values().cloned().collect();
    let index = index_twins(&twins, provider.as_ref(), &HeadSet::identity(config.dim))?;
    let mut supervision = Vec::new();
    for q in &bench.manifest.queries {
        let subqueries = decompose(&q.text, llm.as_ref()).with_context(|| format!("decomposing {}", q.query_id))?;
        supervision.push((subqueries.into_iter().map(|s| s.text).collect(), q.gt_video_id.clone(), q.gt_object_ids.clone()));
    }
    let tc = TrainConfig { seed, epochs, ..TrainConfig::default() };
    let dataset = mine_examples(&supervision, &index, tc.negatives_per_positive, seed);
    let outcome = train(&dataset, provider.as_ref(), &tc)?;
    tracing::info!(loss = ?outcome.loss_trace, "training finished");
    write_out(Some(out), &(heads_to_json(&outcome.heads, &tc) + "\n"), &mut std::io::sink())
}

fn query(args: &EngineArgs, text: &str, format: Format, stdout: &mut dyn Write) -> Result<(), Failure> {
    if text.trim().is_empty() {
        return Err(Failure::usage(anyhow::anyhow!("--query must not be empty")));
    }
    let config = resolve_config(args)?;
    let engine = Engine::load(config)?;
    let response = engine.retrieve(text, RetrieveOptions::default())?;
    let body = match format {
        Format::Json => response.to_json() + "\n",
        Format::Table => response.to_table(engine.config().k),
    };
    stdout.write_all(body.as_bytes()).map_err(|e| Failure::from(anyhow::Error::new(e)))
}

fn eval(args: &EngineArgs, out: Option<&Path>, format: Format, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let config = resolve_config(args)?;
    let engine = Engine::load(config)?;
    let evaluation = engine.evaluate()?;
    let text = match format {
        Format::Json => evaluation.report.to_json() + "\n",
        Format::Table => evaluation.report.to_table(),
    };
    write_out(out, &text, stdout)
}

fn generate(out: &Path, seed: u64, videos: usize, distractors: usize, queries: usize, stdout: &mut dyn Write) -> anyhow::Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        bail!("{} exists and is not empty", out.display());
    }
    let spec = SyntheticSpec { seed, videos, distractors, queries, ..SyntheticSpec::default() };
    let generated = generate_synthetic(&spec, out)?;
    writeln!(stdout, "{}", json!({"root": out.display().to_string(), "videos": videos, "queries": generated.queries.len()}))?;
    Ok(())
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<(), Failure> {
    match cli.command {
        Command::Ingest { input, out } => ingest(&input, out.as_deref(), stdout)?,
        Command::Relate { benchmark, out } => relate(&benchmark, &out)?,
        Command::Index { benchmark, heads, dim, out } => build_index_file(&benchmark, heads.as_deref(), dim, &out)?,
        Command::Train { engine, seed, epochs, out } => train_heads(&engine, seed, epochs, &out)?,
        Command::Query { engine, query: text, format } => query(&engine, &text, format, stdout)?,
        Command::Eval { engine, out, format } => eval(&engine, out.as_deref(), format, stdout)?,
        Command::Generate { out, seed, videos, distractors, queries } => generate(&out, seed, videos, distractors, queries, stdout)?,
        Command::Serve { engine, addr } => {
            let config = resolve_config(&engine)?;
            crate::server::serve_blocking(config, &addr)?;
        }
    }
    Ok(())
}

/// Run the CLI and return the process exit status. Errors go to `stderr` as
/// one JSON object.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let status = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if status == EXIT_OK { stdout.write_all(rendered.as_bytes()) } else { stderr.write_all(rendered.as_bytes()) };
            return status;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let chain: Vec<String> = f.error.chain().skip(1).map(|c| c.to_string()).collect();
            let doc = json!({"error": {"kind": f.kind, "message": f.error.to_string(), "causes": chain}});
            let _ = writeln!(stderr, "{doc}");
            f.status
        }
    }
}

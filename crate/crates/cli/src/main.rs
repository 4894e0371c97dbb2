mod io;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use otq::degrade::{degrade_corpus, DegradeKind, DegradeSpec, SWEEP_KEEP_RATIOS};
use otq::label_sim::{load_similarity_table, MissingPolicy, SimilarityProtocol};
use otq::pipeline::{run_pipeline, Limits, ScriptedMocks};
use otq::quality::{evaluate_corpus, Pooling};
use otq::stats::{compat_eval, corpus_stats, render_compat_table, render_stats_table};
use otq::synth::{synth_corpus, SynthParams};
use otq::tree::{parse_corpus_lines, serialize_corpus, serialize_tree};
use otq::OpenTree;

use io::{emit, fail, read_corpus, read_text, Class, Classify, CmdResult};
use report::{render_evaluation, render_sweep, to_json, Format, SweepRow};

#[derive(Parser, Debug)]
#[command(name = "otq", version, about = "Open Tree Quality evaluation and corpus tools")]
struct Cli {
    /// Worker threads for per-image parallelism (defaults to all cores).
    #[arg(long, global = true, env = "OTQ_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score predicted trees against reference trees.
    Evaluate(EvaluateArgs),
    /// Apply a controlled corruption to a corpus.
    Degrade(DegradeArgs),
    /// Evaluate every degradation kind and keep ratio against the clean corpus.
    Sweep(SweepArgs),
    /// Depth and mask-size statistics of a corpus.
    Stats(StatsArgs),
    /// Recall of reference masks by a candidate corpus, ignoring hierarchy.
    Compat(CompatArgs),
    /// Re-parent every node onto the root.
    ProjectFlat(InOut),
    /// Check every line of a corpus and report the invalid ones.
    Validate(ValidateArgs),
    /// Run the annotation pipeline with scripted proposer and grounder.
    Pipeline(PipelineArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct ScoringArgs {
    /// strict, lq1, or table:<path> (JSONL rows {"a", "b", "sim"}).
    #[arg(long, default_value = "strict")]
    label_sim: String,
    /// Similarity for pairs missing from the table; missing pairs are an error if unset.
    #[arg(long)]
    table_default: Option<f64>,
    #[arg(long, default_value_t = otq::DEFAULT_TAU_NODE)]
    tau: f64,
    #[arg(long, value_enum, default_value_t = PoolingArg::Macro)]
    pooling: PoolingArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    Macro,
    Micro,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Profile {
    Dense,
    Shallow,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    kind: String,
    #[arg(long)]
    keep: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Comma-separated kinds; all kinds by default.
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_KEEP_RATIOS)]
    keeps: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompatArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InOut {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    script: PathBuf,
    #[arg(long)]
    max_depth: Option<u32>,
    #[arg(long)]
    max_children: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Profile::Shallow)]
    profile: Profile,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn protocol(args: &ScoringArgs) -> CmdResult<SimilarityProtocol> {
    match args.label_sim.as_str() {
        "strict" => Ok(SimilarityProtocol::Strict),
        "lq1" => Ok(SimilarityProtocol::ConstantOne),
        other => {
            let Some(path) = other.strip_prefix("table:") else {
                return fail(Class::Config, format!("unknown --label-sim {other:?}; use strict, lq1 or table:<path>"));
            };
            let missing = match args.table_default {
                None => MissingPolicy::Reject,
                Some(v) if (0.0..=1.0).contains(&v) => MissingPolicy::Default(v),
                Some(v) => return fail(Class::Config, format!("--table-default {v} outside [0, 1]")),
            };
            let text = read_text(Path::new(path))?;
            load_similarity_table(text.as_bytes(), missing)
                .map_err(|e| anyhow::anyhow!("{path}: {e}"))
                .or_class(Class::Validation)
        }
    }
}

fn check_tau(tau: f64) -> CmdResult {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        fail(Class::Config, format!("--tau must lie in (0, 1], got {tau}"))
    }
}

fn pooling(p: PoolingArg) -> Pooling {
    match p {
        PoolingArg::Macro => Pooling::Macro,
        PoolingArg::Micro => Pooling::Micro,
    }
}

fn degrade_spec(kind: &str, keep: f64, seed: u64) -> CmdResult<DegradeSpec> {
    let kind: DegradeKind = kind.parse().or_class(Class::Config)?;
    DegradeSpec::new(kind, keep, seed).or_class(Class::Config)
}

fn cmd_evaluate(a: EvaluateArgs) -> CmdResult {
    check_tau(a.scoring.tau)?;
    let proto = protocol(&a.scoring)?;
    let preds = read_corpus(&a.pred)?;
    let refs = read_corpus(&a.reference)?;
    let rep = evaluate_corpus(&preds, &refs, &proto, a.scoring.tau, pooling(a.scoring.pooling)).or_class(Class::Validation)?;
    emit(a.out.as_deref(), &render_evaluation(&rep, a.format))
}

fn cmd_degrade(a: DegradeArgs) -> CmdResult {
    let spec = degrade_spec(&a.kind, a.keep, a.seed)?;
    let corpus = read_corpus(&a.input)?;
    let out = degrade_corpus(&corpus, &spec);
    emit(a.out.as_deref(), serialize_corpus(&out).as_bytes())
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    check_tau(a.scoring.tau)?;
    let proto = protocol(&a.scoring)?;
    let kinds: Vec<String> = if a.kinds.is_empty() {
        DegradeKind::ALL.iter().map(|k| k.name().to_string()).collect()
    } else {
        a.kinds.clone()
    };
    let mut specs = Vec::new();
    for k in &kinds {
        for &keep in &a.keeps {
            specs.push(degrade_spec(k, keep, a.seed)?);
        }
    }
    let refs = read_corpus(&a.reference)?;
    let pool = pooling(a.scoring.pooling);
    let score = |preds: &[OpenTree]| {
        evaluate_corpus(preds, &refs, &proto, a.scoring.tau, pool)
            .map(|r| r.corpus.scores)
            .or_class(Class::Validation)
    };
    let mut rows = vec![SweepRow {
        kind: "gt".into(),
        keep: 1.0,
        scores: score(&refs)?,
    }];
    for spec in specs {
        let preds = degrade_corpus(&refs, &spec);
        rows.push(SweepRow {
            kind: spec.kind.name().into(),
            keep: spec.keep_ratio,
            scores: score(&preds)?,
        });
    }
    emit(a.out.as_deref(), &render_sweep(&rows, a.format))
}

fn cmd_stats(a: StatsArgs) -> CmdResult {
    let corpus = read_corpus(&a.input)?;
    let s = corpus_stats(&corpus);
    let bytes = match a.format {
        Format::Json => to_json(&s),
        Format::Table => render_stats_table(&s).into_bytes(),
        Format::Csv => return fail(Class::Config, "stats supports json or table output"),
    };
    emit(a.out.as_deref(), &bytes)
}

fn cmd_compat(a: CompatArgs) -> CmdResult {
    let cands = read_corpus(&a.candidates)?;
    let refs = read_corpus(&a.reference)?;
    let rep = compat_eval(&cands, &refs).or_class(Class::Validation)?;
    let bytes = match a.format {
        Format::Json => to_json(&rep),
        Format::Table => render_compat_table(&rep).into_bytes(),
        Format::Csv => return fail(Class::Config, "compat supports json or table output"),
    };
    emit(a.out.as_deref(), &bytes)
}

fn cmd_project_flat(a: InOut) -> CmdResult {
    let corpus = read_corpus(&a.input)?;
    let flat: Vec<OpenTree> = corpus.iter().map(OpenTree::flattened).collect();
    emit(a.out.as_deref(), serialize_corpus(&flat).as_bytes())
}

fn cmd_validate(a: ValidateArgs) -> CmdResult {
    let text = read_text(&a.input)?;
    let mut seen = std::collections::BTreeMap::new();
    let mut problems = Vec::new();
    let mut n = 0;
    for (line, res) in parse_corpus_lines(&text) {
        n += 1;
        match res {
            Ok(t) => {
                if let Some(first) = seen.insert(t.image_id().to_string(), line) {
                    problems.push(format!("line {line}: duplicate image_id {:?} (first on line {first})", t.image_id()));
                }
            }
            Err(e) => problems.push(format!("line {line}: {e}")),
        }
    }
    if problems.is_empty() {
        println!("{}: {n} trees valid", a.input.display());
        Ok(())
    } else {
        for p in &problems {
            eprintln!("{p}");
        }
        fail(Class::Validation, format!("{} of {n} lines invalid", problems.len()))
    }
}

fn cmd_pipeline(a: PipelineArgs) -> CmdResult {
    let text = read_text(&a.script)?;
    let mocks = ScriptedMocks::from_json(text.as_bytes()).or_class(Class::Validation)?;
    let limits = Limits {
        max_depth: a.max_depth,
        max_children: a.max_children,
    };
    let out = run_pipeline(&mocks.canvas, &mocks, &mocks, limits).or_class(Class::Validation)?;
    let mut bytes = serialize_tree(&out.tree);
    bytes.push(b'\n');
    emit(a.out.as_deref(), &bytes)
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let params = match a.profile {
        Profile::Dense => SynthParams::dense(),
        Profile::Shallow => SynthParams::shallow(),
    };
    emit(a.out.as_deref(), serialize_corpus(&synth_corpus(&params, a.seed, a.n)).as_bytes())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(Class::Config, "--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().or_class(Class::Config)?;
    }
    match cli.command {
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Compat(a) => cmd_compat(a),
        Command::ProjectFlat(a) => cmd_project_flat(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Class::Config as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.class as u8)
        }
    }
}

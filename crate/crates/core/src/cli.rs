//! Command-line front end: `run`, `audit`, `compose`, `metrics`, `sweep`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{load_config, parse_config, FileConfig};
use crate::corpus::{compute_corpus_stats, load_corpus, Corpus, CorpusFormat};
use crate::error::{Error, Result};
use crate::model::init_lm;
use crate::privacy::{compose_epsilons, PrivacyLedger};
use crate::seed::derive_seed;
use crate::sensitivity::build_profile;
use crate::synth;
use crate::trainer::{
    avg_acc, bwt, last_acc, run_continual, sculpt_reports_csv, AccuracyMatrix, Mode, RunConfig, RunOutcome,
    SculptReport, SCULPT_COLUMNS,
};

#[derive(Debug, Parser)]
#[command(name = "privcl", version, about = "Token-level private continual training of a tiny language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the task stream and write the results bundle.
    Run(RunArgs),
    /// Write per-token sensitivity scores for every training sequence.
    Audit(AuditArgs),
    /// Print the composed privacy cost of a ledger.
    Compose(ComposeArgs),
    /// Recompute bwt/last/avg from a matrix.csv.
    Metrics(MetricsArgs),
    /// Run a seeded grid over alpha, theta, or lambda_unlearn.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// JSON-lines corpus; overrides the config and the synthetic stream.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Re-read every emitted file and validate it against its schema.
    #[arg(long)]
    pub self_check: bool,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Score with a trained model instead of a freshly initialized one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[arg(long)]
    pub ledger: PathBuf,
    /// Supplies delta and delta_prime; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Compose only this sequence's records.
    #[arg(long)]
    pub sequence: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub matrix: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sweep_param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub sweep_values: Vec<f64>,
    /// Number of consecutive seeds per grid point.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub seed: u64,
    pub task_order: Vec<u32>,
    pub bwt: f64,
    pub last: f64,
    pub avg: f64,
    pub ledger_records: usize,
    pub tasks: Vec<SculptReport>,
}

/// Summary metrics with N=1 backward transfer reported as 0.
pub fn summarize(matrix: &AccuracyMatrix) -> Result<(f64, f64, f64, Option<&'static str>)> {
    let last = last_acc(matrix)?;
    let avg = avg_acc(matrix)?;
    if matrix.n() < 2 {
        return Ok((0.0, last, avg, Some("backward transfer is undefined for a single task; reporting 0")));
    }
    Ok((bwt(matrix)?, last, avg, None))
}

impl MetricsReport {
    pub fn from_outcome(config: &RunConfig, outcome: &RunOutcome) -> Result<Self> {
        let (bwt, last, avg, _) = summarize(&outcome.matrix)?;
        Ok(Self {
            mode: config.mode,
            seed: config.seed,
            task_order: outcome.matrix.task_ids.clone(),
            bwt,
            last,
            avg,
            ledger_records: outcome.ledger.len(),
            tasks: outcome.reports.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

/// Parses arguments, runs the command, and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match run_command(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run_command(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Run(args) => cmd_run(&args, out),
        Command::Audit(args) => cmd_audit(&args, out),
        Command::Compose(args) => cmd_compose(&args, out),
        Command::Metrics(args) => cmd_metrics(&args, out),
        Command::Sweep(args) => cmd_sweep(&args, out),
    }
}

fn resolve(common: &CommonArgs) -> Result<(FileConfig, RunConfig)> {
    let (mut file, _) = match &common.config {
        Some(p) => load_config(p)?,
        None => parse_config("{}")?,
    };
    if let Some(seed) = common.seed {
        file.seed = seed;
    }
    if let Some(mode) = common.mode {
        file.mode = mode;
    }
    if let Some(c) = &common.corpus {
        file.corpus = Some(c.clone());
    }
    let run = file.resolve()?;
    Ok((file, run))
}

/// The configured corpus file, or the synthetic stream.
pub fn load_run_corpus(file: &FileConfig, run: &RunConfig) -> Result<Corpus> {
    match &file.corpus {
        Some(p) => load_corpus(p, CorpusFormat::JsonLines, run.vocab_cap),
        None => Corpus::from_records(&synth::generate(&run.synth_config())?, run.vocab_cap),
    }
}

fn write_out(stdout: &mut dyn Write, line: String) -> Result<()> {
    writeln!(stdout, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// Tracks files written into an output directory and removes them unless committed.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

pub const BUNDLE_FILES: [&str; 6] = ["matrix.csv", "metrics.json", "ledger.csv", "model.ckpt", "run_config.json", "sculpt.csv"];

fn cmd_run(args: &RunArgs, stdout: &mut dyn Write) -> Result<()> {
    let (file, run) = resolve(&args.common)?;
    let corpus = load_run_corpus(&file, &run)?;
    let outcome = run_continual(&run, &corpus)?;
    let report = MetricsReport::from_outcome(&run, &outcome)?;

    let mut outs = Outputs::create(&args.out)?;
    outs.write("matrix.csv", &outcome.matrix.to_csv())?;
    outs.write("metrics.json", &report.to_json())?;
    let ledger_path = outs.path("ledger.csv");
    outcome.ledger.write_csv(&ledger_path)?;
    let ckpt_path = outs.path("model.ckpt");
    Checkpoint {
        model: outcome.model.clone(),
        adapter: Some(outcome.adapter.clone()),
        task_id: *outcome.matrix.task_ids.last().unwrap(),
    }
    .save(&ckpt_path)?;
    outs.write("run_config.json", &(file.to_json() + "\n"))?;
    outs.write("sculpt.csv", &sculpt_reports_csv(&outcome.reports))?;
    if args.self_check {
        self_check(&args.out)?;
    }
    outs.committed = true;

    if let (_, _, _, Some(w)) = summarize(&outcome.matrix)? {
        eprintln!("warning: {w}");
    }
    write_out(stdout, format!("bwt={} last={} avg={}", report.bwt, report.last, report.avg))?;
    write_out(stdout, format!("ledger_records={}", report.ledger_records))?;
    write_out(stdout, format!("wrote {}", args.out.display()))
}

/// Validates every file of a results bundle against its schema.
pub fn self_check(dir: &Path) -> Result<()> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let (file, run) = parse_config(&read("run_config.json")?)
        .map_err(|e| Error::Data(format!("run_config.json: {e}")))?;
    let matrix = AccuracyMatrix::from_csv(&read("matrix.csv")?)?;
    if !matrix.is_complete() {
        return Err(Error::Data("matrix.csv is not a complete lower triangle".into()));
    }
    let report: MetricsReport = serde_json::from_str(&read("metrics.json")?)
        .map_err(|e| Error::Data(format!("metrics.json: {e}")))?;
    let (b, l, a, _) = summarize(&matrix)?;
    if (b, l, a) != (report.bwt, report.last, report.avg) {
        return Err(Error::Data("metrics.json disagrees with matrix.csv".into()));
    }
    if report.task_order != matrix.task_ids || report.tasks.len() != matrix.n() || report.mode != file.mode {
        return Err(Error::Data("metrics.json does not describe this run".into()));
    }
    let ledger = PrivacyLedger::read_csv(&dir.join("ledger.csv"), run.privacy.delta, run.privacy.delta_prime)?;
    if ledger.len() != report.ledger_records {
        return Err(Error::Data("ledger.csv record count disagrees with metrics.json".into()));
    }
    let ckpt = Checkpoint::load(&dir.join("model.ckpt"))?;
    if ckpt.model.dims.d_emb != run.d_emb || ckpt.model.dims.n_ctx != run.n_ctx || ckpt.model.dims.d_hidden != run.d_hidden {
        return Err(Error::Data("model.ckpt dimensions disagree with run_config.json".into()));
    }
    let sculpt = read("sculpt.csv")?;
    let mut lines = sculpt.lines();
    if lines.next() != Some(SCULPT_COLUMNS.join(",").as_str()) || lines.count() != matrix.n() {
        return Err(Error::Data("sculpt.csv does not match its schema".into()));
    }
    Ok(())
}

pub const AUDIT_COLUMNS: [&str; 10] = [
    "task_id", "sequence_id", "position", "surface", "score1", "score2", "score", "epsilon", "sigma", "stopword",
];

fn cmd_audit(args: &AuditArgs, stdout: &mut dyn Write) -> Result<()> {
    let (file, run) = resolve(&args.common)?;
    let corpus = load_run_corpus(&file, &run)?;
    let (model, adapter) = match &args.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.model.dims.vocab != corpus.vocab.len() {
                return Err(Error::Data(format!(
                    "checkpoint vocabulary has {} entries, corpus has {}",
                    ck.model.dims.vocab,
                    corpus.vocab.len()
                )));
            }
            (ck.model, ck.adapter)
        }
        None => (init_lm(run.dims(corpus.vocab.len()), derive_seed(run.seed, "init"))?, None),
    };
    let order = run.resolve_order(&corpus)?;
    let tasks: Vec<_> = order.iter().map(|t| corpus.task(*t).unwrap()).collect();
    let stats = compute_corpus_stats(tasks.iter().copied(), run.tau)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(format!("audit csv: {e}"));
    w.write_record(AUDIT_COLUMNS).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut rows = 0usize;
    for task in &tasks {
        for seq in &task.train {
            let profile = build_profile(&model, adapter.as_ref(), &stats, &corpus.vocab, seq, &run.sensitivity, &run.privacy)?;
            for (pos, e) in profile.entries.iter().enumerate() {
                w.write_record([
                    task.task_id.to_string(),
                    seq.id.to_string(),
                    pos.to_string(),
                    corpus.vocab.surface(e.token).to_string(),
                    e.score1.to_string(),
                    e.score2.to_string(),
                    e.score.to_string(),
                    opt(e.epsilon),
                    opt(e.sigma),
                    e.is_stopword.to_string(),
                ])
                .map_err(csv_err)?;
                rows += 1;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("audit csv: {e}")))?;
    let mut outs = Outputs::create(&args.out)?;
    let p = outs.path("audit.csv");
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    outs.committed = true;
    write_out(stdout, format!("audited {rows} tokens -> {}", p.display()))
}

fn cmd_compose(args: &ComposeArgs, stdout: &mut dyn Write) -> Result<()> {
    let (_, run) = match &args.config {
        Some(p) => load_config(p)?,
        None => parse_config("{}")?,
    };
    let ledger = PrivacyLedger::read_csv(&args.ledger, run.privacy.delta, run.privacy.delta_prime)?;
    let eps: Vec<f64> = ledger
        .records()
        .iter()
        .filter(|r| args.sequence.is_none_or(|s| r.sequence_id == s))
        .map(|r| r.epsilon)
        .collect();
    if eps.is_empty() {
        return Err(Error::Data(format!("{}: no ledger records to compose", args.ledger.display())));
    }
    let c = compose_epsilons(&eps, ledger.delta, ledger.delta_prime)?;
    write_out(
        stdout,
        format!("epsilon_total={} delta_total={} L={}", c.epsilon_total, c.delta_total, c.count),
    )
}

fn cmd_metrics(args: &MetricsArgs, stdout: &mut dyn Write) -> Result<()> {
    let raw = fs::read_to_string(&args.matrix).map_err(|e| Error::io(&args.matrix, e))?;
    let matrix = AccuracyMatrix::from_csv(&raw)?;
    let (b, l, a, warn) = summarize(&matrix)?;
    if let Some(w) = warn {
        eprintln!("warning: {w}");
    }
    write_out(stdout, format!("bwt={b} last={l} avg={a}"))
}

pub const SWEEP_PARAMS: [&str; 3] = ["alpha", "theta", "lambda_unlearn"];
pub const SWEEP_COLUMNS: [&str; 7] = ["param", "value", "seed", "bwt", "last", "avg", "ledger_records"];

fn cmd_sweep(args: &SweepArgs, stdout: &mut dyn Write) -> Result<()> {
    if !SWEEP_PARAMS.contains(&args.sweep_param.as_str()) {
        return Err(Error::Usage(format!(
            "--sweep-param must be one of {}, got `{}`",
            SWEEP_PARAMS.join(", "),
            args.sweep_param
        )));
    }
    if args.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let (base, _) = resolve(&args.common)?;
    let mut text = SWEEP_COLUMNS.join(",");
    text.push('\n');
    for &value in &args.sweep_values {
        for offset in 0..args.seeds {
            let mut file = base.clone();
            file.seed = base.seed.wrapping_add(offset);
            match args.sweep_param.as_str() {
                "alpha" => file.alpha = value,
                "theta" => file.theta = value,
                _ => file.lambda_unlearn = value,
            }
            let run = file.resolve()?;
            let corpus = load_run_corpus(&file, &run)?;
            let outcome = run_continual(&run, &corpus)?;
            let (b, l, a, _) = summarize(&outcome.matrix)?;
            text.push_str(&format!(
                "{},{value},{},{b},{l},{a},{}\n",
                args.sweep_param,
                file.seed,
                outcome.ledger.len()
            ));
            write_out(stdout, format!("{}={value} seed={} bwt={b} last={l} avg={a}", args.sweep_param, file.seed))?;
        }
    }
    let mut outs = Outputs::create(&args.out)?;
    outs.write("sweep.csv", &text)?;
    outs.committed = true;
    Ok(())
}

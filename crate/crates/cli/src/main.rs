use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use relpos_core::corpus::{filter_subset, histogram, load_any, load_squad, save_subset_tagged, split_by_overlap};
use relpos_core::debias::{train, train_posonly, BiasedModel, BiasedModelSpec, DebiasConfig, Method};
use relpos_core::eval::{evaluate_stratified, render_grid, render_report, GridRow, ReportFormat, ReportMeta, StratifiedReport};
use relpos_core::qa_model::QaModel;
use relpos_core::synthetic::{generate, to_squad_json, SyntheticConfig};
use relpos_core::{Error, SubsetCondition};

#[derive(Parser, Debug)]
#[command(name = "relpos", version, about = "Relative-position bias analysis and debiased training for extractive QA")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` training config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Histogram of relative positions with exclusion counts.
    Analyze {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes the examples satisfying a relative-position condition.
    Filter {
        input: PathBuf,
        /// One of d<=-1, |d|=1, d=0, d>=1, all.
        #[arg(long)]
        cond: SubsetCondition,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the position-only biased model.
    TrainPosonly {
        subset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the line-delimited training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Trains the main model with the configured objective.
    Train {
        subset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Development set scored after every epoch.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stratified F1/EM of a trained model.
    Evaluate {
        checkpoint: PathBuf,
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Trains and evaluates every subset/method combination.
    Grid {
        manifest: PathBuf,
        /// Number of concurrent worker processes.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a generated corpus with controllable relative positions.
    Synth {
        /// Output directory for train.json and dev.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train_size: usize,
        #[arg(long, default_value_t = 1000)]
        dev_size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Tsv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => ReportFormat::Table,
            Format::Tsv => ReportFormat::Delimited,
        }
    }
}

/// A worker process of the grid exited unsuccessfully.
#[derive(Debug)]
struct ChildFailed {
    args: Vec<String>,
    code: Option<i32>,
}

impl fmt::Display for ChildFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "worker `relpos {}` failed with status {:?}", self.args.join(" "), self.code)
    }
}

impl std::error::Error for ChildFailed {}

const EXIT_USAGE: i32 = 1;
const EXIT_DATA: i32 = 2;
const EXIT_NUMERICAL: i32 = 3;

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_numerical() {
                EXIT_NUMERICAL
            } else if matches!(e, Error::Config(_) | Error::AnsPriorCondition) {
                EXIT_USAGE
            } else {
                EXIT_DATA
            };
        }
        if let Some(c) = cause.downcast_ref::<ChildFailed>() {
            return c.code.unwrap_or(EXIT_DATA);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(run(&args));
}

/// Parses `argv` and executes it, returning the process exit code.
fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}

/// The error chain on one line, without repeating a cause that its parent
/// message already includes.
fn describe(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if parts.last().is_some_and(|prev| prev.ends_with(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ")
}

/// Relative inputs are looked up under `RELPOS_DATA_DIR` when it is set.
fn input_path(p: &Path) -> PathBuf {
    match std::env::var_os("RELPOS_DATA_DIR") {
        Some(root) if p.is_relative() && !root.is_empty() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn check_input(p: &Path) -> anyhow::Result<PathBuf> {
    let resolved = input_path(p);
    if !resolved.is_file() {
        return Err(Error::Io {
            path: resolved.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        })
        .context("validating inputs");
    }
    Ok(resolved)
}

fn check_output(p: &Path) -> anyhow::Result<()> {
    let parent = p.parent().filter(|d| !d.as_os_str().is_empty());
    if let Some(dir) = parent {
        if !dir.is_dir() {
            return Err(Error::Io {
                path: dir.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
            })
            .context("validating outputs");
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn load_config(cli_config: Option<&Path>, seed: Option<u64>) -> anyhow::Result<DebiasConfig> {
    let mut cfg = match cli_config {
        Some(p) => {
            let p = check_input(p)?;
            let text = fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            DebiasConfig::parse(&text).with_context(|| format!("reading config {}", p.display()))?
        }
        None => DebiasConfig::desk_default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Analyze { input, out } => analyze(&cfg, &input, &out),
        Command::Filter { input, cond, out } => filter(&cfg, &input, cond, &out),
        Command::TrainPosonly { subset, out, log } => cmd_train_posonly(&cfg, &subset, &out, log.as_deref()),
        Command::Train { subset, out, dev, log } => cmd_train(&cfg, &subset, &out, dev.as_deref(), log.as_deref()),
        Command::Evaluate {
            checkpoint,
            dev,
            out,
            format,
            json,
        } => evaluate(&cfg, &checkpoint, &dev, &out, format, json.as_deref()),
        Command::Grid { manifest, parallel, out } => grid(&cfg, cli.config.as_deref(), &manifest, parallel, out.as_deref()),
        Command::Synth {
            out,
            train_size,
            dev_size,
        } => synth(&cfg, &out, train_size, dev_size),
    }
}

fn analyze(cfg: &DebiasConfig, input: &Path, out: &Path) -> anyhow::Result<()> {
    let input = check_input(input)?;
    check_output(out)?;
    let (examples, stats) = if input.extension().is_some_and(|e| e == "jsonl") {
        (load_any(&input)?, None)
    } else {
        let corpus = load_squad(&input)?;
        (corpus.examples, Some(corpus.stats))
    };
    let hist = histogram(&examples);
    let mut buf = Vec::new();
    hist.write_tsv(&mut buf, &cfg.hash())?;
    if let Some(s) = stats {
        writeln!(buf, "# missing_fields\t{}", s.missing_fields)?;
        writeln!(buf, "# unalignable_answers\t{}", s.unalignable_answers)?;
        writeln!(buf, "# unalignable_entries\t{}", s.unalignable_entries)?;
    }
    write_file(out, &buf)?;
    println!("examples\t{}", examples.len());
    for cond in SubsetCondition::BIASED {
        println!("subset {}\t{}", cond, filter_subset(&examples, cond).len());
    }
    let (_, no_overlap) = split_by_overlap(&examples);
    println!("no_overlap\t{}", no_overlap.len());
    if let Some(mode) = hist.mode() {
        println!("mode\t{mode}");
    }
    Ok(())
}

fn filter(cfg: &DebiasConfig, input: &Path, cond: SubsetCondition, out: &Path) -> anyhow::Result<()> {
    let input = check_input(input)?;
    check_output(out)?;
    let examples = load_any(&input)?;
    let subset = filter_subset(&examples, cond);
    save_subset_tagged(out, &subset, Some(&cfg.hash()))?;
    println!("{}\t{}", cond, subset.len());
    Ok(())
}

fn cmd_train_posonly(cfg: &DebiasConfig, subset: &Path, out: &Path, log: Option<&Path>) -> anyhow::Result<()> {
    let subset = check_input(subset)?;
    check_output(out)?;
    if let Some(l) = log {
        check_output(l)?;
    }
    let examples = load_any(&subset)?;
    let (model, train_log) = train_posonly(cfg, &examples)?;
    model.save(out)?;
    if let Some(l) = log {
        write_file(l, train_log.to_jsonl().as_bytes())?;
    }
    Ok(())
}

fn cmd_train(cfg: &DebiasConfig, subset: &Path, out: &Path, dev: Option<&Path>, log: Option<&Path>) -> anyhow::Result<()> {
    let subset = check_input(subset)?;
    let dev = dev.map(check_input).transpose()?;
    // The config keeps the path as written so its hash is unaffected.
    let expert_spec = match &cfg.biased_model {
        BiasedModelSpec::PosOnly(p) if cfg.method != Method::Standard => BiasedModelSpec::PosOnly(check_input(p)?),
        other => other.clone(),
    };
    check_output(out)?;
    if let Some(l) = log {
        check_output(l)?;
    }
    let train_set = load_any(&subset)?;
    let dev_set = match &dev {
        Some(p) => load_any(p)?,
        None => Vec::new(),
    };
    let biased = if cfg.method == Method::Standard {
        BiasedModel::None
    } else {
        BiasedModel::resolve(&expert_spec)?
    };
    let before = biased.fingerprint();
    let outcome = train(cfg, &biased, &train_set, &dev_set)?;
    if biased.fingerprint() != before {
        bail!("biased model changed during training");
    }
    outcome.model.save(out)?;
    if let Some(l) = log {
        write_file(l, outcome.log.to_jsonl().as_bytes())?;
    }
    Ok(())
}

fn evaluate(
    cfg: &DebiasConfig,
    checkpoint: &Path,
    dev: &Path,
    out: &Path,
    format: Format,
    json: Option<&Path>,
) -> anyhow::Result<()> {
    let checkpoint = check_input(checkpoint)?;
    let dev = check_input(dev)?;
    check_output(out)?;
    if let Some(j) = json {
        check_output(j)?;
    }
    let model = QaModel::load(&checkpoint)?;
    let examples = load_any(&dev)?;
    let meta = ReportMeta {
        config_hash: model.config_hash.clone(),
        seed: model.seed,
        dataset: dev.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let report = evaluate_stratified(&model, &examples, cfg.max_answer_len, meta)?;
    write_file(out, render_report(&report, format.into()).as_bytes())?;
    if let Some(j) = json {
        write_file(j, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(())
}

fn synth(cfg: &DebiasConfig, out: &Path, train_size: usize, dev_size: usize) -> anyhow::Result<()> {
    if !out.is_dir() {
        fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    }
    let scfg = SyntheticConfig::default();
    let train_set = generate(&scfg, train_size, cfg.seed, "train");
    let dev_set = generate(&scfg, dev_size, cfg.seed.wrapping_add(1), "dev");
    write_file(&out.join("train.json"), serde_json::to_string(&to_squad_json(&train_set))?.as_bytes())?;
    write_file(&out.join("dev.json"), serde_json::to_string(&to_squad_json(&dev_set))?.as_bytes())?;
    Ok(())
}

/// Grid inputs, read from a `key = value` file. Relative paths are taken
/// relative to the manifest's directory.
#[derive(Debug)]
struct Manifest {
    train: PathBuf,
    dev: PathBuf,
    work_dir: PathBuf,
}

fn parse_manifest(path: &Path) -> anyhow::Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let absolute = |v: &str| -> PathBuf {
        let p = PathBuf::from(v);
        let p = if p.is_relative() { base.join(p) } else { p };
        std::path::absolute(&p).unwrap_or(p)
    };
    let (mut train, mut dev, mut work_dir) = (None, None, None);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("manifest line {}: expected `key = value`", i + 1)))?;
        match k.trim() {
            "train" => train = Some(absolute(v.trim())),
            "dev" => dev = Some(absolute(v.trim())),
            "work_dir" => work_dir = Some(absolute(v.trim())),
            other => return Err(Error::Config(format!("manifest line {}: unknown key `{other}`", i + 1)).into()),
        }
    }
    let train = train.ok_or_else(|| Error::Config("manifest needs `train`".into()))?;
    let dev = dev.ok_or_else(|| Error::Config("manifest needs `dev`".into()))?;
    let work_dir = work_dir.unwrap_or_else(|| absolute("grid-work"));
    Ok(Manifest { train, dev, work_dir })
}

/// One trained model of the grid.
struct GridRun {
    trained_on: &'static str,
    subset_tag: &'static str,
    method: Method,
    /// `None`, `Some(false)` for the answer prior, `Some(true)` for the
    /// position-only model.
    posonly: Option<bool>,
}

impl GridRun {
    fn model_name(&self) -> String {
        match self.posonly {
            None => "Standard".into(),
            Some(false) => format!("{}-AnsPrior", self.method.display_name()),
            Some(true) => format!("{}-PosOnly", self.method.display_name()),
        }
    }

    fn tag(&self) -> String {
        format!("{}-{}", self.subset_tag, self.model_name().to_lowercase())
    }
}

fn subset_tag(cond: SubsetCondition) -> &'static str {
    match cond {
        SubsetCondition::DLeqMinus1 => "neg",
        SubsetCondition::AbsDEq1 => "abs1",
        SubsetCondition::DEq0 => "zero",
        SubsetCondition::DGeq1 => "pos",
        SubsetCondition::All => "all",
    }
}

/// Every (subset, model) row: the five models on each biased subset, then
/// the full-training-set rows.
fn grid_runs() -> Vec<(SubsetCondition, GridRun)> {
    let mut runs = Vec::new();
    for cond in SubsetCondition::BIASED {
        let mk = |method, posonly| GridRun {
            trained_on: cond.literal(),
            subset_tag: subset_tag(cond),
            method,
            posonly,
        };
        runs.push((cond, mk(Method::Standard, None)));
        runs.push((cond, mk(Method::BiasProduct, Some(false))));
        runs.push((cond, mk(Method::LearnedMixin, Some(false))));
        runs.push((cond, mk(Method::BiasProduct, Some(true))));
        runs.push((cond, mk(Method::LearnedMixin, Some(true))));
    }
    let all = SubsetCondition::All;
    for (method, posonly) in [
        (Method::Standard, None),
        (Method::BiasProduct, Some(true)),
        (Method::LearnedMixin, Some(true)),
    ] {
        runs.push((
            all,
            GridRun {
                trained_on: "ALL",
                subset_tag: subset_tag(all),
                method,
                posonly,
            },
        ));
    }
    runs
}

fn path_arg(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Runs CLI invocations in-process one after another, or as `parallel`
/// worker processes at a time.
fn run_jobs(jobs: &[Vec<String>], parallel: usize) -> anyhow::Result<()> {
    if parallel <= 1 {
        for job in jobs {
            let mut argv = vec!["relpos".to_string()];
            argv.extend(job.iter().cloned());
            let cli = Cli::try_parse_from(&argv).map_err(|e| anyhow!("internal job `{}`: {e}", job.join(" ")))?;
            execute(cli).with_context(|| format!("running `relpos {}`", job.join(" ")))?;
        }
        return Ok(());
    }
    let exe = std::env::current_exe().context("locating the relpos executable")?;
    for wave in jobs.chunks(parallel) {
        let children = wave
            .iter()
            .map(|job| {
                Process::new(&exe)
                    .args(job)
                    .spawn()
                    .map(|c| (job, c))
                    .with_context(|| format!("spawning `relpos {}`", job.join(" ")))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let mut failure = None;
        for (job, mut child) in children {
            let status = child.wait().context("waiting for a worker")?;
            if !status.success() && failure.is_none() {
                failure = Some(ChildFailed {
                    args: job.clone(),
                    code: status.code(),
                });
            }
        }
        if let Some(f) = failure {
            return Err(f.into());
        }
    }
    Ok(())
}

fn grid(
    cfg: &DebiasConfig,
    config_path: Option<&Path>,
    manifest_path: &Path,
    parallel: usize,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let manifest_path = check_input(manifest_path)?;
    let m = parse_manifest(&manifest_path)?;
    check_input(&m.train)?;
    check_input(&m.dev)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| m.work_dir.join("grid.txt"));
    fs::create_dir_all(&m.work_dir).map_err(|e| Error::Io { path: m.work_dir.clone(), source: e })?;
    check_output(&out)?;
    if let Some(p) = config_path {
        check_input(p)?;
    }
    let seed = cfg.seed.to_string();
    let w = |name: String| m.work_dir.join(name);

    // Subsets of the training set.
    let mut jobs = Vec::new();
    for cond in SubsetCondition::BIASED.into_iter().chain([SubsetCondition::All]) {
        jobs.push(vec![
            "--seed".into(),
            seed.clone(),
            "filter".into(),
            path_arg(&m.train),
            "--cond".into(),
            cond.literal().into(),
            "--out".into(),
            path_arg(&w(format!("subset-{}.jsonl", subset_tag(cond)))),
        ]);
    }
    run_jobs(&jobs, parallel)?;

    // Position-only experts, one per subset, trained with the base config.
    let base_cfg = w("base.cfg".into());
    write_file(&base_cfg, cfg.render().as_bytes())?;
    let mut jobs = Vec::new();
    for cond in SubsetCondition::BIASED.into_iter().chain([SubsetCondition::All]) {
        let tag = subset_tag(cond);
        jobs.push(vec![
            "--seed".into(),
            seed.clone(),
            "--config".into(),
            path_arg(&base_cfg),
            "train-posonly".into(),
            path_arg(&w(format!("subset-{tag}.jsonl"))),
            "--out".into(),
            path_arg(&w(format!("posonly-{tag}.ckpt"))),
            "--log".into(),
            path_arg(&w(format!("posonly-{tag}.log.jsonl"))),
        ]);
    }
    run_jobs(&jobs, parallel)?;

    // Main models.
    let runs = grid_runs();
    let mut train_jobs = Vec::new();
    let mut eval_jobs = Vec::new();
    for (cond, run) in &runs {
        let tag = run.tag();
        let mut rc = cfg.clone();
        rc.method = run.method;
        rc.biased_model = match run.posonly {
            None => BiasedModelSpec::None,
            Some(false) => BiasedModelSpec::AnsPrior(*cond),
            Some(true) => BiasedModelSpec::PosOnly(w(format!("posonly-{}.ckpt", run.subset_tag))),
        };
        let run_cfg = w(format!("{tag}.cfg"));
        write_file(&run_cfg, rc.render().as_bytes())?;
        let ckpt = w(format!("{tag}.ckpt"));
        train_jobs.push(vec![
            "--seed".into(),
            seed.clone(),
            "--config".into(),
            path_arg(&run_cfg),
            "train".into(),
            path_arg(&w(format!("subset-{}.jsonl", run.subset_tag))),
            "--out".into(),
            path_arg(&ckpt),
            "--log".into(),
            path_arg(&w(format!("{tag}.log.jsonl"))),
        ]);
        eval_jobs.push(vec![
            "--seed".into(),
            seed.clone(),
            "--config".into(),
            path_arg(&run_cfg),
            "evaluate".into(),
            path_arg(&ckpt),
            path_arg(&m.dev),
            "--out".into(),
            path_arg(&w(format!("{tag}.report.txt"))),
            "--json".into(),
            path_arg(&w(format!("{tag}.report.json"))),
        ]);
    }
    run_jobs(&train_jobs, parallel)?;
    run_jobs(&eval_jobs, parallel)?;

    let mut rows = Vec::with_capacity(runs.len());
    for (_, run) in &runs {
        let path = w(format!("{}.report.json", run.tag()));
        let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        let report: StratifiedReport = serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))?;
        rows.push(GridRow {
            trained_on: run.trained_on.to_string(),
            model: run.model_name(),
            report,
        });
    }
    write_file(&out, render_grid(&rows, ReportFormat::Table).as_bytes())?;
    let mut tsv = out.clone().into_os_string();
    tsv.push(".tsv");
    write_file(Path::new(&tsv), render_grid(&rows, ReportFormat::Delimited).as_bytes())?;
    println!("{} runs; report at {}", rows.len(), out.display());
    Ok(())
}

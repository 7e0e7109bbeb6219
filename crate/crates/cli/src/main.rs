use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sodade::baselines::{avg_fit_predict, compare_on_test, gp_fit_predict, write_comparison};
use sodade::config::RunConfig;
use sodade::dataio::{
    default_type_lists, load_aliases, load_catechol, load_spange, split_solvents, write_catechol, write_spange,
    AliasMap, ReactionRecord, SolventRecord, SolventTable,
};
use sodade::downstream::{export_predictions, run_benchmark, write_summary, Mode, Task};
use sodade::fingerprint::{embedding_trajectory, write_fingerprints, write_trajectory, Encoder};
use sodade::pretrain::{evaluate_test_table, evaluate_validation, train, write_history, write_test_table, Checkpoint};
use sodade::synth::{synth_reactions, synth_solvents, SynthConfig};
use sodade::Error;

#[derive(Parser)]
#[command(name = "sodade", version, about = "Pretrained solvent descriptors: training, export and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone on a solvent table.
    Pretrain(PretrainArgs),
    /// Score a checkpoint on its validation or test solvents.
    Eval(EvalArgs),
    /// Export learned fingerprints.
    Fingerprint(FingerprintArgs),
    /// Cross-validated yield prediction on a reaction table.
    Benchmark(BenchmarkArgs),
    /// Reference predictors on the held-out test solvents.
    Baseline(BaselineArgs),
    /// PCA coordinates of fingerprints across training snapshots.
    Trajectory(TrajectoryArgs),
    /// Write generated solvent and reaction tables.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key = value file; overrides defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, e.g. `--set train.max_epochs=50`; beats the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    spange: PathBuf,
    /// Reaction table used to rank solvent types for the split.
    #[arg(long)]
    catechol: Option<PathBuf>,
    #[arg(long)]
    aliases: Option<PathBuf>,
    /// Comma-separated validation types (one complete solvent drawn per type).
    #[arg(long, value_delimiter = ',')]
    val_types: Vec<String>,
    /// Comma-separated test types.
    #[arg(long, value_delimiter = ',')]
    test_types: Vec<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Run every config file in this directory.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    spange: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitName,
    /// Per-property table (test split only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FingerprintArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    spange: PathBuf,
    #[arg(long, conflicts_with = "all", required_unless_present = "all")]
    solvent: Option<String>,
    #[arg(long)]
    all: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Single,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Frozen,
    Finetune,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    spange: PathBuf,
    #[arg(long)]
    catechol: PathBuf,
    #[arg(long)]
    aliases: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, value_enum, default_value = "frozen")]
    mode: ModeArg,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "benchmark")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineModel {
    Avg,
    Gp,
    /// Both baselines next to the checkpoint's own errors.
    All,
}

#[derive(Args)]
struct BaselineArgs {
    /// Checkpoint supplying the split and training statistics.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    spange: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    model: BaselineModel,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrajectoryArgs {
    /// Directory of snapshot checkpoints.
    #[arg(long)]
    snapshots: PathBuf,
    #[arg(long)]
    spange: PathBuf,
    #[arg(long)]
    catechol: PathBuf,
    #[arg(long)]
    aliases: Option<PathBuf>,
    #[arg(long, default_value = "trajectory.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    rows: usize,
    #[arg(long, default_value_t = 12)]
    types: usize,
    /// Solvents that appear in the reaction table.
    #[arg(long, default_value_t = 24)]
    reaction_solvents: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

/// Bad invocation, reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} file not found: {}", path.display())));
    }
    Ok(())
}

fn summary(command: &str, seed: u64, metric: &str, value: f64) {
    println!("{}", json!({ "command": command, "seed": seed, "metric": metric, "primary_metric": value }));
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn resolve_config(args: &ConfigArgs, base: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for path in base.into_iter().chain(args.config.as_deref()) {
        require_file(path, "config")?;
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.head.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_table(path: &Path) -> anyhow::Result<SolventTable> {
    require_file(path, "solvent table")?;
    Ok(load_spange(path)?)
}

fn load_reactions(path: &Path, aliases: Option<&Path>, table: &SolventTable) -> anyhow::Result<Vec<ReactionRecord>> {
    require_file(path, "reaction table")?;
    let aliases = match aliases {
        Some(p) => {
            require_file(p, "alias")?;
            load_aliases(p)?
        }
        None => AliasMap::default(),
    };
    Ok(load_catechol(path, table, &aliases)?)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    require_file(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

/// Explicit type flags win over the defaults derived from the tables.
fn type_lists(args: &PretrainArgs, table: &SolventTable) -> anyhow::Result<(Vec<String>, Vec<String>)> {
    let reactions = match &args.catechol {
        Some(p) => Some(load_reactions(p, args.aliases.as_deref(), table)?),
        None => None,
    };
    let (val, test) = default_type_lists(table, reactions.as_deref());
    let val = if args.val_types.is_empty() { val } else { args.val_types.clone() };
    let test = if args.test_types.is_empty() { test } else { args.test_types.clone() };
    Ok((val, test))
}

/// One training run into `out`; returns the best validation loss.
fn pretrain_one(
    table: &SolventTable,
    types: &(Vec<String>, Vec<String>),
    cfg: &RunConfig,
    out: &Path,
) -> anyhow::Result<f64> {
    log::info!("resolved config:\n{}", cfg.to_text());
    let split = split_solvents(table, &types.0, &types.1, cfg.train.seed)?;
    log::info!("split: {} train, validation {:?}, test {:?}", split.train_ids.len(), split.val_ids, split.test_ids);
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let outcome = train(table, &split, cfg.model.clone(), &cfg.train, |r| {
        log::info!("epoch {:>4}  train {:.5}  val {:.5}  lr {:.1e}", r.epoch, r.train_loss, r.val_loss, r.lr);
    })?;
    outcome.checkpoint.save(&out.join("checkpoint.ckpt"))?;
    write_history(&outcome.checkpoint.history, create(&out.join("history.csv"))?)?;
    if !outcome.snapshots.is_empty() {
        let dir = out.join("snapshots");
        fs::create_dir_all(&dir)?;
        for s in &outcome.snapshots {
            s.save(&dir.join(format!("epoch_{:05}.ckpt", s.epoch)))?;
        }
    }
    if let Some(msg) = &outcome.aborted {
        return Err(Error::Training(format!("{msg}; best weights saved")).into());
    }
    let best = outcome.checkpoint.history.iter().find(|h| h.epoch == outcome.checkpoint.epoch).map(|h| h.val_loss);
    Ok(best.unwrap_or(f64::NAN))
}

fn cmd_pretrain(mut args: PretrainArgs) -> anyhow::Result<()> {
    let table = load_table(&args.spange)?;
    let types = type_lists(&args, &table)?;
    if let Some(n) = args.snapshot_every {
        args.cfg.overrides.push(format!("train.snapshot_every={n}"));
    }
    let Some(grid) = &args.grid else {
        let cfg = resolve_config(&args.cfg, None)?;
        let val = pretrain_one(&table, &types, &cfg, &args.out)?;
        summary("pretrain", cfg.train.seed, "val_mse", val);
        return Ok(());
    };
    if !grid.is_dir() {
        return Err(usage(format!("grid directory not found: {}", grid.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(grid)?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<Vec<PathBuf>>>()?
        .into_iter()
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(usage(format!("no config files in {}", grid.display())));
    }
    let mut rows = Vec::new();
    for f in &files {
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let cfg = resolve_config(&args.cfg, Some(f))?;
        let val = pretrain_one(&table, &types, &cfg, &args.out.join(&stem))?;
        rows.push((stem, val, cfg.train.seed));
    }
    let mut w = create(&args.out.join("grid.csv"))?;
    writeln!(w, "config,val_mse")?;
    for (name, val, _) in &rows {
        writeln!(w, "{name},{val}")?;
    }
    w.flush()?;
    let (_, best, seed) = rows.iter().min_by(|a, b| a.1.total_cmp(&b.1)).cloned().expect("non-empty grid");
    summary("pretrain", seed, "best_val_mse", best);
    Ok(())
}

fn records<'a>(table: &'a SolventTable, ids: &[String]) -> anyhow::Result<Vec<&'a SolventRecord>> {
    Ok(ids.iter().map(|id| table.require(id)).collect::<sodade::Result<_>>()?)
}

fn checkpoint_split(ck: &Checkpoint) -> anyhow::Result<&sodade::dataio::DataSplit> {
    ck.split.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint carries no data split".into()).into())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let table = load_table(&args.spange)?;
    let ck = load_checkpoint(&args.ckpt)?;
    let split = checkpoint_split(&ck)?;
    let enc = Encoder::<f32>::from_checkpoint(&ck)?;
    match args.split {
        SplitName::Val => {
            let recs = records(&table, &split.val_ids)?;
            let mse = evaluate_validation(&enc.model, &enc.schema, &enc.vocab, &recs)?;
            summary("eval", ck.seed, "val_mse", mse);
        }
        SplitName::Test => {
            let recs = records(&table, &split.test_ids)?;
            let t = evaluate_test_table(&enc.model, &enc.schema, &enc.vocab, &recs)?;
            if let Some(out) = &args.out {
                write_test_table(&t, create(out)?)?;
            }
            summary("eval", ck.seed, "test_average_mse", t.average);
        }
    }
    Ok(())
}

fn cmd_fingerprint(args: FingerprintArgs) -> anyhow::Result<()> {
    let table = load_table(&args.spange)?;
    let ck = load_checkpoint(&args.ckpt)?;
    let enc = Encoder::<f32>::from_checkpoint(&ck)?;
    let recs: Vec<&SolventRecord> = match &args.solvent {
        Some(name) => vec![table.require(name)?],
        None => table.records().iter().filter(|r| r.present_count() > 0).collect(),
    };
    let fps = enc.extract_all(&recs)?;
    match (&args.out, &args.solvent) {
        (Some(out), _) => write_fingerprints(&fps, create(out)?)?,
        (None, Some(_)) => {
            let line: Vec<String> = fps[0].vector.iter().map(|x| x.to_string()).collect();
            println!("{}", line.join(" "));
        }
        (None, None) => write_fingerprints(&fps, io::stdout().lock())?,
    }
    summary("fingerprint", ck.seed, "count", fps.len() as f64);
    Ok(())
}

fn cmd_benchmark(args: BenchmarkArgs) -> anyhow::Result<()> {
    let table = load_table(&args.spange)?;
    let ck = load_checkpoint(&args.ckpt)?;
    let reactions = load_reactions(&args.catechol, args.aliases.as_deref(), &table)?;
    let cfg = resolve_config(&args.cfg, None)?;
    log::info!("resolved config:\n{}", cfg.to_text());
    let task = match args.task {
        TaskArg::Single => Task::Single,
        TaskArg::Full => Task::Full,
    };
    let mode = match args.mode {
        ModeArg::Frozen => Mode::Frozen,
        ModeArg::Finetune => Mode::Finetuned,
    };
    let enc = Encoder::<f32>::from_checkpoint(&ck)?;
    let res = run_benchmark(&reactions, &table, &enc, &cfg.head, task, mode)?;
    fs::create_dir_all(&args.out)?;
    export_predictions(&res, create(&args.out.join(format!("predictions_{task}_{mode}.csv")))?)?;
    write_summary(std::slice::from_ref(&res), create(&args.out.join(format!("summary_{task}_{mode}.csv")))?)?;
    summary("benchmark", cfg.head.seed, &format!("{task}_{mode}_mse"), res.mse);
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> anyhow::Result<()> {
    let table = load_table(&args.spange)?;
    let ck = load_checkpoint(&args.ckpt)?;
    let split = checkpoint_split(&ck)?;
    let test = records(&table, &split.test_ids)?;
    let (metric, value) = match args.model {
        BaselineModel::Avg => {
            let t = avg_fit_predict(&ck.schema, &test);
            if let Some(out) = &args.out {
                write_test_table(&t, create(out)?)?;
            }
            ("avg_average_mse", t.average)
        }
        BaselineModel::Gp => {
            let train = records(&table, &split.train_and_val(&table))?;
            let t = gp_fit_predict(&train, &test)?;
            if let Some(out) = &args.out {
                write_test_table(&t, create(out)?)?;
            }
            ("gp_average_mse", t.average)
        }
        BaselineModel::All => {
            let model = ck.transformer::<f32>()?;
            let c = compare_on_test(&table, split, &model, &ck.schema, &ck.vocab)?;
            match &args.out {
                Some(out) => write_comparison(&c, create(out)?)?,
                None => write_comparison(&c, io::stdout().lock())?,
            }
            ("gp_average_mse", c.gp.average)
        }
    };
    summary("baseline", ck.seed, metric, value);
    Ok(())
}

fn cmd_trajectory(args: TrajectoryArgs) -> anyhow::Result<()> {
    let table = load_table(&args.spange)?;
    let reactions = load_reactions(&args.catechol, args.aliases.as_deref(), &table)?;
    if !args.snapshots.is_dir() {
        return Err(usage(format!("snapshot directory not found: {}", args.snapshots.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&args.snapshots)?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<Vec<PathBuf>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    paths.sort();
    let snaps: Vec<Checkpoint> = paths.iter().map(|p| Checkpoint::load(p)).collect::<sodade::Result<_>>()?;
    if snaps.is_empty() {
        return Err(usage(format!("no .ckpt files in {}", args.snapshots.display())));
    }
    let mut names: Vec<&str> =
        reactions.iter().flat_map(|r| std::iter::once(r.solvent_a.as_str()).chain(r.solvent_b.as_deref())).collect();
    names.sort();
    names.dedup();
    let solvents: Vec<&SolventRecord> = names.iter().map(|n| table.require(n)).collect::<sodade::Result<_>>()?;
    let traj = embedding_trajectory(&snaps, &solvents, &reactions)?;
    write_trajectory(&traj.rows, create(&args.out)?)?;
    summary("trajectory", snaps[0].seed, "pc1_explained", traj.projection.explained[0]);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig { rows: args.rows, types: args.types, seed: args.seed, ..SynthConfig::default() };
    let s = synth_solvents(&cfg)?;
    let rx = synth_reactions(&s, args.reaction_solvents, args.seed);
    fs::create_dir_all(&args.out)?;
    write_spange(&s.table, create(&args.out.join("solvents.csv"))?)?;
    write_catechol(&rx, create(&args.out.join("reactions.csv"))?)?;
    summary("synth", args.seed, "rows", s.table.len() as f64);
    Ok(())
}

/// 2 usage, 3 data, 4 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(e) if e.is_numeric() => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var("SODADE_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: SODADE_THREADS must be a positive integer, got `{n}`");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Fingerprint(a) => cmd_fingerprint(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Trajectory(a) => cmd_trajectory(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                eprintln!("run `sodade help` for usage");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

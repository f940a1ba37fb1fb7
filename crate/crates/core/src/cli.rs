//! Command-line front end: `synth`, `train`, `extract`, `eval`, `verify`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parent_dir, RunConfig, SEED_ENV};
use crate::error::{Error, Result};
use crate::eval::{describe_tracklet, evaluate, load_descriptors, save_descriptors, strategy_table, Selection};
use crate::train::{generate_synthetic, save_trace_csv, train_two_step, Dataset, Split, Start, Steps, Tracklet, MANIFEST_FILE};
use crate::verify::{format_report, require_all_passed, run_checks, Precision};

#[derive(Debug, Parser)]
#[command(name = "personvlad", version, about = "Video person re-identification with part-aligned VLAD descriptors")]
pub struct Cli {
    /// JSON run configuration. Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every random choice. Overrides the config file and PV_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tracklet dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Write one descriptor per tracklet.
    Extract(ExtractArgs),
    /// Rank descriptors and report CMC and mAP.
    Eval(EvalArgs),
    /// Run the gradient and oracle self-checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub identities: Option<usize>,
    /// Tracklets per identity.
    #[arg(long)]
    pub tracklets: Option<usize>,
    /// Frames per tracklet.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Unlabeled distractor tracklets.
    #[arg(long)]
    pub distractors: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StepArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Training phases to run.
    #[arg(long, value_enum)]
    pub step: Option<StepArg>,
    /// Iterations for each selected phase.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Start from these weights with a fresh identity table.
    #[arg(long, value_name = "CHECKPOINT", conflicts_with = "resume")]
    pub finetune: Option<PathBuf>,
    /// Continue from these weights and their identity table.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for descriptor files.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    Random,
    All,
}

impl From<SelectionArg> for Selection {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::Random => Selection::Random,
            SelectionArg::All => Selection::All,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of descriptor files.
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    /// CSV report path; the strategy table goes next to it.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub probe: Option<SelectionArg>,
    #[arg(long, value_enum)]
    pub gallery: Option<SelectionArg>,
    /// Draws averaged when a side is random.
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Run forward checks in 64-bit and tighten every tolerance tenfold.
    #[arg(long)]
    pub f64: bool,
    /// Only run checks whose name contains this text.
    #[arg(long, value_name = "TEXT")]
    pub only: Option<String>,
    /// Corrupt the conv weight gradient (negative control).
    #[cfg(feature = "fault-injection")]
    #[arg(long)]
    pub inject_conv_fault: bool,
}

/// Config file, then `PV_SEED`, then `--seed`.
pub fn resolve_config(cli: &Cli, seed_env: Option<&str>) -> Result<RunConfig> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    config.apply_seed_env(seed_env)?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    Ok(config)
}

/// Exit status for a finished command: 0 success, 1 user or configuration
/// error, 2 failed verification.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Verification(_)) => 2,
        Err(_) => 1,
    }
}

/// Parses `args` (program name first) and runs the command, printing any
/// error. Returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let env = std::env::var(SEED_ENV).ok();
    let result = run(&cli, env.as_deref());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

pub fn run(cli: &Cli, seed_env: Option<&str>) -> Result<()> {
    let mut config = resolve_config(cli, seed_env)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&mut config, a),
        Command::Train(a) => cmd_train(&mut config, a),
        Command::Extract(a) => cmd_extract(&mut config, a),
        Command::Eval(a) => cmd_eval(&mut config, a),
        Command::Verify(a) => cmd_verify(&config, a),
    }
}

fn cmd_synth(config: &mut RunConfig, a: &SynthArgs) -> Result<()> {
    if let Some(v) = &a.out {
        config.paths.data_dir = v.clone();
    }
    let s = &mut config.synth;
    s.identities = a.identities.unwrap_or(s.identities);
    s.tracklets_per_identity = a.tracklets.unwrap_or(s.tracklets_per_identity);
    s.frames = a.frames.unwrap_or(s.frames);
    s.distractors = a.distractors.unwrap_or(s.distractors);

    let data = generate_synthetic(&config.synth, config.train.clip_len, config.seed)?;
    let dir = &config.paths.data_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = data.save(dir)?;
    config.echo(dir, "synth")?;
    let labeled = data.tracklets.iter().filter(|t| t.record.identity >= 0).count();
    println!(
        "wrote {} ({} identities, {} tracklets, {} unlabeled)",
        manifest.display(),
        config.synth.identities,
        data.tracklets.len(),
        data.tracklets.len() - labeled
    );
    Ok(())
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let path = config.paths.data_dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Config(format!("no dataset manifest at {}", path.display())));
    }
    Dataset::load(&path)
}

fn cmd_train(config: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(v) = &a.data {
        config.paths.data_dir = v.clone();
    }
    if let Some(v) = &a.checkpoint {
        config.paths.checkpoint = v.clone();
    }
    if let Some(v) = &a.loss_csv {
        config.paths.loss_csv = v.clone();
    }
    if let Some(s) = a.step {
        config.train.steps = match s {
            StepArg::One => Steps::One,
            StepArg::Two => Steps::Two,
            StepArg::Both => Steps::Both,
        };
    }
    if let Some(n) = a.iterations {
        let sched = &mut config.train.schedule;
        match config.train.steps {
            Steps::One => sched.step1_iterations = n,
            Steps::Two => sched.step2_iterations = n,
            Steps::Both => {
                sched.step1_iterations = n;
                sched.step2_iterations = n;
            }
        }
    }
    let start = if let Some(p) = &a.resume {
        let (net, oim) = load_checkpoint(p)?;
        let oim = oim.ok_or_else(|| Error::Config(format!("{} has no identity table to resume", p.display())))?;
        config.model = net.config().clone();
        Start::Resume(net, oim)
    } else if let Some(p) = &a.finetune {
        let (net, _) = load_checkpoint(p)?;
        config.model = net.config().clone();
        Start::Finetune(net)
    } else {
        Start::Fresh(config.model.clone())
    };
    if config.train.steps == Steps::Two && matches!(start, Start::Fresh(_)) {
        return Err(Error::Config("--step 2 needs --finetune or --resume".into()));
    }
    config.validate()?;

    let data = load_dataset(config)?;
    let tracklets: Vec<&Tracklet> = data.split(Split::Train).collect();
    let trained = train_two_step(&tracklets, start, &config.train, config.seed, |row| {
        if row.iteration % 10 == 0 {
            eprintln!("iteration {:>6}  lr {:.3e}  loss {:.5}", row.iteration, row.lr, row.loss);
        }
    })?;

    let ckpt = &config.paths.checkpoint;
    std::fs::create_dir_all(parent_dir(ckpt)).map_err(|e| Error::io(parent_dir(ckpt), e))?;
    save_checkpoint(ckpt, &trained.net, Some(&trained.oim))?;
    let csv = &config.paths.loss_csv;
    std::fs::create_dir_all(parent_dir(csv)).map_err(|e| Error::io(parent_dir(csv), e))?;
    save_trace_csv(csv, &trained.trace)?;
    config.echo(parent_dir(ckpt), "train")?;
    println!(
        "trained {} iterations on {} identities; wrote {} and {}",
        trained.trace.len(),
        trained.identities.len(),
        ckpt.display(),
        csv.display()
    );
    Ok(())
}

fn cmd_extract(config: &mut RunConfig, a: &ExtractArgs) -> Result<()> {
    if let Some(v) = &a.data {
        config.paths.data_dir = v.clone();
    }
    if let Some(v) = &a.checkpoint {
        config.paths.checkpoint = v.clone();
    }
    if let Some(v) = &a.out {
        config.paths.descriptors = v.clone();
    }
    let (net, _) = load_checkpoint(&config.paths.checkpoint)?;
    let (got, want) = (net.config(), &config.model);
    if got.descriptor_dim() != want.descriptor_dim() || got.input != want.input {
        return Err(Error::Config(format!(
            "checkpoint produces {}-long descriptors from {:?} clips, config expects {} from {:?}",
            got.descriptor_dim(),
            got.input,
            want.descriptor_dim(),
            want.input
        )));
    }
    config.model = got.clone();
    let data = load_dataset(config)?;
    let out = &config.paths.descriptors;
    let descriptors = data
        .tracklets
        .iter()
        .map(|t| describe_tracklet(&net, t, config.train.clip_len, config.train.overlap))
        .collect::<Result<Vec<_>>>()?;
    save_descriptors(out, &descriptors)?;
    config.echo(out, "extract")?;
    println!(
        "wrote {} descriptors of length {} to {}",
        descriptors.len(),
        net.descriptor_dim(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(config: &mut RunConfig, a: &EvalArgs) -> Result<()> {
    if let Some(v) = &a.descriptors {
        config.paths.descriptors = v.clone();
    }
    if let Some(v) = &a.report {
        config.paths.report = v.clone();
    }
    let p = &mut config.eval;
    p.probe = a.probe.map_or(p.probe, Into::into);
    p.gallery = a.gallery.map_or(p.gallery, Into::into);
    p.repeats = a.repeats.unwrap_or(p.repeats);

    let descriptors = load_descriptors(&config.paths.descriptors)?;
    let report = evaluate(&descriptors, &config.eval, config.seed)?;
    if !report.missing.is_empty() {
        eprintln!("warning: probe identities without a gallery match were skipped: {:?}", report.missing);
    }
    let table = strategy_table(&descriptors, &config.eval, config.seed)?;

    let path = &config.paths.report;
    let dir = parent_dir(path);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    let table_path = path.with_extension("table.txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    config.echo(dir, "eval")?;

    for n in [1, 5, 10, 20] {
        if let Some(v) = report.cmc.get(n - 1) {
            println!("rank-{n:<2} {:6.2}%", 100.0 * v);
        }
    }
    println!("mAP     {:6.2}%", 100.0 * report.map);
    println!("\n{table}");
    Ok(())
}

fn cmd_verify(config: &RunConfig, a: &VerifyArgs) -> Result<()> {
    let precision = if a.f64 { Precision::Double } else { Precision::Single };
    #[cfg(feature = "fault-injection")]
    crate::autodiff::fault::corrupt_conv_weight_grad(a.inject_conv_fault);
    let outcomes = run_checks(precision, config.seed, a.only.as_deref());
    print!("{}", format_report(&outcomes));
    if outcomes.is_empty() {
        return Err(Error::Config("no check matches the filter".into()));
    }
    require_all_passed(&outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_resolution_order() {
        let cli = Cli::try_parse_from(["personvlad", "verify"]).unwrap();
        assert_eq!(resolve_config(&cli, Some("5")).unwrap().seed, 5);
        let cli = Cli::try_parse_from(["personvlad", "verify", "--seed", "8"]).unwrap();
        assert_eq!(resolve_config(&cli, Some("5")).unwrap().seed, 8);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Ok(())), 0);
        assert_eq!(exit_code(&Err(Error::Config("x".into()))), 1);
        assert_eq!(exit_code(&Err(Error::Verification("grad.conv3d".into()))), 2);
        assert_eq!(main_with_args(["personvlad", "bogus"]), 1);
        assert_eq!(main_with_args(["personvlad", "train", "--finetune", "a", "--resume", "b"]), 1);
    }

    #[test]
    fn step_two_needs_weights() {
        let cli = Cli::try_parse_from(["personvlad", "train", "--step", "2"]).unwrap();
        let err = run(&cli, None).unwrap_err();
        assert!(err.to_string().contains("--finetune"), "{err}");
    }
}

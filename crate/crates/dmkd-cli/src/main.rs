//! Command-line harness for the dmkd workbench.
//!
//! Subcommands cover the full experiment lifecycle: synthesize a dataset,
//! train the wide teacher, distill the narrow student under any masking
//! variant, sweep ablation grids into CSV tables, and verify every backward
//! rule against finite differences.
//!
//! Every run is seeded and single-threaded: identical flags produce
//! byte-identical output files, except for the wall-clock field in reports.
//!
//! Exit codes: 0 success, 1 gradient verification failure, 2 usage or
//! config error, 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use dmkd::ablate::{masking_grid, run_grid, threshold_grid, AblationCell};
use dmkd::checkpoint::Checkpoint;
use dmkd::data::{generate_dataset, SyntheticDataset};
use dmkd::distill::{DistillConfig, Variant};
use dmkd::gradcheck::run_suite;
use dmkd::model::ToyModel;
use dmkd::train::{distill_run, train_teacher, TrainConfig};
use dmkd::{DmkdError, Result};

#[derive(Parser)]
#[command(
    name = "dmkd",
    version,
    about = "Dual masked knowledge distillation on a desk-scale synthetic task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape-classification dataset.
    GenData(GenDataArgs),
    /// Train the width-8 teacher and save its checkpoint.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a width-4 student from a trained teacher.
    Distill(DistillArgs),
    /// Run a preset ablation grid and write the results as CSV.
    Ablate(AblateArgs),
    /// Verify every backward rule against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Seed for the dataset stream.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of training images.
    #[arg(long, default_value_t = 1024)]
    n_train: usize,
    /// Number of held-out test images.
    #[arg(long, default_value_t = 256)]
    n_test: usize,
    /// Where to write the dataset JSON.
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by every training subcommand; unset flags fall back to the
/// config file, then to the built-in defaults.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum coefficient.
    #[arg(long)]
    momentum: Option<f64>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training images used per epoch.
    #[arg(long)]
    n_train: Option<usize>,
    /// Held-out images used for evaluation.
    #[arg(long)]
    n_test: Option<usize>,
}

/// Distillation knobs, mirroring the config-file keys one for one.
#[derive(Args, Clone, Default)]
struct DistillFlags {
    /// Masking variant: dual, spatial-only, channel-only, random-mask,
    /// no-mask, or baseline-fitnet.
    #[arg(long)]
    variant: Option<Variant>,
    /// Spatial attention threshold in (0, 1).
    #[arg(long)]
    tau_s: Option<f64>,
    /// Channel attention threshold in (0, 1).
    #[arg(long)]
    tau_c: Option<f64>,
    /// Attention temperature (> 0).
    #[arg(long)]
    temperature: Option<f64>,
    /// Weight of the reconstruction loss in the overall objective.
    #[arg(long)]
    gamma: Option<f64>,
    /// Initial value of the fusion weight on the conv branch.
    #[arg(long)]
    alpha_init: Option<f64>,
    /// Initial value of the fusion weight on the channel-MLP branch.
    #[arg(long)]
    beta_init: Option<f64>,
    /// Drop probability for the random-mask variant.
    #[arg(long)]
    random_mask_ratio: Option<f64>,
    /// Seed for model init, batch shuffling, and random masks.
    #[arg(long)]
    seed: Option<u64>,
}

/// Dataset source: an explicit file, or regeneration from a seed.
#[derive(Args, Clone)]
struct DataFlags {
    /// Dataset JSON produced by gen-data; omitted, the dataset is
    /// regenerated in memory from --data-seed and the split sizes.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed for in-memory dataset regeneration when --data is absent;
    /// kept separate from --seed so every run in a sweep shares one dataset.
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[command(flatten)]
    data: DataFlags,
    /// JSON config file; individual flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    /// Seed for teacher init and batch shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the teacher checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Optional path for the training report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    /// Teacher checkpoint from train-teacher.
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    /// JSON config file; individual flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    distill: DistillFlags,
    /// Where to write the run report JSON.
    #[arg(long)]
    report: PathBuf,
    /// Optional path for the distilled student + blocks checkpoint.
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Dual masking vs. each branch alone vs. no masking, default thresholds.
    Masking,
    /// Dual masking across the spatial and channel threshold sweeps.
    Thresholds,
}

#[derive(Args)]
struct AblateArgs {
    /// Teacher checkpoint from train-teacher.
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    /// JSON config file; individual flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    /// Which built-in grid to run (alternative: --variants).
    #[arg(long, value_enum, conflicts_with = "variants")]
    preset: Option<Preset>,
    /// Custom grid as comma-separated variants, one cell per variant at the
    /// --tau-s/--tau-c thresholds (alternative: --preset).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    /// Spatial threshold for --variants cells.
    #[arg(long, conflicts_with = "preset")]
    tau_s: Option<f64>,
    /// Channel threshold for --variants cells.
    #[arg(long, conflicts_with = "preset")]
    tau_c: Option<f64>,
    /// Comma-separated run seeds; each grid cell is run once per seed.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5])]
    seeds: Vec<u64>,
    /// Weight of the reconstruction loss in the overall objective.
    #[arg(long)]
    gamma: Option<f64>,
    /// Attention temperature (> 0).
    #[arg(long)]
    temperature: Option<f64>,
    /// Initial value of the fusion weight on the conv branch.
    #[arg(long)]
    alpha_init: Option<f64>,
    /// Initial value of the fusion weight on the channel-MLP branch.
    #[arg(long)]
    beta_init: Option<f64>,
    /// Where to write the ablation CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the sampled check instances.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Config-file schema: every key optional, same names as the flags.
/// Unknown keys are rejected so typos cannot silently fall back to defaults.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    variant: Option<Variant>,
    tau_s: Option<f64>,
    tau_c: Option<f64>,
    temperature: Option<f64>,
    gamma: Option<f64>,
    alpha_init: Option<f64>,
    beta_init: Option<f64>,
    random_mask_ratio: Option<f64>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    batch_size: Option<usize>,
    n_train: Option<usize>,
    n_test: Option<usize>,
    data_seed: Option<u64>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| DmkdError::ConfigInvalid(format!("config file {}: {}", p.display(), e)))
        }
    }
}

fn set<T: Copy>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

/// Defaults, overlaid by the config file, overlaid by explicit flags.
fn resolve_train(file: &FileConfig, flags: &TrainFlags) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    set(&mut cfg.epochs, file.epochs);
    set(&mut cfg.lr, file.lr);
    set(&mut cfg.momentum, file.momentum);
    set(&mut cfg.batch_size, file.batch_size);
    set(&mut cfg.n_train, file.n_train);
    set(&mut cfg.n_test, file.n_test);
    set(&mut cfg.epochs, flags.epochs);
    set(&mut cfg.lr, flags.lr);
    set(&mut cfg.momentum, flags.momentum);
    set(&mut cfg.batch_size, flags.batch_size);
    set(&mut cfg.n_train, flags.n_train);
    set(&mut cfg.n_test, flags.n_test);
    cfg
}

fn resolve_distill(file: &FileConfig, flags: &DistillFlags) -> DistillConfig {
    let mut cfg = DistillConfig::default();
    set(&mut cfg.variant, file.variant);
    set(&mut cfg.tau_s, file.tau_s);
    set(&mut cfg.tau_c, file.tau_c);
    set(&mut cfg.temperature, file.temperature);
    set(&mut cfg.gamma, file.gamma);
    set(&mut cfg.alpha_init, file.alpha_init);
    set(&mut cfg.beta_init, file.beta_init);
    set(&mut cfg.random_mask_ratio, file.random_mask_ratio);
    set(&mut cfg.seed, file.seed);
    set(&mut cfg.variant, flags.variant);
    set(&mut cfg.tau_s, flags.tau_s);
    set(&mut cfg.tau_c, flags.tau_c);
    set(&mut cfg.temperature, flags.temperature);
    set(&mut cfg.gamma, flags.gamma);
    set(&mut cfg.alpha_init, flags.alpha_init);
    set(&mut cfg.beta_init, flags.beta_init);
    set(&mut cfg.random_mask_ratio, flags.random_mask_ratio);
    set(&mut cfg.seed, flags.seed);
    cfg
}

/// Loads the dataset file when given, otherwise regenerates it from the
/// data seed at exactly the configured split sizes.
fn load_dataset(flags: &DataFlags, file: &FileConfig, tcfg: &TrainConfig) -> Result<SyntheticDataset> {
    match &flags.data {
        Some(path) => SyntheticDataset::from_file(path),
        None => {
            let mut data_seed = flags.data_seed;
            set(&mut data_seed, file.data_seed);
            generate_dataset(data_seed, tcfg.n_train, tcfg.n_test)
        }
    }
}

fn load_teacher(path: &Path) -> Result<ToyModel> {
    let ck = Checkpoint::load(path)?;
    if ck.role != "teacher" {
        return Err(DmkdError::CheckpointInvalid(format!(
            "{} holds a {:?} checkpoint; distillation needs one with role \"teacher\"",
            path.display(),
            ck.role
        )));
    }
    ck.build_model()
}

fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    let dataset = generate_dataset(args.seed, args.n_train, args.n_test)?;
    dataset.to_file(&args.out)?;
    println!(
        "wrote {} ({} train / {} test images, seed {})",
        args.out.display(),
        args.n_train,
        args.n_test,
        args.seed
    );
    Ok(())
}

fn run_train_teacher(args: &TrainTeacherArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let tcfg = resolve_train(&file, &args.train);
    tcfg.validate()?;
    let mut seed = 7;
    set(&mut seed, file.seed);
    set(&mut seed, args.seed);
    let dataset = load_dataset(&args.data, &file, &tcfg)?;
    let (teacher, report) = train_teacher(&dataset, &tcfg, seed)?;
    Checkpoint::of_model(&teacher, "teacher").save(&args.out)?;
    println!("wrote {}", args.out.display());
    if let Some(path) = &args.report {
        report.save(path)?;
        println!("wrote {}", path.display());
    }
    println!("final test accuracy {:.4}", report.final_test_accuracy);
    Ok(())
}

fn run_distill(args: &DistillArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let tcfg = resolve_train(&file, &args.train);
    let dcfg = resolve_distill(&file, &args.distill);
    tcfg.validate()?;
    dcfg.validate()?;
    let dataset = load_dataset(&args.data, &file, &tcfg)?;
    let teacher = load_teacher(&args.teacher)?;
    let (student, blocks, report) = distill_run(&teacher, &dataset, &dcfg, &tcfg)?;
    report.save(&args.report)?;
    println!("wrote {}", args.report.display());
    if let Some(path) = &args.checkpoint_out {
        Checkpoint::of_distilled(&student, &blocks).save(path)?;
        println!("wrote {}", path.display());
    }
    println!(
        "variant {} seed {} final test accuracy {:.4}",
        dcfg.variant, dcfg.seed, report.final_test_accuracy
    );
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let tcfg = resolve_train(&file, &args.train);
    tcfg.validate()?;
    let overrides = DistillFlags {
        gamma: args.gamma,
        temperature: args.temperature,
        alpha_init: args.alpha_init,
        beta_init: args.beta_init,
        tau_s: args.tau_s,
        tau_c: args.tau_c,
        ..DistillFlags::default()
    };
    let base = resolve_distill(&file, &overrides);
    base.validate()?;
    let dataset = load_dataset(&args.data, &file, &tcfg)?;
    let teacher = load_teacher(&args.teacher)?;
    let cells = match (args.preset, args.variants.as_slice()) {
        (Some(Preset::Masking), _) => masking_grid(),
        (Some(Preset::Thresholds), _) => threshold_grid(),
        (None, variants) if !variants.is_empty() => variants
            .iter()
            .map(|&variant| AblationCell { variant, tau_s: base.tau_s, tau_c: base.tau_c })
            .collect(),
        (None, _) => {
            return Err(DmkdError::ConfigInvalid(
                "choose a grid: --preset masking|thresholds or --variants <list>".into(),
            ))
        }
    };
    let table = run_grid(&teacher, &dataset, &cells, &args.seeds, &base, &tcfg)?;
    table.save(&args.out)?;
    println!(
        "wrote {} ({} cells x {} seeds)",
        args.out.display(),
        cells.len(),
        args.seeds.len()
    );
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let report = run_suite(args.seed);
    print!("{}", report.render());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenData(args) => run_gen_data(args).map(|()| ExitCode::SUCCESS),
        Command::TrainTeacher(args) => run_train_teacher(args).map(|()| ExitCode::SUCCESS),
        Command::Distill(args) => run_distill(args).map(|()| ExitCode::SUCCESS),
        Command::Ablate(args) => run_ablate(args).map(|()| ExitCode::SUCCESS),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                DmkdError::Io(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

//! `pcc`: simulate cohorts, train, reconstruct, evaluate and verify.
//!
//! Every subcommand also accepts `--config FILE`, a `key = value` file whose
//! entries act as flags placed before the command line, so explicit flags win.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use pcc_core::datasim::{
    patch_pairs, read_manifest, read_volume, simulate_cohort, write_manifest, write_volume, CohortSpec,
    ManifestEntry, Subject,
};
use pcc_core::metrics::{format_report, MetricReport};
use pcc_core::network::{load_checkpoint, save_checkpoint, ModelConfig};
use pcc_core::selftest::run_selftest;
use pcc_core::training::{
    format_metric_log, gradcheck, plateau_for, reconstruct_volume, train_observed, GanLoss, TrainConfig,
    TrainData,
};
use pcc_core::network::{HeadInit, ModelParams};
use pcc_core::{par, Error};

#[derive(Parser, Debug)]
#[command(name = "pcc", version, about = "Point-based context-clusters reconstruction of low-dose volumes")]
#[command(args_override_self = true)]
struct Cli {
    /// Worker threads (0 uses every core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// `key = value` file of flag defaults; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate phantom subjects with quarter-dose counterparts and a manifest.
    Simulate(SimulateArgs),
    /// Train generator and discriminator on the subjects of a manifest.
    Train(TrainArgs),
    /// Patch-wise generator inference over every LPET of a manifest.
    Reconstruct(ReconstructArgs),
    /// PSNR / SSIM / NMSE of reconstructions against the manifest targets.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every gradient path.
    Gradcheck(GradcheckArgs),
    /// Run the invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// S = 64, W0 = 16, anchors 32/16/8/4, 150 epochs.
    Full,
    /// S = 16, W0 = 8, anchors 8/4/2/1, 20 epochs.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GanLossArg {
    NonSaturating,
    MinMax,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Preset for side, width and epochs; explicit flags override it.
    #[arg(long, value_enum, default_value_t = Profile::Full)]
    profile: Profile,
    /// Patch edge S (multiple of 16); anchors per axis are S/2, S/4, S/8, S/16.
    #[arg(long, default_value_t = 64)]
    side: usize,
    /// Embedding width W0.
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Neighbors per anchor and per cluster center.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Clusters per clustering layer (a cube).
    #[arg(long, default_value_t = 8)]
    clusters: usize,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 4)]
    subjects: usize,
    /// Volume edge length.
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Fraction of the standard count level.
    #[arg(long, default_value_t = 0.25)]
    dose: f64,
    /// Counts per unit intensity at full dose.
    #[arg(long, default_value_t = 50.0)]
    scale: f64,
    /// Ellipsoids per phantom.
    #[arg(long, default_value_t = 6)]
    ellipsoids: usize,
    /// Gaussian blur sigma in voxels.
    #[arg(long, default_value_t = 1.0)]
    blur: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Training subjects.
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out subjects for per-epoch validation PSNR.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metric log path (tab-separated, one line per epoch); stdout if absent.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    /// Epochs at the initial rate before linear decay [default when unset: a third of --epochs].
    #[arg(long, default_value_t = 50)]
    plateau: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Weight of the L1 term.
    #[arg(long, default_value_t = 100.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training patch stride [default when unset: S/4].
    #[arg(long, default_value_t = 16)]
    stride: usize,
    /// Reconstruction stride for validation [default when unset: S/2].
    #[arg(long, default_value_t = 32)]
    val_stride: usize,
    #[arg(long, value_enum, default_value_t = GanLossArg::NonSaturating)]
    gan_loss: GanLossArg,
    /// Train the generator on the L1 term alone.
    #[arg(long)]
    no_adversarial: bool,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for subject_XXX.pccvol files.
    #[arg(long)]
    out: PathBuf,
    /// Patch stride [default when unset: S/2].
    #[arg(long, default_value_t = 32)]
    stride: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of subject_XXX.pccvol reconstructions; the LPET inputs are
    /// scored when absent.
    #[arg(long)]
    recon: Option<PathBuf>,
    /// Report path; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    side: usize,
    #[arg(long, default_value_t = 4)]
    width: usize,
    /// First seed.
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// Consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Minimum parameter coordinates probed per objective.
    #[arg(long, default_value_t = 50)]
    coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Pass threshold on the maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const SUBCOMMANDS: [&str; 6] = ["simulate", "train", "reconstruct", "evaluate", "gradcheck", "selftest"];

/// Turns `key = value` lines into flags. `#` starts a comment; `true`
/// switches a boolean flag on and `false` leaves it off.
fn config_flags(path: &Path) -> Result<Vec<String>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset,
                    detail: format!("expected `key = value`, got {body:?}"),
                });
            };
            let flag = format!("--{}", key.trim().replace('_', "-"));
            match value.trim() {
                "true" => out.push(flag),
                "false" => {}
                v => {
                    out.push(flag);
                    out.push(v.to_string());
                }
            }
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

/// Splices config-file flags in right after the subcommand name.
fn expand_config(mut argv: Vec<String>) -> Result<Vec<String>, Error> {
    let mut path = None;
    let mut i = 1;
    while i < argv.len() {
        if argv[i] == "--config" && i + 1 < argv.len() {
            path = Some(PathBuf::from(argv.remove(i + 1)));
            argv.remove(i);
        } else if let Some(p) = argv[i].strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            argv.remove(i);
        } else {
            i += 1;
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let flags = config_flags(&path)?;
    let at = argv
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .map_or(argv.len(), |p| p + 1);
    argv.splice(at..at, flags);
    Ok(argv)
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine | ValueSource::EnvVariable))
}

/// Model shape after applying the profile to every flag left at its default.
fn model_config(args: &ModelArgs, m: &ArgMatches) -> Result<ModelConfig, Error> {
    let (side, width) = match args.profile {
        Profile::Full => (64, 16),
        Profile::Desk => (16, 8),
    };
    let side = if explicit(m, "side") { args.side } else { side };
    let width = if explicit(m, "width") { args.width } else { width };
    let mut cfg = ModelConfig::for_side(side, width);
    cfg.k = args.k;
    cfg.clusters = args.clusters;
    cfg.validate()?;
    Ok(cfg)
}

fn subject_name(i: usize) -> String {
    format!("subject_{i:03}")
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_subjects(manifest: &Path) -> Result<Vec<Subject>, Error> {
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            Ok(Subject {
                spet: read_volume(&e.spet)?,
                lpet: read_volume(&e.lpet)?,
            })
        })
        .collect()
}

fn simulate(a: &SimulateArgs) -> Result<(), Error> {
    let mut spec = CohortSpec::new(a.subjects, a.side, a.seed);
    spec.dose_fraction = a.dose;
    spec.count_scale = a.scale;
    spec.phantom.ellipsoids = a.ellipsoids;
    spec.phantom.blur_sigma = a.blur;
    let cohort = simulate_cohort(&spec)?;
    create_dir(&a.out)?;
    let mut entries = Vec::new();
    for (i, s) in cohort.iter().enumerate() {
        let spet = PathBuf::from(format!("{}_spet.pccvol", subject_name(i)));
        let lpet = PathBuf::from(format!("{}_lpet.pccvol", subject_name(i)));
        write_volume(&a.out.join(&spet), &s.spet)?;
        write_volume(&a.out.join(&lpet), &s.lpet)?;
        entries.push(ManifestEntry { spet, lpet });
    }
    write_manifest(&a.out.join("manifest.txt"), &entries)?;
    println!("wrote {} subjects of side {} to {}", cohort.len(), a.side, a.out.display());
    Ok(())
}

fn train(a: &TrainArgs, m: &ArgMatches) -> Result<(), Error> {
    let model = model_config(&a.model, m)?;
    let side = model.input_side;
    let epochs = match (explicit(m, "epochs"), a.model.profile) {
        (false, Profile::Desk) => 20,
        _ => a.epochs,
    };
    let plateau = if explicit(m, "plateau") { a.plateau } else { plateau_for(epochs) };
    let stride = if explicit(m, "stride") { a.stride } else { side / 4 };
    let val_stride = if explicit(m, "val_stride") { a.val_stride } else { side / 2 };
    let tc = TrainConfig {
        epochs,
        batch_size: a.batch_size,
        lr_init: a.lr,
        lr_plateau_epochs: plateau,
        lambda: a.lambda,
        seed: a.seed,
        gan_loss: match a.gan_loss {
            GanLossArg::NonSaturating => GanLoss::NonSaturating,
            GanLossArg::MinMax => GanLoss::MinMax,
        },
        adversarial: !a.no_adversarial,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let subjects = load_subjects(&a.manifest)?;
    let validation = match &a.validation {
        Some(p) => load_subjects(p)?.into_iter().map(|s| (s.lpet, s.spet)).collect(),
        None => Vec::new(),
    };
    let data = TrainData {
        train: patch_pairs(&subjects, side, stride)?,
        validation,
        validation_stride: val_stride,
    };
    let params = ModelParams::init(model, tc.seed, HeadInit::Zero)?;
    let to_stdout = a.log.is_none();
    let outcome = train_observed(params, &data, &tc, &mut |row| {
        if to_stdout {
            println!("{}", row.to_line());
        } else {
            eprintln!("epoch {} l1 {} val_psnr {}", row.epoch, row.l1, row.val_psnr);
        }
    })?;
    if let Some(path) = &a.log {
        write_text(path, &format_metric_log(&outcome.log))?;
    }
    save_checkpoint(&a.checkpoint, &outcome.params)?;
    eprintln!(
        "trained on {} patches for {} epochs; checkpoint {}",
        data.train.len(),
        epochs,
        a.checkpoint.display()
    );
    Ok(())
}

fn reconstruct(a: &ReconstructArgs, m: &ArgMatches) -> Result<(), Error> {
    let model = model_config(&a.model, m)?;
    let stride = if explicit(m, "stride") { a.stride } else { model.input_side / 2 };
    let params = load_checkpoint(&a.checkpoint, model)?;
    create_dir(&a.out)?;
    let entries = read_manifest(&a.manifest)?;
    for (i, e) in entries.iter().enumerate() {
        let lpet = read_volume(&e.lpet)?;
        let epet = reconstruct_volume(&lpet, &params, stride)?;
        write_volume(&a.out.join(format!("{}.pccvol", subject_name(i))), &epet)?;
    }
    println!("reconstructed {} subjects into {}", entries.len(), a.out.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<(), Error> {
    let entries = read_manifest(&a.manifest)?;
    let mut rows = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let target = read_volume(&e.spet)?;
        let estimate = match &a.recon {
            Some(dir) => read_volume(&dir.join(format!("{}.pccvol", subject_name(i))))?,
            None => read_volume(&e.lpet)?,
        };
        rows.push((subject_name(i), MetricReport::evaluate(&estimate, &target)?));
    }
    let report = format_report(&rows);
    match &a.out {
        Some(p) => write_text(p, &report)?,
        None => print!("{report}"),
    }
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<bool, Error> {
    let cfg = ModelConfig::for_side(a.side, a.width);
    cfg.validate()?;
    let mut worst: f64 = 0.0;
    for seed in a.seed..a.seed + a.seeds.max(1) {
        let r = gradcheck(cfg, seed, a.coords, a.step)?;
        println!(
            "seed {seed}: {} coordinates, generator l1 {:e}, discriminator {:e}, generator total {:e}",
            r.coordinates, r.generator_l1, r.discriminator, r.generator_total
        );
        worst = worst.max(r.max_error());
    }
    let pass = worst < a.tolerance;
    println!("max relative error {worst:e} ({})", if pass { "pass" } else { "FAIL" });
    Ok(pass)
}

fn selftest(a: &SelftestArgs) -> bool {
    let results = run_selftest(a.seed);
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    results.iter().all(|r| r.passed)
}

fn dispatch(cli: &Cli, matches: &ArgMatches) -> Result<bool, Error> {
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    match &cli.command {
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Train(a) => train(a, sub).map(|_| true),
        Command::Reconstruct(a) => reconstruct(a, sub).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Selftest(a) => Ok(selftest(a)),
    }
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let matches = Cli::command().get_matches_from(argv);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if cli.threads > 0 {
        par::set_threads(cli.threads);
    }
    match dispatch(&cli, &matches) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn config_lines_become_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        fs::write(&p, "batch_size = 2 # small\n\nno_adversarial = true\nverbose = false\n").unwrap();
        assert_eq!(config_flags(&p).unwrap(), argv("--batch-size 2 --no-adversarial"));
        fs::write(&p, "epochs = 3\nbroken\n").unwrap();
        assert!(matches!(config_flags(&p), Err(Error::Format { offset: 11, .. })));
    }

    #[test]
    fn config_flags_go_before_explicit_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        fs::write(&p, "seed = 1\nout = d\n").unwrap();
        let got = expand_config(argv(&format!("pcc --config {} simulate --seed 2", p.display()))).unwrap();
        assert_eq!(got, argv("pcc simulate --seed 1 --out d --seed 2"));
        let cli = Cli::try_parse_from(got).unwrap();
        let Command::Simulate(a) = cli.command else { panic!() };
        assert_eq!(a.seed, 2);
    }
}

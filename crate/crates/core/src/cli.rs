//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::filter::{
    denoise_classical, denoise_learned, DenoiseReport, FilterParams, LearnedOptions,
};
use crate::geometry::{bbox_diagonal, PointCloud};
use crate::io::{read_xyz, write_xyz, DEFAULT_PRECISION};
use crate::metrics::{evaluate, CD_CONVENTION, DEFAULT_MSE_K, MSE_CONVENTION};
use crate::network::LbfModel;
use crate::patch::ScaleSpec;
use crate::training::{add_gaussian_noise, resume, sidecar_path, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "lbf",
    version,
    about = "Point cloud denoising with learned bilateral filtering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Add Gaussian noise scaled by the bounding-box diagonal.
    Noise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Standard deviation in percent of the diagonal.
        #[arg(long)]
        sigma_pct: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    #[command(subcommand)]
    Denoise(Denoise),
    /// Train on every `.xyz` file with normals in a directory.
    Train(Box<TrainArgs>),
    /// Compare a denoised cloud against the clean one.
    Eval {
        #[arg(long)]
        denoised: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MSE_K)]
        k: usize,
    },
}

#[derive(Debug, Subcommand)]
enum Denoise {
    /// Fixed bandwidths for the whole cloud (world units).
    Classical {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Neighborhood radius in percent of the diagonal.
        #[arg(long)]
        radius_pct: f64,
        #[arg(long)]
        sigma_d: f64,
        #[arg(long)]
        sigma_n: f64,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Per-point bandwidths predicted by a trained model.
    Learned {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key=value` file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue the checkpoint at `--out` up to `--epochs`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    noise_levels: Option<String>,
    #[arg(long)]
    radius_fractions: Option<String>,
    #[arg(long)]
    patch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    lr_decay: Option<String>,
    #[arg(long)]
    decay_every: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    eps_n_degrees: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    patches_per_shape: Option<String>,
    #[arg(long)]
    encoder_widths: Option<String>,
    #[arg(long)]
    head_widths: Option<String>,
    #[arg(long)]
    fusion_widths: Option<String>,
    #[arg(long)]
    denominator: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        let pairs = [
            ("noise_levels", &self.noise_levels),
            ("radius_fractions", &self.radius_fractions),
            ("patch_size", &self.patch_size),
            ("lr", &self.lr),
            ("lr_decay", &self.lr_decay),
            ("decay_every", &self.decay_every),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("eta", &self.eta),
            ("eps_n_degrees", &self.eps_n_degrees),
            ("seed", &self.seed),
            ("patches_per_shape", &self.patches_per_shape),
            ("encoder_widths", &self.encoder_widths),
            ("head_widths", &self.head_widths),
            ("fusion_widths", &self.fusion_widths),
            ("denominator", &self.denominator),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
            .collect()
    }
}

/// Exit status for an error: 1 for bad invocations, 2 for bad data.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::InvalidValue(_) | Error::ConfigMismatch(_) => 1,
        _ => 2,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Results go to stdout, diagnostics to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn usage(msg: String) -> Error {
    Error::Usage(msg)
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(usage(format!("--{name} must be positive, got {v}")))
    }
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Noise {
            input,
            output,
            sigma_pct,
            seed,
        } => {
            if !(sigma_pct >= 0.0 && sigma_pct.is_finite()) {
                return Err(usage(format!(
                    "--sigma-pct must be non-negative, got {sigma_pct}"
                )));
            }
            log::info!(
                "noise: input={} output={} sigma_pct={sigma_pct} seed={seed}",
                input.display(),
                output.display()
            );
            let cloud = read_xyz(&input)?;
            let noisy = add_gaussian_noise(&cloud, sigma_pct / 100.0, seed)?;
            write_xyz(&noisy, &output, DEFAULT_PRECISION)?;
            Ok(String::new())
        }
        Command::Denoise(Denoise::Classical {
            input,
            output,
            radius_pct,
            sigma_d,
            sigma_n,
            iterations,
            report,
        }) => {
            positive("radius-pct", radius_pct)?;
            let params =
                FilterParams::new(positive("sigma-d", sigma_d)?, positive("sigma-n", sigma_n)?)?;
            if iterations == 0 {
                return Err(usage("--iterations must be at least 1".into()));
            }
            log::info!(
                "denoise classical: input={} output={} radius_pct={radius_pct} sigma_d={sigma_d} sigma_n={sigma_n} iterations={iterations}",
                input.display(),
                output.display()
            );
            let cloud = read_xyz(&input)?;
            let radius = radius_pct / 100.0 * bbox_diagonal(&cloud)?;
            let (out, rep) = denoise_classical(&cloud, radius, params, iterations)?;
            write_xyz(&out, &output, DEFAULT_PRECISION)?;
            if let Some(path) = report {
                std::fs::write(path, report_text(&rep, 1.0))?;
            }
            Ok(String::new())
        }
        Command::Denoise(Denoise::Learned {
            input,
            output,
            model,
            seed,
            report,
        }) => {
            let net = LbfModel::load(&model)?;
            let scales = model_scales(&model, net.architecture().scales)?;
            let fractions: Vec<f64> = scales.iter().map(|s| s.radius_fraction).collect();
            log::info!(
                "denoise learned: input={} output={} model={} radius_fractions={fractions:?} seed={seed}",
                input.display(),
                output.display(),
                model.display()
            );
            let cloud = read_xyz(&input)?;
            let opts = LearnedOptions {
                seed,
                ..LearnedOptions::default()
            };
            let (out, rep) = denoise_learned(&cloud, &net, &scales, &opts)?;
            write_xyz(&out, &output, DEFAULT_PRECISION)?;
            if let Some(path) = report {
                let r_max = fractions.last().copied().unwrap_or(0.0) * bbox_diagonal(&cloud)?;
                std::fs::write(path, report_text(&rep, r_max))?;
            }
            Ok(String::new())
        }
        Command::Train(args) => run_train(&args),
        Command::Eval { denoised, clean, k } => {
            if k == 0 {
                return Err(usage("--k must be at least 1".into()));
            }
            let a = read_xyz(&denoised)?;
            let b = read_xyz(&clean)?;
            let r = evaluate(&a, &b, k)?;
            Ok(format!(
                "# {CD_CONVENTION}\n# {MSE_CONVENTION} (k={k})\ncd={:.6e} mse={:.6e}\n",
                r.cd, r.mse
            ))
        }
    }
}

/// Radii stored next to the model, or the defaults when there is no sidecar.
fn model_scales(model: &Path, count: usize) -> Result<Vec<ScaleSpec>> {
    let meta = sidecar_path(model, "meta");
    let scales = match std::fs::read_to_string(&meta) {
        Ok(text) => {
            let mut cfg = TrainConfig::default();
            for line in text.lines() {
                if let Some(v) = line.strip_prefix("radius_fractions=") {
                    cfg.set("radius_fractions", v)?;
                }
            }
            cfg.scales
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => ScaleSpec::defaults(),
        Err(e) => return Err(e.into()),
    };
    if scales.len() != count {
        return Err(Error::ModelFormat(format!(
            "model has {count} scales but its radii list has {}",
            scales.len()
        )));
    }
    Ok(scales)
}

/// One line per point: index, bandwidths in patch units, bandwidths in world
/// units, displacement. Skipped points carry `nan` bandwidths.
fn report_text(rep: &DenoiseReport, world_scale: f64) -> String {
    let mut s = String::from("# index sigma_d sigma_n sigma_d_world sigma_n_world dx dy dz\n");
    for (i, (p, d)) in rep.params_used.iter().zip(&rep.displacements).enumerate() {
        let (sd, sn) = p.map_or((f64::NAN, f64::NAN), |p| (p.sigma_d, p.sigma_n));
        let _ = writeln!(
            s,
            "{i} {sd:.9e} {sn:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
            sd * world_scale,
            sn * world_scale,
            d.x,
            d.y,
            d.z
        );
    }
    s
}

/// Clouds with normals from `*.xyz` files in `dir`, sorted by file name.
pub fn load_training_shapes(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "xyz"));
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut shapes = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        let c = read_xyz(f)?;
        if c.normals().is_none() {
            log::error!("{} has no normals", f.display());
            return Err(Error::MissingNormals(i));
        }
        shapes.push(c);
    }
    Ok(shapes)
}

fn run_train(args: &TrainArgs) -> Result<String> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    for (k, v) in args.overrides() {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    log::info!(
        "train: data={} out={} resume={}",
        args.data.display(),
        args.out.display(),
        args.resume
    );
    for line in cfg.to_text().lines() {
        log::info!("  {line}");
    }
    let shapes = load_training_shapes(&args.data)?;
    let ckpt = if args.resume {
        resume(&shapes, &cfg, &args.out)?
    } else {
        train(&shapes, &cfg, Some(&args.out))?
    };
    let mut s = String::new();
    for l in &ckpt.log {
        let _ = writeln!(s, "epoch={} lr={} loss={:.6e}", l.epoch, l.lr, l.mean_loss);
    }
    Ok(s)
}

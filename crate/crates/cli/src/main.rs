use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use xrpd_core::deblur::{deblur_full_pattern, DeblurOptions, DEFAULT_ITERATIONS, DEFAULT_PROMINENCE};
use xrpd_core::hlsvd::{hlsvd_fit, Bridge, HlsvdOptions, OrderSelection};
use xrpd_core::morphology::{estimate_background, DEFAULT_RADIUS};
use xrpd_core::pattern::{load_pattern, Format, Pattern, Stage, StageRecord};
use xrpd_core::pipeline::{emit_figure_tables, parse_range, run_pipeline, save_record, PipelineConfig};
use xrpd_core::synth::{synth_pattern, SynthSpec};
use xrpd_core::wavelet::{daubechies_filter, default_levels, denoise};

#[derive(Parser)]
#[command(name = "xrpd", version, about = "Pre-processing of X-ray powder diffraction profiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pattern from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for the clean reference components.
        #[arg(long)]
        truth_dir: Option<PathBuf>,
        /// Where to write the instrument-only standard, if the spec has one.
        #[arg(long)]
        standard_out: Option<PathBuf>,
    },
    /// Wavelet denoising.
    Denoise {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise_out: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Morphological background removal.
    Background {
        input: PathBuf,
        /// Background-free pattern.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        background_out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RADIUS)]
        radius: usize,
    },
    /// Damped-sinusoid fit.
    Fit {
        input: PathBuf,
        #[arg(long, default_value = "auto")]
        k: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        recon_out: Option<PathBuf>,
        /// Fit window `lo:hi` in degrees.
        #[arg(long)]
        range: Option<String>,
        /// `conjugate_pairs` or `analytic`.
        #[arg(long, default_value = "conjugate_pairs")]
        bridge: String,
    },
    /// Richardson–Lucy deblurring against an instrumental standard.
    Deblur {
        input: PathBuf,
        #[arg(long)]
        standard: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iterations: usize,
        #[arg(long, default_value_t = 0.0)]
        damping: f64,
        #[arg(long, default_value_t = DEFAULT_PROMINENCE)]
        prominence: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ranges_out: Option<PathBuf>,
    },
    /// Run every stage and write a report.
    Run(RunArgs),
    /// Write plot tables for a completed run directory.
    Figures { run_dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    standard: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    wavelet_order: Option<String>,
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    bg_radius: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    bridge: Option<String>,
    #[arg(long)]
    fit_range: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    damping: Option<String>,
    #[arg(long)]
    prominence: Option<String>,
    /// `signal` or `model`.
    #[arg(long)]
    deblur_input: Option<String>,
    #[arg(long)]
    preprocess_standard: bool,
    #[arg(long)]
    skip_denoise: bool,
    #[arg(long)]
    skip_background: bool,
    #[arg(long)]
    skip_fit: bool,
    /// Any config key as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn load(path: &Path) -> Result<Pattern> {
    load_pattern(path, Format::XyAscii).with_context(|| format!("loading {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn save(stage: Stage, pattern: &Pattern, path: &Path) -> Result<()> {
    save_record(&StageRecord::new(stage, pattern.clone()), path)?;
    Ok(())
}

fn build_config(a: RunArgs) -> Result<PipelineConfig> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let paths = [("input", &a.input), ("standard", &a.standard), ("output_dir", &a.output_dir)];
    for (key, value) in paths {
        if let Some(v) = value {
            cfg.set(key, &v.display().to_string())?;
        }
    }
    let values = [
        ("wavelet_order", &a.wavelet_order),
        ("levels", &a.levels),
        ("bg_radius", &a.bg_radius),
        ("k", &a.k),
        ("bridge", &a.bridge),
        ("fit_range", &a.fit_range),
        ("lr_iterations", &a.iterations),
        ("damping_threshold", &a.damping),
        ("prominence", &a.prominence),
        ("deblur_input", &a.deblur_input),
    ];
    for (key, value) in values {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.preprocess_standard |= a.preprocess_standard;
    cfg.skip_denoise |= a.skip_denoise;
    cfg.skip_background |= a.skip_background;
    cfg.skip_fit |= a.skip_fit;
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v)?;
    }
    if cfg.input.as_os_str().is_empty() || cfg.standard.as_os_str().is_empty() {
        return Err(anyhow!("both input and standard must be given"));
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            spec,
            out,
            truth_dir,
            standard_out,
        } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SynthSpec = serde_json::from_str(&text).context("parsing synth spec")?;
            let result = synth_pattern(&spec)?;
            save(Stage::Raw, &result.pattern, &out)?;
            if let Some(dir) = truth_dir {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                for record in &result.truth {
                    save_record(record, dir.join(record.stage.file_name()))?;
                }
            }
            match (standard_out, &result.standard) {
                (Some(path), Some(std)) => save(Stage::Raw, std, &path)?,
                (Some(_), None) => return Err(anyhow!("spec has no instrument_fwhm, so no standard exists")),
                _ => {}
            }
        }
        Command::Denoise {
            input,
            out,
            noise_out,
            order,
            levels,
        } => {
            let p = load(&input)?;
            let basis = daubechies_filter(order)?;
            let d = denoise(&p, &basis, levels.unwrap_or_else(|| default_levels(p.len())))?;
            log::info!("sigma {} threshold {} levels {}", d.sigma, d.threshold, d.levels);
            save(Stage::Denoised, &d.denoised, &out)?;
            if let Some(path) = noise_out {
                save(Stage::Denoised, &d.noise, &path)?;
            }
        }
        Command::Background {
            input,
            out,
            background_out,
            radius,
        } => {
            let p = load(&input)?;
            let b = estimate_background(&p, radius)?;
            log::info!("{} samples clamped", b.clamped);
            save(Stage::BackgroundFree, &b.corrected, &out)?;
            if let Some(path) = background_out {
                save(Stage::Background, &b.background, &path)?;
            }
        }
        Command::Fit {
            input,
            k,
            out,
            recon_out,
            range,
            bridge,
        } => {
            let mut p = load(&input)?;
            if let Some(r) = range {
                let (lo, hi) = parse_range(&r)?;
                p = p.restrict(lo, hi)?;
            }
            let bridge = match bridge.as_str() {
                "conjugate_pairs" => Bridge::ConjugatePairs,
                "analytic" => Bridge::Analytic,
                other => return Err(anyhow!("unknown bridge `{other}`")),
            };
            let order: OrderSelection = k.parse()?;
            let fit = hlsvd_fit(
                &p,
                &HlsvdOptions {
                    order,
                    bridge,
                    ..HlsvdOptions::default()
                },
            )?;
            write_json(&out, &fit)?;
            if let Some(path) = recon_out {
                let recon = p.with_intensity(fit.model.evaluate(p.len()))?;
                save(Stage::BackgroundFree, &recon, &path)?;
            }
        }
        Command::Deblur {
            input,
            standard,
            iterations,
            damping,
            prominence,
            out,
            ranges_out,
        } => {
            let p = load(&input)?;
            let s = load(&standard)?;
            let opts = DeblurOptions {
                iterations,
                damping_threshold: damping,
                prominence,
            };
            let d = deblur_full_pattern(&p, &s, &opts)?;
            save(Stage::Deblurred, &d.pattern, &out)?;
            if let Some(path) = ranges_out {
                write_json(&path, &d.ranges)?;
            }
        }
        Command::Run(args) => {
            let cfg = build_config(args)?;
            let report = run_pipeline(&cfg)?;
            if let Some(r) = &report.residue {
                println!(
                    "residue: in-range relative rms {:.4e}, rms {:.4e}",
                    r.relative_rms, r.rms
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Figures { run_dir } => {
            for path in emit_figure_tables(&run_dir)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn stage_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Denoise { .. } => "denoise",
        Command::Background { .. } => "background",
        Command::Fit { .. } => "fit",
        Command::Deblur { .. } => "deblur",
        Command::Run(_) => "run",
        Command::Figures { .. } => "figures",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stage = stage_name(&cli.command);
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{stage}]: {e:#}");
            ExitCode::FAILURE
        }
    }
}

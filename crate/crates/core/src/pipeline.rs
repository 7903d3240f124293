//! Stage orchestration: denoise → background → fit → deblur → reconvolve.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deblur::{
    deblur_full_pattern, fwhm_samples, reconvolve_check, DeblurOptions, PeakRange,
    DEFAULT_ITERATIONS, DEFAULT_PROMINENCE,
};
use crate::error::{Error, Result};
use crate::hlsvd::{hlsvd_fit, Bridge, HlsvdFit, HlsvdOptions, OrderSelection};
use crate::morphology::{disk_se, estimate_background, open, reshape_to_image, Image2D, DEFAULT_RADIUS};
use crate::pattern::{format_g, format_xy, load_pattern, Format, Pattern, Stage, StageRecord};
use crate::wavelet::{daubechies_filter, default_levels, denoise};

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const NOISE_FILE: &str = "noise.xy";
pub const RESIDUE_FILE: &str = "residue.xy";
pub const MODEL_FILE: &str = "model.json";
pub const MODEL_RECON_FILE: &str = "model.xy";
pub const RANGES_FILE: &str = "ranges.json";

/// Which signal feeds the deblurring stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeblurInput {
    /// The background-free pattern.
    #[default]
    Signal,
    /// The sinusoid-model reconstruction, clamped at zero.
    Model,
}

impl FromStr for DeblurInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signal" => Ok(Self::Signal),
            "model" => Ok(Self::Model),
            _ => Err(Error::Domain(format!("deblur input must be `signal` or `model`, got `{s}`"))),
        }
    }
}

impl fmt::Display for DeblurInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Signal => "signal",
            Self::Model => "model",
        })
    }
}

fn parse_bridge(s: &str) -> Result<Bridge> {
    match s {
        "conjugate_pairs" => Ok(Bridge::ConjugatePairs),
        "analytic" => Ok(Bridge::Analytic),
        _ => Err(Error::Domain(format!("bridge must be `conjugate_pairs` or `analytic`, got `{s}`"))),
    }
}

fn bridge_name(b: Bridge) -> &'static str {
    match b {
        Bridge::ConjugatePairs => "conjugate_pairs",
        Bridge::Analytic => "analytic",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub standard: PathBuf,
    pub output_dir: PathBuf,
    pub wavelet_order: usize,
    /// `None` picks a level count from the pattern length.
    pub levels: Option<usize>,
    pub bg_radius: usize,
    pub k: OrderSelection,
    pub bridge: Bridge,
    /// Restricts the fit to `lo..=hi` degrees.
    pub fit_range: Option<(f64, f64)>,
    pub lr_iterations: usize,
    pub damping_threshold: f64,
    pub prominence: f64,
    pub deblur_input: DeblurInput,
    /// Denoise and background-correct the standard with the same settings.
    pub preprocess_standard: bool,
    pub skip_denoise: bool,
    pub skip_background: bool,
    pub skip_fit: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            standard: PathBuf::new(),
            output_dir: PathBuf::from("out"),
            wavelet_order: 2,
            levels: None,
            bg_radius: DEFAULT_RADIUS,
            k: OrderSelection::Auto,
            bridge: Bridge::ConjugatePairs,
            fit_range: None,
            lr_iterations: DEFAULT_ITERATIONS,
            damping_threshold: 0.0,
            prominence: DEFAULT_PROMINENCE,
            deblur_input: DeblurInput::Signal,
            preprocess_standard: false,
            skip_denoise: false,
            skip_background: false,
            skip_fit: false,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Domain(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Domain(format!("{key}: expected true or false, got `{value}`"))),
    }
}

/// Parses `lo:hi`.
pub fn parse_range(value: &str) -> Result<(f64, f64)> {
    let (lo, hi) = value
        .split_once(':')
        .ok_or_else(|| Error::Domain(format!("range must look like lo:hi, got `{value}`")))?;
    let lo: f64 = parse_num("range", lo.trim())?;
    let hi: f64 = parse_num("range", hi.trim())?;
    if !(lo < hi) {
        return Err(Error::Domain(format!("range {lo}:{hi} is empty")));
    }
    Ok((lo, hi))
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 17] = [
        "input",
        "standard",
        "output_dir",
        "wavelet_order",
        "levels",
        "bg_radius",
        "k",
        "bridge",
        "fit_range",
        "lr_iterations",
        "damping_threshold",
        "prominence",
        "deblur_input",
        "preprocess_standard",
        "skip_denoise",
        "skip_background",
        "skip_fit",
    ];

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "input" => self.input = PathBuf::from(value),
            "standard" => self.standard = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "wavelet_order" => self.wavelet_order = parse_num(key, value)?,
            "levels" => {
                self.levels = if value == "auto" { None } else { Some(parse_num(key, value)?) }
            }
            "bg_radius" => self.bg_radius = parse_num(key, value)?,
            "k" => self.k = value.parse()?,
            "bridge" => self.bridge = parse_bridge(value)?,
            "fit_range" => {
                self.fit_range = if value == "none" { None } else { Some(parse_range(value)?) }
            }
            "lr_iterations" => self.lr_iterations = parse_num(key, value)?,
            "damping_threshold" => self.damping_threshold = parse_num(key, value)?,
            "prominence" => self.prominence = parse_num(key, value)?,
            "deblur_input" => self.deblur_input = value.parse()?,
            "preprocess_standard" => self.preprocess_standard = parse_bool(key, value)?,
            "skip_denoise" => self.skip_denoise = parse_bool(key, value)?,
            "skip_background" => self.skip_background = parse_bool(key, value)?,
            "skip_fit" => self.skip_fit = parse_bool(key, value)?,
            _ => return Err(Error::Domain(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "input" => self.input.display().to_string(),
            "standard" => self.standard.display().to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "wavelet_order" => self.wavelet_order.to_string(),
            "levels" => self.levels.map_or("auto".into(), |l| l.to_string()),
            "bg_radius" => self.bg_radius.to_string(),
            "k" => self.k.to_string(),
            "bridge" => bridge_name(self.bridge).into(),
            "fit_range" => self
                .fit_range
                .map_or("none".into(), |(a, b)| format!("{}:{}", format_g(a, 17), format_g(b, 17))),
            "lr_iterations" => self.lr_iterations.to_string(),
            "damping_threshold" => format_g(self.damping_threshold, 17),
            "prominence" => format_g(self.prominence, 17),
            "deblur_input" => self.deblur_input.to_string(),
            "preprocess_standard" => self.preprocess_standard.to_string(),
            "skip_denoise" => self.skip_denoise.to_string(),
            "skip_background" => self.skip_background.to_string(),
            "skip_fit" => self.skip_fit.to_string(),
            _ => return None,
        })
    }

    /// Flat `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        Self::KEYS
            .iter()
            .map(|k| (k.to_string(), self.get(k).expect("known key")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=crate::wavelet::MAX_ORDER).contains(&self.wavelet_order) {
            return Err(Error::Domain(format!(
                "wavelet_order must be in 1..={}, got {}",
                crate::wavelet::MAX_ORDER,
                self.wavelet_order
            )));
        }
        if self.levels == Some(0) {
            return Err(Error::Domain("levels must be at least 1".into()));
        }
        if self.bg_radius == 0 {
            return Err(Error::Domain("bg_radius must be at least 1".into()));
        }
        if self.lr_iterations == 0 {
            return Err(Error::Domain("lr_iterations must be at least 1".into()));
        }
        if !(self.damping_threshold >= 0.0 && self.damping_threshold.is_finite()) {
            return Err(Error::Domain("damping_threshold must be finite and ≥ 0".into()));
        }
        if !(self.prominence > 0.0 && self.prominence <= 1.0) {
            return Err(Error::Domain("prominence must be in (0, 1]".into()));
        }
        if self.skip_fit && self.deblur_input == DeblurInput::Model {
            return Err(Error::Domain("deblur_input = model needs the fit stage".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiseSummary {
    pub wavelet_order: usize,
    pub levels: usize,
    pub sigma: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackgroundSummary {
    pub radius: usize,
    pub image_width: usize,
    pub clamped: usize,
    /// `max |(denoised − background) + background + noise − raw|` before clamping.
    pub reconstruction_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub range: Option<(f64, f64)>,
    #[serde(flatten)]
    pub fit: HlsvdFit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RangeSummary {
    pub lo: f64,
    pub hi: f64,
    /// Degrees; `None` if the half-height crossings leave the range.
    pub fwhm_before: Option<f64>,
    pub fwhm_after: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeblurSummary {
    pub input: DeblurInput,
    pub psf: String,
    pub iterations: usize,
    pub damping_threshold: f64,
    pub prominence: f64,
    pub ranges: Vec<RangeSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidueSummary {
    pub rms: f64,
    pub max_abs: f64,
    pub in_range_rms: f64,
    pub relative_rms: f64,
    pub in_range_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

/// Everything `report.json` holds. Wall-clock times live only in `timing`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub config: BTreeMap<String, String>,
    pub samples: usize,
    pub theta0: f64,
    pub step: f64,
    pub stages: Vec<String>,
    pub skipped: Vec<String>,
    pub denoise: Option<DenoiseSummary>,
    pub background: Option<BackgroundSummary>,
    pub fit: Option<FitSummary>,
    pub deblur: Option<DeblurSummary>,
    pub residue: Option<ResidueSummary>,
    pub error: Option<StageFailure>,
    /// Seconds per stage.
    pub timing: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(REPORT_FILE);
        let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact {
            stage: "report".into(),
            path: path.clone(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes a stage record as `xy` text with its metadata as leading comments.
pub fn save_record(record: &StageRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = format!("# stage = {}\n", record.stage);
    for (k, v) in &record.metadata {
        text.push_str(&format!("# {k} = {v}\n"));
    }
    text.push_str(&format_xy(&record.pattern));
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    report: RunReport,
}

impl Runner<'_> {
    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        self.report
            .timing
            .insert(stage.to_string(), start.elapsed().as_secs_f64());
        match out {
            Ok(v) => {
                self.report.stages.push(stage.to_string());
                Ok(v)
            }
            Err(e) => {
                self.report.error = Some(StageFailure {
                    stage: stage.to_string(),
                    message: e.to_string(),
                });
                Err(e.in_stage(stage))
            }
        }
    }

    fn save(&self, stage: Stage, pattern: &Pattern) -> Result<()> {
        let record = StageRecord::new(stage, pattern.clone());
        save_record(&record, self.cfg.output_dir.join(stage.file_name()))
    }
}

/// Preprocesses a pattern the way the sample is: denoise and subtract the
/// morphological background.
fn clean_standard(cfg: &PipelineConfig, standard: &Pattern) -> Result<Pattern> {
    let mut p = standard.clone();
    if !cfg.skip_denoise {
        let basis = daubechies_filter(cfg.wavelet_order)?;
        let levels = cfg.levels.unwrap_or_else(|| default_levels(p.len()));
        p = denoise(&p, &basis, levels)?.denoised;
    }
    if !cfg.skip_background {
        p = estimate_background(&p, cfg.bg_radius)?.corrected;
    } else {
        p = p.with_intensity(p.intensity().iter().map(|v| v.max(0.0)).collect())?;
    }
    Ok(p)
}

/// Runs every stage, writing the stage files, `noise.xy`, `residue.xy`,
/// `model.json`, `ranges.json`, `config.txt` and `report.json` into the
/// output directory. On failure the report records the failing stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    let mut runner = Runner {
        cfg,
        report: RunReport {
            config: cfg.to_map(),
            ..RunReport::default()
        },
    };
    let result = execute(&mut runner);
    let dir = &cfg.output_dir;
    if fs::create_dir_all(dir).is_ok() {
        write_json(&dir.join(REPORT_FILE), &runner.report)?;
    }
    result.map(|_| runner.report)
}

fn execute(r: &mut Runner<'_>) -> Result<()> {
    let cfg = r.cfg;
    let (raw, standard) = r.timed("load", |r| {
        cfg.validate()?;
        fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
        fs::write(cfg.output_dir.join(CONFIG_FILE), cfg.to_text())
            .map_err(|e| Error::io(cfg.output_dir.join(CONFIG_FILE), e))?;
        let raw = load_pattern(&cfg.input, Format::XyAscii)?;
        let standard = load_pattern(&cfg.standard, Format::XyAscii)?;
        raw.check_same_grid(&standard)?;
        r.report.samples = raw.len();
        r.report.theta0 = raw.theta0();
        r.report.step = raw.step();
        r.save(Stage::Raw, &raw)?;
        Ok((raw, standard))
    })?;

    let (denoised, noise) = r.timed("denoise", |r| {
        let (denoised, noise) = if cfg.skip_denoise {
            r.report.skipped.push("denoise".into());
            (raw.clone(), raw.with_intensity(vec![0.0; raw.len()])?)
        } else {
            let basis = daubechies_filter(cfg.wavelet_order)?;
            let levels = cfg.levels.unwrap_or_else(|| default_levels(raw.len()));
            let d = denoise(&raw, &basis, levels)?;
            r.report.denoise = Some(DenoiseSummary {
                wavelet_order: cfg.wavelet_order,
                levels: d.levels,
                sigma: d.sigma,
                threshold: d.threshold,
            });
            (d.denoised, d.noise)
        };
        r.save(Stage::Denoised, &denoised)?;
        save_record(
            &StageRecord::new(Stage::Denoised, noise.clone()).with_meta("content", "noise"),
            cfg.output_dir.join(NOISE_FILE),
        )?;
        Ok((denoised, noise))
    })?;

    let (background, cleaned) = r.timed("background", |r| {
        let (background, cleaned, clamped, width) = if cfg.skip_background {
            r.report.skipped.push("background".into());
            let mut clamped = 0;
            let cleaned: Vec<f64> = denoised
                .intensity()
                .iter()
                .map(|&v| {
                    if v < 0.0 {
                        clamped += 1;
                        0.0
                    } else {
                        v
                    }
                })
                .collect();
            (
                raw.with_intensity(vec![0.0; raw.len()])?,
                raw.with_intensity(cleaned)?,
                clamped,
                0,
            )
        } else {
            let b = estimate_background(&denoised, cfg.bg_radius)?;
            (b.background, b.corrected, b.clamped, b.layout.width)
        };
        let reconstruction_error = (0..raw.len())
            .map(|i| {
                let unclamped = denoised.intensity()[i] - background.intensity()[i];
                (unclamped + background.intensity()[i] + noise.intensity()[i] - raw.intensity()[i]).abs()
            })
            .fold(0.0, f64::max);
        r.report.background = Some(BackgroundSummary {
            radius: cfg.bg_radius,
            image_width: width,
            clamped,
            reconstruction_error,
        });
        r.save(Stage::Background, &background)?;
        r.save(Stage::BackgroundFree, &cleaned)?;
        Ok((background, cleaned))
    })?;

    let model = r.timed("fit", |r| {
        if cfg.skip_fit {
            r.report.skipped.push("fit".into());
            return Ok(None);
        }
        let target = match cfg.fit_range {
            Some((lo, hi)) => cleaned.restrict(lo, hi)?,
            None => cleaned.clone(),
        };
        let fit = hlsvd_fit(
            &target,
            &HlsvdOptions {
                order: cfg.k,
                bridge: cfg.bridge,
                ..HlsvdOptions::default()
            },
        )?;
        let recon = target.with_intensity(fit.model.evaluate(target.len()))?;
        save_record(
            &StageRecord::new(Stage::BackgroundFree, recon.clone()).with_meta("content", "model"),
            cfg.output_dir.join(MODEL_RECON_FILE),
        )?;
        write_json(&cfg.output_dir.join(MODEL_FILE), &fit)?;
        r.report.fit = Some(FitSummary {
            range: cfg.fit_range,
            fit,
        });
        Ok(Some(recon))
    })?;

    let (deblurred, ranges, standard) = r.timed("deblur", |r| {
        let standard = if cfg.preprocess_standard {
            clean_standard(cfg, &standard)?
        } else {
            standard.clone()
        };
        let input = match (cfg.deblur_input, &model) {
            (DeblurInput::Model, Some(recon)) => {
                // The model may cover a sub-range; elsewhere keep the signal.
                let mut v = cleaned.intensity().to_vec();
                let offset = cleaned.index_of(recon.theta0());
                for (i, x) in recon.intensity().iter().enumerate() {
                    v[offset + i] = x.max(0.0);
                }
                cleaned.with_intensity(v)?
            }
            _ => cleaned.clone(),
        };
        let opts = DeblurOptions {
            iterations: cfg.lr_iterations,
            damping_threshold: cfg.damping_threshold,
            prominence: cfg.prominence,
        };
        let out = deblur_full_pattern(&input, &standard, &opts)?;
        let step = input.step();
        let fwhm = |p: &Pattern, range: &PeakRange| {
            let (lo, hi) = range.indices(p);
            fwhm_samples(&p.intensity()[lo..=hi]).map(|w| w * step)
        };
        r.report.deblur = Some(DeblurSummary {
            input: cfg.deblur_input,
            psf: "per_range".into(),
            iterations: opts.iterations,
            damping_threshold: opts.damping_threshold,
            prominence: opts.prominence,
            ranges: out
                .ranges
                .iter()
                .map(|range| RangeSummary {
                    lo: range.lo,
                    hi: range.hi,
                    fwhm_before: fwhm(&input, range),
                    fwhm_after: fwhm(&out.pattern, range),
                })
                .collect(),
        });
        r.save(Stage::Deblurred, &out.pattern)?;
        write_json(&cfg.output_dir.join(RANGES_FILE), &out.ranges)?;
        Ok((out.pattern, out.ranges, standard))
    })?;

    r.timed("reconvolve", |r| {
        let check = reconvolve_check(&deblurred, &standard, &background, &noise, &raw, &ranges)?;
        let reconvolved: Vec<f64> = raw
            .intensity()
            .iter()
            .zip(check.residue.intensity())
            .map(|(o, d)| o - d)
            .collect();
        r.save(Stage::Reconvolved, &raw.with_intensity(reconvolved)?)?;
        save_record(
            &StageRecord::new(Stage::Reconvolved, check.residue.clone()).with_meta("content", "residue"),
            cfg.output_dir.join(RESIDUE_FILE),
        )?;
        r.report.residue = Some(ResidueSummary {
            rms: check.rms,
            max_abs: check.max_abs,
            in_range_rms: check.in_range_rms,
            relative_rms: check.relative_rms,
            in_range_samples: check.in_range_samples,
        });
        Ok(())
    })
}

fn load_artifact(dir: &Path, stage: &str, file: &str) -> Result<Pattern> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: stage.to_string(),
            path,
        });
    }
    load_signed(&path)
}

/// Loads an artifact that may hold negative values (noise, residue).
fn load_signed(path: &Path) -> Result<Pattern> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut theta = Vec::new();
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::Parse {
                line: i + 1,
                message: "expected two columns".into(),
            });
        };
        theta.push(parse_num::<f64>("theta", a).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
        values.push(parse_num::<f64>("intensity", b).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Pattern::new(theta, values)
}

fn pattern_csv(p: &Pattern) -> String {
    let mut s = String::from("theta,intensity\n");
    for (t, v) in p.theta().iter().zip(p.intensity()) {
        s.push_str(&format!("{},{}\n", format_g(*t, 17), format_g(*v, 17)));
    }
    s
}

fn image_csv(img: &Image2D) -> String {
    let mut s = String::from("row,col,value\n");
    for r in 0..img.rows() {
        for c in 0..img.cols() {
            s.push_str(&format!("{r},{c},{}\n", format_g(img.get(r, c), 17)));
        }
    }
    s
}

/// Writes the background-panel (`fig2_*`) and result-panel (`fig3_*`) tables
/// for a completed run directory. Returns the written paths.
pub fn emit_figure_tables(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let report = RunReport::load(dir)?;
    let radius = report.background.as_ref().map_or(DEFAULT_RADIUS, |b| b.radius);
    let raw = load_artifact(dir, "raw", &Stage::Raw.file_name())?;
    let denoised = load_artifact(dir, "denoise", &Stage::Denoised.file_name())?;
    let background = load_artifact(dir, "background", &Stage::Background.file_name())?;
    let cleaned = load_artifact(dir, "background", &Stage::BackgroundFree.file_name())?;
    let deblurred = load_artifact(dir, "deblur", &Stage::Deblurred.file_name())?;
    let residue = load_artifact(dir, "reconvolve", RESIDUE_FILE)?;

    let (reshaped, _) = reshape_to_image(denoised.intensity())?;
    let opened = open(&reshaped, &disk_se(radius)?);
    let tables = [
        ("fig2_original.csv", pattern_csv(&denoised)),
        ("fig2_reshaped.csv", image_csv(&reshaped)),
        ("fig2_opened.csv", image_csv(&opened)),
        ("fig2_background.csv", pattern_csv(&background)),
        ("fig3_original.csv", pattern_csv(&raw)),
        ("fig3_cleaned.csv", pattern_csv(&cleaned)),
        ("fig3_deblurred.csv", pattern_csv(&deblurred)),
        ("fig3_residue.csv", pattern_csv(&residue)),
    ];
    let mut written = Vec::with_capacity(tables.len());
    for (name, text) in tables {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

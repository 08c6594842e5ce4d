use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use domalign::gpa::{align_photometric_detailed, GammaSolveConfig};
use domalign::gtexa::{maybe_texture_align, BilateralParams};
use domalign::imgio::{load_image, save_image, scan_dataset};
use domalign::rng::stream;
use domalign::ImageRgbF64;

use crate::output::{create_dir, read_config, require_dir, write_json};
use crate::{CliError, CliResult};

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with an `AlignConfig`; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probability of bilateral-filtering each aligned image.
    #[arg(long)]
    pub texture_prob: Option<f64>,
    /// Bilateral parameters as `d,sigma_c,sigma_s`.
    #[arg(long, value_parser = parse_filter)]
    pub filter: Option<BilateralParams>,
    /// Record per-image wall time in the report (makes it non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

pub fn parse_filter(s: &str) -> Result<BilateralParams, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err("expected d,sigma_c,sigma_s".into());
    }
    let d = parts[0].parse().map_err(|e| format!("d: {e}"))?;
    let sigma_c = parts[1].parse().map_err(|e| format!("sigma_c: {e}"))?;
    let sigma_s = parts[2].parse().map_err(|e| format!("sigma_s: {e}"))?;
    let p = BilateralParams { d, sigma_c, sigma_s };
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub seed: u64,
    pub gamma: GammaSolveConfig,
    pub texture_probability: f64,
    pub texture_params: BilateralParams,
    /// Files ending in this suffix are labels, not images.
    pub label_suffix: String,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            seed: 0,
            gamma: GammaSolveConfig::default(),
            texture_probability: 0.0,
            texture_params: BilateralParams::default(),
            label_suffix: "_label.png".into(),
        }
    }
}

#[derive(Debug, Serialize)]
struct AlignEntry {
    source: String,
    reference: String,
    gamma: f64,
    objective: f64,
    iterations: usize,
    textured: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_ms: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AlignReport {
    config: AlignConfig,
    images: Vec<AlignEntry>,
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn run(args: AlignArgs) -> CliResult {
    let mut cfg: AlignConfig = match &args.config {
        Some(p) => read_config(p)?,
        None => AlignConfig::default(),
    };
    if let Some(b) = args.beta {
        cfg.gamma.beta = b;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = args.texture_prob {
        cfg.texture_probability = p;
    }
    if let Some(f) = args.filter {
        cfg.texture_params = f;
    }
    cfg.gamma.validate()?;
    cfg.texture_params.validate()?;
    if !(0.0..=1.0).contains(&cfg.texture_probability) {
        return Err(CliError::usage("texture probability must lie in [0, 1]"));
    }
    require_dir(&args.source, "source")?;
    require_dir(&args.target, "target")?;

    let manifest = scan_dataset(&args.source, &args.target, &cfg.label_suffix, 2)?;
    let targets = manifest
        .target_entries
        .par_iter()
        .map(load_image::<f64>)
        .collect::<Result<Vec<_>, _>>()?;
    let results = manifest
        .source_entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| -> CliResult<(ImageRgbF64, AlignEntry)> {
            let start = Instant::now();
            let mut rng = stream(cfg.seed, i as u64);
            let j = rng.random_range(0..targets.len());
            let src = load_image::<f64>(&entry.image)?;
            let aligned = align_photometric_detailed(&src, &targets[j], &cfg.gamma)?;
            let (image, textured) =
                maybe_texture_align(&aligned.image, &cfg.texture_params, cfg.texture_probability, &mut rng)?;
            let record = AlignEntry {
                source: file_name(&entry.image),
                reference: file_name(&manifest.target_entries[j]),
                gamma: aligned.gamma.gamma,
                objective: aligned.gamma.objective,
                iterations: aligned.gamma.iterations,
                textured,
                elapsed_ms: args.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
            };
            Ok((image, record))
        })
        .collect::<CliResult<Vec<_>>>()?;

    // everything is computed before the first write
    create_dir(&args.out)?;
    let mut images = Vec::with_capacity(results.len());
    for (image, record) in results {
        save_image(&image, args.out.join(&record.source))?;
        images.push(record);
    }
    write_json(&args.out.join("align_report.json"), &AlignReport { config: cfg, images })
}

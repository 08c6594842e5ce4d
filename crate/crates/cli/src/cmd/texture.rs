use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use domalign::gtexa::{default_grid, optimize_filter_params, subsample_indices, BilateralParams, TextureAlignReport};
use domalign::imgio::{load_image, scan_dataset};
use domalign::rng::stream;

use crate::output::{emit_json, read_config, require_dir};
use crate::{CliError, CliResult};

#[derive(Args, Debug)]
pub struct TextureArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Window diameters, comma separated. Any grid flag replaces the default grid.
    #[arg(long, value_delimiter = ',')]
    pub d: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub sigma_c: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub sigma_s: Option<Vec<f64>>,
    /// Leave the identity filter out of a flag-built grid.
    #[arg(long)]
    pub no_identity: bool,
    /// Maximum images used per side.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureConfig {
    pub seed: u64,
    pub cap: usize,
    /// `None` selects the default grid.
    pub grid: Option<Vec<BilateralParams>>,
    pub label_suffix: String,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            seed: 0,
            cap: 50,
            grid: None,
            label_suffix: "_label.png".into(),
        }
    }
}

#[derive(Debug, Serialize)]
struct TextureOutput {
    config: TextureConfig,
    source_images: usize,
    target_images: usize,
    #[serde(flatten)]
    report: TextureAlignReport,
}

fn flag_grid(args: &TextureArgs) -> Option<Vec<BilateralParams>> {
    if args.d.is_none() && args.sigma_c.is_none() && args.sigma_s.is_none() {
        return None;
    }
    let def = BilateralParams::default();
    let ds = args.d.clone().unwrap_or(vec![def.d]);
    let cs = args.sigma_c.clone().unwrap_or(vec![def.sigma_c]);
    let ss = args.sigma_s.clone().unwrap_or(vec![def.sigma_s]);
    let mut grid = Vec::new();
    if !args.no_identity {
        grid.push(BilateralParams::identity());
    }
    for &d in &ds {
        for &sigma_c in &cs {
            for &sigma_s in &ss {
                grid.push(BilateralParams { d, sigma_c, sigma_s });
            }
        }
    }
    Some(grid)
}

pub fn run(args: TextureArgs) -> CliResult {
    let mut cfg: TextureConfig = match &args.config {
        Some(p) => read_config(p)?,
        None => TextureConfig::default(),
    };
    if let Some(g) = flag_grid(&args) {
        cfg.grid = Some(g);
    }
    if let Some(c) = args.cap {
        cfg.cap = c;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if cfg.cap == 0 {
        return Err(CliError::usage("--cap must be at least 1"));
    }
    let grid = cfg.grid.clone().unwrap_or_else(default_grid);
    for p in &grid {
        p.validate()?;
    }
    require_dir(&args.source, "source")?;
    require_dir(&args.target, "target")?;
    let manifest = scan_dataset(&args.source, &args.target, &cfg.label_suffix, 2)?;
    let src_idx = subsample_indices(manifest.source_entries.len(), cfg.cap, &mut stream(cfg.seed, 0));
    let tgt_idx = subsample_indices(manifest.target_entries.len(), cfg.cap, &mut stream(cfg.seed, 1));
    let sources = src_idx
        .par_iter()
        .map(|&i| load_image::<f64>(&manifest.source_entries[i].image))
        .collect::<Result<Vec<_>, _>>()?;
    let targets = tgt_idx
        .par_iter()
        .map(|&i| load_image::<f64>(&manifest.target_entries[i]))
        .collect::<Result<Vec<_>, _>>()?;
    let report = optimize_filter_params(&sources, &targets, &grid)?;
    let out = TextureOutput {
        config: cfg,
        source_images: sources.len(),
        target_images: targets.len(),
        report,
    };
    emit_json(args.out.as_deref(), &out)
}

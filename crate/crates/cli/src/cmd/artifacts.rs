use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use domalign::artifact::StageArtifact;
use domalign::catreg::compute_category_centers;
use domalign::gma::{fit_pca, kmeans_atoms, sample_correct_features, ManifoldProjector};
use domalign::rng::stream;
use domalign::tcr::{category_thresholds, pseudo_labels, ProbabilityMap, ThresholdConfig};
use domalign::MatrixF64;

use crate::output::{create_dir, read_config, write_csv, write_json};
use crate::{CliError, CliResult};

#[derive(Args, Debug)]
pub struct ArtifactArgs {
    /// JSON feature dump (source features, probabilities and labels; target probabilities).
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of manifold atoms.
    #[arg(long)]
    pub n_z: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactConfig {
    pub seed: u64,
    pub n_z: usize,
    pub hidden_dim: usize,
    pub pca_energy: f64,
    /// Fixed reduced dimension instead of the energy rule.
    pub pca_dim: Option<usize>,
    pub samples_per_atom: usize,
    pub kmeans_iters: usize,
    pub thresholds: ThresholdConfig,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        ArtifactConfig {
            seed: 0,
            n_z: 64,
            hidden_dim: 32,
            pca_energy: 0.9,
            pca_dim: None,
            samples_per_atom: 100,
            kmeans_iters: 100,
            thresholds: ThresholdConfig::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceDump {
    features: Vec<Vec<f64>>,
    probabilities: Vec<Vec<f64>>,
    labels: Vec<u8>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetDump {
    probabilities: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureDump {
    class_count: usize,
    source: SourceDump,
    target: TargetDump,
}

#[derive(Debug, Serialize)]
struct ArtifactSummary {
    config: ArtifactConfig,
    sampled_features: usize,
    reduced_dim: usize,
    explained_ratio: f64,
    inertia_history: Vec<f64>,
    classes_present: Vec<bool>,
    thresholds: Vec<f64>,
    valid_fraction: f64,
}

#[derive(Debug, Serialize)]
struct PseudoRow {
    index: usize,
    label: u8,
    confidence: f64,
    valid: bool,
}

pub fn run(args: ArtifactArgs) -> CliResult {
    let mut cfg: ArtifactConfig = match &args.config {
        Some(p) => read_config(p)?,
        None => ArtifactConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_z {
        cfg.n_z = n;
    }
    if cfg.n_z == 0 || cfg.hidden_dim == 0 || cfg.samples_per_atom == 0 {
        return Err(CliError::usage("n_z, hidden_dim and samples_per_atom must be positive"));
    }
    let dump: FeatureDump = read_config(&args.features)?;
    let feats = MatrixF64::from_rows(&dump.source.features)?;
    let probs = MatrixF64::from_rows(&dump.source.probabilities)?;
    let target = MatrixF64::from_rows(&dump.target.probabilities)?;
    let labels = &dump.source.labels;

    let centers = compute_category_centers(&feats, labels, dump.class_count)?;
    let target_map = ProbabilityMap::new(target.rows(), 1, target)?;
    let pl = pseudo_labels(&target_map);
    let thresholds = category_thresholds(&pl, &cfg.thresholds, dump.class_count)?;

    let correct = (0..feats.rows())
        .filter(|&r| {
            let row = probs.row(r);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == labels[r] as usize
        })
        .count();
    let mut rng = stream(cfg.seed, 0);
    let n = (cfg.samples_per_atom * cfg.n_z).min(correct);
    let sampled = sample_correct_features(&feats, &probs, labels, n, &mut rng)?;
    let pca = fit_pca(&sampled, cfg.pca_energy, cfg.pca_dim)?;
    let atoms = kmeans_atoms(&pca.reduce_matrix(&sampled)?, cfg.n_z, &mut rng, cfg.kmeans_iters)?;
    let projector = ManifoldProjector::new(pca, atoms, cfg.hidden_dim, &mut rng)?;

    let rows: Vec<PseudoRow> = pl
        .labels
        .iter()
        .zip(&pl.confidence)
        .enumerate()
        .map(|(index, (&label, &confidence))| PseudoRow {
            index,
            label,
            confidence,
            valid: confidence >= thresholds.thresholds[label as usize],
        })
        .collect();
    let summary = ArtifactSummary {
        config: cfg,
        sampled_features: sampled.rows(),
        reduced_dim: projector.pca.reduced_dim(),
        explained_ratio: projector.pca.explained_ratio,
        inertia_history: projector.atoms.inertia_history.clone(),
        classes_present: centers.present.clone(),
        thresholds: thresholds.thresholds.clone(),
        valid_fraction: rows.iter().filter(|r| r.valid).count() as f64 / rows.len().max(1) as f64,
    };
    let artifact = StageArtifact::new(0, projector, centers, thresholds);

    create_dir(&args.out)?;
    artifact.save(args.out.join("artifact.json"))?;
    write_csv(&args.out.join("pseudo_labels.csv"), &rows)?;
    write_json(&args.out.join("summary.json"), &summary)
}

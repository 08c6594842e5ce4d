//! Step 0 (image-level adaptation) followed by self-supervised feature stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::segmenter::{
    cross_entropy_loss_grad, mean_iou, pixel_accuracy, pixel_descriptors, SegmenterGrad, ToySegmenter,
    DESCRIPTOR_DIM,
};
use super::synthetic::{SyntheticDomainSpec, SyntheticDomains};
use crate::artifact::StageArtifact;
use crate::catreg::{compute_category_centers, triplet_loss, triplet_loss_grad, CategoryCenters, TripletConfig};
use crate::error::{Error, Result};
use crate::gma::{fit_pca, kmeans_atoms, manifold_loss_grad, sample_correct_features, ManifoldProjector};
use crate::gpa::{align_photometric, GammaSolveConfig};
use crate::gtexa::{bilateral_filter, default_grid, optimize_filter_params, BilateralParams, TextureAlignReport};
use crate::imgio::{ImageRgb, LabelMap};
use crate::matrix::Matrix;
use crate::rng::{stream, Rng as StageRng};
use crate::scalar::{softmax_in_place, Scalar};
use crate::tcr::{
    category_thresholds, consistency_loss_grad, perturb, pseudo_labels, CategoryThresholds, PerturbConfig,
    ProbabilityMap, PseudoLabelMap, ThresholdConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg: f64,
    pub mfd: f64,
    pub triplet: f64,
    pub cst: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg: 1.0,
            mfd: 1.0,
            triplet: 1.0,
            cst: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Total stages `K`, counting Step 0.
    pub stages: usize,
    /// Gradient steps per stage `U`.
    pub iterations: usize,
    pub learning_rate: f64,
    /// Power of the polynomial decay, restarted every stage.
    pub poly_power: f64,
    /// Learning-rate multiplier for the feature stages.
    pub feature_lr_scale: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub feature_dim: usize,
    pub use_gpa: bool,
    pub use_gtexa: bool,
    pub gtexa_probability: f64,
    /// `None` selects the default 46-point grid.
    pub filter_grid: Option<Vec<BilateralParams>>,
    pub gamma: GammaSolveConfig,
    pub n_z: usize,
    pub hidden_dim: usize,
    pub pca_energy: f64,
    /// Sampled correct features per atom.
    pub samples_per_atom: usize,
    pub kmeans_iters: usize,
    pub triplet: TripletConfig,
    pub thresholds: ThresholdConfig,
    pub perturb: PerturbConfig,
    pub data: SyntheticDomainSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: 3,
            iterations: 500,
            learning_rate: 0.3,
            poly_power: 0.9,
            feature_lr_scale: 0.5,
            weights: LossWeights::default(),
            seed: 0,
            feature_dim: 8,
            use_gpa: true,
            use_gtexa: true,
            gtexa_probability: 0.5,
            filter_grid: None,
            gamma: GammaSolveConfig::default(),
            n_z: 16,
            hidden_dim: 32,
            pca_energy: 0.9,
            samples_per_atom: 100,
            kmeans_iters: 100,
            triplet: TripletConfig::default(),
            thresholds: ThresholdConfig::default(),
            perturb: PerturbConfig::default(),
            data: SyntheticDomainSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.stages == 0 || self.iterations == 0 {
            return bad("stages and iterations must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.feature_lr_scale > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.poly_power >= 0.0) || !(0.0..=1.0).contains(&self.gtexa_probability) {
            return bad("poly_power must be nonnegative and gtexa_probability in [0,1]");
        }
        let w = &self.weights;
        if [w.seg, w.mfd, w.triplet, w.cst].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be finite and nonnegative");
        }
        if self.feature_dim == 0 || self.n_z == 0 || self.hidden_dim == 0 || self.samples_per_atom == 0 {
            return bad("feature_dim, n_z, hidden_dim and samples_per_atom must be positive");
        }
        if !(self.pca_energy > 0.0 && self.pca_energy <= 1.0) || self.triplet.alpha < 0.0 {
            return bad("pca_energy must lie in (0,1] and alpha be nonnegative");
        }
        self.gamma.validate()?;
        self.perturb.validate()?;
        self.data.validate()
    }

    fn learning_rate_at(&self, stage: usize, step: usize) -> f64 {
        let base = if stage == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.feature_lr_scale
        };
        base * (1.0 - step as f64 / self.iterations as f64).powf(self.poly_power)
    }
}

/// Source images after image-level alignment, with descriptors cached.
#[derive(Clone, Debug)]
pub struct PreparedData<T> {
    pub class_count: usize,
    pub height: usize,
    pub width: usize,
    pub source_labels: Vec<LabelMap>,
    /// `aligned[i][j]`: source `i` aligned to target reference `j`
    /// (a single raw entry per source when GPA is off).
    pub aligned: Vec<Vec<Matrix<T>>>,
    /// Bilateral-filtered counterparts of `aligned`; empty without GTEXA.
    pub filtered: Vec<Vec<Matrix<T>>>,
    /// Per source, the reference used for statistics between stages.
    pub fixed_reference: Vec<usize>,
    pub target_images: Vec<ImageRgb<T>>,
    pub target_descriptors: Vec<Matrix<T>>,
    pub target_labels: Vec<LabelMap>,
    pub texture: Option<TextureAlignReport>,
}

impl<T: Scalar> PreparedData<T> {
    fn reference_slot(&self, i: usize, j: usize) -> usize {
        if self.aligned[i].len() == 1 {
            0
        } else {
            j
        }
    }

    /// Descriptors used for statistics (centers, atoms, source accuracy).
    fn fixed_source(&self, i: usize) -> &Matrix<T> {
        &self.aligned[i][self.reference_slot(i, self.fixed_reference[i])]
    }
}

/// Runs GPA against every target reference and fits the texture filter.
pub fn prepare_data<T: Scalar>(domains: &SyntheticDomains<T>, cfg: &PipelineConfig) -> Result<PreparedData<T>> {
    let (ns, nt) = (domains.source.len(), domains.target.len());
    if ns == 0 || nt == 0 {
        return Err(Error::EmptyDataset("toy pipeline needs source and target images".into()));
    }
    let (h, w) = (domains.target[0].height(), domains.target[0].width());
    let mut pair_rng = stream(cfg.seed, 1);
    let fixed_reference: Vec<usize> = (0..ns).map(|_| pair_rng.random_range(0..nt)).collect();

    let mut aligned_imgs = Vec::with_capacity(ns);
    for (src, _) in &domains.source {
        let row = if cfg.use_gpa {
            domains
                .target
                .iter()
                .map(|t| align_photometric(src, t, &cfg.gamma))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![src.clone()]
        };
        aligned_imgs.push(row);
    }
    let slot = |i: usize| if cfg.use_gpa { fixed_reference[i] } else { 0 };

    let (texture, filtered) = if cfg.use_gtexa {
        let fixed: Vec<ImageRgb<T>> = (0..ns).map(|i| aligned_imgs[i][slot(i)].clone()).collect();
        let grid = cfg.filter_grid.clone().unwrap_or_else(default_grid);
        let report = optimize_filter_params(&fixed, &domains.target, &grid)?;
        let filtered = aligned_imgs
            .iter()
            .map(|row| {
                row.iter()
                    .map(|img| Ok(pixel_descriptors(&bilateral_filter(img, &report.params)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        (Some(report), filtered)
    } else {
        (None, Vec::new())
    };
    let aligned = aligned_imgs
        .iter()
        .map(|row| row.iter().map(pixel_descriptors).collect())
        .collect();
    Ok(PreparedData {
        class_count: cfg.data.class_count,
        height: h,
        width: w,
        source_labels: domains.source.iter().map(|(_, l)| l.clone()).collect(),
        aligned,
        filtered,
        fixed_reference,
        target_images: domains.target.clone(),
        target_descriptors: domains.target.iter().map(pixel_descriptors).collect(),
        target_labels: domains.target_labels.clone(),
        texture,
    })
}

/// Everything frozen for the duration of one feature stage, computed from
/// the previous stage's model.
#[derive(Clone, Debug)]
pub struct FeatureStageState<T> {
    pub pseudo: Vec<PseudoLabelMap<T>>,
    pub thresholds: CategoryThresholds<T>,
    pub centers: CategoryCenters<T>,
    pub projector: ManifoldProjector<T>,
}

fn stack<T: Scalar>(parts: impl IntoIterator<Item = Matrix<T>>) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(0, 0);
    for p in parts {
        out.append_rows(&p)?;
    }
    Ok(out)
}

fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut p = m.clone();
    for r in 0..p.rows() {
        softmax_in_place(p.row_mut(r));
    }
    p
}

fn target_pseudo_labels<T: Scalar>(model: &ToySegmenter<T>, data: &PreparedData<T>) -> Result<Vec<PseudoLabelMap<T>>> {
    data.target_descriptors
        .iter()
        .map(|d| {
            let out = model.forward(d)?;
            Ok(pseudo_labels(&ProbabilityMap::from_logits(data.height, data.width, &out.logits)?))
        })
        .collect()
}

/// Pseudo-labels, thresholds, centers, PCA, atoms and a fresh projector
/// from the frozen model `prev`.
pub fn build_stage_state<T: Scalar, R: Rng + ?Sized>(
    prev: &ToySegmenter<T>,
    data: &PreparedData<T>,
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<FeatureStageState<T>> {
    let pseudo = target_pseudo_labels(prev, data)?;
    let all = PseudoLabelMap {
        height: pseudo.len() * data.height,
        width: data.width,
        labels: pseudo.iter().flat_map(|p| p.labels.iter().copied()).collect(),
        confidence: pseudo.iter().flat_map(|p| p.confidence.iter().copied()).collect(),
    };
    let thresholds = category_thresholds(&all, &cfg.thresholds, data.class_count)?;

    let outs = (0..data.source_labels.len())
        .map(|i| prev.forward(data.fixed_source(i)))
        .collect::<Result<Vec<_>>>()?;
    let feats = stack(outs.iter().map(|o| o.features.clone()))?;
    let probs = stack(outs.iter().map(|o| softmax_rows(&o.logits)))?;
    let labels: Vec<u8> = data.source_labels.iter().flat_map(|l| l.labels.iter().copied()).collect();
    let centers = compute_category_centers(&feats, &labels, data.class_count)?;

    let available = (0..feats.rows())
        .filter(|&r| {
            let row = probs.row(r);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = c;
                }
            }
            best == labels[r] as usize
        })
        .count();
    let n = (cfg.samples_per_atom * cfg.n_z).min(available);
    let sampled = sample_correct_features(&feats, &probs, &labels, n, &mut *rng)?;
    let pca = fit_pca(&sampled, cfg.pca_energy, None)?;
    let atoms = kmeans_atoms(&pca.reduce_matrix(&sampled)?, cfg.n_z, &mut *rng, cfg.kmeans_iters)?;
    let projector = ManifoldProjector::new(pca, atoms, cfg.hidden_dim, &mut *rng)?;
    Ok(FeatureStageState {
        pseudo,
        thresholds,
        centers,
        projector,
    })
}

/// Loss terms of one gradient step (weighted terms sum to `total`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: usize,
    pub step: usize,
    pub lr: f64,
    pub seg: f64,
    /// Manifold loss divided by the number of feature entries.
    pub mfd: f64,
    pub triplet: f64,
    /// Consistency loss divided by the valid-pixel count.
    pub cst: f64,
    /// Unnormalized consistency sum.
    pub cst_sum: f64,
    pub cst_valid: usize,
    pub total: f64,
}

fn add_grad<T: Scalar>(acc: &mut SegmenterGrad<T>, g: &SegmenterGrad<T>) {
    for (a, b) in acc.feature.as_mut_slice().iter_mut().zip(g.feature.as_slice()) {
        *a += *b;
    }
    for (a, b) in acc.head.as_mut_slice().iter_mut().zip(g.head.as_slice()) {
        *a += *b;
    }
}

fn scale<T: Scalar>(m: &mut Matrix<T>, s: T) {
    m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
}

/// `U` gradient steps. Stage 0 uses `L_seg` on aligned source images only;
/// later stages add the manifold, triplet and consistency terms against the
/// frozen `state`, whose projector weights are trained alongside the model.
pub fn train_stage<T: Scalar, R: Rng + ?Sized>(
    mut model: ToySegmenter<T>,
    data: &PreparedData<T>,
    mut state: Option<&mut FeatureStageState<T>>,
    cfg: &PipelineConfig,
    stage: usize,
    rng: &mut R,
) -> Result<(ToySegmenter<T>, Vec<StepRecord>)> {
    let (ns, nt) = (data.source_labels.len(), data.target_images.len());
    let w = cfg.weights;
    let mut records = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let lr = cfg.learning_rate_at(stage, step);
        let i = rng.random_range(0..ns);
        let j = rng.random_range(0..nt);
        let slot = data.reference_slot(i, j);
        let use_filtered = stage > 0 && rng.random::<f64>() < cfg.gtexa_probability && !data.filtered.is_empty();
        let desc = if use_filtered {
            &data.filtered[i][slot]
        } else {
            &data.aligned[i][slot]
        };
        let labels = &data.source_labels[i];
        let out = model.forward(desc)?;
        let (seg, mut g_logits) = cross_entropy_loss_grad(&out.logits, labels)?;
        scale(&mut g_logits, T::lit(w.seg));
        let mut rec = StepRecord {
            stage,
            step,
            lr,
            seg: seg.to_f64_lossy(),
            mfd: 0.0,
            triplet: 0.0,
            cst: 0.0,
            cst_sum: 0.0,
            cst_valid: 0,
            total: 0.0,
        };

        let Some(st) = state.as_deref_mut() else {
            rec.total = w.seg * rec.seg;
            let grad = model.backward(desc, &out, Some(&g_logits), None);
            model.step(&grad, T::lit(lr));
            records.push(rec);
            continue;
        };

        let tri = triplet_loss(&out.features, &labels.labels, &st.centers, &cfg.triplet)?;
        let mut g_tri = triplet_loss_grad(&out.features, &labels.labels, &st.centers, &cfg.triplet)?;
        scale(&mut g_tri, T::lit(w.triplet));
        let mut grad = model.backward(desc, &out, Some(&g_logits), Some(&g_tri));

        let t = rng.random_range(0..nt);
        let tdesc = &data.target_descriptors[t];
        let tout = model.forward(tdesc)?;
        let mg = manifold_loss_grad(&tout.features, &st.projector)?;
        let elements = (tout.features.rows() * tout.features.cols()) as f64;
        let mfd_scale = T::lit(w.mfd / elements);
        let mut g_mfd = mg.grad_x;
        scale(&mut g_mfd, mfd_scale);
        add_grad(&mut grad, &model.backward(tdesc, &tout, None, Some(&g_mfd)));

        let perturbed = perturb(&data.target_images[t], &cfg.perturb, &mut *rng)?;
        let pdesc = pixel_descriptors(&perturbed.image);
        let pout = model.forward(&pdesc)?;
        let (cst, mut g_cst) =
            consistency_loss_grad(&st.pseudo[t], &st.thresholds, &pout.logits, perturbed.warp.as_ref())?;
        let cst_scale = w.cst / cst.valid_count.max(1) as f64;
        scale(&mut g_cst, T::lit(cst_scale));
        add_grad(&mut grad, &model.backward(&pdesc, &pout, Some(&g_cst), None));

        rec.mfd = mg.loss.to_f64_lossy() / elements;
        rec.triplet = tri.to_f64_lossy();
        rec.cst_sum = cst.loss.to_f64_lossy();
        rec.cst_valid = cst.valid_count;
        rec.cst = rec.cst_sum / cst.valid_count.max(1) as f64;
        rec.total = w.seg * rec.seg + w.mfd * rec.mfd + w.triplet * rec.triplet + w.cst * rec.cst;

        let lr_t = T::lit(lr);
        model.step(&grad, lr_t);
        let pw = mfd_scale * lr_t;
        for (p, g) in st.projector.w1.as_mut_slice().iter_mut().zip(mg.grad_w1.as_slice()) {
            *p -= pw * *g;
        }
        for (p, g) in st.projector.w2.as_mut_slice().iter_mut().zip(mg.grad_w2.as_slice()) {
            *p -= pw * *g;
        }
        records.push(rec);
    }
    if !model.is_finite() {
        return Err(Error::DegenerateData(format!("model weights diverged in stage {stage}")));
    }
    Ok((model, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub target_accuracy: f64,
    pub target_miou: f64,
    pub source_accuracy: f64,
    /// Mean total loss over the last (up to) 50 steps.
    pub final_loss: f64,
    /// Accuracy of the consumed pseudo-labels against held-out labels.
    pub pseudo_label_accuracy: Option<f64>,
    /// Fraction of target pixels passing their class threshold.
    pub valid_fraction: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PipelineReport<T> {
    pub stages: Vec<StageMetrics>,
    pub steps: Vec<StepRecord>,
    pub artifacts: Vec<StageArtifact<T>>,
    pub texture: Option<TextureAlignReport>,
    pub model: ToySegmenter<T>,
}

impl<T> PipelineReport<T> {
    pub fn final_target_accuracy(&self) -> f64 {
        self.stages.last().map_or(0.0, |s| s.target_accuracy)
    }
}

fn evaluate<T: Scalar>(model: &ToySegmenter<T>, data: &PreparedData<T>) -> Result<(f64, f64, f64)> {
    let mut pred = Vec::new();
    for d in &data.target_descriptors {
        pred.extend(argmax_rows(&model.forward(d)?.logits));
    }
    let truth: Vec<u8> = data.target_labels.iter().flat_map(|l| l.labels.iter().copied()).collect();
    let mut spred = Vec::new();
    for i in 0..data.source_labels.len() {
        spred.extend(argmax_rows(&model.forward(data.fixed_source(i))?.logits));
    }
    let struth: Vec<u8> = data.source_labels.iter().flat_map(|l| l.labels.iter().copied()).collect();
    Ok((
        pixel_accuracy(&pred, &truth),
        mean_iou(&pred, &truth, data.class_count),
        pixel_accuracy(&spred, &struth),
    ))
}

fn argmax_rows<T: Scalar>(m: &Matrix<T>) -> Vec<u8> {
    m.iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

fn stage_metrics<T: Scalar>(
    stage: usize,
    model: &ToySegmenter<T>,
    data: &PreparedData<T>,
    records: &[StepRecord],
    state: Option<&FeatureStageState<T>>,
) -> Result<StageMetrics> {
    let (target_accuracy, target_miou, source_accuracy) = evaluate(model, data)?;
    let tail = &records[records.len().saturating_sub(50)..];
    let final_loss = tail.iter().map(|r| r.total).sum::<f64>() / tail.len().max(1) as f64;
    let (pseudo_label_accuracy, valid_fraction) = match state {
        Some(st) => {
            let pred: Vec<u8> = st.pseudo.iter().flat_map(|p| p.labels.iter().copied()).collect();
            let truth: Vec<u8> = data.target_labels.iter().flat_map(|l| l.labels.iter().copied()).collect();
            let valid = st
                .pseudo
                .iter()
                .flat_map(|p| p.labels.iter().zip(&p.confidence))
                .filter(|(&l, &c)| c >= st.thresholds.thresholds[l as usize])
                .count();
            (Some(pixel_accuracy(&pred, &truth)), Some(valid as f64 / pred.len() as f64))
        }
        None => (None, None),
    };
    Ok(StageMetrics {
        stage,
        target_accuracy,
        target_miou,
        source_accuracy,
        final_loss,
        pseudo_label_accuracy,
        valid_fraction,
    })
}

/// Step 0 followed by `K − 1` feature stages; pseudo-labels, thresholds,
/// centers and atoms are rebuilt from the previous model before each.
pub fn run_pipeline<T: Scalar>(domains: &SyntheticDomains<T>, cfg: &PipelineConfig) -> Result<PipelineReport<T>> {
    cfg.validate()?;
    let data = prepare_data(domains, cfg)?;
    let mut init_rng: StageRng = stream(cfg.seed, 0);
    let mut model = ToySegmenter::new(DESCRIPTOR_DIM, cfg.feature_dim, data.class_count, &mut init_rng)?;
    let mut stages = Vec::with_capacity(cfg.stages);
    let mut steps = Vec::with_capacity(cfg.stages * cfg.iterations);
    let mut artifacts = Vec::new();
    for stage in 0..cfg.stages {
        let mut rng = stream(cfg.seed, 100 + stage as u64);
        let (next, records, state) = if stage == 0 {
            let (m, r) = train_stage(model, &data, None, cfg, stage, &mut rng)?;
            (m, r, None)
        } else {
            let mut build_rng = stream(cfg.seed, 200 + stage as u64);
            let mut state = build_stage_state(&model, &data, cfg, &mut build_rng)?;
            let frozen = state.pseudo.clone();
            let (m, r) = train_stage(model.clone(), &data, Some(&mut state), cfg, stage, &mut rng)?;
            assert_eq!(frozen, state.pseudo, "pseudo-labels changed during stage {stage}");
            assert_eq!(frozen, target_pseudo_labels(&model, &data)?, "previous-stage model was not frozen");
            (m, r, Some(state))
        };
        model = next;
        stages.push(stage_metrics(stage, &model, &data, &records, state.as_ref())?);
        if let Some(st) = state {
            artifacts.push(StageArtifact::new(stage, st.projector, st.centers, st.thresholds));
        }
        steps.extend(records);
    }
    Ok(PipelineReport {
        stages,
        steps,
        artifacts,
        texture: data.texture,
        model,
    })
}

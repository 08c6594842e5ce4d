//! Desk-scale adaptation pipeline on synthetic shifted domains.

mod pipeline;
mod segmenter;
mod synthetic;

pub use pipeline::{
    build_stage_state, prepare_data, run_pipeline, train_stage, FeatureStageState, LossWeights, PipelineConfig,
    PipelineReport, PreparedData, StageMetrics, StepRecord,
};
pub use segmenter::{
    cross_entropy_loss, cross_entropy_loss_grad, mean_iou, pixel_accuracy, pixel_descriptors, SegmenterGrad,
    SegmenterOutput, ToySegmenter, DESCRIPTOR_DIM,
};
pub use synthetic::{generate_synthetic_domains, SyntheticDomainSpec, SyntheticDomains};

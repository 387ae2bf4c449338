//! Training and inference pipeline for the relighting diffusion model:
//! staged trainer (single → multi → upscale), the shuffled group scheduler
//! for distributed denoising, and the toy end-to-end experiment harness.

pub mod experiment;
pub mod optimizer;
pub mod scheduler;
pub mod space;
pub mod trainer;

pub use optimizer::AdamW;
pub use scheduler::{
    conditioning_for_views, distributed_denoise, insert_novel_view, make_plan, relight,
    DenoiseJob, RelightConfig, ShufflePlan, SourceView,
};
pub use space::{image_to_model, model_to_image};
pub use trainer::{
    checkpoint_path, lighting_dropout, load_tuple, sample_training_tuple, sample_tuple_indices,
    staged_train, train_step, Stage, StageOutcome, TrainConfig, TrainRngs, TupleIndices, Variant,
    ViewSample,
};

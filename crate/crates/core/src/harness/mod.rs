//! Pipeline orchestration, synthetic data, metrics and ablation sweeps.

pub mod config;
pub mod eval;
pub mod state;
pub mod sweep;
pub mod synth;

pub use config::{Config, ConfigError, Preset};
pub use eval::{evaluate, median, novelty_binning, pose_novelty, EvalReport, FrameResult, NoveltyBin, NoveltyBinning, DEFAULT_NOVELTY_EDGES};
pub use state::{
    filter_by_quality, CorrespondenceMode, QualityFilter, RelocaliseError, RelocaliseOptions, Relocalisation, RelocaliserState,
    StageTimings, TrainError,
};
pub use sweep::{
    sweep_correspondence_quality, sweep_reservoir_count, sweep_reservoir_values, write_csv, PipelineVariant, QualitySweepRow,
    ReservoirSweepRow,
};
pub use synth::{generate_synthetic_world, quality_predictor, standard_predictor, standard_warp, warped_predictor, Quad, SyntheticWorld, WorldSpec};

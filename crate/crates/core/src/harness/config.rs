//! Relocaliser configuration: the published hyperparameters under their
//! published names, plus the defaults of the substituted components.
//!
//! A config file is TOML. An optional `preset = "indoor" | "outdoor"` key
//! selects the base values; every other key overrides one field. Unknown keys
//! are rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::RansacParams;
use crate::grid::{GridConfig, GridError};
use crate::refine::RefineParams;
use crate::reservoir::ClustererParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Indoor,
    Outdoor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Config {
    pub preset: Preset,
    pub seed: u64,

    pub cell_size: f64,
    pub cells_per_side: u64,
    pub reservoir_count: u32,
    pub reservoir_capacity: usize,

    pub clusterer_sigma: f64,
    pub clusterer_tau: f64,
    pub max_cluster_count: usize,
    pub min_cluster_size: usize,

    pub max_candidate_generation_iterations: usize,
    pub max_pose_candidates: usize,
    pub max_pose_candidates_after_cull: usize,
    pub max_translation_error_for_correct_pose: f64,
    pub min_squared_distance_between_sampled_modes: f64,
    pub pose_update: bool,
    pub ransac_inliers_per_iteration: usize,
    pub use_prediction_covariance_for_pose_optimization: bool,
    pub final_hypothesis_count: usize,

    pub enable_icp: bool,
    pub enable_ranking: bool,
    pub icp_stride: usize,
    pub icp_rejection_distance: f64,
    pub icp_max_iterations: usize,
    pub icp_min_relative_change: f64,
    pub icp_converged_residual: f64,
    pub splat_radius: usize,
    pub depth_truncation: f64,

    /// Every this many training frames feed the scene model.
    pub model_frame_interval: u32,
    pub model_voxel_size: f64,
}

impl Config {
    pub fn indoor() -> Self {
        let r = RansacParams::indoor();
        let c = ClustererParams::indoor();
        let f = RefineParams::default();
        let g = GridConfig::indoor();
        Self {
            preset: Preset::Indoor,
            seed: 0,
            cell_size: g.cell_size,
            cells_per_side: g.cells_per_side,
            reservoir_count: 1 << 18,
            reservoir_capacity: crate::reservoir::DEFAULT_CAPACITY,
            clusterer_sigma: c.sigma,
            clusterer_tau: c.tau,
            max_cluster_count: c.max_cluster_count,
            min_cluster_size: c.min_cluster_size,
            max_candidate_generation_iterations: r.max_candidate_generation_iterations,
            max_pose_candidates: r.max_pose_candidates,
            max_pose_candidates_after_cull: r.max_after_cull,
            max_translation_error_for_correct_pose: r.max_translation_error_for_correct_pose,
            min_squared_distance_between_sampled_modes: r.min_squared_distance_between_sampled_modes,
            pose_update: r.pose_update,
            ransac_inliers_per_iteration: r.inliers_per_iteration,
            use_prediction_covariance_for_pose_optimization: r.use_prediction_covariance,
            final_hypothesis_count: r.final_count,
            enable_icp: true,
            enable_ranking: true,
            icp_stride: f.icp_stride,
            icp_rejection_distance: f.icp_rejection,
            icp_max_iterations: f.icp_max_iterations,
            icp_min_relative_change: f.icp_min_relative_change,
            icp_converged_residual: f.icp_converged_residual,
            splat_radius: f.splat_radius,
            depth_truncation: f.depth_truncation,
            model_frame_interval: 10,
            model_voxel_size: 0.01,
        }
    }

    pub fn outdoor() -> Self {
        let r = RansacParams::outdoor();
        let c = ClustererParams::outdoor();
        let g = GridConfig::outdoor();
        Self {
            preset: Preset::Outdoor,
            cell_size: g.cell_size,
            cells_per_side: g.cells_per_side,
            clusterer_tau: c.tau,
            min_cluster_size: c.min_cluster_size,
            max_pose_candidates: r.max_pose_candidates,
            max_translation_error_for_correct_pose: r.max_translation_error_for_correct_pose,
            min_squared_distance_between_sampled_modes: r.min_squared_distance_between_sampled_modes,
            use_prediction_covariance_for_pose_optimization: r.use_prediction_covariance,
            model_voxel_size: 0.1,
            ..Self::indoor()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Indoor => Self::indoor(),
            Preset::Outdoor => Self::outdoor(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let preset = match user.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| ConfigError::Parse(e.to_string()))?,
            None => Preset::Indoor,
        };
        let mut table = toml::Table::try_from(Self::preset(preset)).expect("config serialises");
        table.extend(user);
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.grid().map_err(|e| invalid(e.to_string()))?;
        if self.reservoir_count == 0 {
            return Err(invalid(GridError::NoReservoirs.to_string()));
        }
        if self.reservoir_capacity == 0 {
            return Err(invalid("reservoirCapacity must be positive".into()));
        }
        let c = self.clusterer();
        if !(c.sigma > 0.0 && c.tau > 0.0 && c.max_cluster_count > 0 && c.min_cluster_size > 0) {
            return Err(invalid("clusterer parameters must be positive".into()));
        }
        self.ransac().validate().map_err(|e| invalid(e.to_string()))?;
        if self.icp_stride == 0 || self.model_frame_interval == 0 || self.model_voxel_size.is_nan() || self.model_voxel_size <= 0.0 {
            return Err(invalid("icpStride, modelFrameInterval and modelVoxelSize must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridConfig, GridError> {
        GridConfig::new(self.cell_size, self.cells_per_side)
    }

    pub fn clusterer(&self) -> ClustererParams {
        ClustererParams {
            sigma: self.clusterer_sigma,
            tau: self.clusterer_tau,
            max_cluster_count: self.max_cluster_count,
            min_cluster_size: self.min_cluster_size,
        }
    }

    pub fn ransac(&self) -> RansacParams {
        RansacParams {
            max_pose_candidates: self.max_pose_candidates,
            max_after_cull: self.max_pose_candidates_after_cull,
            inliers_per_iteration: self.ransac_inliers_per_iteration,
            max_candidate_generation_iterations: self.max_candidate_generation_iterations,
            min_squared_distance_between_sampled_modes: self.min_squared_distance_between_sampled_modes,
            max_translation_error_for_correct_pose: self.max_translation_error_for_correct_pose,
            pose_update: self.pose_update,
            use_prediction_covariance: self.use_prediction_covariance_for_pose_optimization,
            final_count: self.final_hypothesis_count,
        }
    }

    pub fn refine(&self) -> RefineParams {
        RefineParams {
            icp_stride: self.icp_stride,
            icp_rejection: self.icp_rejection_distance,
            icp_max_iterations: self.icp_max_iterations,
            icp_min_relative_change: self.icp_min_relative_change,
            icp_converged_residual: self.icp_converged_residual,
            splat_radius: self.splat_radius,
            depth_truncation: self.depth_truncation,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::indoor()
    }
}

//! Ablation sweeps: reservoir sharing and correspondence quality.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Config;
use super::eval::evaluate;
use super::state::{CorrespondenceMode, QualityFilter, RelocaliseOptions, RelocaliserState, TrainError};
use super::synth::SyntheticWorld;
use crate::predictor::{Predictor, SyntheticPredictorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirSweepRow {
    pub reservoir_count: u32,
    pub occupied_cells: usize,
    pub success_rate: f64,
    pub median_translation: f64,
    pub median_rotation: f64,
}

/// Trains once with ample reservoirs to count occupied cells, then retrains
/// and evaluates for each `N = occupied · ratio` (at least 1).
pub fn sweep_reservoir_count(
    world: &SyntheticWorld,
    config: &Config,
    predictor: &SyntheticPredictorConfig,
    ratios: &[f64],
) -> Result<Vec<ReservoirSweepRow>, TrainError> {
    let mut probe = RelocaliserState::new(config.clone(), Predictor::Synthetic(predictor.clone()))?;
    probe.train_online(&world.train)?;
    let occupied = probe.occupied_cells();
    drop(probe);
    let counts: Vec<u32> = ratios.iter().map(|r| ((occupied as f64 * r).round() as u32).max(1)).collect();
    sweep_reservoir_values(world, config, predictor, &counts, occupied)
}

/// Train-and-evaluate for each explicit reservoir count.
pub fn sweep_reservoir_values(
    world: &SyntheticWorld,
    config: &Config,
    predictor: &SyntheticPredictorConfig,
    counts: &[u32],
    occupied: usize,
) -> Result<Vec<ReservoirSweepRow>, TrainError> {
    let mut rows = Vec::new();
    for &n in counts {
        let cfg = Config {
            reservoir_count: n,
            ..config.clone()
        };
        let mut state = RelocaliserState::new(cfg, Predictor::Synthetic(predictor.clone()))?;
        state.train_online(&world.train)?;
        let report = evaluate(&state, &world.test, &RelocaliseOptions::default());
        rows.push(ReservoirSweepRow {
            reservoir_count: n,
            occupied_cells: occupied,
            success_rate: report.success_rate_5cm5deg,
            median_translation: report.median_translation,
            median_rotation: report.median_rotation,
        });
    }
    Ok(rows)
}

/// One pipeline variant of the correspondence-quality study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineVariant {
    pub mode: CorrespondenceMode,
    pub pose_update: bool,
    pub icp: bool,
    pub ranking: bool,
}

impl PipelineVariant {
    /// Raw predictions; adapted without LM/ICP/ranking; then adding LM, ICP
    /// and ranking in turn.
    pub const STANDARD: [PipelineVariant; 5] = [
        PipelineVariant::new(CorrespondenceMode::Raw, true, true, true),
        PipelineVariant::new(CorrespondenceMode::Adapted, false, false, false),
        PipelineVariant::new(CorrespondenceMode::Adapted, true, false, false),
        PipelineVariant::new(CorrespondenceMode::Adapted, true, true, false),
        PipelineVariant::new(CorrespondenceMode::Adapted, true, true, true),
    ];

    pub const fn new(mode: CorrespondenceMode, pose_update: bool, icp: bool, ranking: bool) -> Self {
        Self {
            mode,
            pose_update,
            icp,
            ranking,
        }
    }

    pub fn name(&self) -> String {
        let mut s = match self.mode {
            CorrespondenceMode::Raw => "raw".to_string(),
            CorrespondenceMode::Adapted => "adapted".to_string(),
        };
        for (on, tag) in [(self.pose_update, "+lm"), (self.icp, "+icp"), (self.ranking, "+rank")] {
            if on {
                s.push_str(tag);
            }
        }
        s
    }

    fn apply(&self, config: &Config) -> Config {
        Config {
            pose_update: self.pose_update,
            enable_icp: self.icp,
            enable_ranking: self.ranking,
            ..config.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySweepRow {
    pub variant: String,
    pub mode: CorrespondenceMode,
    pub pose_update: bool,
    pub icp: bool,
    pub ranking: bool,
    pub good_fraction: f64,
    pub success_rate: f64,
}

pub const GOOD_THRESHOLD: f64 = 0.1;

/// Trains once, then evaluates every variant at every good-correspondence
/// fraction by filtering correspondences at test time.
pub fn sweep_correspondence_quality(
    world: &SyntheticWorld,
    config: &Config,
    predictor: &SyntheticPredictorConfig,
    good_fractions: &[f64],
    variants: &[PipelineVariant],
) -> Result<Vec<QualitySweepRow>, TrainError> {
    let mut state = RelocaliserState::new(config.clone(), Predictor::Synthetic(predictor.clone()))?;
    state.train_online(&world.train)?;
    let mut rows = Vec::new();
    for v in variants {
        state.config = v.apply(config);
        for &f in good_fractions {
            let options = RelocaliseOptions {
                mode: v.mode,
                filter: Some(QualityFilter {
                    good_fraction: f,
                    threshold: GOOD_THRESHOLD,
                }),
            };
            let report = evaluate(&state, &world.test, &options);
            rows.push(QualitySweepRow {
                variant: v.name(),
                mode: v.mode,
                pose_update: v.pose_update,
                icp: v.icp,
                ranking: v.ranking,
                good_fraction: f,
                success_rate: report.success_rate_5cm5deg,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

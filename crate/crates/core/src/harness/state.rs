//! Online training and relocalisation.

use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{Config, ConfigError};
use crate::backend::{
    build_correspondences, generate_hypotheses, preemptive_ransac, raw_correspondences, score_and_cull, BackendError,
    Correspondence,
};
use crate::geometry::{back_project, RigidPose};
use crate::grid::{adapt, adapt_lookup, ReservoirLookupTable};
use crate::io::FrameRecord;
use crate::predictor::{PredictionGrid, Predictor, PredictorError};
use crate::refine::{icp_refine, rank_hypotheses, RefineError, ScenePointModel, VoxelAccumulator};
use crate::reservoir::{Reservoir, ReservoirPoint};

#[derive(Debug, Error)]
pub enum RelocaliseError {
    #[error("relocalisation failed: {0}")]
    RelocalisationFailed(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

impl From<BackendError> for RelocaliseError {
    fn from(e: BackendError) -> Self {
        Self::RelocalisationFailed(e.to_string())
    }
}

impl From<RefineError> for RelocaliseError {
    fn from(e: RefineError) -> Self {
        Self::RelocalisationFailed(e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Wall-clock milliseconds per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub hypothesis_generation: f64,
    pub hypothesis_pruning: f64,
    pub inlier_sampling_and_energy_computation: f64,
    pub optimisation: f64,
    pub hypothesis_ranking: f64,
    pub total: f64,
}

impl StageTimings {
    pub const STAGE_NAMES: [&'static str; 6] = [
        "Hypothesis Generation",
        "Hypothesis Pruning",
        "Inlier Sampling and Energy Computation",
        "Optimisation",
        "Hypothesis Ranking",
        "Total",
    ];

    /// The five stage rows followed by the total.
    pub fn rows(&self) -> [(&'static str, f64); 6] {
        let v = [
            self.hypothesis_generation,
            self.hypothesis_pruning,
            self.inlier_sampling_and_energy_computation,
            self.optimisation,
            self.hypothesis_ranking,
            self.total,
        ];
        std::array::from_fn(|i| (Self::STAGE_NAMES[i], v[i]))
    }

    pub fn stage_sum(&self) -> f64 {
        self.rows()[..5].iter().map(|r| r.1).sum()
    }

    pub fn mean(rows: &[StageTimings]) -> StageTimings {
        let n = rows.len().max(1) as f64;
        let mut m = StageTimings::default();
        for r in rows {
            m.hypothesis_generation += r.hypothesis_generation / n;
            m.hypothesis_pruning += r.hypothesis_pruning / n;
            m.inlier_sampling_and_energy_computation += r.inlier_sampling_and_energy_computation / n;
            m.optimisation += r.optimisation / n;
            m.hypothesis_ranking += r.hypothesis_ranking / n;
            m.total += r.total / n;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrespondenceMode {
    /// Through the grid and reservoirs.
    #[default]
    Adapted,
    /// Each prediction used directly as the pixel's only world point.
    Raw,
}

/// Test-time filtering of correspondences to a target share of "good" world
/// points (within `threshold` of the ground truth). Reads the frame's pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityFilter {
    pub good_fraction: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelocaliseOptions {
    pub mode: CorrespondenceMode,
    pub filter: Option<QualityFilter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relocalisation {
    pub pose: RigidPose,
    pub timings: StageTimings,
    pub correspondences: usize,
    pub hypotheses: usize,
    pub generation_attempts: usize,
    pub icp_converged: Option<bool>,
    pub depth_score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelocaliserState {
    pub config: Config,
    pub lookup: ReservoirLookupTable,
    /// One entry per assigned reservoir; allocated as the table assigns them.
    pub reservoirs: Vec<Reservoir>,
    pub model: ScenePointModel,
    model_builder: VoxelAccumulator,
    pub predictor: Predictor,
    rng: ChaCha8Rng,
    pub frames_trained: u32,
}

impl RelocaliserState {
    pub fn new(config: Config, predictor: Predictor) -> Result<Self, ConfigError> {
        config.validate()?;
        let lookup = ReservoirLookupTable::new(config.reservoir_count, config.seed)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Self {
            lookup,
            reservoirs: Vec::new(),
            model: ScenePointModel::default(),
            model_builder: VoxelAccumulator::new(config.model_voxel_size),
            predictor,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            frames_trained: 0,
            config,
        })
    }

    /// Distinct grid cells seen so far.
    pub fn occupied_cells(&self) -> usize {
        self.lookup.len()
    }

    pub fn assigned_reservoirs(&self) -> usize {
        self.reservoirs.len()
    }

    /// Adds frames to the reservoirs and the scene model, then clusters every
    /// reservoir that changed.
    pub fn train_online(&mut self, frames: &[FrameRecord]) -> Result<(), TrainError> {
        if frames.is_empty() {
            return Ok(());
        }
        let grid = self.config.grid().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let clusterer = self.config.clusterer();
        for frame in frames {
            let pred = self.predictor.predict(frame)?;
            let image = adapt(&pred, &mut self.lookup, &grid);
            while self.reservoirs.len() < self.lookup.next_free() as usize {
                self.reservoirs.push(Reservoir::new(self.config.reservoir_capacity));
            }
            let mut touched = Vec::new();
            for ([x, y], r) in image.iter() {
                let px = PredictionGrid::source_pixel(x, y);
                let Ok(p) = back_project(px, &frame.depth, &frame.intrinsics, &frame.pose) else {
                    continue;
                };
                self.reservoirs[r as usize].add_point(ReservoirPoint::new(p, frame.colour(px[0], px[1])), &mut self.rng);
                touched.push(r);
            }
            touched.sort_unstable();
            touched.dedup();
            for r in touched {
                let res = &mut self.reservoirs[r as usize];
                if res.recluster_due() {
                    res.recluster(&clusterer);
                }
            }
            if self.frames_trained.is_multiple_of(self.config.model_frame_interval) {
                for v in 0..frame.depth.height {
                    for u in 0..frame.depth.width {
                        if let Ok(p) = back_project([u, v], &frame.depth, &frame.intrinsics, &frame.pose) {
                            self.model_builder.add(&p, frame.colour(u, v));
                        }
                    }
                }
            }
            self.frames_trained += 1;
        }
        for res in &mut self.reservoirs {
            if res.is_dirty() {
                res.recluster(&clusterer);
            }
        }
        self.model = self.model_builder.build();
        Ok(())
    }

    fn correspondences(&self, frame: &FrameRecord, mode: CorrespondenceMode) -> Result<Vec<Correspondence>, RelocaliseError> {
        let pred = self.predictor.predict(frame)?;
        Ok(match mode {
            CorrespondenceMode::Adapted => {
                let grid = self.config.grid().map_err(|e| RelocaliseError::RelocalisationFailed(e.to_string()))?;
                let image = adapt_lookup(&pred, &self.lookup, &grid);
                build_correspondences(&image, &frame.depth, Some(&frame.rgb), &frame.intrinsics, &self.reservoirs)
            }
            CorrespondenceMode::Raw => raw_correspondences(&pred, &frame.depth, &frame.intrinsics),
        })
    }

    /// Estimates the pose of `frame`. Its recorded pose is only read when
    /// `options.filter` is set.
    pub fn relocalise(&self, frame: &FrameRecord, options: &RelocaliseOptions) -> Result<Relocalisation, RelocaliseError> {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x005e_ed0f_7e57);
        rng.set_stream(frame.index as u64);
        let mut params = self.config.ransac();
        if options.mode == CorrespondenceMode::Raw {
            params.use_prediction_covariance = false;
        }
        let mut cs = self.correspondences(frame, options.mode)?;
        if let Some(f) = &options.filter {
            cs = filter_by_quality(cs, frame, f, &mut rng);
        }
        let n_corr = cs.len();
        let generated = generate_hypotheses(&cs, &params, &mut rng)?;
        let mut timings = StageTimings {
            hypothesis_generation: ms(start),
            ..Default::default()
        };
        let n_hyp = generated.hypotheses.len();

        let t = Instant::now();
        let culled = score_and_cull(generated.hypotheses, &cs, &params, &mut rng);
        timings.hypothesis_pruning = ms(t);

        let t = Instant::now();
        let outcome = preemptive_ransac(culled, &cs, &params, &mut rng);
        let ransac_ms = ms(t);
        timings.optimisation = outcome.lm_time.as_secs_f64() * 1e3;
        timings.inlier_sampling_and_energy_computation = (ransac_ms - timings.optimisation).max(0.0);

        let t = Instant::now();
        let refine = self.config.refine();
        let best = outcome.hypotheses[0].pose;
        let (pose, icp_converged, depth_score) = if self.config.enable_ranking {
            let candidates: Vec<RigidPose> = outcome.hypotheses.iter().map(|h| h.pose).collect();
            let r = rank_hypotheses(&candidates, &frame.depth, &frame.intrinsics, &self.model, &refine)?;
            (r.pose, Some(r.icp_converged), Some(r.depth_score))
        } else if self.config.enable_icp {
            match icp_refine(&best, &frame.depth, &frame.intrinsics, &self.model, &refine) {
                Ok(r) => (r.pose, Some(r.converged), None),
                Err(RefineError::EmptyOverlap) => (best, Some(false), None),
                Err(e) => return Err(e.into()),
            }
        } else {
            (best, None, None)
        };
        timings.hypothesis_ranking = ms(t);
        timings.total = ms(start);
        Ok(Relocalisation {
            pose,
            timings,
            correspondences: n_corr,
            hypotheses: n_hyp,
            generation_attempts: generated.attempts,
            icp_converged,
            depth_score,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let bytes = bincode::serialize(self).map_err(std::io::Error::other)?;
        std::fs::write(path, bytes)
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        bincode::deserialize(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Keeps every world point of the scarcer class and a random subset of the
/// other so that the good share equals the target; correspondences left
/// without modes are dropped.
pub fn filter_by_quality(
    cs: Vec<Correspondence>,
    frame: &FrameRecord,
    filter: &QualityFilter,
    rng: &mut ChaCha8Rng,
) -> Vec<Correspondence> {
    let mut good = Vec::new();
    let mut poor = Vec::new();
    for (ci, c) in cs.iter().enumerate() {
        let gt: Vector3<f64> = frame.pose.transform_point(&c.camera_point);
        for (mi, m) in c.modes.iter().enumerate() {
            if (m.centroid - gt).norm() <= filter.threshold {
                good.push((ci, mi));
            } else {
                poor.push((ci, mi));
            }
        }
    }
    let f = filter.good_fraction.clamp(0.0, 1.0);
    let (g, p) = (good.len() as f64, poor.len() as f64);
    let (keep_good, keep_poor) = if f >= 1.0 {
        (good.len(), 0)
    } else if f <= 0.0 {
        (0, poor.len())
    } else if g / (g + p).max(1.0) > f {
        (((f * p / (1.0 - f)).round() as usize).min(good.len()), poor.len())
    } else {
        (good.len(), ((g * (1.0 - f) / f).round() as usize).min(poor.len()))
    };
    let mut kept = vec![Vec::new(); cs.len()];
    for (list, n) in [(&good, keep_good), (&poor, keep_poor)] {
        let mut chosen: Vec<usize> = index::sample(rng, list.len(), n).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            let (ci, mi) = list[i];
            kept[ci].push(mi);
        }
    }
    cs.into_iter()
        .zip(kept)
        .filter_map(|(mut c, mut modes)| {
            if modes.is_empty() {
                return None;
            }
            modes.sort_unstable();
            c.modes = modes.into_iter().map(|mi| c.modes[mi].clone()).collect();
            Some(c)
        })
        .collect()
}

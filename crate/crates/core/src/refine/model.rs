//! Coloured point model of the target scene with a nearest-neighbour index.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ScenePointModel {
    positions: Vec<[f32; 3]>,
    colours: Vec<[u8; 3]>,
    #[serde(skip)]
    index: OnceLock<ImmutableKdTree<f32, 3>>,
}

impl Clone for ScenePointModel {
    fn clone(&self) -> Self {
        Self::new(self.positions.clone(), self.colours.clone())
    }
}

impl PartialEq for ScenePointModel {
    fn eq(&self, other: &Self) -> bool {
        self.positions == other.positions && self.colours == other.colours
    }
}

impl ScenePointModel {
    pub fn new(positions: Vec<[f32; 3]>, colours: Vec<[u8; 3]>) -> Self {
        assert_eq!(positions.len(), colours.len(), "one colour per point");
        Self {
            positions,
            colours,
            index: OnceLock::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f32; 3]] {
        &self.positions
    }

    pub fn colours(&self) -> &[[u8; 3]] {
        &self.colours
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        let p = self.positions[i];
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    fn index(&self) -> &ImmutableKdTree<f32, 3> {
        self.index.get_or_init(|| ImmutableKdTree::new_from_slice(&self.positions))
    }

    /// Nearest model point and its distance, `None` for an empty model.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        let nn = self.index().nearest_one::<SquaredEuclidean>(&[q.x as f32, q.y as f32, q.z as f32]);
        let i = nn.item as usize;
        Some((i, (self.position(i) - q).norm()))
    }
}

/// Voxel-grid downsampler: every point falling in a voxel is averaged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VoxelAccumulator {
    voxel_size: f64,
    cells: BTreeMap<[i64; 3], ([f64; 3], [f64; 3], u32)>,
}

impl VoxelAccumulator {
    pub fn new(voxel_size: f64) -> Self {
        assert!(voxel_size > 0.0, "voxel size must be positive");
        Self {
            voxel_size,
            cells: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Adds a point with an RGB colour in `[0, 1]`.
    pub fn add(&mut self, p: &Vector3<f64>, colour: [f64; 3]) {
        let key = [
            (p.x / self.voxel_size).floor() as i64,
            (p.y / self.voxel_size).floor() as i64,
            (p.z / self.voxel_size).floor() as i64,
        ];
        let e = self.cells.entry(key).or_insert(([0.0; 3], [0.0; 3], 0));
        for i in 0..3 {
            e.0[i] += p[i];
            e.1[i] += colour[i];
        }
        e.2 += 1;
    }

    /// Voxel means in key order.
    pub fn build(&self) -> ScenePointModel {
        let mut positions = Vec::with_capacity(self.cells.len());
        let mut colours = Vec::with_capacity(self.cells.len());
        for (p, c, n) in self.cells.values() {
            let n = *n as f64;
            positions.push(p.map(|v| (v / n) as f32));
            colours.push(c.map(|v| (v / n * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        ScenePointModel::new(positions, colours)
    }
}

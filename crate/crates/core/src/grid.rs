//! Bounded cubic grid over the pre-training scene and the sparse lookup table
//! that maps occupied grid cells onto a fixed pool of reservoirs.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::PredictionGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("cell size must be positive and finite, got {0}")]
    CellSize(f64),
    #[error("cells per side must be in [1, {max}], got {got}")]
    CellsPerSide { got: u64, max: u64 },
    #[error("reservoir count must be at least 1")]
    NoReservoirs,
}

/// Largest `C` with `C³` representable in a `u64`.
pub const MAX_CELLS_PER_SIDE: u64 = 2_642_245;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Side length `ℓ` of one cell, metres.
    pub cell_size: f64,
    /// Number of cells `C` along each side; the grid spans `C·ℓ`.
    pub cells_per_side: u64,
}

impl GridConfig {
    pub fn new(cell_size: f64, cells_per_side: u64) -> Result<Self, GridError> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(GridError::CellSize(cell_size));
        }
        if cells_per_side == 0 || cells_per_side > MAX_CELLS_PER_SIDE {
            return Err(GridError::CellsPerSide {
                got: cells_per_side,
                max: MAX_CELLS_PER_SIDE,
            });
        }
        Ok(Self {
            cell_size,
            cells_per_side,
        })
    }

    /// 10 cm cells over a 1 km grid.
    pub fn indoor() -> Self {
        Self {
            cell_size: 0.1,
            cells_per_side: 10_000,
        }
    }

    /// 1 m cells over a 1 km grid.
    pub fn outdoor() -> Self {
        Self {
            cell_size: 1.0,
            cells_per_side: 1_000,
        }
    }

    pub fn cell_count(&self) -> u64 {
        self.cells_per_side.pow(3)
    }
}

/// Per-axis index `clamp(round(p/ℓ + C/2), 0, C-1)`, rounding half away from zero.
pub fn cell_index_1d(p: f64, cfg: &GridConfig) -> u64 {
    let c = cfg.cells_per_side as f64;
    let v = (p / cfg.cell_size + c / 2.0).round();
    v.clamp(0.0, c - 1.0) as u64
}

/// Raster index `C²·g(z) + C·g(y) + g(x)`.
pub fn cell_index(p: &Vector3<f64>, cfg: &GridConfig) -> u64 {
    let c = cfg.cells_per_side;
    combine_cell_index(
        [
            cell_index_1d(p.x, cfg),
            cell_index_1d(p.y, cfg),
            cell_index_1d(p.z, cfg),
        ],
        c,
    )
}

pub fn combine_cell_index(g: [u64; 3], cells_per_side: u64) -> u64 {
    let c = cells_per_side;
    c * c * g[2] + c * g[1] + g[0]
}

pub fn decode_cell_index(index: u64, cells_per_side: u64) -> [u64; 3] {
    let c = cells_per_side;
    [index % c, (index / c) % c, index / (c * c)]
}

/// Lookup table `T` from grid cells to reservoirs.
///
/// The first `N` distinct cells receive distinct reservoirs in order of first
/// appearance. Once all reservoirs are taken, each new cell is mapped
/// permanently to a uniformly chosen existing reservoir.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReservoirLookupTable {
    entries: BTreeMap<u64, u32>,
    next_free: u32,
    reservoir_count: u32,
    rng: ChaCha8Rng,
}

impl ReservoirLookupTable {
    pub fn new(reservoir_count: u32, seed: u64) -> Result<Self, GridError> {
        if reservoir_count == 0 {
            return Err(GridError::NoReservoirs);
        }
        Ok(Self {
            entries: BTreeMap::new(),
            next_free: 0,
            reservoir_count,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn reservoir_count(&self) -> u32 {
        self.reservoir_count
    }

    /// Number of reservoirs that have been handed out so far.
    pub fn next_free(&self) -> u32 {
        self.next_free
    }

    /// Number of distinct grid cells seen.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, cell: u64) -> Option<u32> {
        self.entries.get(&cell).copied()
    }

    pub fn lookup_or_assign(&mut self, cell: u64) -> u32 {
        if let Some(&r) = self.entries.get(&cell) {
            return r;
        }
        let r = if self.next_free < self.reservoir_count {
            self.next_free += 1;
            self.next_free - 1
        } else {
            self.rng.random_range(0..self.next_free)
        };
        self.entries.insert(cell, r);
        r
    }
}

/// Reservoir index per prediction cell; cell `(x, y)` belongs to pixel `(8x, 8y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirIndexImage {
    pub width: usize,
    pub height: usize,
    indices: Vec<Option<u32>>,
}

impl ReservoirIndexImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            indices: vec![None; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<u32> {
        self.indices[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, index: Option<u32>) {
        self.indices[y * self.width + x] = index;
    }

    pub fn iter(&self) -> impl Iterator<Item = ([usize; 2], u32)> + '_ {
        self.indices
            .iter()
            .enumerate()
            .filter_map(move |(i, r)| r.map(|r| ([i % self.width, i / self.width], r)))
    }

    pub fn distinct(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.indices.iter().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Online-training adaptation: assigns reservoirs to newly seen cells.
pub fn adapt(
    pred: &PredictionGrid,
    table: &mut ReservoirLookupTable,
    cfg: &GridConfig,
) -> ReservoirIndexImage {
    let mut out = ReservoirIndexImage::empty(pred.width, pred.height);
    for y in 0..pred.height {
        for x in 0..pred.width {
            if let Some(p) = pred.get(x, y) {
                out.set(x, y, Some(table.lookup_or_assign(cell_index(&p, cfg))));
            }
        }
    }
    out
}

/// Test-time adaptation: never mutates the table, cells never seen during
/// online training stay empty.
pub fn adapt_lookup(
    pred: &PredictionGrid,
    table: &ReservoirLookupTable,
    cfg: &GridConfig,
) -> ReservoirIndexImage {
    let mut out = ReservoirIndexImage::empty(pred.width, pred.height);
    for y in 0..pred.height {
        for x in 0..pred.width {
            if let Some(p) = pred.get(x, y) {
                out.set(x, y, table.lookup(cell_index(&p, cfg)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(l: f64, c: u64) -> GridConfig {
        GridConfig::new(l, c).unwrap()
    }

    /// Reference: scan cell boundaries instead of dividing.
    fn brute_force_1d(p: f64, l: f64, c: u64) -> u64 {
        let shifted = p / l + c as f64 / 2.0;
        let mut best = 0u64;
        for g in 0..c {
            // g is chosen when shifted >= g - 0.5 (half rounds up for positives)
            if shifted >= g as f64 - 0.5 {
                best = g;
            }
        }
        best
    }

    #[test]
    fn origin_maps_to_centre() {
        assert_eq!(cell_index_1d(0.0, &cfg(1.0, 4)), 2);
        assert_eq!(cell_index_1d(1e6, &cfg(1.0, 4)), 3);
        assert_eq!(cell_index_1d(-1e6, &cfg(1.0, 4)), 0);
    }

    #[test]
    fn agrees_with_brute_force_sweep() {
        let c = cfg(0.1, 16);
        for i in -61..=61 {
            let p = i as f64 * 0.05;
            assert_eq!(cell_index_1d(p, &c), brute_force_1d(p, 0.1, 16), "p = {p}");
        }
    }

    #[test]
    fn worked_example() {
        assert_eq!(combine_cell_index([2, 1, 3], 4), 54);
        assert_eq!(cell_index(&Vector3::zeros(), &cfg(1.0, 4)), 42);
        // a point that falls in cell (2,1,3)
        let p = Vector3::new(0.1, -1.0, 1.2);
        assert_eq!(cell_index(&p, &cfg(1.0, 4)), 54);
    }

    #[test]
    fn decode_is_inverse() {
        for g in 0..8u64.pow(3) {
            let d = decode_cell_index(g, 8);
            assert!(d.iter().all(|&v| v < 8));
            assert_eq!(combine_cell_index(d, 8), g);
        }
    }

    #[test]
    fn config_validation() {
        assert!(GridConfig::new(0.0, 4).is_err());
        assert!(GridConfig::new(0.1, 0).is_err());
        assert!(GridConfig::new(0.1, MAX_CELLS_PER_SIDE + 1).is_err());
        assert!(GridConfig::new(0.1, MAX_CELLS_PER_SIDE).is_ok());
        assert_eq!(GridConfig::indoor().cell_size * GridConfig::indoor().cells_per_side as f64, 1000.0);
    }

    #[test]
    fn sequential_assignment_and_stability() {
        let mut t = ReservoirLookupTable::new(10, 0).unwrap();
        assert_eq!(t.lookup_or_assign(54), 0);
        assert_eq!(t.lookup_or_assign(7), 1);
        for _ in 0..5 {
            assert_eq!(t.lookup_or_assign(54), 0);
            assert_eq!(t.lookup_or_assign(7), 1);
        }
        assert_eq!(t.next_free(), 2);
        assert_eq!(t.lookup(99), None);
    }

    #[test]
    fn sharing_replays_with_seed() {
        let run = |seed| {
            let mut t = ReservoirLookupTable::new(2, seed).unwrap();
            let v: Vec<u32> = (0..3).map(|g| t.lookup_or_assign(g * 11)).collect();
            v
        };
        let a = run(42);
        assert_eq!(&a[..2], &[0, 1]);
        assert!(a[2] < 2);
        // independent replay of the sharing draw
        let mut reference = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(a[2], reference.random_range(0..2u32));
        assert_eq!(a, run(42));
    }

    #[test]
    fn adapt_single_cell_and_two_blobs() {
        let cfg = GridConfig::indoor();
        let mut pred = PredictionGrid::invalid(4, 3);
        for y in 0..3 {
            for x in 0..4 {
                pred.set(x, y, Some([0.01, 0.02, 0.0]));
            }
        }
        let mut t = ReservoirLookupTable::new(100, 0).unwrap();
        let img = adapt(&pred, &mut t, &cfg);
        assert_eq!(img.distinct(), vec![0]);

        let mut pred = PredictionGrid::invalid(4, 3);
        for y in 0..3 {
            for x in 0..4 {
                let base = if x < 2 { 0.0f32 } else { 3.0 };
                pred.set(x, y, Some([base + 0.001 * x as f32, base, base]));
            }
        }
        pred.set(0, 0, None);
        let mut t = ReservoirLookupTable::new(100, 0).unwrap();
        let img = adapt(&pred, &mut t, &cfg);
        assert_eq!(img.distinct().len(), 2);
        assert_eq!(img.get(0, 0), None);
        assert_eq!(img.iter().count(), 11);
    }

    #[test]
    fn vga_frame_gives_80_by_60_index_image() {
        let pred = PredictionGrid::for_image(640, 480);
        let mut t = ReservoirLookupTable::new(1, 0).unwrap();
        let img = adapt(&pred, &mut t, &GridConfig::indoor());
        assert_eq!((img.width, img.height), (80, 60));
    }

    #[test]
    fn lookup_only_never_assigns() {
        let cfg = GridConfig::indoor();
        let mut pred = PredictionGrid::invalid(2, 1);
        pred.set(0, 0, Some([0.0, 0.0, 0.0]));
        pred.set(1, 0, Some([5.0, 0.0, 0.0]));
        let mut t = ReservoirLookupTable::new(4, 0).unwrap();
        t.lookup_or_assign(cell_index(&Vector3::zeros(), &cfg));
        let img = adapt_lookup(&pred, &t, &cfg);
        assert_eq!(img.get(0, 0), Some(0));
        assert_eq!(img.get(1, 0), None);
        assert_eq!(t.len(), 1);
    }

    proptest! {
        #[test]
        fn points_in_same_cube_share_index(
            gx in 0u64..16, gy in 0u64..16, gz in 0u64..16,
            fx in -0.49f64..0.49, fy in -0.49f64..0.49, fz in -0.49f64..0.49,
            ox in -0.49f64..0.49, oy in -0.49f64..0.49, oz in -0.49f64..0.49,
        ) {
            let c = cfg(0.1, 16);
            // centre of cell g is at (g - C/2)·ℓ
            let centre = |g: u64| (g as f64 - 8.0) * 0.1;
            let a = Vector3::new(centre(gx) + fx * 0.1, centre(gy) + fy * 0.1, centre(gz) + fz * 0.1);
            let b = Vector3::new(centre(gx) + ox * 0.1, centre(gy) + oy * 0.1, centre(gz) + oz * 0.1);
            prop_assert_eq!(cell_index(&a, &c), cell_index(&b, &c));
            prop_assert_eq!(decode_cell_index(cell_index(&a, &c), 16), [gx, gy, gz]);
        }

        #[test]
        fn table_bounded_and_injective(n in 1u32..20, cells in proptest::collection::vec(0u64..64, 1..80), seed in 0u64..100) {
            let mut t = ReservoirLookupTable::new(n, seed).unwrap();
            let mut seen = BTreeMap::new();
            for &g in &cells {
                let r = t.lookup_or_assign(g);
                prop_assert!(r < n);
                if let Some(&prev) = seen.get(&g) {
                    prop_assert_eq!(prev, r);
                }
                seen.insert(g, r);
            }
            if seen.len() <= n as usize {
                let mut vals: Vec<u32> = seen.values().copied().collect();
                vals.sort_unstable();
                vals.dedup();
                prop_assert_eq!(vals.len(), seen.len());
            }
        }
    }
}

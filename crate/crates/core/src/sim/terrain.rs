//! Level-parameterized heightfields over a square tile.
//!
//! Heights are stored at grid nodes; node `(i, j)` sits at
//! `(i * resolution, j * resolution)` and `sample_height` interpolates
//! bilinearly between nodes, clamping queries to the tile.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_LEVEL: u32 = 1;
pub const MAX_LEVEL: u32 = 64;
pub const TILE_SIZE: f64 = 8.0;
pub const GRID_RESOLUTION: f64 = 0.1;
pub const NOISE_NODES: usize = 80;
pub const STAIR_RUN: f64 = 0.3;
pub const STAIR_RISE_MIN: f64 = 0.05;
pub const STAIR_RISE_MAX: f64 = 0.23;
pub const WAVE_AMPLITUDE_MAX: f64 = 0.2;
pub const WAVE_COUNT: f64 = 5.0;
pub const NOISE_BOUND_MAX: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    Flat,
    Stairs,
    Waves,
    Noise,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 4] = [TerrainKind::Flat, TerrainKind::Stairs, TerrainKind::Waves, TerrainKind::Noise];

    pub fn as_str(self) -> &'static str {
        match self {
            TerrainKind::Flat => "flat",
            TerrainKind::Stairs => "stairs",
            TerrainKind::Waves => "waves",
            TerrainKind::Noise => "noise",
        }
    }
}

impl fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TerrainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TerrainKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown terrain kind `{s}`")))
    }
}

fn difficulty(level: u32) -> f64 {
    f64::from(level - 1) / f64::from(MAX_LEVEL - 1)
}

pub fn stair_rise(level: u32) -> f64 {
    STAIR_RISE_MIN + difficulty(level) * (STAIR_RISE_MAX - STAIR_RISE_MIN)
}

pub fn wave_amplitude(level: u32) -> f64 {
    difficulty(level) * WAVE_AMPLITUDE_MAX
}

pub fn noise_bound(level: u32) -> f64 {
    difficulty(level) * NOISE_BOUND_MAX
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeightField {
    kind: TerrainKind,
    level: u32,
    resolution: f64,
    /// Indexed `[i, j]` with `i` along x.
    heights: Array2<f64>,
}

/// Stair index of a point `x` meters from the tile origin.
fn stair_index(x: f64) -> f64 {
    (x / STAIR_RUN + 1e-9).floor()
}

pub fn build_terrain(kind: TerrainKind, level: u32, seed: u64) -> Result<HeightField> {
    if !(MIN_LEVEL..=MAX_LEVEL).contains(&level) {
        return Err(Error::InvalidArgument(format!(
            "terrain level {level} outside {MIN_LEVEL}..={MAX_LEVEL}"
        )));
    }
    let dense = (TILE_SIZE / GRID_RESOLUTION).round() as usize + 1;
    let (nodes, resolution) = match kind {
        TerrainKind::Noise => (NOISE_NODES, TILE_SIZE / (NOISE_NODES - 1) as f64),
        _ => (dense, GRID_RESOLUTION),
    };
    let heights = match kind {
        TerrainKind::Flat => Array2::zeros((nodes, nodes)),
        TerrainKind::Stairs => {
            let rise = stair_rise(level);
            Array2::from_shape_fn((nodes, nodes), |(i, _)| stair_index(i as f64 * resolution) * rise)
        }
        TerrainKind::Waves => {
            let a = wave_amplitude(level);
            let k = std::f64::consts::TAU * WAVE_COUNT / TILE_SIZE;
            Array2::from_shape_fn((nodes, nodes), |(i, _)| -a * (k * i as f64 * resolution).cos())
        }
        TerrainKind::Noise => {
            let b = noise_bound(level);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if b == 0.0 {
                Array2::zeros((nodes, nodes))
            } else {
                Array2::from_shape_simple_fn((nodes, nodes), || rng.random_range(-b..=b))
            }
        }
    };
    Ok(HeightField {
        kind,
        level,
        resolution,
        heights,
    })
}

impl HeightField {
    pub fn flat() -> Self {
        build_terrain(TerrainKind::Flat, 1, 0).expect("valid level")
    }

    pub fn kind(&self) -> TerrainKind {
        self.kind
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn heights(&self) -> &Array2<f64> {
        &self.heights
    }

    pub fn size(&self) -> f64 {
        (self.heights.nrows() - 1) as f64 * self.resolution
    }

    fn cell(&self, x: f64, y: f64) -> (usize, usize, f64, f64) {
        let n = self.heights.nrows() - 1;
        let gx = (x / self.resolution).clamp(0.0, n as f64);
        let gy = (y / self.resolution).clamp(0.0, n as f64);
        let i = (gx.floor() as usize).min(n - 1);
        let j = (gy.floor() as usize).min(n - 1);
        (i, j, gx - i as f64, gy - j as f64)
    }

    /// Bilinear elevation at `(x, y)`, clamped to the tile.
    pub fn sample_height(&self, x: f64, y: f64) -> f64 {
        let (i, j, u, v) = self.cell(x, y);
        let h = &self.heights;
        let a = h[[i, j]] * (1.0 - u) + h[[i + 1, j]] * u;
        let b = h[[i, j + 1]] * (1.0 - u) + h[[i + 1, j + 1]] * u;
        a * (1.0 - v) + b * v
    }

    /// Elevation and its gradient `(dh/dx, dh/dy)` of the bilinear surface.
    pub fn height_and_gradient(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (i, j, u, v) = self.cell(x, y);
        let h = &self.heights;
        let (h00, h10, h01, h11) = (h[[i, j]], h[[i + 1, j]], h[[i, j + 1]], h[[i + 1, j + 1]]);
        let a = h00 * (1.0 - u) + h10 * u;
        let b = h01 * (1.0 - u) + h11 * u;
        let z = a * (1.0 - v) + b * v;
        let dx = ((h10 - h00) * (1.0 - v) + (h11 - h01) * v) / self.resolution;
        let dy = (b - a) / self.resolution;
        (z, dx, dy)
    }

    /// Long-format CSV: `i,j,x,y,height`, one row per node.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "x", "y", "height"])?;
        for ((i, j), h) in self.heights.indexed_iter() {
            w.write_record([
                i.to_string(),
                j.to_string(),
                (i as f64 * self.resolution).to_string(),
                (j as f64 * self.resolution).to_string(),
                h.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

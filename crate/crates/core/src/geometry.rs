//! Ego poses and the mapping between local BEV cells and the global map grid.
//!
//! Conventions: the ego frame has +x forward and +y left with its origin at the
//! BEV rectangle center. BEV row 0 is the far front edge, column 0 the far left
//! edge. The global grid is axis-aligned; global cell `(gx, gy)` covers
//! `[gx·res, (gx+1)·res) × [gy·res, (gy+1)·res)` and tile `(ix, iy)` covers
//! global cells `[ix·edge, (ix+1)·edge) × [iy·edge, (iy+1)·edge)`.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Planar vehicle pose in the global frame (meters, radians).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    yaw: f64,
}

impl EgoPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_yaw(yaw),
        }
    }

    /// Projects a 4×4 homogeneous transform onto the ground plane.
    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Self {
        Self::new(m[0][3], m[1][3], m[1][0].atan2(m[0][0]))
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn to_global(&self, ex: f64, ey: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * ex - s * ey, self.y + s * ex + c * ey)
    }

    pub fn to_ego(&self, gx: f64, gy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (gx - self.x, gy - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let y = yaw.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

/// Raster geometry shared by the BEV and the global prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub resolution: f64,
    pub bev_rows: usize,
    pub bev_cols: usize,
    pub channels: usize,
    pub tile_edge: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            resolution: 0.3,
            bev_rows: 200,
            bev_cols: 100,
            channels: 32,
            tile_edge: 64,
        }
    }
}

pub const MAX_CHANNELS: usize = 256;

impl GridSpec {
    pub fn new(
        resolution: f64,
        bev_rows: usize,
        bev_cols: usize,
        channels: usize,
        tile_edge: usize,
    ) -> Result<Self> {
        let spec = Self {
            resolution,
            bev_rows,
            bev_cols,
            channels,
            tile_edge,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::config(format!("resolution {} must be > 0", self.resolution)));
        }
        if self.bev_rows == 0 || self.bev_cols == 0 {
            return Err(Error::config("BEV dimensions must be non-zero"));
        }
        if self.channels == 0 || self.channels > MAX_CHANNELS {
            return Err(Error::config(format!(
                "channels {} outside 1..={MAX_CHANNELS}",
                self.channels
            )));
        }
        if self.tile_edge == 0 || self.tile_edge > u16::MAX as usize {
            return Err(Error::config("tile_edge must be in 1..=65535"));
        }
        Ok(())
    }

    pub fn check_patch(&self, patch: usize) -> Result<()> {
        if patch == 0 || !self.bev_rows.is_multiple_of(patch) || !self.bev_cols.is_multiple_of(patch) {
            return Err(Error::config(format!(
                "BEV {}x{} is not divisible into {patch}x{patch} patches",
                self.bev_rows, self.bev_cols
            )));
        }
        Ok(())
    }

    pub fn with_resolution(self, resolution: f64) -> Self {
        Self { resolution, ..self }
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub fn with_bev(self, bev_rows: usize, bev_cols: usize) -> Self {
        Self {
            bev_rows,
            bev_cols,
            ..self
        }
    }

    /// BEV footprint in meters, `(forward extent, lateral extent)`.
    pub fn bev_extent_m(&self) -> (f64, f64) {
        (
            self.bev_rows as f64 * self.resolution,
            self.bev_cols as f64 * self.resolution,
        )
    }

    /// Ego-frame center of BEV cell `(i, j)`.
    pub fn ego_cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (self.bev_rows as f64 / 2.0 - i as f64 - 0.5) * self.resolution,
            (self.bev_cols as f64 / 2.0 - j as f64 - 0.5) * self.resolution,
        )
    }

    pub fn global_cell(&self, x: f64, y: f64) -> (i64, i64) {
        (
            (x / self.resolution).floor() as i64,
            (y / self.resolution).floor() as i64,
        )
    }

    pub fn tile_of_cell(&self, gx: i64, gy: i64) -> TileKey {
        let e = self.tile_edge as i64;
        TileKey::new(gx.div_euclid(e) as i32, gy.div_euclid(e) as i32)
    }
}

/// Signed tile index; ordered lexicographically by `(ix, iy)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileKey {
    pub ix: i32,
    pub iy: i32,
}

impl TileKey {
    pub const fn new(ix: i32, iy: i32) -> Self {
        Self { ix, iy }
    }

    /// Global index of the tile's first cell along each axis.
    pub fn origin_cell(&self, edge: usize) -> (i64, i64) {
        (self.ix as i64 * edge as i64, self.iy as i64 * edge as i64)
    }
}

/// Global position of every BEV cell center, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCoords {
    rows: usize,
    cols: usize,
    xy: Vec<(f64, f64)>,
}

impl GridCoords {
    pub fn from_points(rows: usize, cols: usize, xy: Vec<(f64, f64)>) -> Result<Self> {
        if xy.len() != rows * cols {
            return Err(Error::shape("coordinate count differs from rows × cols"));
        }
        if xy.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::config("non-finite grid coordinate"));
        }
        Ok(Self { rows, cols, xy })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> (f64, f64) {
        self.xy[i * self.cols + j]
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.xy
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.xy.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(ax, ay, bx, by), &(x, y)| (ax.min(x), ay.min(y), bx.max(x), by.max(y)),
        )
    }
}

pub fn local_grid_coords(spec: &GridSpec, pose: &EgoPose) -> GridCoords {
    let mut xy = Vec::with_capacity(spec.bev_rows * spec.bev_cols);
    for i in 0..spec.bev_rows {
        for j in 0..spec.bev_cols {
            let (ex, ey) = spec.ego_cell_center(i, j);
            xy.push(pose.to_global(ex, ey));
        }
    }
    GridCoords {
        rows: spec.bev_rows,
        cols: spec.bev_cols,
        xy,
    }
}

/// Distinct tiles containing at least one BEV cell center.
pub fn overlapping_tiles(spec: &GridSpec, coords: &GridCoords) -> BTreeSet<TileKey> {
    coords
        .points()
        .iter()
        .map(|&(x, y)| {
            let (gx, gy) = spec.global_cell(x, y);
            spec.tile_of_cell(gx, gy)
        })
        .collect()
}

const SNAP: f64 = 1e-6;

fn axis_split(f: f64) -> (i64, f64) {
    let base = f.floor();
    let t = f - base;
    if t < SNAP {
        (base as i64, 0.0)
    } else if t > 1.0 - SNAP {
        (base as i64 + 1, 0.0)
    } else {
        (base as i64, t)
    }
}

/// Bilinear taps at continuous cell index `(fr, fc)`, where integer values sit
/// on cell centers. Taps with zero weight are omitted, so a point on a cell
/// center has exactly one tap.
pub fn bilinear_taps(fr: f64, fc: f64) -> impl Iterator<Item = (i64, i64, f64)> {
    let (r0, tr) = axis_split(fr);
    let (c0, tc) = axis_split(fc);
    [(0, 1.0 - tr), (1, tr)]
        .into_iter()
        .flat_map(move |(dr, wr)| {
            [(0, 1.0 - tc), (1, tc)]
                .into_iter()
                .map(move |(dc, wc)| (r0 + dr, c0 + dc, wr * wc))
        })
        .filter(|&(_, _, w)| w > 0.0)
}

/// An axis-aligned raster placed in the global frame: cell `(r, c)` is centered
/// at `origin + ((r + 0.5)·res, (c + 0.5)·res)`, rows along +x, columns along +y.
#[derive(Clone, Copy, Debug)]
pub struct SourceGrid<'a> {
    pub map: &'a FeatureMap<f32>,
    pub origin: (f64, f64),
    pub resolution: f64,
}

impl SourceGrid<'_> {
    pub fn continuous_index(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin.0) / self.resolution - 0.5,
            (y - self.origin.1) / self.resolution - 0.5,
        )
    }
}

/// Samples `source` at every coordinate. A cell whose bilinear support touches
/// an uncovered or out-of-bounds source cell gets zeros and coverage `false`.
pub fn bilinear_sample(source: &SourceGrid<'_>, coords: &GridCoords) -> FeatureMap<f32> {
    let map = source.map;
    let ch = map.channels();
    let mut out = FeatureMap::zeros(coords.rows, coords.cols, ch);
    let mut acc = vec![0.0f64; ch];
    for (idx, &(x, y)) in coords.points().iter().enumerate() {
        let (fr, fc) = source.continuous_index(x, y);
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut valid = true;
        for (r, c, w) in bilinear_taps(fr, fc) {
            if r < 0 || c < 0 || r >= map.rows() as i64 || c >= map.cols() as i64 {
                valid = false;
                break;
            }
            let (r, c) = (r as usize, c as usize);
            if !map.is_covered(r, c) {
                valid = false;
                break;
            }
            for (a, &v) in acc.iter_mut().zip(map.cell(r, c)) {
                *a += w * v as f64;
            }
        }
        let (i, j) = (idx / coords.cols, idx % coords.cols);
        out.coverage_mut()[idx] = valid;
        if valid {
            for (o, &a) in out.cell_mut(i, j).iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }
    out
}

//! Synthetic cities: an axis-aligned road grid with jittered spacing and
//! widths, rasterized into semantic classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{EgoPose, GridSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum SemanticClass {
    Background = 0,
    Divider = 1,
    Crossing = 2,
    Boundary = 3,
}

impl SemanticClass {
    pub const COUNT: usize = 4;
    pub const ALL: [SemanticClass; 4] = [Self::Background, Self::Divider, Self::Crossing, Self::Boundary];
    /// Classes scored by mIoU.
    pub const ROAD: [SemanticClass; 3] = [Self::Divider, Self::Crossing, Self::Boundary];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Background => "background",
            Self::Divider => "divider",
            Self::Crossing => "crossing",
            Self::Boundary => "boundary",
        }
    }

    /// Paint order when elements overlap: crossing over boundary over divider.
    fn precedence(self) -> u8 {
        match self {
            Self::Background => 0,
            Self::Divider => 1,
            Self::Boundary => 2,
            Self::Crossing => 3,
        }
    }
}

/// Hard per-cell labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    rows: usize,
    cols: usize,
    labels: Vec<SemanticClass>,
}

impl SemanticMap {
    pub fn filled(rows: usize, cols: usize, class: SemanticClass) -> Self {
        Self {
            rows,
            cols,
            labels: vec![class; rows * cols],
        }
    }

    pub fn from_labels(rows: usize, cols: usize, labels: Vec<SemanticClass>) -> Result<Self> {
        if labels.len() != rows * cols {
            return Err(Error::shape(format!("{} labels for a {rows}×{cols} map", labels.len())));
        }
        Ok(Self { rows, cols, labels })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> SemanticClass {
        self.labels[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, class: SemanticClass) {
        self.labels[r * self.cols + c] = class;
    }

    pub fn labels(&self) -> &[SemanticClass] {
        &self.labels
    }

    pub fn count(&self, class: SemanticClass) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Runs along global x at a fixed y.
    X,
    /// Runs along global y at a fixed x.
    Y,
}

/// A straight road: centerline at `offset` across the axis, spanning
/// `[from, to]` along it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Road {
    pub axis: Axis,
    pub offset: f64,
    pub from: f64,
    pub to: f64,
    pub width: f64,
}

impl Road {
    /// `(along, across)` coordinates of a global point.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        match self.axis {
            Axis::X => (x, y - self.offset),
            Axis::Y => (y, x - self.offset),
        }
    }
}

pub const LINE_WIDTH_M: f64 = 0.5;
pub const CROSSING_DEPTH_M: f64 = 3.0;
/// Gap between an intersection box and the crossing band in front of it.
pub const CROSSING_GAP_M: f64 = 1.0;
pub const ROAD_SPACING_M: f64 = 130.0;
const SPACING_JITTER: f64 = 0.15;
const WIDTH_RANGE_M: (f64, f64) = (6.0, 10.0);

#[derive(Clone, Debug)]
pub struct CityMap {
    pub seed: u64,
    pub extent_m: f64,
    pub resolution: f64,
    pub roads: Vec<Road>,
    /// Cell `(r, c)` covers `[r·res, (r+1)·res) × [c·res, (c+1)·res)`.
    pub ground_truth: SemanticMap,
    road_surface_cells: usize,
}

struct Crossing {
    along: f64,
    half_width: f64,
}

impl CityMap {
    /// Rasterizes explicit roads. Roads on different axes that overlap form
    /// intersections: lines are cut inside them and crossing bands are painted
    /// on each approach.
    pub fn from_roads(seed: u64, extent_m: f64, resolution: f64, roads: Vec<Road>) -> Result<Self> {
        if !(extent_m.is_finite() && extent_m > 0.0 && resolution > 0.0) {
            return Err(Error::config(format!("degenerate city extent {extent_m} m at {resolution} m/cell")));
        }
        for r in &roads {
            if !(r.width > 0.0 && r.to > r.from) {
                return Err(Error::config(format!("degenerate road {r:?}")));
            }
        }
        let n = (extent_m / resolution).round() as usize;
        let mut gt = SemanticMap::filled(n, n, SemanticClass::Background);
        let mut surface = vec![false; n * n];

        for road in &roads {
            let crossings: Vec<Crossing> = roads
                .iter()
                .filter(|o| o.axis != road.axis)
                .filter(|o| o.from <= road.offset && road.offset <= o.to && road.from <= o.offset && o.offset <= road.to)
                .map(|o| Crossing {
                    along: o.offset,
                    half_width: o.width / 2.0,
                })
                .collect();
            let half = road.width / 2.0;
            let reach = half + LINE_WIDTH_M / 2.0;
            let (lo_x, hi_x, lo_y, hi_y) = match road.axis {
                Axis::X => (road.from, road.to, road.offset - reach, road.offset + reach),
                Axis::Y => (road.offset - reach, road.offset + reach, road.from, road.to),
            };
            let cell = |v: f64| ((v / resolution).floor().max(0.0) as usize).min(n);
            for r in cell(lo_x)..(cell(hi_x) + 1).min(n) {
                for c in cell(lo_y)..(cell(hi_y) + 1).min(n) {
                    let (x, y) = ((r as f64 + 0.5) * resolution, (c as f64 + 0.5) * resolution);
                    let (along, across) = road.local(x, y);
                    if along < road.from || along > road.to {
                        continue;
                    }
                    let d = across.abs();
                    if d <= half {
                        surface[r * n + c] = true;
                    }
                    let inside_junction = crossings.iter().any(|k| (along - k.along).abs() <= k.half_width);
                    let in_band = crossings.iter().any(|k| {
                        let off = (along - k.along).abs() - k.half_width - CROSSING_GAP_M;
                        (0.0..=CROSSING_DEPTH_M).contains(&off)
                    });
                    let class = if in_band && d <= half {
                        SemanticClass::Crossing
                    } else if inside_junction {
                        continue;
                    } else if (d - half).abs() <= LINE_WIDTH_M / 2.0 {
                        SemanticClass::Boundary
                    } else if d <= LINE_WIDTH_M / 2.0 {
                        SemanticClass::Divider
                    } else {
                        continue;
                    };
                    if class.precedence() > gt.get(r, c).precedence() {
                        gt.set(r, c, class);
                    }
                }
            }
        }
        Ok(Self {
            seed,
            extent_m,
            resolution,
            roads,
            ground_truth: gt,
            road_surface_cells: surface.iter().filter(|&&s| s).count(),
        })
    }

    /// Cell indices of global point `(x, y)`, if inside the raster.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let n = self.ground_truth.rows() as f64;
        let (r, c) = ((x / self.resolution).floor(), (y / self.resolution).floor());
        (r >= 0.0 && c >= 0.0 && r < n && c < n).then_some((r as usize, c as usize))
    }

    pub fn label_at(&self, x: f64, y: f64) -> Option<SemanticClass> {
        self.cell_of(x, y).map(|(r, c)| self.ground_truth.get(r, c))
    }

    /// Fraction of the extent covered by road surface.
    pub fn road_surface_fraction(&self) -> f64 {
        self.road_surface_cells as f64 / self.ground_truth.labels().len() as f64
    }

    /// Fraction of cells holding a road-element class.
    pub fn road_class_fraction(&self) -> f64 {
        let n = self.ground_truth.labels().len();
        (n - self.ground_truth.count(SemanticClass::Background)) as f64 / n as f64
    }

    /// Centerline positions of the X- and Y-running roads.
    pub fn road_lines(&self) -> (Vec<f64>, Vec<f64>) {
        let pick = |axis: Axis| -> Vec<f64> {
            let mut v: Vec<f64> = self.roads.iter().filter(|r| r.axis == axis).map(|r| r.offset).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        (pick(Axis::Y), pick(Axis::X))
    }

    /// Checks that the whole BEV footprint at `pose` lies inside the city.
    pub fn check_footprint(&self, spec: &GridSpec, pose: &EgoPose) -> Result<()> {
        let (h, w) = spec.bev_extent_m();
        for (ex, ey) in [(h, w), (h, -w), (-h, w), (-h, -w)] {
            let (x, y) = pose.to_global(ex / 2.0, ey / 2.0);
            if !(0.0..=self.extent_m).contains(&x) || !(0.0..=self.extent_m).contains(&y) {
                return Err(Error::OutOfExtent(format!(
                    "BEV corner ({x:.1}, {y:.1}) of pose ({:.1}, {:.1}) outside [0, {}]²",
                    pose.x, pose.y, self.extent_m
                )));
            }
        }
        Ok(())
    }

    /// Nearest-cell ground-truth crop at `pose`.
    pub fn crop(&self, spec: &GridSpec, pose: &EgoPose) -> Result<SemanticMap> {
        self.check_footprint(spec, pose)?;
        let mut out = SemanticMap::filled(spec.bev_rows, spec.bev_cols, SemanticClass::Background);
        for i in 0..spec.bev_rows {
            for j in 0..spec.bev_cols {
                let (ex, ey) = spec.ego_cell_center(i, j);
                let (x, y) = pose.to_global(ex, ey);
                if let Some(l) = self.label_at(x, y) {
                    out.set(i, j, l);
                }
            }
        }
        Ok(out)
    }
}

/// Grid-plus-jitter city: roads every ~130 m in both directions, each spanning
/// the full extent, with widths in 6–10 m.
pub fn generate_city(seed: u64, extent_m: f64, resolution: f64) -> Result<CityMap> {
    if !(extent_m.is_finite() && extent_m >= ROAD_SPACING_M) {
        return Err(Error::config(format!("city extent {extent_m} m is below one road spacing")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines = (extent_m / ROAD_SPACING_M).floor() as usize;
    let spacing = extent_m / lines as f64;
    let mut roads = Vec::new();
    for axis in [Axis::Y, Axis::X] {
        for k in 0..lines {
            let jitter = rng.random_range(-SPACING_JITTER..SPACING_JITTER) * spacing;
            roads.push(Road {
                axis,
                offset: (k as f64 + 0.5) * spacing + jitter,
                from: 0.0,
                to: extent_m,
                width: rng.random_range(WIDTH_RANGE_M.0..WIDTH_RANGE_M.1),
            });
        }
    }
    CityMap::from_roads(seed, extent_m, resolution, roads)
}

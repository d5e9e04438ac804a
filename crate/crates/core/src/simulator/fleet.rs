//! The closed prior loop over a fleet of trips.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionWeights, Strategy};
use crate::tensor::FeatureMap;
use crate::tile_store::{MemoryStats, PriorStore};

use super::city::{CityMap, SemanticMap};
use super::derive_seed;
use super::metrics::{IouCounts, IouReport};
use super::sensor::{observe, Embedding};
use super::trips::TripPlan;

/// Whether the prior survives from one trip to the next.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TripMode {
    /// The store is cleared before every trip.
    Intra,
    #[default]
    Inter,
}

impl fmt::Display for TripMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TripMode::Intra => "intra",
            TripMode::Inter => "inter",
        })
    }
}

impl FromStr for TripMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(TripMode::Intra),
            "inter" => Ok(TripMode::Inter),
            other => Err(Error::config(format!("unknown trip mode {other:?} (intra, inter)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FleetOptions {
    pub strategy: Strategy,
    pub alpha: f32,
    pub mode: TripMode,
}

impl FleetOptions {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            alpha: 0.5,
            mode: TripMode::Inter,
        }
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_mode(mut self, mode: TripMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Mean update gate `z_t` over cells the prior covered and cells it did not.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GateStats {
    pub covered_cells: u64,
    pub uncovered_cells: u64,
    pub covered_mean: Option<f64>,
    pub uncovered_mean: Option<f64>,
    #[serde(skip)]
    sums: [f64; 2],
}

impl GateStats {
    pub fn accumulate(&mut self, gate: &FeatureMap<f32>, prior_coverage: &[bool]) {
        let c = gate.channels();
        for (cell, z) in gate.data().chunks_exact(c).enumerate() {
            let mean = z.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            if prior_coverage[cell] {
                self.covered_cells += 1;
                self.sums[0] += mean;
            } else {
                self.uncovered_cells += 1;
                self.sums[1] += mean;
            }
        }
        self.covered_mean = (self.covered_cells > 0).then(|| self.sums[0] / self.covered_cells as f64);
        self.uncovered_mean = (self.uncovered_cells > 0).then(|| self.sums[1] / self.uncovered_cells as f64);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TripReport {
    pub vehicle: u32,
    pub condition: &'static str,
    pub seed: u64,
    pub frames: usize,
    /// IoU over every frame of the trip, counts pooled.
    pub iou: IouReport,
    pub counts: IouCounts,
    pub gate: Option<GateStats>,
}

/// The last processed frame, kept for rendering.
#[derive(Clone, Debug)]
pub struct FrameSnapshot {
    pub prediction: SemanticMap,
    pub ground_truth: SemanticMap,
    pub gate: Option<FeatureMap<f32>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub options: FleetOptions,
    pub trips: Vec<TripReport>,
    /// Mean of the per-trip mIoU values that are defined.
    pub mean_miou: Option<f64>,
    pub completed: bool,
    pub error: Option<String>,
    pub memory: Option<MemoryStats>,
    #[serde(skip)]
    pub last_frame: Option<FrameSnapshot>,
}

impl RunReport {
    /// mIoU of trip `k`, if defined.
    pub fn trip_miou(&self, k: usize) -> Option<f64> {
        self.trips.get(k).and_then(|t| t.iou.mean)
    }
}

/// Runs every trip in order. Per frame: observe, query the prior, fuse,
/// decode the refined features as the prediction, and write the new prior
/// back. Strategy `none` never touches the store. A failing frame stops the
/// run and the partial report carries the error.
pub fn run_fleet(
    city: &CityMap,
    embedding: &Embedding,
    trips: &[TripPlan],
    weights: &FusionWeights,
    store: &dyn PriorStore,
    options: &FleetOptions,
) -> Result<RunReport> {
    let spec = *store.bev();
    spec.validate()?;
    if embedding.channels() != spec.channels {
        return Err(Error::shape(format!(
            "embedding has {} channels, grid {}",
            embedding.channels(),
            spec.channels
        )));
    }
    weights.validate(&spec)?;
    if !(0.0..=1.0).contains(&options.alpha) {
        return Err(Error::config(format!("alpha {} outside [0, 1]", options.alpha)));
    }
    for t in trips {
        t.validate(&spec)?;
    }

    let mut report = RunReport {
        options: *options,
        trips: Vec::with_capacity(trips.len()),
        mean_miou: None,
        completed: true,
        error: None,
        memory: None,
        last_frame: None,
    };
    for trip in trips {
        let mut counts = IouCounts::default();
        let mut gate_stats: Option<GateStats> = None;
        let mut frames = 0;
        let outcome = (|| -> Result<()> {
            if options.mode == TripMode::Intra && options.strategy != Strategy::None {
                store.reset()?;
            }
            for (f, pose) in trip.poses.iter().enumerate() {
                let obs = observe(city, &spec, embedding, pose, &trip.condition, derive_seed(trip.seed, f as u64))?;
                let gt = city.crop(&spec, pose)?;
                let (refined, gate) = if options.strategy == Strategy::None {
                    (obs, None)
                } else {
                    let prior = store.query_region(pose)?;
                    let out = fuse(options.strategy, &obs, &prior, weights, options.alpha)?;
                    if let Some(z) = &out.gate {
                        gate_stats.get_or_insert_with(GateStats::default).accumulate(z, prior.coverage());
                    }
                    store.write_back(pose, &out.new_prior)?;
                    (out.refined, out.gate)
                };
                let prediction = embedding.decode(&refined)?;
                counts.accumulate(&prediction, &gt)?;
                frames += 1;
                if f + 1 == trip.poses.len() {
                    report.last_frame = Some(FrameSnapshot {
                        prediction,
                        ground_truth: gt,
                        gate,
                    });
                }
            }
            Ok(())
        })();
        let iou = counts.report();
        debug!(
            "vehicle {} ({}): {frames} frames, mIoU {:?}",
            trip.vehicle, trip.condition, iou.mean
        );
        report.trips.push(TripReport {
            vehicle: trip.vehicle,
            condition: trip.condition.name,
            seed: trip.seed,
            frames,
            iou,
            counts,
            gate: gate_stats,
        });
        if let Err(e) = outcome {
            warn!("run aborted in vehicle {} after {frames} frames: {e}", trip.vehicle);
            report.completed = false;
            report.error = Some(e.to_string());
            break;
        }
    }
    let defined: Vec<f64> = report.trips.iter().filter_map(|t| t.iou.mean).collect();
    report.mean_miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    if options.strategy != Strategy::None {
        report.memory = store.memory_stats().ok();
    }
    Ok(report)
}

//! Synthetic encoder and decoder: classes map to orthogonal feature
//! directions, observations add range-dependent noise and angular occlusions,
//! and decoding projects back and takes the argmax.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{EgoPose, GridSpec};
use crate::tensor::FeatureMap;

use super::city::{CityMap, SemanticClass, SemanticMap};

/// Seed of the embedding shared by every simulator run.
pub const EMBEDDING_SEED: u64 = 0x004E_4D50;
/// Added to the background score before the argmax so zero features decode
/// to background.
pub const BACKGROUND_BIAS: f32 = 1e-3;

/// `E ∈ R^{C×4}` with orthogonal columns of norm `√(C/4)`, so rows have unit
/// mean squared norm; class `k` encodes as column `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    channels: usize,
    /// Row-major `[C][4]`.
    e: Vec<f32>,
}

impl Embedding {
    /// Gram–Schmidt on seeded Gaussian columns, in 64-bit, then scaled.
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        if channels < SemanticClass::COUNT {
            return Err(Error::config(format!(
                "the embedding needs at least {} channels, got {channels}",
                SemanticClass::COUNT
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(SemanticClass::COUNT);
        while cols.len() < SemanticClass::COUNT {
            let mut v: Vec<f64> = (0..channels).map(|_| rng.sample(StandardNormal)).collect();
            for u in &cols {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                cols.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        let scale = (channels as f64 / SemanticClass::COUNT as f64).sqrt();
        let mut e = vec![0.0f32; channels * SemanticClass::COUNT];
        for (k, col) in cols.iter().enumerate() {
            for (ch, &v) in col.iter().enumerate() {
                e[ch * SemanticClass::COUNT + k] = (v * scale) as f32;
            }
        }
        Ok(Self { channels, e })
    }

    pub fn standard(channels: usize) -> Result<Self> {
        Self::new(channels, EMBEDDING_SEED)
    }

    pub fn from_matrix(channels: usize, e: Vec<f32>) -> Result<Self> {
        if e.len() != channels * SemanticClass::COUNT {
            return Err(Error::shape(format!("embedding of {} values for {channels} channels", e.len())));
        }
        Ok(Self { channels, e })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn matrix(&self) -> &[f32] {
        &self.e
    }

    pub fn column(&self, class: SemanticClass) -> Vec<f32> {
        (0..self.channels)
            .map(|ch| self.e[ch * SemanticClass::COUNT + class.index()])
            .collect()
    }

    /// Smallest Euclidean distance between two class encodings.
    pub fn min_class_distance(&self) -> f64 {
        let cols: Vec<Vec<f32>> = SemanticClass::ALL.iter().map(|&c| self.column(c)).collect();
        let mut best = f64::INFINITY;
        for a in 0..cols.len() {
            for b in a + 1..cols.len() {
                let d: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }

    /// Noise norms strictly below this never change a decoded label: a score
    /// margin of `|e_k|² - ε` over a direction difference of norm `d_min`.
    /// Slightly under `d_min / 2`.
    pub fn noise_invariance_radius(&self) -> f64 {
        let sq = SemanticClass::ALL
            .iter()
            .map(|&c| self.column(c).iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        (sq - BACKGROUND_BIAS as f64) / self.min_class_distance()
    }

    pub fn encode(&self, labels: &SemanticMap) -> FeatureMap<f32> {
        let cols: Vec<Vec<f32>> = SemanticClass::ALL.iter().map(|&c| self.column(c)).collect();
        let mut out = FeatureMap::zeros(labels.rows(), labels.cols(), self.channels);
        for r in 0..labels.rows() {
            for c in 0..labels.cols() {
                out.cell_mut(r, c).copy_from_slice(&cols[labels.get(r, c).index()]);
            }
        }
        out
    }

    /// `argmax(Eᵀ f + ε·e_background)`; ties go to the lower class index.
    pub fn decode(&self, features: &FeatureMap<f32>) -> Result<SemanticMap> {
        if features.channels() != self.channels {
            return Err(Error::shape(format!(
                "decoder expects {} channels, got {}",
                self.channels,
                features.channels()
            )));
        }
        let mut labels = Vec::with_capacity(features.cell_count());
        let k = SemanticClass::COUNT;
        for cell in features.data().chunks_exact(self.channels) {
            let mut scores = [0.0f32; SemanticClass::COUNT];
            for (ch, &v) in cell.iter().enumerate() {
                for (s, &e) in scores.iter_mut().zip(&self.e[ch * k..(ch + 1) * k]) {
                    *s += e * v;
                }
            }
            scores[SemanticClass::Background.index()] += BACKGROUND_BIAS;
            let mut best = 0;
            for i in 1..k {
                if scores[i] > scores[best] {
                    best = i;
                }
            }
            labels.push(SemanticClass::from_index(best));
        }
        SemanticMap::from_labels(features.rows(), features.cols(), labels)
    }
}

/// Observation quality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Condition {
    pub name: &'static str,
    pub noise_sigma: f64,
    pub occlusion_rate: f64,
    /// Per-meter growth of the noise deviation with distance from the ego.
    pub range_decay: f64,
}

impl Condition {
    pub const NORMAL: Condition = Condition {
        name: "normal",
        noise_sigma: 0.5,
        occlusion_rate: 0.05,
        range_decay: 0.01,
    };
    pub const RAIN: Condition = Condition {
        name: "rain",
        noise_sigma: 0.7,
        occlusion_rate: 0.1,
        range_decay: 0.015,
    };
    pub const NIGHT: Condition = Condition {
        name: "night",
        noise_sigma: 0.8,
        occlusion_rate: 0.1,
        range_decay: 0.02,
    };
    pub const NIGHT_RAIN: Condition = Condition {
        name: "night_rain",
        noise_sigma: 1.0,
        occlusion_rate: 0.15,
        range_decay: 0.025,
    };
    pub const ALL: [Condition; 4] = [Self::NORMAL, Self::RAIN, Self::NIGHT, Self::NIGHT_RAIN];

    /// Noiseless, unoccluded sensing.
    pub fn clean() -> Self {
        Self {
            name: "clean",
            noise_sigma: 0.0,
            occlusion_rate: 0.0,
            range_decay: 0.0,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_occlusion(mut self, rate: f64) -> Self {
        self.occlusion_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_sigma >= 0.0
            && self.noise_sigma.is_finite()
            && (0.0..=1.0).contains(&self.occlusion_rate)
            && self.range_decay >= 0.0
            && self.range_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid condition {self:?}")))
        }
    }

    /// Noise deviation at `distance` meters from the ego.
    pub fn sigma_at(&self, distance: f64) -> f64 {
        self.noise_sigma * (1.0 + self.range_decay * distance)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .chain([Self::clean()])
            .find(|c| c.name == s)
            .ok_or_else(|| Error::config(format!("unknown condition {s:?} (normal, rain, night, night_rain, clean)")))
    }
}

/// Mean over BEV cells of `sigma_at(d)²`: the expected per-element squared
/// error of an unoccluded observation.
pub fn expected_noise_power(spec: &GridSpec, condition: &Condition) -> f64 {
    let mut acc = 0.0;
    for i in 0..spec.bev_rows {
        for j in 0..spec.bev_cols {
            let (ex, ey) = spec.ego_cell_center(i, j);
            acc += condition.sigma_at(ex.hypot(ey)).powi(2);
        }
    }
    acc / (spec.bev_rows * spec.bev_cols) as f64
}

/// Encodes the ground truth at `pose`, adds Gaussian noise with deviation
/// growing with range, and zeroes one angular sector around the ego holding
/// `occlusion_rate` of the cells. Deterministic in `seed`.
pub fn observe(
    city: &CityMap,
    spec: &GridSpec,
    embedding: &Embedding,
    pose: &EgoPose,
    condition: &Condition,
    seed: u64,
) -> Result<FeatureMap<f32>> {
    condition.validate()?;
    if embedding.channels() != spec.channels {
        return Err(Error::shape("embedding channels differ from the grid"));
    }
    let gt = city.crop(spec, pose)?;
    let mut obs = embedding.encode(&gt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.channels;
    let cells = spec.bev_rows * spec.bev_cols;

    if condition.noise_sigma > 0.0 {
        for idx in 0..cells {
            let (ex, ey) = spec.ego_cell_center(idx / spec.bev_cols, idx % spec.bev_cols);
            let sigma = condition.sigma_at(ex.hypot(ey));
            for v in &mut obs.data_mut()[idx * c..(idx + 1) * c] {
                let n: f64 = rng.sample(StandardNormal);
                *v += (sigma * n) as f32;
            }
        }
    }

    let hidden = (condition.occlusion_rate * cells as f64).round() as usize;
    if hidden > 0 {
        let start = rng.random_range(0.0..TAU);
        let mut order: Vec<(f64, usize)> = (0..cells)
            .map(|idx| {
                let (ex, ey) = spec.ego_cell_center(idx / spec.bev_cols, idx % spec.bev_cols);
                ((ey.atan2(ex) - start).rem_euclid(TAU), idx)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, idx) in &order[..hidden] {
            obs.data_mut()[idx * c..(idx + 1) * c].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(obs)
}

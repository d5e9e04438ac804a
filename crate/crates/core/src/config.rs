//! Run configuration: a plain-text `key = value` file, one key per line, `#`
//! starting a comment. Unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::Strategy;
use crate::geometry::GridSpec;
use crate::simulator::{Condition, TripMode};
use crate::tile_service::DEFAULT_ADDR;

/// Resolution of the ego BEV grid; `grid.resolution_m` sets the store grid.
pub const BEV_RESOLUTION_M: f64 = 0.3;
pub const TILE_EDGE: usize = 64;

/// BEV footprints, rounded to whole attention patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BevPreset {
    /// 60 × 30 m.
    #[default]
    Short,
    /// 99 × 99 m.
    Medium,
    /// 159 × 99 m.
    Long,
}

impl BevPreset {
    pub fn cells(self) -> (usize, usize) {
        match self {
            BevPreset::Short => (200, 100),
            BevPreset::Medium => (330, 330),
            BevPreset::Long => (530, 330),
        }
    }
}

impl fmt::Display for BevPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BevPreset::Short => "short",
            BevPreset::Medium => "medium",
            BevPreset::Long => "long",
        })
    }
}

impl FromStr for BevPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" | "60x30" => Ok(BevPreset::Short),
            "medium" | "100x100" => Ok(BevPreset::Medium),
            "long" | "160x100" => Ok(BevPreset::Long),
            other => Err(Error::config(format!("unknown BEV preset {other:?} (short, medium, long)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    /// Seeds trips, fusion weights and training.
    pub seed: u64,
    #[serde(rename = "city.seed")]
    pub city_seed: u64,
    #[serde(rename = "city.extent_m")]
    pub city_extent_m: f64,
    /// Resolution of the global prior grid.
    #[serde(rename = "grid.resolution_m")]
    pub grid_resolution_m: f64,
    #[serde(rename = "grid.channels")]
    pub grid_channels: usize,
    #[serde(rename = "fusion.strategy")]
    pub fusion_strategy: Strategy,
    #[serde(rename = "fusion.alpha")]
    pub fusion_alpha: f32,
    /// Checkpoint with trained weights; GRU strategies train one when unset.
    #[serde(rename = "fusion.weights")]
    pub fusion_weights: Option<PathBuf>,
    #[serde(rename = "trips.count")]
    pub trips_count: usize,
    #[serde(rename = "trips.condition")]
    pub trips_condition: Condition,
    #[serde(rename = "trips.mode")]
    pub trips_mode: TripMode,
    #[serde(rename = "service.addr")]
    pub service_addr: String,
    #[serde(rename = "store.dir")]
    pub store_dir: Option<PathBuf>,
    #[serde(rename = "eval.bev_preset")]
    pub eval_bev_preset: BevPreset,
    #[serde(rename = "train.steps")]
    pub train_steps: usize,
    #[serde(rename = "train.lr")]
    pub train_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            city_seed: 7,
            city_extent_m: 400.0,
            grid_resolution_m: BEV_RESOLUTION_M,
            grid_channels: 8,
            fusion_strategy: Strategy::Ma,
            fusion_alpha: 0.5,
            fusion_weights: None,
            trips_count: 2,
            trips_condition: Condition::NORMAL,
            trips_mode: TripMode::Inter,
            service_addr: DEFAULT_ADDR.to_string(),
            store_dir: None,
            eval_bev_preset: BevPreset::Short,
            train_steps: 200,
            train_lr: 1.0,
        }
    }
}

pub const KEYS: [&str; 16] = [
    "seed",
    "city.seed",
    "city.extent_m",
    "grid.resolution_m",
    "grid.channels",
    "fusion.strategy",
    "fusion.alpha",
    "fusion.weights",
    "trips.count",
    "trips.condition",
    "trips.mode",
    "service.addr",
    "store.dir",
    "eval.bev_preset",
    "train.steps",
    "train.lr",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key} = {value:?}: {e}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "city.seed" => self.city_seed = parse(key, v)?,
            "city.extent_m" => self.city_extent_m = parse(key, v)?,
            "grid.resolution_m" => self.grid_resolution_m = parse(key, v)?,
            "grid.channels" => self.grid_channels = parse(key, v)?,
            "fusion.strategy" => self.fusion_strategy = v.parse()?,
            "fusion.alpha" => self.fusion_alpha = parse(key, v)?,
            "fusion.weights" => self.fusion_weights = optional_path(v),
            "trips.count" => self.trips_count = parse(key, v)?,
            "trips.condition" => self.trips_condition = v.parse()?,
            "trips.mode" => self.trips_mode = v.parse()?,
            "service.addr" => self.service_addr = v.to_string(),
            "store.dir" => self.store_dir = optional_path(v),
            "eval.bev_preset" => self.eval_bev_preset = v.parse()?,
            "train.steps" => self.train_steps = parse(key, v)?,
            "train.lr" => self.train_lr = parse(key, v)?,
            other => {
                return Err(Error::config(format!(
                    "unknown config key {other:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies every line of `text` over the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k, v).map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_str_checked(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_str_checked(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.bev_spec().validate()?;
        self.trips_condition.validate()?;
        if !(self.grid_resolution_m.is_finite() && self.grid_resolution_m > 0.0) {
            return Err(Error::config("grid.resolution_m must be > 0"));
        }
        if self.grid_channels < 4 {
            return Err(Error::config("grid.channels must be at least 4 (one direction per class)"));
        }
        if !(0.0..=1.0).contains(&self.fusion_alpha) {
            return Err(Error::config("fusion.alpha must be in [0, 1]"));
        }
        if self.trips_count == 0 {
            return Err(Error::config("trips.count must be at least 1"));
        }
        if !(self.train_lr.is_finite() && self.train_lr >= 0.0) {
            return Err(Error::config("train.lr must be finite and >= 0"));
        }
        Ok(())
    }

    /// The ego BEV grid.
    pub fn bev_spec(&self) -> GridSpec {
        let (rows, cols) = self.eval_bev_preset.cells();
        GridSpec {
            resolution: BEV_RESOLUTION_M,
            bev_rows: rows,
            bev_cols: cols,
            channels: self.grid_channels,
            tile_edge: TILE_EDGE,
        }
    }

    /// Serialized as `key = value` lines, reloadable by [`RunConfig::apply_str`].
    pub fn to_kv_string(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for key in KEYS {
            let v = &json[key];
            let text = match v {
                serde_json::Value::Null => String::new(),
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Object(o) => o["name"].as_str().unwrap_or_default().to_string(),
                other => other.to_string(),
            };
            out.push_str(&format!("{key} = {text}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_keys() {
        let text = "\
# scenario
city.seed = 3
city.extent_m = 500   # meters
grid.resolution_m = 0.6
grid.channels = 16
fusion.strategy = gru
fusion.alpha = 0.25
trips.count = 3
trips.condition = rain
service.addr = 10.0.0.1:9000
store.dir = /tmp/tiles
eval.bev_preset = medium
";
        let c = RunConfig::from_str_checked(text).unwrap();
        assert_eq!(c.city_seed, 3);
        assert_eq!(c.city_extent_m, 500.0);
        assert_eq!(c.grid_resolution_m, 0.6);
        assert_eq!(c.fusion_strategy, Strategy::Gru);
        assert_eq!(c.trips_condition, Condition::RAIN);
        assert_eq!(c.store_dir, Some(PathBuf::from("/tmp/tiles")));
        assert_eq!(c.bev_spec().bev_rows, 330);
        assert_eq!(c.bev_spec().resolution, BEV_RESOLUTION_M);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_str_checked("city.sed = 3").is_err());
        assert!(RunConfig::from_str_checked("fusion.alpha = 2").is_err());
        assert!(RunConfig::from_str_checked("grid.channels = x").is_err());
        assert!(RunConfig::from_str_checked("just a line").is_err());
        assert!(RunConfig::from_str_checked("trips.condition = fog").is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = RunConfig::default();
        c.set("trips.condition", "night_rain").unwrap();
        c.set("store.dir", "/x").unwrap();
        let back = RunConfig::from_str_checked(&c.to_kv_string()).unwrap();
        assert_eq!(back, c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_str_checked(&d.to_kv_string()).unwrap(), d);
    }
}

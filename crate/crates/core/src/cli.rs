//! The `nmp` command line. Exit codes: 0 success, 1 usage error, 2 runtime
//! error. Reports are JSON without timestamps so reruns compare bytewise.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::checkpoint::{Checkpoint, Section};
use crate::fusion::{AttentionConfig, FusionWeights, Strategy};
use crate::geometry::GridSpec;
use crate::gradcheck::{gru_gradcheck, save_loss_csv, train_gru, TrainConfig};
use crate::simulator::render::{render_gate, render_semantic};
use crate::simulator::{
    generate_city, plan_trips, run_fleet, CityMap, Embedding, FleetOptions, RunReport, SemanticClass, TripPlan,
};
use crate::tile_service::{resolve_addr, serve, RemoteStore};
use crate::tile_store::{load_tile, PriorStore, TileStore};

pub const EMBEDDING_SECTION: &str = "sim.embedding";
/// Largest acceptable sparse/dense ratio for `bench-memory`.
pub const MEMORY_RATIO_LIMIT: f64 = 0.35;
/// Largest acceptable gradient relative error for `gradcheck`.
pub const GRADCHECK_LIMIT: f64 = 1e-4;
const STORE_CAPACITY: usize = 4096;

#[derive(Debug, Parser)]
#[command(name = "nmp", version, about = "Sparse neural map prior: simulate, train, serve and inspect")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Flags override the config file.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Plain-text `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Flags mirroring scenario config keys.
#[derive(Debug, Clone, Args)]
pub struct ScenarioFlags {
    #[arg(long)]
    pub city_seed: Option<u64>,
    #[arg(long)]
    pub extent: Option<f64>,
    /// Global prior grid resolution in meters.
    #[arg(long)]
    pub resolution: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub trips: Option<usize>,
    #[arg(long)]
    pub condition: Option<String>,
    /// `inter` keeps the prior across trips, `intra` clears it per trip.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub store_dir: Option<PathBuf>,
    #[arg(long)]
    pub bev_preset: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a city and print its summary.
    GenCity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioFlags,
        /// Write the ground-truth raster as a PNG.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Run the fleet loop and write a JSON report.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioFlags,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Route store access through a tile server (NMP_ADDR or --addr).
        #[arg(long)]
        remote: bool,
        #[arg(long)]
        addr: Option<String>,
    },
    /// Run every strategy on the same scenario and compare mIoU.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioFlags,
        /// Comma-separated strategies.
        #[arg(long, default_value = "none,ma,gru,gru_ca")]
        strategies: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the conv-GRU and write an NMPW checkpoint.
    TrainGru {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioFlags,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value = "weights.nmpw")]
        out: PathBuf,
        /// Loss history as `step,mse` CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Compare analytic GRU gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 6)]
        rows: usize,
        #[arg(long, default_value_t = 6)]
        cols: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
    /// Serve a tile store over TCP until interrupted.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioFlags,
        #[arg(long)]
        addr: Option<String>,
    },
    /// Print the header of a tile file after validating it.
    InspectTile {
        #[command(flatten)]
        common: Common,
        path: PathBuf,
    },
    /// Simulate the configured scenario and report sparse vs dense memory.
    BenchMemory {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioFlags,
    },
    /// Render the last frame of a run (prediction, ground truth, gate) and
    /// the city as PNGs.
    Render {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioFlags,
        #[arg(long, default_value = "render")]
        out_dir: PathBuf,
    },
}

fn resolve_config(common: &Common, scenario: Option<&ScenarioFlags>) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(f) = scenario {
        let pairs: [(&str, Option<String>); 12] = [
            ("city.seed", f.city_seed.map(|v| v.to_string())),
            ("city.extent_m", f.extent.map(|v| v.to_string())),
            ("grid.resolution_m", f.resolution.map(|v| v.to_string())),
            ("grid.channels", f.channels.map(|v| v.to_string())),
            ("fusion.strategy", f.strategy.clone()),
            ("fusion.alpha", f.alpha.map(|v| v.to_string())),
            ("fusion.weights", f.weights.as_ref().map(|p| p.display().to_string())),
            ("trips.count", f.trips.map(|v| v.to_string())),
            ("trips.condition", f.condition.clone()),
            ("trips.mode", f.mode.clone()),
            ("store.dir", f.store_dir.as_ref().map(|p| p.display().to_string())),
            ("eval.bev_preset", f.bev_preset.clone()),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(c)
}

fn train_config(c: &RunConfig) -> TrainConfig {
    TrainConfig {
        seed: c.seed,
        steps: c.train_steps,
        learning_rate: c.train_lr,
        channels: c.grid_channels,
        ..TrainConfig::default()
    }
}

/// Fusion weights and embedding for a run: loaded from `fusion.weights` when
/// set; otherwise seeded, with the GRU trained first when the strategy needs it.
pub fn load_or_train(c: &RunConfig, spec: &GridSpec, strategy: Strategy) -> Result<(FusionWeights, Embedding)> {
    if let Some(path) = &c.fusion_weights {
        let ck = Checkpoint::load(path)?;
        let weights = FusionWeights::from_checkpoint(&ck, spec)?;
        let embedding = match ck.get(EMBEDDING_SECTION) {
            Ok(s) => Embedding::from_matrix(spec.channels, s.data.clone())?,
            Err(_) => Embedding::standard(spec.channels)?,
        };
        return Ok((weights, embedding));
    }
    let mut weights = FusionWeights::init(spec, AttentionConfig::default(), c.seed)?;
    if strategy.uses_gru() {
        info!("no fusion.weights given; training the GRU ({} steps)", c.train_steps);
        weights.gru = train_gru(&train_config(c), None)?.weights;
    }
    Ok((weights, Embedding::standard(spec.channels)?))
}

struct Scenario {
    spec: GridSpec,
    city: CityMap,
    trips: Vec<TripPlan>,
}

fn scenario(c: &RunConfig) -> Result<Scenario> {
    let spec = c.bev_spec();
    let city = generate_city(c.city_seed, c.city_extent_m, spec.resolution)?;
    let trips = plan_trips(&city, &spec, c.trips_count, c.trips_condition, c.seed)?;
    Ok(Scenario { spec, city, trips })
}

fn open_store(c: &RunConfig, spec: &GridSpec) -> Result<TileStore> {
    let store = match &c.store_dir {
        Some(dir) => TileStore::open(*spec, dir, STORE_CAPACITY)?,
        None => TileStore::in_memory(*spec)?,
    };
    store.with_store_resolution(c.grid_resolution_m)
}

fn city_summary(city: &CityMap) -> serde_json::Value {
    json!({
        "seed": city.seed,
        "extent_m": city.extent_m,
        "resolution_m": city.resolution,
        "roads": city.roads,
        "road_surface_fraction": city.road_surface_fraction(),
        "class_cells": SemanticClass::ALL
            .iter()
            .map(|&k| (k.name(), city.ground_truth.count(k)))
            .collect::<std::collections::BTreeMap<_, _>>(),
    })
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    text.push('\n');
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_configured(c: &RunConfig, sc: &Scenario, strategy: Strategy, store: &dyn PriorStore) -> Result<RunReport> {
    let (weights, embedding) = load_or_train(c, &sc.spec, strategy)?;
    let opts = FleetOptions::new(strategy)
        .with_alpha(c.fusion_alpha)
        .with_mode(c.trips_mode);
    run_fleet(&sc.city, &embedding, &sc.trips, &weights, store, &opts)
}

fn incomplete(report: &RunReport) -> Result<()> {
    match (&report.completed, &report.error) {
        (true, _) => Ok(()),
        (false, e) => Err(Error::config(format!(
            "run aborted: {}",
            e.as_deref().unwrap_or("unknown error")
        ))),
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCity { common, scenario: f, png } => {
            let c = resolve_config(&common, Some(&f))?;
            let city = generate_city(c.city_seed, c.city_extent_m, c.bev_spec().resolution)?;
            if let Some(p) = png {
                render_semantic(&city.ground_truth, &p)?;
            }
            emit(&city_summary(&city), None)
        }
        Command::Simulate {
            common,
            scenario: f,
            out,
            remote,
            addr,
        } => {
            let mut c = resolve_config(&common, Some(&f))?;
            if let Some(a) = addr {
                c.service_addr = a;
            }
            let sc = scenario(&c)?;
            let report = if remote {
                let store = RemoteStore::connect(sc.spec, c.grid_resolution_m, &resolve_addr(&c.service_addr), 1, true)?;
                let r = run_configured(&c, &sc, c.fusion_strategy, &store)?;
                store.sync()?;
                r
            } else {
                let store = open_store(&c, &sc.spec)?;
                let r = run_configured(&c, &sc, c.fusion_strategy, &store)?;
                store.flush()?;
                r
            };
            emit(
                &json!({ "config": c, "city": city_summary(&sc.city), "report": report }),
                out.as_deref(),
            )?;
            incomplete(&report)
        }
        Command::Evaluate {
            common,
            scenario: f,
            strategies,
            out,
        } => {
            let c = resolve_config(&common, Some(&f))?;
            let sc = scenario(&c)?;
            let mut results = Vec::new();
            let mut failure = None;
            for name in strategies.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let strategy: Strategy = name.parse()?;
                let store = TileStore::in_memory(sc.spec)?.with_store_resolution(c.grid_resolution_m)?;
                let report = run_configured(&c, &sc, strategy, &store)?;
                if failure.is_none() {
                    failure = incomplete(&report).err();
                }
                results.push(json!({
                    "strategy": strategy,
                    "mean_miou": report.mean_miou,
                    "trip_miou": report.trips.iter().map(|t| t.iou.mean).collect::<Vec<_>>(),
                    "trips": report.trips,
                }));
            }
            emit(&json!({ "config": c, "results": results }), out.as_deref())?;
            failure.map_or(Ok(()), Err)
        }
        Command::TrainGru {
            common,
            scenario: f,
            steps,
            lr,
            out,
            loss_csv,
        } => {
            let mut c = resolve_config(&common, Some(&f))?;
            if let Some(s) = steps {
                c.train_steps = s;
            }
            if let Some(l) = lr {
                c.set("train.lr", &l.to_string())?;
            }
            let spec = c.bev_spec();
            let outcome = train_gru(&train_config(&c), None)?;
            let mut weights = FusionWeights::init(&spec, AttentionConfig::default(), c.seed)?;
            weights.gru = outcome.weights.clone();
            let mut ck = weights.to_checkpoint();
            let embedding = Embedding::standard(spec.channels)?;
            ck.push(Section::new(
                EMBEDDING_SECTION,
                &[spec.channels, SemanticClass::COUNT],
                embedding.matrix().to_vec(),
            ));
            ck.save(&out)?;
            if let Some(p) = loss_csv {
                save_loss_csv(&outcome.history, &p)?;
            }
            emit(
                &json!({
                    "weights": out,
                    "steps": outcome.history.len(),
                    "held_out_initial": outcome.held_out_initial,
                    "held_out_final": outcome.held_out_final,
                    "ma_baseline": outcome.ma_baseline,
                    "within_ma_bound": outcome.beats_ma(),
                }),
                None,
            )
        }
        Command::Gradcheck {
            common,
            seeds,
            rows,
            cols,
            channels,
            eps,
        } => {
            let c = resolve_config(&common, None)?;
            let mut worst: f64 = 0.0;
            let mut per_seed = Vec::new();
            for s in c.seed..c.seed + seeds {
                let r = gru_gradcheck(s, rows, cols, channels, eps)?;
                worst = worst.max(r.max_rel_err);
                per_seed.push(json!({ "seed": s, "max_rel_err": r.max_rel_err }));
            }
            emit(&json!({ "max_rel_err": worst, "seeds": per_seed }), None)?;
            if worst <= GRADCHECK_LIMIT {
                Ok(())
            } else {
                Err(Error::config(format!("max relative error {worst:e} > {GRADCHECK_LIMIT:e}")))
            }
        }
        Command::Serve { common, scenario: f, addr } => {
            let mut c = resolve_config(&common, Some(&f))?;
            if let Some(a) = addr {
                c.service_addr = a;
            }
            let store = Arc::new(open_store(&c, &c.bev_spec())?);
            let handle = serve(store, &resolve_addr(&c.service_addr))?;
            eprintln!("serving on {}", handle.local_addr());
            handle.wait();
            Ok(())
        }
        Command::InspectTile { common, path } => {
            resolve_config(&common, None)?;
            let tile = load_tile(&fs::read(&path)?)?;
            emit(
                &json!({
                    "key": { "ix": tile.key.ix, "iy": tile.key.iy },
                    "edge": tile.edge(),
                    "channels": tile.channels(),
                    "version": tile.version,
                    "traversal_count": tile.traversal_count,
                    "last_updated": tile.last_updated,
                    "written_cells": tile.written_cells(),
                    "payload_bytes": tile.payload_bytes(),
                }),
                None,
            )
        }
        Command::BenchMemory { common, scenario: f } => {
            let c = resolve_config(&common, Some(&f))?;
            let sc = scenario(&c)?;
            let store = TileStore::in_memory(sc.spec)?.with_store_resolution(c.grid_resolution_m)?;
            let strategy = match c.fusion_strategy {
                Strategy::None => Strategy::Ma,
                s => s,
            };
            let report = run_configured(&c, &sc, strategy, &store)?;
            incomplete(&report)?;
            let m = store.memory_stats();
            emit(
                &json!({ "city_seed": c.city_seed, "memory": m, "limit": MEMORY_RATIO_LIMIT }),
                None,
            )?;
            if m.ratio <= MEMORY_RATIO_LIMIT {
                Ok(())
            } else {
                Err(Error::config(format!("sparse/dense ratio {:.4} > {MEMORY_RATIO_LIMIT}", m.ratio)))
            }
        }
        Command::Render {
            common,
            scenario: f,
            out_dir,
        } => {
            let c = resolve_config(&common, Some(&f))?;
            let sc = scenario(&c)?;
            fs::create_dir_all(&out_dir)?;
            render_semantic(&sc.city.ground_truth, &out_dir.join("city.png"))?;
            let store = TileStore::in_memory(sc.spec)?.with_store_resolution(c.grid_resolution_m)?;
            let report = run_configured(&c, &sc, c.fusion_strategy, &store)?;
            incomplete(&report)?;
            if let Some(frame) = &report.last_frame {
                render_semantic(&frame.prediction, &out_dir.join("prediction.png"))?;
                render_semantic(&frame.ground_truth, &out_dir.join("ground_truth.png"))?;
                if let Some(g) = &frame.gate {
                    render_gate(g, &out_dir.join("gate.png"))?;
                }
            }
            emit(&json!({ "out_dir": out_dir, "mean_miou": report.mean_miou }), None)
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["nmp", "no-such-command"]), 1);
        assert_eq!(run(["nmp", "gradcheck", "--bogus"]), 1);
        assert_eq!(run(["nmp", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_2() {
        assert_eq!(run(["nmp", "inspect-tile", "/nonexistent/tile.nmpt"]), 2);
        assert_eq!(run(["nmp", "gen-city", "--set", "city.sed=1"]), 2);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "city.seed = 3\ntrips.count = 4\n").unwrap();
        let common = Common {
            config: Some(cfg),
            seed: Some(11),
            overrides: vec!["fusion.alpha=0.25".into()],
        };
        let flags = ScenarioFlags {
            city_seed: Some(9),
            extent: None,
            resolution: None,
            channels: None,
            strategy: Some("none".into()),
            alpha: None,
            weights: None,
            trips: None,
            condition: None,
            mode: None,
            store_dir: None,
            bev_preset: None,
        };
        let c = resolve_config(&common, Some(&flags)).unwrap();
        assert_eq!((c.seed, c.city_seed, c.trips_count), (11, 9, 4));
        assert_eq!(c.fusion_strategy, Strategy::None);
        assert_eq!(c.fusion_alpha, 0.25);
    }
}

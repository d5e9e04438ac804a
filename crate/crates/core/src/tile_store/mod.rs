//! Sparse, versioned global prior: fixed-size feature tiles created on first
//! write, optionally persisted one file per tile with LRU eviction.

mod codec;

pub use codec::{load_tile, parse_tile_file_name, save_tile, tile_file_name, HEADER_LEN, TILE_FORMAT, TILE_MAGIC};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use log::debug;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample, bilinear_taps, local_grid_coords, EgoPose, GridSpec, SourceGrid, TileKey};
use crate::tensor::FeatureMap;

/// Global cells whose accumulated splat weight falls below this are left untouched.
pub const SPLAT_MIN_WEIGHT: f64 = 0.05;

/// One tile of the global prior. Cell `(u, v)` is global cell
/// `origin + (u, v)` with `u` along x; storage index is `u·edge + v`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapTile {
    pub key: TileKey,
    edge: usize,
    channels: usize,
    features: Vec<f32>,
    weights: Vec<f32>,
    pub version: u64,
    pub traversal_count: u32,
    pub last_updated: i64,
}

impl MapTile {
    pub fn empty(key: TileKey, edge: usize, channels: usize) -> Self {
        Self {
            key,
            edge,
            channels,
            features: vec![0.0; edge * edge * channels],
            weights: vec![0.0; edge * edge],
            version: 0,
            traversal_count: 0,
            last_updated: 0,
        }
    }

    pub fn edge(&self) -> usize {
        self.edge
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f32] {
        &mut self.features
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        u * self.edge + v
    }

    pub fn cell(&self, u: usize, v: usize) -> &[f32] {
        let i = self.index(u, v);
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn weight(&self, u: usize, v: usize) -> f32 {
        self.weights[self.index(u, v)]
    }

    pub fn set_cell(&mut self, u: usize, v: usize, weight: f32, features: &[f32]) {
        let i = self.index(u, v);
        self.weights[i] = weight;
        self.features[i * self.channels..(i + 1) * self.channels].copy_from_slice(features);
    }

    /// Number of cells with positive weight.
    pub fn written_cells(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    /// Feature payload size, the unit of the memory accounting.
    pub fn payload_bytes(&self) -> usize {
        self.features.len() * 4
    }

    /// Checks the tile invariants and zeroes features of zero-weight cells.
    pub fn normalize(&mut self) -> Result<()> {
        if self.weights.len() != self.edge * self.edge || self.features.len() != self.weights.len() * self.channels {
            return Err(Error::shape("tile buffers disagree with edge/channels"));
        }
        if self.traversal_count as u64 > self.version {
            return Err(Error::config("traversal count exceeds version"));
        }
        let c = self.channels;
        for (i, w) in self.weights.iter_mut().enumerate() {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::config(format!("tile {:?} cell {i}: invalid weight {w}", self.key)));
            }
            let cell = &mut self.features[i * c..(i + 1) * c];
            if *w == 0.0 {
                *w = 0.0;
                cell.iter_mut().for_each(|v| *v = 0.0);
            } else if cell.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("tile {:?} cell {i}: non-finite feature", self.key)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MemoryStats {
    pub tiles: usize,
    pub resident_bytes: usize,
    pub dense_equivalent_bytes: usize,
    pub ratio: f64,
}

/// Result of a server-side tile merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PutOutcome {
    pub version: u64,
    /// `known_version` was stale, so the per-cell max-weight merge applied.
    pub merged: bool,
}

/// Anything the fleet loop can read priors from and write them back to.
pub trait PriorStore: Send + Sync {
    fn bev(&self) -> &GridSpec;
    fn query_region(&self, pose: &EgoPose) -> Result<FeatureMap<f32>>;
    fn write_back(&self, pose: &EgoPose, new_prior: &FeatureMap<f32>) -> Result<BTreeSet<TileKey>>;
    /// Drops every tile, returning to the empty state.
    fn reset(&self) -> Result<()>;
    fn memory_stats(&self) -> Result<MemoryStats>;
}

pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    })
}

#[derive(Debug)]
struct Slot {
    tile: MapTile,
    dirty: bool,
}

type SlotRef = Arc<RwLock<Slot>>;

struct Entry {
    slot: SlotRef,
    last_access: u64,
}

#[derive(Default)]
struct Table {
    entries: BTreeMap<TileKey, Entry>,
    on_disk: BTreeSet<TileKey>,
    tick: u64,
}

impl Table {
    fn touch(&mut self, key: TileKey) -> Option<SlotRef> {
        self.tick += 1;
        let tick = self.tick;
        self.entries.get_mut(&key).map(|e| {
            e.last_access = tick;
            e.slot.clone()
        })
    }

    fn insert(&mut self, key: TileKey, slot: SlotRef) {
        self.tick += 1;
        self.entries.insert(
            key,
            Entry {
                slot,
                last_access: self.tick,
            },
        );
    }
}

/// The sparse global prior.
///
/// Tiles live in a table of individually locked slots. Readers take shared
/// locks and writers exclusive locks on exactly the tiles they touch, always in
/// key order, so operations on disjoint tiles never wait on each other.
pub struct TileStore {
    bev: GridSpec,
    grid: GridSpec,
    dir: Option<PathBuf>,
    capacity: usize,
    table: Mutex<Table>,
    clock: Clock,
}

impl std::fmt::Debug for TileStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TileStore")
            .field("grid", &self.grid)
            .field("dir", &self.dir)
            .field("capacity", &self.capacity)
            .finish_non_exhaustive()
    }
}

fn lock(m: &Mutex<Table>) -> MutexGuard<'_, Table> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Global cell bounds `(gx0, gy0, gx1, gy1)`, inclusive.
type CellBounds = (i64, i64, i64, i64);

impl TileStore {
    /// Unbounded store without persistence. The global grid shares the BEV resolution.
    pub fn in_memory(bev: GridSpec) -> Result<Self> {
        bev.validate()?;
        Ok(Self {
            grid: bev,
            bev,
            dir: None,
            capacity: usize::MAX,
            table: Mutex::new(Table::default()),
            clock: system_clock(),
        })
    }

    /// Store backed by `dir`, keeping at most `capacity` tiles resident.
    pub fn open(bev: GridSpec, dir: &Path, capacity: usize) -> Result<Self> {
        bev.validate()?;
        if capacity == 0 {
            return Err(Error::config("store capacity must be positive"));
        }
        fs::create_dir_all(dir)?;
        let mut table = Table::default();
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name();
            if let Some(key) = name.to_str().and_then(parse_tile_file_name) {
                table.on_disk.insert(key);
            }
        }
        Ok(Self {
            grid: bev,
            bev,
            dir: Some(dir.to_path_buf()),
            capacity,
            table: Mutex::new(table),
            clock: system_clock(),
        })
    }

    /// Stores the prior at `resolution` m/cell while BEV rasters keep theirs.
    pub fn with_store_resolution(mut self, resolution: f64) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::config(format!("store resolution must be positive, got {resolution}")));
        }
        if !self.keys().is_empty() {
            return Err(Error::config("cannot change resolution of a non-empty store"));
        }
        self.grid.resolution = resolution;
        Ok(self)
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn bev(&self) -> &GridSpec {
        &self.bev
    }

    /// Geometry of the global grid: resolution, tile edge and channels.
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn resident_count(&self) -> usize {
        lock(&self.table).entries.len()
    }

    /// Every instantiated tile, resident or on disk, in key order.
    pub fn keys(&self) -> Vec<TileKey> {
        let t = lock(&self.table);
        let mut keys = t.on_disk.clone();
        for (k, e) in &t.entries {
            if e.slot.read().unwrap().tile.version > 0 {
                keys.insert(*k);
            }
        }
        keys.into_iter().collect()
    }

    fn tile_path(&self, key: TileKey) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(tile_file_name(key)))
    }

    fn persist(&self, tile: &MapTile) -> Result<()> {
        let Some(path) = self.tile_path(tile.key) else {
            return Ok(());
        };
        let tmp = path.with_extension("nmpt.tmp");
        fs::write(&tmp, save_tile(tile))?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn read_tile(&self, key: TileKey) -> Result<MapTile> {
        let path = self.tile_path(key).expect("on-disk key without directory");
        let tile = load_tile(&fs::read(&path)?)?;
        if tile.key != key || tile.edge != self.grid.tile_edge || tile.channels != self.grid.channels {
            return Err(Error::config(format!(
                "{} holds tile {:?} ({}×{}, C={}), expected {:?} ({e}×{e}, C={})",
                path.display(),
                tile.key,
                tile.edge,
                tile.edge,
                tile.channels,
                key,
                self.grid.channels,
                e = self.grid.tile_edge
            )));
        }
        Ok(tile)
    }

    /// Evicts least-recently used unpinned tiles until within capacity.
    fn evict(&self, t: &mut Table) -> Result<()> {
        while t.entries.len() > self.capacity {
            let victim = t
                .entries
                .iter()
                .filter(|(_, e)| Arc::strong_count(&e.slot) == 1)
                .min_by_key(|(_, e)| e.last_access)
                .map(|(k, _)| *k);
            let Some(key) = victim else {
                // everything is pinned by in-flight operations
                return Ok(());
            };
            {
                let slot = t.entries[&key].slot.read().unwrap();
                if slot.dirty && slot.tile.version > 0 {
                    self.persist(&slot.tile)?;
                    t.on_disk.insert(key);
                }
            }
            debug!("evicted tile {key:?}");
            t.entries.remove(&key);
        }
        Ok(())
    }

    /// Pins the slots for `keys`, loading persisted tiles and, with `create`,
    /// adding empty version-0 slots for the rest. Returned in key order.
    fn acquire(&self, keys: &BTreeSet<TileKey>, create: bool) -> Result<Vec<(TileKey, SlotRef)>> {
        let mut pinned = Vec::with_capacity(keys.len());
        let mut created = Vec::new();
        let mut to_load = Vec::new();
        {
            let mut t = lock(&self.table);
            for &key in keys {
                if let Some(slot) = t.touch(key) {
                    pinned.push((key, slot));
                } else if t.on_disk.contains(&key) {
                    to_load.push(key);
                } else if create {
                    let slot = Arc::new(RwLock::new(Slot {
                        tile: MapTile::empty(key, self.grid.tile_edge, self.grid.channels),
                        dirty: false,
                    }));
                    t.insert(key, slot.clone());
                    created.push(key);
                    pinned.push((key, slot));
                }
            }
        }

        let mut loaded = Vec::with_capacity(to_load.len());
        let mut failure = None;
        for key in to_load {
            match self.read_tile(key) {
                Ok(tile) => loaded.push(tile),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }

        let mut t = lock(&self.table);
        if failure.is_none() {
            for tile in loaded {
                let key = tile.key;
                let slot = match t.touch(key) {
                    Some(existing) => existing,
                    None => {
                        let slot = Arc::new(RwLock::new(Slot { tile, dirty: false }));
                        t.insert(key, slot.clone());
                        slot
                    }
                };
                pinned.push((key, slot));
            }
            if let Err(e) = self.evict(&mut t) {
                failure = Some(e);
            }
        }
        if let Some(e) = failure {
            drop(pinned);
            for key in created {
                let unused = t
                    .entries
                    .get(&key)
                    .is_some_and(|e| Arc::strong_count(&e.slot) == 1 && e.slot.read().unwrap().tile.version == 0);
                if unused {
                    t.entries.remove(&key);
                }
            }
            return Err(e);
        }
        pinned.sort_by_key(|(k, _)| *k);
        Ok(pinned)
    }

    fn tile_of(&self, gx: i64, gy: i64) -> TileKey {
        self.grid.tile_of_cell(gx, gy)
    }

    /// Tiles holding any bilinear tap of any BEV cell, plus the cell bounds of those taps.
    fn support(&self, pose: &EgoPose) -> (crate::geometry::GridCoords, BTreeSet<TileKey>, CellBounds) {
        let coords = local_grid_coords(&self.bev, pose);
        let res = self.grid.resolution;
        let mut keys = BTreeSet::new();
        let mut b = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for &(x, y) in coords.points() {
            for (gx, gy, _) in bilinear_taps(x / res - 0.5, y / res - 0.5) {
                keys.insert(self.tile_of(gx, gy));
                b = (b.0.min(gx), b.1.min(gy), b.2.max(gx), b.3.max(gy));
            }
        }
        (coords, keys, b)
    }

    /// Tiles a query or write-back at `pose` may read or touch.
    pub fn support_tiles(&self, pose: &EgoPose) -> BTreeSet<TileKey> {
        self.support(pose).1
    }

    /// Samples the prior at every BEV cell of `pose`; coverage is false where
    /// any bilinear tap falls on a never-written cell.
    pub fn query_region(&self, pose: &EgoPose) -> Result<FeatureMap<f32>> {
        let (coords, keys, (gx0, gy0, gx1, gy1)) = self.support(pose);
        let slots = self.acquire(&keys, false)?;
        let c = self.grid.channels;
        let edge = self.grid.tile_edge as i64;
        let (rows, cols) = ((gx1 - gx0 + 1) as usize, (gy1 - gy0 + 1) as usize);
        let mut mosaic = FeatureMap::zeros(rows, cols, c);
        mosaic.set_coverage_all(false);
        let guards: Vec<_> = slots.iter().map(|(_, s)| s.read().unwrap()).collect();
        for slot in &guards {
            let tile = &slot.tile;
            let (ox, oy) = tile.key.origin_cell(self.grid.tile_edge);
            let (u0, u1) = ((gx0 - ox).max(0), (gx1 - ox).min(edge - 1));
            let (v0, v1) = ((gy0 - oy).max(0), (gy1 - oy).min(edge - 1));
            for u in u0..=u1 {
                for v in v0..=v1 {
                    let w = tile.weight(u as usize, v as usize);
                    if w > 0.0 {
                        let (r, cc) = ((ox + u - gx0) as usize, (oy + v - gy0) as usize);
                        mosaic.cell_mut(r, cc).copy_from_slice(tile.cell(u as usize, v as usize));
                        mosaic.coverage_mut()[r * cols + cc] = true;
                    }
                }
            }
        }
        drop(guards);
        let res = self.grid.resolution;
        let source = SourceGrid {
            map: &mosaic,
            origin: (gx0 as f64 * res, gy0 as f64 * res),
            resolution: res,
        };
        Ok(bilinear_sample(&source, &coords))
    }

    /// Splats `new_prior` into the global grid at `pose`. Each touched global
    /// cell takes the splat-weighted mean of the incoming values, replacing
    /// what was there, and keeps the larger of the old and new weights.
    pub fn write_back(&self, pose: &EgoPose, new_prior: &FeatureMap<f32>) -> Result<BTreeSet<TileKey>> {
        let (rows, cols, c) = new_prior.shape();
        if (rows, cols, c) != (self.bev.bev_rows, self.bev.bev_cols, self.grid.channels) {
            return Err(Error::shape(format!(
                "write_back of {rows}×{cols}×{c}, store expects {}×{}×{}",
                self.bev.bev_rows, self.bev.bev_cols, self.grid.channels
            )));
        }
        if !new_prior.is_finite() {
            return Err(Error::config("write_back of non-finite features"));
        }
        let (coords, _, (gx0, gy0, gx1, gy1)) = self.support(pose);
        let res = self.grid.resolution;
        let acc_cols = (gy1 - gy0 + 1) as usize;
        let acc_cells = (gx1 - gx0 + 1) as usize * acc_cols;
        let mut sum_w = vec![0.0f64; acc_cells];
        let mut sum_v = vec![0.0f64; acc_cells * c];
        for (idx, &(x, y)) in coords.points().iter().enumerate() {
            if !new_prior.coverage()[idx] {
                continue;
            }
            let value = &new_prior.data()[idx * c..(idx + 1) * c];
            for (gx, gy, w) in bilinear_taps(x / res - 0.5, y / res - 0.5) {
                let a = (gx - gx0) as usize * acc_cols + (gy - gy0) as usize;
                sum_w[a] += w;
                for (s, &v) in sum_v[a * c..(a + 1) * c].iter_mut().zip(value) {
                    *s += w * v as f64;
                }
            }
        }

        let touched: BTreeSet<TileKey> = sum_w
            .iter()
            .enumerate()
            .filter(|(_, &w)| w >= SPLAT_MIN_WEIGHT)
            .map(|(a, _)| self.tile_of(gx0 + (a / acc_cols) as i64, gy0 + (a % acc_cols) as i64))
            .collect();
        if touched.is_empty() {
            return Ok(touched);
        }
        let slots = self.acquire(&touched, true)?;
        let now = (self.clock)();
        let edge = self.grid.tile_edge as i64;
        let mut guards: Vec<_> = slots.iter().map(|(_, s)| s.write().unwrap()).collect();
        let mut cell = vec![0.0f32; c];
        for slot in guards.iter_mut() {
            let tile = &mut slot.tile;
            let (ox, oy) = tile.key.origin_cell(self.grid.tile_edge);
            let (u0, u1) = ((gx0 - ox).max(0), (gx1 - ox).min(edge - 1));
            let (v0, v1) = ((gy0 - oy).max(0), (gy1 - oy).min(edge - 1));
            for u in u0..=u1 {
                for v in v0..=v1 {
                    let a = (ox + u - gx0) as usize * acc_cols + (oy + v - gy0) as usize;
                    let w = sum_w[a];
                    if w < SPLAT_MIN_WEIGHT {
                        continue;
                    }
                    for (dst, &s) in cell.iter_mut().zip(&sum_v[a * c..(a + 1) * c]) {
                        *dst = (s / w) as f32;
                    }
                    let weight = tile.weight(u as usize, v as usize).max(w as f32);
                    tile.set_cell(u as usize, v as usize, weight, &cell);
                }
            }
            tile.version += 1;
            tile.traversal_count += 1;
            tile.last_updated = now;
            slot.dirty = true;
        }
        Ok(touched)
    }

    /// Copy of an instantiated tile; never creates one.
    pub fn get_tile(&self, key: TileKey) -> Result<Option<MapTile>> {
        let slots = self.acquire(&BTreeSet::from([key]), false)?;
        Ok(slots.first().and_then(|(_, s)| {
            let slot = s.read().unwrap();
            (slot.tile.version > 0).then(|| slot.tile.clone())
        }))
    }

    /// Current version of `key`, 0 when never written.
    pub fn version_of(&self, key: TileKey) -> Result<u64> {
        Ok(self.get_tile(key)?.map_or(0, |t| t.version))
    }

    /// Merges an uploaded tile.
    ///
    /// With `known_version` equal to the stored version, every incoming cell
    /// with positive weight replaces the stored one. With a stale version each
    /// cell keeps whichever side has the larger weight, ties going to the
    /// incoming tile. Either way the weight never decreases and the version
    /// advances by one.
    pub fn put_tile(&self, mut incoming: MapTile, known_version: u64) -> Result<PutOutcome> {
        if incoming.edge != self.grid.tile_edge || incoming.channels != self.grid.channels {
            return Err(Error::shape(format!(
                "uploaded tile is {}×{}×{}, store uses {e}×{e}×{}",
                incoming.edge,
                incoming.edge,
                incoming.channels,
                self.grid.channels,
                e = self.grid.tile_edge
            )));
        }
        incoming.normalize()?;
        let key = incoming.key;
        let slots = self.acquire(&BTreeSet::from([key]), true)?;
        let mut slot = slots[0].1.write().unwrap();
        let current = slot.tile.version == known_version;
        let c = self.grid.channels;
        let tile = &mut slot.tile;
        for i in 0..incoming.weights.len() {
            let (w_in, w_old) = (incoming.weights[i], tile.weights[i]);
            let take = if current { w_in > 0.0 } else { w_in > 0.0 && w_in >= w_old };
            if take {
                tile.features[i * c..(i + 1) * c].copy_from_slice(&incoming.features[i * c..(i + 1) * c]);
                tile.weights[i] = w_in.max(w_old);
            }
        }
        tile.version += 1;
        tile.traversal_count = tile.traversal_count.max(incoming.traversal_count).min(tile.version as u32);
        tile.last_updated = (self.clock)();
        slot.dirty = true;
        Ok(PutOutcome {
            version: slot.tile.version,
            merged: !current,
        })
    }

    /// Overwrites a tile verbatim, as a cache mirroring another store does.
    pub fn install_tile(&self, mut tile: MapTile) -> Result<()> {
        if tile.edge != self.grid.tile_edge || tile.channels != self.grid.channels {
            return Err(Error::shape("installed tile does not match the store grid"));
        }
        tile.normalize()?;
        let slots = self.acquire(&BTreeSet::from([tile.key]), true)?;
        let mut slot = slots[0].1.write().unwrap();
        slot.tile = tile;
        slot.dirty = true;
        Ok(())
    }

    /// Instantiated tiles with keys inside the inclusive bounds.
    pub fn tiles_in(&self, min: TileKey, max: TileKey) -> Result<Vec<(TileKey, Option<MapTile>)>> {
        let mut out = Vec::new();
        for ix in min.ix..=max.ix {
            for iy in min.iy..=max.iy {
                let key = TileKey::new(ix, iy);
                out.push((key, self.get_tile(key)?));
            }
        }
        Ok(out)
    }

    /// Sparse vs. dense footprint. Resident bytes count every instantiated
    /// tile's feature payload; the dense equivalent is the bounding box of
    /// those tiles, in cells, times `C × 4`.
    pub fn memory_stats(&self) -> MemoryStats {
        let keys = self.keys();
        let tiles = keys.len();
        let edge = self.grid.tile_edge;
        let tile_bytes = edge * edge * self.grid.channels * 4;
        let resident_bytes = tiles * tile_bytes;
        let dense_equivalent_bytes = match keys.first() {
            None => 0,
            Some(_) => {
                let (x0, x1) = keys.iter().fold((i32::MAX, i32::MIN), |(a, b), k| (a.min(k.ix), b.max(k.ix)));
                let (y0, y1) = keys.iter().fold((i32::MAX, i32::MIN), |(a, b), k| (a.min(k.iy), b.max(k.iy)));
                (x1 - x0 + 1) as usize * (y1 - y0 + 1) as usize * tile_bytes
            }
        };
        let ratio = if dense_equivalent_bytes == 0 {
            0.0
        } else {
            resident_bytes as f64 / dense_equivalent_bytes as f64
        };
        MemoryStats {
            tiles,
            resident_bytes,
            dense_equivalent_bytes,
            ratio,
        }
    }

    /// Persists every dirty resident tile.
    pub fn flush(&self) -> Result<()> {
        let mut t = lock(&self.table);
        if self.dir.is_none() {
            return Ok(());
        }
        let mut written = Vec::new();
        for (key, e) in &t.entries {
            let mut slot = e.slot.write().unwrap();
            if slot.dirty && slot.tile.version > 0 {
                self.persist(&slot.tile)?;
                slot.dirty = false;
                written.push(*key);
            }
        }
        t.on_disk.extend(written);
        Ok(())
    }

    /// Removes every tile, including persisted files.
    pub fn clear(&self) -> Result<()> {
        let mut t = lock(&self.table);
        for key in std::mem::take(&mut t.on_disk) {
            if let Some(path) = self.tile_path(key) {
                match fs::remove_file(&path) {
                    Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                    _ => {}
                }
            }
        }
        t.entries.clear();
        Ok(())
    }

    /// Deep copy into an unbounded in-memory store with the same grids.
    pub fn snapshot_in_memory(&self) -> Result<TileStore> {
        let copy = TileStore {
            bev: self.bev,
            grid: self.grid,
            dir: None,
            capacity: usize::MAX,
            table: Mutex::new(Table::default()),
            clock: self.clock.clone(),
        };
        for key in self.keys() {
            if let Some(tile) = self.get_tile(key)? {
                copy.install_tile(tile)?;
            }
        }
        Ok(copy)
    }
}

impl PriorStore for TileStore {
    fn bev(&self) -> &GridSpec {
        &self.bev
    }

    fn query_region(&self, pose: &EgoPose) -> Result<FeatureMap<f32>> {
        TileStore::query_region(self, pose)
    }

    fn write_back(&self, pose: &EgoPose, new_prior: &FeatureMap<f32>) -> Result<BTreeSet<TileKey>> {
        TileStore::write_back(self, pose, new_prior)
    }

    fn reset(&self) -> Result<()> {
        self.clear()
    }

    fn memory_stats(&self) -> Result<MemoryStats> {
        Ok(TileStore::memory_stats(self))
    }
}

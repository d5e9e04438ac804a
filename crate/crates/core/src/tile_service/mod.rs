//! Networked access to one shared [`TileStore`]: a threaded TCP server, a
//! blocking client, and a [`PriorStore`] backed by a remote server with a local
//! read cache and an ordered background uploader.

pub mod protocol;

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};

use log::{debug, info, warn};

use crate::error::{Error, Result};
use crate::geometry::{EgoPose, GridSpec, TileKey};
use crate::tensor::FeatureMap;
use crate::tile_store::{MapTile, MemoryStats, PriorStore, PutOutcome, TileStore};

use protocol::*;

pub const ADDR_ENV: &str = "NMP_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:7878";

/// `NMP_ADDR` when set and non-empty, otherwise `configured`.
pub fn resolve_addr(configured: &str) -> String {
    match std::env::var(ADDR_ENV) {
        Ok(v) if !v.trim().is_empty() => v.trim().to_string(),
        _ => configured.to_string(),
    }
}

fn handle(store: &TileStore, frame: &[u8]) -> ResponseFrame {
    let req = match RequestFrame::decode(frame) {
        Ok(r) => r,
        Err((correlation, e)) => {
            warn!("malformed request {correlation}: {e}");
            return ResponseFrame {
                status: STATUS_MALFORMED,
                correlation,
                body: ResponseBody::Malformed(e.to_string()),
            };
        }
    };
    let correlation = req.correlation;
    let result = match req.request {
        Request::GetTiles { min, max } => store.tiles_in(min, max).map(|t| (STATUS_OK, ResponseBody::Tiles(t))),
        Request::PutTile { known_version, tile } => store.put_tile(tile, known_version).map(|o| {
            let status = if o.merged { STATUS_STALE_MERGED } else { STATUS_OK };
            (status, ResponseBody::Version(o.version))
        }),
        Request::Stats => Ok((STATUS_OK, ResponseBody::Stats(store.memory_stats()))),
    };
    match result {
        Ok((status, body)) => ResponseFrame {
            status,
            correlation,
            body,
        },
        Err(e) => ResponseFrame {
            status: STATUS_MALFORMED,
            correlation,
            body: ResponseBody::Malformed(e.to_string()),
        },
    }
}

fn session(store: Arc<TileStore>, mut stream: TcpStream, stop: Arc<AtomicBool>) {
    let peer = stream.peer_addr().ok();
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(Incoming::Frame(f)) => f,
            Ok(Incoming::Closed) => break,
            Err(Error::Protocol(msg)) => {
                // oversized frame: the stream cannot be resynchronised
                let reply = ResponseFrame {
                    status: STATUS_MALFORMED,
                    correlation: 0,
                    body: ResponseBody::Malformed(msg),
                };
                let _ = write_frame(&mut stream, &reply.encode());
                break;
            }
            Err(e) => {
                debug!("session {peer:?} ended: {e}");
                break;
            }
        };
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let reply = handle(&store, &frame);
        if write_frame(&mut stream, &reply.encode()).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

/// A running server; dropping it stops accepting and joins the acceptor.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    sessions: Arc<Mutex<Vec<TcpStream>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    /// Blocks until the acceptor exits, which only happens after shutdown.
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for s in self.sessions.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_now();
        }
    }
}

/// Binds `addr` and serves `store` with one thread per session.
pub fn serve(store: Arc<TileStore>, addr: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::Network(format!("bind {addr}: {e}")))?;
    let local = listener.local_addr()?;
    info!("serving tiles on {local}");
    let stop = Arc::new(AtomicBool::new(false));
    let sessions = Arc::new(Mutex::new(Vec::new()));
    let acceptor = {
        let stop = stop.clone();
        let sessions = sessions.clone();
        thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match conn {
                    Ok(s) => s,
                    Err(e) => {
                        warn!("accept failed: {e}");
                        continue;
                    }
                };
                let _ = stream.set_nodelay(true);
                if let Ok(clone) = stream.try_clone() {
                    sessions.lock().unwrap().push(clone);
                }
                let (store, stop) = (store.clone(), stop.clone());
                thread::spawn(move || session(store, stream, stop));
            }
        })
    };
    Ok(ServerHandle {
        addr: local,
        stop,
        acceptor: Some(acceptor),
        sessions,
    })
}

/// One blocking connection. Not shareable; open one per vehicle.
pub struct TileClient {
    stream: Option<TcpStream>,
    client_id: u32,
    next_correlation: u64,
    seen: HashMap<TileKey, u64>,
}

impl TileClient {
    pub fn connect(addr: &str, client_id: u32) -> Result<Self> {
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| Error::Network(format!("resolve {addr}: {e}")))?
            .collect();
        let stream = TcpStream::connect(&addrs[..]).map_err(|e| Error::Network(format!("connect {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        Ok(Self {
            stream: Some(stream),
            client_id,
            next_correlation: 1,
            seen: HashMap::new(),
        })
    }

    pub fn client_id(&self) -> u32 {
        self.client_id
    }

    fn terminate(&mut self) {
        if let Some(s) = self.stream.take() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    fn call(&mut self, request: Request) -> Result<ResponseFrame> {
        let op = match request {
            Request::GetTiles { .. } => OP_GET_TILES,
            Request::PutTile { .. } => OP_PUT_TILE,
            Request::Stats => OP_STATS,
        };
        let correlation = self.next_correlation;
        self.next_correlation += 1;
        let frame = RequestFrame {
            correlation,
            client: self.client_id,
            request,
        };
        let stream = self
            .stream
            .as_mut()
            .ok_or_else(|| Error::Protocol("session was terminated".into()))?;
        write_frame(stream, &frame.encode())?;
        let bytes = match read_frame(stream)? {
            Incoming::Frame(b) => b,
            Incoming::Closed => return Err(Error::Network("server closed the connection".into())),
        };
        let reply = match ResponseFrame::decode(&bytes, op) {
            Ok(r) => r,
            Err(e) => {
                self.terminate();
                return Err(Error::Protocol(format!("undecodable response: {e}")));
            }
        };
        if reply.correlation != correlation {
            self.terminate();
            return Err(Error::Protocol(format!(
                "response correlation {} for request {correlation}",
                reply.correlation
            )));
        }
        if let ResponseBody::Malformed(msg) = &reply.body {
            warn!("server rejected request {correlation}: {msg}");
            return Err(Error::Rejected { status: reply.status });
        }
        Ok(reply)
    }

    fn observe(&mut self, key: TileKey, version: u64) -> Result<()> {
        let seen = self.seen_version(key);
        if version < seen {
            self.terminate();
            return Err(Error::Protocol(format!("tile {key:?} went back from version {seen} to {version}")));
        }
        self.seen.insert(key, version);
        Ok(())
    }

    /// Tiles with keys in the inclusive bounds; `None` marks never-written tiles.
    pub fn get_tiles(&mut self, min: TileKey, max: TileKey) -> Result<Vec<(TileKey, Option<MapTile>)>> {
        let reply = self.call(Request::GetTiles { min, max })?;
        let ResponseBody::Tiles(tiles) = reply.body else {
            return Err(Error::Protocol("GET_TILES answered without tiles".into()));
        };
        for (key, tile) in &tiles {
            self.observe(*key, tile.as_ref().map_or(0, |t| t.version))?;
        }
        Ok(tiles)
    }

    pub fn put_tile(&mut self, tile: &MapTile, known_version: u64) -> Result<PutOutcome> {
        let key = tile.key;
        let reply = self.call(Request::PutTile {
            known_version,
            tile: tile.clone(),
        })?;
        let ResponseBody::Version(version) = reply.body else {
            return Err(Error::Protocol("PUT_TILE answered without a version".into()));
        };
        self.observe(key, version)?;
        Ok(PutOutcome {
            version,
            merged: reply.status == STATUS_STALE_MERGED,
        })
    }

    pub fn stats(&mut self) -> Result<MemoryStats> {
        match self.call(Request::Stats)?.body {
            ResponseBody::Stats(s) => Ok(s),
            _ => Err(Error::Protocol("STATS answered without stats".into())),
        }
    }

    /// Highest version this client has seen for `key`.
    pub fn seen_version(&self, key: TileKey) -> u64 {
        self.seen.get(&key).copied().unwrap_or(0)
    }
}

impl Drop for TileClient {
    fn drop(&mut self) {
        if let Some(s) = self.stream.as_mut() {
            let _ = s.flush();
        }
    }
}

#[derive(Default)]
struct UploadState {
    pending: usize,
    errors: Vec<String>,
}

/// A vehicle's view of a remote store: downloads tiles on demand into a local
/// cache, writes back into the cache, and uploads touched tiles in order on a
/// background connection.
pub struct RemoteStore {
    cache: TileStore,
    downloads: Mutex<TileClient>,
    /// Server version each cached tile was downloaded at.
    base_versions: Mutex<HashMap<TileKey, u64>>,
    uploads: Mutex<Option<Sender<(MapTile, u64)>>>,
    state: Arc<(Mutex<UploadState>, Condvar)>,
    uploader: Mutex<Option<JoinHandle<()>>>,
    sync_reads: bool,
}

impl RemoteStore {
    /// `sync_reads` makes every query wait for queued uploads first, which
    /// keeps single-vehicle runs identical to a local store.
    pub fn connect(bev: GridSpec, store_resolution: f64, addr: &str, client_id: u32, sync_reads: bool) -> Result<Self> {
        let cache = TileStore::in_memory(bev)?.with_store_resolution(store_resolution)?;
        let downloads = TileClient::connect(addr, client_id)?;
        let mut upload_client = TileClient::connect(addr, client_id)?;
        let (tx, rx) = mpsc::channel::<(MapTile, u64)>();
        let state = Arc::new((Mutex::new(UploadState::default()), Condvar::new()));
        let uploader = {
            let state = state.clone();
            thread::spawn(move || {
                for (tile, known) in rx {
                    let res = upload_client.put_tile(&tile, known);
                    let (lock, cv) = &*state;
                    let mut s = lock.lock().unwrap();
                    if let Err(e) = res {
                        s.errors.push(format!("upload of {:?}: {e}", tile.key));
                    }
                    s.pending -= 1;
                    cv.notify_all();
                }
            })
        };
        Ok(Self {
            cache,
            downloads: Mutex::new(downloads),
            base_versions: Mutex::new(HashMap::new()),
            uploads: Mutex::new(Some(tx)),
            state,
            uploader: Mutex::new(Some(uploader)),
            sync_reads,
        })
    }

    /// Waits for queued uploads and reports the first failure among them.
    pub fn sync(&self) -> Result<()> {
        let (lock, cv) = &*self.state;
        let mut s = lock.lock().unwrap();
        while s.pending > 0 {
            s = cv.wait(s).unwrap();
        }
        if let Some(first) = s.errors.first().cloned() {
            s.errors.clear();
            return Err(Error::Network(first));
        }
        Ok(())
    }

    fn refresh(&self, keys: &BTreeSet<TileKey>) -> Result<()> {
        let (Some(first), Some(_)) = (keys.first(), keys.last()) else {
            return Ok(());
        };
        let min = keys.iter().fold(*first, |a, k| TileKey::new(a.ix.min(k.ix), a.iy.min(k.iy)));
        let max = keys.iter().fold(*first, |a, k| TileKey::new(a.ix.max(k.ix), a.iy.max(k.iy)));
        let tiles = self.downloads.lock().unwrap().get_tiles(min, max)?;
        let mut base = self.base_versions.lock().unwrap();
        for (key, tile) in tiles {
            if !keys.contains(&key) {
                continue;
            }
            match tile {
                Some(t) => {
                    base.insert(key, t.version);
                    self.cache.install_tile(t)?;
                }
                None => {
                    base.entry(key).or_insert(0);
                }
            }
        }
        Ok(())
    }
}

impl PriorStore for RemoteStore {
    fn bev(&self) -> &GridSpec {
        self.cache.bev()
    }

    fn query_region(&self, pose: &EgoPose) -> Result<FeatureMap<f32>> {
        if self.sync_reads {
            self.sync()?;
        }
        self.refresh(&self.cache.support_tiles(pose))?;
        self.cache.query_region(pose)
    }

    fn write_back(&self, pose: &EgoPose, new_prior: &FeatureMap<f32>) -> Result<BTreeSet<TileKey>> {
        let touched = self.cache.write_back(pose, new_prior)?;
        let sender = self.uploads.lock().unwrap();
        let tx = sender.as_ref().ok_or_else(|| Error::Network("uploader stopped".into()))?;
        let mut base = self.base_versions.lock().unwrap();
        for &key in &touched {
            let tile = self.cache.get_tile(key)?.expect("tile was just written");
            let known = base.get(&key).copied().unwrap_or(0);
            {
                let mut s = self.state.0.lock().unwrap();
                s.pending += 1;
            }
            if tx.send((tile, known)).is_err() {
                return Err(Error::Network("uploader stopped".into()));
            }
            // later uploads from this vehicle build on the one just queued
            base.insert(key, known + 1);
        }
        Ok(touched)
    }

    fn reset(&self) -> Result<()> {
        Err(Error::config("a remote store cannot be reset from a vehicle"))
    }

    fn memory_stats(&self) -> Result<MemoryStats> {
        self.sync()?;
        self.downloads.lock().unwrap().stats()
    }
}

impl Drop for RemoteStore {
    fn drop(&mut self) {
        self.uploads.lock().unwrap().take();
        if let Some(h) = self.uploader.lock().unwrap().take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec::new(0.5, 20, 10, 2, 8).unwrap()
    }

    fn start() -> (Arc<TileStore>, ServerHandle) {
        let store = Arc::new(TileStore::in_memory(spec()).unwrap());
        let server = serve(store.clone(), "127.0.0.1:0").unwrap();
        (store, server)
    }

    #[test]
    fn get_missing_tile_is_ok_with_marker() {
        let (_store, server) = start();
        let mut c = TileClient::connect(&server.local_addr().to_string(), 1).unwrap();
        let tiles = c.get_tiles(TileKey::new(0, 0), TileKey::new(0, 1)).unwrap();
        assert_eq!(tiles, vec![(TileKey::new(0, 0), None), (TileKey::new(0, 1), None)]);
        server.shutdown();
    }

    #[test]
    fn malformed_frame_keeps_session() {
        let (_store, server) = start();
        let mut raw = TcpStream::connect(server.local_addr()).unwrap();
        let mut bad = vec![0x55u8];
        bad.extend_from_slice(&9u64.to_le_bytes());
        bad.extend_from_slice(&1u32.to_le_bytes());
        write_frame(&mut raw, &bad).unwrap();
        let Incoming::Frame(reply) = read_frame(&mut raw).unwrap() else { panic!() };
        let reply = ResponseFrame::decode(&reply, 0x55).unwrap();
        assert_eq!((reply.status, reply.correlation), (STATUS_MALFORMED, 9));

        let ok = RequestFrame {
            correlation: 10,
            client: 1,
            request: Request::Stats,
        };
        write_frame(&mut raw, &ok.encode()).unwrap();
        let Incoming::Frame(reply) = read_frame(&mut raw).unwrap() else { panic!() };
        let reply = ResponseFrame::decode(&reply, OP_STATS).unwrap();
        assert_eq!((reply.status, reply.correlation), (STATUS_OK, 10));
    }

    #[test]
    fn put_then_get() {
        let (store, server) = start();
        let mut c = TileClient::connect(&server.local_addr().to_string(), 1).unwrap();
        let mut t = MapTile::empty(TileKey::new(-3, 4), 8, 2);
        t.set_cell(2, 3, 1.0, &[0.25, -0.5]);
        let out = c.put_tile(&t, 0).unwrap();
        assert_eq!(out, PutOutcome { version: 1, merged: false });
        let got = c.get_tiles(t.key, t.key).unwrap().remove(0).1.unwrap();
        assert_eq!(got.features(), t.features());
        assert_eq!(got, store.get_tile(t.key).unwrap().unwrap());
        assert_eq!(c.seen_version(t.key), 1);
    }

    #[test]
    fn remote_store_matches_local() {
        let (_store, server) = start();
        let addr = server.local_addr().to_string();
        let remote = RemoteStore::connect(spec(), 0.5, &addr, 7, true).unwrap();
        let local = TileStore::in_memory(spec()).unwrap();
        for k in 0..5 {
            let pose = EgoPose::new(k as f64 * 2.0, 0.5, 0.2 * k as f64);
            let a = PriorStore::query_region(&remote, &pose).unwrap();
            let b = local.query_region(&pose).unwrap();
            assert_eq!(a, b);
            let prior = FeatureMap::from_fn(20, 10, 2, |i, j, c| (i + 2 * j + c + k) as f32 * 0.01);
            assert_eq!(PriorStore::write_back(&remote, &pose, &prior).unwrap(), local.write_back(&pose, &prior).unwrap());
        }
        remote.sync().unwrap();
        assert_eq!(PriorStore::memory_stats(&remote).unwrap(), local.memory_stats());
    }

    #[test]
    fn addr_override() {
        assert_eq!(resolve_addr("1.2.3.4:5"), std::env::var(ADDR_ENV).unwrap_or_else(|_| "1.2.3.4:5".into()));
    }
}

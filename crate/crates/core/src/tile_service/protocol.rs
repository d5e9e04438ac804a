//! Length-prefixed binary frames, all integers little-endian.
//!
//! ```text
//! request  = len u32 | op u8     | correlation u64 | client u32 | body
//! response = len u32 | status u8 | correlation u64 | body
//! ```
//!
//! `len` counts the bytes after itself. Tiles travel in their on-disk encoding.
//!
//! | op | request body | response body |
//! |----|--------------|---------------|
//! | `GET_TILES` | `ix0 iy0 ix1 iy1: i32` (inclusive) | `n u32`, then per key `ix iy i32, marker u8`, and for marker `OK` `len u32 + tile` |
//! | `PUT_TILE` | `known_version u64, tile` | `version u64` |
//! | `STATS` | empty | `tiles u64, resident u64, dense u64, ratio f64` |
//!
//! A `MALFORMED` response carries a UTF-8 message.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::geometry::TileKey;
use crate::tile_store::{load_tile, save_tile, MapTile, MemoryStats};

pub const OP_GET_TILES: u8 = 0x01;
pub const OP_PUT_TILE: u8 = 0x02;
pub const OP_STATS: u8 = 0x03;

pub const STATUS_OK: u8 = 0x00;
pub const STATUS_EMPTY: u8 = 0x01;
pub const STATUS_STALE_MERGED: u8 = 0x02;
pub const STATUS_MALFORMED: u8 = 0x10;

pub const MAX_FRAME: usize = 64 << 20;
/// Upper bound on the key count of one `GET_TILES` region.
pub const MAX_REGION_TILES: u64 = 4096;

#[derive(Clone, Debug, PartialEq)]
pub enum Request {
    GetTiles { min: TileKey, max: TileKey },
    PutTile { known_version: u64, tile: MapTile },
    Stats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RequestFrame {
    pub correlation: u64,
    pub client: u32,
    pub request: Request,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ResponseBody {
    /// `None` is the explicit empty-tile marker.
    Tiles(Vec<(TileKey, Option<MapTile>)>),
    Version(u64),
    Stats(MemoryStats),
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResponseFrame {
    pub status: u8,
    pub correlation: u64,
    pub body: ResponseBody,
}

/// Outcome of reading one frame off a stream.
pub enum Incoming {
    Frame(Vec<u8>),
    /// Clean end of stream between frames.
    Closed,
}

pub fn read_frame(r: &mut impl Read) -> Result<Incoming> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(Incoming::Closed),
            Ok(0) => return Err(Error::Network("stream closed inside a length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Network(e.to_string())),
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds {MAX_FRAME}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::Network(e.to_string()))?;
    Ok(Incoming::Frame(buf))
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    w.write_all(&out).map_err(|e| Error::Network(e.to_string()))?;
    w.flush().map_err(|e| Error::Network(e.to_string()))
}

struct Body<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Body<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::parse(self.at, format!("frame truncated in {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tile(&mut self, len: usize) -> Result<MapTile> {
        let at = self.at;
        load_tile(self.take(len, "tile")?).map_err(|e| match e {
            Error::Parse { offset, reason } => Error::parse(at + offset, reason),
            other => other,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::parse(self.at, "trailing bytes in frame"));
        }
        Ok(())
    }
}

pub fn region_size(min: TileKey, max: TileKey) -> u64 {
    if max.ix < min.ix || max.iy < min.iy {
        return 0;
    }
    (max.ix as i64 - min.ix as i64 + 1) as u64 * (max.iy as i64 - min.iy as i64 + 1) as u64
}

impl RequestFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let op = match self.request {
            Request::GetTiles { .. } => OP_GET_TILES,
            Request::PutTile { .. } => OP_PUT_TILE,
            Request::Stats => OP_STATS,
        };
        out.push(op);
        out.extend_from_slice(&self.correlation.to_le_bytes());
        out.extend_from_slice(&self.client.to_le_bytes());
        match &self.request {
            Request::GetTiles { min, max } => {
                for v in [min.ix, min.iy, max.ix, max.iy] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Request::PutTile { known_version, tile } => {
                out.extend_from_slice(&known_version.to_le_bytes());
                out.extend_from_slice(&save_tile(tile));
            }
            Request::Stats => {}
        }
        out
    }

    /// Parses a frame payload. On failure the correlation id, when it could be
    /// read, is returned alongside the error so the reply can echo it.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, (u64, Error)> {
        let mut b = Body { bytes, at: 0 };
        let op = b.u8("op").map_err(|e| (0, e))?;
        let correlation = b.u64("correlation id").map_err(|e| (0, e))?;
        let inner = || -> Result<Self> {
            let mut b = Body { bytes, at: 9 };
            let client = b.u32("client id")?;
            let request = match op {
                OP_GET_TILES => {
                    let min = TileKey::new(b.i32("ix0")?, b.i32("iy0")?);
                    let max = TileKey::new(b.i32("ix1")?, b.i32("iy1")?);
                    let n = region_size(min, max);
                    if n == 0 || n > MAX_REGION_TILES {
                        return Err(Error::Protocol(format!("region of {n} tiles outside 1..={MAX_REGION_TILES}")));
                    }
                    Request::GetTiles { min, max }
                }
                OP_PUT_TILE => {
                    let known_version = b.u64("known version")?;
                    let len = bytes.len() - b.at;
                    Request::PutTile {
                        known_version,
                        tile: b.tile(len)?,
                    }
                }
                OP_STATS => Request::Stats,
                other => return Err(Error::Protocol(format!("unknown op code {other:#04x}"))),
            };
            b.finish()?;
            Ok(Self {
                correlation,
                client,
                request,
            })
        };
        inner().map_err(|e| (correlation, e))
    }
}

impl ResponseFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.status];
        out.extend_from_slice(&self.correlation.to_le_bytes());
        match &self.body {
            ResponseBody::Tiles(tiles) => {
                out.extend_from_slice(&(tiles.len() as u32).to_le_bytes());
                for (key, tile) in tiles {
                    out.extend_from_slice(&key.ix.to_le_bytes());
                    out.extend_from_slice(&key.iy.to_le_bytes());
                    match tile {
                        None => out.push(STATUS_EMPTY),
                        Some(t) => {
                            out.push(STATUS_OK);
                            let bytes = save_tile(t);
                            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                            out.extend_from_slice(&bytes);
                        }
                    }
                }
            }
            ResponseBody::Version(v) => out.extend_from_slice(&v.to_le_bytes()),
            ResponseBody::Stats(s) => {
                out.extend_from_slice(&(s.tiles as u64).to_le_bytes());
                out.extend_from_slice(&(s.resident_bytes as u64).to_le_bytes());
                out.extend_from_slice(&(s.dense_equivalent_bytes as u64).to_le_bytes());
                out.extend_from_slice(&s.ratio.to_le_bytes());
            }
            ResponseBody::Malformed(msg) => out.extend_from_slice(msg.as_bytes()),
        }
        out
    }

    /// Parses a response to a request with op code `op`.
    pub fn decode(bytes: &[u8], op: u8) -> Result<Self> {
        let mut b = Body { bytes, at: 0 };
        let status = b.u8("status")?;
        let correlation = b.u64("correlation id")?;
        let body = if status == STATUS_MALFORMED {
            let msg = String::from_utf8_lossy(&bytes[b.at..]).into_owned();
            b.at = bytes.len();
            ResponseBody::Malformed(msg)
        } else {
            match op {
                OP_GET_TILES => {
                    let n = b.u32("tile count")? as usize;
                    let mut tiles = Vec::with_capacity(n.min(MAX_REGION_TILES as usize));
                    for _ in 0..n {
                        let key = TileKey::new(b.i32("ix")?, b.i32("iy")?);
                        let marker_at = b.at;
                        let tile = match b.u8("marker")? {
                            STATUS_EMPTY => None,
                            STATUS_OK => {
                                let len = b.u32("tile length")? as usize;
                                let t = b.tile(len)?;
                                if t.key != key {
                                    return Err(Error::parse(marker_at, "tile key differs from its entry"));
                                }
                                Some(t)
                            }
                            m => return Err(Error::parse(marker_at, format!("unknown tile marker {m:#04x}"))),
                        };
                        tiles.push((key, tile));
                    }
                    ResponseBody::Tiles(tiles)
                }
                OP_PUT_TILE => ResponseBody::Version(b.u64("version")?),
                OP_STATS => {
                    let tiles = b.u64("tiles")? as usize;
                    let resident_bytes = b.u64("resident bytes")? as usize;
                    let dense_equivalent_bytes = b.u64("dense bytes")? as usize;
                    let ratio = f64::from_le_bytes(b.take(8, "ratio")?.try_into().unwrap());
                    ResponseBody::Stats(MemoryStats {
                        tiles,
                        resident_bytes,
                        dense_equivalent_bytes,
                        ratio,
                    })
                }
                other => return Err(Error::Protocol(format!("no response layout for op {other:#04x}"))),
            }
        };
        b.finish()?;
        Ok(Self {
            status,
            correlation,
            body,
        })
    }
}

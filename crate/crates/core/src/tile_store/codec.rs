//! `NMPT` tile files.
//!
//! ```text
//! "NMPT" | format u16 | edge u16 | channels u16 | ix i32 | iy i32 |
//! version u64 | traversal_count u32 | last_updated i64 | payload | crc32c(payload) u32
//! ```
//!
//! The payload walks cells in storage order, across row boundaries:
//! `0x00 n:u16` is a run of `n` zero-weight cells, `0x01 n:u16` is followed
//! by `n` literal cells of `(weight f32, features f32 × C)`.

use crate::error::{Error, Result};
use crate::geometry::TileKey;

use super::MapTile;

pub const TILE_MAGIC: &[u8; 4] = b"NMPT";
pub const TILE_FORMAT: u16 = 1;
pub const HEADER_LEN: usize = 38;

const ZERO_RUN: u8 = 0x00;
const LITERAL_RUN: u8 = 0x01;
const MAX_RUN: usize = u16::MAX as usize;

pub fn save_tile(tile: &MapTile) -> Vec<u8> {
    let c = tile.channels();
    let mut out = Vec::with_capacity(HEADER_LEN + 8);
    out.extend_from_slice(TILE_MAGIC);
    out.extend_from_slice(&TILE_FORMAT.to_le_bytes());
    out.extend_from_slice(&(tile.edge() as u16).to_le_bytes());
    out.extend_from_slice(&(c as u16).to_le_bytes());
    out.extend_from_slice(&tile.key.ix.to_le_bytes());
    out.extend_from_slice(&tile.key.iy.to_le_bytes());
    out.extend_from_slice(&tile.version.to_le_bytes());
    out.extend_from_slice(&tile.traversal_count.to_le_bytes());
    out.extend_from_slice(&tile.last_updated.to_le_bytes());

    let weights = tile.weights();
    let n = weights.len();
    let mut i = 0;
    while i < n {
        let empty = weights[i] == 0.0;
        let mut j = i + 1;
        while j < n && j - i < MAX_RUN && (weights[j] == 0.0) == empty {
            j += 1;
        }
        out.push(if empty { ZERO_RUN } else { LITERAL_RUN });
        out.extend_from_slice(&((j - i) as u16).to_le_bytes());
        if !empty {
            for cell in i..j {
                out.extend_from_slice(&weights[cell].to_le_bytes());
                for v in &tile.features()[cell * c..(cell + 1) * c] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        i = j;
    }
    let crc = crc32c::crc32c(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        if self.bytes.len() - self.at < N {
            return Err(Error::parse(self.at, format!("truncated while reading {what}")));
        }
        let s: [u8; N] = self.bytes[self.at..self.at + N].try_into().unwrap();
        self.at += N;
        Ok(s)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let at = self.at;
        let v = f32::from_le_bytes(self.take(what)?);
        if !v.is_finite() {
            return Err(Error::parse(at, format!("non-finite {what}")));
        }
        Ok(v)
    }
}

pub fn load_tile(bytes: &[u8]) -> Result<MapTile> {
    let mut cur = Cursor { bytes, at: 0 };
    if &cur.take::<4>("magic")? != TILE_MAGIC {
        return Err(Error::parse(0, "bad magic, expected NMPT"));
    }
    let format = u16::from_le_bytes(cur.take("format version")?);
    if format != TILE_FORMAT {
        return Err(Error::parse(4, format!("unsupported tile format version {format}")));
    }
    let edge = u16::from_le_bytes(cur.take("tile edge")?) as usize;
    let channels = u16::from_le_bytes(cur.take("channels")?) as usize;
    if edge == 0 || channels == 0 {
        return Err(Error::parse(6, "zero tile edge or channel count"));
    }
    let ix = i32::from_le_bytes(cur.take("ix")?);
    let iy = i32::from_le_bytes(cur.take("iy")?);
    let version = u64::from_le_bytes(cur.take("version")?);
    let tc_at = cur.at;
    let traversal_count = u32::from_le_bytes(cur.take("traversal count")?);
    if (traversal_count as u64) > version {
        return Err(Error::parse(tc_at, "traversal count exceeds version"));
    }
    let last_updated = i64::from_le_bytes(cur.take("last_updated")?);

    let mut tile = MapTile::empty(TileKey::new(ix, iy), edge, channels);
    tile.version = version;
    tile.traversal_count = traversal_count;
    tile.last_updated = last_updated;

    let payload_start = cur.at;
    let cells = edge * edge;
    let mut cell = 0;
    while cell < cells {
        let tag_at = cur.at;
        let [tag] = cur.take::<1>("run tag")?;
        let run = u16::from_le_bytes(cur.take("run length")?) as usize;
        if run == 0 || cell + run > cells {
            return Err(Error::parse(tag_at, format!("run of {run} cells at cell {cell} overflows tile")));
        }
        match tag {
            ZERO_RUN => {}
            LITERAL_RUN => {
                for k in cell..cell + run {
                    let w_at = cur.at;
                    let w = cur.f32("weight")?;
                    if w <= 0.0 {
                        return Err(Error::parse(w_at, "literal cell with non-positive weight"));
                    }
                    tile.weights_mut()[k] = w;
                    for ch in 0..channels {
                        let v = cur.f32("feature")?;
                        tile.features_mut()[k * channels + ch] = v;
                    }
                }
            }
            other => return Err(Error::parse(tag_at, format!("unknown run tag {other:#04x}"))),
        }
        cell += run;
    }
    let computed = crc32c::crc32c(&bytes[payload_start..cur.at]);
    let stored = u32::from_le_bytes(cur.take("checksum")?);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if cur.at != bytes.len() {
        return Err(Error::parse(cur.at, "trailing bytes after checksum"));
    }
    Ok(tile)
}

pub fn tile_file_name(key: TileKey) -> String {
    format!("tile_{}_{}.nmpt", key.ix, key.iy)
}

pub fn parse_tile_file_name(name: &str) -> Option<TileKey> {
    let rest = name.strip_prefix("tile_")?.strip_suffix(".nmpt")?;
    let (a, b) = rest.split_once('_')?;
    Some(TileKey::new(a.parse().ok()?, b.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tile(rng: &mut ChaCha8Rng, edge: usize, c: usize) -> MapTile {
        let mut t = MapTile::empty(TileKey::new(rng.random_range(-50..50), rng.random_range(-50..50)), edge, c);
        let fill = rng.random_range(0.0..1.0);
        for cell in 0..edge * edge {
            if rng.random_bool(fill) {
                t.weights_mut()[cell] = rng.random_range(0.01..3.0);
                for ch in 0..c {
                    t.features_mut()[cell * c + ch] = rng.random_range(-2.0..2.0);
                }
            }
        }
        t.version = rng.random_range(0..1000);
        t.traversal_count = rng.random_range(0..=t.version as u32);
        t.last_updated = rng.random_range(-1_000_000..2_000_000_000);
        t
    }

    #[test]
    fn random_round_trips_are_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = random_tile(&mut rng, 16, 3);
            let bytes = save_tile(&t);
            let back = load_tile(&bytes).unwrap();
            assert_eq!(back, t);
            assert_eq!(save_tile(&back), bytes);
        }
    }

    #[test]
    fn empty_tile_is_small() {
        let t = MapTile::empty(TileKey::new(-3, 7), 64, 32);
        let bytes = save_tile(&t);
        assert_eq!(bytes.len(), HEADER_LEN + 3 + 4);
        assert!(bytes.len() < 200);
        assert_eq!(load_tile(&bytes).unwrap(), t);
    }

    #[test]
    fn long_runs_split_at_u16() {
        let mut t = MapTile::empty(TileKey::new(0, 0), 300, 1);
        t.weights_mut()[90_000 - 1] = 1.0;
        let back = load_tile(&save_tile(&t)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corruption_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = random_tile(&mut rng, 8, 2);
        t.weights_mut()[0] = 1.0;
        let bytes = save_tile(&t);

        // flip a low mantissa bit of the first weight: still a valid float
        let mut bad = bytes.clone();
        bad[HEADER_LEN + 3] ^= 0x01;
        assert!(matches!(load_tile(&bad), Err(Error::Checksum { .. })));

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(load_tile(&bad), Err(Error::Parse { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(load_tile(&bad), Err(Error::Parse { offset: 4, .. })));

        for cut in [10, HEADER_LEN + 1, bytes.len() - 2] {
            match load_tile(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn file_names() {
        let k = TileKey::new(-4, 12);
        assert_eq!(tile_file_name(k), "tile_-4_12.nmpt");
        assert_eq!(parse_tile_file_name("tile_-4_12.nmpt"), Some(k));
        assert_eq!(parse_tile_file_name("tile_x_1.nmpt"), None);
    }
}

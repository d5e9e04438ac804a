use std::sync::{Arc, Barrier};
use std::thread;

use nmp_core::geometry::{GridSpec, TileKey};
use nmp_core::tile_service::{serve, ServerHandle, TileClient};
use nmp_core::tile_store::{MapTile, TileStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EDGE: usize = 8;
const CH: usize = 2;

fn spec() -> GridSpec {
    GridSpec::new(0.5, 20, 10, CH, EDGE).unwrap()
}

fn start() -> (Arc<TileStore>, ServerHandle) {
    let store = Arc::new(TileStore::in_memory(spec()).unwrap());
    let server = serve(store.clone(), "127.0.0.1:0").unwrap();
    (store, server)
}

/// Random tile; about a third of the cells stay unwritten. Weights are drawn
/// from a continuum so ties have probability zero.
fn random_tile(key: TileKey, rng: &mut impl Rng) -> MapTile {
    let mut t = MapTile::empty(key, EDGE, CH);
    for u in 0..EDGE {
        for v in 0..EDGE {
            if rng.random_bool(0.66) {
                let f = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                t.set_cell(u, v, rng.random_range(0.01..1.0), &f);
            }
        }
    }
    t
}

fn cells(t: &MapTile) -> (Vec<f32>, Vec<f32>) {
    (t.features().to_vec(), t.weights().to_vec())
}

/// Final cells after applying `puts` serially to a fresh store.
fn replay(puts: &[(MapTile, u64)]) -> (Vec<f32>, Vec<f32>) {
    let store = TileStore::in_memory(spec()).unwrap();
    for (tile, known) in puts {
        store.put_tile(tile.clone(), *known).unwrap();
    }
    cells(&store.get_tile(puts[0].0.key).unwrap().unwrap())
}

/// Every merge of two ordered sequences.
fn interleavings<T: Clone>(a: &[T], b: &[T]) -> Vec<Vec<T>> {
    match (a.split_first(), b.split_first()) {
        (None, _) => vec![b.to_vec()],
        (_, None) => vec![a.to_vec()],
        (Some((ha, ta)), Some((hb, tb))) => {
            let mut out = Vec::new();
            for mut rest in interleavings(ta, b) {
                rest.insert(0, ha.clone());
                out.push(rest);
            }
            for mut rest in interleavings(a, tb) {
                rest.insert(0, hb.clone());
                out.push(rest);
            }
            out
        }
    }
}

#[test]
fn disjoint_concurrent_puts_both_survive() {
    let (store, server) = start();
    let addr = server.local_addr().to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for it in 0..100 {
        let keys = [TileKey::new(it, 0), TileKey::new(it, 1)];
        let tiles: Vec<MapTile> = keys.iter().map(|&k| random_tile(k, &mut rng)).collect();
        let barrier = Arc::new(Barrier::new(2));
        let handles: Vec<_> = tiles
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, tile)| {
                let (addr, barrier) = (addr.clone(), barrier.clone());
                thread::spawn(move || {
                    let mut c = TileClient::connect(&addr, i as u32 + 1).unwrap();
                    barrier.wait();
                    c.put_tile(&tile, 0).unwrap()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap().version, 1);
        }
        for t in &tiles {
            let stored = store.get_tile(t.key).unwrap().unwrap();
            assert_eq!(cells(&stored), cells(t), "iteration {it}");
            assert_eq!(cells(&stored), replay(&[(t.clone(), 0)]));
        }
    }
}

#[test]
fn interleaved_writers_match_a_serial_order_and_max_weight() {
    let (store, server) = start();
    let addr = server.local_addr().to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    const PUTS: usize = 4;
    for trial in 0..25 {
        let key = TileKey::new(trial, -trial);
        let plans: Vec<Vec<MapTile>> = (0..2)
            .map(|_| (0..PUTS).map(|_| random_tile(key, &mut rng)).collect())
            .collect();
        let pauses: Vec<Vec<u64>> = (0..2)
            .map(|_| (0..PUTS).map(|_| rng.random_range(0..300)).collect())
            .collect();
        let barrier = Arc::new(Barrier::new(2));
        let handles: Vec<_> = plans
            .iter()
            .cloned()
            .zip(pauses)
            .enumerate()
            .map(|(i, (tiles, pause))| {
                let (addr, barrier) = (addr.clone(), barrier.clone());
                thread::spawn(move || {
                    let mut c = TileClient::connect(&addr, i as u32 + 1).unwrap();
                    barrier.wait();
                    let mut sent = Vec::new();
                    let mut versions = Vec::new();
                    for (tile, us) in tiles.into_iter().zip(pause) {
                        thread::sleep(std::time::Duration::from_micros(us));
                        let known = c.seen_version(key);
                        let out = c.put_tile(&tile, known).unwrap();
                        versions.push(out.version);
                        sent.push((tile, known, out.version));
                    }
                    assert!(versions.windows(2).all(|w| w[0] < w[1]), "client versions must increase");
                    sent
                })
            })
            .collect();
        let sent: Vec<Vec<(MapTile, u64, u64)>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let stored = store.get_tile(key).unwrap().unwrap();
        assert_eq!(stored.version, 2 * PUTS as u64);
        let final_cells = cells(&stored);

        let max_weight: Vec<f32> = (0..EDGE * EDGE)
            .map(|i| sent.iter().flatten().map(|(t, _, _)| t.weights()[i]).fold(0.0, f32::max))
            .collect();
        assert_eq!(final_cells.1, max_weight, "trial {trial}: weight is the max ever written");

        let as_puts = |s: &[(MapTile, u64, u64)]| s.iter().map(|(t, k, _)| (t.clone(), *k)).collect::<Vec<_>>();
        let orders = interleavings(&as_puts(&sent[0]), &as_puts(&sent[1]));
        assert_eq!(orders.len(), 70);
        assert!(
            orders.iter().any(|o| replay(o) == final_cells),
            "trial {trial}: no serial order reproduces the final tile"
        );

        let mut by_version: Vec<&(MapTile, u64, u64)> = sent.iter().flatten().collect();
        by_version.sort_by_key(|(_, _, v)| *v);
        let server_order: Vec<(MapTile, u64)> = by_version.iter().map(|(t, k, _)| (t.clone(), *k)).collect();
        assert_eq!(replay(&server_order), final_cells, "trial {trial}: the server's own order");
    }
}

#[test]
fn get_after_put_round_trips_features() {
    let (_store, server) = start();
    let mut c = TileClient::connect(&server.local_addr().to_string(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..20 {
        let t = random_tile(TileKey::new(-i, i), &mut rng);
        let out = c.put_tile(&t, 0).unwrap();
        assert!(out.version > 0);
        let got = c.get_tiles(t.key, t.key).unwrap().remove(0).1.unwrap();
        let err = got.features().iter().zip(t.features()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stale_merge_is_commutative_and_idempotent(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key = TileKey::new(0, 0);
        let base = random_tile(key, &mut rng);
        let a = random_tile(key, &mut rng);
        let b = random_tile(key, &mut rng);
        // Known version 0 is stale once `base` is stored, so both uploads merge.
        let ab = replay(&[(base.clone(), 0), (a.clone(), 0), (b.clone(), 0)]);
        let ba = replay(&[(base.clone(), 0), (b.clone(), 0), (a.clone(), 0)]);
        prop_assert_eq!(&ab, &ba);
        let aab = replay(&[(base.clone(), 0), (a.clone(), 0), (a.clone(), 0), (b.clone(), 0)]);
        prop_assert_eq!(&ab, &aab);
    }
}

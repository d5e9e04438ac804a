use nmp_core::fusion::{AttentionConfig, FusionWeights, Strategy};
use nmp_core::geometry::GridSpec;
use nmp_core::simulator::{generate_city, plan_trips, run_fleet, Condition, Embedding, FleetOptions, RunReport};
use nmp_core::tile_store::TileStore;

const SEEDS: u64 = 20;

fn spec() -> GridSpec {
    GridSpec::default().with_channels(8)
}

fn run(seed: u64, count: usize, cond: Condition, strategy: Strategy) -> RunReport {
    let spec = spec();
    let city = generate_city(seed, 400.0, spec.resolution).unwrap();
    let trips = plan_trips(&city, &spec, count, cond, seed).unwrap();
    let w = FusionWeights::init(&spec, AttentionConfig::default(), seed).unwrap();
    let emb = Embedding::standard(spec.channels).unwrap();
    let store = TileStore::in_memory(spec).unwrap();
    run_fleet(&city, &emb, &trips, &w, &store, &FleetOptions::new(strategy)).unwrap()
}

#[test]
fn moving_average_second_trip_beats_first() {
    let wins = (0..SEEDS)
        .filter(|&s| {
            let r = run(s, 2, Condition::NORMAL, Strategy::Ma);
            r.trip_miou(1).unwrap() >= r.trip_miou(0).unwrap()
        })
        .count() as u64;
    assert!(wins * 100 >= SEEDS * 95, "{wins}/{SEEDS}");
}

#[test]
fn baseline_is_monotone_in_noise() {
    let inversions = (0..SEEDS)
        .filter(|&s| {
            let m: Vec<f64> = [0.25, 0.5, 1.0]
                .iter()
                .map(|&sigma| run(s, 1, Condition::NORMAL.with_sigma(sigma), Strategy::None).mean_miou.unwrap())
                .collect();
            !(m[0] >= m[1] && m[1] >= m[2])
        })
        .count();
    assert!(inversions <= 1, "{inversions} inversions");
}

#[test]
fn runs_are_deterministic() {
    let a = serde_json::to_string(&run(4, 2, Condition::RAIN, Strategy::GruCa)).unwrap();
    let b = serde_json::to_string(&run(4, 2, Condition::RAIN, Strategy::GruCa)).unwrap();
    assert_eq!(a, b);
}

//! Synthetic city, sensor model, fleet routes and the closed prior loop.

pub mod city;
pub mod fleet;
pub mod metrics;
pub mod render;
pub mod sensor;
pub mod trips;

pub use city::{generate_city, Axis, CityMap, Road, SemanticClass, SemanticMap};
pub use fleet::{run_fleet, FleetOptions, FrameSnapshot, GateStats, RunReport, TripMode, TripReport};
pub use metrics::{evaluate_miou, IouCounts, IouReport};
pub use render::{render_gate, render_semantic};
pub use sensor::{expected_noise_power, observe, Condition, Embedding};
pub use trips::{plan_route, plan_trips, TripPlan};

/// Mixes two words into an independent seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

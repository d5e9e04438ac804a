//! Fleet routes: Manhattan staircases through the road grid, sampled at a
//! fixed spacing.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{EgoPose, GridSpec};

use super::city::CityMap;
use super::derive_seed;
use super::sensor::Condition;

pub const FRAME_SPACING_M: f64 = 10.0;

/// One pass of one vehicle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TripPlan {
    pub vehicle: u32,
    pub poses: Vec<EgoPose>,
    pub condition: Condition,
    /// Seeds every observation of the trip.
    pub seed: u64,
}

impl TripPlan {
    /// Consecutive poses must be closer than the shorter BEV side so their
    /// footprints overlap.
    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        self.condition.validate()?;
        if self.poses.is_empty() {
            return Err(Error::config(format!("trip of vehicle {} has no poses", self.vehicle)));
        }
        let (h, w) = spec.bev_extent_m();
        let limit = h.min(w);
        for pair in self.poses.windows(2) {
            let d = (pair[1].x - pair[0].x).hypot(pair[1].y - pair[0].y);
            if d >= limit {
                return Err(Error::config(format!(
                    "poses {d:.1} m apart exceed the {limit:.1} m BEV side"
                )));
            }
        }
        Ok(())
    }
}

/// Intersection coordinates usable as route vertices: the BEV footprint fits
/// inside the city at any right-angle heading.
pub fn route_vertices(city: &CityMap, spec: &GridSpec) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = spec.bev_extent_m();
    let margin = h.hypot(w) / 2.0;
    let keep = |v: Vec<f64>| -> Vec<f64> {
        v.into_iter()
            .filter(|&p| p >= margin && p <= city.extent_m - margin)
            .collect()
    };
    let (xs, ys) = city.road_lines();
    (keep(xs), keep(ys))
}

fn snap(v: f64, res: f64) -> f64 {
    (v / res).round() * res
}

/// Staircase from one corner of the usable intersection grid to the opposite
/// one, alternating x and y legs. The seed picks the starting corner and
/// which axis goes first. Poses sit every `FRAME_SPACING_M` along the path,
/// snapped to the BEV lattice, heading along the current leg.
pub fn plan_route(city: &CityMap, spec: &GridSpec, seed: u64) -> Result<Vec<EgoPose>> {
    let (mut xs, mut ys) = route_vertices(city, spec);
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::config(format!(
            "a {} m city leaves {}x{} usable intersections; need at least 2x2",
            city.extent_m,
            xs.len(),
            ys.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(0.5) {
        xs.reverse();
    }
    if rng.random_bool(0.5) {
        ys.reverse();
    }
    let x_first = rng.random_bool(0.5);

    let res = spec.resolution;
    let mut vertices = vec![(snap(xs[0], res), snap(ys[0], res))];
    let (mut i, mut j) = (0, 0);
    let mut along_x = x_first;
    while i + 1 < xs.len() || j + 1 < ys.len() {
        if (along_x && i + 1 < xs.len()) || j + 1 == ys.len() {
            i += 1;
        } else {
            j += 1;
        }
        vertices.push((snap(xs[i], res), snap(ys[j], res)));
        along_x = !along_x;
    }

    let mut poses = Vec::new();
    let mut carry = 0.0;
    for leg in vertices.windows(2) {
        let ((x0, y0), (x1, y1)) = (leg[0], leg[1]);
        let len = (x1 - x0).abs() + (y1 - y0).abs();
        let yaw = if x1 != x0 {
            if x1 > x0 {
                0.0
            } else {
                PI
            }
        } else if y1 > y0 {
            FRAC_PI_2
        } else {
            -FRAC_PI_2
        };
        let mut s = carry;
        while s < len {
            let t = s / len;
            poses.push(EgoPose::new(
                snap(x0 + t * (x1 - x0), res),
                snap(y0 + t * (y1 - y0), res),
                yaw,
            ));
            s += FRAME_SPACING_M;
        }
        carry = s - len;
    }
    let last_yaw = poses.last().map_or(0.0, |p| p.yaw());
    let &(xe, ye) = vertices.last().expect("at least two vertices");
    poses.push(EgoPose::new(xe, ye, last_yaw));
    for p in &poses {
        city.check_footprint(spec, p)?;
    }
    Ok(poses)
}

/// `count` trips over one shared route, one vehicle each, with independent
/// observation seeds.
pub fn plan_trips(
    city: &CityMap,
    spec: &GridSpec,
    count: usize,
    condition: Condition,
    seed: u64,
) -> Result<Vec<TripPlan>> {
    condition.validate()?;
    let route = plan_route(city, spec, seed)?;
    Ok((0..count)
        .map(|k| TripPlan {
            vehicle: k as u32,
            poses: route.clone(),
            condition,
            seed: derive_seed(seed, 1 + k as u64),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::city::generate_city;

    #[test]
    fn route_stays_inside_and_overlaps() {
        let spec = GridSpec::default().with_channels(8);
        for seed in 0..6 {
            let city = generate_city(seed, 400.0, 0.3).unwrap();
            let trips = plan_trips(&city, &spec, 2, Condition::NORMAL, seed).unwrap();
            assert_eq!(trips[0].poses, trips[1].poses);
            assert_ne!(trips[0].seed, trips[1].seed);
            for t in &trips {
                t.validate(&spec).unwrap();
                for p in &t.poses {
                    assert!(city.crop(&spec, p).is_ok());
                    let yaw_steps = p.yaw() / FRAC_PI_2;
                    assert!((yaw_steps - yaw_steps.round()).abs() < 1e-12);
                    for v in [p.x, p.y] {
                        let k = v / 0.3;
                        assert!((k - k.round()).abs() < 1e-9);
                    }
                }
            }
            assert!(trips[0].poses.len() > 20);
        }
    }

    #[test]
    fn route_follows_roads() {
        let spec = GridSpec::default().with_channels(8);
        let city = generate_city(3, 400.0, 0.3).unwrap();
        let (xs, ys) = city.road_lines();
        for p in plan_route(&city, &spec, 3).unwrap() {
            let on_x = xs.iter().any(|&x| (x - p.x).abs() <= 0.15 + 1e-9);
            let on_y = ys.iter().any(|&y| (y - p.y).abs() <= 0.15 + 1e-9);
            assert!(on_x || on_y, "{p:?}");
        }
    }

    #[test]
    fn small_city_is_rejected() {
        let spec = GridSpec::default().with_channels(8);
        let city = generate_city(0, 150.0, 0.3).unwrap();
        assert!(matches!(plan_route(&city, &spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn validate_rejects_sparse_poses() {
        let spec = GridSpec::default();
        let trip = TripPlan {
            vehicle: 0,
            poses: vec![EgoPose::new(0.0, 0.0, 0.0), EgoPose::new(40.0, 0.0, 0.0)],
            condition: Condition::NORMAL,
            seed: 0,
        };
        assert!(trip.validate(&spec).is_err());
    }
}

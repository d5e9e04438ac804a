//! Plain SGD on the conv-GRU: fit the fused output to the noiseless class
//! encoding from noisy current observations and noisy or missing priors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{gru_update, ma_update, GruWeights};
use crate::simulator::{derive_seed, generate_city, CityMap, Condition, Embedding, SemanticClass, SemanticMap};
use crate::tensor::FeatureMap;

use super::gru_backward;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub channels: usize,
    pub city_extent_m: f64,
    pub resolution: f64,
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    /// Crop edges are drawn from this inclusive range.
    pub crop_min: usize,
    pub crop_max: usize,
    /// Largest simulated distance from the ego, in meters.
    pub max_range_m: f64,
    /// Noise conditions sampled for training pairs.
    pub conditions: Vec<Condition>,
    /// Fraction of noiseless pairs.
    pub clean_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            steps: 200,
            learning_rate: 1.0,
            batch: 8,
            channels: 8,
            city_extent_m: 400.0,
            resolution: 0.3,
            train_pairs: 48,
            held_out_pairs: 32,
            crop_min: 24,
            crop_max: 32,
            max_range_m: 35.0,
            conditions: vec![Condition::NORMAL.with_sigma(0.25)],
            clean_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch > 0
            && self.batch <= self.train_pairs
            && self.held_out_pairs > 0
            && self.crop_min >= 3
            && self.crop_min <= self.crop_max
            && self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.max_range_m >= 0.0
            && !self.conditions.is_empty()
            && (0.0..=1.0).contains(&self.clean_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid training config {self:?}")))
        }
    }
}

/// One prior/current/target triple.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub prior: FeatureMap<f32>,
    pub current: FeatureMap<f32>,
    pub target: FeatureMap<f32>,
}

/// L2 norm of each gradient block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GradNorms {
    pub w_z: f64,
    pub b_z: f64,
    pub w_r: f64,
    pub b_r: f64,
    pub w_h: f64,
    pub b_h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub step: usize,
    /// MSE over the whole training pool before this step's update.
    pub mse: f64,
    pub grad_norms: GradNorms,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: GruWeights<f32>,
    pub history: Vec<LossReport>,
    pub held_out_initial: f64,
    pub held_out_final: f64,
    /// Held-out MSE of a 0.5 moving average on the same pairs.
    pub ma_baseline: f64,
}

impl TrainOutcome {
    /// The held-out target: within 5% of the moving average.
    pub fn beats_ma(&self) -> bool {
        self.held_out_final <= self.ma_baseline * 1.05
    }
}

/// Picks a crop corner; three times in four the crop is centered on road
/// surface so the pool is not dominated by empty background.
fn crop_corner(city: &CityMap, rng: &mut ChaCha8Rng, h: usize, w: usize) -> (usize, usize) {
    let n = city.ground_truth.rows();
    let want_road = rng.random_bool(0.75);
    let mut corner = (0, 0);
    for _ in 0..64 {
        corner = (rng.random_range(0..=n - h), rng.random_range(0..=n - w));
        let centre = city.ground_truth.get(corner.0 + h / 2, corner.1 + w / 2);
        if !want_road || centre != SemanticClass::Background {
            break;
        }
    }
    corner
}

fn add_noise(map: &mut FeatureMap<f32>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        for v in map.data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += (sigma * n) as f32;
        }
    }
}

/// Noisy training triples drawn from random crops of `city`.
///
/// The current observation carries Gaussian noise at a random configured
/// condition and range, and one time in five loses a random rectangle. The
/// prior is empty one time in four, uncovered on a leading band another one
/// time in four, and otherwise the mean of 1 to 4 independent noisy
/// observations. A `clean_fraction` of pairs is noiseless.
pub fn make_pairs(
    city: &CityMap,
    embedding: &Embedding,
    count: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    config.validate()?;
    let n = city.ground_truth.rows();
    if n < config.crop_max {
        return Err(Error::config("city smaller than a training crop"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let h = rng.random_range(config.crop_min..=config.crop_max);
        let w = rng.random_range(config.crop_min..=config.crop_max);
        let (r0, c0) = crop_corner(city, &mut rng, h, w);
        let labels: Vec<SemanticClass> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| city.ground_truth.get(r0 + r, c0 + c))
            .collect();
        let target = embedding.encode(&SemanticMap::from_labels(h, w, labels)?);

        let sigma = if rng.random_bool(config.clean_fraction) {
            0.0
        } else {
            let cond = config.conditions.choose(&mut rng).expect("validated non-empty");
            cond.sigma_at(rng.random_range(0.0..=config.max_range_m))
        };
        let mut current = target.clone();
        add_noise(&mut current, sigma, &mut rng);
        if rng.random_bool(0.2) {
            let (oh, ow) = (rng.random_range(1..=h / 2), rng.random_range(1..=w / 2));
            let (or, oc) = (rng.random_range(0..=h - oh), rng.random_range(0..=w - ow));
            for r in or..or + oh {
                for c in oc..oc + ow {
                    current.cell_mut(r, c).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }

        let mut prior = target.clone();
        let k = rng.random_range(1..=4u32);
        add_noise(&mut prior, sigma / (k as f64).sqrt(), &mut rng);
        match rng.random_range(0..4) {
            0 => {
                prior = FeatureMap::zeros(h, w, config.channels);
                prior.set_coverage_all(false);
            }
            1 => {
                let band = rng.random_range(1..h);
                for r in 0..band {
                    for c in 0..w {
                        prior.cell_mut(r, c).iter_mut().for_each(|v| *v = 0.0);
                        prior.coverage_mut()[r * w + c] = false;
                    }
                }
            }
            _ => {}
        }
        pairs.push(TrainingPair { prior, current, target });
    }
    Ok(pairs)
}

fn pair_mse(out: &FeatureMap<f32>, target: &FeatureMap<f32>) -> f64 {
    out.data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / out.data().len() as f64
}

/// Mean over pairs of the per-pair MSE of the GRU output.
pub fn evaluate_gru(pairs: &[TrainingPair], w: &GruWeights<f32>) -> Result<f64> {
    let mut acc = 0.0;
    for p in pairs {
        acc += pair_mse(&gru_update(&p.prior, &p.current, w)?.output, &p.target);
    }
    Ok(acc / pairs.len() as f64)
}

/// Same metric for a moving average with weight `alpha` on the current frame.
pub fn evaluate_ma_baseline(pairs: &[TrainingPair], alpha: f32) -> Result<f64> {
    let mut acc = 0.0;
    for p in pairs {
        acc += pair_mse(&ma_update(&p.current, &p.prior, alpha)?, &p.target);
    }
    Ok(acc / pairs.len() as f64)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Trains from `init` (seeded default initialization when `None`). Each step
/// averages per-pair MSE gradients over a minibatch drawn from a fixed pool
/// and applies `w -= lr · g`. Gradients accumulate in 64-bit in pair order.
pub fn train_gru(config: &TrainConfig, init: Option<GruWeights<f32>>) -> Result<TrainOutcome> {
    config.validate()?;
    let embedding = Embedding::standard(config.channels)?;
    let train_city = generate_city(derive_seed(config.seed, 11), config.city_extent_m, config.resolution)?;
    let test_city = generate_city(derive_seed(config.seed, 12), config.city_extent_m, config.resolution)?;
    let pool = make_pairs(&train_city, &embedding, config.train_pairs, config, derive_seed(config.seed, 13))?;
    let held_out = make_pairs(&test_city, &embedding, config.held_out_pairs, config, derive_seed(config.seed, 14))?;
    let mut weights = match init {
        Some(w) => {
            w.validate(config.channels)?;
            w
        }
        None => GruWeights::init(config.channels, &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 15))),
    };
    let held_out_initial = evaluate_gru(&held_out, &weights)?;
    let ma_baseline = evaluate_ma_baseline(&held_out, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 16));
    let mut history = Vec::with_capacity(config.steps);
    let indices: Vec<usize> = (0..pool.len()).collect();

    for step in 0..config.steps {
        let mse = evaluate_gru(&pool, &weights)?;
        if !mse.is_finite() {
            return Err(Error::Divergence { step, mse });
        }
        let batch: Vec<usize> = indices.choose_multiple(&mut rng, config.batch).copied().collect();
        let sizes: Vec<(usize, usize)> = weights.kernels().iter().map(|k| (k.weights().len(), k.bias().len())).collect();
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = sizes.iter().map(|&(a, b)| (vec![0.0; a], vec![0.0; b])).collect();
        for &i in &batch {
            let p = &pool[i];
            let trace = gru_update(&p.prior, &p.current, &weights)?;
            let scale = 2.0 / (trace.output.data().len() * batch.len()) as f32;
            let mut upstream = trace.output.clone();
            for (u, &t) in upstream.data_mut().iter_mut().zip(p.target.data()) {
                *u = (*u - t) * scale;
            }
            let g = gru_backward(&trace, &weights, &upstream)?;
            for (acc, kg) in grads.iter_mut().zip(g.kernels()) {
                acc.0.iter_mut().zip(&kg.weights).for_each(|(a, &v)| *a += v as f64);
                acc.1.iter_mut().zip(&kg.bias).for_each(|(a, &v)| *a += v as f64);
            }
        }
        let grad_norms = GradNorms {
            w_z: norm(&grads[0].0),
            b_z: norm(&grads[0].1),
            w_r: norm(&grads[1].0),
            b_r: norm(&grads[1].1),
            w_h: norm(&grads[2].0),
            b_h: norm(&grads[2].1),
        };
        let lr = config.learning_rate;
        if lr > 0.0 {
            for (kernel, (gw, gb)) in weights.kernels_mut().into_iter().zip(&grads) {
                kernel.weights_mut().iter_mut().zip(gw).for_each(|(w, g)| *w -= (lr * g) as f32);
                kernel.bias_mut().iter_mut().zip(gb).for_each(|(b, g)| *b -= (lr * g) as f32);
            }
        }
        history.push(LossReport { step, mse, grad_norms });
        let finite = weights
            .kernels()
            .iter()
            .all(|k| k.weights().iter().chain(k.bias()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Divergence { step, mse });
        }
    }
    let held_out_final = evaluate_gru(&held_out, &weights)?;
    if !held_out_final.is_finite() {
        return Err(Error::Divergence {
            step: config.steps,
            mse: held_out_final,
        });
    }
    info!("held-out MSE {held_out_initial:.5} -> {held_out_final:.5}, moving average {ma_baseline:.5}");
    Ok(TrainOutcome {
        weights,
        history,
        held_out_initial,
        held_out_final,
        ma_baseline,
    })
}

pub fn write_loss_csv(history: &[LossReport], out: impl Write) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "step,mse")?;
    for r in history {
        writeln!(w, "{},{}", r.step, r.mse)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_loss_csv(history: &[LossReport], path: &Path) -> Result<()> {
    write_loss_csv(history, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch: 2,
            train_pairs: 6,
            held_out_pairs: 4,
            city_extent_m: 200.0,
            crop_min: 8,
            crop_max: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick()
        };
        let init = GruWeights::init(8, &mut ChaCha8Rng::seed_from_u64(3));
        let out = train_gru(&cfg, Some(init.clone())).unwrap();
        assert_eq!(out.weights, init);
        assert!(out.history.windows(2).all(|w| w[0].mse == w[1].mse));
        assert_eq!(out.held_out_initial, out.held_out_final);
    }

    #[test]
    fn bit_reproducible() {
        let a = train_gru(&quick(), None).unwrap();
        let b = train_gru(&quick(), None).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..quick()
        };
        assert!(matches!(train_gru(&cfg, None), Err(Error::Divergence { .. })));
    }

    #[test]
    fn pairs_shapes_and_coverage() {
        let cfg = quick();
        let city = generate_city(1, 200.0, 0.3).unwrap();
        let e = Embedding::standard(8).unwrap();
        let pairs = make_pairs(&city, &e, 40, &cfg, 2).unwrap();
        for p in &pairs {
            let (h, w, c) = p.target.shape();
            assert!((8..=10).contains(&h) && (8..=10).contains(&w) && c == 8);
            assert_eq!(p.current.shape(), p.target.shape());
            assert_eq!(p.prior.shape(), p.target.shape());
        }
        assert!(pairs.iter().any(|p| p.prior.covered_count() == 0));
        assert!(pairs.iter().any(|p| p.prior.covered_count() == p.prior.cell_count()));
    }

    #[test]
    fn csv_format() {
        let h = vec![
            LossReport {
                step: 0,
                mse: 0.5,
                grad_norms: GradNorms::default(),
            },
            LossReport {
                step: 1,
                mse: 0.25,
                grad_norms: GradNorms::default(),
            },
        ];
        let mut buf = Vec::new();
        write_loss_csv(&h, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,mse\n0,0.5\n1,0.25\n");
    }
}

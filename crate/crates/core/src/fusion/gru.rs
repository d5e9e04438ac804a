//! Convolutional GRU that blends the local prior with refined current features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{concat_channels, conv2d, hadamard, sigmoid, tanh, ConvKernel, FeatureMap, Real};

pub const GRU_KERNEL: usize = 3;

/// Gate kernels `[C, 2C, 3, 3]`; each kernel carries its own bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights<T = f32> {
    pub w_z: ConvKernel<T>,
    pub w_r: ConvKernel<T>,
    pub w_h: ConvKernel<T>,
}

impl<T: Real> GruWeights<T> {
    pub fn zeros(channels: usize) -> Self {
        let k = || ConvKernel::zeros(channels, 2 * channels, GRU_KERNEL).expect("odd kernel");
        Self {
            w_z: k(),
            w_r: k(),
            w_h: k(),
        }
    }

    /// Uniform `±1/√fan_in` kernels, zero biases except `b_z = -1`.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(channels);
        let bound = 1.0 / ((2 * channels * GRU_KERNEL * GRU_KERNEL) as f64).sqrt();
        for kernel in [&mut w.w_z, &mut w.w_r, &mut w.w_h] {
            for v in kernel.weights_mut() {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        w.w_z.bias_mut().iter_mut().for_each(|b| *b = T::of(-1.0));
        w
    }

    pub fn channels(&self) -> usize {
        self.w_z.out_channels()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        for (name, k) in [("w_z", &self.w_z), ("w_r", &self.w_r), ("w_h", &self.w_h)] {
            if k.out_channels() != channels || k.in_channels() != 2 * channels || k.size() != GRU_KERNEL {
                return Err(Error::shape(format!(
                    "{name} is [{}, {}, {k}, {k}], expected [{channels}, {}, 3, 3]",
                    k.out_channels(),
                    k.in_channels(),
                    2 * channels,
                    k = k.size()
                )));
            }
            if k.weights().iter().chain(k.bias()).any(|v| !v.is_finite()) {
                return Err(Error::config(format!("{name} holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> GruWeights<U> {
        GruWeights {
            w_z: self.w_z.cast(),
            w_r: self.w_r.cast(),
            w_h: self.w_h.cast(),
        }
    }

    pub fn kernels(&self) -> [&ConvKernel<T>; 3] {
        [&self.w_z, &self.w_r, &self.w_h]
    }

    pub fn kernels_mut(&mut self) -> [&mut ConvKernel<T>; 3] {
        [&mut self.w_z, &mut self.w_r, &mut self.w_h]
    }
}

/// Forward intermediates of one GRU step, kept for inspection and backprop.
#[derive(Clone, Debug)]
pub struct GruTrace<T = f32> {
    /// Prior with uncovered cells zeroed.
    pub prior: FeatureMap<T>,
    /// Coverage of the prior as passed in.
    pub prior_coverage: Vec<bool>,
    pub refined: FeatureMap<T>,
    /// `[p, o']`.
    pub gate_input: FeatureMap<T>,
    /// `[r ⊙ p, o']`.
    pub candidate_input: FeatureMap<T>,
    pub z: FeatureMap<T>,
    pub r: FeatureMap<T>,
    pub candidate: FeatureMap<T>,
    pub output: FeatureMap<T>,
}

pub(crate) fn masked_prior<T: Real>(prior: &FeatureMap<T>) -> FeatureMap<T> {
    let mut p = prior.clone();
    let ch = p.channels();
    for cell in 0..p.cell_count() {
        if !prior.coverage()[cell] {
            p.data_mut()[cell * ch..(cell + 1) * ch]
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }
    p.set_coverage_all(true);
    p
}

/// One conv-GRU step:
///
/// ```text
/// z  = σ(conv([p, o'], w_z))
/// r  = σ(conv([p, o'], w_r))
/// p̃  = tanh(conv([r ⊙ p, o'], w_h))
/// p' = (1 - z) ⊙ p + z ⊙ p̃
/// ```
///
/// Uncovered prior cells enter as zeros; the output is covered everywhere.
pub fn gru_update<T: Real>(
    prior: &FeatureMap<T>,
    refined: &FeatureMap<T>,
    w: &GruWeights<T>,
) -> Result<GruTrace<T>> {
    prior.ensure_same_shape(refined, "gru_update prior/refined")?;
    w.validate(prior.channels())?;
    let p = masked_prior(prior);
    let mut o = refined.clone();
    o.set_coverage_all(true);

    let gate_input = concat_channels(&p, &o)?;
    let z = sigmoid(&conv2d(&gate_input, &w.w_z)?);
    let r = sigmoid(&conv2d(&gate_input, &w.w_r)?);
    let candidate_input = concat_channels(&hadamard(&r, &p)?, &o)?;
    let candidate = tanh(&conv2d(&candidate_input, &w.w_h)?);

    let mut output = p.clone();
    for (((out, &pv), &zv), &hv) in output
        .data_mut()
        .iter_mut()
        .zip(p.data())
        .zip(z.data())
        .zip(candidate.data())
    {
        *out = (T::one() - zv) * pv + zv * hv;
    }
    Ok(GruTrace {
        prior: p,
        prior_coverage: prior.coverage().to_vec(),
        refined: o,
        gate_input,
        candidate_input,
        z,
        r,
        candidate,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, r: usize, c: usize, ch: usize) -> FeatureMap<f32> {
        FeatureMap::from_fn(r, c, ch, |_, _, _| rng.random_range(-1.0..1.0))
    }

    // Per-cell scalar re-derivation with explicit neighborhood loops.
    fn scalar_gru(p: &FeatureMap<f32>, o: &FeatureMap<f32>, w: &GruWeights<f32>) -> Vec<f64> {
        let (rows, cols, c) = p.shape();
        let input = |src: &dyn Fn(usize, usize, usize) -> f64, r: isize, cc: isize, i: usize| -> f64 {
            if r < 0 || cc < 0 || r >= rows as isize || cc >= cols as isize {
                0.0
            } else {
                src(r as usize, cc as usize, i)
            }
        };
        let conv_at = |k: &ConvKernel<f32>, src: &dyn Fn(usize, usize, usize) -> f64, r: usize, cc: usize, out: usize| {
            let mut acc = k.bias()[out] as f64;
            for i in 0..2 * c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let v = input(src, r as isize + ky as isize - 1, cc as isize + kx as isize - 1, i);
                        acc += k.weight(out, i, ky, kx) as f64 * v;
                    }
                }
            }
            acc
        };
        let cat = |r: usize, cc: usize, i: usize| -> f64 {
            if i < c {
                p.get(r, cc, i) as f64
            } else {
                o.get(r, cc, i - c) as f64
            }
        };
        let reset = |r: usize, cc: usize, ch: usize| sigmoid_scalar(conv_at(&w.w_r, &cat, r, cc, ch));
        let cat_h = |r: usize, cc: usize, i: usize| -> f64 {
            if i < c {
                reset(r, cc, i) * p.get(r, cc, i) as f64
            } else {
                o.get(r, cc, i - c) as f64
            }
        };
        let mut out = Vec::new();
        for r in 0..rows {
            for cc in 0..cols {
                for ch in 0..c {
                    let z = sigmoid_scalar(conv_at(&w.w_z, &cat, r, cc, ch));
                    let h = conv_at(&w.w_h, &cat_h, r, cc, ch).tanh();
                    out.push((1.0 - z) * p.get(r, cc, ch) as f64 + z * h);
                }
            }
        }
        out
    }

    #[test]
    fn matches_scalar_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_map(&mut rng, 6, 6, 4);
        let o = random_map(&mut rng, 6, 6, 4);
        let mut w = GruWeights::init(4, &mut rng);
        for k in w.kernels_mut() {
            k.bias_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let got = gru_update(&p, &o, &w).unwrap();
        let want = scalar_gru(&p, &o, &w);
        let diff = got
            .output
            .data()
            .iter()
            .zip(&want)
            .map(|(&a, &b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-5, "{diff}");
    }

    #[test]
    fn limiting_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = random_map(&mut rng, 5, 5, 3);
        let o = random_map(&mut rng, 5, 5, 3);
        let mut w = GruWeights::init(3, &mut rng);

        w.w_z.bias_mut().iter_mut().for_each(|b| *b = -20.0);
        let t = gru_update(&p, &o, &w).unwrap();
        assert!(t.output.max_abs_diff(&p) <= 1e-6);

        w.w_z.bias_mut().iter_mut().for_each(|b| *b = 20.0);
        w.w_r.bias_mut().iter_mut().for_each(|b| *b = 20.0);
        let t = gru_update(&p, &o, &w).unwrap();
        assert!(t.output.max_abs_diff(&t.candidate) <= 1e-6);
    }

    #[test]
    fn uncovered_prior_enters_as_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut p = random_map(&mut rng, 4, 4, 2);
        let o = random_map(&mut rng, 4, 4, 2);
        let w = GruWeights::init(2, &mut rng);
        p.set_coverage_all(false);
        let t = gru_update(&p, &o, &w).unwrap();
        let t0 = gru_update(&FeatureMap::zeros(4, 4, 2), &o, &w).unwrap();
        assert_eq!(t.output, t0.output);
        assert!(t.output.coverage().iter().all(|&m| m));
    }

    #[test]
    fn rejects_bad_shapes() {
        let w = GruWeights::<f32>::zeros(2);
        let a = FeatureMap::zeros(3, 3, 2);
        assert!(gru_update(&a, &FeatureMap::zeros(3, 4, 2), &w).is_err());
        assert!(gru_update(&FeatureMap::zeros(3, 3, 3), &FeatureMap::zeros(3, 3, 3), &w).is_err());
    }
}

//! Reverse-mode gradients of the conv-GRU step, a central-difference oracle,
//! and a small SGD trainer for [`GruWeights`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{gru_update, GruTrace, GruWeights};
use crate::tensor::{conv2d_backward, split_channels, ConvKernel, FeatureMap, Real};

mod train;

pub use train::{
    evaluate_gru, evaluate_ma_baseline, make_pairs, save_loss_csv, train_gru, write_loss_csv, GradNorms, LossReport,
    TrainConfig, TrainOutcome, TrainingPair,
};

/// Gradient of one conv kernel: weights in `[out, in, k, k]` layout plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGrad<T = f32> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct GruGrads<T = f32> {
    pub w_z: KernelGrad<T>,
    pub w_r: KernelGrad<T>,
    pub w_h: KernelGrad<T>,
    pub prior: FeatureMap<T>,
    pub refined: FeatureMap<T>,
}

impl<T: Real> GruGrads<T> {
    pub fn kernels(&self) -> [&KernelGrad<T>; 3] {
        [&self.w_z, &self.w_r, &self.w_h]
    }

    /// Named flat views of every gradient block, in a fixed order.
    pub fn blocks(&self) -> Vec<(&'static str, &[T])> {
        vec![
            ("w_z", &self.w_z.weights),
            ("b_z", &self.w_z.bias),
            ("w_r", &self.w_r.weights),
            ("b_r", &self.w_r.bias),
            ("w_h", &self.w_h.weights),
            ("b_h", &self.w_h.bias),
            ("prior", self.prior.data()),
            ("refined", self.refined.data()),
        ]
    }
}

fn check_trace<T: Real>(trace: &GruTrace<T>, w: &GruWeights<T>, upstream: &FeatureMap<T>) -> Result<()> {
    let shape = upstream.shape();
    let (rows, cols, c) = shape;
    let gates = [
        ("prior", trace.prior.shape()),
        ("refined", trace.refined.shape()),
        ("z", trace.z.shape()),
        ("r", trace.r.shape()),
        ("candidate", trace.candidate.shape()),
    ];
    for (name, s) in gates {
        if s != shape {
            return Err(Error::MissingTrace(format!("{name} is {s:?}, upstream is {shape:?}")));
        }
    }
    for (name, s) in [
        ("gate_input", trace.gate_input.shape()),
        ("candidate_input", trace.candidate_input.shape()),
    ] {
        if s != (rows, cols, 2 * c) {
            return Err(Error::MissingTrace(format!("{name} is {s:?}")));
        }
    }
    if trace.prior_coverage.len() != rows * cols {
        return Err(Error::MissingTrace("prior coverage mask".into()));
    }
    w.validate(c)
}

/// Backpropagates `upstream = ∂L/∂p_t` through one [`gru_update`] step.
pub fn gru_backward<T: Real>(
    trace: &GruTrace<T>,
    w: &GruWeights<T>,
    upstream: &FeatureMap<T>,
) -> Result<GruGrads<T>> {
    check_trace(trace, w, upstream)?;
    let c = upstream.channels();
    let n = upstream.data().len();
    let (p, z, r, h) = (
        trace.prior.data(),
        trace.z.data(),
        trace.r.data(),
        trace.candidate.data(),
    );
    let g = upstream.data();
    let one = T::one();

    let mut d_prior = vec![T::zero(); n];
    let mut dz_pre = upstream.clone();
    let mut dh_pre = upstream.clone();
    for i in 0..n {
        d_prior[i] = g[i] * (one - z[i]);
        dz_pre.data_mut()[i] = g[i] * (h[i] - p[i]) * z[i] * (one - z[i]);
        dh_pre.data_mut()[i] = g[i] * z[i] * (one - h[i] * h[i]);
    }

    let gh = conv2d_backward(&trace.candidate_input, &w.w_h, &dh_pre)?;
    let (d_rp, d_refined_h) = split_channels(&gh.input, c)?;
    let mut dr_pre = upstream.clone();
    for i in 0..n {
        let drp = d_rp.data()[i];
        d_prior[i] += drp * r[i];
        dr_pre.data_mut()[i] = drp * p[i] * r[i] * (one - r[i]);
    }

    let gz = conv2d_backward(&trace.gate_input, &w.w_z, &dz_pre)?;
    let gr = conv2d_backward(&trace.gate_input, &w.w_r, &dr_pre)?;
    let (dp_z, do_z) = split_channels(&gz.input, c)?;
    let (dp_r, do_r) = split_channels(&gr.input, c)?;

    let mut prior = FeatureMap::zeros(upstream.rows(), upstream.cols(), c);
    let mut refined = FeatureMap::zeros(upstream.rows(), upstream.cols(), c);
    for i in 0..n {
        let covered = trace.prior_coverage[i / c];
        prior.data_mut()[i] = if covered {
            d_prior[i] + dp_z.data()[i] + dp_r.data()[i]
        } else {
            T::zero()
        };
        refined.data_mut()[i] = d_refined_h.data()[i] + do_z.data()[i] + do_r.data()[i];
    }
    Ok(GruGrads {
        w_z: KernelGrad {
            weights: gz.weights,
            bias: gz.bias,
        },
        w_r: KernelGrad {
            weights: gr.weights,
            bias: gr.bias,
        },
        w_h: KernelGrad {
            weights: gh.weights,
            bias: gh.bias,
        },
        prior,
        refined,
    })
}

/// Central differences `(f(x + ε e_i) - f(x - ε e_i)) / 2ε` for every coordinate.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], eps: f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let plus = f(&x);
            x[i] = orig - eps;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Denominator floor for [`relative_error`]. Central differences at ε = 1e-3
/// carry an O(ε²) truncation error near 1e-7 absolute, so gradient entries
/// smaller than the floor are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 3e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockError {
    pub block: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub shape: (usize, usize, usize),
    pub eps: f64,
    pub max_rel_err: f64,
    pub blocks: Vec<BlockError>,
}

/// A random GRU instance for gradient checking, in 64-bit.
#[derive(Clone, Debug)]
pub struct GradcheckInstance {
    pub prior: FeatureMap<f64>,
    pub refined: FeatureMap<f64>,
    pub weights: GruWeights<f64>,
    pub upstream: FeatureMap<f64>,
}

impl GradcheckInstance {
    pub fn random(seed: u64, rows: usize, cols: usize, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = |rng: &mut ChaCha8Rng| FeatureMap::from_fn(rows, cols, channels, |_, _, _| rng.random_range(-1.0..1.0));
        let prior = map(&mut rng);
        let refined = map(&mut rng);
        let upstream = map(&mut rng);
        let mut weights = GruWeights::<f64>::init(channels, &mut rng);
        for k in weights.kernels_mut() {
            for b in k.bias_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        Self {
            prior,
            refined,
            weights,
            upstream,
        }
    }

    /// `L = Σ upstream ⊙ p_t`, so `∂L/∂p_t = upstream`.
    pub fn loss(&self, prior: &FeatureMap<f64>, refined: &FeatureMap<f64>, w: &GruWeights<f64>) -> f64 {
        let out = gru_update(prior, refined, w).expect("consistent shapes").output;
        out.data().iter().zip(self.upstream.data()).map(|(a, b)| a * b).sum()
    }
}

fn kernel_with(k: &ConvKernel<f64>, weights: &[f64], bias: &[f64]) -> ConvKernel<f64> {
    ConvKernel::from_parts(k.out_channels(), k.in_channels(), k.size(), weights.to_vec(), bias.to_vec())
        .expect("same shape")
}

/// Compares [`gru_backward`] against [`finite_difference`] on every parameter
/// block of one random instance.
pub fn gru_gradcheck(seed: u64, rows: usize, cols: usize, channels: usize, eps: f64) -> Result<GradcheckReport> {
    let inst = GradcheckInstance::random(seed, rows, cols, channels);
    let trace = gru_update(&inst.prior, &inst.refined, &inst.weights)?;
    let grads = gru_backward(&trace, &inst.weights, &inst.upstream)?;

    let mut blocks = Vec::new();
    let mut record = |name: &str, analytic: &[f64], numeric: Vec<f64>| {
        let max = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        let abs = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a - n).abs())
            .fold(0.0, f64::max);
        blocks.push(BlockError {
            block: name.to_string(),
            max_rel_err: max,
            max_abs_err: abs,
            coords: numeric.len(),
        });
    };

    let w = &inst.weights;
    for (gi, name) in ["z", "r", "h"].iter().enumerate() {
        let kernel = w.kernels()[gi];
        let set = |weights: &[f64], bias: &[f64]| {
            let mut w2 = w.clone();
            *w2.kernels_mut()[gi] = kernel_with(kernel, weights, bias);
            w2
        };
        let fd_w = finite_difference(
            |x| inst.loss(&inst.prior, &inst.refined, &set(x, kernel.bias())),
            kernel.weights(),
            eps,
        );
        record(&format!("w_{name}"), &grads.kernels()[gi].weights, fd_w);
        let fd_b = finite_difference(
            |x| inst.loss(&inst.prior, &inst.refined, &set(kernel.weights(), x)),
            kernel.bias(),
            eps,
        );
        record(&format!("b_{name}"), &grads.kernels()[gi].bias, fd_b);
    }

    let (r, c, ch) = inst.prior.shape();
    let as_map = |x: &[f64]| FeatureMap::from_vec(r, c, ch, x.to_vec()).expect("sized");
    let fd_p = finite_difference(|x| inst.loss(&as_map(x), &inst.refined, w), inst.prior.data(), eps);
    record("prior", grads.prior.data(), fd_p);
    let fd_o = finite_difference(|x| inst.loss(&inst.prior, &as_map(x), w), inst.refined.data(), eps);
    record("refined", grads.refined.data(), fd_o);

    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed,
        shape: (rows, cols, channels),
        eps,
        max_rel_err,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid_scalar;

    #[test]
    fn fd_quadratic_constant_sigmoid() {
        let g = finite_difference(|x| x[0] * x[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() <= 1e-6);
        assert_eq!(finite_difference(|_| 4.2, &[1.0, -2.0], 1e-3), vec![0.0, 0.0]);
        let x = [-1.5, 0.0, 0.3, 2.0];
        let g = finite_difference(|v| v.iter().map(|&t| sigmoid_scalar(t)).sum(), &x, 1e-4);
        for (gi, &xi) in g.iter().zip(&x) {
            let s = sigmoid_scalar(xi);
            assert!((gi - s * (1.0 - s)).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let inst = GradcheckInstance::random(3, 4, 4, 2);
        let trace = gru_update(&inst.prior, &inst.refined, &inst.weights).unwrap();
        let zero = FeatureMap::zeros(4, 4, 2);
        let g = gru_backward(&trace, &inst.weights, &zero).unwrap();
        for (_, block) in g.blocks() {
            assert!(block.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn inconsistent_trace_is_rejected() {
        let inst = GradcheckInstance::random(4, 4, 4, 2);
        let mut trace = gru_update(&inst.prior, &inst.refined, &inst.weights).unwrap();
        trace.z = FeatureMap::zeros(3, 4, 2);
        assert!(matches!(
            gru_backward(&trace, &inst.weights, &inst.upstream),
            Err(Error::MissingTrace(_))
        ));
    }

    // Single cell, one channel: the 3×3 kernels collapse to their centre taps
    // and the whole step can be differentiated by hand.
    #[test]
    fn scalar_case_matches_hand_derivation() {
        let (p, o) = (0.4f64, -0.7f64);
        let (az, bz, cz) = (0.3, -0.2, 0.1); // z = σ(az·p + bz·o + cz)
        let (ar, br, cr) = (-0.5, 0.6, 0.2); // r = σ(ar·p + br·o + cr)
        let (ah, bh, ch) = (0.8, 0.9, -0.1); // h = tanh(ah·r·p + bh·o + ch)
        let centre = |a: f64, b: f64, c: f64| {
            let mut w = vec![0.0; 2 * 9];
            w[4] = a;
            w[9 + 4] = b;
            ConvKernel::from_parts(1, 2, 3, w, vec![c]).unwrap()
        };
        let weights = GruWeights {
            w_z: centre(az, bz, cz),
            w_r: centre(ar, br, cr),
            w_h: centre(ah, bh, ch),
        };
        let prior = FeatureMap::from_vec(1, 1, 1, vec![p]).unwrap();
        let refined = FeatureMap::from_vec(1, 1, 1, vec![o]).unwrap();
        let trace = gru_update(&prior, &refined, &weights).unwrap();
        let g = gru_backward(&trace, &weights, &FeatureMap::filled(1, 1, 1, 1.0)).unwrap();

        let z = sigmoid_scalar(az * p + bz * o + cz);
        let r = sigmoid_scalar(ar * p + br * o + cr);
        let h = (ah * r * p + bh * o + ch).tanh();
        let dz = (h - p) * z * (1.0 - z);
        let dh = z * (1.0 - h * h);
        let dr = dh * ah * p * r * (1.0 - r);
        let d_prior = (1.0 - z) + dz * az + dh * ah * r + dr * ar;
        let d_refined = dz * bz + dh * bh + dr * br;

        let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        close(g.w_z.weights[4], dz * p);
        close(g.w_z.weights[13], dz * o);
        close(g.w_z.bias[0], dz);
        close(g.w_r.weights[4], dr * p);
        close(g.w_r.bias[0], dr);
        close(g.w_h.weights[4], dh * r * p);
        close(g.w_h.weights[13], dh * o);
        close(g.w_h.bias[0], dh);
        close(g.prior.data()[0], d_prior);
        close(g.refined.data()[0], d_refined);
        // off-centre taps only ever see zero padding
        assert_eq!(g.w_z.weights[0], 0.0);
    }

    #[test]
    fn uncovered_prior_has_zero_gradient() {
        let mut inst = GradcheckInstance::random(5, 3, 3, 2);
        inst.prior.coverage_mut()[4] = false;
        let trace = gru_update(&inst.prior, &inst.refined, &inst.weights).unwrap();
        let g = gru_backward(&trace, &inst.weights, &inst.upstream).unwrap();
        assert_eq!(&g.prior.data()[8..10], &[0.0, 0.0]);
    }

    #[test]
    fn random_instance_matches_finite_differences() {
        let report = gru_gradcheck(17, 6, 6, 4, 1e-3).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
        assert_eq!(report.blocks.len(), 8);
    }
}

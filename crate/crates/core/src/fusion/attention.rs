//! Current-to-prior cross-attention over non-overlapping BEV patches.
//!
//! Queries come from the current frame, keys and values from the prior. One
//! attention layer, followed by a fully connected layer, a projection back to
//! patch space and a residual from the raw current features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax_rows, FeatureMap, Matrix};

pub const DEFAULT_PATCH: usize = 10;
pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_HEADS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub patch_size: usize,
    pub heads: usize,
    /// `[patch²·C, d]`
    pub embed_q: Matrix,
    /// `[patch²·C, d]`
    pub embed_kv: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_fc: Matrix,
    pub b_fc: Vec<f32>,
    /// `[d, patch²·C]`
    pub w_out: Matrix,
}

fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = 1.0 / (rows as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl AttentionWeights {
    /// Uniform `±1/√fan_in` initialization for every projection.
    pub fn init(channels: usize, patch_size: usize, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let token = patch_size * patch_size * channels;
        Ok(Self {
            patch_size,
            heads,
            embed_q: uniform(token, dim, rng),
            embed_kv: uniform(token, dim, rng),
            w_q: uniform(dim, dim, rng),
            w_k: uniform(dim, dim, rng),
            w_v: uniform(dim, dim, rng),
            w_fc: uniform(dim, dim, rng),
            b_fc: {
                let bound = 1.0 / (dim as f32).sqrt();
                (0..dim).map(|_| rng.random_range(-bound..bound)).collect()
            },
            w_out: uniform(dim, token, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn token_len(&self) -> usize {
        self.embed_q.rows()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let token = self.patch_size * self.patch_size * channels;
        let d = self.dim();
        let shapes = [
            ("embed_q", &self.embed_q, token, d),
            ("embed_kv", &self.embed_kv, token, d),
            ("w_q", &self.w_q, d, d),
            ("w_k", &self.w_k, d, d),
            ("w_v", &self.w_v, d, d),
            ("w_fc", &self.w_fc, d, d),
            ("w_out", &self.w_out, d, token),
        ];
        for (name, m, r, c) in shapes {
            if (m.rows(), m.cols()) != (r, c) {
                return Err(Error::shape(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if self.b_fc.len() != d {
            return Err(Error::shape("b_fc length differs from d"));
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::config(format!("d = {d} not divisible by {} heads", self.heads)));
        }
        Ok(())
    }
}

/// Learnable grid embeddings added to prior and current features before patching.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbeddings {
    pub prior: FeatureMap,
    pub current: FeatureMap,
}

impl PositionalEmbeddings {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self {
            prior: FeatureMap::zeros(rows, cols, channels),
            current: FeatureMap::zeros(rows, cols, channels),
        }
    }

    pub fn init(rows: usize, cols: usize, channels: usize, scale: f32, rng: &mut impl Rng) -> Self {
        let mut gen = || FeatureMap::from_fn(rows, cols, channels, |_, _, _| rng.random_range(-scale..scale));
        let prior = gen();
        let current = gen();
        Self { prior, current }
    }

    pub fn swapped(&self) -> Self {
        Self {
            prior: self.current.clone(),
            current: self.prior.clone(),
        }
    }
}

/// Attention output plus the per-head attention matrices `[queries × covered keys]`.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub output: FeatureMap,
    pub attention: Vec<Matrix>,
    /// Patch indices (row-major over the patch grid) that supplied keys/values.
    pub key_patches: Vec<usize>,
}

fn patchify(map: &FeatureMap, patch: usize, which: &[usize]) -> Matrix {
    let (_, cols, ch) = map.shape();
    let pc = cols / patch;
    let token = patch * patch * ch;
    let mut m = Matrix::zeros(which.len(), token);
    for (t, &idx) in which.iter().enumerate() {
        let (pr, pcol) = (idx / pc, idx % pc);
        let row = m.row_mut(t);
        for dr in 0..patch {
            for dc in 0..patch {
                let at = (dr * patch + dc) * ch;
                row[at..at + ch].copy_from_slice(map.cell(pr * patch + dr, pcol * patch + dc));
            }
        }
    }
    m
}

fn add_embedding(x: &FeatureMap, pe: &FeatureMap) -> Result<FeatureMap> {
    x.ensure_same_shape(pe, "positional embedding")?;
    let mut out = x.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(pe.data()) {
        *o += e;
    }
    Ok(out)
}

pub fn c2p_attention(
    current: &FeatureMap,
    prior: &FeatureMap,
    pe: &PositionalEmbeddings,
    w: &AttentionWeights,
) -> Result<FeatureMap> {
    c2p_attention_traced(current, prior, pe, w).map(|t| t.output)
}

pub fn c2p_attention_traced(
    current: &FeatureMap,
    prior: &FeatureMap,
    pe: &PositionalEmbeddings,
    w: &AttentionWeights,
) -> Result<AttentionTrace> {
    current.ensure_same_shape(prior, "c2p_attention current/prior")?;
    let (rows, cols, ch) = current.shape();
    let patch = w.patch_size;
    if patch == 0 || rows % patch != 0 || cols % patch != 0 {
        return Err(Error::config(format!(
            "{rows}x{cols} BEV is not divisible into {patch}x{patch} patches"
        )));
    }
    w.validate(ch)?;

    let (pr, pc) = (rows / patch, cols / patch);
    let key_patches: Vec<usize> = (0..pr * pc)
        .filter(|&idx| {
            let (r0, c0) = ((idx / pc) * patch, (idx % pc) * patch);
            (0..patch).any(|dr| (0..patch).any(|dc| prior.is_covered(r0 + dr, c0 + dc)))
        })
        .collect();
    if key_patches.is_empty() {
        return Ok(AttentionTrace {
            output: current.clone(),
            attention: Vec::new(),
            key_patches,
        });
    }

    let cur = add_embedding(current, &pe.current)?;
    let pri = add_embedding(prior, &pe.prior)?;
    let all: Vec<usize> = (0..pr * pc).collect();
    let q_tokens = patchify(&cur, patch, &all);
    let kv_tokens = patchify(&pri, patch, &key_patches);

    let q = matmul(&matmul(&q_tokens, &w.embed_q)?, &w.w_q)?;
    let kv = matmul(&kv_tokens, &w.embed_kv)?;
    let k = matmul(&kv, &w.w_k)?;
    let v = matmul(&kv, &w.w_v)?;

    let d = w.dim();
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut attended = Matrix::zeros(all.len(), d);
    let mut attention = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = q.columns(h * dh, dh);
        let kh = k.columns(h * dh, dh);
        let vh = v.columns(h * dh, dh);
        let a = softmax_rows(&matmul(&qh, &kh.transpose())?, scale);
        let oh = matmul(&a, &vh)?;
        for t in 0..all.len() {
            attended.row_mut(t)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(t));
        }
        attention.push(a);
    }

    let mut fc = matmul(&attended, &w.w_fc)?;
    for t in 0..fc.rows() {
        for (v, &b) in fc.row_mut(t).iter_mut().zip(&w.b_fc) {
            *v += b;
        }
    }
    let delta = matmul(&fc, &w.w_out)?;

    let mut output = current.clone();
    for (t, &idx) in all.iter().enumerate() {
        let (r0, c0) = ((idx / pc) * patch, (idx % pc) * patch);
        let row = delta.row(t);
        for dr in 0..patch {
            for dc in 0..patch {
                let at = (dr * patch + dc) * ch;
                for (o, &dv) in output.cell_mut(r0 + dr, c0 + dc).iter_mut().zip(&row[at..at + ch]) {
                    *o += dv;
                }
            }
        }
    }
    Ok(AttentionTrace {
        output,
        attention,
        key_patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, r: usize, c: usize, ch: usize) -> FeatureMap {
        FeatureMap::from_fn(r, c, ch, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn setup(seed: u64) -> (FeatureMap, FeatureMap, PositionalEmbeddings, AttentionWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cur = random_map(&mut rng, 4, 6, 2);
        let pri = random_map(&mut rng, 4, 6, 2);
        let pe = PositionalEmbeddings::init(4, 6, 2, 0.3, &mut rng);
        let w = AttentionWeights::init(2, 2, 8, 2, &mut rng).unwrap();
        (cur, pri, pe, w)
    }

    #[test]
    fn empty_prior_is_bypassed() {
        let (cur, mut pri, pe, w) = setup(31);
        pri.set_coverage_all(false);
        let out = c2p_attention(&cur, &pri, &pe, &w).unwrap();
        assert_eq!(out, cur);
    }

    #[test]
    fn zero_value_path_leaves_residual() {
        let (cur, pri, pe, mut w) = setup(32);
        w.w_v = Matrix::zeros(8, 8);
        w.w_out = Matrix::zeros(8, 8);
        let out = c2p_attention(&cur, &pri, &pe, &w).unwrap();
        assert_eq!(out.data(), cur.data());
    }

    #[test]
    fn shape_is_preserved_and_rows_normalized() {
        let (cur, mut pri, pe, w) = setup(33);
        // leave only the first patch row partially covered
        for (i, m) in pri.coverage_mut().iter_mut().enumerate() {
            *m = i == 1 || i == 8;
        }
        let t = c2p_attention_traced(&cur, &pri, &pe, &w).unwrap();
        assert_eq!(t.output.shape(), cur.shape());
        assert_eq!(t.key_patches, vec![0, 1]);
        for a in &t.attention {
            assert_eq!((a.rows(), a.cols()), (6, 2));
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn swapping_embeddings_changes_output() {
        let (cur, pri, pe, w) = setup(34);
        let a = c2p_attention(&cur, &pri, &pe, &w).unwrap();
        let b = c2p_attention(&cur, &pri, &pe.swapped(), &w).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-4);
    }

    #[test]
    fn rejects_misconfiguration() {
        let (cur, pri, pe, w) = setup(35);
        assert!(matches!(
            c2p_attention(&cur, &FeatureMap::zeros(4, 4, 2), &pe, &w),
            Err(Error::Shape(_))
        ));
        let mut odd = w.clone();
        odd.patch_size = 3;
        assert!(matches!(c2p_attention(&cur, &pri, &pe, &odd), Err(Error::Config(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionWeights::init(2, 2, 10, 4, &mut rng).is_err());
    }
}

//! Fusion of current BEV features with the local map prior.
//!
//! Three mechanisms: the moving-average baseline, the conv-GRU update and
//! current-to-prior cross-attention (which feeds the GRU in `gru_ca`).

pub mod attention;
pub mod checkpoint;
pub mod gru;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{c2p_attention, c2p_attention_traced, AttentionTrace, AttentionWeights, PositionalEmbeddings};
pub use checkpoint::{Checkpoint, Section};
pub use gru::{gru_update, GruTrace, GruWeights};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::tensor::{ConvKernel, FeatureMap, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Ma,
    Gru,
    GruCa,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Ma, Strategy::Gru, Strategy::GruCa];

    pub fn uses_gru(self) -> bool {
        matches!(self, Strategy::Gru | Strategy::GruCa)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::Ma => "ma",
            Strategy::Gru => "gru",
            Strategy::GruCa => "gru_ca",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "ma" => Ok(Strategy::Ma),
            "gru" => Ok(Strategy::Gru),
            "gru_ca" | "gru-ca" => Ok(Strategy::GruCa),
            other => Err(Error::config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// `α·current + (1-α)·prior`, falling back to `current` where the prior is uncovered.
pub fn ma_update(current: &FeatureMap, prior: &FeatureMap, alpha: f32) -> Result<FeatureMap> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("moving-average alpha {alpha} outside [0, 1]")));
    }
    current.ensure_same_shape(prior, "ma_update")?;
    let ch = current.channels();
    let mut out = current.clone();
    for cell in 0..current.cell_count() {
        if !prior.coverage()[cell] {
            continue;
        }
        let span = cell * ch..(cell + 1) * ch;
        for (o, &p) in out.data_mut()[span.clone()].iter_mut().zip(&prior.data()[span]) {
            *o = alpha * *o + (1.0 - alpha) * p;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            patch_size: attention::DEFAULT_PATCH,
            dim: attention::DEFAULT_DIM,
            heads: attention::DEFAULT_HEADS,
        }
    }
}

/// Positional embeddings are initialized uniformly in `±PE_SCALE`.
pub const PE_SCALE: f32 = 0.05;

/// Every learnable tensor of the fusion stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub gru: GruWeights<f32>,
    pub attention: AttentionWeights,
    pub pe: PositionalEmbeddings,
}

impl FusionWeights {
    /// Seeded initialization. The GRU, attention and embedding draws use
    /// separate streams so changing one shape never perturbs the others.
    pub fn init(spec: &GridSpec, attn: AttentionConfig, seed: u64) -> Result<Self> {
        spec.check_patch(attn.patch_size)?;
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        let gru = GruWeights::init(spec.channels, &mut stream(1));
        let attention = AttentionWeights::init(spec.channels, attn.patch_size, attn.dim, attn.heads, &mut stream(2))?;
        let pe = PositionalEmbeddings::init(spec.bev_rows, spec.bev_cols, spec.channels, PE_SCALE, &mut stream(3));
        Ok(Self { gru, attention, pe })
    }

    pub fn channels(&self) -> usize {
        self.gru.channels()
    }

    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        self.gru.validate(spec.channels)?;
        self.attention.validate(spec.channels)?;
        let want = (spec.bev_rows, spec.bev_cols, spec.channels);
        if self.pe.prior.shape() != want || self.pe.current.shape() != want {
            return Err(Error::shape(format!(
                "positional embeddings {:?}, BEV is {want:?}",
                self.pe.prior.shape()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, k) in [("z", &self.gru.w_z), ("r", &self.gru.w_r), ("h", &self.gru.w_h)] {
            let dims = [k.out_channels(), k.in_channels(), k.size(), k.size()];
            ck.push(Section::new(format!("gru.w_{name}"), &dims, k.weights().to_vec()));
            ck.push(Section::new(format!("gru.b_{name}"), &[k.out_channels()], k.bias().to_vec()));
        }
        let a = &self.attention;
        ck.push(Section::new(
            "attn.config",
            &[2],
            vec![a.patch_size as f32, a.heads as f32],
        ));
        let mats = [
            ("attn.embed_q", &a.embed_q),
            ("attn.embed_kv", &a.embed_kv),
            ("attn.w_q", &a.w_q),
            ("attn.w_k", &a.w_k),
            ("attn.w_v", &a.w_v),
            ("attn.w_fc", &a.w_fc),
            ("attn.w_out", &a.w_out),
        ];
        for (name, m) in mats {
            ck.push(Section::new(name, &[m.rows(), m.cols()], m.data().to_vec()));
        }
        ck.push(Section::new("attn.b_fc", &[a.b_fc.len()], a.b_fc.clone()));
        for (name, pe) in [("pe.prior", &self.pe.prior), ("pe.current", &self.pe.current)] {
            let (r, c, ch) = pe.shape();
            ck.push(Section::new(name, &[r, c, ch], pe.data().to_vec()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, spec: &GridSpec) -> Result<Self> {
        let c = spec.channels;
        let kernel = |name: &str| -> Result<ConvKernel<f32>> {
            let w = ck.tensor(&format!("gru.w_{name}"), &[c, 2 * c, 3, 3])?;
            let b = ck.tensor(&format!("gru.b_{name}"), &[c])?;
            ConvKernel::from_parts(c, 2 * c, 3, w.to_vec(), b.to_vec())
        };
        let gru = GruWeights {
            w_z: kernel("z")?,
            w_r: kernel("r")?,
            w_h: kernel("h")?,
        };
        let cfg = ck.tensor("attn.config", &[2])?;
        let (patch, heads) = (cfg[0] as usize, cfg[1] as usize);
        let mat = |name: &str| -> Result<Matrix> {
            let s = ck.get(name)?;
            if s.dims.len() != 2 {
                return Err(Error::shape(format!("section {name} is not a matrix")));
            }
            Matrix::from_vec(s.dims[0] as usize, s.dims[1] as usize, s.data.clone())
        };
        let attention = AttentionWeights {
            patch_size: patch,
            heads,
            embed_q: mat("attn.embed_q")?,
            embed_kv: mat("attn.embed_kv")?,
            w_q: mat("attn.w_q")?,
            w_k: mat("attn.w_k")?,
            w_v: mat("attn.w_v")?,
            w_fc: mat("attn.w_fc")?,
            b_fc: ck.get("attn.b_fc")?.data.clone(),
            w_out: mat("attn.w_out")?,
        };
        let dims = [spec.bev_rows, spec.bev_cols, c];
        let pe_map = |name: &str| -> Result<FeatureMap> {
            FeatureMap::from_vec(dims[0], dims[1], dims[2], ck.tensor(name, &dims)?.to_vec())
        };
        let weights = Self {
            gru,
            attention,
            pe: PositionalEmbeddings {
                prior: pe_map("pe.prior")?,
                current: pe_map("pe.current")?,
            },
        };
        weights.validate(spec)?;
        Ok(weights)
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Features handed to the decoder.
    pub refined: FeatureMap,
    /// Features written back into the global prior.
    pub new_prior: FeatureMap,
    /// GRU update gate `z_t`, when a GRU ran.
    pub gate: Option<FeatureMap>,
}

pub fn fuse(
    strategy: Strategy,
    current: &FeatureMap,
    prior: &FeatureMap,
    weights: &FusionWeights,
    alpha: f32,
) -> Result<FusionOutput> {
    current.ensure_same_shape(prior, "fuse current/prior")?;
    match strategy {
        Strategy::None => Ok(FusionOutput {
            refined: current.clone(),
            new_prior: current.clone(),
            gate: None,
        }),
        Strategy::Ma => {
            let fused = ma_update(current, prior, alpha)?;
            Ok(FusionOutput {
                refined: fused.clone(),
                new_prior: fused,
                gate: None,
            })
        }
        Strategy::Gru => {
            let trace = gru_update(prior, current, &weights.gru)?;
            Ok(FusionOutput {
                refined: trace.output.clone(),
                new_prior: trace.output,
                gate: Some(trace.z),
            })
        }
        Strategy::GruCa => {
            let attended = c2p_attention(current, prior, &weights.pe, &weights.attention)?;
            let trace = gru_update(prior, &attended, &weights.gru)?;
            Ok(FusionOutput {
                refined: trace.output.clone(),
                new_prior: trace.output,
                gate: Some(trace.z),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GridSpec {
        GridSpec::new(0.3, 4, 6, 2, 8).unwrap()
    }

    fn small_weights() -> FusionWeights {
        let attn = AttentionConfig {
            patch_size: 2,
            dim: 8,
            heads: 2,
        };
        FusionWeights::init(&small_spec(), attn, 9).unwrap()
    }

    #[test]
    fn ma_cases() {
        let cur = FeatureMap::filled(2, 2, 1, 2.0f32);
        let pri = FeatureMap::filled(2, 2, 1, 4.0f32);
        assert_eq!(ma_update(&cur, &pri, 1.0).unwrap(), cur);
        assert_eq!(ma_update(&cur, &pri, 0.0).unwrap().data(), pri.data());
        assert!(ma_update(&cur, &pri, 0.5).unwrap().data().iter().all(|&v| v == 3.0));
        assert!(matches!(ma_update(&cur, &pri, 1.5), Err(Error::Config(_))));

        let mut empty = pri.clone();
        empty.coverage_mut()[0] = false;
        let out = ma_update(&cur, &empty, 0.0).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn fuse_none_and_ma() {
        let w = small_weights();
        let cur = FeatureMap::filled(4, 6, 2, 1.0f32);
        let pri = FeatureMap::filled(4, 6, 2, 3.0f32);
        let none = fuse(Strategy::None, &cur, &pri, &w, 0.5).unwrap();
        assert_eq!(none.refined, cur);
        assert!(none.gate.is_none());
        let ma = fuse(Strategy::Ma, &cur, &pri, &w, 0.5).unwrap();
        assert!(ma.refined.data().iter().all(|&v| v == 2.0));
        assert_eq!(ma.refined, ma.new_prior);
    }

    #[test]
    fn gru_ca_with_empty_prior_equals_gru() {
        let w = small_weights();
        let cur = FeatureMap::from_fn(4, 6, 2, |r, c, k| (r as f32 - c as f32) * 0.1 + k as f32 * 0.05);
        let mut pri = FeatureMap::filled(4, 6, 2, 0.7f32);
        pri.set_coverage_all(false);
        let a = fuse(Strategy::Gru, &cur, &pri, &w, 0.5).unwrap();
        let b = fuse(Strategy::GruCa, &cur, &pri, &w, 0.5).unwrap();
        assert_eq!(a.refined, b.refined);
        assert_eq!(a.gate, b.gate);
    }

    #[test]
    fn checkpoint_round_trip() {
        let w = small_weights();
        let ck = Checkpoint::from_bytes(&w.to_checkpoint().to_bytes()).unwrap();
        assert_eq!(FusionWeights::from_checkpoint(&ck, &small_spec()).unwrap(), w);
        let other = small_spec().with_channels(3);
        assert!(FusionWeights::from_checkpoint(&ck, &other).is_err());
    }

    #[test]
    fn strategy_parsing() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("blend".parse::<Strategy>().is_err());
    }
}

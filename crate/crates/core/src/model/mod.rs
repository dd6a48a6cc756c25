//! Dual-expert transformer with static per-position routing.

pub mod checkpoint;
pub mod engine;
mod forward;
mod params;
mod routing;
pub mod sampler;
mod sequence;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{bind_slots, dump_attention, write_attention_csv, Bound, Encoded, ForwardPass, SlotVars};
pub use params::{Backbone, ExpertParams, LayerParams, ParamSet};
pub use routing::{build_routing, build_routing_from_tags, Modality, RoutingTable};
pub use sequence::{ImageInput, Item, Sequence, SequenceBuilder};

pub const UND: u8 = 0;
pub const GEN: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub d_img: usize,
    /// Width of one image patch token; `d_img / patch_dim` patches per image.
    pub patch_dim: usize,
    pub max_seq_len: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_heads: 2,
            n_layers: 2,
            d_mlp: 64,
            vocab_size: crate::microbench::vocab::Vocab::standard().len(),
            d_img: 64,
            patch_dim: 16,
            max_seq_len: 192,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d", self.d),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("d_img", self.d_img),
            ("patch_dim", self.patch_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.d_img % self.patch_dim != 0 {
            return Err(Error::Config(format!(
                "d_img = {} is not a multiple of patch_dim = {}",
                self.d_img, self.patch_dim
            )));
        }
        if self.d % 2 != 0 {
            return Err(Error::Config("d must be even for the timestep embedding".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.d_img / self.patch_dim
    }

    pub fn d_k(&self) -> usize {
        self.d / self.n_heads
    }
}

/// Sinusoidal embedding of a flow time `t ∈ [0, 1]`, evaluated at `1000·t`.
pub fn timestep_embedding(t: f64, d: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
    }
    let half = d / 2;
    let x = 1000.0 * t;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
        out[i] = (x * freq).sin();
        out[half + i] = (x * freq).cos();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            d: 30,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn timestep_embedding_is_injective_on_grid() {
        let embs: Vec<Vec<f64>> = (0..=50)
            .map(|i| timestep_embedding(i as f64 / 50.0, 32).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let dist: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(dist > 1e-6, "t grid points {i} and {j} collide");
            }
        }
        assert!(timestep_embedding(1.5, 32).is_err());
        assert!(timestep_embedding(-0.1, 32).is_err());
    }
}

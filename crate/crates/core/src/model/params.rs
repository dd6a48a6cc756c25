use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::checkpoint::{self, Container};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// One expert's transformer stack.
#[derive(Clone, Debug)]
pub struct ExpertParams<T> {
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
}

/// Every backbone parameter; `T` is a tensor or a tape handle.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub patch_emb: T,
    pub patch_pos: T,
    /// Projects a raw identity descriptor to a token embedding; used to
    /// build hard concept prompts while pretraining.
    pub id_proj: T,
    /// `experts[0]` understands, `experts[1]` generates.
    pub experts: [ExpertParams<T>; 2],
    pub flow_w: T,
    pub flow_b: T,
}

const LAYER_FIELDS: [&str; 12] = [
    "ln1.gain", "ln1.bias", "wq", "wk", "wv", "wo", "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2",
    "mlp.b2",
];

impl<T> ParamSet<T> {
    pub fn names(n_layers: usize) -> Vec<String> {
        let mut names: Vec<String> = ["embed.tok", "embed.pos", "embed.patch", "embed.patch_pos", "embed.id_proj"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for expert in ["und", "gen"] {
            for l in 0..n_layers {
                for f in LAYER_FIELDS {
                    names.push(format!("{expert}.layer{l}.{f}"));
                }
            }
            names.push(format!("{expert}.final_ln.gain"));
            names.push(format!("{expert}.final_ln.bias"));
        }
        names.push("flow.w".into());
        names.push("flow.b".into());
        names
    }

    pub fn to_vec(&self) -> Vec<&T> {
        let mut v = vec![&self.tok_emb, &self.pos_emb, &self.patch_emb, &self.patch_pos, &self.id_proj];
        for e in &self.experts {
            for l in &e.layers {
                v.extend([
                    &l.ln1_gain, &l.ln1_bias, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_gain, &l.ln2_bias, &l.w1, &l.b1,
                    &l.w2, &l.b2,
                ]);
            }
            v.push(&e.lnf_gain);
            v.push(&e.lnf_bias);
        }
        v.push(&self.flow_w);
        v.push(&self.flow_b);
        v
    }

    pub fn to_vec_mut(&mut self) -> Vec<&mut T> {
        let mut v = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.patch_emb,
            &mut self.patch_pos,
            &mut self.id_proj,
        ];
        for e in &mut self.experts {
            for l in &mut e.layers {
                v.extend([
                    &mut l.ln1_gain,
                    &mut l.ln1_bias,
                    &mut l.wq,
                    &mut l.wk,
                    &mut l.wv,
                    &mut l.wo,
                    &mut l.ln2_gain,
                    &mut l.ln2_bias,
                    &mut l.w1,
                    &mut l.b1,
                    &mut l.w2,
                    &mut l.b2,
                ]);
            }
            v.push(&mut e.lnf_gain);
            v.push(&mut e.lnf_bias);
        }
        v.push(&mut self.flow_w);
        v.push(&mut self.flow_b);
        v
    }

    /// Inverse of [`to_vec`](Self::to_vec).
    pub fn from_vec(n_layers: usize, items: Vec<T>) -> Result<Self> {
        let expected = 5 + 2 * (12 * n_layers + 2) + 2;
        if items.len() != expected {
            return Err(Error::Shape(format!("{} parameters, expected {expected}", items.len())));
        }
        let mut it = items.into_iter();
        let mut next = || it.next().expect("length checked");
        let (tok_emb, pos_emb, patch_emb, patch_pos, id_proj) = (next(), next(), next(), next(), next());
        let mut expert = || {
            let layers = (0..n_layers)
                .map(|_| LayerParams {
                    ln1_gain: next(),
                    ln1_bias: next(),
                    wq: next(),
                    wk: next(),
                    wv: next(),
                    wo: next(),
                    ln2_gain: next(),
                    ln2_bias: next(),
                    w1: next(),
                    b1: next(),
                    w2: next(),
                    b2: next(),
                })
                .collect();
            ExpertParams {
                layers,
                lnf_gain: next(),
                lnf_bias: next(),
            }
        };
        let und = expert();
        let gen = expert();
        Ok(Self {
            tok_emb,
            pos_emb,
            patch_emb,
            patch_pos,
            id_proj,
            experts: [und, gen],
            flow_w: next(),
            flow_b: next(),
        })
    }

    pub fn map<U>(&self, n_layers: usize, f: impl FnMut(&T) -> U) -> ParamSet<U> {
        ParamSet::from_vec(n_layers, self.to_vec().into_iter().map(f).collect()).expect("same layout")
    }
}

/// Shapes of every parameter in [`ParamSet::names`] order.
pub fn shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let (d, m) = (cfg.d, cfg.d_mlp);
    let mut s = vec![
        vec![cfg.vocab_size, d],
        vec![cfg.max_seq_len, d],
        vec![cfg.patch_dim, d],
        vec![cfg.n_patches(), d],
        vec![cfg.patch_dim, d],
    ];
    for _ in 0..2 {
        for _ in 0..cfg.n_layers {
            s.extend([
                vec![d],
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d, m],
                vec![m],
                vec![m, d],
                vec![d],
            ]);
        }
        s.push(vec![d]);
        s.push(vec![d]);
    }
    s.push(vec![d, cfg.patch_dim]);
    s.push(vec![cfg.patch_dim]);
    s
}

/// The frozen backbone: embeddings, both experts and the two output heads.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: ModelConfig,
    pub params: ParamSet<Tensor>,
}

impl Backbone {
    /// Random initialization; the experts draw from independent streams.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let names = ParamSet::<Tensor>::names(config.n_layers);
        let d = config.d as f64;
        let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let tensors = names
            .iter()
            .zip(shapes(&config))
            .map(|(name, shape)| {
                let fan_in = shape[0] as f64;
                if name.ends_with(".gain") {
                    Tensor::filled(&shape, 1.0)
                } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "flow.b" {
                    Tensor::zeros(&shape)
                } else if name.starts_with("embed.") {
                    Tensor::randn(&shape, 1.0 / d.sqrt(), rng)
                } else if name.ends_with(".wo") || name.ends_with(".w2") {
                    Tensor::randn(&shape, residual / fan_in.sqrt(), rng)
                } else if name == "flow.w" {
                    Tensor::randn(&shape, 0.1 / fan_in.sqrt(), rng)
                } else {
                    Tensor::randn(&shape, 1.0 / fan_in.sqrt(), rng)
                }
            })
            .collect();
        Ok(Self {
            params: ParamSet::from_vec(config.n_layers, tensors)?,
            config,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        ParamSet::<Tensor>::names(self.config.n_layers)
            .into_iter()
            .zip(self.params.to_vec())
            .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.to_vec().iter().map(|t| t.len()).sum()
    }

    /// Round every parameter to the stored precision so saving is lossless.
    pub fn round_to_f32(&mut self) {
        for t in self.params.to_vec_mut() {
            *t = t.round_to_f32();
        }
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for s in t.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_container(&self, mut meta: BTreeMap<String, serde_json::Value>) -> Container {
        meta.insert("kind".into(), "backbone".into());
        meta.insert(
            "model".into(),
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        Container {
            meta,
            entries: self.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg_value = c
            .meta
            .get("model")
            .ok_or_else(|| Error::Format("backbone manifest has no model config".into()))?;
        let config: ModelConfig = serde_json::from_value(cfg_value.clone())?;
        config.validate()?;
        let names = ParamSet::<Tensor>::names(config.n_layers);
        let expected = shapes(&config);
        let mut tensors = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(expected) {
            let t = c
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: stored {:?}, expected {shape:?}", t.shape())));
            }
            tensors.push(t.clone());
        }
        Ok(Self {
            params: ParamSet::from_vec(config.n_layers, tensors)?,
            config,
        })
    }

    pub fn save(&self, path: &Path, meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
        checkpoint::write(path, &self.to_container(meta))
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, serde_json::Value>)> {
        let c = checkpoint::read(path)?;
        Ok((Self::from_container(&c)?, c.meta))
    }
}

//! Codebooks, the procedural renderer and the edit rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VERBS: [&str; 4] = ["generate", "draw", "show", "create"];
pub const ATTRIBUTE_KINDS: [&str; 3] = ["toy", "home", "snack"];
pub const ATTRIBUTE_VALUES: [[&str; 5]; 3] = [
    ["excavator", "ball", "robot", "kite", "drum"],
    ["seaside", "farm", "castle", "cabin", "tower"],
    ["cookie", "apple", "cheese", "carrot", "candy"],
];
pub const CLASSES: &[(&str, &[&str])] = &[
    ("person", &["man", "woman", "boy", "girl"]),
    ("pet", &["dog", "cat"]),
    ("object", &["mug", "bag", "plush"]),
];
pub const CONTEXTS: [&str; 6] = ["beach", "park", "room", "street", "snow", "garden"];
pub const DEFAULT_CONTEXT: &str = "room";

pub const BLOCK: usize = 16;
pub const N_BLOCKS: usize = 4;
pub const D_IMG: usize = BLOCK * N_BLOCKS;
pub const IDENTITY: usize = 0;
pub const ATTRIBUTE: usize = 1;
pub const CONTEXT: usize = 2;
pub const STYLE: usize = 3;

/// Signed orthonormal frame: at most this many distinct identities.
pub const MAX_IDENTITIES: usize = 2 * BLOCK;

/// Per-block noise norm of a render; each coordinate gets `NOISE / √BLOCK`.
pub const NOISE: f64 = 0.05;

pub fn block(latent: &[f64], b: usize) -> &[f64] {
    &latent[b * BLOCK..(b + 1) * BLOCK]
}

pub fn block_mut(latent: &mut [f64], b: usize) -> &mut [f64] {
    &mut latent[b * BLOCK..(b + 1) * BLOCK]
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn kind_index(kind: &str) -> Result<usize> {
    ATTRIBUTE_KINDS
        .iter()
        .position(|k| *k == kind)
        .ok_or_else(|| Error::Index(format!("unknown attribute kind {kind:?}")))
}

pub fn value_index(kind: usize, value: &str) -> Result<usize> {
    ATTRIBUTE_VALUES[kind]
        .iter()
        .position(|v| *v == value)
        .ok_or_else(|| Error::Index(format!("{value:?} is not a {} value", ATTRIBUTE_KINDS[kind])))
}

pub fn context_index(ctx: &str) -> Result<usize> {
    CONTEXTS
        .iter()
        .position(|c| *c == ctx)
        .ok_or_else(|| Error::Index(format!("unknown context {ctx:?}")))
}

/// Random orthogonal `n × n` matrix (columns orthonormal) by Gram-Schmidt.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= p * ci;
            }
        }
        let nv = norm(&v);
        if nv > 1e-6 {
            cols.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    cols
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let nv = norm(&v);
        if nv > 1e-6 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

/// Fixed random codes shared by every benchmark and the backbone.
#[derive(Clone, Debug)]
pub struct World {
    pub codebook_seed: u64,
    identity: Vec<Vec<f64>>,
    attribute: Vec<Vec<f64>>,
    context: Vec<Vec<f64>>,
    style_base: Vec<f64>,
    style_map: Vec<Vec<f64>>,
}

impl World {
    pub fn new(codebook_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(codebook_seed);
        let identity = random_orthogonal(BLOCK, &mut rng);
        let attribute = random_orthogonal(BLOCK, &mut rng);
        let context = random_orthogonal(BLOCK, &mut rng);
        let style_base = unit(&mut rng, BLOCK);
        let style_map = random_orthogonal(BLOCK, &mut rng);
        Self {
            codebook_seed,
            identity,
            attribute,
            context,
            style_base,
            style_map,
        }
    }

    /// Identity code `k`: `±` column `k mod 16` of a random orthogonal frame.
    pub fn identity_code(&self, k: usize) -> Result<Vec<f64>> {
        if k >= MAX_IDENTITIES {
            return Err(Error::Index(format!("identity {k} ≥ {MAX_IDENTITIES}")));
        }
        let sign = if k < BLOCK { 1.0 } else { -1.0 };
        Ok(self.identity[k % BLOCK].iter().map(|x| sign * x).collect())
    }

    pub fn attribute_code(&self, kind: usize, value: usize) -> &[f64] {
        &self.attribute[kind * ATTRIBUTE_VALUES[0].len() + value]
    }

    pub fn context_code(&self, ctx: usize) -> &[f64] {
        &self.context[ctx]
    }

    pub fn style_base(&self) -> &[f64] {
        &self.style_base
    }

    /// The sketch transform applied to a style block.
    pub fn apply_style(&self, x: &[f64]) -> Vec<f64> {
        // style_map columns are orthonormal, so this is an orthogonal map
        let mut out = vec![0.0; BLOCK];
        for (c, xc) in self.style_map.iter().zip(x) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += ci * xc;
            }
        }
        out
    }

    /// Normalized sum of the listed `(kind, value)` codes; zero if empty.
    pub fn attribute_block(&self, shown: &[(usize, usize)]) -> Vec<f64> {
        let mut s = vec![0.0; BLOCK];
        for &(k, v) in shown {
            for (si, ci) in s.iter_mut().zip(self.attribute_code(k, v)) {
                *si += ci;
            }
        }
        let n = norm(&s);
        if n > 0.0 {
            s.iter_mut().for_each(|x| *x /= n);
        }
        s
    }

    /// Noise-free latent for an identity vector and a scene.
    pub fn compose(&self, identity: Option<&[f64]>, shown: &[(usize, usize)], context: usize) -> Vec<f64> {
        let mut z = vec![0.0; D_IMG];
        if let Some(id) = identity {
            block_mut(&mut z, IDENTITY).copy_from_slice(id);
        }
        block_mut(&mut z, ATTRIBUTE).copy_from_slice(&self.attribute_block(shown));
        block_mut(&mut z, CONTEXT).copy_from_slice(self.context_code(context));
        block_mut(&mut z, STYLE).copy_from_slice(&self.style_base);
        z
    }

    /// Add seeded render noise to a clean latent.
    pub fn add_noise(&self, clean: &mut [f64], rng: &mut impl Rng) {
        let std = NOISE / (BLOCK as f64).sqrt();
        for v in clean.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += std * e;
        }
    }
}

/// Which attributes a render makes visible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    All,
    Hidden,
    Only(String),
}

/// Scene description for one render.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub context: String,
    pub visibility: Visibility,
}

impl Descriptor {
    pub fn new(context: &str, visibility: Visibility) -> Self {
        Self {
            context: context.to_string(),
            visibility,
        }
    }
}

impl Default for Descriptor {
    fn default() -> Self {
        Self::new(DEFAULT_CONTEXT, Visibility::All)
    }
}

pub fn noise_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15)
}

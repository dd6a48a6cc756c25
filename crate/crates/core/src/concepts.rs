//! Per-concept token rows, the system-prompt template and persistence.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microbench::vocab::Vocab;
use crate::model::checkpoint::{self, Container};
use crate::model::{Backbone, Item, Sequence, SequenceBuilder};
use crate::numcore::Tensor;

/// A personal concept as the benchmark describes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub identifier: String,
    pub category: String,
    pub class: String,
    /// attribute kind → value word
    pub attributes: BTreeMap<String, String>,
    /// Index of the identity code in the world codebook.
    pub identity: usize,
    /// Names of the reference latents in the benchmark's latent container.
    pub references: Vec<String>,
}

impl ConceptSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identifier.is_empty() {
            return Err(Error::Config("concept identifier is empty".into()));
        }
        if self.references.is_empty() {
            return Err(Error::Config(format!("concept {} has no reference latents", self.identifier)));
        }
        Ok(())
    }
}

/// Learnable rows of one concept. `und` row 0 is the identifier embedding.
#[derive(Clone, Debug)]
pub struct ConceptTokens {
    pub und: Tensor,
    pub gen: Tensor,
}

impl ConceptTokens {
    /// Zero rows: `N_u + 1` understanding rows and `N_g` generation rows.
    pub fn allocate(n_und: usize, n_gen: usize, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Shape("concept width must be positive".into()));
        }
        Ok(Self {
            und: Tensor::zeros(&[n_und + 1, d]),
            gen: Tensor::zeros(&[n_gen, d]),
        })
    }

    /// Small Gaussian rows instead of zeros (ablation only).
    pub fn allocate_random<R: Rng + ?Sized>(n_und: usize, n_gen: usize, d: usize, std: f64, rng: &mut R) -> Result<Self> {
        if d == 0 {
            return Err(Error::Shape("concept width must be positive".into()));
        }
        Ok(Self {
            und: Tensor::randn(&[n_und + 1, d], std, rng),
            gen: Tensor::randn(&[n_gen, d], std, rng),
        })
    }

    pub fn n_und(&self) -> usize {
        self.und.rows() - 1
    }

    pub fn n_gen(&self) -> usize {
        self.gen.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.und.cols()
    }

    pub fn trainable_rows(&self) -> usize {
        self.und.rows() + self.n_gen()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.und.len() + self.gen.len()
    }

    pub fn bit_eq(&self, other: &ConceptTokens) -> bool {
        self.und.bit_eq(&other.und) && self.gen.bit_eq(&other.gen)
    }

    pub fn round_to_f32(&mut self) {
        self.und = self.und.round_to_f32();
        self.gen = self.gen.round_to_f32();
    }

    pub fn to_container(&self, identifier: &str) -> Container {
        let mut c = Container::default();
        c.meta.insert("kind".into(), "concept".into());
        c.meta.insert("identifier".into(), identifier.into());
        c.meta.insert("n_und".into(), self.n_und().into());
        c.meta.insert("n_gen".into(), self.n_gen().into());
        c.meta.insert("d".into(), self.d().into());
        c.push("concept.und", self.und.clone());
        c.push("concept.gen", self.gen.clone());
        c
    }

    pub fn from_container(c: &Container, expected_d: usize) -> Result<Self> {
        let und = c
            .get("concept.und")
            .ok_or_else(|| Error::Format("missing concept.und".into()))?
            .clone();
        let gen = c
            .get("concept.gen")
            .ok_or_else(|| Error::Format("missing concept.gen".into()))?
            .clone();
        if und.shape().len() != 2 || gen.shape().len() != 2 || und.rows() == 0 {
            return Err(Error::Shape("concept rows must be non-empty matrices".into()));
        }
        if und.cols() != expected_d || gen.shape()[1] != expected_d {
            return Err(Error::Shape(format!(
                "concept width {} does not match model width {expected_d}",
                und.cols()
            )));
        }
        let t = Self { und, gen };
        let meta_n = |k: &str| c.meta.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        if meta_n("n_und") != Some(t.n_und()) || meta_n("n_gen") != Some(t.n_gen()) || meta_n("d") != Some(expected_d)
        {
            return Err(Error::Format("concept manifest disagrees with stored arrays".into()));
        }
        Ok(t)
    }
}

pub fn save_concept(path: &Path, identifier: &str, tokens: &ConceptTokens) -> Result<()> {
    checkpoint::write(path, &tokens.to_container(identifier))
}

pub fn load_concept(path: &Path, expected_d: usize) -> Result<ConceptTokens> {
    ConceptTokens::from_container(&checkpoint::read(path)?, expected_d)
}

/// `<sks> is <und_1> … <und_Nu> <gen_1> … <gen_Ng> .`
pub fn render_system_prompt(tokens: &ConceptTokens) -> Result<Sequence> {
    system_prompt(tokens.n_und(), tokens.n_gen())
}

pub fn system_prompt(n_und: usize, n_gen: usize) -> Result<Sequence> {
    let v = Vocab::standard();
    let mut b = SequenceBuilder::unpositioned();
    b.sks().token(v.id("is")?);
    for i in 0..n_und {
        b.und_slot(i);
    }
    for j in 0..n_gen {
        b.gen_slot(j);
    }
    b.token(v.id(".")?);
    Ok(b.build())
}

/// Recover `(N_u, N_g)` from a rendered system prompt.
pub fn parse_system_prompt(seq: &Sequence) -> Result<(usize, usize)> {
    let v = Vocab::standard();
    let items = &seq.items;
    let ok_head = items.len() >= 3 && items[0] == Item::Sks && items[1] == Item::Token(v.id("is")?);
    let ok_tail = items.last() == Some(&Item::Token(v.id(".")?));
    if !ok_head || !ok_tail {
        return Err(Error::Contract("not a concept system prompt".into()));
    }
    let body = &items[2..items.len() - 1];
    let n_und = body.iter().take_while(|i| matches!(i, Item::Und(_))).count();
    let n_gen = body.len() - n_und;
    for (k, item) in body.iter().enumerate() {
        let expected = if k < n_und { Item::Und(k) } else { Item::Gen(k - n_und) };
        if *item != expected {
            return Err(Error::Contract(format!("unexpected slot {item:?} at {k}")));
        }
    }
    Ok((n_und, n_gen))
}

/// Which scalars may change during personalization.
#[derive(Clone, Debug)]
pub struct TrainableMask {
    pub entries: Vec<(String, usize, bool)>,
}

impl TrainableMask {
    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.2).map(|e| e.1).sum()
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.entries.iter().find(|e| e.0 == name).map(|e| e.2)
    }
}

pub fn trainable_mask(backbone: &Backbone, tokens: &ConceptTokens) -> TrainableMask {
    let mut entries: Vec<(String, usize, bool)> = backbone
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.len(), false))
        .collect();
    entries.push(("concept.und".into(), tokens.und.len(), true));
    entries.push(("concept.gen".into(), tokens.gen.len(), true));
    TrainableMask { entries }
}

/// Concepts keyed by identifier; each keeps its own disjoint token block.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    concepts: BTreeMap<String, (ConceptSpec, ConceptTokens)>,
}

impl Registry {
    pub fn insert(&mut self, spec: ConceptSpec, tokens: ConceptTokens) -> Result<()> {
        spec.validate()?;
        if self.concepts.contains_key(&spec.identifier) {
            return Err(Error::Config(format!("duplicate concept identifier {}", spec.identifier)));
        }
        self.concepts.insert(spec.identifier.clone(), (spec, tokens));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&(ConceptSpec, ConceptTokens)> {
        self.concepts.get(id)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Modality, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn allocation_shapes_and_zero_init() {
        let t = ConceptTokens::allocate(16, 16, 32).unwrap();
        assert_eq!(t.trainable_rows(), 33);
        assert_eq!(t.und.sum() + t.gen.sum(), 0.0);
        let t = ConceptTokens::allocate(0, 0, 32).unwrap();
        assert_eq!(t.trainable_rows(), 1);
        assert!(ConceptTokens::allocate(1, 1, 0).is_err());
    }

    #[test]
    fn system_prompt_template() {
        let t = ConceptTokens::allocate(2, 2, 8).unwrap();
        let s = render_system_prompt(&t).unwrap();
        use Modality::*;
        assert_eq!(s.tags(), vec![UndToken, Text, UndToken, UndToken, GenToken, GenToken, Text]);
        let s = system_prompt(0, 1).unwrap();
        let v = Vocab::standard();
        assert_eq!(
            s.items,
            vec![Item::Sks, Item::Token(v.id("is").unwrap()), Item::Gen(0), Item::Token(v.id(".").unwrap())]
        );
        for (u, g) in [(0, 0), (3, 0), (0, 4), (16, 16)] {
            assert_eq!(parse_system_prompt(&system_prompt(u, g).unwrap()).unwrap(), (u, g));
        }
    }

    #[test]
    fn mask_counts() {
        let cfg = ModelConfig {
            d: 32,
            ..ModelConfig::default()
        };
        let b = Backbone::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let t = ConceptTokens::allocate(16, 16, 32).unwrap();
        let m = trainable_mask(&b, &t);
        assert_eq!(m.trainable_scalars(), 33 * 32);
        assert_eq!(m.is_trainable("und.layer0.wq"), Some(false));
        assert_eq!(m.is_trainable("concept.und"), Some(true));
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = ConceptTokens::allocate_random(3, 2, 8, 0.5, &mut rng).unwrap();
        t.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_concept(&p, "c0", &t).unwrap();
        assert!(load_concept(&p, 8).unwrap().bit_eq(&t));
        assert!(matches!(load_concept(&p, 16), Err(Error::Shape(_))));
        let c = checkpoint::read(&p).unwrap();
        assert_eq!(c.meta["n_und"], 3);
        assert_eq!(c.meta["n_gen"], 2);
        assert_eq!(c.meta["d"], 8);
    }
}

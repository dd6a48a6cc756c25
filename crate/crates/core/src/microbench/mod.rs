//! Procedural micro world: concepts, renders, edits and task sets.

pub mod grammar;
pub mod vocab;
pub mod world;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concepts::ConceptSpec;
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, Container};
use crate::numcore::Tensor;
use world::*;

pub use world::{Descriptor, Visibility, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicroWorldConfig {
    pub n_concepts: usize,
    /// person / pet / object counts; derived from `n_concepts` when absent.
    pub split: Option<[usize; 3]>,
    pub seed: u64,
    /// Seed of the shared codebooks; the backbone must be pretrained with
    /// the same value.
    pub codebook_seed: u64,
    pub train_references: usize,
    pub recognition_per_class: usize,
    pub vqa_items: usize,
    pub qa_items: usize,
    pub train_edits: usize,
    /// Eval edits per concept; must be a multiple of the five categories.
    pub eval_edits: usize,
}

impl Default for MicroWorldConfig {
    fn default() -> Self {
        Self {
            n_concepts: 20,
            split: None,
            seed: 0,
            codebook_seed: 1234,
            train_references: 10,
            recognition_per_class: 10,
            vqa_items: 10,
            qa_items: 10,
            train_edits: 10,
            eval_edits: 5,
        }
    }
}

impl MicroWorldConfig {
    pub fn effective_split(&self) -> [usize; 3] {
        self.split.unwrap_or_else(|| {
            let n = self.n_concepts;
            let person = n.div_ceil(2);
            let pet = (n - person).div_ceil(2);
            [person, pet, n - person - pet]
        })
    }

    pub fn validate(&self) -> Result<()> {
        let split = self.effective_split();
        if split.iter().sum::<usize>() != self.n_concepts {
            return Err(Error::Config(format!(
                "category split {split:?} does not sum to {} concepts",
                self.n_concepts
            )));
        }
        if self.n_concepts == 0 {
            return Err(Error::Config("at least one concept is required".into()));
        }
        // negatives and pretraining distractors need spare identities
        if self.n_concepts + 4 > MAX_IDENTITIES {
            return Err(Error::Config(format!(
                "at most {} concepts fit the identity codebook",
                MAX_IDENTITIES - 4
            )));
        }
        if self.train_references == 0 {
            return Err(Error::Config("train_references must be positive".into()));
        }
        if self.eval_edits % EditCategory::ALL.len() != 0 {
            return Err(Error::Config("eval_edits must be a multiple of 5".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditCategory {
    ObjectManipulation,
    AttributeModification,
    SpatialTransformation,
    EnvironmentInteraction,
    StyleAppearance,
}

impl EditCategory {
    pub const ALL: [EditCategory; 5] = [
        EditCategory::ObjectManipulation,
        EditCategory::AttributeModification,
        EditCategory::SpatialTransformation,
        EditCategory::EnvironmentInteraction,
        EditCategory::StyleAppearance,
    ];

    /// Blocks this category is allowed to change.
    pub fn blocks(self) -> &'static [usize] {
        match self {
            EditCategory::ObjectManipulation => &[IDENTITY],
            EditCategory::AttributeModification => &[ATTRIBUTE],
            EditCategory::SpatialTransformation | EditCategory::EnvironmentInteraction => &[CONTEXT],
            EditCategory::StyleAppearance => &[STYLE],
        }
    }
}

/// Parameters of one concrete edit, enough to re-derive the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditDetail {
    Remove,
    Swap { kind: String, from: String, to: String },
    Flip,
    Move { to: String },
    Sketch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditTriplet {
    pub source: Vec<f64>,
    pub instruction: String,
    pub target: Vec<f64>,
    pub category: EditCategory,
    pub detail: EditDetail,
}

fn rounded(mut v: Vec<f64>) -> Vec<f64> {
    for x in &mut v {
        *x = *x as f32 as f64;
    }
    v
}

/// Noisy latent of `concept` in the scene `desc`.
pub fn render_image(world: &World, concept: &ConceptSpec, desc: &Descriptor, seed: u64) -> Result<Vec<f64>> {
    let ctx = context_index(&desc.context)?;
    let shown = visible_attributes(concept, &desc.visibility)?;
    let id = world.identity_code(concept.identity)?;
    let mut z = world.compose(Some(&id), &shown, ctx);
    world.add_noise(&mut z, &mut noise_rng(seed));
    Ok(rounded(z))
}

/// Latent of a scene without the concept's identity: `identity` is any
/// other code index (or none for an empty scene).
pub fn render_other(world: &World, identity: Option<usize>, context: usize, seed: u64) -> Result<Vec<f64>> {
    let id = identity.map(|k| world.identity_code(k)).transpose()?;
    let mut z = world.compose(id.as_deref(), &[], context);
    world.add_noise(&mut z, &mut noise_rng(seed));
    Ok(rounded(z))
}

pub fn attribute_pairs(concept: &ConceptSpec) -> Result<Vec<(usize, usize)>> {
    concept
        .attributes
        .iter()
        .map(|(k, v)| {
            let ki = kind_index(k)?;
            Ok((ki, value_index(ki, v)?))
        })
        .collect()
}

fn visible_attributes(concept: &ConceptSpec, vis: &Visibility) -> Result<Vec<(usize, usize)>> {
    let all = attribute_pairs(concept)?;
    Ok(match vis {
        Visibility::All => all,
        Visibility::Hidden => Vec::new(),
        Visibility::Only(kind) => {
            let k = kind_index(kind)?;
            let found: Vec<_> = all.into_iter().filter(|(ki, _)| *ki == k).collect();
            if found.is_empty() {
                return Err(Error::Index(format!("{} has no {kind}", concept.identifier)));
            }
            found
        }
    })
}

/// Apply an edit rule to a (noisy) source latent.
pub fn apply_edit(world: &World, concept: &ConceptSpec, source: &[f64], detail: &EditDetail) -> Result<Vec<f64>> {
    let mut t = source.to_vec();
    match detail {
        EditDetail::Remove => block_mut(&mut t, IDENTITY).fill(0.0),
        EditDetail::Swap { kind, to, .. } => {
            let k = kind_index(kind)?;
            let v = value_index(k, to)?;
            let shown: Vec<_> = attribute_pairs(concept)?
                .into_iter()
                .map(|(ki, vi)| if ki == k { (ki, v) } else { (ki, vi) })
                .collect();
            block_mut(&mut t, ATTRIBUTE).copy_from_slice(&world.attribute_block(&shown));
        }
        EditDetail::Flip => block_mut(&mut t, CONTEXT).reverse(),
        EditDetail::Move { to } => {
            let c = context_index(to)?;
            block_mut(&mut t, CONTEXT).copy_from_slice(world.context_code(c));
        }
        EditDetail::Sketch => {
            let s = world.apply_style(block(source, STYLE));
            block_mut(&mut t, STYLE).copy_from_slice(&s);
        }
    }
    Ok(rounded(t))
}

pub fn edit_instruction(concept: &ConceptSpec, detail: &EditDetail) -> String {
    match detail {
        EditDetail::Remove => grammar::removal_instruction(&concept.class),
        EditDetail::Swap { kind, to, .. } => grammar::attribute_instruction(kind, to),
        EditDetail::Flip => grammar::spatial_instruction(),
        EditDetail::Move { to } => grammar::environment_instruction(to),
        EditDetail::Sketch => grammar::style_instruction(),
    }
}

pub fn make_edit_triplet(world: &World, concept: &ConceptSpec, category: EditCategory, seed: u64) -> Result<EditTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = *CONTEXTS.choose(&mut rng).expect("non-empty");
    let source = render_image(world, concept, &Descriptor::new(ctx, Visibility::All), rng.random())?;
    let detail = match category {
        EditCategory::ObjectManipulation => EditDetail::Remove,
        EditCategory::AttributeModification => {
            let (kind, from) = concept
                .attributes
                .iter()
                .nth(rng.random_range(0..concept.attributes.len()))
                .ok_or_else(|| Error::Contract("concept has no attributes".into()))?;
            let k = kind_index(kind)?;
            let choices: Vec<&str> = ATTRIBUTE_VALUES[k].iter().copied().filter(|v| v != from).collect();
            EditDetail::Swap {
                kind: kind.clone(),
                from: from.clone(),
                to: choices.choose(&mut rng).expect("non-empty").to_string(),
            }
        }
        EditCategory::SpatialTransformation => EditDetail::Flip,
        EditCategory::EnvironmentInteraction => {
            let choices: Vec<&str> = CONTEXTS.iter().copied().filter(|c| *c != ctx).collect();
            EditDetail::Move {
                to: choices.choose(&mut rng).expect("non-empty").to_string(),
            }
        }
        EditCategory::StyleAppearance => EditDetail::Sketch,
    };
    let target = apply_edit(world, concept, &source, &detail)?;
    Ok(EditTriplet {
        instruction: edit_instruction(concept, &detail),
        source,
        target,
        category,
        detail,
    })
}

/// `clamp01(cos(attribute block, code of the true value))`.
pub fn parg_oracle(world: &World, latent: &[f64], concept: &ConceptSpec, kind: &str) -> Result<f64> {
    let value = concept
        .attributes
        .get(kind)
        .ok_or_else(|| Error::Index(format!("{} has no attribute {kind:?}", concept.identifier)))?;
    let k = kind_index(kind)?;
    let code = world.attribute_code(k, value_index(k, value)?);
    Ok(cosine(block(latent, ATTRIBUTE), code).unwrap_or(0.0).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextTask {
    Qa,
    Vqa,
    Recognition,
}

/// Question/answer item; `image` names a latent for visual tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextItem {
    pub task: TextTask,
    pub image: Option<String>,
    pub question: String,
    pub answer: String,
    /// Attribute kind asked about, for attribute questions.
    pub attribute: Option<String>,
    /// Ground truth for recognition items.
    pub present: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenItem {
    pub prompt: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PargItem {
    pub prompt: String,
    pub attribute: String,
    pub refined: String,
    /// Render showing only the queried attribute.
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditItem {
    pub source: String,
    pub target: String,
    pub instruction: String,
    pub category: EditCategory,
    pub detail: EditDetail,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSet {
    pub understanding: Vec<TextItem>,
    pub generation: Vec<GenItem>,
    pub editing: Vec<EditItem>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub recognition: Vec<TextItem>,
    pub vqa: Vec<TextItem>,
    pub qa: Vec<TextItem>,
    pub generation: Vec<GenItem>,
    pub parg: Vec<PargItem>,
    pub editing: Vec<EditItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptTasks {
    pub concept: ConceptSpec,
    pub train: TrainSet,
    pub eval: EvalSet,
}

/// Whole benchmark in memory. Latents are stored at f32 precision.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub config: MicroWorldConfig,
    pub world: World,
    pub concepts: Vec<ConceptTasks>,
    pub latents: BTreeMap<String, Vec<f64>>,
}

impl Benchmark {
    pub fn latent(&self, name: &str) -> Result<&[f64]> {
        self.latents
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Index(format!("unknown latent {name:?}")))
    }

    pub fn concept(&self, identifier: &str) -> Result<&ConceptTasks> {
        self.concepts
            .iter()
            .find(|c| c.concept.identifier == identifier)
            .ok_or_else(|| Error::Index(format!("unknown concept {identifier:?}")))
    }

    /// Write `manifest.json`, `latents.ckpt` and `tasks.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<BenchmarkManifest> {
        fs::create_dir_all(dir)?;
        let mut c = Container::default();
        c.meta.insert("kind".into(), "latents".into());
        for (name, v) in &self.latents {
            c.push(name.clone(), Tensor::vector(v.clone()));
        }
        let latent_bytes = c.to_bytes()?;
        let mut tasks = Vec::new();
        for ct in &self.concepts {
            tasks.extend(serde_json::to_vec(ct)?);
            tasks.push(b'\n');
        }
        let manifest = BenchmarkManifest::new(self, &latent_bytes, &tasks);
        fs::write(dir.join("latents.ckpt"), &latent_bytes)?;
        fs::write(dir.join("tasks.jsonl"), &tasks)?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BenchmarkManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let c = checkpoint::read(&dir.join("latents.ckpt"))?;
        let latents = c
            .entries
            .into_iter()
            .map(|(n, t)| (n, t.into_vec()))
            .collect();
        let text = fs::read_to_string(dir.join("tasks.jsonl"))?;
        let concepts = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ConceptTasks>, _>>()?;
        Ok(Self {
            world: World::new(manifest.config.codebook_seed),
            config: manifest.config,
            concepts,
            latents,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub config: MicroWorldConfig,
    pub n_concepts: usize,
    pub categories: BTreeMap<String, usize>,
    pub train_references: BTreeMap<String, usize>,
    pub eval_edit_categories: BTreeMap<String, usize>,
    pub parg_prompts_leak_free: bool,
    pub latents_sha256: String,
    pub tasks_sha256: String,
}

impl BenchmarkManifest {
    fn new(b: &Benchmark, latent_bytes: &[u8], tasks: &[u8]) -> Self {
        let mut categories = BTreeMap::new();
        let mut refs = BTreeMap::new();
        let mut edits = BTreeMap::new();
        for ct in &b.concepts {
            *categories.entry(ct.concept.category.clone()).or_insert(0) += 1;
            refs.insert(ct.concept.identifier.clone(), ct.concept.references.len());
            for e in &ct.eval.editing {
                let key = serde_json::to_value(e.category).expect("enum").as_str().unwrap_or("").to_string();
                *edits.entry(key).or_insert(0) += 1;
            }
        }
        Self {
            config: b.config.clone(),
            n_concepts: b.concepts.len(),
            categories,
            train_references: refs,
            eval_edit_categories: edits,
            parg_prompts_leak_free: parg_leak_free(b),
            latents_sha256: hex::encode(Sha256::digest(latent_bytes)),
            tasks_sha256: hex::encode(Sha256::digest(tasks)),
        }
    }
}

/// No PARG prompt contains any attribute value word.
pub fn parg_leak_free(b: &Benchmark) -> bool {
    b.concepts.iter().all(|ct| {
        ct.eval
            .parg
            .iter()
            .all(|p| grammar::mentioned_values(&p.prompt).is_empty())
    })
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

/// Deterministic benchmark for `cfg`.
pub fn build_benchmark(cfg: &MicroWorldConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let world = World::new(cfg.codebook_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids: Vec<usize> = (0..MAX_IDENTITIES).collect();
    ids.shuffle(&mut rng);
    let (concept_ids, spare_ids) = ids.split_at(cfg.n_concepts);
    let split = cfg.effective_split();

    let mut specs = Vec::with_capacity(cfg.n_concepts);
    let mut n = 0;
    for (cat_idx, count) in split.iter().enumerate() {
        let (category, members) = CLASSES[cat_idx];
        for _ in 0..*count {
            let class = pick(&mut rng, members);
            let attributes = ATTRIBUTE_KINDS
                .iter()
                .enumerate()
                .map(|(k, kind)| (kind.to_string(), pick(&mut rng, &ATTRIBUTE_VALUES[k]).to_string()))
                .collect();
            let identifier = format!("c{n:02}_{class}");
            specs.push(ConceptSpec {
                references: (0..cfg.train_references).map(|r| format!("{identifier}/ref{r:02}")).collect(),
                identifier,
                category: category.to_string(),
                class: class.to_string(),
                attributes,
                identity: concept_ids[n],
            });
            n += 1;
        }
    }

    let mut latents = BTreeMap::new();
    let mut concepts = Vec::with_capacity(specs.len());
    for (ci, spec) in specs.iter().enumerate() {
        let mut crng = ChaCha8Rng::seed_from_u64(rng.random());
        let id = &spec.identifier;
        let mut train = TrainSet::default();
        let mut eval = EvalSet::default();
        let mut store = |name: String, z: Vec<f64>| {
            latents.insert(name.clone(), z);
            name
        };

        // reference photos: attributes are not visible
        let mut ref_ctx = Vec::new();
        for name in &spec.references {
            let ctx = pick(&mut crng, &CONTEXTS);
            let z = render_image(&world, spec, &Descriptor::new(ctx, Visibility::Hidden), crng.random())?;
            store(name.clone(), z);
            ref_ctx.push(ctx);
        }

        // understanding training data
        let mut qa_templates: Vec<(String, String, Option<String>)> = ATTRIBUTE_KINDS
            .iter()
            .map(|k| {
                let v = &spec.attributes[*k];
                (grammar::attribute_question(k), grammar::attribute_answer(k, v), Some(k.to_string()))
            })
            .collect();
        qa_templates.push((grammar::class_question(), grammar::class_answer(&spec.class), None));
        qa_templates.push((grammar::FALLBACK_QUERY.into(), grammar::class_answer(&spec.class), None));
        for (q, a, attr) in &qa_templates {
            train.understanding.push(TextItem {
                task: TextTask::Qa,
                image: None,
                question: q.clone(),
                answer: a.clone(),
                attribute: attr.clone(),
                present: None,
            });
        }
        for (name, ctx) in spec.references.iter().zip(&ref_ctx) {
            train.understanding.push(TextItem {
                task: TextTask::Vqa,
                image: Some(name.clone()),
                question: grammar::where_question(),
                answer: grammar::where_answer(ctx),
                attribute: None,
                present: None,
            });
            train.understanding.push(recognition_item(name.clone(), true));
        }
        for r in 0..cfg.train_references {
            let other = spare_ids[crng.random_range(0..spare_ids.len())];
            let ctx = crng.random_range(0..CONTEXTS.len());
            let name = store(format!("{id}/train_neg{r:02}"), render_other(&world, Some(other), ctx, crng.random())?);
            train.understanding.push(recognition_item(name, false));
        }

        // generation training data
        for (name, ctx) in spec.references.iter().zip(&ref_ctx) {
            let verb = pick(&mut crng, &VERBS);
            train.generation.push(GenItem {
                prompt: grammar::generation_prompt(verb, &[], Some(ctx)),
                target: name.clone(),
            });
        }

        // editing training data: removal dominated
        let n_removal = (cfg.train_edits * 4).div_ceil(5);
        for e in 0..cfg.train_edits {
            let cat = if e < n_removal {
                EditCategory::ObjectManipulation
            } else {
                EditCategory::ALL[1 + crng.random_range(0..4)]
            };
            let trip = make_edit_triplet(&world, spec, cat, crng.random())?;
            train.editing.push(edit_item(&mut store, format!("{id}/train_edit{e:02}"), trip));
        }

        // evaluation
        for r in 0..cfg.recognition_per_class {
            let ctx = pick(&mut crng, &CONTEXTS);
            let name = store(
                format!("{id}/rec_pos{r:02}"),
                render_image(&world, spec, &Descriptor::new(ctx, Visibility::Hidden), crng.random())?,
            );
            eval.recognition.push(recognition_item(name, true));
        }
        for r in 0..cfg.recognition_per_class {
            // other benchmark concepts first, then distractor identities
            let others: Vec<usize> = concept_ids.iter().copied().filter(|&k| k != spec.identity).collect();
            let other = if !others.is_empty() && r % 2 == 0 {
                others[crng.random_range(0..others.len())]
            } else {
                spare_ids[crng.random_range(0..spare_ids.len())]
            };
            let ctx = crng.random_range(0..CONTEXTS.len());
            let name = store(format!("{id}/rec_neg{r:02}"), render_other(&world, Some(other), ctx, crng.random())?);
            eval.recognition.push(recognition_item(name, false));
        }
        for r in 0..cfg.vqa_items {
            let ctx = pick(&mut crng, &CONTEXTS);
            let name = store(
                format!("{id}/vqa{r:02}"),
                render_image(&world, spec, &Descriptor::new(ctx, Visibility::Hidden), crng.random())?,
            );
            eval.vqa.push(TextItem {
                task: TextTask::Vqa,
                image: Some(name),
                question: grammar::where_question(),
                answer: grammar::where_answer(ctx),
                attribute: None,
                present: None,
            });
        }
        for r in 0..cfg.qa_items {
            let (q, a, attr) = &qa_templates[r % qa_templates.len()];
            eval.qa.push(TextItem {
                task: TextTask::Qa,
                image: None,
                question: q.clone(),
                answer: a.clone(),
                attribute: attr.clone(),
                present: None,
            });
        }
        for (g, ctx) in CONTEXTS.iter().enumerate() {
            let name = store(
                format!("{id}/gen{g:02}"),
                render_image(&world, spec, &Descriptor::new(ctx, Visibility::Hidden), crng.random())?,
            );
            eval.generation.push(GenItem {
                prompt: grammar::generation_prompt("generate", &[], Some(ctx)),
                target: name,
            });
        }
        for kind in ATTRIBUTE_KINDS {
            let verb = pick(&mut crng, &VERBS);
            let ctx = pick(&mut crng, &CONTEXTS);
            let value = &spec.attributes[kind];
            let name = store(
                format!("{id}/parg_{kind}"),
                render_image(&world, spec, &Descriptor::new(ctx, Visibility::Only(kind.into())), crng.random())?,
            );
            eval.parg.push(PargItem {
                prompt: grammar::parg_prompt(verb, kind, Some(ctx)),
                attribute: kind.to_string(),
                refined: grammar::generation_prompt(verb, &[value], Some(ctx)),
                reference: name,
            });
        }
        for e in 0..cfg.eval_edits {
            let cat = EditCategory::ALL[(e + ci) % EditCategory::ALL.len()];
            let trip = make_edit_triplet(&world, spec, cat, crng.random())?;
            eval.editing.push(edit_item(&mut store, format!("{id}/eval_edit{e:02}"), trip));
        }
        eval.editing.sort_by_key(|e| e.category);

        concepts.push(ConceptTasks {
            concept: spec.clone(),
            train,
            eval,
        });
    }

    Ok(Benchmark {
        config: cfg.clone(),
        world,
        concepts,
        latents,
    })
}

fn recognition_item(image: String, present: bool) -> TextItem {
    TextItem {
        task: TextTask::Recognition,
        image: Some(image),
        question: grammar::recognition_question(),
        answer: grammar::recognition_answer(present),
        attribute: None,
        present: Some(present),
    }
}

fn edit_item(store: &mut impl FnMut(String, Vec<f64>) -> String, stem: String, t: EditTriplet) -> EditItem {
    EditItem {
        source: store(format!("{stem}_src"), t.source),
        target: store(format!("{stem}_tgt"), t.target),
        instruction: t.instruction,
        category: t.category,
        detail: t.detail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(world_seed: u64) -> (World, ConceptSpec) {
        let world = World::new(world_seed);
        let spec = ConceptSpec {
            identifier: "c00_dog".into(),
            category: "pet".into(),
            class: "dog".into(),
            attributes: [("toy", "excavator"), ("home", "farm"), ("snack", "apple")]
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            identity: 3,
            references: vec!["r".into()],
        };
        (world, spec)
    }

    #[test]
    fn render_is_deterministic_and_close_to_identity() {
        let (w, s) = spec(1);
        let d = Descriptor::default();
        assert_eq!(render_image(&w, &s, &d, 9).unwrap(), render_image(&w, &s, &d, 9).unwrap());
        let u = w.identity_code(3).unwrap();
        for seed in 0..1000 {
            let z = render_image(&w, &s, &d, seed).unwrap();
            assert!(cosine(block(&z, IDENTITY), &u).unwrap() >= 0.99);
        }
        assert!(render_image(&w, &s, &Descriptor::new("moon", Visibility::All), 0).is_err());
    }

    #[test]
    fn removal_zeroes_identity_and_keeps_the_rest() {
        let (w, s) = spec(2);
        let t = make_edit_triplet(&w, &s, EditCategory::ObjectManipulation, 5).unwrap();
        assert!(block(&t.target, IDENTITY).iter().all(|x| *x == 0.0));
        for b in [ATTRIBUTE, CONTEXT, STYLE] {
            assert_eq!(block(&t.target, b), block(&t.source, b));
        }
        assert_eq!(t.instruction, "remove <sks> : dog from the photo");
    }

    #[test]
    fn attribute_swap_moves_projection() {
        let (w, s) = spec(3);
        for seed in 0..20 {
            let t = make_edit_triplet(&w, &s, EditCategory::AttributeModification, seed).unwrap();
            let EditDetail::Swap { kind, from, to } = &t.detail else { panic!() };
            let k = kind_index(kind).unwrap();
            let a = block(&t.target, ATTRIBUTE);
            let dot = |c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
            let new = dot(w.attribute_code(k, value_index(k, to).unwrap()));
            let old = dot(w.attribute_code(k, value_index(k, from).unwrap()));
            assert!(new > old);
            for b in [IDENTITY, CONTEXT, STYLE] {
                assert_eq!(block(&t.target, b), block(&t.source, b));
            }
        }
    }

    #[test]
    fn parg_oracle_examples() {
        let (w, s) = spec(4);
        let z = render_image(&w, &s, &Descriptor::new("room", Visibility::Only("toy".into())), 1).unwrap();
        assert!(parg_oracle(&w, &z, &s, "toy").unwrap() >= 0.9);
        let mut zero = z.clone();
        block_mut(&mut zero, ATTRIBUTE).fill(0.0);
        assert_eq!(parg_oracle(&w, &zero, &s, "toy").unwrap(), 0.0);
        let mut wrong = s.clone();
        wrong.attributes.insert("toy".into(), "kite".into());
        let zw = render_image(&w, &wrong, &Descriptor::new("room", Visibility::Only("toy".into())), 1).unwrap();
        assert!(parg_oracle(&w, &zw, &s, "toy").unwrap() <= 0.2);
        assert!(parg_oracle(&w, &z, &s, "hat").is_err());
    }

    #[test]
    fn default_benchmark_shape() {
        let b = build_benchmark(&MicroWorldConfig::default()).unwrap();
        assert_eq!(b.concepts.len(), 20);
        let count = |cat: &str| b.concepts.iter().filter(|c| c.concept.category == cat).count();
        assert_eq!((count("person"), count("pet"), count("object")), (10, 5, 5));
        let mut per_cat = BTreeMap::new();
        for c in &b.concepts {
            assert_eq!(c.concept.references.len(), 10);
            for e in &c.eval.editing {
                *per_cat.entry(e.category).or_insert(0) += 1;
            }
            let pos = c.eval.recognition.iter().filter(|r| r.present == Some(true)).count();
            assert_eq!(pos * 2, c.eval.recognition.len());
        }
        assert!(per_cat.values().all(|&n| n == 20));
        assert!(parg_leak_free(&b));
    }

    #[test]
    fn small_split_and_round_trip() {
        let cfg = MicroWorldConfig {
            n_concepts: 3,
            ..MicroWorldConfig::default()
        };
        assert_eq!(cfg.effective_split(), [2, 1, 0]);
        let b = build_benchmark(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m1 = b.save(dir.path()).unwrap();
        let back = Benchmark::load(dir.path()).unwrap();
        assert_eq!(back.latents, b.latents);
        assert_eq!(back.concepts, b.concepts);
        let m2 = build_benchmark(&cfg).unwrap().save(dir.path()).unwrap();
        assert_eq!(m1, m2);
    }
}

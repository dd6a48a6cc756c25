//! Generic backbone training on hard-prompt concepts.
//!
//! Each sample invents a concept: an identity direction `u`, a class and one
//! value per attribute kind. Its system-prompt rows are written directly:
//! the identifier and some generation rows carry `r·u·id_proj`, and a few
//! understanding rows carry (scaled) word embeddings of the class and the
//! attribute values. Everything else is zero, matching the zero-initialized
//! rows personalization starts from.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::examples::{flow_example, text_example};
use super::{batch_loss, FlowSample, Group, LossRow};
use crate::concepts::{system_prompt, ConceptSpec, ConceptTokens};
use crate::error::{Error, Result};
use crate::microbench::grammar;
use crate::microbench::vocab::Vocab;
use crate::microbench::world::*;
use crate::microbench::{apply_edit, edit_instruction, EditCategory, EditDetail};
use crate::model::{Backbone, ForwardPass, ModelConfig, SequenceBuilder, SlotVars};
use crate::numcore::{adamw_step, AdamWConfig, OptimState, Tape, Tensor, Var};
use crate::replay::{parse_context, random_request, refine_request, request_answer, unified_context};

/// Flow weight during backbone training. At 400 the flow terms drown the
/// text loss under global clipping.
pub const PRETRAIN_LAMBDA: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainMix {
    pub attribute_qa: f64,
    pub class_qa: f64,
    pub vqa: f64,
    pub recognition: f64,
    pub parse: f64,
    pub compose: f64,
    pub unified: f64,
    pub generation: f64,
    pub editing: f64,
}

impl Default for PretrainMix {
    fn default() -> Self {
        Self {
            attribute_qa: 0.15,
            class_qa: 0.04,
            vqa: 0.06,
            recognition: 0.25,
            parse: 0.08,
            compose: 0.06,
            unified: 0.08,
            generation: 0.17,
            editing: 0.11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    /// Invented concepts per step.
    pub concepts_per_step: usize,
    /// Examples drawn for each invented concept.
    pub examples_per_concept: usize,
    pub optimizer: AdamWConfig,
    pub lambda_image: f64,
    pub lambda_edit: f64,
    pub seed: u64,
    pub codebook_seed: u64,
    pub n_und: usize,
    pub n_gen: usize,
    /// Row scale range for hard prompts.
    pub row_scale: (f64, f64),
    /// Probability that a generation or edit sample drops its text.
    pub drop_text: f64,
    pub mix: PretrainMix,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 10_000,
            concepts_per_step: 8,
            examples_per_concept: 2,
            optimizer: AdamWConfig {
                lr: 1e-3,
                warmup_steps: 200,
                ..AdamWConfig::default()
            },
            lambda_image: PRETRAIN_LAMBDA,
            lambda_edit: PRETRAIN_LAMBDA,
            seed: 0,
            codebook_seed: 1234,
            n_und: 16,
            n_gen: 16,
            row_scale: (0.25, 2.0),
            drop_text: 0.1,
            mix: PretrainMix::default(),
        }
    }
}

/// A concept whose rows are given rather than learned.
#[derive(Clone, Debug)]
pub struct HardConcept {
    pub identity: Vec<f64>,
    pub class: &'static str,
    /// Value index per attribute kind.
    pub values: [usize; 3],
    /// Word id per understanding slot.
    pub und_words: Vec<Option<usize>>,
    pub gen_mask: Vec<bool>,
    pub scales: [f64; 3],
}

fn random_unit<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let nv = norm(&v);
        if nv > 1e-6 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

impl HardConcept {
    pub fn random<R: Rng>(rng: &mut R, n_und: usize, n_gen: usize, row_scale: (f64, f64)) -> Result<Self> {
        let v = Vocab::standard();
        let (_, members) = CLASSES[rng.random_range(0..CLASSES.len())];
        let class = members[rng.random_range(0..members.len())];
        let values = [
            rng.random_range(0..ATTRIBUTE_VALUES[0].len()),
            rng.random_range(0..ATTRIBUTE_VALUES[1].len()),
            rng.random_range(0..ATTRIBUTE_VALUES[2].len()),
        ];
        let mut words = vec![v.id(class)?];
        for (k, &val) in values.iter().enumerate() {
            words.push(v.id(ATTRIBUTE_VALUES[k][val])?);
        }
        if n_und < words.len() {
            return Err(Error::Config(format!("hard prompts need at least {} understanding rows", words.len())));
        }
        if n_gen == 0 {
            return Err(Error::Config("hard prompts need at least one generation row".into()));
        }
        let mut slots: Vec<usize> = (0..n_und).collect();
        slots.shuffle(rng);
        let mut und_words = vec![None; n_und];
        for (w, s) in words.into_iter().zip(slots) {
            und_words[s] = Some(w);
        }
        let mut gen_mask: Vec<bool> = (0..n_gen).map(|_| rng.random::<bool>()).collect();
        if !gen_mask.iter().any(|b| *b) {
            gen_mask[rng.random_range(0..n_gen)] = true;
        }
        let (lo, hi) = row_scale;
        let mut scale = || if hi > lo { rng.random_range(lo..hi) } else { lo };
        let scales = [scale(), scale(), scale()];
        Ok(Self {
            identity: random_unit(rng, BLOCK),
            class,
            values,
            und_words,
            gen_mask,
            scales,
        })
    }

    pub fn value(&self, kind: usize) -> &'static str {
        ATTRIBUTE_VALUES[kind][self.values[kind]]
    }

    pub fn spec(&self) -> ConceptSpec {
        ConceptSpec {
            identifier: "hard".into(),
            category: String::new(),
            class: self.class.into(),
            attributes: ATTRIBUTE_KINDS
                .iter()
                .enumerate()
                .map(|(k, kind)| (kind.to_string(), self.value(k).to_string()))
                .collect(),
            identity: 0,
            references: vec!["hard".into()],
        }
    }

    fn attribute_pairs(&self) -> Vec<(usize, usize)> {
        self.values.iter().copied().enumerate().collect()
    }

    /// The same rows as constants, for inference with a trained backbone.
    pub fn tokens(&self, backbone: &Backbone) -> Result<ConceptTokens> {
        let p = &backbone.params;
        let d = backbone.config.d;
        let mut id_row = vec![0.0; d];
        for (i, ui) in self.identity.iter().enumerate() {
            for (o, w) in id_row.iter_mut().zip(p.id_proj.row(i)) {
                *o += ui * w;
            }
        }
        let mut und = Vec::with_capacity((self.und_words.len() + 1) * d);
        und.extend(id_row.iter().map(|x| x * self.scales[0]));
        for w in &self.und_words {
            match w {
                Some(id) => und.extend(p.tok_emb.row(*id).iter().map(|x| x * self.scales[1])),
                None => und.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        let mut gen = Vec::with_capacity(self.gen_mask.len() * d);
        for &on in &self.gen_mask {
            if on {
                gen.extend(id_row.iter().map(|x| x * self.scales[2]));
            } else {
                gen.extend(std::iter::repeat_n(0.0, d));
            }
        }
        Ok(ConceptTokens {
            und: Tensor::new(vec![self.und_words.len() + 1, d], und)?,
            gen: Tensor::new(vec![self.gen_mask.len(), d], gen)?,
        })
    }

    /// Rows on a tape, differentiable in the embedding tables.
    fn bind(&self, tape: &mut Tape, tok_emb: Var, id_proj: Var) -> Result<SlotVars> {
        let d = tape.value(tok_emb).cols();
        let u = tape.constant(Tensor::matrix(1, BLOCK, self.identity.clone())?);
        let id_row = tape.matmul(u, id_proj)?;
        let zero = tape.constant(Tensor::zeros(&[1, d]));
        let sks = tape.scale(id_row, self.scales[0])?;
        let words: Vec<(usize, usize)> = self
            .und_words
            .iter()
            .map(|w| match w {
                Some(id) => (0, *id),
                None => (1, 0),
            })
            .collect();
        let und_rows = tape.gather_rows(&[tok_emb, zero], &words)?;
        let und_rows = tape.scale(und_rows, self.scales[1])?;
        let picks: Vec<(usize, usize)> =
            std::iter::once((0, 0)).chain((0..self.und_words.len()).map(|r| (1, r))).collect();
        let und = tape.gather_rows(&[sks, und_rows], &picks)?;
        let gen_row = tape.scale(id_row, self.scales[2])?;
        let gpicks: Vec<(usize, usize)> = self.gen_mask.iter().map(|&on| if on { (0, 0) } else { (1, 0) }).collect();
        let gen = tape.gather_rows(&[gen_row, zero], &gpicks)?;
        Ok(SlotVars { und, gen })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    AttributeQa,
    ClassQa,
    Vqa,
    Recognition,
    Parse,
    Compose,
    Unified,
    Generation,
    Editing,
}

fn pick_kind<R: Rng>(rng: &mut R, mix: &PretrainMix) -> Kind {
    let table = [
        (Kind::AttributeQa, mix.attribute_qa),
        (Kind::ClassQa, mix.class_qa),
        (Kind::Vqa, mix.vqa),
        (Kind::Recognition, mix.recognition),
        (Kind::Parse, mix.parse),
        (Kind::Compose, mix.compose),
        (Kind::Unified, mix.unified),
        (Kind::Generation, mix.generation),
        (Kind::Editing, mix.editing),
    ];
    let total: f64 = table.iter().map(|t| t.1).sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in table {
        if u < w {
            return k;
        }
        u -= w;
    }
    Kind::AttributeQa
}

/// One to six parser demonstrations, either the fixed ones or random.
fn demonstrations<R: Rng>(rng: &mut R) -> Vec<(String, String)> {
    let k = rng.random_range(1..=6);
    if rng.random::<bool>() {
        grammar::fixed_exemplars().into_iter().take(k).collect()
    } else {
        (0..k)
            .map(|_| {
                let r = random_request(rng);
                let q = grammar::expected_query(&r);
                (r, q)
            })
            .collect()
    }
}

fn scene<R: Rng>(world: &World, identity: Option<&[f64]>, shown: &[(usize, usize)], ctx: usize, rng: &mut R) -> Vec<f64> {
    let mut z = world.compose(identity, shown, ctx);
    world.add_noise(&mut z, rng);
    z
}

enum Sample {
    Text { image: Option<Vec<f64>>, prompt: String, answer: String },
    Gen { prompt: String, x0: Vec<f64>, bare: bool },
    Edit { source: Vec<f64>, instruction: String, x0: Vec<f64>, bare: bool },
}

fn draw_sample<R: Rng>(rng: &mut R, world: &World, c: &HardConcept, cfg: &PretrainConfig) -> Result<Sample> {
    let value_of = |k: usize| c.value(k);
    let random_shown = |rng: &mut R| -> Vec<(usize, usize)> {
        c.attribute_pairs().into_iter().filter(|_| rng.random::<f64>() < 0.3).collect()
    };
    Ok(match pick_kind(rng, &cfg.mix) {
        Kind::AttributeQa => {
            let k = rng.random_range(0..ATTRIBUTE_KINDS.len());
            Sample::Text {
                image: None,
                prompt: grammar::attribute_question(ATTRIBUTE_KINDS[k]),
                answer: grammar::attribute_answer(ATTRIBUTE_KINDS[k], c.value(k)),
            }
        }
        Kind::ClassQa => Sample::Text {
            image: None,
            prompt: if rng.random::<bool>() { grammar::class_question() } else { grammar::FALLBACK_QUERY.into() },
            answer: grammar::class_answer(c.class),
        },
        Kind::Vqa => {
            let ctx = rng.random_range(0..CONTEXTS.len());
            let other = random_unit(rng, BLOCK);
            let id = if rng.random::<f64>() < 0.8 { &c.identity } else { &other };
            let shown = random_shown(rng);
            Sample::Text {
                image: Some(scene(world, Some(id), &shown, ctx, rng)),
                prompt: grammar::where_question(),
                answer: grammar::where_answer(CONTEXTS[ctx]),
            }
        }
        Kind::Recognition => {
            let ctx = rng.random_range(0..CONTEXTS.len());
            let present = rng.random::<bool>();
            let other = random_unit(rng, BLOCK);
            let id = if present { Some(c.identity.as_slice()) } else if rng.random::<f64>() < 0.9 { Some(other.as_slice()) } else { None };
            let shown = random_shown(rng);
            Sample::Text {
                image: Some(scene(world, id, &shown, ctx, rng)),
                prompt: grammar::recognition_question(),
                answer: grammar::recognition_answer(present),
            }
        }
        Kind::Parse => {
            let request = random_request(rng);
            Sample::Text {
                image: None,
                prompt: parse_context(&demonstrations(rng), &request),
                answer: grammar::expected_query(&request),
            }
        }
        Kind::Compose => {
            let request = random_request(rng);
            // a random value keeps composition independent of the concept rows
            let vals: [usize; 3] = std::array::from_fn(|k| rng.random_range(0..ATTRIBUTE_VALUES[k].len()));
            let pick = |k: usize| ATTRIBUTE_VALUES[k][vals[k]];
            Sample::Text {
                image: None,
                prompt: grammar::compose_prompt(&request_answer(&request, c.class, pick), &request),
                answer: refine_request(&request, pick),
            }
        }
        Kind::Unified => {
            let request = random_request(rng);
            Sample::Text {
                image: None,
                prompt: unified_context(&demonstrations(rng), &request),
                answer: grammar::unified_output(
                    &grammar::expected_query(&request),
                    &request_answer(&request, c.class, value_of),
                    &refine_request(&request, value_of),
                ),
            }
        }
        Kind::Generation => {
            let verb = *VERBS.choose(rng).expect("non-empty");
            let mut kinds: Vec<usize> = (0..ATTRIBUTE_KINDS.len()).collect();
            kinds.shuffle(rng);
            let n_vals = [0, 0, 1, 1, 1, 2][rng.random_range(0..6)];
            let shown: Vec<(usize, usize)> = kinds[..n_vals]
                .iter()
                .map(|&k| (k, rng.random_range(0..ATTRIBUTE_VALUES[k].len())))
                .collect();
            let words: Vec<&str> = shown.iter().map(|&(k, v)| ATTRIBUTE_VALUES[k][v]).collect();
            let ctx = if rng.random::<f64>() < 0.7 { Some(rng.random_range(0..CONTEXTS.len())) } else { None };
            let x0 = scene(world, Some(&c.identity), &shown, ctx.unwrap_or(context_index(DEFAULT_CONTEXT)?), rng);
            Sample::Gen {
                prompt: grammar::generation_prompt(verb, &words, ctx.map(|i| CONTEXTS[i])),
                x0,
                bare: rng.random::<f64>() < cfg.drop_text,
            }
        }
        Kind::Editing => {
            let spec = c.spec();
            let ctx = rng.random_range(0..CONTEXTS.len());
            let source = scene(world, Some(&c.identity), &c.attribute_pairs(), ctx, rng);
            let detail = match EditCategory::ALL[rng.random_range(0..5)] {
                EditCategory::ObjectManipulation => EditDetail::Remove,
                EditCategory::AttributeModification => {
                    let k = rng.random_range(0..ATTRIBUTE_KINDS.len());
                    let mut to = rng.random_range(0..ATTRIBUTE_VALUES[k].len() - 1);
                    if to >= c.values[k] {
                        to += 1;
                    }
                    EditDetail::Swap {
                        kind: ATTRIBUTE_KINDS[k].into(),
                        from: c.value(k).into(),
                        to: ATTRIBUTE_VALUES[k][to].into(),
                    }
                }
                EditCategory::SpatialTransformation => EditDetail::Flip,
                EditCategory::EnvironmentInteraction => {
                    let mut to = rng.random_range(0..CONTEXTS.len() - 1);
                    if to >= ctx {
                        to += 1;
                    }
                    EditDetail::Move { to: CONTEXTS[to].into() }
                }
                EditCategory::StyleAppearance => EditDetail::Sketch,
            };
            let x0 = apply_edit(world, &spec, &source, &detail)?;
            Sample::Edit {
                instruction: edit_instruction(&spec, &detail),
                source,
                x0,
                bare: rng.random::<f64>() < cfg.drop_text,
            }
        }
    })
}

/// Train a backbone from scratch. `progress` sees every step's losses.
pub fn pretrain(cfg: &PretrainConfig, mut progress: impl FnMut(&LossRow)) -> Result<(Backbone, Vec<LossRow>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut backbone = Backbone::init(cfg.model.clone(), &mut rng)?;
    let world = World::new(cfg.codebook_seed);
    let prefix = system_prompt(cfg.n_und, cfg.n_gen)?;
    let bare_prefix = SequenceBuilder::new().build();
    let np = cfg.model.n_patches();
    let mut state = OptimState::new(cfg.optimizer.clone(), &backbone.params.to_vec().into_iter().cloned().collect::<Vec<_>>());
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape, true);
        let mut groups = Vec::with_capacity(cfg.concepts_per_step + 1);
        let mut bare = Group {
            prefix: bare_prefix.clone(),
            slots: None,
            text: Vec::new(),
            gen: Vec::new(),
            edit: Vec::new(),
        };
        for _ in 0..cfg.concepts_per_step {
            let c = HardConcept::random(&mut rng, cfg.n_und, cfg.n_gen, cfg.row_scale)?;
            let mut g = Group {
                prefix: prefix.clone(),
                slots: Some(c.bind(&mut tape, bound.tok_emb, bound.id_proj)?),
                text: Vec::new(),
                gen: Vec::new(),
                edit: Vec::new(),
            };
            for _ in 0..cfg.examples_per_concept {
                match draw_sample(&mut rng, &world, &c, cfg)? {
                    Sample::Text { image, prompt, answer } => {
                        g.text.push(text_example(&prefix, image.as_deref(), &prompt, &answer, np)?)
                    }
                    Sample::Gen { prompt, x0, bare: drop } => {
                        let s = FlowSample::draw(x0, &mut rng);
                        if drop {
                            bare.gen.push(flow_example(&bare_prefix, None, "", &s, np)?);
                        } else {
                            g.gen.push(flow_example(&prefix, None, &prompt, &s, np)?);
                        }
                    }
                    Sample::Edit { source, instruction, x0, bare: drop } => {
                        let s = FlowSample::draw(x0, &mut rng);
                        if drop {
                            bare.edit.push(flow_example(&bare_prefix, Some(&source), "", &s, np)?);
                        } else {
                            g.edit.push(flow_example(&prefix, Some(&source), &instruction, &s, np)?);
                        }
                    }
                }
            }
            groups.push(g);
        }
        if !(bare.gen.is_empty() && bare.edit.is_empty()) {
            groups.push(bare);
        }
        let fp = ForwardPass::new(&cfg.model, &bound);
        let loss = batch_loss(&mut tape, &fp, &groups, cfg.lambda_image, cfg.lambda_edit)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("pretraining step {step}: {m}")),
                other => other,
            })?;
        let row = LossRow { step, ..loss.row };
        progress(&row);
        log.push(row);
        let grads = tape.backward(loss.total)?;
        let vars = bound.to_vec();
        let mut params: Vec<Tensor> = backbone.params.to_vec().into_iter().cloned().collect();
        let mut g: Vec<Tensor> = vars
            .iter()
            .zip(&params)
            .map(|(v, p)| grads.get(**v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        adamw_step(&mut params, &mut g, &mut state)?;
        for (dst, src) in backbone.params.to_vec_mut().into_iter().zip(params) {
            *dst = src;
        }
    }
    backbone.round_to_f32();
    Ok((backbone, log))
}

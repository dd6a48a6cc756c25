//! Concept-conditioned inference: greedy text decoding and flow sampling.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::sampler::{euler_sample, SamplerConfig, Velocities};
use super::{Backbone, ForwardPass, Sequence, SequenceBuilder};
use crate::concepts::{render_system_prompt, ConceptTokens};
use crate::error::{Error, Result};
use crate::microbench::vocab::Vocab;
use crate::numcore::Tape;
use crate::trainer::examples::context;

pub const MAX_NEW_TOKENS: usize = 40;

/// Which parts of the context a velocity pass sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    /// System prompt, source image (if any) and text.
    Full,
    /// Source image only.
    ImageOnly,
    Unconditional,
}

pub struct Engine<'a> {
    pub backbone: &'a Backbone,
    pub tokens: &'a ConceptTokens,
    prefix: Sequence,
    pub max_new_tokens: usize,
    text_calls: Cell<usize>,
    gen_calls: Cell<usize>,
}

impl<'a> Engine<'a> {
    pub fn new(backbone: &'a Backbone, tokens: &'a ConceptTokens) -> Result<Self> {
        if tokens.d() != backbone.config.d {
            return Err(Error::Shape(format!(
                "concept width {} vs model width {}",
                tokens.d(),
                backbone.config.d
            )));
        }
        Ok(Self {
            backbone,
            tokens,
            prefix: render_system_prompt(tokens)?,
            max_new_tokens: MAX_NEW_TOKENS,
            text_calls: Cell::new(0),
            gen_calls: Cell::new(0),
        })
    }

    /// `(text calls, generation calls)` issued so far.
    pub fn calls(&self) -> (usize, usize) {
        (self.text_calls.get(), self.gen_calls.get())
    }

    /// Greedy continuation of `[image] prompt` up to the end marker.
    pub fn generate_text(&self, image: Option<&[f64]>, prompt: &str) -> Result<String> {
        self.text_calls.set(self.text_calls.get() + 1);
        let v = Vocab::standard();
        let cfg = &self.backbone.config;
        let mut b = context(&self.prefix, image, prompt, cfg.n_patches())?;
        let mut out = Vec::new();
        for _ in 0..self.max_new_tokens {
            let seq = b.build();
            let mut tape = Tape::new();
            let bound = self.backbone.bind(&mut tape, false);
            let slots = super::bind_slots(&mut tape, &self.tokens.und, &self.tokens.gen, false);
            let fp = ForwardPass::new(cfg, &bound);
            let enc = fp.encode(&mut tape, Some(slots), &self.prefix, std::slice::from_ref(&seq))?;
            let logits = fp.logits(&mut tape, enc.suffixes[0], &[seq.len() - 1])?;
            let row = tape.value(logits).data();
            let next = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0;
            if next == v.eos() {
                return Ok(v.decode(&out));
            }
            out.push(next);
            b.token(next);
        }
        Err(Error::Truncated(self.max_new_tokens))
    }

    /// Velocity at `(x_t, t)` under `cond`.
    pub fn velocity(&self, cond: Condition, source: Option<&[f64]>, prompt: &str, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        let cfg = &self.backbone.config;
        let bare = SequenceBuilder::new().build();
        let (prefix, src, text) = match cond {
            Condition::Full => (&self.prefix, source, prompt),
            Condition::ImageOnly => (&bare, source, ""),
            Condition::Unconditional => (&bare, None, ""),
        };
        let mut b = context(prefix, src, text, cfg.n_patches())?;
        b.image(x_t.to_vec(), t, cfg.n_patches())?;
        let seq = b.build();
        let mut tape = Tape::new();
        let bound = self.backbone.bind(&mut tape, false);
        let slots = if cond == Condition::Full {
            Some(super::bind_slots(&mut tape, &self.tokens.und, &self.tokens.gen, false))
        } else {
            None
        };
        let fp = ForwardPass::new(cfg, &bound);
        let enc = fp.encode(&mut tape, slots, prefix, std::slice::from_ref(&seq))?;
        let v = fp.velocity(&mut tape, enc.suffixes[0], &seq.image_rows(seq.images.len() - 1))?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Sample a latent for `prompt` (and an optional edit source) from
    /// seeded noise.
    pub fn sample(&self, prompt: &str, source: Option<&[f64]>, seed: u64, cfg: &SamplerConfig) -> Result<Vec<f64>> {
        self.gen_calls.set(self.gen_calls.get() + 1);
        let d_img = self.backbone.config.d_img;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1: Vec<f64> = (0..d_img).map(|_| StandardNormal.sample(&mut rng)).collect();
        let with_image = source.is_some();
        euler_sample(x1, cfg, with_image, |x, t, guided| {
            let cond = self.velocity(Condition::Full, source, prompt, x, t)?;
            if !guided {
                return Ok(Velocities {
                    cond,
                    uncond: None,
                    image: None,
                });
            }
            let uncond = self.velocity(Condition::Unconditional, None, "", x, t)?;
            let image = match source {
                Some(s) => Some(self.velocity(Condition::ImageOnly, Some(s), "", x, t)?),
                None => None,
            };
            Ok(Velocities {
                cond,
                uncond: Some(uncond),
                image,
            })
        })
    }
}

//! Run every task family of a benchmark concept against a trained model.

use serde::{Deserialize, Serialize};

use super::judge::{edit_scores, EditCase, EditScores, Judge};
use super::report::ConceptScores;
use super::*;
use crate::error::{Error, Result};
use crate::microbench::{grammar, parg_oracle, Benchmark, ConceptTasks, TextItem};
use crate::model::engine::Engine;
use crate::model::sampler::SamplerConfig;
use crate::replay::{replay_generate, retrieve_memory, ReplayMode, ReplayTrace};

/// Which task families to run and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSelection {
    pub understanding: bool,
    pub generation: bool,
    pub parg: bool,
    pub editing: bool,
    /// Also score PARG without replay on the same checkpoint.
    pub paired_replay: bool,
    /// Samples drawn per generation prompt.
    pub samples_per_prompt: usize,
}

impl Default for EvalSelection {
    fn default() -> Self {
        Self {
            understanding: true,
            generation: true,
            parg: true,
            editing: true,
            paired_replay: true,
            samples_per_prompt: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub select: EvalSelection,
    pub mode: ReplayMode,
    pub exemplars: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

/// One judged edit, kept for the edit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub concept: String,
    pub image_ref: String,
    pub instruction: String,
    pub category: crate::microbench::EditCategory,
    pub scores: Option<EditScores>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ConceptEval {
    pub scores: ConceptScores,
    /// Fraction of attribute kinds whose value memory retrieval states
    /// correctly.
    pub retrieval_accuracy: f64,
    /// PARG score without replay, when paired.
    pub parg_no_replay: Option<f64>,
    pub traces: Vec<ReplayTrace>,
    pub edits: Vec<EditRecord>,
}

/// Seed of the `i`-th sample of stream `stream`.
pub fn sample_seed(base: u64, stream: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ (i as u64)
}

/// Greedy answer; running past the length limit counts as no answer.
fn answer(engine: &Engine, image: Option<&[f64]>, question: &str) -> Result<String> {
    match engine.generate_text(image, question) {
        Err(Error::Truncated(_)) => Ok(String::new()),
        other => other,
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn text_scores(engine: &Engine, bench: &Benchmark, items: &[TextItem]) -> Result<(Option<f64>, Option<f64>)> {
    let (mut b, mut j) = (Vec::new(), Vec::new());
    for it in items {
        let img = it.image.as_deref().map(|n| bench.latent(n)).transpose()?;
        let a = answer(engine, img, &it.question)?;
        b.push(bleu_text(&a, &it.answer)?);
        j.push(if answer_matches(&a, &it.answer, it.attribute.as_deref()) { 1.0 } else { 0.0 });
    }
    Ok((mean(&b), mean(&j)))
}

/// Share of attribute kinds answered with the true value.
pub fn retrieval_accuracy(engine: &Engine, tasks: &ConceptTasks) -> Result<f64> {
    let kinds: Vec<&String> = tasks.concept.attributes.keys().collect();
    if kinds.is_empty() {
        return Err(Error::Contract(format!("{} has no attributes", tasks.concept.identifier)));
    }
    let mut hit = 0;
    for kind in &kinds {
        let a = match retrieve_memory(engine, &grammar::attribute_question(kind)) {
            Err(Error::Truncated(_)) => String::new(),
            other => other?,
        };
        if grammar::answer_value(&a, kind) == Some(tasks.concept.attributes[*kind].as_str()) {
            hit += 1;
        }
    }
    Ok(hit as f64 / kinds.len() as f64)
}

/// Mean PARG oracle score of `tasks` under one replay setting, with traces.
pub fn parg_scores(
    engine: &Engine,
    bench: &Benchmark,
    tasks: &ConceptTasks,
    mode: ReplayMode,
    k: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<ReplayTrace>)> {
    let mut scores = Vec::new();
    let mut gens = Vec::new();
    let mut traces = Vec::new();
    for (i, item) in tasks.eval.parg.iter().enumerate() {
        let s_i = sample_seed(seed, 2, i);
        let (g, mut tr) = match replay_generate(engine, &item.prompt, mode, k, s_i, sampler) {
            Err(Error::Stage { stage, source }) if matches!(*source, Error::Truncated(_)) => {
                let (g, mut tr) = replay_generate(engine, &item.prompt, ReplayMode::Off, 0, s_i, sampler)?;
                tr.truncated_stage = Some(stage.to_string());
                (g, tr)
            }
            other => other?,
        };
        tr.check_calls()?;
        let s = parg_oracle(&bench.world, &g, &tasks.concept, &item.attribute)?;
        tr.score = Some(s);
        scores.push(s);
        gens.push(g);
        traces.push(tr);
    }
    let m = mean(&scores).ok_or_else(|| Error::Contract(format!("{} has no PARG items", tasks.concept.identifier)))?;
    Ok((m, gens, traces))
}

pub fn evaluate_concept(
    engine: &Engine,
    bench: &Benchmark,
    tasks: &ConceptTasks,
    judge: &mut dyn Judge,
    opts: &EvalOptions,
) -> Result<ConceptEval> {
    let sel = &opts.select;
    let id = &tasks.concept.identifier;
    let mut s = ConceptScores {
        concept: id.clone(),
        ..ConceptScores::default()
    };
    let mut retrieval = f64::NAN;
    if sel.understanding {
        let mut preds = Vec::new();
        for it in &tasks.eval.recognition {
            let img = bench.latent(it.image.as_deref().ok_or_else(|| Error::Contract("recognition item without image".into()))?)?;
            let truth = it.present.ok_or_else(|| Error::Contract("recognition item without label".into()))?;
            preds.push((truth, says_yes(&answer(engine, Some(img), &it.question)?)));
        }
        s.rec = Some(recognition_score(&preds)?);
        (s.vqa_bleu, s.vqa_judge) = text_scores(engine, bench, &tasks.eval.vqa)?;
        (s.qa_bleu, s.qa_judge) = text_scores(engine, bench, &tasks.eval.qa)?;
        retrieval = retrieval_accuracy(engine, tasks)?;
    }

    if sel.generation && !tasks.eval.generation.is_empty() {
        let refs: Vec<Vec<f64>> = tasks
            .concept
            .references
            .iter()
            .map(|r| bench.latent(r).map(|z| z.to_vec()))
            .collect::<Result<_>>()?;
        let mut all = Vec::new();
        let mut sim_t = Vec::new();
        for (p, item) in tasks.eval.generation.iter().enumerate() {
            let mut gens = Vec::new();
            for n in 0..sel.samples_per_prompt.max(1) {
                let seed = sample_seed(opts.seed, 1, p * 1000 + n);
                gens.push(engine.sample(&item.prompt, None, seed, &opts.sampler)?);
            }
            sim_t.push(sim_text(&bench.world, &item.prompt, &gens)?);
            all.extend(gens);
        }
        s.sim_i = Some(mean_pairwise_cosine(&all, &refs)?);
        s.sim_t = mean(&sim_t);
        let st = |v: &[Vec<f64>]| v.iter().map(|x| structure_embedding(x)).collect::<Vec<_>>();
        s.sim_dino = Some(mean_pairwise_cosine(&st(&all), &st(&refs))?);
        let idb = |v: &[Vec<f64>]| v.iter().map(|x| identity_block(x)).collect::<Vec<_>>();
        s.subject_sim = Some(mean_pairwise_cosine(&idb(&all), &idb(&refs))?);
    }

    let mut traces = Vec::new();
    let mut parg_no_replay = None;
    if sel.parg {
        let (m, gens, tr) = parg_scores(engine, bench, tasks, opts.mode, opts.exemplars, &opts.sampler, opts.seed)?;
        s.parg_score = Some(m);
        let mut sims = Vec::new();
        for (g, item) in gens.iter().zip(&tasks.eval.parg) {
            sims.push(mean_pairwise_cosine(std::slice::from_ref(g), &[bench.latent(&item.reference)?.to_vec()])?);
        }
        s.parg_sim_i = mean(&sims);
        traces.extend(tr);
        if sel.paired_replay && opts.mode != ReplayMode::Off {
            let (m_off, _, tr_off) = parg_scores(engine, bench, tasks, ReplayMode::Off, 0, &opts.sampler, opts.seed)?;
            parg_no_replay = Some(m_off);
            traces.extend(tr_off);
        }
    }

    let mut edits = Vec::new();
    if sel.editing {
        let (mut sc, mut qi, mut av) = (Vec::new(), Vec::new(), Vec::new());
        for (e, item) in tasks.eval.editing.iter().enumerate() {
            let source = bench.latent(&item.source)?;
            let target = bench.latent(&item.target)?;
            let edited = engine.sample(&item.instruction, Some(source), sample_seed(opts.seed, 3, e), &opts.sampler)?;
            let image_ref = format!("{}/edited", item.source.trim_end_matches("_src"));
            let case = EditCase {
                image_ref: &image_ref,
                instruction: &item.instruction,
                source,
                edited: &edited,
                target,
                category: item.category,
                detail: &item.detail,
            };
            let rec = match edit_scores(judge, &case) {
                Ok(v) => {
                    sc.push(v.sema_c);
                    qi.push(v.qual_i);
                    av.push(v.avg);
                    EditRecord {
                        concept: id.clone(),
                        image_ref,
                        instruction: item.instruction.clone(),
                        category: item.category,
                        scores: Some(v),
                        error: None,
                    }
                }
                Err(Error::Judge(msg)) => {
                    s.judge_missing += 1;
                    EditRecord {
                        concept: id.clone(),
                        image_ref,
                        instruction: item.instruction.clone(),
                        category: item.category,
                        scores: None,
                        error: Some(msg),
                    }
                }
                Err(other) => return Err(other),
            };
            edits.push(rec);
        }
        s.sema_c = mean(&sc);
        s.qual_i = mean(&qi);
        s.edit_avg = mean(&av);
    }
    s.check_ranges()?;
    Ok(ConceptEval {
        scores: s,
        retrieval_accuracy: retrieval,
        parg_no_replay,
        traces,
        edits,
    })
}

//! Evaluation formulas: recognition, BLEU, embedding similarities, PARG
//! and edit judging, plus the per-concept report.

pub mod harness;
pub mod judge;
pub mod report;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::microbench::grammar;
use crate::microbench::world::{block, block_mut, cosine, World, ATTRIBUTE, CONTEXT, D_IMG, IDENTITY, N_BLOCKS};

pub use judge::{edit_scores, EditCase, EditScores, Judge, JudgeRequest, OracleJudge, QualityBand, Rubric, SubprocessJudge};
pub use harness::{evaluate_concept, ConceptEval, EvalOptions, EvalSelection};
pub use report::{aggregate_report, ConceptScores, MetricReport, COLUMNS};

/// `½(recall on positives + recall on negatives)` over `(truth, predicted)`.
pub fn recognition_score(preds: &[(bool, bool)]) -> Result<f64> {
    let recall = |class: bool| -> Result<f64> {
        let of_class: Vec<_> = preds.iter().filter(|(t, _)| *t == class).collect();
        if of_class.is_empty() {
            let name = if class { "positive" } else { "negative" };
            return Err(Error::Contract(format!("recognition set has no {name} items")));
        }
        Ok(of_class.iter().filter(|(_, p)| *p == class).count() as f64 / of_class.len() as f64)
    };
    Ok(0.5 * (recall(true)? + recall(false)?))
}

/// Reading of a recognition answer: `yes …` is positive, anything else
/// negative.
pub fn says_yes(answer: &str) -> bool {
    answer.split_whitespace().next() == Some("yes")
}

fn ngram_counts<'a, 'b>(toks: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with up to 4-grams, uniform weights and the brevity
/// penalty. Orders 2–4 use add-one smoothing, so short sentences do not
/// collapse to zero.
pub fn bleu(candidate: &[&str], reference: &[&str]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("BLEU reference is empty".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refs = ngram_counts(reference, n);
        let matched: usize = cand.iter().map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0))).sum();
        let total = candidate.len().saturating_sub(n - 1);
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln() / 4.0;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok((bp * log_sum.exp()).min(1.0))
}

/// [`bleu`] over whitespace tokens.
pub fn bleu_text(candidate: &str, reference: &str) -> Result<f64> {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    bleu(&c, &r)
}

fn cos_checked(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {} and {} values", a.len(), b.len())));
    }
    cosine(a, b).ok_or_else(|| Error::Domain("cosine of a zero-norm vector".into()))
}

/// Mean cosine over all `(generated, reference)` pairs.
pub fn mean_pairwise_cosine(gen: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<f64> {
    if gen.is_empty() || refs.is_empty() {
        return Err(Error::Contract("pairwise cosine needs at least one vector per side".into()));
    }
    let mut s = 0.0;
    for g in gen {
        for r in refs {
            s += cos_checked(g, r)?;
        }
    }
    Ok(s / (gen.len() * refs.len()) as f64)
}

/// Text embedding of a prompt: the attribute codes of the values it names
/// in the attribute block and the code of its scene in the context block.
pub fn prompt_embedding(world: &World, prompt: &str) -> Result<Vec<f64>> {
    let mut e = vec![0.0; D_IMG];
    for (k, v) in grammar::mentioned_values(prompt) {
        for (x, c) in block_mut(&mut e, ATTRIBUTE).iter_mut().zip(world.attribute_code(k, v)) {
            *x += c;
        }
    }
    if let Some(c) = grammar::mentioned_context(prompt) {
        block_mut(&mut e, CONTEXT).copy_from_slice(world.context_code(c));
    }
    if e.iter().all(|x| *x == 0.0) {
        return Err(Error::Domain(format!("prompt {prompt:?} names no attribute or scene")));
    }
    Ok(e)
}

/// The part of a latent text can describe: attribute and context blocks.
pub fn describable(latent: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; latent.len()];
    for b in [ATTRIBUTE, CONTEXT] {
        block_mut(&mut out, b).copy_from_slice(block(latent, b));
    }
    out
}

/// Mean cosine between the prompt embedding and each generation's
/// describable part.
pub fn sim_text(world: &World, prompt: &str, gen: &[Vec<f64>]) -> Result<f64> {
    let p = prompt_embedding(world, prompt)?;
    let g: Vec<Vec<f64>> = gen.iter().map(|x| describable(x)).collect();
    mean_pairwise_cosine(&g, std::slice::from_ref(&p))
}

/// Structure-weighted embedding: every block scaled to unit norm, so each
/// part of the scene counts equally. Zero blocks stay zero.
pub fn structure_embedding(latent: &[f64]) -> Vec<f64> {
    let mut out = latent.to_vec();
    for b in 0..N_BLOCKS {
        let blk = block_mut(&mut out, b);
        let n = blk.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            blk.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

pub fn identity_block(latent: &[f64]) -> Vec<f64> {
    block(latent, IDENTITY).to_vec()
}

/// Exact-match judgment of a text answer: the value, class or scene word
/// the reference states must appear in the same slot of the answer.
pub fn answer_matches(answer: &str, reference: &str, attribute: Option<&str>) -> bool {
    if let Some(kind) = attribute {
        return match (grammar::answer_value(reference, kind), grammar::answer_value(answer, kind)) {
            (Some(r), Some(a)) => r == a,
            _ => false,
        };
    }
    match (first_and_key(reference), first_and_key(answer)) {
        (Some(r), Some(a)) => r == a,
        _ => false,
    }
}

// class and scene answers end in `<word> .`
fn first_and_key(s: &str) -> Option<(&str, &str)> {
    let w: Vec<&str> = s.split_whitespace().collect();
    w.len().checked_sub(2).map(|i| (w[0], w[i]))
}

//! Explicit knowledge replay: parse the request into an attribute query,
//! answer it from the concept tokens, rewrite the request with the answer
//! and generate from the rewritten prompt.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microbench::grammar;
use crate::microbench::world::{ATTRIBUTE_KINDS, CONTEXTS, VERBS};
use crate::model::engine::Engine;
use crate::model::sampler::SamplerConfig;

pub const MAX_EXEMPLARS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Parse, retrieve and compose as three separate text calls.
    Sequential,
    /// One text call producing query, answer and prompt together.
    Unified,
    /// No replay: generate straight from the request.
    Off,
}

impl ReplayMode {
    pub fn expected_text_calls(self) -> usize {
        match self {
            ReplayMode::Sequential => 3,
            ReplayMode::Unified => 1,
            ReplayMode::Off => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReplayMode::Sequential => "sequential",
            ReplayMode::Unified => "unified",
            ReplayMode::Off => "off",
        }
    }
}

impl std::str::FromStr for ReplayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(ReplayMode::Sequential),
            "unified" => Ok(ReplayMode::Unified),
            "off" => Ok(ReplayMode::Off),
            _ => Err(Error::Config(format!("unknown replay mode {s:?}"))),
        }
    }
}

/// One worked demonstration. Only the request and query are rendered into
/// the parser context; answer and refined prompt complete the record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayExemplar {
    pub request: String,
    pub query: String,
    pub answer: String,
    pub refined: String,
}

impl ReplayExemplar {
    pub fn new(request: &str, query: &str, answer: &str, refined: &str) -> Result<Self> {
        for (name, v) in [("request", request), ("query", query), ("answer", answer), ("refined", refined)] {
            if v.trim().is_empty() {
                return Err(Error::Contract(format!("exemplar {name} is empty")));
            }
        }
        Ok(Self {
            request: request.into(),
            query: query.into(),
            answer: answer.into(),
            refined: refined.into(),
        })
    }
}

// values of the demonstration concept
const DEMO_CLASS: &str = "dog";
const DEMO_VALUES: [&str; 3] = ["excavator", "castle", "apple"];

/// The first `k` of the fixed demonstrations, in their fixed order.
pub fn exemplars(k: usize) -> Result<Vec<ReplayExemplar>> {
    if k > MAX_EXEMPLARS {
        return Err(Error::Config(format!("at most {MAX_EXEMPLARS} exemplars, got {k}")));
    }
    grammar::fixed_exemplars()
        .into_iter()
        .take(k)
        .map(|(r, q)| {
            ReplayExemplar::new(
                &r,
                &q,
                &request_answer(&r, DEMO_CLASS, |k| DEMO_VALUES[k]),
                &refine_request(&r, |k| DEMO_VALUES[k]),
            )
        })
        .collect()
}

/// A random generation request: a replay-style request naming an attribute
/// kind, or a plain one.
pub fn random_request<R: Rng>(rng: &mut R) -> String {
    let verb = *VERBS.choose(rng).expect("non-empty");
    let ctx = if rng.random::<bool>() { Some(*CONTEXTS.choose(rng).expect("non-empty")) } else { None };
    if rng.random::<f64>() < 0.75 {
        grammar::parg_prompt(verb, ATTRIBUTE_KINDS.choose(rng).expect("non-empty"), ctx)
    } else {
        grammar::generation_prompt(verb, &[], ctx)
    }
}

/// The refined prompt for `request` given the concept's attribute values.
/// Only the first requested kind is resolved.
pub fn refine_request(request: &str, value_of: impl Fn(usize) -> &'static str) -> String {
    let kinds = grammar::requested_kinds(request);
    let Some(kind) = kinds.first() else {
        return request.to_string();
    };
    let k = ATTRIBUTE_KINDS.iter().position(|x| x == kind).expect("known kind");
    let words: Vec<&str> = request.split_whitespace().collect();
    let verb = words[0];
    let ctx = grammar::mentioned_context(request).map(|c| CONTEXTS[c]);
    grammar::generation_prompt(verb, &[value_of(k)], ctx)
}

/// The answer the concept gives to the query of `request`.
pub fn request_answer(request: &str, class: &str, value_of: impl Fn(usize) -> &'static str) -> String {
    match grammar::requested_kinds(request).first() {
        Some(kind) => {
            let k = ATTRIBUTE_KINDS.iter().position(|x| x == kind).expect("known kind");
            grammar::attribute_answer(kind, value_of(k))
        }
        None => grammar::class_answer(class),
    }
}

fn demonstrations(exemplars: &[(String, String)]) -> Vec<String> {
    exemplars.iter().map(|(r, q)| grammar::exemplar(r, q)).collect()
}

/// `k` demonstrations followed by the request, as the parser sees them.
pub fn parse_context(exemplars: &[(String, String)], request: &str) -> String {
    let mut s = demonstrations(exemplars);
    s.push(grammar::parse_prompt(request));
    s.join(" ")
}

/// Demonstrations followed by the combined instruction.
pub fn unified_context(exemplars: &[(String, String)], request: &str) -> String {
    let mut s = demonstrations(exemplars);
    s.push(grammar::unified_prompt(request));
    s.join(" ")
}

fn pairs(exemplars: &[ReplayExemplar]) -> Vec<(String, String)> {
    exemplars.iter().map(|e| (e.request.clone(), e.query.clone())).collect()
}

fn non_empty(what: &str, s: &str) -> Result<()> {
    if s.trim().is_empty() {
        return Err(Error::Contract(format!("{what} is empty")));
    }
    Ok(())
}

/// Turn a request into an attribute query. Output outside the question
/// grammar falls back to the describe query.
pub fn parse_intent(engine: &Engine, request: &str, exemplars: &[ReplayExemplar]) -> Result<String> {
    non_empty("request", request)?;
    let out = engine.generate_text(None, &parse_context(&pairs(exemplars), request))?;
    Ok(match grammar::parse_query(&out) {
        Some(_) => out,
        None => grammar::FALLBACK_QUERY.into(),
    })
}

/// Answer `query` from the concept tokens alone.
pub fn retrieve_memory(engine: &Engine, query: &str) -> Result<String> {
    non_empty("query", query)?;
    engine.generate_text(None, query)
}

/// Rewrite `request` around `answer`. An empty answer or empty output
/// passes the request through.
pub fn compose_prompt(engine: &Engine, answer: &str, request: &str) -> Result<String> {
    non_empty("request", request)?;
    if answer.trim().is_empty() {
        return Ok(request.into());
    }
    let out = engine.generate_text(None, &grammar::compose_prompt(answer, request))?;
    Ok(if out.trim().is_empty() { request.into() } else { out })
}

/// Wall time per stage in milliseconds. Stages a mode skips stay zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub parse_ms: f64,
    pub retrieve_ms: f64,
    pub compose_ms: f64,
    pub unified_ms: f64,
    pub generate_ms: f64,
}

impl StageLatency {
    pub fn total_ms(&self) -> f64 {
        self.parse_ms + self.retrieve_ms + self.compose_ms + self.unified_ms + self.generate_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayTrace {
    pub request: String,
    pub query: Option<String>,
    pub answer: Option<String>,
    pub refined: String,
    pub mode: ReplayMode,
    pub exemplars: usize,
    pub seed: u64,
    pub text_calls: usize,
    pub gen_calls: usize,
    /// Filled in by evaluation.
    pub score: Option<f64>,
    pub latency: StageLatency,
    /// Replay stage that ran past the length limit; the request was then
    /// generated without replay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated_stage: Option<String>,
}

impl ReplayTrace {
    pub fn check_calls(&self) -> Result<()> {
        let want = self.mode.expected_text_calls();
        if self.text_calls != want || self.gen_calls != 1 {
            return Err(Error::Contract(format!(
                "{} replay issued {} text and {} generation calls, expected {want} and 1",
                self.mode.name(),
                self.text_calls,
                self.gen_calls
            )));
        }
        Ok(())
    }
}

fn timed<T>(ms: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f();
    *ms = t0.elapsed().as_secs_f64() * 1e3;
    out
}

/// Run the pipeline for one request and generate a latent.
pub fn replay_generate(
    engine: &Engine,
    request: &str,
    mode: ReplayMode,
    k: usize,
    seed: u64,
    sampler: &SamplerConfig,
) -> Result<(Vec<f64>, ReplayTrace)> {
    non_empty("request", request)?;
    let ex = exemplars(k)?;
    let (t0, g0) = engine.calls();
    let mut lat = StageLatency::default();
    let (query, answer, refined) = match mode {
        ReplayMode::Off => (None, None, request.to_string()),
        ReplayMode::Sequential => {
            let q = timed(&mut lat.parse_ms, || parse_intent(engine, request, &ex)).map_err(|e| e.in_stage("parse"))?;
            let a = timed(&mut lat.retrieve_ms, || retrieve_memory(engine, &q)).map_err(|e| e.in_stage("retrieve"))?;
            let r = timed(&mut lat.compose_ms, || compose_prompt(engine, &a, request)).map_err(|e| e.in_stage("compose"))?;
            (Some(q), Some(a), r)
        }
        ReplayMode::Unified => {
            let out = timed(&mut lat.unified_ms, || engine.generate_text(None, &unified_context(&pairs(&ex), request)))
                .map_err(|e| e.in_stage("unified"))?;
            match grammar::split_unified(&out) {
                Some((q, a, r)) if grammar::parse_query(&q).is_some() && !r.is_empty() => (Some(q), Some(a), r),
                _ => (Some(grammar::FALLBACK_QUERY.into()), Some(String::new()), request.to_string()),
            }
        }
    };
    let latent = timed(&mut lat.generate_ms, || engine.sample(&refined, None, seed, sampler)).map_err(|e| e.in_stage("generate"))?;
    let (t1, g1) = engine.calls();
    let trace = ReplayTrace {
        request: request.into(),
        query,
        answer,
        refined,
        mode,
        exemplars: k,
        seed,
        text_calls: t1 - t0,
        gen_calls: g1 - g0,
        score: None,
        latency: lat,
        truncated_stage: None,
    };
    Ok((latent, trace))
}

/// Generation without replay.
pub fn replay_ablate(engine: &Engine, request: &str, seed: u64, sampler: &SamplerConfig) -> Result<(Vec<f64>, ReplayTrace)> {
    replay_generate(engine, request, ReplayMode::Off, 0, seed, sampler)
}

/// One JSON object per trace.
pub fn write_traces(path: &Path, traces: &[ReplayTrace]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<ReplayTrace>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Per-mode mean stage latency, call counts and score.
pub fn write_latency_csv(path: &Path, traces: &[ReplayTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "mode",
        "requests",
        "parse_ms",
        "retrieve_ms",
        "compose_ms",
        "unified_ms",
        "generate_ms",
        "total_ms",
        "text_calls",
        "gen_calls",
        "score",
    ])?;
    for mode in [ReplayMode::Sequential, ReplayMode::Unified, ReplayMode::Off] {
        let ts: Vec<&ReplayTrace> = traces.iter().filter(|t| t.mode == mode).collect();
        if ts.is_empty() {
            continue;
        }
        let n = ts.len() as f64;
        let mean = |f: &dyn Fn(&ReplayTrace) -> f64| ts.iter().map(|t| f(t)).sum::<f64>() / n;
        let scored: Vec<f64> = ts.iter().filter_map(|t| t.score).collect();
        let score = if scored.is_empty() {
            String::new()
        } else {
            format!("{:.6}", scored.iter().sum::<f64>() / scored.len() as f64)
        };
        w.write_record([
            mode.name().to_string(),
            ts.len().to_string(),
            format!("{:.3}", mean(&|t| t.latency.parse_ms)),
            format!("{:.3}", mean(&|t| t.latency.retrieve_ms)),
            format!("{:.3}", mean(&|t| t.latency.compose_ms)),
            format!("{:.3}", mean(&|t| t.latency.unified_ms)),
            format!("{:.3}", mean(&|t| t.latency.generate_ms)),
            format!("{:.3}", mean(&|t| t.latency.total_ms())),
            format!("{}", mean(&|t| t.text_calls as f64)),
            format!("{}", mean(&|t| t.gen_calls as f64)),
            score,
        ])?;
    }
    w.flush()?;
    Ok(())
}

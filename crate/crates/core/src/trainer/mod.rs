//! Rectified-flow samples, the three objectives and the per-concept loop.

pub mod examples;
pub mod pretrain;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::concepts::{system_prompt, ConceptTokens};
use crate::error::{Error, Result};
use crate::microbench::{Benchmark, ConceptTasks, EditTriplet};
use crate::model::{bind_slots, Backbone, ForwardPass, Sequence, SlotVars};
use crate::numcore::{adamw_step, AdamWConfig, OptimState, Tape, Tensor, Var};
use examples::{flow_example, text_example, FlowExample, TextExample};

pub const DEFAULT_LAMBDA: f64 = 400.0;

/// One point on the straight path between a clean latent and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
}

impl FlowSample {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, t: f64) -> Result<Self> {
        let x_t = rf_interpolate(&x0, &x1, t)?;
        Ok(Self { x0, x1, t, x_t })
    }

    /// Draw `x1 ~ N(0, I)` and `t ~ U[0, 1]`.
    pub fn draw<R: Rng + ?Sized>(x0: Vec<f64>, rng: &mut R) -> Self {
        let x1: Vec<f64> = (0..x0.len()).map(|_| StandardNormal.sample(rng)).collect();
        let t = rng.random::<f64>();
        Self::new(x0, x1, t).expect("t drawn from [0, 1)")
    }

    pub fn velocity_target(&self) -> Vec<f64> {
        self.x0.iter().zip(&self.x1).map(|(a, b)| a - b).collect()
    }
}

/// `(1 − t)·x0 + t·x1`, returning the endpoints exactly at `t ∈ {0, 1}`.
pub fn rf_interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
    }
    if x0.len() != x1.len() {
        return Err(Error::Shape(format!("x0 has {} values, x1 has {}", x0.len(), x1.len())));
    }
    if t == 0.0 {
        return Ok(x0.to_vec());
    }
    if t == 1.0 {
        return Ok(x1.to_vec());
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    let n = a.len().max(1) as f64;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Mean over latent dimensions of `(v_hat − (x0 − x1))²`.
pub fn loss_gen_mse(sample: &FlowSample, v_hat: &[f64]) -> Result<f64> {
    mse(v_hat, &sample.velocity_target())
}

/// Same objective on the target of an edit triplet.
pub fn loss_edit_mse(triplet: &EditTriplet, sample: &FlowSample, v_hat: &[f64]) -> Result<f64> {
    if triplet.source.is_empty() {
        return Err(Error::Contract("edit sample has no source latent".into()));
    }
    if triplet.target != sample.x0 {
        return Err(Error::Contract("flow sample is not drawn from the edit target".into()));
    }
    loss_gen_mse(sample, v_hat)
}

/// Mean token cross-entropy of logit rows against `targets`.
pub fn loss_text_ce(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Contract("no supervised tokens".into()));
    }
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.len(), targets.len())));
    }
    let mut tape = Tape::new();
    let c = logits[0].len();
    let flat: Vec<f64> = logits.iter().flatten().copied().collect();
    let l = tape.constant(Tensor::matrix(logits.len(), c, flat)?);
    let ce = tape.cross_entropy(l, targets)?;
    Ok(tape.value(ce).data()[0])
}

/// `ce + λ_image·mse_img + λ_edit·mse_edit`.
pub fn loss_total(ce: f64, mse_img: f64, mse_edit: f64, lambda_image: f64, lambda_edit: f64) -> f64 {
    ce + lambda_image * mse_img + lambda_edit * mse_edit
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskMix {
    pub understanding: f64,
    pub generation: f64,
    pub editing: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            understanding: 1.0 / 3.0,
            generation: 1.0 / 3.0,
            editing: 1.0 / 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenInit {
    Zero,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lambda_image: f64,
    pub lambda_edit: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub task_mix: TaskMix,
    pub n_und: usize,
    pub n_gen: usize,
    /// `false` ties the generation rows to the first understanding rows.
    pub disentangled: bool,
    pub init: TokenInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lambda_image: DEFAULT_LAMBDA,
            lambda_edit: DEFAULT_LAMBDA,
            optimizer: AdamWConfig::default(),
            seed: 0,
            task_mix: TaskMix::default(),
            n_und: 16,
            n_gen: 16,
            disentangled: true,
            init: TokenInit::Zero,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_image < 0.0 || self.lambda_edit < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let m = &self.task_mix;
        if [m.understanding, m.generation, m.editing].iter().any(|w| *w < 0.0 || !w.is_finite())
            || m.understanding + m.generation + m.editing <= 0.0
        {
            return Err(Error::Config("task mix weights must be non-negative with a positive sum".into()));
        }
        if !self.disentangled && self.n_gen > self.n_und {
            return Err(Error::Config("a shared token pool needs n_gen ≤ n_und".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Supervision for one concept, resolved to latents.
#[derive(Clone, Debug, Default)]
pub struct ConceptData {
    pub understanding: Vec<TextDatum>,
    pub generation: Vec<(String, Vec<f64>)>,
    /// `(source, instruction, target)`
    pub editing: Vec<(Vec<f64>, String, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct TextDatum {
    pub image: Option<Vec<f64>>,
    pub prompt: String,
    pub answer: String,
}

impl ConceptData {
    pub fn from_tasks(bench: &Benchmark, tasks: &ConceptTasks) -> Result<Self> {
        let mut d = ConceptData::default();
        for it in &tasks.train.understanding {
            d.understanding.push(TextDatum {
                image: it.image.as_deref().map(|n| bench.latent(n).map(<[f64]>::to_vec)).transpose()?,
                prompt: it.question.clone(),
                answer: it.answer.clone(),
            });
        }
        for g in &tasks.train.generation {
            d.generation.push((g.prompt.clone(), bench.latent(&g.target)?.to_vec()));
        }
        for e in &tasks.train.editing {
            d.editing.push((
                bench.latent(&e.source)?.to_vec(),
                e.instruction.clone(),
                bench.latent(&e.target)?.to_vec(),
            ));
        }
        Ok(d)
    }
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub ce: f64,
    pub mse_img: f64,
    pub mse_edit: f64,
    pub total: f64,
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,ce,mse_img,mse_edit,total")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.step, r.ce, r.mse_img, r.mse_edit, r.total)?;
    }
    Ok(())
}

/// Examples that share one prefix (and its concept rows).
pub(crate) struct Group {
    pub prefix: Sequence,
    pub slots: Option<SlotVars>,
    pub text: Vec<TextExample>,
    pub gen: Vec<FlowExample>,
    pub edit: Vec<FlowExample>,
}

pub(crate) struct BatchLoss {
    pub total: Var,
    pub row: LossRow,
}

fn stack_flow(tape: &mut Tape, fp: &ForwardPass, items: &[(Var, &FlowExample)]) -> Result<Option<Var>> {
    if items.is_empty() {
        return Ok(None);
    }
    let d_img = fp.config.d_img;
    let mut preds = Vec::with_capacity(items.len());
    let mut target = Vec::with_capacity(items.len() * d_img);
    for (h, ex) in items {
        let v = fp.velocity(tape, *h, &ex.seq.image_rows(ex.image))?;
        preds.push(tape.reshape(v, &[1, d_img])?);
        target.extend_from_slice(&ex.target);
    }
    let picks: Vec<(usize, usize)> = (0..preds.len()).map(|i| (i, 0)).collect();
    let p = tape.gather_rows(&preds, &picks)?;
    let t = tape.constant(Tensor::matrix(items.len(), d_img, target)?);
    Ok(Some(tape.mse(p, t)?))
}

/// Encode every group and combine the three objectives.
pub(crate) fn batch_loss(
    tape: &mut Tape,
    fp: &ForwardPass,
    groups: &[Group],
    lambda_image: f64,
    lambda_edit: f64,
) -> Result<BatchLoss> {
    let mut text = Vec::new();
    let mut gen = Vec::new();
    let mut edit = Vec::new();
    for g in groups {
        let suffixes: Vec<Sequence> = g
            .text
            .iter()
            .map(|e| e.seq.clone())
            .chain(g.gen.iter().map(|e| e.seq.clone()))
            .chain(g.edit.iter().map(|e| e.seq.clone()))
            .collect();
        let enc = fp.encode(tape, g.slots, &g.prefix, &suffixes)?;
        let mut h = enc.suffixes.into_iter();
        for e in &g.text {
            text.push((h.next().expect("one output per suffix"), e));
        }
        for e in &g.gen {
            gen.push((h.next().expect("one output per suffix"), e));
        }
        for e in &g.edit {
            edit.push((h.next().expect("one output per suffix"), e));
        }
    }

    let ce = if text.is_empty() {
        None
    } else {
        let sources: Vec<Var> = text.iter().map(|(h, _)| *h).collect();
        let mut picks = Vec::new();
        let mut targets = Vec::new();
        for (i, (_, e)) in text.iter().enumerate() {
            for &(row, tok) in &e.targets {
                picks.push((i, row));
                targets.push(tok);
            }
        }
        let rows = tape.gather_rows(&sources, &picks)?;
        let logits = tape.matmul_nt(rows, fp.params.tok_emb)?;
        Some(tape.cross_entropy(logits, &targets)?)
    };
    let img = stack_flow(tape, fp, &gen)?;
    let ed = stack_flow(tape, fp, &edit)?;

    let value = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).data()[0]).unwrap_or(0.0);
    let row = LossRow {
        step: 0,
        ce: value(tape, ce),
        mse_img: value(tape, img),
        mse_edit: value(tape, ed),
        total: 0.0,
    };
    let mut total = match ce {
        Some(c) => c,
        None => tape.constant(Tensor::vector(vec![0.0])),
    };
    if let Some(m) = img {
        let s = tape.scale(m, lambda_image)?;
        total = tape.add(total, s)?;
    }
    if let Some(m) = ed {
        let s = tape.scale(m, lambda_edit)?;
        total = tape.add(total, s)?;
    }
    let t = tape.value(total).data()[0];
    if !t.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (ce {}, mse_img {}, mse_edit {})",
            row.ce, row.mse_img, row.mse_edit
        )));
    }
    Ok(BatchLoss {
        total,
        row: LossRow { total: t, ..row },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    Und,
    Gen,
    Edit,
}

fn pick_task<R: Rng>(rng: &mut R, weights: &[(Task, f64)]) -> Task {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(t, w) in weights {
        if u < w {
            return t;
        }
        u -= w;
    }
    weights.iter().rev().find(|w| w.1 > 0.0).expect("positive weight").0
}

/// Bind concept rows; a shared pool reuses understanding rows for generation.
pub(crate) fn bind_concept(tape: &mut Tape, tokens: &ConceptTokens, trainable: bool, disentangled: bool) -> Result<SlotVars> {
    if disentangled {
        return Ok(bind_slots(tape, &tokens.und, &tokens.gen, trainable));
    }
    let und = tape.leaf(tokens.und.clone(), trainable);
    let rows: Vec<usize> = (1..=tokens.n_gen()).collect();
    let gen = tape.select_rows(und, &rows)?;
    Ok(SlotVars { und, gen })
}

fn shared_rows(und: &Tensor, n_gen: usize) -> Result<Tensor> {
    let d = und.cols();
    let mut data = Vec::with_capacity(n_gen * d);
    for r in 1..=n_gen {
        data.extend_from_slice(und.row(r));
    }
    Tensor::new(vec![n_gen, d], data)
}

/// Result of personalizing one concept.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub tokens: ConceptTokens,
    pub log: Vec<LossRow>,
}

/// Train fresh concept rows against a frozen backbone.
pub fn train_concept(backbone: &Backbone, data: &ConceptData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = &backbone.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = match cfg.init {
        TokenInit::Zero => ConceptTokens::allocate(cfg.n_und, cfg.n_gen, mcfg.d)?,
        TokenInit::Random => {
            ConceptTokens::allocate_random(cfg.n_und, cfg.n_gen, mcfg.d, 1.0 / (mcfg.d as f64).sqrt(), &mut rng)?
        }
    };
    if !cfg.disentangled {
        tokens.gen = shared_rows(&tokens.und, cfg.n_gen)?;
    }

    let mix = &cfg.task_mix;
    let mut weights = Vec::new();
    if !data.understanding.is_empty() {
        weights.push((Task::Und, mix.understanding));
    }
    if !data.generation.is_empty() {
        weights.push((Task::Gen, mix.generation));
    }
    if !data.editing.is_empty() && cfg.lambda_edit > 0.0 {
        weights.push((Task::Edit, mix.editing));
    }
    if cfg.steps > 0 && weights.iter().all(|w| w.1 <= 0.0) {
        return Err(Error::Contract("no training data for the configured task mix".into()));
    }

    let prefix = system_prompt(cfg.n_und, cfg.n_gen)?;
    let np = mcfg.n_patches();
    let mut state = OptimState::new(cfg.optimizer.clone(), &[tokens.und.clone(), tokens.gen.clone()]);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut group = Group {
            prefix: prefix.clone(),
            slots: None,
            text: Vec::new(),
            gen: Vec::new(),
            edit: Vec::new(),
        };
        for _ in 0..cfg.batch_size {
            match pick_task(&mut rng, &weights) {
                Task::Und => {
                    let d = &data.understanding[rng.random_range(0..data.understanding.len())];
                    group
                        .text
                        .push(text_example(&prefix, d.image.as_deref(), &d.prompt, &d.answer, np)?);
                }
                Task::Gen => {
                    let (p, x0) = &data.generation[rng.random_range(0..data.generation.len())];
                    let s = FlowSample::draw(x0.clone(), &mut rng);
                    group.gen.push(flow_example(&prefix, None, p, &s, np)?);
                }
                Task::Edit => {
                    let (src, instr, tgt) = &data.editing[rng.random_range(0..data.editing.len())];
                    let s = FlowSample::draw(tgt.clone(), &mut rng);
                    group.edit.push(flow_example(&prefix, Some(src), instr, &s, np)?);
                }
            }
        }

        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape, false);
        let slots = bind_concept(&mut tape, &tokens, true, cfg.disentangled)?;
        group.slots = Some(slots);
        let fp = ForwardPass::new(mcfg, &bound);
        let loss = batch_loss(&mut tape, &fp, std::slice::from_ref(&group), cfg.lambda_image, cfg.lambda_edit)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                other => other,
            })?;
        log.push(LossRow { step, ..loss.row });
        let grads = tape.backward(loss.total)?;
        let mut g = vec![
            grads.get(slots.und).unwrap_or_else(|| Tensor::zeros(tokens.und.shape())),
            grads.get(slots.gen).unwrap_or_else(|| Tensor::zeros(tokens.gen.shape())),
        ];
        if !cfg.disentangled {
            g[1] = Tensor::zeros(tokens.gen.shape());
        }
        let mut params = [tokens.und.clone(), tokens.gen.clone()];
        adamw_step(&mut params, &mut g, &mut state)?;
        let [u, gn] = params;
        tokens.gen = if cfg.disentangled { gn } else { shared_rows(&u, cfg.n_gen)? };
        tokens.und = u;
    }
    tokens.round_to_f32();
    Ok(TrainOutcome { tokens, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_examples() {
        let x0 = vec![2.0, 0.0];
        let x1 = vec![0.0, 2.0];
        assert_eq!(rf_interpolate(&x0, &x1, 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(rf_interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(rf_interpolate(&x0, &x1, 1.0).unwrap(), x1);
        assert!(matches!(rf_interpolate(&x0, &x1, 1.5), Err(Error::Domain(_))));
        assert!(matches!(rf_interpolate(&x0, &[1.0], 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn gen_mse_reduction_and_gradient() {
        let s = FlowSample::new(vec![3.0, 4.0], vec![0.0, 0.0], 0.3).unwrap();
        assert_eq!(loss_gen_mse(&s, &[0.0, 0.0]).unwrap(), 12.5);
        assert_eq!(loss_gen_mse(&s, &[3.0, 4.0]).unwrap(), 0.0);
        // d/dv of the mean is 2(v − target)/d
        let v = [1.0, -2.0];
        let h = 1e-6;
        for i in 0..2 {
            let mut p = v;
            let mut m = v;
            p[i] += h;
            m[i] -= h;
            let fd = (loss_gen_mse(&s, &p).unwrap() - loss_gen_mse(&s, &m).unwrap()) / (2.0 * h);
            let analytic = 2.0 * (v[i] - s.velocity_target()[i]) / 2.0;
            assert!((fd - analytic).abs() < 1e-6);
        }
    }

    #[test]
    fn edit_mse_shares_the_kernel() {
        let trip = EditTriplet {
            source: vec![1.0; 4],
            instruction: "flip the photo".into(),
            target: vec![0.5; 4],
            category: crate::microbench::EditCategory::SpatialTransformation,
            detail: crate::microbench::EditDetail::Flip,
        };
        let s = FlowSample::new(trip.target.clone(), vec![0.1, 0.2, 0.3, 0.4], 0.7).unwrap();
        let v = [0.3, -0.1, 0.0, 2.0];
        assert_eq!(loss_edit_mse(&trip, &s, &v).unwrap(), loss_gen_mse(&s, &v).unwrap());
        assert_eq!(loss_edit_mse(&trip, &s, &s.velocity_target()).unwrap(), 0.0);
        let mut bad = trip.clone();
        bad.source.clear();
        assert!(matches!(loss_edit_mse(&bad, &s, &v), Err(Error::Contract(_))));
    }

    #[test]
    fn text_ce_matches_per_token_sum() {
        let logits = vec![vec![0.1, 2.0, -1.0], vec![1.0, 1.0, 1.0], vec![-0.5, 0.0, 3.0]];
        let targets = [1, 0, 2];
        let mut sum = 0.0;
        for (row, &t) in logits.iter().zip(&targets) {
            let z: f64 = row.iter().map(|x: &f64| x.exp()).sum();
            sum += -(row[t].exp() / z).ln();
        }
        assert!((loss_text_ce(&logits, &targets).unwrap() - sum / 3.0).abs() < 1e-12);
        assert!((loss_text_ce(&[vec![0.0; 5]], &[2]).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(loss_text_ce(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn total_examples() {
        assert_eq!(loss_total(1.0, 0.01, 0.02, 400.0, 400.0), 13.0);
        assert_eq!(loss_total(0.0, 0.0, 0.0, 400.0, 400.0), 0.0);
        assert_eq!(loss_total(1.5, 0.25, 9.0, 2.0, 0.0), 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda_edit: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            disentangled: false,
            n_und: 2,
            n_gen: 3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

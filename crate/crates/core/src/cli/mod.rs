//! Experiment orchestration behind the `duet` binary.

pub mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concepts::{load_concept, save_concept, trainable_mask};
use crate::error::{Error, Result};
use crate::metrics::harness::{parg_scores, EditRecord};
use crate::metrics::{aggregate_report, evaluate_concept, ConceptScores, EvalOptions, EvalSelection, Judge, OracleJudge, SubprocessJudge, COLUMNS};
use crate::microbench::world::{block, cosine, IDENTITY};
use crate::microbench::{build_benchmark, Benchmark, ConceptTasks, MicroWorldConfig};
use crate::model::engine::Engine;
use crate::model::sampler::SamplerConfig;
use crate::model::{Backbone, ModelConfig};
use crate::replay::{replay_generate, write_latency_csv, write_traces, ReplayMode, ReplayTrace, MAX_EXEMPLARS};
use crate::trainer::pretrain::{pretrain, PretrainConfig};
use crate::trainer::{train_concept, write_loss_csv, ConceptData, LossRow, TrainConfig};

pub const OUT_ENV: &str = "DUET_OUT";
pub const DEFAULT_OUT: &str = "duet-out";
pub const DEFAULT_TOKENS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplaySettings {
    pub mode: ReplayMode,
    pub exemplars: usize,
}

impl Default for ReplaySettings {
    fn default() -> Self {
        Self {
            mode: ReplayMode::Sequential,
            exemplars: MAX_EXEMPLARS,
        }
    }
}

/// Locations of existing artifacts; unset entries resolve inside the
/// output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputPaths {
    pub bench: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
}

/// Everything a run depends on. `seed` drives the benchmark, concept
/// training and sampling; the backbone has its own `pretrain.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: MicroWorldConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalSelection,
    pub replay: ReplaySettings,
    /// External judge program and its arguments; the oracle judge otherwise.
    pub judge: Option<Vec<String>>,
    pub inputs: InputPaths,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: MicroWorldConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalSelection::default(),
            replay: ReplaySettings::default(),
            judge: None,
            inputs: InputPaths::default(),
            output_dir: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Push shared settings into the sub-configs.
    pub fn resolve(&mut self) {
        self.pretrain.model = self.model.clone();
        self.pretrain.codebook_seed = self.world.codebook_seed;
        self.world.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.replay.exemplars > MAX_EXEMPLARS {
            return Err(Error::Config(format!("at most {MAX_EXEMPLARS} exemplars")));
        }
        if self.model.d_img != crate::microbench::world::D_IMG {
            return Err(Error::Config(format!("d_img must be {} to match the micro world", crate::microbench::world::D_IMG)));
        }
        for p in [&self.inputs.bench, &self.inputs.backbone].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if let Some(j) = &self.judge {
            if j.is_empty() {
                return Err(Error::Config("judge command is empty".into()));
            }
        }
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "duet", version, about = "Concept-token personalization of a dual-expert model on a procedural micro world")]
pub struct Cli {
    /// JSON experiment config; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the effective config as JSON.
    Config,
    /// Generate the benchmark.
    Benchgen {
        #[arg(long)]
        concepts: Option<usize>,
    },
    /// Train the shared backbone.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Personalize every benchmark concept.
    Train(TrainArgs),
    /// Sample latents for one concept and prompt.
    Sample(SampleArgs),
    /// Score trained concepts.
    Eval(EvalArgs),
    /// Train and score at several token counts.
    AblateTokens(AblateArgs),
    /// Run both replay modes on one request and print the traces.
    ReplayDemo(DemoArgs),
}

#[derive(Args, Debug, Default)]
pub struct Selection {
    /// Only these concept identifiers.
    #[arg(long = "concept")]
    pub concepts: Vec<String>,
    /// Only the first N concepts.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub select: Selection,
    #[arg(long)]
    pub steps: Option<usize>,
    /// One shared pool: generation rows are tied to understanding rows.
    #[arg(long)]
    pub no_disentangled: bool,
    /// Drop the edit objective (its weight becomes 0).
    #[arg(long)]
    pub no_edit_data: bool,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub concept: String,
    #[arg(long)]
    pub prompt: String,
    /// Benchmark latent to edit.
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long)]
    pub sampler_steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long)]
    pub renorm: Option<String>,
    /// Also sample with this many steps and report the difference.
    #[arg(long)]
    pub convergence: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub select: Selection,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub exemplars: Option<usize>,
    /// Also score PARG for every exemplar count 0..=6.
    #[arg(long)]
    pub exemplar_sweep: bool,
    /// External judge program.
    #[arg(long)]
    pub judge: Option<String>,
    #[arg(long = "judge-arg", allow_hyphen_values = true)]
    pub judge_args: Vec<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub select: Selection,
    /// Total token counts, split evenly between the two pools.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    pub tokens: Vec<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(long)]
    pub concept: Option<String>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub exemplars: Option<usize>,
}

/// Process exit status for an error: 2 for configuration problems, 3 for
/// numeric failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Numeric(_) => 3,
        Error::Stage { source, .. } => exit_code(source),
        _ => 1,
    }
}

/// Output directory layout.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn bench(&self) -> PathBuf {
        self.root.join("bench")
    }
    pub fn backbone(&self) -> PathBuf {
        self.root.join("backbone.ckpt")
    }
    pub fn concepts(&self) -> PathBuf {
        self.root.join("concepts")
    }
    pub fn concept(&self, id: &str) -> PathBuf {
        self.concepts().join(format!("{id}.ckpt"))
    }
    pub fn loss(&self, id: &str) -> PathBuf {
        self.root.join("loss").join(format!("{id}.csv"))
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        let root = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        cfg.output_dir = Some(root.clone());
        cfg.resolve();
        Ok(Self {
            cfg,
            layout: Layout { root },
        })
    }

    fn bench_dir(&self) -> PathBuf {
        self.cfg.inputs.bench.clone().unwrap_or_else(|| self.layout.bench())
    }

    fn backbone_path(&self) -> PathBuf {
        self.cfg.inputs.backbone.clone().unwrap_or_else(|| self.layout.backbone())
    }

    pub fn load_bench(&self) -> Result<Benchmark> {
        let dir = self.bench_dir();
        if !dir.join("manifest.json").exists() {
            return Err(Error::Config(format!("no benchmark at {}; run `duet benchgen` first", dir.display())));
        }
        Benchmark::load(&dir)
    }

    pub fn load_backbone(&self) -> Result<Backbone> {
        let p = self.backbone_path();
        if !p.exists() {
            return Err(Error::Config(format!("no backbone at {}; run `duet pretrain` first", p.display())));
        }
        let (b, _) = Backbone::load(&p)?;
        if b.config != self.cfg.model {
            return Err(Error::Config(format!("{} was trained with a different model config", p.display())));
        }
        Ok(b)
    }

    fn judge(&self) -> Result<Box<dyn Judge>> {
        Ok(match &self.cfg.judge {
            Some(cmd) => Box::new(SubprocessJudge::spawn(&cmd[0], &cmd[1..])?),
            None => Box::new(OracleJudge::new(&crate::microbench::World::new(self.cfg.world.codebook_seed), self.cfg.seed)?),
        })
    }
}

fn select<'a>(bench: &'a Benchmark, sel: &Selection) -> Result<Vec<&'a ConceptTasks>> {
    let mut out: Vec<&ConceptTasks> = if sel.concepts.is_empty() {
        bench.concepts.iter().collect()
    } else {
        sel.concepts.iter().map(|id| bench.concept(id)).collect::<Result<_>>()?
    };
    if let Some(n) = sel.limit {
        out.truncate(n);
    }
    if out.is_empty() {
        return Err(Error::Config("no concepts selected".into()));
    }
    Ok(out)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn loss_plot(path: &Path, title: &str, log: &[LossRow]) -> Result<()> {
    // a running mean keeps the curves readable
    let window = (log.len() / 100).max(1);
    let smooth = |f: fn(&LossRow) -> f64| -> Vec<(f64, f64)> {
        log.chunks(window)
            .map(|c| (c[0].step as f64, c.iter().map(f).sum::<f64>() / c.len() as f64))
            .collect()
    };
    plot::line_chart(
        path,
        title,
        &[
            ("ce".into(), smooth(|r| r.ce)),
            ("mse_img".into(), smooth(|r| r.mse_img)),
            ("mse_edit".into(), smooth(|r| r.mse_edit)),
        ],
    )
}

pub fn run(cli: Cli) -> Result<()> {
    let mut ctx = Context::from_cli(&cli)?;
    match cli.command {
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&ctx.cfg)?);
            Ok(())
        }
        Command::Benchgen { concepts } => {
            if let Some(n) = concepts {
                ctx.cfg.world.n_concepts = n;
            }
            cmd_benchgen(&ctx)
        }
        Command::Pretrain { steps } => {
            if let Some(s) = steps {
                ctx.cfg.pretrain.steps = s;
            }
            cmd_pretrain(&ctx)
        }
        Command::Train(a) => {
            if let Some(s) = a.steps {
                ctx.cfg.train.steps = s;
            }
            if let Some(lr) = a.lr {
                ctx.cfg.train.optimizer.lr = lr;
            }
            if a.no_disentangled {
                ctx.cfg.train.disentangled = false;
            }
            if a.no_edit_data {
                ctx.cfg.train.lambda_edit = 0.0;
            }
            cmd_train(&ctx, &a.select)
        }
        Command::Sample(a) => {
            if let Some(s) = a.sampler_steps {
                ctx.cfg.sampler.steps = s;
            }
            if let Some(s) = a.cfg_scale {
                ctx.cfg.sampler.cfg_text_scale = s;
            }
            if let Some(r) = &a.renorm {
                ctx.cfg.sampler.renorm = serde_json::from_value(serde_json::Value::String(r.clone()))
                    .map_err(|_| Error::Config(format!("unknown renorm {r:?}")))?;
            }
            cmd_sample(&ctx, &a)
        }
        Command::Eval(a) => {
            if let Some(m) = &a.mode {
                ctx.cfg.replay.mode = m.parse()?;
            }
            if let Some(k) = a.exemplars {
                ctx.cfg.replay.exemplars = k;
            }
            if let Some(j) = &a.judge {
                let mut cmd = vec![j.clone()];
                cmd.extend(a.judge_args.iter().cloned());
                ctx.cfg.judge = Some(cmd);
            }
            cmd_eval(&ctx, &a.select, a.exemplar_sweep)
        }
        Command::AblateTokens(a) => {
            if let Some(s) = a.steps {
                ctx.cfg.train.steps = s;
            }
            cmd_ablate_tokens(&ctx, &a.select, &a.tokens)
        }
        Command::ReplayDemo(a) => {
            if let Some(k) = a.exemplars {
                ctx.cfg.replay.exemplars = k;
            }
            cmd_replay_demo(&ctx, a.concept.as_deref(), a.prompt.as_deref())
        }
    }
}

pub fn cmd_benchgen(ctx: &Context) -> Result<()> {
    ctx.cfg.validate()?;
    let bench = build_benchmark(&ctx.cfg.world)?;
    let dir = ctx.layout.bench();
    let m = bench.save(&dir)?;
    println!("benchmark: {} concepts in {}", m.n_concepts, dir.display());
    println!("  categories: {:?}", m.categories);
    println!("  eval edits: {:?}", m.eval_edit_categories);
    println!("  latents sha256 {}", m.latents_sha256);
    println!("  tasks   sha256 {}", m.tasks_sha256);
    Ok(())
}

pub fn cmd_pretrain(ctx: &Context) -> Result<()> {
    ctx.cfg.validate()?;
    let pc = &ctx.cfg.pretrain;
    let t0 = Instant::now();
    let every = (pc.steps / 20).max(1);
    let (backbone, log) = pretrain(pc, |r| {
        if r.step % every == 0 {
            eprintln!("pretrain step {:>6}  ce {:.4}  mse_img {:.4}  mse_edit {:.4}", r.step, r.ce, r.mse_img, r.mse_edit);
        }
    })?;
    let mut meta = BTreeMap::new();
    meta.insert("pretrain".into(), serde_json::to_value(pc)?);
    backbone.save(&ctx.layout.backbone(), meta)?;
    write_loss_csv(&ctx.layout.root.join("pretrain_loss.csv"), &log)?;
    loss_plot(&ctx.layout.plots().join("pretrain_loss.svg"), "backbone training loss", &log)?;
    println!(
        "backbone: {} parameters, fingerprint {}, {} steps in {:.1}s",
        backbone.scalar_count(),
        backbone.fingerprint(),
        pc.steps,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainRecord {
    concept: String,
    steps: usize,
    n_und: usize,
    n_gen: usize,
    disentangled: bool,
    lambda_image: f64,
    lambda_edit: f64,
    trainable_scalars: usize,
    final_loss: Option<LossRow>,
    tokens_sha256: String,
}

pub fn cmd_train(ctx: &Context, sel: &Selection) -> Result<()> {
    ctx.cfg.validate()?;
    let bench = ctx.load_bench()?;
    let backbone = ctx.load_backbone()?;
    let mut records = Vec::new();
    for tasks in select(&bench, sel)? {
        let id = &tasks.concept.identifier;
        let t0 = Instant::now();
        let data = ConceptData::from_tasks(&bench, tasks)?;
        let out = train_concept(&backbone, &data, &ctx.cfg.train)?;
        let path = ctx.layout.concept(id);
        std::fs::create_dir_all(ctx.layout.concepts())?;
        save_concept(&path, id, &out.tokens)?;
        write_json(&ctx.layout.concepts().join(format!("{id}.json")), &tasks.concept)?;
        write_loss_csv(&ctx.layout.loss(id), &out.log)?;
        loss_plot(&ctx.layout.plots().join(format!("loss_{id}.svg")), &format!("{id} training loss"), &out.log)?;
        let mask = trainable_mask(&backbone, &out.tokens);
        let last = out.log.last().copied();
        println!(
            "{id}: {} steps in {:.1}s, final total {}",
            ctx.cfg.train.steps,
            t0.elapsed().as_secs_f64(),
            last.map(|r| format!("{:.4}", r.total)).unwrap_or_else(|| "-".into())
        );
        records.push(TrainRecord {
            concept: id.clone(),
            steps: ctx.cfg.train.steps,
            n_und: out.tokens.n_und(),
            n_gen: out.tokens.n_gen(),
            disentangled: ctx.cfg.train.disentangled,
            lambda_image: ctx.cfg.train.lambda_image,
            lambda_edit: ctx.cfg.train.lambda_edit,
            trainable_scalars: mask.trainable_scalars(),
            final_loss: last,
            tokens_sha256: hex::encode(Sha256::digest(std::fs::read(&path)?)),
        });
    }
    write_json(&ctx.layout.root.join("train_summary.json"), &records)
}

fn load_tokens(ctx: &Context, backbone: &Backbone, id: &str) -> Result<crate::concepts::ConceptTokens> {
    let p = ctx.layout.concept(id);
    if !p.exists() {
        return Err(Error::Config(format!("no checkpoint for {id} at {}; run `duet train` first", p.display())));
    }
    load_concept(&p, backbone.config.d)
}

#[derive(Serialize)]
struct SampleOutput {
    concept: String,
    prompt: String,
    source: Option<String>,
    sampler: SamplerConfig,
    seeds: Vec<u64>,
    latents: Vec<Vec<f64>>,
    identity_cosine: Vec<f64>,
    convergence: Option<Convergence>,
}

#[derive(Serialize)]
struct Convergence {
    steps: usize,
    max_abs_diff: f64,
}

pub fn cmd_sample(ctx: &Context, a: &SampleArgs) -> Result<()> {
    ctx.cfg.validate()?;
    let bench = ctx.load_bench()?;
    let backbone = ctx.load_backbone()?;
    let tasks = bench.concept(&a.concept)?;
    let tokens = load_tokens(ctx, &backbone, &a.concept)?;
    let engine = Engine::new(&backbone, &tokens)?;
    let source = a.source.as_deref().map(|s| bench.latent(s)).transpose()?;
    let id_code = bench.world.identity_code(tasks.concept.identity)?;
    let seeds: Vec<u64> = (0..a.samples as u64).map(|i| ctx.cfg.seed.wrapping_add(i)).collect();
    let mut latents = Vec::new();
    let mut id_cos = Vec::new();
    for &s in &seeds {
        let z = engine.sample(&a.prompt, source, s, &ctx.cfg.sampler)?;
        let c = cosine(block(&z, IDENTITY), &id_code).unwrap_or(0.0);
        println!("seed {s}: identity cosine {c:.4}");
        id_cos.push(c);
        latents.push(z);
    }
    let convergence = match a.convergence {
        Some(steps) => {
            let fine = SamplerConfig {
                steps,
                ..ctx.cfg.sampler.clone()
            };
            let z = engine.sample(&a.prompt, source, seeds[0], &fine)?;
            let d = z.iter().zip(&latents[0]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            println!("{} vs {steps} steps: max |Δ| = {d:.3e}", ctx.cfg.sampler.steps);
            Some(Convergence { steps, max_abs_diff: d })
        }
        None => None,
    };
    let out = SampleOutput {
        concept: a.concept.clone(),
        prompt: a.prompt.clone(),
        source: a.source.clone(),
        sampler: ctx.cfg.sampler.clone(),
        seeds,
        latents,
        identity_cosine: id_cos,
        convergence,
    };
    write_json(&ctx.layout.root.join("samples").join(format!("{}.json", a.concept)), &out)
}

#[derive(Clone, Debug, Serialize)]
struct PairedRow {
    concept: String,
    variant: String,
    mode: String,
    exemplars: usize,
    parg_score: f64,
}

pub fn cmd_eval(ctx: &Context, sel: &Selection, sweep: bool) -> Result<()> {
    ctx.cfg.validate()?;
    let bench = ctx.load_bench()?;
    let backbone = ctx.load_backbone()?;
    let chosen = select(&bench, sel)?;
    let mut judge = ctx.judge()?;
    let opts = EvalOptions {
        select: ctx.cfg.eval.clone(),
        mode: ctx.cfg.replay.mode,
        exemplars: ctx.cfg.replay.exemplars,
        sampler: ctx.cfg.sampler.clone(),
        seed: ctx.cfg.seed,
    };
    let dir = ctx.layout.eval();
    std::fs::create_dir_all(&dir)?;
    let mut rows: Vec<ConceptScores> = Vec::new();
    let mut traces: Vec<ReplayTrace> = Vec::new();
    let mut edits: Vec<EditRecord> = Vec::new();
    let mut paired = Vec::new();
    let mut retrieval = csv::Writer::from_path(dir.join("retrieval.csv"))?;
    retrieval.write_record(["concept", "retrieval_accuracy"])?;
    let mut sweep_rows: Vec<[f64; MAX_EXEMPLARS + 1]> = Vec::new();
    for tasks in &chosen {
        let id = &tasks.concept.identifier;
        let t0 = Instant::now();
        let tokens = load_tokens(ctx, &backbone, id)?;
        let engine = Engine::new(&backbone, &tokens)?;
        let ev = evaluate_concept(&engine, &bench, tasks, judge.as_mut(), &opts)?;
        retrieval.write_record([id.clone(), format!("{}", ev.retrieval_accuracy)])?;
        if let Some(p) = ev.scores.parg_score {
            paired.push(PairedRow {
                concept: id.clone(),
                variant: "replay".into(),
                mode: opts.mode.name().into(),
                exemplars: opts.exemplars,
                parg_score: p,
            });
        }
        if let Some(p) = ev.parg_no_replay {
            paired.push(PairedRow {
                concept: id.clone(),
                variant: "no_replay".into(),
                mode: ReplayMode::Off.name().into(),
                exemplars: 0,
                parg_score: p,
            });
        }
        if sweep {
            let mut r = [0.0; MAX_EXEMPLARS + 1];
            for (k, slot) in r.iter_mut().enumerate() {
                *slot = parg_scores(&engine, &bench, tasks, ReplayMode::Sequential, k, &ctx.cfg.sampler, ctx.cfg.seed)?.0;
            }
            sweep_rows.push(r);
        }
        println!(
            "{id}: Rec {}  PARG {}  edit-Avg {}  ({:.1}s)",
            fmt_opt(ev.scores.rec),
            fmt_opt(ev.scores.parg_score),
            fmt_opt(ev.scores.edit_avg),
            t0.elapsed().as_secs_f64()
        );
        rows.push(ev.scores);
        traces.extend(ev.traces);
        edits.extend(ev.edits);
    }
    retrieval.flush()?;
    let report = aggregate_report(rows)?;
    report.write_csv(&dir.join("report.csv"))?;
    write_traces(&dir.join("traces.jsonl"), &traces)?;
    write_latency_csv(&dir.join("stage_latency.csv"), &traces)?;
    let mut ew = std::io::BufWriter::new(std::fs::File::create(dir.join("edits.jsonl"))?);
    for e in &edits {
        use std::io::Write;
        serde_json::to_writer(&mut ew, e)?;
        ew.write_all(b"\n")?;
    }
    drop(ew);

    let mut pw = csv::Writer::from_path(dir.join("replay_ablation.csv"))?;
    for v in ["replay", "no_replay"] {
        let these: Vec<&PairedRow> = paired.iter().filter(|r| r.variant == v).collect();
        for r in &these {
            pw.serialize(r)?;
        }
        if let Some(first) = these.first() {
            pw.serialize(PairedRow {
                concept: "mean".into(),
                parg_score: these.iter().map(|r| r.parg_score).sum::<f64>() / these.len() as f64,
                ..(*first).clone()
            })?;
        }
    }
    pw.flush()?;

    let bars: Vec<(String, f64)> = COLUMNS
        .iter()
        .zip(report.mean.values())
        .filter_map(|(c, v)| v.map(|v| (c.to_string(), v)))
        .collect();
    plot::bar_chart(&ctx.layout.plots().join("report.svg"), "mean scores over concepts", &bars)?;

    if sweep {
        let mut w = csv::Writer::from_path(dir.join("exemplar_sweep.csv"))?;
        let mut header = vec!["exemplars".to_string(), "mean".to_string()];
        header.extend(chosen.iter().map(|t| t.concept.identifier.clone()));
        w.write_record(&header)?;
        let mut curve = Vec::new();
        for k in 0..=MAX_EXEMPLARS {
            let vals: Vec<f64> = sweep_rows.iter().map(|r| r[k]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            curve.push((k as f64, m));
            let mut rec = vec![k.to_string(), format!("{m}")];
            rec.extend(vals.iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        plot::line_chart(&ctx.layout.plots().join("exemplar_sweep.svg"), "PARG score by exemplar count", &[("mean".into(), curve)])?;
    }
    println!("mean: {}", COLUMNS.iter().zip(report.mean.values()).map(|(c, v)| format!("{c} {}", fmt_opt(v))).collect::<Vec<_>>().join("  "));
    if report.mean.judge_missing > 0 {
        println!("{} edit judgments failed and were excluded", report.mean.judge_missing);
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

/// Split a total token count evenly between the two pools.
pub fn token_split(n: usize) -> Result<(usize, usize)> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::Config(format!("token count {n} cannot be split evenly into two non-empty pools")));
    }
    Ok((n / 2, n / 2))
}

pub fn cmd_ablate_tokens(ctx: &Context, sel: &Selection, counts: &[usize]) -> Result<()> {
    ctx.cfg.validate()?;
    let splits: Vec<(usize, usize)> = counts.iter().map(|&n| token_split(n)).collect::<Result<_>>()?;
    let bench = ctx.load_bench()?;
    let backbone = ctx.load_backbone()?;
    let chosen = select(&bench, sel)?;
    let mut judge = ctx.judge()?;
    let opts = EvalOptions {
        select: EvalSelection {
            paired_replay: false,
            ..ctx.cfg.eval.clone()
        },
        mode: ctx.cfg.replay.mode,
        exemplars: ctx.cfg.replay.exemplars,
        sampler: ctx.cfg.sampler.clone(),
        seed: ctx.cfg.seed,
    };
    let cols = ["Rec", "QA-judge", "sim-I", "subject-sim", "PARG-score", "edit-Avg"];
    let dir = ctx.layout.root.join("ablate_tokens");
    std::fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("tokens.csv"))?;
    let mut header = vec!["tokens", "n_und", "n_gen", "default_size"];
    header.extend(cols);
    w.write_record(&header)?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = cols.iter().map(|c| (c.to_string(), Vec::new())).collect();
    for (&n, &(nu, ng)) in counts.iter().zip(&splits) {
        let train = TrainConfig {
            n_und: nu,
            n_gen: ng,
            ..ctx.cfg.train.clone()
        };
        let mut rows = Vec::new();
        for tasks in &chosen {
            let data = ConceptData::from_tasks(&bench, tasks)?;
            let out = train_concept(&backbone, &data, &train)?;
            let engine = Engine::new(&backbone, &out.tokens)?;
            rows.push(evaluate_concept(&engine, &bench, tasks, judge.as_mut(), &opts)?.scores);
        }
        let mean = aggregate_report(rows)?.mean;
        let mut rec = vec![n.to_string(), nu.to_string(), ng.to_string(), (n == DEFAULT_TOKENS).to_string()];
        for (i, c) in cols.iter().enumerate() {
            let v = mean.get(c);
            rec.push(v.map(|x| format!("{x}")).unwrap_or_default());
            if let Some(v) = v {
                series[i].1.push((n as f64, v));
            }
        }
        println!("N = {n}: {}", rec[4..].join(", "));
        w.write_record(&rec)?;
    }
    w.flush()?;
    plot::line_chart(&ctx.layout.plots().join("token_ablation.svg"), "scores by token count", &series)
}

pub fn cmd_replay_demo(ctx: &Context, concept: Option<&str>, prompt: Option<&str>) -> Result<()> {
    ctx.cfg.validate()?;
    let bench = ctx.load_bench()?;
    let backbone = ctx.load_backbone()?;
    let tasks = match concept {
        Some(id) => bench.concept(id)?,
        None => bench.concepts.first().ok_or_else(|| Error::Config("benchmark is empty".into()))?,
    };
    let id = &tasks.concept.identifier;
    let request = match prompt {
        Some(p) => p.to_string(),
        None => tasks
            .eval
            .parg
            .first()
            .map(|p| p.prompt.clone())
            .ok_or_else(|| Error::Config(format!("{id} has no PARG prompts")))?,
    };
    let tokens = load_tokens(ctx, &backbone, id)?;
    let engine = Engine::new(&backbone, &tokens)?;
    let mut traces = Vec::new();
    for mode in [ReplayMode::Sequential, ReplayMode::Unified] {
        let (_, tr) = replay_generate(&engine, &request, mode, ctx.cfg.replay.exemplars, ctx.cfg.seed, &ctx.cfg.sampler)?;
        tr.check_calls()?;
        println!("[{}] {}", mode.name(), id);
        println!("  T  = {}", tr.request);
        println!("  Q  = {}", tr.query.as_deref().unwrap_or("-"));
        println!("  A  = {}", tr.answer.as_deref().unwrap_or("-"));
        println!("  T^ = {}", tr.refined);
        println!("  calls: {} text + {} generation", tr.text_calls, tr.gen_calls);
        let l = &tr.latency;
        println!(
            "  ms: parse {:.1}  retrieve {:.1}  compose {:.1}  unified {:.1}  generate {:.1}  total {:.1}",
            l.parse_ms,
            l.retrieve_ms,
            l.compose_ms,
            l.unified_ms,
            l.generate_ms,
            l.total_ms()
        );
        traces.push(tr);
    }
    let seq = traces[0].latency.total_ms();
    let uni = traces[1].latency.total_ms();
    if uni > 0.0 {
        println!("unified speedup over sequential: {:.2}x", seq / uni);
    }
    write_json(&ctx.layout.root.join("replay_demo.json"), &traces)?;
    write_latency_csv(&ctx.layout.root.join("replay_demo_latency.csv"), &traces)
}

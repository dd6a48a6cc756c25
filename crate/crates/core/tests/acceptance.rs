//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Criteria 9 to 12 use a backbone pretrained with the default config
//! (cached between runs, see `common`).

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use duet::cli::{run, Cli};
use duet::concepts::ConceptTokens;
use duet::metrics::harness::{parg_scores, retrieval_accuracy};
use duet::metrics::{bleu_text, mean_pairwise_cosine, recognition_score, EditScores};
use duet::metrics::{evaluate_concept, EvalOptions, EvalSelection, OracleJudge};
use duet::microbench::{build_benchmark, Benchmark, MicroWorldConfig};
use duet::model::engine::Engine;
use duet::model::sampler::{euler_sample, SamplerConfig, Velocities};
use duet::model::{bind_slots, Backbone, ForwardPass, ModelConfig, Sequence, SequenceBuilder};
use duet::numcore::gradcheck::check_gradients;
use duet::numcore::{Tape, Tensor, Var};
use duet::replay::{read_traces, ReplayMode, ReplayTrace, MAX_EXEMPLARS};
use duet::trainer::{loss_gen_mse, loss_total, rf_interpolate, train_concept, ConceptData, FlowSample, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn out_dir() -> PathBuf {
    let p = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&p).unwrap();
    p
}

// ---- 1 -------------------------------------------------------------------

fn toy_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let d = [4, 8, 16][rng.random_range(0..3)];
    ModelConfig {
        d,
        n_heads: if d >= 8 { 2 } else { 1 },
        n_layers: rng.random_range(1..=2),
        d_mlp: 2 * d,
        vocab_size: 12,
        d_img: 8,
        patch_dim: 4,
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

fn toy_sequence(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Sequence {
    let mut s = SequenceBuilder::new();
    s.token(rng.random_range(0..cfg.vocab_size)).sks().und_slot(0).gen_slot(0);
    let latent: Vec<f64> = (0..cfg.d_img).map(|_| rng.random_range(-1.0..1.0)).collect();
    s.image(latent, rng.random_range(0.05..0.95), cfg.n_patches()).unwrap();
    s.tokens(&[rng.random_range(0..cfg.vocab_size), rng.random_range(0..cfg.vocab_size)]);
    s.build()
}

/// Text cross-entropy plus velocity MSE of a random toy network, as a
/// function of the concept rows and one Q projection per expert.
fn gradcheck_seed(seed: u64) -> duet::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_config(&mut rng);
    let mut b = Backbone::init(cfg.clone(), &mut rng)?;
    for t in b.params.to_vec_mut() {
        *t = Tensor::randn(t.shape(), 0.4, &mut rng);
    }
    let c = ConceptTokens::allocate_random(1, 1, cfg.d, 0.5, &mut rng)?;
    let seq = toy_sequence(&mut rng, &cfg);
    let text_rows: Vec<usize> = (0..seq.len()).filter(|&i| seq.pos[i].is_some()).collect();
    let targets: Vec<usize> = text_rows.iter().map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let v_target = Tensor::randn(&[cfg.d_img], 1.0, &mut rng);
    let layer = rng.random_range(0..cfg.n_layers);
    let inputs = vec![
        c.und.clone(),
        c.gen.clone(),
        b.params.experts[0].layers[layer].wq.clone(),
        b.params.experts[1].layers[layer].wq.clone(),
    ];
    let report = check_gradients(&inputs, 1e-5, |tape: &mut Tape, v: &[Var]| {
        let mut bound = b.bind(tape, false);
        bound.experts[0].layers[layer].wq = v[2];
        bound.experts[1].layers[layer].wq = v[3];
        let slots = duet::model::SlotVars { und: v[0], gen: v[1] };
        let fp = ForwardPass::new(&cfg, &bound);
        let empty = SequenceBuilder::new().build();
        let enc = fp.encode(tape, Some(slots), &empty, std::slice::from_ref(&seq))?;
        let h = enc.suffixes[0];
        let logits = fp.logits(tape, h, &text_rows)?;
        let ce = tape.cross_entropy(logits, &targets)?;
        let vel = fp.velocity(tape, h, &seq.image_rows(0))?;
        let tgt = tape.constant(v_target.clone());
        let mse = tape.mse(vel, tgt)?;
        tape.add(ce, mse)
    })?;
    Ok(report.max_rel_err)
}

fn c1_gradients() -> Check {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let seeds = 100;
    for s in 0..seeds {
        worst = worst.max(gradcheck_seed(s).map_err(|e| format!("seed {s}: {e}"))?);
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-5 && secs < 60.0,
        format!("{seeds} seeds, max rel err {worst:.2e} (≤ 1e-5), {secs:.1}s (< 60s)"),
    )
}

// ---- 2 -------------------------------------------------------------------

fn c2_frozen_backbone(bench: &Benchmark) -> Check {
    let (backbone, _) = common::pretrained();
    let before = backbone.clone();
    let fp_before = backbone.fingerprint();
    let tasks = &bench.concepts[0];
    let data = ConceptData::from_tasks(bench, tasks).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        steps: 100,
        ..TrainConfig::default()
    };
    let out = train_concept(backbone, &data, &cfg).map_err(|e| e.to_string())?;
    let identical = before
        .params
        .to_vec()
        .iter()
        .zip(backbone.params.to_vec())
        .all(|(a, b)| a.bit_eq(b));
    let init = ConceptTokens::allocate(cfg.n_und, cfg.n_gen, backbone.config.d).map_err(|e| e.to_string())?;
    let changed = |t: &Tensor, i: &Tensor| (0..t.rows()).filter(|&r| t.row(r) != i.row(r)).count();
    let rows = changed(&out.tokens.und, &init.und) + changed(&out.tokens.gen, &init.gen);
    ensure(
        identical && fp_before == backbone.fingerprint() && rows >= 1,
        format!(
            "{} backbone tensors bit-identical: {identical}; concept rows changed: {rows}",
            before.params.to_vec().len()
        ),
    )
}

// ---- 3 -------------------------------------------------------------------

fn template() -> Sequence {
    let mut s = SequenceBuilder::new();
    s.token(3).sks().und_slot(0).und_slot(1).gen_slot(0).gen_slot(1).token(5);
    s.build()
}

fn qkv(b: &Backbone, c: &ConceptTokens, seq: &Sequence, layer: usize) -> [Tensor; 3] {
    let mut tape = Tape::new();
    let params = b.bind(&mut tape, false);
    let slots = bind_slots(&mut tape, &c.und, &c.gen, false);
    let fp = ForwardPass::new(&b.config, &params);
    let x = fp.embed(&mut tape, seq, Some(slots)).unwrap();
    let (q, k, v) = fp.project(&mut tape, x, &seq.routing().lanes(), layer).unwrap();
    [tape.value(q).clone(), tape.value(k).clone(), tape.value(v).clone()]
}

fn rows_equal(a: &[Tensor; 3], b: &[Tensor; 3], rows: &[usize]) -> bool {
    a.iter().zip(b).all(|(x, y)| rows.iter().all(|&r| x.row(r).iter().zip(y.row(r)).all(|(p, q)| p.to_bits() == q.to_bits())))
}

fn c3_routing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = ModelConfig::default();
    let mut b = Backbone::init(cfg.clone(), &mut rng).map_err(|e| e.to_string())?;
    for t in b.params.to_vec_mut() {
        *t = Tensor::randn(t.shape(), 0.3, &mut rng);
    }
    let c = ConceptTokens::allocate_random(2, 2, cfg.d, 0.5, &mut rng).map_err(|e| e.to_string())?;
    let seq = template();
    if seq.len() != 7 {
        return Err(format!("template has {} positions", seq.len()));
    }
    let table = seq.routing();
    let mut perturbed = 0usize;
    let mut own_changed = 0usize;
    for layer in 0..cfg.n_layers {
        let base = qkv(&b, &c, &seq, layer);
        for expert in 0..2 {
            let (other_rows, own_rows) = if expert == 1 { (&table.und, &table.gen) } else { (&table.gen, &table.und) };
            for field in 0..5 {
                let n = {
                    let l = &b.params.experts[expert].layers[layer];
                    [&l.ln1_gain, &l.ln1_bias, &l.wq, &l.wk, &l.wv][field].len()
                };
                for i in 0..n {
                    let mut p = b.clone();
                    let l = &mut p.params.experts[expert].layers[layer];
                    let t = [&mut l.ln1_gain, &mut l.ln1_bias, &mut l.wq, &mut l.wk, &mut l.wv][field].data_mut();
                    t[i] += 0.5;
                    let got = qkv(&p, &c, &seq, layer);
                    perturbed += 1;
                    if !rows_equal(&base, &got, other_rows) {
                        return Err(format!("layer {layer} expert {expert} field {field} index {i} leaked"));
                    }
                    if !rows_equal(&base, &got, own_rows) {
                        own_changed += 1;
                    }
                }
            }
        }
    }
    ensure(
        own_changed > perturbed / 2,
        format!(
            "{perturbed} single-weight perturbations over {} und / {} gen rows: other expert bit-identical, own rows moved in {own_changed}",
            table.und.len(),
            table.gen.len()
        ),
    )
}

// ---- 4 -------------------------------------------------------------------

fn c4_flow() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_mse = 0.0f64;
    let mut worst_euler = 0.0f64;
    for _ in 0..50 {
        let x0: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x1: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let a = rf_interpolate(&x0, &x1, 0.0).map_err(|e| e.to_string())?;
        let z = rf_interpolate(&x0, &x1, 1.0).map_err(|e| e.to_string())?;
        if bits(&a) != bits(&x0) || bits(&z) != bits(&x1) {
            return Err("interpolation endpoints differ".into());
        }
        let s = FlowSample::new(x0.clone(), x1.clone(), rng.random()).map_err(|e| e.to_string())?;
        worst_mse = worst_mse.max(loss_gen_mse(&s, &s.velocity_target()).map_err(|e| e.to_string())?);
        let v = s.velocity_target();
        let cfg = SamplerConfig {
            steps: 50,
            ..SamplerConfig::default()
        };
        let out = euler_sample(x1.clone(), &cfg, false, |_, _, _| {
            Ok(Velocities {
                cond: v.clone(),
                uncond: None,
                image: None,
            })
        })
        .map_err(|e| e.to_string())?;
        worst_euler = worst_euler.max(out.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(
        worst_mse <= 1e-12 && worst_euler <= 1e-6,
        format!("endpoints bitwise; mse at exact velocity {worst_mse:.1e}; Euler 50-step error {worst_euler:.1e}"),
    )
}

// ---- 5 -------------------------------------------------------------------

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn c5_loss(bench: &Benchmark) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (ce, mi, me) = (rng.random_range(0.0..10.0), rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let direct = ce + 400.0 * mi + 400.0 * me;
        if ulps(loss_total(ce, mi, me, 400.0, 400.0), direct) > 1 {
            return Err(format!("loss_total({ce}, {mi}, {me}) off by more than 1 ulp"));
        }
    }
    let (backbone, _) = common::pretrained();
    let tasks = &bench.concepts[1];
    let data = ConceptData::from_tasks(bench, tasks).map_err(|e| e.to_string())?;
    let with = train_concept(backbone, &data, &TrainConfig { steps: 30, ..TrainConfig::default() }).map_err(|e| e.to_string())?;
    let mut worst = 0;
    for r in &with.log {
        worst = worst.max(ulps(r.total, loss_total(r.ce, r.mse_img, r.mse_edit, 400.0, 400.0)));
    }
    let edit_seen = with.log.iter().any(|r| r.mse_edit > 0.0);

    let cli = Cli::try_parse_from(["duet", "train", "--no-edit-data"]).map_err(|e| e.to_string())?;
    let duet::cli::Command::Train(args) = cli.command else {
        return Err("train verb did not parse".into());
    };
    let mut cfg = TrainConfig { steps: 30, ..TrainConfig::default() };
    if args.no_edit_data {
        cfg.lambda_edit = 0.0;
    }
    let without = train_concept(backbone, &data, &cfg).map_err(|e| e.to_string())?;
    let no_edit = without.log.iter().all(|r| r.mse_edit == 0.0 && r.total == loss_total(r.ce, r.mse_img, 0.0, 400.0, 0.0));
    ensure(
        worst <= 1 && edit_seen && cfg.lambda_edit == 0.0 && no_edit,
        format!(
            "training log total within {worst} ulp of CE + 400·(img + edit); --no-edit-data sets λ_edit = {} and every edit term is 0: {no_edit}",
            cfg.lambda_edit
        ),
    )
}

// ---- 7 -------------------------------------------------------------------

fn c7_metrics() -> Check {
    let avg = EditScores::new(0.711, 0.605).avg;
    let always_yes: Vec<(bool, bool)> = (0..20).map(|i| (i % 2 == 0, true)).collect();
    let rec = recognition_score(&always_yes).map_err(|e| e.to_string())?;
    let bleu = bleu_text("<sks> 's toy is kite .", "<sks> 's toy is kite .").map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..6);
        let m = rng.random_range(1..6);
        let d = rng.random_range(1..40);
        let mut draw = |k: usize| -> Vec<Vec<f64>> { (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
        let (g, r) = (draw(n), draw(m));
        let mut naive = 0.0;
        for a in &g {
            for b in &r {
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for i in 0..d {
                    dot += a[i] * b[i];
                    na += a[i] * a[i];
                    nb += b[i] * b[i];
                }
                naive += dot / (na.sqrt() * nb.sqrt());
            }
        }
        naive /= (n * m) as f64;
        worst = worst.max((mean_pairwise_cosine(&g, &r).map_err(|e| e.to_string())? - naive).abs());
    }
    ensure(
        (avg - 0.658).abs() < 1e-12 && rec == 0.5 && bleu == 1.0 && worst <= 1e-9,
        format!("Avg(0.711, 0.605) = {avg:.3}; always-positive recognition = {rec}; BLEU(identical) = {bleu}; cosine vs naive loop max diff {worst:.1e}"),
    )
}

// ---- 8 -------------------------------------------------------------------

fn dir_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

fn c8_benchmark(bench: &Benchmark) -> Check {
    let root = out_dir().join("bench");
    let _ = std::fs::remove_dir_all(&root);
    let m1 = bench.save(&root.join("a")).map_err(|e| e.to_string())?;
    let again = build_benchmark(&MicroWorldConfig::default()).map_err(|e| e.to_string())?;
    again.save(&root.join("b")).map_err(|e| e.to_string())?;
    let same = dir_hashes(&root.join("a")) == dir_hashes(&root.join("b"));
    let split = [m1.categories.get("person"), m1.categories.get("pet"), m1.categories.get("object")];
    let total: usize = m1.eval_edit_categories.values().sum();
    let fifths = m1.eval_edit_categories.len() == 5 && m1.eval_edit_categories.values().all(|&n| n * 5 == total);
    let refs_ok = m1.train_references.values().all(|&n| n == 10);
    ensure(
        m1.n_concepts == 20 && split == [Some(&10), Some(&5), Some(&5)] && refs_ok && fifths && same,
        format!(
            "{} concepts, person/pet/object {:?}, 10 references each: {refs_ok}, eval edits {:?} of {total}, byte-identical rebuild: {same}",
            m1.n_concepts,
            split.map(|s| s.copied().unwrap_or(0)),
            m1.eval_edit_categories
        ),
    )
}

// ---- 6, 9, 10, 11 --------------------------------------------------------

struct ConceptRun {
    train_secs: f64,
    rec: f64,
    retrieval: f64,
    parg_replay: f64,
    parg_off: f64,
    sweep: [f64; MAX_EXEMPLARS + 1],
    traces: Vec<ReplayTrace>,
}

struct SeedRun {
    seed: u64,
    concepts: Vec<ConceptRun>,
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// One person, one pet and one object concept per seed, trained with the
/// default config and scored.
fn micro_runs() -> Result<Vec<SeedRun>, String> {
    let (backbone, _) = common::pretrained();
    let sampler = SamplerConfig::default();
    let mut runs = Vec::new();
    for seed in SEEDS {
        let bench = build_benchmark(&MicroWorldConfig {
            seed,
            ..MicroWorldConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let mut concepts = Vec::new();
        for cat in ["person", "pet", "object"] {
            let tasks = bench.concepts.iter().find(|t| t.concept.category == cat).ok_or(format!("no {cat} concept"))?;
            let data = ConceptData::from_tasks(&bench, tasks).map_err(|e| e.to_string())?;
            let t0 = Instant::now();
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let out = train_concept(backbone, &data, &cfg).map_err(|e| e.to_string())?;
            let train_secs = t0.elapsed().as_secs_f64();
            let engine = Engine::new(backbone, &out.tokens).map_err(|e| e.to_string())?;
            let opts = EvalOptions {
                select: EvalSelection {
                    understanding: true,
                    generation: false,
                    parg: false,
                    editing: false,
                    paired_replay: false,
                    samples_per_prompt: 1,
                },
                mode: ReplayMode::Sequential,
                exemplars: MAX_EXEMPLARS,
                sampler: sampler.clone(),
                seed,
            };
            let mut judge = OracleJudge::new(&bench.world, seed).map_err(|e| e.to_string())?;
            let ev = evaluate_concept(&engine, &bench, tasks, &mut judge, &opts).map_err(|e| e.to_string())?;
            let retrieval = retrieval_accuracy(&engine, tasks).map_err(|e| e.to_string())?;
            let mut traces = Vec::new();
            let mut sweep = [0.0; MAX_EXEMPLARS + 1];
            for (k, slot) in sweep.iter_mut().enumerate() {
                let (m, _, tr) = parg_scores(&engine, &bench, tasks, ReplayMode::Sequential, k, &sampler, seed).map_err(|e| e.to_string())?;
                *slot = m;
                traces.extend(tr);
            }
            let (parg_off, _, tr) = parg_scores(&engine, &bench, tasks, ReplayMode::Off, 0, &sampler, seed).map_err(|e| e.to_string())?;
            traces.extend(tr);
            let (_, _, tr) = parg_scores(&engine, &bench, tasks, ReplayMode::Unified, MAX_EXEMPLARS, &sampler, seed).map_err(|e| e.to_string())?;
            traces.extend(tr);
            eprintln!(
                "  seed {seed} {}: train {train_secs:.1}s, Rec {:.3}, retrieval {retrieval:.3}, PARG replay {:.3} / off {parg_off:.3}",
                tasks.concept.identifier,
                ev.scores.rec.unwrap_or(f64::NAN),
                sweep[MAX_EXEMPLARS]
            );
            concepts.push(ConceptRun {
                train_secs,
                rec: ev.scores.rec.unwrap_or(0.0),
                retrieval,
                parg_replay: sweep[MAX_EXEMPLARS],
                parg_off,
                sweep,
                traces,
            });
        }
        runs.push(SeedRun { seed, concepts });
    }
    Ok(runs)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn c6_calls(runs: &[SeedRun]) -> Check {
    let mut per_mode: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fallbacks = 0;
    for c in runs.iter().flat_map(|r| &r.concepts) {
        for t in &c.traces {
            t.check_calls().map_err(|e| e.to_string())?;
            *per_mode.entry(t.mode.name()).or_default() += 1;
            fallbacks += usize::from(t.truncated_stage.is_some());
        }
    }
    let expected = [("off", 0), ("sequential", 3), ("unified", 1)];
    let all_modes = expected.iter().all(|(m, _)| per_mode.get(m).copied().unwrap_or(0) > 0);
    ensure(
        all_modes,
        format!("traces checked per mode {per_mode:?} against text calls {expected:?} + 1 generation; {fallbacks} truncation fallbacks"),
    )
}

fn c9_micro_training(runs: &[SeedRun]) -> Check {
    let slowest = runs.iter().flat_map(|r| &r.concepts).map(|c| c.train_secs).fold(0.0, f64::max);
    let mut good = 0;
    let mut parts = Vec::new();
    for r in runs {
        let rec = mean(r.concepts.iter().map(|c| c.rec));
        let ret = mean(r.concepts.iter().map(|c| c.retrieval));
        if rec >= 0.9 && ret >= 0.8 {
            good += 1;
        }
        parts.push(format!("seed {}: Rec {rec:.3} retrieval {ret:.3}", r.seed));
    }
    ensure(
        slowest < 600.0 && good * 3 >= runs.len() * 2,
        format!("3 concepts x 2000 steps, slowest {slowest:.1}s; {}; {good}/{} seeds pass", parts.join(", "), runs.len()),
    )
}

fn c10_replay(runs: &[SeedRun]) -> Check {
    let mut good = 0;
    let mut parts = Vec::new();
    for r in runs {
        let gap = mean(r.concepts.iter().map(|c| c.parg_replay - c.parg_off));
        if gap > 0.0 {
            good += 1;
        }
        parts.push(format!("seed {} gap {gap:+.3}", r.seed));
    }
    ensure(good * 3 >= runs.len() * 2, format!("{}; {good}/{} seeds positive", parts.join(", "), runs.len()))
}

fn c11_sweep(runs: &[SeedRun]) -> Check {
    let path = out_dir().join("exemplar_sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| e.to_string())?;
    let mut header = vec!["exemplars".to_string(), "mean".to_string()];
    header.extend(runs.iter().map(|r| format!("seed{}", r.seed)));
    w.write_record(&header).map_err(|e| e.to_string())?;
    let mut curve = Vec::new();
    for k in 0..=MAX_EXEMPLARS {
        let per_seed: Vec<f64> = runs.iter().map(|r| mean(r.concepts.iter().map(|c| c.sweep[k]))).collect();
        let m = mean(per_seed.iter().copied());
        curve.push(m);
        let mut rec = vec![k.to_string(), format!("{m}")];
        rec.extend(per_seed.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())?;
    ensure(
        runs.len() >= 3 && curve[MAX_EXEMPLARS] >= curve[0],
        format!(
            "k=0..6 means [{}] over {} seeds; CSV {}",
            curve.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", "),
            runs.len(),
            path.display()
        ),
    )
}

// ---- 12 ------------------------------------------------------------------

/// Hashes of every artifact with timing stripped: latency columns and
/// trace latency fields are dropped, everything else must match.
fn artifact_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = dir_hashes(root);
    out.remove("eval/stage_latency.csv");
    if let Ok(traces) = read_traces(&root.join("eval/traces.jsonl")) {
        let stripped: Vec<serde_json::Value> = traces
            .iter()
            .map(|t| {
                let mut v = serde_json::to_value(t).unwrap();
                v.as_object_mut().unwrap().remove("latency");
                v
            })
            .collect();
        out.insert("eval/traces.jsonl".into(), hex::encode(Sha256::digest(serde_json::to_vec(&stripped).unwrap())));
    }
    out
}

fn c12_determinism() -> Check {
    let (_, ckpt) = common::pretrained();
    let base = out_dir().join("determinism");
    let _ = std::fs::remove_dir_all(&base);
    std::fs::create_dir_all(&base).unwrap();
    let cfg_path = base.join("config.json");
    let cfg = serde_json::json!({
        "seed": 11,
        "inputs": { "backbone": ckpt },
        "train": { "steps": 150 },
        "eval": { "samples_per_prompt": 1 }
    });
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let out = base.join(name);
        for verb in [
            vec!["benchgen"],
            vec!["train", "--limit", "2"],
            vec!["eval", "--limit", "2", "--exemplar-sweep"],
        ] {
            let mut args = vec!["duet", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()];
            args.extend(verb.iter().copied());
            let cli = Cli::try_parse_from(&args).map_err(|e| e.to_string())?;
            run(cli).map_err(|e| format!("{}: {e}", verb[0]))?;
        }
        hashes.push(artifact_hashes(&out));
    }
    let differing: Vec<&String> = hashes[0].keys().filter(|k| hashes[0].get(*k) != hashes[1].get(*k)).collect();
    ensure(
        differing.is_empty() && hashes[0].len() == hashes[1].len() && hashes[0].contains_key("eval/report.csv"),
        format!("{} artifacts from benchgen/train/eval hash-identical across reruns; differing: {differing:?}", hashes[0].len()),
    )
}

// --------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let t0 = Instant::now();
    let mut results: Vec<(u8, &str, Check)> = Vec::new();
    results.push((1, "gradient correctness", guarded(c1_gradients)));
    let bench = build_benchmark(&MicroWorldConfig::default()).expect("default benchmark");
    results.push((3, "routing isolation", guarded(c3_routing)));
    results.push((4, "rectified-flow identities", guarded(c4_flow)));
    results.push((7, "metric formulas", guarded(c7_metrics)));
    results.push((8, "benchmark generator", guarded(|| c8_benchmark(&bench))));
    results.push((2, "frozen backbone", guarded(|| c2_frozen_backbone(&bench))));
    results.push((5, "loss composition", guarded(|| c5_loss(&bench))));
    let runs = catch_unwind(micro_runs).unwrap_or_else(|_| Err("micro runs panicked".into()));
    match &runs {
        Ok(r) => {
            results.push((6, "replay call counts", guarded(|| c6_calls(r))));
            results.push((9, "end-to-end micro training", guarded(|| c9_micro_training(r))));
            results.push((10, "replay ablation direction", guarded(|| c10_replay(r))));
            results.push((11, "exemplar sweep", guarded(|| c11_sweep(r))));
        }
        Err(e) => {
            for (id, name) in [(6, "replay call counts"), (9, "end-to-end micro training"), (10, "replay ablation direction"), (11, "exemplar sweep")] {
                results.push((id, name, Err(format!("micro runs failed: {e}"))));
            }
        }
    }
    results.push((12, "determinism", guarded(c12_determinism)));
    results.sort_by_key(|r| r.0);

    println!();
    let mut failed = 0;
    for (id, name, r) in &results {
        match r {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {d}");
            }
        }
    }
    println!("\n{} of {} criteria pass ({:.0}s)", results.len() - failed, results.len(), t0.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! The tape forward pass against a direct loop implementation of the same
//! dual-expert transformer.

use duet::concepts::ConceptTokens;
use duet::model::{bind_slots, timestep_embedding, Backbone, ForwardPass, Item, ModelConfig, Sequence, SequenceBuilder, GEN};
use duet::numcore::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

fn config() -> ModelConfig {
    ModelConfig {
        d: 8,
        n_heads: 2,
        n_layers: 2,
        d_mlp: 12,
        d_img: 16,
        patch_dim: 8,
        max_seq_len: 32,
        ..ModelConfig::default()
    }
}

/// Random backbone with every tensor (gains and biases included) drawn
/// from N(0, 0.5²), so no parameter is trivially 0 or 1.
fn random_model(seed: u64) -> (Backbone, ConceptTokens) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Backbone::init(config(), &mut rng).unwrap();
    for t in b.params.to_vec_mut() {
        *t = Tensor::randn(t.shape(), 0.5, &mut rng);
    }
    let c = ConceptTokens::allocate_random(2, 2, b.config.d, 0.5, &mut rng).unwrap();
    (b, c)
}

fn random_sequence(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Sequence {
    let mut s = SequenceBuilder::new();
    let n_text = rng.random_range(1..5);
    for _ in 0..n_text {
        s.token(rng.random_range(0..cfg.vocab_size));
    }
    s.sks().und_slot(0).und_slot(1).gen_slot(rng.random_range(0..2));
    let latent: Vec<f64> = (0..cfg.d_img).map(|_| rng.random_range(-1.0..1.0)).collect();
    s.image(latent, rng.random_range(0.0..1.0), cfg.n_patches()).unwrap();
    s.token(rng.random_range(0..cfg.vocab_size));
    s.build()
}

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn matvec(x: &[f64], w: &Tensor) -> Vec<f64> {
    let w = mat(w);
    (0..w[0].len()).map(|c| x.iter().zip(&w).map(|(a, row)| a * row[c]).sum()).collect()
}

fn layer_norm(x: &[f64], g: &Tensor, b: &Tensor, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g.data()[i] + b.data()[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

struct Reference {
    hidden: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
    velocity: Vec<f64>,
}

fn reference(b: &Backbone, c: &ConceptTokens, seq: &Sequence) -> Reference {
    let cfg = &b.config;
    let p = &b.params;
    let np = cfg.n_patches();
    let mut x: Vec<Vec<f64>> = Vec::new();
    for (i, item) in seq.items.iter().enumerate() {
        let mut row = match *item {
            Item::Token(id) => p.tok_emb.row(id).to_vec(),
            Item::Sks => c.und.row(0).to_vec(),
            Item::Und(k) => c.und.row(k + 1).to_vec(),
            Item::Gen(k) => c.gen.row(k).to_vec(),
            Item::Patch { image, block } => {
                let img = &seq.images[image];
                let patch = &img.latent[block * cfg.patch_dim..(block + 1) * cfg.patch_dim];
                let te = timestep_embedding(img.t, cfg.d).unwrap();
                let e = matvec(patch, &p.patch_emb);
                (0..cfg.d).map(|j| e[j] + p.patch_pos.row(block)[j] + te[j]).collect()
            }
        };
        if let Some(pos) = seq.pos[i] {
            for (v, e) in row.iter_mut().zip(p.pos_emb.row(pos)) {
                *v += e;
            }
        }
        x.push(row);
    }
    let lane = |i: usize| usize::from(seq.items[i].modality().lane() == GEN);
    let l = x.len();
    let dk = cfg.d / cfg.n_heads;
    for layer in 0..cfg.n_layers {
        let lp = |i: usize| &p.experts[lane(i)].layers[layer];
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for i in 0..l {
            let n = layer_norm(&x[i], &lp(i).ln1_gain, &lp(i).ln1_bias, cfg.ln_eps);
            q.push(matvec(&n, &lp(i).wq));
            k.push(matvec(&n, &lp(i).wk));
            v.push(matvec(&n, &lp(i).wv));
        }
        let mut att = vec![vec![0.0; cfg.d]; l];
        for h in 0..cfg.n_heads {
            let r = h * dk..(h + 1) * dk;
            for i in 0..l {
                let vis = 0..seq.horizon[i];
                let s: Vec<f64> = vis
                    .clone()
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|z| (z - m).exp()).collect();
                let tot: f64 = e.iter().sum();
                for (w, j) in e.iter().zip(vis) {
                    for c in r.clone() {
                        att[i][c] += w / tot * v[j][c];
                    }
                }
            }
        }
        for i in 0..l {
            let lp = lp(i);
            let o = matvec(&att[i], &lp.wo);
            let xi: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let n = layer_norm(&xi, &lp.ln2_gain, &lp.ln2_bias, cfg.ln_eps);
            let h: Vec<f64> = matvec(&n, &lp.w1).iter().zip(lp.b1.data()).map(|(a, b)| gelu(a + b)).collect();
            let h2 = matvec(&h, &lp.w2);
            x[i] = xi.iter().zip(&h2).zip(lp.b2.data()).map(|((a, b), c)| a + b + c).collect();
        }
    }
    let hidden: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            let e = &p.experts[lane(i)];
            layer_norm(&x[i], &e.lnf_gain, &e.lnf_bias, cfg.ln_eps)
        })
        .collect();
    let logits = hidden
        .iter()
        .map(|h| (0..cfg.vocab_size).map(|t| h.iter().zip(p.tok_emb.row(t)).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let mut velocity = Vec::new();
    for r in seq.image_rows(0) {
        let v = matvec(&hidden[r], &p.flow_w);
        velocity.extend(v.iter().zip(p.flow_b.data()).map(|(a, b)| a + b));
    }
    assert_eq!(velocity.len(), np * cfg.patch_dim);
    Reference { hidden, logits, velocity }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn tape_forward_matches_loop_reference() {
    for seed in 0..24 {
        let (b, c) = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let seq = random_sequence(&mut rng, &b.config);
        let want = reference(&b, &c, &seq);

        let mut tape = Tape::new();
        let params = b.bind(&mut tape, false);
        let slots = bind_slots(&mut tape, &c.und, &c.gen, false);
        let fp = ForwardPass::new(&b.config, &params);
        let empty = SequenceBuilder::new().build();
        let enc = fp.encode(&mut tape, Some(slots), &empty, std::slice::from_ref(&seq)).unwrap();
        let h = enc.suffixes[0];
        let flat: Vec<f64> = want.hidden.concat();
        assert!(max_diff(tape.value(h).data(), &flat) < TOL, "hidden, seed {seed}");

        let rows: Vec<usize> = (0..seq.len()).collect();
        let lg = fp.logits(&mut tape, h, &rows).unwrap();
        assert!(max_diff(tape.value(lg).data(), &want.logits.concat()) < TOL, "logits, seed {seed}");

        let vel = fp.velocity(&mut tape, h, &seq.image_rows(0)).unwrap();
        assert!(max_diff(tape.value(vel).data(), &want.velocity) < TOL, "velocity, seed {seed}");
    }
}

#[test]
fn shared_prefix_equals_concatenation() {
    for seed in 0..20 {
        let (b, c) = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut pre = SequenceBuilder::unpositioned();
        pre.sks().und_slot(0).und_slot(1).gen_slot(0).gen_slot(1);
        let pre = pre.build();
        let suffix = random_sequence(&mut rng, &b.config);
        let whole = pre.concat(&suffix);
        let want = reference(&b, &c, &whole);

        let mut tape = Tape::new();
        let params = b.bind(&mut tape, false);
        let slots = bind_slots(&mut tape, &c.und, &c.gen, false);
        let fp = ForwardPass::new(&b.config, &params);
        let enc = fp.encode(&mut tape, Some(slots), &pre, std::slice::from_ref(&suffix)).unwrap();
        let got_pre = tape.value(enc.prefix.unwrap()).data().to_vec();
        let got_suf = tape.value(enc.suffixes[0]).data().to_vec();
        assert!(max_diff(&got_pre, &want.hidden[..pre.len()].concat()) < TOL, "prefix, seed {seed}");
        assert!(max_diff(&got_suf, &want.hidden[pre.len()..].concat()) < TOL, "suffix, seed {seed}");
    }
}

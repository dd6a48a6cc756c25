use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use super::params::{Backbone, ParamSet};
use super::sequence::{Item, Sequence};
use super::{timestep_embedding, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::{Lanes, Tape, Tensor, Var};

/// Backbone parameters bound to a tape.
pub type Bound = ParamSet<Var>;

/// Concept rows bound to a tape: `und` is `(N_u+1)×d` with the identifier in
/// row 0, `gen` is `N_g×d`.
#[derive(Clone, Copy, Debug)]
pub struct SlotVars {
    pub und: Var,
    pub gen: Var,
}

/// Hidden states after the final layer norm.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub prefix: Option<Var>,
    pub suffixes: Vec<Var>,
    /// `attention[layer][k]`: attention node of the prefix (k = 0, if any)
    /// followed by one per suffix.
    pub attention: Vec<Vec<Var>>,
}

pub struct ForwardPass<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a Bound,
}

impl Backbone {
    /// Put every parameter on `tape`; `trainable` marks them as gradient leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.params
            .map(self.config.n_layers, |t| tape.leaf(t.clone(), trainable))
    }
}

impl<'a> ForwardPass<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a Bound) -> Self {
        Self { config, params }
    }

    /// Input embeddings for `seq` (`L × d`).
    pub fn embed(&self, tape: &mut Tape, seq: &Sequence, slots: Option<SlotVars>) -> Result<Var> {
        let cfg = self.config;
        let p = self.params;
        let np = cfg.n_patches();
        let mut sources = vec![p.tok_emb];
        let slot_src = slots.map(|s| {
            sources.push(s.und);
            sources.push(s.gen);
            (sources.len() - 2, sources.len() - 1)
        });
        let img_src = if seq.images.is_empty() {
            None
        } else {
            let rows = seq.images.len() * np;
            let mut patches = Vec::with_capacity(rows * cfg.patch_dim);
            let mut temb = Vec::with_capacity(rows * cfg.d);
            let mut blocks = Vec::with_capacity(rows);
            for img in &seq.images {
                if img.latent.len() != cfg.d_img {
                    return Err(Error::Shape(format!(
                        "image latent has {} values, model expects {}",
                        img.latent.len(),
                        cfg.d_img
                    )));
                }
                patches.extend_from_slice(&img.latent);
                let e = timestep_embedding(img.t, cfg.d)?;
                for b in 0..np {
                    temb.extend_from_slice(&e);
                    blocks.push(b);
                }
            }
            let pm = tape.constant(Tensor::matrix(rows, cfg.patch_dim, patches)?);
            let proj = tape.matmul(pm, p.patch_emb)?;
            let pos = tape.select_rows(p.patch_pos, &blocks)?;
            let te = tape.constant(Tensor::matrix(rows, cfg.d, temb)?);
            let a = tape.add(proj, pos)?;
            let rows_var = tape.add(a, te)?;
            sources.push(rows_var);
            Some(sources.len() - 1)
        };

        let und_rows = slots.map(|s| tape.value(s.und).rows()).unwrap_or(0);
        let gen_rows = slots.map(|s| tape.value(s.gen).rows()).unwrap_or(0);
        let mut picks = Vec::with_capacity(seq.len());
        for item in &seq.items {
            let pick = match *item {
                Item::Token(id) => {
                    if id >= cfg.vocab_size {
                        return Err(Error::Index(format!("token id {id} ≥ vocab {}", cfg.vocab_size)));
                    }
                    (0, id)
                }
                Item::Sks | Item::Und(_) | Item::Gen(_) => {
                    let (su, sg) = slot_src.ok_or_else(|| {
                        Error::Binding(format!("{item:?} appears but no concept tokens were supplied"))
                    })?;
                    match *item {
                        Item::Sks if und_rows > 0 => (su, 0),
                        Item::Und(i) if i + 1 < und_rows => (su, i + 1),
                        Item::Gen(j) if j < gen_rows => (sg, j),
                        _ => {
                            return Err(Error::Binding(format!(
                                "{item:?} has no row among {und_rows} und / {gen_rows} gen rows"
                            )))
                        }
                    }
                }
                Item::Patch { image, block } => {
                    let src = img_src.ok_or_else(|| Error::Index("patch without image".into()))?;
                    if image >= seq.images.len() || block >= np {
                        return Err(Error::Index(format!("patch {image}/{block}")));
                    }
                    (src, image * np + block)
                }
            };
            picks.push(pick);
        }
        let x = tape.gather_rows(&sources, &picks)?;
        if seq.pos.iter().all(Option::is_none) {
            return Ok(x);
        }
        let zero = tape.constant(Tensor::zeros(&[1, cfg.d]));
        let mut pos_picks = Vec::with_capacity(seq.len());
        for p_idx in &seq.pos {
            match *p_idx {
                Some(i) if i >= cfg.max_seq_len => {
                    return Err(Error::Index(format!(
                        "text position {i} ≥ max_seq_len {}",
                        cfg.max_seq_len
                    )))
                }
                Some(i) => pos_picks.push((0, i)),
                None => pos_picks.push((1, 0)),
            }
        }
        let pe = tape.gather_rows(&[p.pos_emb, zero], &pos_picks)?;
        tape.add(x, pe)
    }

    /// Expert-specific pre-attention norm and Q/K/V projections for `layer`.
    pub fn project(&self, tape: &mut Tape, x: Var, lanes: &Lanes, layer: usize) -> Result<(Var, Var, Var)> {
        let [u, g] = &self.params.experts;
        let (lu, lg) = (&u.layers[layer], &g.layers[layer]);
        let n = tape.routed_layer_norm(
            x,
            [lu.ln1_gain, lg.ln1_gain],
            [lu.ln1_bias, lg.ln1_bias],
            lanes,
            self.config.ln_eps,
        )?;
        let q = tape.routed_matmul(n, [lu.wq, lg.wq], lanes)?;
        let k = tape.routed_matmul(n, [lu.wk, lg.wk], lanes)?;
        let v = tape.routed_matmul(n, [lu.wv, lg.wv], lanes)?;
        Ok((q, k, v))
    }

    /// Output projection, residual, and the routed MLP block.
    fn finish_layer(&self, tape: &mut Tape, x: Var, att: Var, lanes: &Lanes, layer: usize) -> Result<Var> {
        let [u, g] = &self.params.experts;
        let (lu, lg) = (&u.layers[layer], &g.layers[layer]);
        let o = tape.routed_matmul(att, [lu.wo, lg.wo], lanes)?;
        let x = tape.add(x, o)?;
        let n = tape.routed_layer_norm(
            x,
            [lu.ln2_gain, lg.ln2_gain],
            [lu.ln2_bias, lg.ln2_bias],
            lanes,
            self.config.ln_eps,
        )?;
        let h = tape.routed_matmul(n, [lu.w1, lg.w1], lanes)?;
        let h = tape.routed_add_row(h, [lu.b1, lg.b1], lanes)?;
        let h = tape.gelu(h)?;
        let h = tape.routed_matmul(h, [lu.w2, lg.w2], lanes)?;
        let h = tape.routed_add_row(h, [lu.b2, lg.b2], lanes)?;
        tape.add(x, h)
    }

    fn final_norm(&self, tape: &mut Tape, x: Var, lanes: &Lanes) -> Result<Var> {
        let [u, g] = &self.params.experts;
        tape.routed_layer_norm(
            x,
            [u.lnf_gain, g.lnf_gain],
            [u.lnf_bias, g.lnf_bias],
            lanes,
            self.config.ln_eps,
        )
    }

    /// Run the stack over a shared `prefix` and any number of `suffixes` that
    /// each continue it. The prefix is computed once; every suffix attends to
    /// all prefix rows plus its own visible rows.
    pub fn encode(
        &self,
        tape: &mut Tape,
        slots: Option<SlotVars>,
        prefix: &Sequence,
        suffixes: &[Sequence],
    ) -> Result<Encoded> {
        let lp = prefix.len();
        if lp > 0 && prefix.horizon.iter().any(|&h| h > lp) {
            return Err(Error::Contract("prefix rows cannot see past the prefix".into()));
        }
        let mut xp = if lp > 0 { Some(self.embed(tape, prefix, slots)?) } else { None };
        let lanes_p = prefix.routing().lanes();
        let mask_p = Arc::new(prefix.mask());

        let mut xs = Vec::with_capacity(suffixes.len());
        let mut lanes_s = Vec::with_capacity(suffixes.len());
        let mut masks = Vec::with_capacity(suffixes.len());
        for s in suffixes {
            xs.push(self.embed(tape, s, slots)?);
            lanes_s.push(s.routing().lanes());
            let ls = s.len();
            let width = lp + ls;
            let mut m = vec![false; ls * width];
            for i in 0..ls {
                m[i * width..i * width + lp].fill(true);
                for j in 0..s.horizon[i] {
                    m[i * width + lp + j] = true;
                }
            }
            masks.push(Arc::new(m));
        }

        let heads = self.config.n_heads;
        let mut attention = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            let mut layer_att = Vec::new();
            let mut kv_p = None;
            if let Some(x) = xp {
                let (q, k, v) = self.project(tape, x, &lanes_p, layer)?;
                let att = tape.attention(q, k, v, heads, mask_p.clone())?;
                layer_att.push(att);
                kv_p = Some((k, v));
                xp = Some(self.finish_layer(tape, x, att, &lanes_p, layer)?);
            }
            for (idx, s) in suffixes.iter().enumerate() {
                let (q, k, v) = self.project(tape, xs[idx], &lanes_s[idx], layer)?;
                let (k, v) = match kv_p {
                    Some((kp, vp)) => {
                        let picks: Vec<(usize, usize)> =
                            (0..lp).map(|r| (0, r)).chain((0..s.len()).map(|r| (1, r))).collect();
                        (tape.gather_rows(&[kp, k], &picks)?, tape.gather_rows(&[vp, v], &picks)?)
                    }
                    None => (k, v),
                };
                let att = tape.attention(q, k, v, heads, masks[idx].clone())?;
                layer_att.push(att);
                xs[idx] = self.finish_layer(tape, xs[idx], att, &lanes_s[idx], layer)?;
            }
            attention.push(layer_att);
        }

        let prefix_out = match xp {
            Some(x) => Some(self.final_norm(tape, x, &lanes_p)?),
            None => None,
        };
        let mut outs = Vec::with_capacity(xs.len());
        for (x, lanes) in xs.into_iter().zip(&lanes_s) {
            outs.push(self.final_norm(tape, x, lanes)?);
        }
        Ok(Encoded {
            prefix: prefix_out,
            suffixes: outs,
            attention,
        })
    }

    /// Vocabulary logits (`rows.len() × V`) read from `hidden` with the tied
    /// embedding.
    pub fn logits(&self, tape: &mut Tape, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.select_rows(hidden, rows)?;
        tape.matmul_nt(h, self.params.tok_emb)
    }

    /// Velocity prediction (`d_img`) from the patch rows of one image.
    pub fn velocity(&self, tape: &mut Tape, hidden: Var, rows: &[usize]) -> Result<Var> {
        if rows.len() != self.config.n_patches() {
            return Err(Error::Shape(format!(
                "velocity needs {} patch rows, got {}",
                self.config.n_patches(),
                rows.len()
            )));
        }
        let h = tape.select_rows(hidden, rows)?;
        let v = tape.matmul(h, self.params.flow_w)?;
        let v = tape.add_row(v, self.params.flow_b)?;
        tape.reshape(v, &[self.config.d_img])
    }
}

/// Bind concept rows as constants (inference) or gradient leaves (training).
pub fn bind_slots(tape: &mut Tape, und: &Tensor, gen: &Tensor, trainable: bool) -> SlotVars {
    SlotVars {
        und: tape.leaf(und.clone(), trainable),
        gen: tape.leaf(gen.clone(), trainable),
    }
}

/// Row-stochastic attention weights of `head` at `layer` for a single sequence.
pub fn dump_attention(
    backbone: &Backbone,
    slots: Option<(&Tensor, &Tensor)>,
    seq: &Sequence,
    layer: usize,
    head: usize,
) -> Result<Vec<Vec<f64>>> {
    let cfg = &backbone.config;
    if layer >= cfg.n_layers || head >= cfg.n_heads {
        return Err(Error::Index(format!(
            "layer {layer} / head {head} of {} layers × {} heads",
            cfg.n_layers, cfg.n_heads
        )));
    }
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, false);
    let sv = slots.map(|(u, g)| bind_slots(&mut tape, u, g, false));
    let fp = ForwardPass::new(cfg, &bound);
    let empty = super::SequenceBuilder::new().build();
    let enc = fp.encode(&mut tape, sv, &empty, std::slice::from_ref(seq))?;
    let att = enc.attention[layer][0];
    let (_, probs) = tape
        .attention_probs(att)
        .ok_or_else(|| Error::Contract("not an attention node".into()))?;
    let l = seq.len();
    Ok((0..l)
        .map(|i| probs[(head * l + i) * l..(head * l + i + 1) * l].to_vec())
        .collect())
}

pub fn write_attention_csv(path: &Path, weights: &[Vec<f64>], labels: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "row")?;
    for l in labels {
        write!(f, ",{l}")?;
    }
    writeln!(f)?;
    for (i, row) in weights.iter().enumerate() {
        write!(f, "{}", labels.get(i).cloned().unwrap_or_else(|| i.to_string()))?;
        for w in row {
            write!(f, ",{w}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

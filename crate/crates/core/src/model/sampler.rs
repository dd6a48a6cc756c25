//! Euler integration of the learned velocity field with classifier-free
//! guidance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microbench::world::BLOCK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renorm {
    None,
    /// Scale the guided velocity down to the conditional velocity's norm.
    Global,
    /// The same, separately for every latent block.
    TextChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub shift: f64,
    pub cfg_text_scale: f64,
    pub cfg_image_scale: f64,
    /// Guidance is applied only while `t` lies in this interval.
    pub cfg_interval: (f64, f64),
    pub renorm: Renorm,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            shift: 3.0,
            cfg_text_scale: 4.0,
            cfg_image_scale: 2.0,
            cfg_interval: (0.4, 1.0),
            renorm: Renorm::Global,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.shift > 0.0) {
            return Err(Error::Config("timestep shift must be positive".into()));
        }
        if self.cfg_text_scale < 0.0 || self.cfg_image_scale < 0.0 {
            return Err(Error::Config("guidance scales must be non-negative".into()));
        }
        Ok(())
    }

    /// Guidance at `t` is a no-op and the extra passes can be skipped.
    pub fn unguided_at(&self, t: f64, with_image: bool) -> bool {
        let (lo, hi) = self.cfg_interval;
        let outside = t < lo || t > hi;
        outside || (self.cfg_text_scale == 1.0 && (!with_image || self.cfg_image_scale == 1.0))
    }
}

/// `s·t / (1 + (s − 1)·t)`
pub fn shift_time(t: f64, shift: f64) -> f64 {
    shift * t / (1.0 + (shift - 1.0) * t)
}

/// `steps + 1` decreasing times from 1 to 0.
pub fn schedule(steps: usize, shift: f64) -> Vec<f64> {
    (0..=steps)
        .map(|i| {
            if i == steps {
                0.0
            } else {
                shift_time(1.0 - i as f64 / steps as f64, shift)
            }
        })
        .collect()
}

fn rescale(v: &mut [f64], reference: &[f64]) {
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nr = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nv > nr && nv > 0.0 {
        let s = nr / nv;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// Conditional, unconditional and (for edits) image-only velocities.
#[derive(Clone, Debug)]
pub struct Velocities {
    pub cond: Vec<f64>,
    pub uncond: Option<Vec<f64>>,
    pub image: Option<Vec<f64>>,
}

/// Combine guidance terms. Without an unconditional velocity the
/// conditional one is returned unchanged.
pub fn guide(v: Velocities, cfg: &SamplerConfig) -> Vec<f64> {
    let Some(u) = v.uncond else {
        return v.cond;
    };
    let s = cfg.cfg_text_scale;
    let mut out: Vec<f64> = match &v.image {
        Some(img) => (0..v.cond.len())
            .map(|i| u[i] + cfg.cfg_image_scale * (img[i] - u[i]) + s * (v.cond[i] - img[i]))
            .collect(),
        None => v.cond.iter().zip(&u).map(|(c, u)| u + s * (c - u)).collect(),
    };
    match cfg.renorm {
        Renorm::None => {}
        Renorm::Global => rescale(&mut out, &v.cond),
        Renorm::TextChannel => {
            for (o, c) in out.chunks_mut(BLOCK).zip(v.cond.chunks(BLOCK)) {
                rescale(o, c);
            }
        }
    }
    out
}

/// Integrate from `x1` at `t = 1` to `t = 0`. `velocity(x_t, t, guided)`
/// returns the velocity terms; `guided` tells whether guidance applies.
pub fn euler_sample(
    x1: Vec<f64>,
    cfg: &SamplerConfig,
    with_image: bool,
    mut velocity: impl FnMut(&[f64], f64, bool) -> Result<Velocities>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let ts = schedule(cfg.steps, cfg.shift);
    let mut x = x1;
    for w in ts.windows(2) {
        let (t, next) = (w[0], w[1]);
        let guided = !cfg.unguided_at(t, with_image);
        let v = guide(velocity(&x, t, guided)?, cfg);
        if v.len() != x.len() {
            return Err(Error::Shape(format!("velocity of {} values for latent of {}", v.len(), x.len())));
        }
        let dt = t - next;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sampler diverged at t = {t}")));
        }
    }
    Ok(x)
}

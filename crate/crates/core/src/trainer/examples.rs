//! Turning text, images and flow samples into model sequences.

use crate::error::{Error, Result};
use crate::microbench::vocab::Vocab;
use crate::model::{Sequence, SequenceBuilder};

use super::FlowSample;

/// A sequence with next-token supervision: `(row, token)` means the logits at
/// `row` should predict `token`.
#[derive(Clone, Debug)]
pub struct TextExample {
    pub seq: Sequence,
    pub targets: Vec<(usize, usize)>,
}

/// A sequence ending in a noisy image whose velocity is regressed.
#[derive(Clone, Debug)]
pub struct FlowExample {
    pub seq: Sequence,
    /// Index (into `seq.images`) of the noisy image.
    pub image: usize,
    pub target: Vec<f64>,
}

fn builder(prefix: &Sequence) -> SequenceBuilder {
    SequenceBuilder::continuing(prefix).sks_token(Vocab::standard().sks())
}

/// `[image] prompt` as conditioning context; the image is clean (`t = 0`).
pub fn context(prefix: &Sequence, image: Option<&[f64]>, prompt: &str, n_patches: usize) -> Result<SequenceBuilder> {
    let v = Vocab::standard();
    let mut b = builder(prefix);
    if let Some(img) = image {
        b.image(img.to_vec(), 0.0, n_patches)?;
    }
    b.tokens(&v.encode(prompt)?);
    Ok(b)
}

/// `[image] prompt answer <eos>`, supervising the answer and the end marker.
pub fn text_example(
    prefix: &Sequence,
    image: Option<&[f64]>,
    prompt: &str,
    answer: &str,
    n_patches: usize,
) -> Result<TextExample> {
    let v = Vocab::standard();
    let mut b = context(prefix, image, prompt, n_patches)?;
    let start = b.build().len();
    if start == 0 {
        return Err(Error::Contract("text example needs a non-empty prompt".into()));
    }
    let mut answer_ids = v.encode(answer)?;
    answer_ids.push(v.eos());
    b.tokens(&answer_ids);
    let targets = answer_ids
        .iter()
        .enumerate()
        .map(|(i, &tok)| (start + i - 1, tok))
        .collect();
    Ok(TextExample { seq: b.build(), targets })
}

/// `[source] prompt x_t`; the regression target is `x0 − x1`.
pub fn flow_example(
    prefix: &Sequence,
    source: Option<&[f64]>,
    prompt: &str,
    sample: &FlowSample,
    n_patches: usize,
) -> Result<FlowExample> {
    let mut b = context(prefix, source, prompt, n_patches)?;
    b.image(sample.x_t.clone(), sample.t, n_patches)?;
    let seq = b.build();
    Ok(FlowExample {
        image: seq.images.len() - 1,
        target: sample.velocity_target(),
        seq,
    })
}

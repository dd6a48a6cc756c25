//! Edit judging: the micro-world oracle and a line-delimited JSON judge
//! running as a subprocess.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptSpec;
use crate::error::{Error, Result};
use crate::microbench::world::{block, norm, World, ATTRIBUTE_KINDS, ATTRIBUTE_VALUES, BLOCK, CLASSES, IDENTITY, MAX_IDENTITIES, N_BLOCKS};
use crate::microbench::{make_edit_triplet, render_image, Descriptor, EditCategory, EditDetail, Visibility};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rubric {
    /// Does the edit do what the instruction asks, and only that?
    SemaC,
    /// Does the result look like a natural image?
    QualI,
}

impl Rubric {
    pub fn text(self) -> &'static str {
        match self {
            Rubric::SemaC => "Score 0 to 1: how well the edited image follows the instruction while leaving everything else unchanged.",
            Rubric::QualI => "Score 0 to 1: how natural and artifact-free the edited image looks.",
        }
    }
}

/// One line sent to an external judge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub image_ref: String,
    pub instruction: String,
    pub rubric: String,
}

#[derive(Deserialize)]
struct JudgeResponse {
    score: f64,
}

/// Everything a judge may look at for one edit.
#[derive(Clone, Copy, Debug)]
pub struct EditCase<'a> {
    /// Where the edited latent can be found, for judges outside the process.
    pub image_ref: &'a str,
    pub instruction: &'a str,
    pub source: &'a [f64],
    pub edited: &'a [f64],
    pub target: &'a [f64],
    pub category: EditCategory,
    pub detail: &'a EditDetail,
}

pub trait Judge {
    fn score(&mut self, rubric: Rubric, case: &EditCase) -> Result<f64>;
}

fn check_score(s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Judge(format!("score {s} outside [0, 1]")));
    }
    Ok(s)
}

/// Per-block norm range of natural latents, with a linear falloff outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityBand {
    pub lo: [f64; N_BLOCKS],
    pub hi: [f64; N_BLOCKS],
    /// Distance outside the band at which a block scores zero.
    pub falloff: f64,
}

pub const CALIBRATION_RENDERS: usize = 1000;
pub const QUALITY_FALLOFF: f64 = 0.5;

fn random_spec(rng: &mut ChaCha8Rng) -> ConceptSpec {
    let (category, members) = CLASSES[rng.random_range(0..CLASSES.len())];
    ConceptSpec {
        identifier: "calibration".into(),
        category: category.into(),
        class: members[rng.random_range(0..members.len())].into(),
        attributes: ATTRIBUTE_KINDS
            .iter()
            .enumerate()
            .map(|(k, kind)| (kind.to_string(), ATTRIBUTE_VALUES[k][rng.random_range(0..ATTRIBUTE_VALUES[k].len())].to_string()))
            .collect(),
        identity: rng.random_range(0..MAX_IDENTITIES),
        references: vec!["calibration".into()],
    }
}

impl QualityBand {
    /// Band spanned by `n` renders and edit targets of random concepts.
    pub fn calibrate(world: &World, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("quality band needs at least one render".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lo = [f64::INFINITY; N_BLOCKS];
        let mut hi = [f64::NEG_INFINITY; N_BLOCKS];
        for _ in 0..n {
            let spec = random_spec(&mut rng);
            let z = if rng.random::<bool>() {
                let cat = EditCategory::ALL[rng.random_range(0..EditCategory::ALL.len())];
                make_edit_triplet(world, &spec, cat, rng.random())?.target
            } else {
                let vis = match rng.random_range(0..3) {
                    0 => Visibility::All,
                    1 => Visibility::Hidden,
                    _ => Visibility::Only(ATTRIBUTE_KINDS[rng.random_range(0..ATTRIBUTE_KINDS.len())].into()),
                };
                let ctx = crate::microbench::world::CONTEXTS[rng.random_range(0..6)];
                render_image(world, &spec, &Descriptor::new(ctx, vis), rng.random())?
            };
            for b in 0..N_BLOCKS {
                let nb = norm(block(&z, b));
                lo[b] = lo[b].min(nb);
                hi[b] = hi[b].max(nb);
            }
        }
        Ok(Self {
            lo,
            hi,
            falloff: QUALITY_FALLOFF,
        })
    }

    /// Mean over blocks of 1 inside the band, decaying linearly to 0 at
    /// `falloff` outside it.
    pub fn score(&self, latent: &[f64]) -> f64 {
        let mut s = 0.0;
        for b in 0..N_BLOCKS {
            let nb = norm(block(latent, b));
            let dist = (self.lo[b] - nb).max(nb - self.hi[b]).max(0.0);
            s += (1.0 - dist / self.falloff).max(0.0);
        }
        s / N_BLOCKS as f64
    }
}

/// Scores edits from the block structure of the micro world.
pub struct OracleJudge {
    pub band: QualityBand,
}

impl OracleJudge {
    pub fn new(world: &World, seed: u64) -> Result<Self> {
        Ok(Self {
            band: QualityBand::calibrate(world, CALIBRATION_RENDERS, seed)?,
        })
    }

    /// Change satisfaction on the edited blocks times preservation of the
    /// others. Removal is satisfied by the identity norm vanishing.
    pub fn sema_c(case: &EditCase) -> f64 {
        let changed = case.category.blocks();
        let clamp_cos = |a: &[f64], b: &[f64]| crate::microbench::world::cosine(a, b).unwrap_or(0.0).clamp(0.0, 1.0);
        let change = match case.detail {
            EditDetail::Remove => {
                let src = norm(block(case.source, IDENTITY));
                if src == 0.0 {
                    0.0
                } else {
                    (1.0 - norm(block(case.edited, IDENTITY)) / src).clamp(0.0, 1.0)
                }
            }
            _ => {
                changed.iter().map(|&b| clamp_cos(block(case.edited, b), block(case.target, b))).sum::<f64>() / changed.len() as f64
            }
        };
        let kept: Vec<usize> = (0..N_BLOCKS).filter(|b| !changed.contains(b)).collect();
        let preserve = kept
            .iter()
            .map(|&b| {
                let src = block(case.source, b);
                if norm(src) == 0.0 {
                    // an empty block is preserved by staying small
                    (1.0 - norm(block(case.edited, b))).clamp(0.0, 1.0)
                } else {
                    clamp_cos(block(case.edited, b), src)
                }
            })
            .sum::<f64>()
            / kept.len() as f64;
        change * preserve
    }
}

impl Judge for OracleJudge {
    fn score(&mut self, rubric: Rubric, case: &EditCase) -> Result<f64> {
        if case.edited.len() != N_BLOCKS * BLOCK {
            return Err(Error::Judge(format!("edited latent has {} values", case.edited.len())));
        }
        check_score(match rubric {
            Rubric::SemaC => Self::sema_c(case),
            Rubric::QualI => self.band.score(case.edited),
        })
    }
}

/// A judge program speaking one JSON object per line on stdin/stdout.
pub struct SubprocessJudge {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessJudge {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Judge(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = BufReader::new(child.stdout.take().expect("piped"));
        Ok(Self { child, stdin, stdout })
    }
}

impl Judge for SubprocessJudge {
    fn score(&mut self, rubric: Rubric, case: &EditCase) -> Result<f64> {
        let req = JudgeRequest {
            image_ref: case.image_ref.into(),
            instruction: case.instruction.into(),
            rubric: rubric.text().into(),
        };
        let mut line = serde_json::to_string(&req)?;
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::Judge(format!("write failed: {e}")))?;
        let mut resp = String::new();
        let n = self.stdout.read_line(&mut resp).map_err(|e| Error::Judge(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::Judge("judge closed its output".into()));
        }
        let r: JudgeResponse = serde_json::from_str(resp.trim()).map_err(|e| Error::Judge(format!("bad response {resp:?}: {e}")))?;
        check_score(r.score)
    }
}

impl Drop for SubprocessJudge {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditScores {
    pub sema_c: f64,
    pub qual_i: f64,
    pub avg: f64,
}

impl EditScores {
    pub fn new(sema_c: f64, qual_i: f64) -> Self {
        Self {
            sema_c,
            qual_i,
            avg: 0.5 * (sema_c + qual_i),
        }
    }
}

/// Both rubrics for one edit. Any judge failure fails the whole item.
pub fn edit_scores(judge: &mut dyn Judge, case: &EditCase) -> Result<EditScores> {
    let s = judge.score(Rubric::SemaC, case)?;
    let q = judge.score(Rubric::QualI, case)?;
    Ok(EditScores::new(s, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microbench::world::{block_mut, CONTEXT};

    fn spec() -> ConceptSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        random_spec(&mut rng)
    }

    fn case<'a>(t: &'a crate::microbench::EditTriplet, edited: &'a [f64]) -> EditCase<'a> {
        EditCase {
            image_ref: "x",
            instruction: &t.instruction,
            source: &t.source,
            edited,
            target: &t.target,
            category: t.category,
            detail: &t.detail,
        }
    }

    #[test]
    fn avg_is_the_mean() {
        let s = EditScores::new(0.711, 0.605);
        assert!((s.avg - 0.658).abs() < 1e-12);
        assert_eq!(EditScores::new(0.0, 0.0).avg, 0.0);
    }

    #[test]
    fn oracle_rewards_exact_edits() {
        let w = World::new(4);
        let mut j = OracleJudge::new(&w, 0).unwrap();
        for (i, cat) in EditCategory::ALL.iter().enumerate() {
            let t = make_edit_triplet(&w, &spec(), *cat, i as u64).unwrap();
            let good = edit_scores(&mut j, &case(&t, &t.target)).unwrap();
            assert!(good.sema_c >= 0.99, "{cat:?}: {}", good.sema_c);
            assert_eq!(good.qual_i, 1.0);
            let noop = edit_scores(&mut j, &case(&t, &t.source)).unwrap();
            assert!(noop.sema_c < good.sema_c, "{cat:?}");
        }
        let t = make_edit_triplet(&w, &spec(), EditCategory::ObjectManipulation, 9).unwrap();
        assert_eq!(OracleJudge::sema_c(&case(&t, &t.target)), 1.0);
    }

    #[test]
    fn quality_band_decays_outside() {
        let w = World::new(4);
        let band = QualityBand::calibrate(&w, 200, 0).unwrap();
        let t = make_edit_triplet(&w, &spec(), EditCategory::StyleAppearance, 2).unwrap();
        let mut blown = t.target.clone();
        block_mut(&mut blown, CONTEXT).iter_mut().for_each(|x| *x *= 10.0);
        assert_eq!(band.score(&blown), 0.75);
        let mut slight = t.target.clone();
        let hi = band.hi[CONTEXT];
        let n = norm(block(&slight, CONTEXT));
        block_mut(&mut slight, CONTEXT).iter_mut().for_each(|x| *x *= (hi + 0.25) / n);
        assert!((band.score(&slight) - 0.875).abs() < 1e-9);
    }

    #[test]
    fn subprocess_protocol() {
        let w = World::new(4);
        let t = make_edit_triplet(&w, &spec(), EditCategory::ObjectManipulation, 0).unwrap();
        let script = r#"while read line; do case "$line" in *natural*) echo '{"score": 0.25}';; *) echo '{"score": 0.75}';; esac; done"#;
        let mut j = SubprocessJudge::spawn("sh", &["-c".into(), script.into()]).unwrap();
        let s = edit_scores(&mut j, &case(&t, &t.target)).unwrap();
        assert_eq!((s.sema_c, s.qual_i, s.avg), (0.75, 0.25, 0.5));

        let mut bad = SubprocessJudge::spawn("sh", &["-c".into(), "read line; echo '{\"score\": 7}'".into()]).unwrap();
        assert!(matches!(edit_scores(&mut bad, &case(&t, &t.target)), Err(Error::Judge(_))));
        let mut gone = SubprocessJudge::spawn("sh", &["-c".into(), "exit 0".into()]).unwrap();
        assert!(matches!(edit_scores(&mut gone, &case(&t, &t.target)), Err(Error::Judge(_))));
    }
}

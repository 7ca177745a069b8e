//! Continuous inference: every 3-frame window of a test sequence yields
//! class probabilities, their running mean is kept per sequence and the
//! final mean decides the class.

mod ma;
mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ma::{argmax_with_tie, decide, update_ma, Decision, MAState, WindowProbs};
pub use report::{binomial_p_value, ClassReport};

use crate::data::{window_count, LoadedSequence, ShapeClass, WeightClass};
use crate::error::{Error, Result};
use crate::model::{GarmentNet, Head};
use crate::tensor::{no_grad, Tensor};
use crate::train::window_latents;

const BATCH: usize = 32;

/// Anything that turns a sequence into per-window and per-frame class
/// probabilities. The trained network is one; the stubs below are used to
/// check the bookkeeping.
pub trait Classifier: Sync {
    /// One entry per 3-frame window, `frames - 2` in total.
    fn window_probs(&self, seq: &LoadedSequence) -> Result<Vec<WindowProbs>>;
    /// One entry per frame, from the single-frame path.
    fn frame_probs(&self, seq: &LoadedSequence) -> Result<Vec<WindowProbs>>;
}

fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let k = logits.shape()[1];
    logits.softmax().to_vec().chunks(k).map(|c| c.to_vec()).collect()
}

fn probs_from_logits(shape: &Tensor, weight: &Tensor) -> Vec<WindowProbs> {
    softmax_rows(shape)
        .into_iter()
        .zip(softmax_rows(weight))
        .map(|(s, w)| WindowProbs {
            shape: s.try_into().expect("five shape classes"),
            weight: w.try_into().expect("three weight classes"),
        })
        .collect()
}

fn check_frame(model: &GarmentNet, frame: &Tensor) -> Result<()> {
    let p = model.preset();
    let want = [1, p.input_channels, p.input_size.0, p.input_size.1];
    if frame.shape() != want {
        return Err(Error::Usage(format!(
            "frame {:?} does not fit preset '{}' (expects {:?})",
            frame.shape(),
            p.name,
            want
        )));
    }
    Ok(())
}

/// Softmax of both heads applied to the latent predicted from three
/// consecutive `[1,C,H,W]` frames.
pub fn window_predict(model: &GarmentNet, frames: [&Tensor; 3]) -> Result<WindowProbs> {
    for f in frames {
        check_frame(model, f)?;
    }
    let latents = window_latents(model, &frames)?;
    no_grad(|| {
        let pred = model.dynamics.forward([&latents[0], &latents[1], &latents[2]])?;
        let shape = model.classify(&pred, Head::Shape)?;
        let weight = model.classify(&pred, Head::Weight)?;
        Ok(probs_from_logits(&shape, &weight)[0])
    })
}

pub struct ModelClassifier<'a>(pub &'a GarmentNet);

impl Classifier for ModelClassifier<'_> {
    fn window_probs(&self, seq: &LoadedSequence) -> Result<Vec<WindowProbs>> {
        let model = self.0;
        let n = window_count(seq.frames.len(), false)?;
        check_frame(model, &seq.frames[0])?;
        let latents = window_latents(model, &seq.frames.iter().collect::<Vec<_>>())?;
        let mut out = Vec::with_capacity(n);
        no_grad(|| -> Result<()> {
            for start in (0..n).step_by(BATCH) {
                let end = (start + BATCH).min(n);
                let pick = |k: usize| crate::train::stack_latents(&latents[start + k..end + k]);
                let pred = model.dynamics.forward([&pick(0)?, &pick(1)?, &pick(2)?])?;
                out.extend(probs_from_logits(
                    &model.classify(&pred, Head::Shape)?,
                    &model.classify(&pred, Head::Weight)?,
                ));
            }
            Ok(())
        })?;
        Ok(out)
    }

    fn frame_probs(&self, seq: &LoadedSequence) -> Result<Vec<WindowProbs>> {
        let model = self.0;
        if let Some(f) = seq.frames.first() {
            check_frame(model, f)?;
        }
        let latents = window_latents(model, &seq.frames.iter().collect::<Vec<_>>())?;
        let mut out = Vec::with_capacity(latents.len());
        no_grad(|| -> Result<()> {
            for chunk in latents.chunks(BATCH) {
                let batch = crate::train::stack_latents(chunk)?;
                out.extend(probs_from_logits(
                    &model.classify(&batch, Head::Shape)?,
                    &model.classify(&batch, Head::Weight)?,
                ));
            }
            Ok(())
        })?;
        Ok(out)
    }
}

/// Always certain of the true labels.
pub struct PerfectStub;

impl Classifier for PerfectStub {
    fn window_probs(&self, seq: &LoadedSequence) -> Result<Vec<WindowProbs>> {
        let n = window_count(seq.frames.len(), false)?;
        Ok(vec![WindowProbs::one_hot(seq.labels.shape, seq.labels.weight); n])
    }

    fn frame_probs(&self, seq: &LoadedSequence) -> Result<Vec<WindowProbs>> {
        Ok(vec![WindowProbs::one_hot(seq.labels.shape, seq.labels.weight); seq.frames.len()])
    }
}

/// Random points on the probability simplex, ignoring the input. Seeded per
/// sequence so results do not depend on evaluation order.
pub struct ChanceStub {
    pub seed: u64,
}

impl ChanceStub {
    fn draws(&self, seq: &LoadedSequence, n: usize) -> Vec<WindowProbs> {
        let key = seq
            .garment_id
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ key ^ (seq.sequence_index as u64) << 32);
        let mut simplex = |k: usize| {
            let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(move |v| v / s)
        };
        (0..n)
            .map(|_| WindowProbs {
                shape: simplex(5).collect::<Vec<_>>().try_into().unwrap(),
                weight: simplex(3).collect::<Vec<_>>().try_into().unwrap(),
            })
            .collect()
    }
}

impl Classifier for ChanceStub {
    fn window_probs(&self, seq: &LoadedSequence) -> Result<Vec<WindowProbs>> {
        let n = window_count(seq.frames.len(), false)?;
        Ok(self.draws(seq, n))
    }

    fn frame_probs(&self, seq: &LoadedSequence) -> Result<Vec<WindowProbs>> {
        Ok(self.draws(seq, seq.frames.len()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceOutcome {
    pub garment_id: String,
    pub sequence_index: usize,
    pub true_shape: ShapeClass,
    pub true_weight: WeightClass,
    pub decision: Decision,
    pub windows: usize,
    pub final_ma: WindowProbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub sequences: Vec<SequenceOutcome>,
    pub shape: ClassReport,
    pub weight: ClassReport,
    /// MA after every window, per sequence, same order as `sequences`.
    #[serde(skip)]
    pub traces: Vec<Vec<WindowProbs>>,
}

fn shape_labels() -> Vec<&'static str> {
    ShapeClass::ALL.iter().map(|c| c.name()).collect()
}

fn weight_labels() -> Vec<&'static str> {
    WeightClass::ALL.iter().map(|c| c.name()).collect()
}

/// Slides a stride-1 window over every sequence, aggregates the window
/// probabilities by their running mean and takes one decision per sequence.
pub fn evaluate_continuous(classifier: &dyn Classifier, sequences: &[LoadedSequence]) -> Result<EvalResult> {
    aggregate(sequences, |seq| classifier.window_probs(seq))
}

/// Same aggregation over single-frame predictions, for a network that has
/// only been through stage 1.
pub fn evaluate_frame_ma(classifier: &dyn Classifier, sequences: &[LoadedSequence]) -> Result<EvalResult> {
    aggregate(sequences, |seq| classifier.frame_probs(seq))
}

fn aggregate(
    sequences: &[LoadedSequence],
    probs: impl Fn(&LoadedSequence) -> Result<Vec<WindowProbs>> + Sync,
) -> Result<EvalResult> {
    if sequences.is_empty() {
        return Err(Error::Usage("evaluation needs at least one test sequence".into()));
    }
    let per_seq: Vec<(SequenceOutcome, Vec<WindowProbs>)> = sequences
        .par_iter()
        .map(|seq| {
            let state = probs(seq)?.iter().fold(MAState::new(), update_ma);
            let decision = decide(&state)?;
            let outcome = SequenceOutcome {
                garment_id: seq.garment_id.clone(),
                sequence_index: seq.sequence_index,
                true_shape: seq.labels.shape,
                true_weight: seq.labels.weight,
                decision,
                windows: state.count(),
                final_ma: state.current().expect("decided state is non-empty"),
            };
            Ok((outcome, state.trace))
        })
        .collect::<Result<_>>()?;
    let (outcomes, traces): (Vec<_>, Vec<_>) = per_seq.into_iter().unzip();
    let shape = ClassReport::from_pairs(
        &shape_labels(),
        outcomes.iter().map(|o| (o.true_shape.index(), o.decision.shape.index())),
    );
    let weight = ClassReport::from_pairs(
        &weight_labels(),
        outcomes.iter().map(|o| (o.true_weight.index(), o.decision.weight.index())),
    );
    Ok(EvalResult {
        sequences: outcomes,
        shape,
        weight,
        traces,
    })
}

impl EvalResult {
    /// CSV of the MA trace of sequence `i`: window index, then one column
    /// per shape class and per weight class.
    pub fn trace_csv(&self, i: usize) -> String {
        let mut out = String::from("window_index");
        for l in shape_labels() {
            write!(out, ",shape_{l}").unwrap();
        }
        for l in weight_labels() {
            write!(out, ",weight_{l}").unwrap();
        }
        out.push('\n');
        for (w, p) in self.traces[i].iter().enumerate() {
            write!(out, "{w}").unwrap();
            for v in p.shape.iter().chain(&p.weight) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Writes `eval.json` and one trace CSV per sequence under `traces/`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let traces = dir.join("traces");
        std::fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
        let json = dir.join("eval.json");
        let body = serde_json::to_string_pretty(self).expect("eval result serializes");
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        let mut written = vec![json];
        for (i, s) in self.sequences.iter().enumerate() {
            let path = traces.join(format!("{}_seq{:02}.csv", s.garment_id, s.sequence_index));
            std::fs::write(&path, self.trace_csv(i)).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Per-frame accuracy of the single-frame path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleShotResult {
    pub frames: usize,
    pub shape: ClassReport,
    pub weight: ClassReport,
}

impl SingleShotResult {
    pub fn tables(&self, input: &str) -> String {
        format!(
            "{}\n{}",
            self.shape.to_table(&format!("shape accuracy (%), {input} input")),
            self.weight.to_table(&format!("weight accuracy (%), {input} input"))
        )
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("single_shot.json");
        let body = serde_json::to_string_pretty(self).expect("result serializes");
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Classifies every frame on its own and scores each frame against its
/// sequence's labels.
pub fn single_shot_eval(classifier: &dyn Classifier, sequences: &[LoadedSequence]) -> Result<SingleShotResult> {
    if sequences.is_empty() {
        return Err(Error::Usage("single-shot evaluation needs at least one test sequence".into()));
    }
    let per_seq: Vec<Vec<(usize, usize, usize, usize)>> = sequences
        .par_iter()
        .map(|seq| {
            Ok(classifier
                .frame_probs(seq)?
                .iter()
                .map(|p| {
                    (
                        seq.labels.shape.index(),
                        argmax_with_tie(&p.shape).0,
                        seq.labels.weight.index(),
                        argmax_with_tie(&p.weight).0,
                    )
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let all: Vec<_> = per_seq.into_iter().flatten().collect();
    Ok(SingleShotResult {
        frames: all.len(),
        shape: ClassReport::from_pairs(&shape_labels(), all.iter().map(|&(t, p, _, _)| (t, p))),
        weight: ClassReport::from_pairs(&weight_labels(), all.iter().map(|&(_, _, t, p)| (t, p))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Labels;

    fn fake_sequences(per_class: usize, frames: usize) -> Vec<LoadedSequence> {
        let mut out = Vec::new();
        for (i, shape) in ShapeClass::ALL.into_iter().enumerate() {
            for s in 0..per_class {
                out.push(LoadedSequence {
                    garment_id: format!("{}-{}", shape.name(), i),
                    sequence_index: s,
                    labels: Labels {
                        shape,
                        weight: WeightClass::ALL[(i + s) % 3],
                    },
                    frames: vec![Tensor::zeros(&[1, 1, 2, 2]); frames],
                    empty_mask: vec![false; frames],
                });
            }
        }
        out
    }

    #[test]
    fn perfect_stub_gives_identity_confusion() {
        let seqs = fake_sequences(4, 10);
        let r = evaluate_continuous(&PerfectStub, &seqs).unwrap();
        assert_eq!(r.sequences.len(), 20);
        assert_eq!(r.shape.average_accuracy, 1.0);
        assert_eq!(r.weight.overall_accuracy, 1.0);
        for (i, row) in r.shape.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), row[i]);
            assert_eq!(row[i], 4);
        }
        assert!(r.sequences.iter().all(|s| s.windows == 8));
        let by_frame = evaluate_frame_ma(&PerfectStub, &seqs).unwrap();
        assert!(by_frame.sequences.iter().all(|s| s.windows == 10));
        assert_eq!(by_frame.shape.average_accuracy, 1.0);
        let single = single_shot_eval(&PerfectStub, &seqs).unwrap();
        assert_eq!(single.frames, 200);
        assert_eq!(single.shape.average_accuracy, 1.0);
        assert_eq!(single.weight.average_accuracy, 1.0);
    }

    #[test]
    fn chance_stub_sits_at_chance() {
        let seqs = fake_sequences(200, 12);
        let n = seqs.len() as f64;
        let r = evaluate_continuous(&ChanceStub { seed: 3 }, &seqs).unwrap();
        for (acc, p) in [(r.shape.overall_accuracy, 0.2), (r.weight.overall_accuracy, 1.0 / 3.0)] {
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!((acc - p).abs() < 3.0 * sigma, "accuracy {acc} vs chance {p}");
        }
        let single = single_shot_eval(&ChanceStub { seed: 3 }, &seqs).unwrap();
        let nf = single.frames as f64;
        for (acc, p) in [(single.shape.overall_accuracy, 0.2), (single.weight.overall_accuracy, 1.0 / 3.0)] {
            assert!((acc - p).abs() < 3.0 * (p * (1.0 - p) / nf).sqrt());
        }
    }

    #[test]
    fn empty_test_set_is_a_usage_error() {
        assert!(matches!(evaluate_continuous(&PerfectStub, &[]), Err(Error::Usage(_))));
        assert!(matches!(single_shot_eval(&PerfectStub, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn traces_have_one_row_per_window() {
        let seqs = fake_sequences(1, 6);
        let r = evaluate_continuous(&ChanceStub { seed: 1 }, &seqs).unwrap();
        let csv = r.trace_csv(0);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines[0].starts_with("window_index,shape_pant"));
        assert_eq!(lines[1].split(',').count(), 1 + 5 + 3);
        let dir = tempfile::tempdir().unwrap();
        let files = r.write(dir.path()).unwrap();
        assert_eq!(files.len(), 1 + seqs.len());
    }
}

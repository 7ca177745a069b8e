//! Self-checks behind `dp verify`: gradient checks, the dimension chain,
//! the moving-average oracle, simulator energy and determinism.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{leave_one_out_folds, LoadedSequence};
use crate::error::{Error, Result};
use crate::eval::{argmax_with_tie, decide, evaluate_continuous, update_ma, MAState, PerfectStub, WindowProbs};
use crate::model::{ConvLayer, GarmentNet, Head, ModelPreset};
use crate::synth::{energy, generate_dataset, plan_dataset, simulate_sequence, DatasetSpec, GRAVITY};
use crate::tensor::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::tensor::{
    adaptive_avg_pool2d, conv2d, cross_entropy, dense, lstm_cell, max_pool2d, mse, LstmParams, Reduction, Tensor,
};
use crate::train::combined_loss;

/// Worst relative error seen over a batch of gradient checks.
#[derive(Debug, Clone)]
pub struct GradSummary {
    pub instances: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_case: String,
}

impl GradSummary {
    fn new() -> Self {
        Self {
            instances: 0,
            checked: 0,
            max_rel_error: 0.0,
            worst_case: String::new(),
        }
    }

    fn absorb(&mut self, what: &str, seed: u64, r: &GradCheckReport) {
        self.instances += 1;
        self.checked += r.checked;
        if r.max_rel_error >= self.max_rel_error {
            self.max_rel_error = r.max_rel_error;
            self.worst_case = format!("{what} (seed {seed})");
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn leaf(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r).requires_grad_(true)
}

/// Finite-difference checks of every differentiable op, `seeds` random
/// instances each.
pub fn gradcheck_ops(seeds: u64) -> Result<GradSummary> {
    let cfg = GradCheckConfig::default();
    let mut s = GradSummary::new();
    for seed in 0..seeds {
        let r = &mut rng(seed);
        let (a, b) = (leaf(&[2, 3], r), leaf(&[2, 3], r));
        let w = leaf(&[3, 4], r);
        let probe = Tensor::uniform(&[2, 4], 0.0, 1.0, r);
        let rep = check_gradients(&[a.clone(), b.clone(), w.clone()], &cfg, || {
            let t = a.mul(&b)?.sub(&b.tanh())?.add(&a.sigmoid())?.add(&a.relu().scale(0.5))?;
            Ok(t.matmul(&w)?.softmax().mul(&probe)?.sum())
        })?;
        s.absorb("elementwise/matmul/softmax", seed, &rep);

        let (x, wd, bd) = (leaf(&[3, 5], r), leaf(&[4, 5], r), leaf(&[4], r));
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, r);
        let rep = check_gradients(&[x.clone(), wd.clone(), bd.clone()], &cfg, || {
            dense(&x, &wd, &bd)?.mul(&probe).map(|t| t.sum())
        })?;
        s.absorb("dense", seed, &rep);

        let (x, k, kb) = (leaf(&[2, 2, 7, 6], r), leaf(&[3, 2, 3, 3], r), leaf(&[3], r));
        let probe = Tensor::uniform(conv2d(&x, &k, &kb, 2, 1)?.shape(), -1.0, 1.0, r);
        let rep = check_gradients(&[x.clone(), k.clone(), kb.clone()], &cfg, || {
            conv2d(&x, &k, &kb, 2, 1)?.mul(&probe).map(|t| t.sum())
        })?;
        s.absorb("conv2d", seed, &rep);

        let x = leaf(&[1, 2, 7, 7], r);
        let (p1, p2) = (Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, r), Tensor::uniform(&[1, 2, 3, 2], -1.0, 1.0, r));
        let rep = check_gradients(&[x.clone()], &cfg, || {
            max_pool2d(&x, 3, 2)?.mul(&p1)?.sum().add(&adaptive_avg_pool2d(&x, (3, 2))?.mul(&p2)?.sum())
        })?;
        s.absorb("max/adaptive pool", seed, &rep);

        let lstm = LstmParams::init(4, 3, r);
        let xs: Vec<Tensor> = (0..3).map(|_| leaf(&[2, 4], r)).collect();
        let probe = Tensor::uniform(&[2, 3], -1.0, 1.0, r);
        let mut params: Vec<Tensor> = lstm.tensors().into_iter().cloned().collect();
        params.extend(xs.iter().cloned());
        let rep = check_gradients(&params, &cfg, || {
            let (mut h, mut c) = (Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3]));
            for x in &xs {
                (h, c) = lstm_cell(x, &h, &c, &lstm)?;
            }
            h.mul(&probe)?.sum().add(&c.sum())
        })?;
        s.absorb("lstm cell x3", seed, &rep);

        let logits = Tensor::uniform(&[3, 4], -2.0, 2.0, r).requires_grad_(true);
        let (pred, target) = (leaf(&[2, 3], r), Tensor::uniform(&[2, 3], -1.0, 1.0, r));
        let rep = check_gradients(&[logits.clone(), pred.clone()], &cfg, || {
            cross_entropy(&logits, &[1, 3, 0])?
                .add(&mse(&pred, &target, Reduction::Mean)?)?
                .add(&mse(&pred, &target, Reduction::Sum)?)
        })?;
        s.absorb("cross-entropy/mse", seed, &rep);
    }
    Ok(s)
}

/// A network small enough to check every parameter element.
pub fn tiny_preset() -> ModelPreset {
    ModelPreset {
        name: "tiny".into(),
        input_size: (12, 12),
        input_channels: 1,
        conv_stack: vec![
            ConvLayer::Conv {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            ConvLayer::MaxPool { kernel: 2, stride: 2 },
            ConvLayer::Conv {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
        ],
        latent_shape: [2, 6, 6],
        pool_target: (2, 2),
        lstm_hidden: 3,
        classifier_hidden: 4,
        max_parameters: 1_000_000,
    }
}

/// Stage-1 and stage-2 objectives checked end to end through the tiny
/// network.
pub fn gradcheck_end_to_end(seeds: u64) -> Result<GradSummary> {
    let cfg = GradCheckConfig {
        tolerance: 1e-3,
        max_elements_per_param: Some(12),
        ..GradCheckConfig::default()
    };
    let preset = tiny_preset();
    let mut s = GradSummary::new();
    for seed in 0..seeds {
        let net = GarmentNet::new(&preset, seed)?;
        let r = &mut rng(1000 + seed);
        let frames = Tensor::uniform(&[2, 1, 12, 12], 0.0, 1.0, r);
        let perception: Vec<Tensor> = net.perception_parameters().into_iter().map(|(_, t)| t).collect();
        net.set_perception_trainable(true);
        let rep = check_gradients(&perception, &cfg, || {
            let latent = net.extractor.forward(&frames)?;
            cross_entropy(&net.classify(&latent, Head::Shape)?, &[1, 4])?
                .add(&cross_entropy(&net.classify(&latent, Head::Weight)?, &[2, 0])?)
        })?;
        s.absorb("stage-1 objective", seed, &rep);

        net.set_perception_trainable(false);
        net.set_dynamics_trainable(true);
        let dynamics: Vec<Tensor> = net.dynamics_parameters().into_iter().map(|(_, t)| t).collect();
        let latents: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[2, 2, 6, 6], 0.0, 1.0, r)).collect();
        let rep = check_gradients(&dynamics, &cfg, || {
            let pred = net.dynamics.forward([&latents[0], &latents[1], &latents[2]])?;
            let logits = net.classify(&pred, Head::Shape)?;
            Ok(combined_loss(&pred, &latents[3], &logits, &[3, 1], 1000.0)?.total)
        })?;
        s.absorb("stage-2 objective", seed, &rep);
    }
    Ok(s)
}

/// A square op whose backward is off by 50%; gradient checking has to
/// flag it. Returns the relative error found.
pub fn mutation_rel_error() -> Result<f64> {
    let x = Tensor::new(&[3], vec![0.3, -0.7, 1.1])?.requires_grad_(true);
    let report = check_gradients(&[x.clone()], &GradCheckConfig::default(), || {
        let data: Vec<f64> = x.to_vec().iter().map(|v| v * v).collect();
        let saved = x.to_vec();
        let y = Tensor::from_op("bad_square", vec![3], data, &[&x], move |g, _| {
            vec![Some(g.iter().zip(&saved).map(|(g, v)| 3.0 * v * g).collect())]
        });
        Ok(y.sum())
    })?;
    Ok(report.max_rel_error)
}

/// Structural walk of the full-size preset.
pub fn paper_shapes() -> Result<()> {
    let t = ModelPreset::paper().trace()?;
    let expect = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!("paper preset: {what}")))
        }
    };
    expect(t.latent == [1, 256, 15, 15], "latent is not [1,256,15,15]")?;
    expect(t.pooled == [1, 256, 6, 6], "pooled map is not [1,256,6,6]")?;
    expect(t.flatten == 9216, "flatten length is not 9216")?;
    expect(t.shape_head == [9216, 9216, 512, 5], "shape head widths")?;
    expect(t.weight_head == [9216, 9216, 512, 3], "weight head widths")?;
    Ok(())
}

fn random_simplex<const K: usize>(r: &mut ChaCha8Rng) -> [f64; K] {
    let raw: [f64; K] = std::array::from_fn(|_| r.random::<f64>() + 1e-3);
    let s: f64 = raw.iter().sum();
    raw.map(|v| v / s)
}

/// Largest deviation of the running MA from a brute-force mean over
/// `sequences` random runs of 198 windows, and whether every decision
/// matched the brute-force argmax.
pub fn ma_oracle(sequences: usize, seed: u64) -> (f64, bool) {
    let r = &mut rng(seed);
    let mut worst = 0.0f64;
    let mut decisions_match = true;
    for _ in 0..sequences {
        let windows: Vec<WindowProbs> = (0..198)
            .map(|_| WindowProbs {
                shape: random_simplex(r),
                weight: random_simplex(r),
            })
            .collect();
        let state = windows.iter().fold(MAState::new(), update_ma);
        let n = windows.len() as f64;
        let mean_s: Vec<f64> = (0..5).map(|k| windows.iter().map(|w| w.shape[k]).sum::<f64>() / n).collect();
        let mean_w: Vec<f64> = (0..3).map(|k| windows.iter().map(|w| w.weight[k]).sum::<f64>() / n).collect();
        let ma = state.current().expect("windows were aggregated");
        for (a, b) in ma.shape.iter().chain(&ma.weight).zip(mean_s.iter().chain(&mean_w)) {
            worst = worst.max((a - b).abs());
        }
        let d = decide(&state).expect("windows were aggregated");
        let brute = |v: &[f64]| (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best });
        decisions_match &= d.shape.index() == brute(&mean_s) && d.weight.index() == brute(&mean_w);
        decisions_match &= argmax_with_tie(&ma.shape).0 == brute(&mean_s);
    }
    (worst, decisions_match)
}

/// (decisions, windows per sequence) for one fold of the full-size
/// layout, using placeholder frames.
pub fn paper_fold_counts() -> Result<(usize, Vec<usize>)> {
    let spec = DatasetSpec::paper();
    let plan = plan_dataset(&spec, 0)?;
    let fold = &leave_one_out_folds(&plan.manifest)?[0];
    let mut test = Vec::new();
    for id in &fold.test_garment_ids {
        let g = plan.manifest.garments.iter().find(|g| &g.id == id).expect("fold ids come from the manifest");
        for (i, _) in g.sequences.iter().enumerate() {
            test.push(LoadedSequence {
                garment_id: id.clone(),
                sequence_index: i,
                labels: g.labels()?,
                frames: vec![Tensor::zeros(&[1, 1, 1, 1]); spec.frames_per_sequence],
                empty_mask: vec![false; spec.frames_per_sequence],
            });
        }
    }
    let r = evaluate_continuous(&PerfectStub, &test)?;
    Ok((r.sequences.len(), r.sequences.iter().map(|s| s.windows).collect()))
}

/// Largest per-frame rise of total energy after the grasp is released, over
/// one sequence per class of the toy layout.
pub fn max_energy_rise(seed: u64) -> Result<f64> {
    let spec = DatasetSpec {
        sequences_per_garment: 1,
        garments_per_class: 1,
        ..DatasetSpec::toy()
    };
    let plan = plan_dataset(&spec, seed)?;
    let schedule = spec.schedule()?;
    let mut worst = f64::NEG_INFINITY;
    for seq in &plan.sequences {
        let garment = &plan.garments[seq.garment];
        let (cloth, frames) = simulate_sequence(&spec, garment, seq)?;
        let totals: Vec<f64> = frames[schedule.release..]
            .iter()
            .map(|s| energy(&cloth, s, GRAVITY).total())
            .collect();
        for w in totals.windows(2) {
            worst = worst.max(w[1] - w[0]);
        }
    }
    Ok(worst)
}

fn tree_bytes(root: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Data(format!("walking {}: {e}", root.display())))?;
        if entry.file_type().is_file() {
            let path = entry.path();
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let rel = path.strip_prefix(root).expect("walk stays under root").to_string_lossy().into_owned();
            out.push((rel, bytes));
        }
    }
    Ok(out)
}

/// Generates the same small dataset twice under `scratch` and reports
/// whether the two trees are byte-identical, with the file count.
pub fn regeneration_identical(scratch: &Path, seed: u64) -> Result<(bool, usize)> {
    let spec = DatasetSpec {
        garments_per_class: 1,
        sequences_per_garment: 1,
        frames_per_sequence: 12,
        verify_fall_ordering: false,
        ..DatasetSpec::toy()
    };
    let (a, b) = (scratch.join("a"), scratch.join("b"));
    generate_dataset(&spec, &a, seed)?;
    generate_dataset(&spec, &b, seed)?;
    let (ta, tb) = (tree_bytes(&a)?, tree_bytes(&b)?);
    Ok((ta == tb, ta.len()))
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

fn run_suite(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, e.to_string()));
    SuiteOutcome {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Every suite, in order. `scratch` receives the regenerated datasets.
pub fn run_all(scratch: &Path) -> Vec<SuiteOutcome> {
    vec![
        run_suite("gradcheck-ops", || {
            let s = gradcheck_ops(20)?;
            Ok((
                s.max_rel_error < 1e-4,
                format!("{} instances, max rel error {:.2e} at {}", s.instances, s.max_rel_error, s.worst_case),
            ))
        }),
        run_suite("gradcheck-end-to-end", || {
            let s = gradcheck_end_to_end(20)?;
            Ok((
                s.max_rel_error < 1e-3,
                format!("{} instances, max rel error {:.2e} at {}", s.instances, s.max_rel_error, s.worst_case),
            ))
        }),
        run_suite("gradcheck-mutation", || {
            let e = mutation_rel_error()?;
            Ok((e > 1e-4, format!("corrupted backward caught with rel error {e:.2e}")))
        }),
        run_suite("shape-trace", || {
            paper_shapes()?;
            Ok((true, "latent [256,15,15], pooled [256,6,6], flatten 9216, heads 9216-512-{5,3}".into()))
        }),
        run_suite("ma-oracle", || {
            let (diff, decisions) = ma_oracle(100, 0);
            let (count, windows) = paper_fold_counts()?;
            let ok = diff < 1e-12 && decisions && count == 50 && windows.iter().all(|&w| w == 198);
            Ok((ok, format!("max diff {diff:.1e}, {count} decisions, windows per sequence {:?}", windows.first())))
        }),
        run_suite("energy-monotone", || {
            let rise = max_energy_rise(0)?;
            Ok((rise <= 1e-9, format!("largest post-release rise {rise:.3e} J")))
        }),
        run_suite("regeneration", || {
            let (same, files) = regeneration_identical(scratch, 7)?;
            Ok((same, format!("{files} files, identical: {same}")))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutation_is_detected() {
        assert!(mutation_rel_error().unwrap() > 0.1);
    }

    #[test]
    fn tiny_preset_traces() {
        assert_eq!(tiny_preset().trace().unwrap().latent, [1, 2, 6, 6]);
    }

    #[test]
    fn ma_oracle_small() {
        let (diff, ok) = ma_oracle(5, 1);
        assert!(diff < 1e-12 && ok);
    }
}

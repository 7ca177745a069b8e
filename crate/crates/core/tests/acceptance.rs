//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Training-heavy criteria share one generated toy dataset.

use std::ops::ControlFlow;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dp_core::data::{leave_one_out_folds, load_sequences, GarmentManifest, LoadOptions, LoadedSequence};
use dp_core::eval::{binomial_p_value, evaluate_continuous, evaluate_frame_ma, single_shot_eval, ModelClassifier};
use dp_core::model::{GarmentNet, ModelPreset};
use dp_core::synth::{generate_dataset, DatasetSpec};
use dp_core::tensor::{checksum, cross_entropy, mse, no_grad, LrSchedule, Reduction, Tensor};
use dp_core::train::{
    combined_loss, split_validation, train_stage1, train_stage2, window_latents, EpochRecord, TrainConfig,
};
use dp_core::verify;

const DATASET_SEED: u64 = 7;
const MODEL_SEED: u64 = 1;

type Check = Result<(bool, String), String>;

fn err(e: dp_core::Error) -> String {
    e.to_string()
}

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed <= limit, format!("{:.1}s of {:.0}s budget", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

fn gradients() -> Check {
    let start = Instant::now();
    let ops = verify::gradcheck_ops(20).map_err(err)?;
    let e2e = verify::gradcheck_end_to_end(20).map_err(err)?;
    let mutation = verify::mutation_rel_error().map_err(err)?;
    let (fast, time) = within(start.elapsed(), Duration::from_secs(120));
    let ok = ops.max_rel_error < 1e-4 && e2e.max_rel_error < 1e-3 && ops.instances >= 20 && e2e.instances >= 20;
    Ok((
        ok && fast && mutation > 1e-4,
        format!(
            "ops {} instances max {:.1e}; end-to-end {} instances max {:.1e}; mutation caught at {:.1e}; {time}",
            ops.instances, ops.max_rel_error, e2e.instances, e2e.max_rel_error, mutation
        ),
    ))
}

fn dimensions() -> Check {
    let start = Instant::now();
    verify::paper_shapes().map_err(err)?;
    let (fast, time) = within(start.elapsed(), Duration::from_secs(1));
    Ok((fast, format!("latent [256,15,15], pool [1,256,6,6], flatten 9216, heads 9216-9216-512-{{5,3}}; {time}")))
}

fn loss_and_schedule() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let b = rng.random_range(1..5);
        let pred = Tensor::uniform(&[b, 4, 3, 3], -2.0, 2.0, &mut rng);
        let target = Tensor::uniform(&[b, 4, 3, 3], -2.0, 2.0, &mut rng);
        let logits = Tensor::uniform(&[b, 5], -3.0, 3.0, &mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..5)).collect();
        let got = combined_loss(&pred, &target, &logits, &labels, 1000.0).map_err(err)?.total.item().map_err(err)?;
        // independent arithmetic: summed squared error per window, batch mean
        // of negative log-softmax
        let (p, t, l) = (pred.to_vec(), target.to_vec(), logits.to_vec());
        let sum_sq: f64 = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / b as f64;
        let ce: f64 = (0..b)
            .map(|i| {
                let row = &l[i * 5..(i + 1) * 5];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[labels[i]]
            })
            .sum::<f64>()
            / b as f64;
        let want = sum_sq + 1000.0 * ce;
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
        let ce_direct = cross_entropy(&logits, &labels).map_err(err)?.item().map_err(err)?;
        let mse_direct = mse(&pred, &target, Reduction::Sum).map_err(err)?.item().map_err(err)?;
        worst = worst.max((ce_direct - ce).abs()).max((mse_direct / b as f64 - sum_sq).abs() / sum_sq.max(1.0));
    }
    let schedule = LrSchedule::new(1e-4, 15, 0.1).map_err(err)?;
    let lrs: Vec<f64> = (0..35).map(|e| schedule.lr_at(e)).collect();
    let expect = |e: usize| match e {
        0..=14 => 1e-4,
        15..=29 => 1e-5,
        _ => 1e-6,
    };
    let schedule_ok = lrs.iter().enumerate().all(|(e, &lr)| (lr - expect(e)).abs() <= 1e-12 * expect(e));
    let mut distinct = lrs.clone();
    distinct.dedup();
    Ok((
        worst < 1e-12 && schedule_ok && distinct.len() == 3,
        format!("max deviation {worst:.1e} over 50 random batches; schedule {distinct:?} over epochs 0-14/15-29/30-34"),
    ))
}

fn moving_average() -> Check {
    let (diff, decisions) = verify::ma_oracle(100, 11);
    let (count, windows) = verify::paper_fold_counts().map_err(err)?;
    let windows_ok = windows.iter().all(|&w| w == 198);
    Ok((
        diff < 1e-12 && decisions && count == 50 && windows_ok,
        format!("100 sequences x 198 windows, max diff {diff:.1e}, decisions match: {decisions}; full-layout fold gives {count} decisions of {} windows", windows[0]),
    ))
}

struct Toy {
    manifest: GarmentManifest,
    opts: LoadOptions,
    preset: ModelPreset,
}

impl Toy {
    fn generate(dir: &Path) -> Result<Self, String> {
        let manifest = generate_dataset(&DatasetSpec::toy(), dir, DATASET_SEED).map_err(err)?;
        let preset = ModelPreset::toy();
        let opts = LoadOptions::new(preset.input_size, preset.input_channels);
        Ok(Self { manifest, opts, preset })
    }

    fn load(&self, ids: &[String]) -> Result<Vec<LoadedSequence>, String> {
        load_sequences(&self.manifest, ids, &self.opts).map_err(err)
    }

    fn all_ids(&self) -> Vec<String> {
        self.manifest.garments.iter().map(|g| g.id.clone()).collect()
    }
}

fn perception_checksum(net: &GarmentNet) -> u64 {
    let params: Vec<Tensor> = net.perception_parameters().into_iter().map(|(_, t)| t).collect();
    checksum(&params)
}

fn freeze(toy: &Toy) -> Check {
    let ids = toy.all_ids();
    let sequences = toy.load(&ids[..4])?;
    let net = GarmentNet::new(&toy.preset, MODEL_SEED).map_err(err)?;
    let before = perception_checksum(&net);
    let dyn_before = checksum(&net.dynamics_parameters().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    let mut cfg = TrainConfig::stage2(MODEL_SEED);
    cfg.epochs = 5;
    cfg.cache_latents = true;
    let mut observer = |_: &EpochRecord| ControlFlow::Continue(());
    // any checksum change inside training surfaces as an error here
    let outcome = train_stage2(&net, &sequences, &[], &cfg, &mut observer).map_err(err)?;
    let after = perception_checksum(&net);
    let dyn_after = checksum(&net.dynamics_parameters().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    let per_epoch: Vec<&str> = outcome.report.epochs.iter().filter_map(|e| e.frozen_checksum.as_deref()).collect();
    let consistent = per_epoch.len() == 5 && per_epoch.iter().all(|c| *c == per_epoch[0]);
    Ok((
        before == after && consistent && dyn_before != dyn_after,
        format!(
            "extractor+heads {before:016x} -> {after:016x} over {} epochs, latent predictor changed: {}",
            per_epoch.len(),
            dyn_before != dyn_after
        ),
    ))
}

/// Mean squared error per latent element of t+3 predictions over every
/// window of `sequences`.
fn latent_mse(net: &GarmentNet, sequences: &[LoadedSequence]) -> Result<f64, String> {
    no_grad(|| {
        let (mut total, mut n) = (0.0, 0usize);
        for seq in sequences {
            let frames: Vec<&Tensor> = seq.frames.iter().collect();
            let lat = window_latents(net, &frames).map_err(err)?;
            for t in 0..lat.len() - 3 {
                let pred = net.dynamics.forward([&lat[t], &lat[t + 1], &lat[t + 2]]).map_err(err)?;
                total += mse(&pred, &lat[t + 3], Reduction::Mean).map_err(err)?.item().map_err(err)?;
                n += 1;
            }
        }
        Ok(total / n as f64)
    })
}

fn overfit(toy: &Toy) -> Check {
    let start = Instant::now();
    // one sequence of eight garments, every class represented
    let order = ["pant-1", "shirt-1", "sweater-1", "towel-1", "tshirt-1", "pant-2", "shirt-2", "sweater-2"];
    let mut sequences = Vec::new();
    for id in order {
        let mut s = toy.load(&[id.to_string()])?;
        sequences.push(s.swap_remove(0));
    }
    let net = GarmentNet::new(&toy.preset, MODEL_SEED).map_err(err)?;
    let mut cfg = TrainConfig::stage1(MODEL_SEED);
    cfg.epochs = 200;
    let mut reached = None;
    let mut observer = |r: &EpochRecord| {
        if r.train_shape_acc >= 0.95 {
            reached = Some((r.epoch, r.train_shape_acc));
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    };
    train_stage1(&net, &sequences, &[], &cfg, &mut observer).map_err(err)?;
    let Some((epoch, acc)) = reached else {
        return Ok((false, "stage-1 train shape accuracy never reached 95% in 200 epochs".into()));
    };

    let initial = latent_mse(&net, &sequences)?;
    let mut cfg2 = TrainConfig::stage2(MODEL_SEED);
    cfg2.cache_latents = true;
    let mut quiet = |_: &EpochRecord| ControlFlow::Continue(());
    let outcome = train_stage2(&net, &sequences, &[], &cfg2, &mut quiet).map_err(err)?;
    net.load_parameters(&outcome.best_parameters).map_err(err)?;
    let last = latent_mse(&net, &sequences)?;
    let drop = 1.0 - last / initial;
    let (fast, time) = within(start.elapsed(), Duration::from_secs(20 * 60));
    Ok((
        drop >= 0.5 && fast,
        format!(
            "stage 1 reached {:.1}% train shape accuracy at epoch {}; stage-2 mean MSE {initial:.4} -> {last:.4} ({:.0}% drop) in {} epochs; {time}",
            100.0 * acc,
            epoch + 1,
            100.0 * drop,
            outcome.report.epochs.len()
        ),
    ))
}

fn known_garments(toy: &Toy) -> Check {
    let all = toy.load(&toy.all_ids())?;
    let (train, val) = split_validation(&all, 1);
    let net = GarmentNet::new(&toy.preset, MODEL_SEED).map_err(err)?;
    let mut cfg = TrainConfig::stage1(MODEL_SEED);
    cfg.epochs = 100;
    let mut best = (0.0, 0.0, 0usize);
    let mut failure = None;
    let mut observer = |r: &EpochRecord| match evaluate_frame_ma(&ModelClassifier(&net), &val) {
        Ok(res) => {
            let seq = res.shape.overall_accuracy;
            if seq > best.0 {
                best = (seq, r.val_shape_acc.unwrap_or(0.0), r.epoch);
            }
            if seq >= 0.85 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        }
        Err(e) => {
            failure = Some(e.to_string());
            ControlFlow::Break(())
        }
    };
    let outcome = train_stage1(&net, &train, &val, &cfg, &mut observer).map_err(err)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let frame_best = outcome.report.epochs.iter().filter_map(|e| e.val_shape_acc).fold(0.0, f64::max);
    Ok((
        best.0 >= 0.85,
        format!(
            "{} held-out sequences of seen garments: {:.1}% of sequence decisions correct at epoch {} ({:.1}% of frames then, best frame-level {:.1}%)",
            val.len(),
            100.0 * best.0,
            best.2 + 1,
            100.0 * best.1,
            100.0 * frame_best
        ),
    ))
}

struct FoldNumbers {
    shape_correct: usize,
    weight_correct: usize,
    sequences: usize,
    single_weight_correct: usize,
    single_frames: usize,
    lines: Vec<String>,
}

fn leave_one_out(toy: &Toy) -> Result<FoldNumbers, String> {
    let mut n = FoldNumbers {
        shape_correct: 0,
        weight_correct: 0,
        sequences: 0,
        single_weight_correct: 0,
        single_frames: 0,
        lines: Vec::new(),
    };
    for fold in leave_one_out_folds(&toy.manifest).map_err(err)? {
        let train_all = toy.load(&fold.train_garment_ids)?;
        let test = toy.load(&fold.test_garment_ids)?;
        let (train, val) = split_validation(&train_all, 1);
        let net = GarmentNet::new(&toy.preset, MODEL_SEED).map_err(err)?;
        let mut quiet = |_: &EpochRecord| ControlFlow::Continue(());
        let s1 = train_stage1(&net, &train, &val, &TrainConfig::stage1(MODEL_SEED), &mut quiet).map_err(err)?;
        net.load_parameters(&s1.best_parameters).map_err(err)?;
        let single = single_shot_eval(&ModelClassifier(&net), &test).map_err(err)?;
        let mut cfg2 = TrainConfig::stage2(MODEL_SEED);
        cfg2.cache_latents = true;
        let s2 = train_stage2(&net, &train, &val, &cfg2, &mut quiet).map_err(err)?;
        net.load_parameters(&s2.best_parameters).map_err(err)?;
        let cont = evaluate_continuous(&ModelClassifier(&net), &test).map_err(err)?;
        n.lines.push(format!(
            "fold {}: continuous shape {:.1}% weight {:.1}% | single-shot shape {:.1}% weight {:.1}%",
            fold.fold_index,
            100.0 * cont.shape.overall_accuracy,
            100.0 * cont.weight.overall_accuracy,
            100.0 * single.shape.overall_accuracy,
            100.0 * single.weight.overall_accuracy
        ));
        n.shape_correct += cont.shape.correct;
        n.weight_correct += cont.weight.correct;
        n.sequences += cont.shape.total;
        n.single_weight_correct += single.weight.correct;
        n.single_frames += single.weight.total;
    }
    Ok(n)
}

fn generalization(n: &FoldNumbers, elapsed: Duration) -> Check {
    let shape = n.shape_correct as f64 / n.sequences as f64;
    let weight = n.weight_correct as f64 / n.sequences as f64;
    let p_shape = binomial_p_value(n.shape_correct, n.sequences, 0.2);
    let p_weight = binomial_p_value(n.weight_correct, n.sequences, 1.0 / 3.0);
    let (fast, time) = within(elapsed, Duration::from_secs(2 * 3600));
    let ok = n.sequences >= 60 && shape > 0.2 && weight > 1.0 / 3.0 && p_shape < 0.05 && p_weight < 0.05 && fast;
    Ok((
        ok,
        format!(
            "{} test sequences: shape {}/{} = {:.1}% (p = {p_shape:.2e}), weight {}/{} = {:.1}% (p = {p_weight:.2e}); {time}",
            n.sequences,
            n.shape_correct,
            n.sequences,
            100.0 * shape,
            n.weight_correct,
            n.sequences,
            100.0 * weight
        ),
    ))
}

fn ordering(n: &FoldNumbers) -> Check {
    let cont = n.weight_correct as f64 / n.sequences as f64;
    let single = n.single_weight_correct as f64 / n.single_frames as f64;
    Ok((
        cont >= single,
        format!("weight accuracy continuous {:.1}% vs single-shot {:.1}%; {}", 100.0 * cont, 100.0 * single, n.lines.join("; ")),
    ))
}

fn physics(scratch: &Path) -> Check {
    let rise = verify::max_energy_rise(0).map_err(err)?;
    let (same, files) = verify::regeneration_identical(scratch, DATASET_SEED).map_err(err)?;
    Ok((
        rise <= 1e-9 && same,
        format!("largest post-release energy rise {rise:.2e} J; regenerated {files} files byte-identical: {same}"),
    ))
}

fn report(index: usize, title: &str, start: Instant, result: Check) -> bool {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!(
        "{} criterion {index:>2} {title}: {detail} [{:.1}s]",
        if passed { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    passed
}

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let mut results = Vec::new();
    let mut run = |index: usize, title: &str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        results.push(report(index, title, start, f()));
    };
    run(1, "gradient correctness", &mut gradients);
    run(2, "dimensional contract", &mut dimensions);
    run(3, "combined loss and schedule", &mut loss_and_schedule);
    run(4, "moving-average oracle", &mut moving_average);

    let toy = Toy::generate(&scratch.path().join("toy"));
    match &toy {
        Ok(toy) => {
            run(5, "freeze contract", &mut || freeze(toy));
            run(6, "overfit sanity", &mut || overfit(toy));
            run(7, "known-garment validation", &mut || known_garments(toy));
            let start = Instant::now();
            let loo = leave_one_out(toy);
            let elapsed = start.elapsed();
            match &loo {
                Ok(n) => {
                    run(8, "above-chance generalization", &mut || generalization(n, elapsed));
                    run(9, "continuous vs single-shot weight", &mut || ordering(n));
                }
                Err(e) => {
                    run(8, "above-chance generalization", &mut || Err(e.clone()));
                    run(9, "continuous vs single-shot weight", &mut || Err(e.clone()));
                }
            }
        }
        Err(e) => {
            for (i, title) in [
                (5, "freeze contract"),
                (6, "overfit sanity"),
                (7, "known-garment validation"),
                (8, "above-chance generalization"),
                (9, "continuous vs single-shot weight"),
            ] {
                run(i, title, &mut || Err(format!("toy dataset generation failed: {e}")));
            }
        }
    }
    run(10, "simulator physics", &mut || physics(&scratch.path().join("regen")));

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

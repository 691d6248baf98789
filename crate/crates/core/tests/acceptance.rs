//! Acceptance run: one PASS/FAIL/SKIP line per criterion.
//!
//! Runs without the libtest harness so every line is printed even when all
//! criteria pass. Exits non-zero if any criterion fails.

#[path = "common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::{hand_count, network_fd_check, random_mask, random_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtcnet::augment::{apply, apply_chain, expand_dataset, AugmentSpec, GeoTransform, TransformChain};
use rtcnet::config::KvConfig;
use rtcnet::datasets::synth::blob_dataset;
use rtcnet::datasets::{fuse_expert_labels, is_binary, load_diaretdb1, load_eophtha, load_heimed};
use rtcnet::gradcheck::{
    grad_check, kink_free_tensor, MaxPoolOp, MaxUnpoolOp, ReluOp, SoftmaxCrossEntropyOp, TransposedConv2dOp,
};
use rtcnet::manifest::RUN_MANIFEST_FILE;
use rtcnet::metrics::{accuracy, dice, pixel_confusion, precision, sensitivity, specificity};
use rtcnet::ops::{conv2d_backward, conv2d_forward, maxpool2x2};
use rtcnet::{
    execute, replay, train, Command, ConvSpec, DatasetKind, Model, NetworkConfig, RunManifest, RunRequest, Shape,
    Tensor, TrainConfig, UpsampleMode,
};

// Tolerances and time limits.
const KERNEL_FD_TOL: f64 = 1e-4;
const NETWORK_FD_TOL: f64 = 1e-3;
const FD_EPS: f64 = 1e-5;
const NETWORK_FD_EPS: f64 = 1e-6;
const FD_SEEDS: u64 = 20;
const ADJOINT_TOL: f64 = 1e-10;
const ADJOINT_INSTANCES: u64 = 50;
const PARAMS_WINDOW: (usize, usize) = (10_000_000, 12_500_000);
const OVERFIT_ACCURACY: f64 = 0.99;
const OVERFIT_ITERATIONS: usize = 200;
const HARMONIC_TOL: f64 = 1e-12;
const ORACLE_CASES: usize = 1000;
const AUGMENT_CHAINS: usize = 10_000;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn gradient_fidelity() -> Outcome {
    let mut worst = [0.0f64; 6];
    for seed in 0..FD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stride, padding) = [(1, 1), (2, 1), (1, 0), (2, 0)][seed as usize % 4];
        let x = random_tensor(Shape::new(1, 2, 6, 6), &mut rng, -1.0, 1.0);
        let k = random_tensor(Shape::new(3, 2, 3, 3), &mut rng, -1.0, 1.0);
        let b = random_tensor(Shape::new(1, 3, 1, 1), &mut rng, -0.5, 0.5);
        let op = rtcnet::gradcheck::Conv2dOp { stride, padding };
        worst[0] = worst[0].max(grad_check(&op, &[x, k, b], FD_EPS).map_err(|e| e.to_string())?);

        let x = random_tensor(Shape::new(1, 3, 4, 4), &mut rng, -1.0, 1.0);
        let k = random_tensor(Shape::new(3, 2, 4, 4), &mut rng, -1.0, 1.0);
        let b = random_tensor(Shape::new(1, 2, 1, 1), &mut rng, -0.5, 0.5);
        let op = TransposedConv2dOp { stride: 2, padding: 1 };
        worst[1] = worst[1].max(grad_check(&op, &[x, k, b], FD_EPS).map_err(|e| e.to_string())?);

        // Distinct values 0.01 apart keep every window's argmax stable.
        let mut vals: Vec<f64> = (0..48).map(|i| i as f64 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let x = Tensor::from_vec(Shape::new(1, 3, 4, 4), vals).unwrap();
        worst[2] = worst[2].max(grad_check(&MaxPoolOp, std::slice::from_ref(&x), FD_EPS).map_err(|e| e.to_string())?);
        let (pooled, indices) = maxpool2x2(&x).unwrap();
        let v = random_tensor(pooled.shape(), &mut rng, -1.0, 1.0);
        worst[2] = worst[2].max(grad_check(&MaxUnpoolOp { indices }, &[v], FD_EPS).map_err(|e| e.to_string())?);

        let logits = random_tensor(Shape::new(2, 2, 3, 3), &mut rng, -3.0, 3.0);
        let target = random_mask(Shape::new(2, 1, 3, 3), &mut rng, 0.4);
        let op = SoftmaxCrossEntropyOp { target, class_weights: (1.0, rng.random_range(1.0..4.0)) };
        worst[3] = worst[3].max(grad_check(&op, &[logits], FD_EPS).map_err(|e| e.to_string())?);

        let x = kink_free_tensor(Shape::new(1, 2, 4, 4), seed, 2.0 * FD_EPS);
        worst[4] = worst[4].max(grad_check(&ReluOp, &[x], FD_EPS).map_err(|e| e.to_string())?);

        let mini = NetworkConfig::reduced(16, 16, [4, 4, 4, 4], [4, 4, 4, 4]);
        let mini = if seed % 5 == 4 { NetworkConfig { upsample_mode: UpsampleMode::Unpool, ..mini } } else { mini };
        let r = network_fd_check(mini, seed, 2, 3, NETWORK_FD_EPS);
        ensure(r.checked >= 40, || format!("seed {seed}: only {} network coordinates checked", r.checked))?;
        worst[5] = worst[5].max(r.max_rel_err);
    }
    let names = ["conv", "tconv", "pool", "softmax-ce", "relu", "network"];
    let summary =
        names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(worst[..5].iter().all(|&w| w < KERNEL_FD_TOL), || format!("kernel error too high: {summary}"))?;
    ensure(worst[5] < NETWORK_FD_TOL, || format!("network error too high: {summary}"))?;
    Ok(format!("{FD_SEEDS} seeds; max rel err {summary}"))
}

fn adjoint_identity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..ADJOINT_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (stride, padding, k) = [(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 0, 2), (1, 2, 5)][seed as usize % 5];
        let (cin, cout) = (rng.random_range(1..5), rng.random_range(1..5));
        let x = random_tensor(Shape::new(2, cin, 7, 6), &mut rng, -1.0, 1.0);
        let kernel = random_tensor(Shape::new(cout, cin, k, k), &mut rng, -1.0, 1.0);
        let spec = ConvSpec::new(kernel, vec![0.0; cout], stride, padding).unwrap();
        let cx = conv2d_forward(&x, &spec).unwrap();
        let y = random_tensor(cx.shape(), &mut rng, -1.0, 1.0);
        let lhs = cx.dot(&y).unwrap();
        let rhs = x.dot(&conv2d_backward(&x, &spec, &y).unwrap().input).unwrap();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    ensure(worst < ADJOINT_TOL, || format!("max relative gap {worst:.2e}"))?;
    Ok(format!("{ADJOINT_INSTANCES} instances; max relative gap {worst:.1e}"))
}

fn shape_chain() -> Outcome {
    let m = Model::<f32>::build(NetworkConfig::default(), 0).map_err(|e| e.to_string())?;
    let x = Tensor::full(Shape::new(1, 3, 448, 512), 0.5f32);
    let t = m.forward_trace(&x).map_err(|e| e.to_string())?;
    ensure(t.bottleneck.shape() == Shape::new(1, 512, 28, 32), || format!("bottleneck {}", t.bottleneck.shape()))?;
    ensure(t.decoder_output.shape() == Shape::new(1, 64, 448, 512), || format!("decoder {}", t.decoder_output.shape()))?;
    ensure(t.logits.shape() == Shape::new(1, 2, 448, 512), || format!("logits {}", t.logits.shape()))?;
    Ok(format!("bottleneck {}, decoder {}, logits {}", t.bottleneck.shape(), t.decoder_output.shape(), t.logits.shape()))
}

fn parameter_accounting() -> Outcome {
    let configs = [
        NetworkConfig::default(),
        NetworkConfig::reduced(64, 64, [8, 16, 32, 64], [32, 16, 8, 8]),
        NetworkConfig { upsample_mode: UpsampleMode::Unpool, ..NetworkConfig::reduced(32, 48, [4, 6, 8, 8], [8, 6, 4, 4]) },
    ];
    for c in &configs {
        let got = Model::<f32>::build(c.clone(), 0).map_err(|e| e.to_string())?.param_count();
        ensure(got == hand_count(c), || format!("{got} != closed form {} for {c:?}", hand_count(c)))?;
    }
    let n = hand_count(&configs[0]);
    ensure((PARAMS_WINDOW.0..=PARAMS_WINDOW.1).contains(&n), || format!("default has {n} parameters"))?;
    Ok(format!("3 configs exact; default {n} in [{}, {}]", PARAMS_WINDOW.0, PARAMS_WINDOW.1))
}

fn overfit_capacity() -> Outcome {
    let config = NetworkConfig::reduced(64, 64, [8, 16, 32, 64], [32, 16, 8, 8]);
    let data = blob_dataset(8, 64, 64, 5);
    let batch_size = 4;
    let epochs = OVERFIT_ITERATIONS / data.len().div_ceil(batch_size);
    let cfg = TrainConfig { learning_rate: 1e-3, batch_size, epochs, momentum: 0.9, l2: 5e-4, seed: 5, ..TrainConfig::default() };
    let model = Model::<f32>::build(config, 5).map_err(|e| e.to_string())?;
    let (model, history) = train(model, &data, &cfg, None).map_err(|e| e.to_string())?;
    let best_epoch = history.epochs.iter().map(|e| e.pixel_acc).fold(0.0, f64::max);
    let (mut right, mut total) = (0usize, 0usize);
    for s in &data {
        let pred = model.predict_mask(&s.image).map_err(|e| e.to_string())?;
        right += pred.data().iter().zip(s.mask.data()).filter(|(a, b)| a == b).count();
        total += s.mask.len();
    }
    let final_acc = right as f64 / total as f64;
    let positives = data.iter().map(|s| s.positive_pixels()).sum::<usize>() as f64 / total as f64;
    let detail = format!(
        "{OVERFIT_ITERATIONS} iterations: final train pixel acc {final_acc:.4}, best epoch {best_epoch:.4} \
         (all-background baseline {:.4}); need > {OVERFIT_ACCURACY}",
        1.0 - positives
    );
    ensure(final_acc.max(best_epoch) > OVERFIT_ACCURACY, || detail.clone())?;
    Ok(detail)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut identity_checked = 0;
    for case in 0..ORACLE_CASES {
        let (dp, dg) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let p = random_mask(Shape::new(1, 1, 8, 8), &mut rng, dp);
        let g = random_mask(Shape::new(1, 1, 8, 8), &mut rng, dg);
        let c = pixel_confusion(&p, &g).map_err(|e| e.to_string())?;
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for (&a, &b) in p.data().iter().zip(g.data()) {
            match (a == 1.0, b == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        ensure((c.tp, c.fp, c.tn, c.fn_) == (tp, fp, tn, fn_), || format!("case {case}: tally mismatch"))?;
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let want = [
            ratio(tp + tn, tp + tn + fp + fn_),
            ratio(tp, tp + fn_),
            ratio(tn, tn + fp),
            ratio(tp, tp + fp),
            ratio(2 * tp, 2 * tp + fp + fn_),
        ];
        let got = [accuracy(&c), sensitivity(&c), specificity(&c), precision(&c), dice(&c)];
        ensure(got == want, || format!("case {case}: metrics {got:?} vs oracle {want:?}"))?;
        if tp > 0 {
            let (pr, sn) = (want[3], want[1]);
            ensure((want[4] - 2.0 * pr * sn / (pr + sn)).abs() < HARMONIC_TOL, || format!("case {case}: harmonic identity"))?;
            identity_checked += 1;
        }
    }
    Ok(format!("{ORACLE_CASES} mask pairs exact; harmonic identity on {identity_checked}"))
}

fn fusion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..ORACLE_CASES {
        let maps: Vec<Tensor<f64>> = (0..4).map(|_| random_mask(Shape::new(1, 1, 8, 8), &mut rng, 0.5)).collect();
        let fused = fuse_expert_labels(&maps, 0.5).map_err(|e| e.to_string())?;
        for p in 0..64 {
            let votes = maps.iter().filter(|m| m.data()[p] == 1.0).count();
            ensure((fused.data()[p] == 1.0) == (2 * votes >= maps.len()), || format!("case {case} pixel {p}"))?;
        }
        // Graded confidences, one random pixel raised.
        let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
        let mut graded: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::from_fn(Shape::new(1, 1, 8, 8), |_| levels[rng.random_range(0..5)]))
            .collect();
        let t = rng.random_range(0.05..0.95);
        let before = fuse_expert_labels(&graded, t).map_err(|e| e.to_string())?;
        let (e, p) = (rng.random_range(0..4), rng.random_range(0..64));
        let raised = (graded[e].data()[p] + rng.random_range(0.0..1.0)).min(1.0);
        graded[e].data_mut()[p] = raised;
        let after = fuse_expert_labels(&graded, t).map_err(|e| e.to_string())?;
        ensure(before.data().iter().zip(after.data()).all(|(b, a)| a >= b), || format!("case {case}: raise cleared a pixel"))?;
    }
    Ok(format!("{ORACLE_CASES} binary stacks match vote; {ORACLE_CASES} raises monotone"))
}

fn augmentation_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sources: Vec<(Tensor<f64>, Tensor<f64>)> = (0..60)
        .map(|_| (random_tensor(Shape::new(1, 3, 16, 16), &mut rng, 0.0, 1.0), random_mask(Shape::new(1, 1, 16, 16), &mut rng, 0.2)))
        .collect();
    let spec = AugmentSpec { target_count: 1960, seed: 8, ..AugmentSpec::default() };
    let a = expand_dataset(&sources, &spec).map_err(|e| e.to_string())?;
    let b = expand_dataset(&sources, &spec).map_err(|e| e.to_string())?;
    ensure(a.len() == 1960, || format!("{} pairs", a.len()))?;
    ensure(a.iter().zip(&b).all(|(x, y)| x.record == y.record && x.image == y.image && x.mask == y.mask), || "expansion not deterministic".into())?;
    for (x, m) in &sources {
        let once = apply(x, m, GeoTransform::HFlip).map_err(|e| e.to_string())?;
        let twice = apply(&once.0, &once.1, GeoTransform::HFlip).map_err(|e| e.to_string())?;
        ensure(&twice.0 == x && &twice.1 == m, || "hflip twice is not the identity".into())?;
    }
    let wide = AugmentSpec { p_crop: 0.5, scale_range: (0.7, 1.5), max_translate: 0.3, ..spec };
    for i in 0..AUGMENT_CHAINS {
        let (x, m) = &sources[i % sources.len()];
        let chain: TransformChain = wide.sample_chain(&mut rng, 16, 16);
        let (_, am) = apply_chain(x, m, &chain).map_err(|e| e.to_string())?;
        ensure(is_binary(&am), || format!("chain {chain} produced a non-binary mask"))?;
    }
    Ok(format!("60 -> {} pairs, deterministic; hflip involution; {AUGMENT_CHAINS} chains keep masks binary", a.len()))
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = KvConfig::parse(
        "input_h = 32\ninput_w = 32\nencoder_channels = 4,8,8,8\ndecoder_channels = 8,8,4,4\n\
         epochs = 2\nbatch_size = 4\nlearning_rate = 0.001\naugment.target_count = 40\n\
         synth.count = 10\nprecision = f64\n",
    )
    .map_err(|e| e.to_string())?;
    let run = |command: Command, out: &Path, data: Option<PathBuf>| {
        let mut r = RunRequest::new(command);
        r.seed = 9;
        r.config = config.clone();
        r.out = Some(out.to_path_buf());
        r.dataset = data.as_ref().map(|_| DatasetKind::Dir);
        r.data = data;
        execute(&r).map_err(|e| e.to_string())
    };
    let data = tmp.path().join("data");
    run(Command::Synth, &data, None)?;
    run(Command::Pipeline, &tmp.path().join("seed-run"), Some(data))?;
    let manifest = RunManifest::from_file(&tmp.path().join("seed-run").join(RUN_MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    replay(&manifest, Some(&a)).map_err(|e| e.to_string())?;
    replay(&manifest, Some(&b)).map_err(|e| e.to_string())?;
    let files = ["train/weights.bin", "eval/report.tsv", "eval/per-image.tsv"];
    for f in files {
        let (x, y) = (std::fs::read(a.join(f)).map_err(|e| e.to_string())?, std::fs::read(b.join(f)).map_err(|e| e.to_string())?);
        ensure(x == y, || format!("{f} differs between replays"))?;
    }
    Ok(format!("two replays bit-identical: {}", files.join(", ")))
}

fn full_loaders() -> Option<Outcome> {
    let vars = [("RTCNET_EOPHTHA", 82usize), ("RTCNET_DIARETDB1", 89), ("RTCNET_HEIMED", 169)];
    let present: Vec<_> = vars.iter().filter_map(|&(v, n)| std::env::var_os(v).map(|p| (v, n, PathBuf::from(p)))).collect();
    if present.is_empty() {
        return None;
    }
    let check = || -> Outcome {
        let mut notes = Vec::new();
        for (var, want, root) in &present {
            let samples = match *var {
                "RTCNET_EOPHTHA" => load_eophtha(root),
                "RTCNET_DIARETDB1" => load_diaretdb1(root),
                _ => load_heimed(root),
            }
            .map_err(|e| format!("{var}: {e}"))?
            .0;
            ensure(samples.len() == *want, || format!("{var}: {} samples, want {want}", samples.len()))?;
            if *var == "RTCNET_EOPHTHA" {
                let lesioned = samples.iter().filter(|s| s.positive_pixels() > 0).count();
                ensure((lesioned, samples.len() - lesioned) == (47, 35), || format!("E-ophtha {lesioned} lesioned"))?;
            }
            notes.push(format!("{var} {}", samples.len()));
        }
        let missing: Vec<&str> = vars.iter().map(|v| v.0).filter(|v| !present.iter().any(|p| p.0 == *v)).collect();
        if !missing.is_empty() {
            notes.push(format!("unset: {}", missing.join(", ")));
        }
        Ok(notes.join("; "))
    };
    Some(check())
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    let criteria: [(&str, f64, Check); 9] = [
        ("gradient fidelity", 120.0, gradient_fidelity),
        ("adjoint identity", 10.0, adjoint_identity),
        ("shape chain", 30.0, shape_chain),
        ("parameter accounting", 30.0, parameter_accounting),
        ("overfit capacity", 300.0, overfit_capacity),
        ("metric oracle", 10.0, metric_oracle),
        ("fusion oracle", 10.0, fusion_oracle),
        ("augmentation contract", 60.0, augmentation_contract),
        ("reproducibility", 600.0, reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        let result = result.and_then(|d| if secs <= limit { Ok(d) } else { Err(format!("{d}; took {secs:.1}s > {limit}s")) });
        match result {
            Ok(d) => println!("acceptance {:>2} {name}: PASS ({d}; {secs:.1}s)", i + 1),
            Err(d) => {
                failed += 1;
                println!("acceptance {:>2} {name}: FAIL ({d}; {secs:.1}s)", i + 1);
            }
        }
    }
    match full_loaders() {
        None => println!("acceptance 10 dataset loaders: SKIP (set RTCNET_EOPHTHA, RTCNET_DIARETDB1 or RTCNET_HEIMED)"),
        Some(Ok(d)) => println!("acceptance 10 dataset loaders: PASS ({d})"),
        Some(Err(d)) => {
            failed += 1;
            println!("acceptance 10 dataset loaders: FAIL ({d})");
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

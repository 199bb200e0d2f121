//! Acceptance checks. Runs as a plain binary (no libtest harness) so every
//! criterion prints one PASS/FAIL line; exits non-zero if any fails.

use std::path::Path;
use std::time::Instant;

use protoseg::config::RunConfig;
use protoseg::explain::{evaluate, metrics_csv, overlap_from_maps, pixel_error, ConfusionAccumulator, EvalMetrics};
use protoseg::numcore::{finite_diff_grad, relative_error, Tape, Tensor};
use protoseg::protoloss::{jeffrey_divergence, jeffrey_similarity, joint_loss_var, LossConfig, ProbVector};
use protoseg::segmodel::{
    image_tensor, init_last_layer, BackboneConfig, BackboneVariant, ModelConfig, ParamGroup, ParamId, SegModel,
};
use protoseg::synthdata::{downsample_labels, generate_dataset, SegSample, IGNORE};
use protoseg::trainer::{run_pipeline, run_stage, Stage, TrainData, TrainState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn random_model(rng: &mut ChaCha8Rng) -> (SegModel, SegSample) {
    let hd = rng.gen_range(2..=4);
    let wd = rng.gen_range(2..=4);
    let c = rng.gen_range(2..=3);
    let per_class = rng.gen_range(1..=6 / c);
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            variant: if rng.gen_bool(0.5) { BackboneVariant::Plain } else { BackboneVariant::Skip },
            widths: vec![rng.gen_range(2..=4), rng.gen_range(2..=4)],
            downsample: 2,
            out_dim: rng.gen_range(2..=8),
        },
        num_classes: c,
        protos_per_class: per_class,
        epsilon: 1e-4,
    };
    let mut model = SegModel::<f64>::new(&cfg, rng.gen()).unwrap();
    // move away from the symmetric initial head so every term matters
    for v in model.last_layer.weights.data_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    for p in &mut model.backbone.params {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let (h, w) = (2 * hd, 2 * wd);
    let image: Vec<f32> = (0..h * w * 3).map(|_| rng.gen()).collect();
    let mut labels: Vec<u8> = (0..h * w)
        .map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..c as u8) })
        .collect();
    labels[0] = 0;
    (model, SegSample::new(h, w, image, labels).unwrap())
}

fn objective(model: &SegModel, sample: &SegSample, loss: &LossConfig) -> protoseg::Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, |_| false);
    let fw = model.forward(&mut tape, &vars, &image_tensor(sample))?;
    let labels = downsample_labels(&sample.labels, sample.height, sample.width, fw.hd, fw.wd)?;
    let l = joint_loss_var(&mut tape, &fw, &labels, &model.prototypes, loss)?;
    Ok(tape.value(l).item())
}

fn gradient_check() -> Outcome {
    let loss = LossConfig {
        lambda_j: 0.25,
        ..LossConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let mut worst: f64 = 0.0;
    let instances = 60;
    for _ in 0..instances {
        let (model, sample) = random_model(&mut rng);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, |_| true);
        let fw = model.forward(&mut tape, &vars, &image_tensor(&sample)).unwrap();
        let labels = downsample_labels(&sample.labels, sample.height, sample.width, fw.hd, fw.wd).unwrap();
        let l = joint_loss_var(&mut tape, &fw, &labels, &model.prototypes, &loss).unwrap();
        let grads = tape.backward(l).unwrap();
        let mut handles = vars.backbone.clone();
        handles.push(vars.prototypes);
        handles.push(vars.last_layer);
        for (id, var) in model.param_ids().into_iter().zip(handles) {
            let auto = grads.get(var).unwrap().to_f64();
            let numeric = finite_diff_grad(
                |t: &Tensor<f64>| {
                    let mut m = model.clone();
                    *m.param_mut(id) = t.clone();
                    objective(&m, &sample, &loss)
                },
                model.param(id),
                1e-6,
            )
            .unwrap();
            let err = relative_error(&auto, &numeric.to_f64(), 1e-8);
            if err > 1e-5 {
                return Err(format!("{}: relative error {err:.3e}", model.param_name(id)));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("{instances} instances, every parameter, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> ProbVector {
    let scale = [0.1, 1.0, 5.0][rng.gen_range(0..3)];
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    ProbVector::softmax(&scores).unwrap()
}

fn jeffrey_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EF);
    let cases = 1000;
    let mut failures = Vec::new();
    for case in 0..cases {
        let n = rng.gen_range(1..=12);
        let u = random_dist(&mut rng, n);
        let v = random_dist(&mut rng, n);
        let uv = jeffrey_divergence(&u, &v).unwrap();
        let vu = jeffrey_divergence(&v, &u).unwrap();
        let uu = jeffrey_divergence(&u, &u).unwrap();
        let k = rng.gen_range(2..=6);
        let mut set: Vec<ProbVector> = (0..k).map(|_| random_dist(&mut rng, n)).collect();
        let s = jeffrey_similarity(&set).unwrap();
        set.shuffle(&mut rng);
        let s_perm = jeffrey_similarity(&set).unwrap();
        let same = jeffrey_similarity(&vec![u.clone(); k]).unwrap();
        // distinct unless n = 1, where every distribution is [1]
        let distinct = n > 1 && set.windows(2).any(|w| w[0] != w[1]);
        let ok = uv == vu
            && uv >= 0.0
            && uu == 0.0
            && (0.0..=1.0).contains(&s)
            && (s - s_perm).abs() <= 1e-12
            && (same - 1.0).abs() <= 1e-12
            && (!distinct || s < 1.0 - 1e-12)
            && (distinct || (s - 1.0).abs() <= 1e-12);
        if !ok {
            failures.push(case);
        }
    }
    check(
        failures.is_empty(),
        format!("{cases} randomized cases, {} failures {:?}", failures.len(), &failures[..failures.len().min(5)]),
    )
}

// ---------------------------------------------------------------- 3-5

struct Run {
    seed: u64,
    lambda_j: f64,
    state: TrainState,
    metrics: EvalMetrics,
}

fn desk_config(seed: u64, lambda_j: f64) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("num_classes", "4"),
        ("height", "64"),
        ("width", "64"),
        ("train_samples", "300"),
        ("val_samples", "60"),
        ("protos_per_class", "6"),
        ("proto_dim", "16"),
        ("warmup_steps", "500"),
        ("joint_steps", "3000"),
        ("tune1_steps", "300"),
        ("tune2_steps", "300"),
    ] {
        c.set(k, v).unwrap();
    }
    c.seed = seed;
    c.lambda_j = lambda_j;
    c
}

fn desk_runs() -> Vec<Run> {
    let data = {
        let ds = generate_dataset(&desk_config(1, 0.0).dataset_spec()).unwrap();
        TrainData {
            train: ds.train,
            val: ds.val,
        }
    };
    let mut runs = Vec::new();
    for seed in 1..=3 {
        for lambda_j in [0.0, 0.25] {
            let t = Instant::now();
            let cfg = desk_config(seed, lambda_j);
            let mut state = TrainState::<f64>::new(&cfg).unwrap();
            run_pipeline(&mut state, &data, None, Stage::Tune2, &mut |_| {}).unwrap();
            let metrics = evaluate(&state.model, &data.val).unwrap();
            println!(
                "  run seed {seed} lambda_j {lambda_j}: val mIoU {:.4}, overlap {:.4}, utilization entropy {:.4}, active {} ({:.0}s)",
                metrics.miou.mean,
                metrics.overlap.mean.unwrap_or(f64::NAN),
                metrics.utilization.mean_entropy().unwrap_or(f64::NAN),
                metrics.active_prototypes,
                t.elapsed().as_secs_f64()
            );
            runs.push(Run {
                seed,
                lambda_j,
                state,
                metrics,
            });
        }
    }
    runs
}

fn diversity_effect(runs: &[Run]) -> Outcome {
    let mut held = 0;
    let mut notes = Vec::new();
    for seed in 1..=3 {
        let get = |lj: f64| runs.iter().find(|r| r.seed == seed && r.lambda_j == lj).unwrap();
        let (off, on) = (get(0.0), get(0.25));
        let o0 = off.metrics.overlap.mean.unwrap();
        let o1 = on.metrics.overlap.mean.unwrap();
        let e0 = off.metrics.utilization.mean_entropy().unwrap();
        let e1 = on.metrics.utilization.mean_entropy().unwrap();
        let reduction = 1.0 - o1 / o0;
        let overlap_ok = reduction >= 0.25;
        let entropy_ok = e1 > e0;
        held += (overlap_ok && entropy_ok) as usize;
        notes.push(format!(
            "seed {seed}: overlap {o0:.3}->{o1:.3} ({:.0}% lower, {}), entropy {e0:.3}->{e1:.3} ({})",
            100.0 * reduction,
            if overlap_ok { "ok" } else { "no" },
            if entropy_ok { "higher" } else { "not higher" }
        ));
    }
    check(held >= 2, format!("{held}/3 seeds hold both directions; {}", notes.join("; ")))
}

fn training_sanity(runs: &[Run]) -> Outcome {
    let mious: Vec<f64> = runs.iter().filter(|r| r.lambda_j == 0.25).map(|r| r.metrics.miou.mean).collect();
    let min = mious.iter().cloned().fold(f64::INFINITY, f64::min);
    check(min >= 0.70, format!("lambda_j=0.25 val mIoU per seed {mious:.4?}, minimum {min:.4}"))
}

fn stage_stability(runs: &[Run]) -> Outcome {
    let mut pruned_somewhere = false;
    let mut worst_proj: f64 = 0.0;
    let mut worst_prune: f64 = 0.0;
    for r in runs {
        let rep = &r.state.report;
        let row = |s: Stage| rep.iter().find(|x| x.stage == s).unwrap();
        worst_proj = worst_proj.max((row(Stage::Projection).val_miou - row(Stage::Joint).val_miou).abs());
        worst_prune = worst_prune.max((row(Stage::Prune).val_miou - row(Stage::Tune1).val_miou).abs());
        pruned_somewhere |= row(Stage::Prune).active_prototypes < row(Stage::Tune1).active_prototypes;
        if rep.windows(2).any(|w| w[1].active_prototypes > w[0].active_prototypes) {
            return Err(format!("active prototype count increases in run seed {} lambda_j {}", r.seed, r.lambda_j));
        }
    }
    check(
        worst_proj <= 0.05 && worst_prune <= 0.02 && pruned_somewhere,
        format!(
            "largest projection change {:.2} points, largest pruning change {:.2} points, pruning removed prototypes: {pruned_somewhere}",
            100.0 * worst_proj,
            100.0 * worst_prune
        ),
    )
}

// ---------------------------------------------------------------- 6

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("num_classes", "3"),
        ("train_samples", "12"),
        ("val_samples", "4"),
        ("height", "32"),
        ("width", "32"),
        ("widths", "6,8,8"),
        ("proto_dim", "6"),
        ("protos_per_class", "4"),
        ("warmup_steps", "5"),
        ("joint_steps", "5"),
        ("tune1_steps", "5"),
        ("tune2_steps", "5"),
        ("prune_knn", "4"),
        ("prune_threshold", "1"),
        ("eval_train_images", "4"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn group_bits(model: &SegModel) -> Vec<(ParamGroup, Vec<u64>)> {
    model
        .param_ids()
        .into_iter()
        .map(|id: ParamId| (model.param_group(id), model.param(id).data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn structural_rules() -> Outcome {
    // class-aware last-layer initialisation
    let cfg = small_config();
    let model = SegModel::<f64>::new(&cfg.model_config(), 11).unwrap();
    let w = init_last_layer(&model.prototypes);
    for j in 0..w.weights.shape()[0] {
        for c in 0..w.weights.shape()[1] {
            let want: f64 = if model.prototypes.class_of[j] == c { 1.0 } else { -0.5 };
            if w.weights.at2(j, c).to_bits() != want.to_bits() {
                return Err(format!("last layer init differs at ({j},{c})"));
            }
        }
    }

    // freezing
    let ds = generate_dataset(&cfg.dataset_spec()).unwrap();
    let data = TrainData {
        train: ds.train,
        val: ds.val,
    };
    let mut state = TrainState::<f64>::new(&cfg).unwrap();
    for stage in Stage::ALL {
        let before = group_bits(&state.model);
        let frozen = |g: ParamGroup| match stage {
            Stage::Warmup => matches!(g, ParamGroup::Core | ParamGroup::LastLayer),
            Stage::Joint => g == ParamGroup::LastLayer,
            Stage::Tune1 | Stage::Tune2 => g != ParamGroup::LastLayer,
            _ => false,
        };
        run_stage(stage, &data, &mut state).unwrap();
        for ((g, a), (_, b)) in before.iter().zip(group_bits(&state.model)) {
            if frozen(*g) && *a != b {
                return Err(format!("{stage} modified frozen {g:?} parameters"));
            }
        }
        if stage == Stage::Projection {
            // every active prototype is verbatim one of its class's training points
            let p = &state.model.prototypes;
            let maps: Vec<_> = data
                .train
                .iter()
                .map(|s| {
                    let z = state.model.features(s).unwrap();
                    let l = downsample_labels(&s.labels, s.height, s.width, z.hd, z.wd).unwrap();
                    (z, l)
                })
                .collect();
            for j in p.active_indices() {
                let found = maps.iter().any(|(z, l)| {
                    (0..z.points()).any(|i| l[i] as usize == p.class_of[j] && z.point(i) == p.vector(j))
                });
                if !found {
                    return Err(format!("prototype {j} is not a training point of its class"));
                }
            }
        }
    }
    Ok("last-layer init bitwise, frozen groups bitwise unchanged in all four gradient stages, projected prototypes found verbatim".into())
}

// ---------------------------------------------------------------- 7

fn ref_miou(gt: &[u8], pred: &[u8], c: usize) -> (f64, f64) {
    let mut ious = Vec::new();
    for k in 0..c as u8 {
        let mut inter = 0;
        let mut union = 0;
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE {
                continue;
            }
            if g == k && p == k {
                inter += 1;
            }
            if g == k || p == k {
                union += 1;
            }
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    let scored: Vec<(u8, u8)> = gt.iter().zip(pred).filter(|(&g, _)| g != IGNORE).map(|(&g, &p)| (g, p)).collect();
    let wrong = scored.iter().filter(|(g, p)| g != p).count();
    (ious.iter().sum::<f64>() / ious.len() as f64, wrong as f64 / scored.len() as f64)
}

fn ref_threshold(map: &[f64], q: f64) -> f64 {
    let mut v = map.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (v.len() as f64 - 1.0);
    let below = v[rank.floor() as usize];
    let above = v[rank.ceil() as usize];
    below + (above - below) * (rank - rank.floor())
}

fn ref_overlap(maps: &[Vec<Vec<f64>>], class_of: &[usize], q: f64) -> f64 {
    let mut total = 0.0;
    let mut terms = 0;
    for img in maps {
        for a in 0..class_of.len() {
            for b in a + 1..class_of.len() {
                if class_of[a] != class_of[b] {
                    continue;
                }
                let (ta, tb) = (ref_threshold(&img[a], q), ref_threshold(&img[b], q));
                let mut inter = 0;
                let mut union = 0;
                for px in 0..img[a].len() {
                    let (x, y) = (img[a][px] >= ta, img[b][px] >= tb);
                    inter += (x && y) as usize;
                    union += (x || y) as usize;
                }
                total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
                terms += 1;
            }
        }
    }
    total / terms as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E);
    let mut worst: f64 = 0.0;
    for fixture in 0..20 {
        let c = rng.gen_range(2..=5);
        let gt: Vec<u8> = (0..64).map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..c as u8) }).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..c as u8)).collect();
        let mut acc = ConfusionAccumulator::new(c);
        acc.add(&gt, &pred).unwrap();
        let (miou, err) = ref_miou(&gt, &pred, c);
        let d1 = (acc.miou().unwrap().mean - miou).abs();
        let d2 = (pixel_error(&pred, &gt).unwrap().value - err).abs();
        let d3 = (acc.pixel_error() - err).abs();

        let m = rng.gen_range(3..=6);
        let class_of: Vec<usize> = (0..m).map(|j| j % 2).collect();
        let images = rng.gen_range(1..=3);
        // quantized values so that ties at the threshold occur
        let maps: Vec<Vec<Vec<f64>>> = (0..images)
            .map(|_| (0..m).map(|_| (0..64).map(|_| rng.gen_range(0..12) as f64 * 0.25).collect()).collect())
            .collect();
        let q = [95.0, 90.0, 75.0][fixture % 3];
        let got = overlap_from_maps(&maps, &class_of, &vec![true; m], 2, q).mean.unwrap();
        let d4 = (got - ref_overlap(&maps, &class_of, q)).abs();
        let d = d1.max(d2).max(d3).max(d4);
        if d > 1e-12 {
            return Err(format!("fixture {fixture}: deviation {d:.3e}"));
        }
        worst = worst.max(d);
    }
    Ok(format!("20 random 8x8 fixtures, largest deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 8

fn run_to_dir(cfg: &RunConfig, data: &TrainData, dir: &Path, threads: usize) -> String {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut state = TrainState::<f64>::new(cfg).unwrap();
        run_pipeline(&mut state, data, Some(dir), Stage::Tune2, &mut |_| {}).unwrap();
        metrics_csv(&evaluate(&state.model, &data.val).unwrap())
    })
}

fn determinism() -> Outcome {
    let mut cfg = small_config();
    cfg.set("height", "64").unwrap();
    cfg.set("width", "64").unwrap();
    cfg.set("train_samples", "24").unwrap();
    for k in ["warmup_steps", "joint_steps", "tune1_steps", "tune2_steps"] {
        cfg.set(k, "15").unwrap();
    }
    let ds = generate_dataset(&cfg.dataset_spec()).unwrap();
    let data = TrainData {
        train: ds.train,
        val: ds.val,
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let csv_a = run_to_dir(&cfg, &data, a.path(), 1);
    let csv_b = run_to_dir(&cfg, &data, b.path(), 3);
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut compared = 0;
    for n in &names {
        let x = std::fs::read(a.path().join(n)).unwrap();
        let y = std::fs::read(b.path().join(n)).map_err(|e| format!("{n:?} missing in second run: {e}"))?;
        if x != y {
            return Err(format!("{n:?} differs between runs"));
        }
        compared += 1;
    }
    check(
        csv_a == csv_b && compared == 7,
        format!("{compared} files (6 checkpoints + report) and metrics CSV identical across two runs (1 and 3 worker threads)"),
    )
}

// ----------------------------------------------------------------

fn main() {
    // optional criterion numbers on the command line select a subset
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {n} PASS {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {d} [{secs:.1}s]")
            }
        }
    };
    report(1, "gradient correctness", &mut gradient_check);
    report(2, "Jeffrey divergence properties", &mut jeffrey_suite);
    if (3..=5).any(wanted) {
        let t = Instant::now();
        let runs = desk_runs();
        println!("  six desk-scale pipelines took {:.0}s", t.elapsed().as_secs_f64());
        report(3, "diversity effect", &mut || diversity_effect(&runs));
        report(4, "training sanity", &mut || training_sanity(&runs));
        report(5, "stage stability", &mut || stage_stability(&runs));
    }
    report(6, "structural rules", &mut structural_rules);
    report(7, "metric oracles", &mut metric_oracles);
    report(8, "determinism", &mut determinism);
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}

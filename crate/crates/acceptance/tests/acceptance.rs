//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Trains three models on the synthetic set (combined, contrastive-only,
//! feature-only), so a full run takes several minutes in release mode.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ren::aggregation::{aggregate, token_count_curve, MinGroup};
use ren::data::{PatchFeatureMap, RegionId};
use ren::eval::tasks::{
    aggregation_recovery, held_out, object_retrieval, probe_segmentation, random_prompts, region_cosine_gap,
    splits, EvalScene, DEFAULT_SUPERPIXELS, RECOVERY_SUPERPIXELS,
};
use ren::eval::{bench, linear_r2, BenchSettings};
use ren::extension::{attention_pool, masked_attention_pool, masked_attention_pool_batched, PoolingHead};
use ren::model::{align, forward, RenConfig};
use ren::prompting::grid_prompts;
use ren::train::{
    build_samples, evaluate_loss, feature_similarity_loss, gradcheck, gradcheck_problem, info_nce_loss, train,
    DataConfig, LossWeights, TrainConfig, TrainOutcome, TrainOutputs, HELD_OUT_OFFSET,
};

const RECOVERY_MU: f32 = 0.975;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn data_config() -> DataConfig {
    DataConfig::default()
}

fn train_config(weights: LossWeights) -> TrainConfig {
    TrainConfig {
        max_prompts: 64,
        d_model: Some(64),
        weights,
        ..TrainConfig::default()
    }
}

fn combined() -> LossWeights {
    LossWeights::default()
}

fn all_losses() -> LossWeights {
    LossWeights {
        lambda_attn: 1.0,
        ..LossWeights::default()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (config, sample, params) = gradcheck_problem(1).expect("gradcheck problem");
    let report = gradcheck(&sample, &params, &config, &all_losses()).expect("gradcheck");
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .tensors
        .iter()
        .map(|t| t.max_rel_err)
        .fold(0.0, f64::max);
    outcome(
        worst <= 1e-4 && secs < 60.0,
        format!("max rel err {worst:.2e} over {} tensors, {secs:.1} s", report.tensors.len()),
    )
}

/// Multi-positive InfoNCE by explicit double loop over pairs.
fn info_nce_oracle(tokens: &Array2<f64>, ids: &[Option<RegionId>], tau: f64) -> f64 {
    let n = tokens.nrows();
    let cos = |a: usize, b: usize| {
        let (x, y) = (tokens.row(a), tokens.row(b));
        x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt())
    };
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let mut pos = 0.0;
        let mut all = 0.0;
        let mut has_pos = false;
        for j in 0..n {
            if j == i {
                continue;
            }
            let e = (cos(i, j) / tau).exp();
            all += e;
            if ids[i].is_some() && ids[i] == ids[j] {
                pos += e;
                has_pos = true;
            }
        }
        if has_pos {
            total += -(pos / all).ln();
            anchors += 1;
        }
    }
    total / anchors as f64
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_err = 0f64;
    let mut max_scale_err = 0f64;
    let mut cases = 0;
    while cases < 200 {
        let n = rng.gen_range(2..=16);
        let d = rng.gen_range(2..=8);
        let tokens = Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0));
        let ids: Vec<Option<RegionId>> = (0..n)
            .map(|_| if rng.gen_bool(0.1) { None } else { Some(rng.gen_range(0..4)) })
            .collect();
        let Ok((loss, _)) = info_nce_loss(&tokens, &ids, 0.1) else {
            continue;
        };
        max_err = max_err.max((loss - info_nce_oracle(&tokens, &ids, 0.1)).abs());
        let mut scaled = tokens.clone();
        for mut row in scaled.rows_mut() {
            let c = rng.gen_range(0.1..10.0);
            row.mapv_inplace(|v| v * c);
        }
        let (scaled_loss, _) = info_nce_loss(&scaled, &ids, 0.1).expect("scaled");
        max_scale_err = max_scale_err.max((scaled_loss - loss).abs());
        cases += 1;
    }
    let a = ndarray::array![[1.0f64, 0.0], [0.0, 2.0]];
    let same = feature_similarity_loss(&a, &a.mapv(|v| 3.0 * v)).expect("feat").0;
    let opposite = feature_similarity_loss(&a, &a.mapv(|v| -v)).expect("feat").0;
    let orthogonal = feature_similarity_loss(&a, &ndarray::array![[0.0f64, 1.0], [1.0, 0.0]]).expect("feat").0;
    let closed = same == 0.0 && opposite == 2.0 && orthogonal == 1.0;
    outcome(
        max_err <= 1e-6 && max_scale_err <= 1e-6 && closed,
        format!(
            "InfoNCE vs oracle {max_err:.1e}, scale invariance {max_scale_err:.1e}, feature loss (same, opposite, orthogonal) = ({same}, {opposite}, {orthogonal})"
        ),
    )
}

fn held_out_pairs(data: &DataConfig, config: &RenConfig) -> Vec<ren::train::PairSample<f32>> {
    let scenes = data.scenes(HELD_OUT_OFFSET + splits::PAIRS, 32).expect("scenes");
    let idx: Vec<usize> = (0..scenes.len()).collect();
    build_samples(&scenes, &idx, data, 64, config, 5)
        .into_iter()
        .collect::<ren::Result<_>>()
        .expect("held-out pairs")
}

fn criterion_3(run: &TrainOutcome, train_secs: f64, data: &DataConfig, weights: &LossWeights) -> Outcome {
    let samples = held_out_pairs(data, &run.config);
    let init = ren::model::init_params(0, &run.config).expect("init");
    let before = evaluate_loss(&samples, &init, &run.config, weights).expect("loss").l_cont;
    let after = evaluate_loss(&samples, &run.params, &run.config, weights).expect("loss").l_cont;
    let drop = 1.0 - after / before;
    let scenes = held_out(data, splits::COSINE, 20).expect("scenes");
    let gap = region_cosine_gap(&scenes, 64, &run.params, &run.config, 1).expect("gap");
    outcome(
        drop >= 0.8 && gap.gap() >= 0.5 && train_secs <= 1800.0,
        format!(
            "held-out l_cont {before:.4} -> {after:.4} ({:.1}% drop), within {:.3} cross {:.3} gap {:.3}, training {train_secs:.0} s",
            100.0 * drop,
            gap.within,
            gap.cross,
            gap.gap()
        ),
    )
}

fn recovery_ari(run: &TrainOutcome, scenes: &[EvalScene]) -> ren::eval::tasks::RecoveryReport {
    aggregation_recovery(scenes, RECOVERY_SUPERPIXELS, RECOVERY_MU, &run.params, &run.config).expect("recovery")
}

fn criterion_4(report: &ren::eval::tasks::RecoveryReport) -> Outcome {
    let min = report.per_scene_ari.iter().cloned().fold(1.0, f64::min);
    outcome(
        report.mean_ari >= 0.9 && report.reduction >= 5.0,
        format!(
            "mean ARI {:.3} (worst scene {min:.3}), {} prompts -> {} groups ({:.2}x), S={} mu={}",
            report.mean_ari, report.n_prompts, report.n_groups, report.reduction, report.superpixels, report.mu
        ),
    )
}

fn criterion_5(run: &TrainOutcome, scenes: &[EvalScene]) -> Outcome {
    let grid = [0.875f32, 0.9, 0.925, 0.95, 0.975];
    let mut ok = true;
    let mut curves = Vec::new();
    for s in scenes {
        let t = forward(&s.view.features, &grid_prompts(16).unwrap(), &run.params, &run.config).expect("forward");
        let groups = aggregate(&t, 1.0, MinGroup::Fixed(1)).expect("aggregate").n_groups();
        ok &= groups == t.len();
        let curve = token_count_curve(&t, &grid).expect("curve");
        ok &= curve.windows(2).all(|w| w[0].1 <= w[1].1);
        curves.push(curve.iter().map(|c| c.1).collect::<Vec<_>>());
    }
    outcome(
        ok,
        format!("mu=1 keeps every token and counts are non-decreasing on {} scenes; first {:?}", scenes.len(), curves[0]),
    )
}

fn criterion_6(run: &TrainOutcome, scenes: &[EvalScene]) -> Outcome {
    let mut runs = 0;
    let mut ok = true;
    for (i, s) in scenes.iter().enumerate() {
        for prompts in [grid_prompts(1 + i % 24).unwrap(), random_prompts(s, 37, None, i as u64)] {
            let t = forward(&s.view.features, &prompts, &run.params, &run.config).expect("forward");
            let expect = align(&t.ren, &run.params.w_align).expect("align");
            ok &= t.aligned.iter().zip(expect.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            runs += 1;
        }
    }
    outcome(ok, format!("aligned == W_align * ren bit for bit on {runs} tokenize runs"))
}

fn criterion_7(run: &TrainOutcome, data: &DataConfig) -> Outcome {
    let tr = held_out(data, splits::PROBE_TRAIN, 40).expect("scenes");
    let te = held_out(data, splits::PROBE_TEST, 20).expect("scenes");
    let r = probe_segmentation(&tr, &te, data.n_classes + 1, DEFAULT_SUPERPIXELS, &run.params, &run.config)
        .expect("probe");
    let diff = 100.0 * (r.ren_miou - r.patch_miou);
    outcome(
        diff >= 2.0,
        format!(
            "mIoU REN {:.2} vs nearest patch {:.2} ({diff:+.2} points, {} training tokens)",
            100.0 * r.ren_miou,
            100.0 * r.patch_miou,
            r.n_train_tokens
        ),
    )
}

fn criterion_8(run: &TrainOutcome, data: &DataConfig) -> Outcome {
    let db = held_out(data, splits::RETRIEVAL_DB, 200).expect("scenes");
    let q = held_out(data, splits::RETRIEVAL_QUERY, 20).expect("scenes");
    let r = object_retrieval(&db, &q, &run.params, &run.config, 3).expect("retrieval");
    outcome(
        r.ren.map >= 0.9 && r.ren.map > r.baseline.map,
        format!(
            "mAP REN {:.3} vs mean-patch {:.3}; mRP@{} {:.3} vs {:.3}",
            r.ren.map, r.baseline.map, r.ren.k, r.ren.mrp_at_k, r.baseline.mrp_at_k
        ),
    )
}

fn criterion_9(run: &TrainOutcome, map: &PatchFeatureMap) -> Outcome {
    let settings = BenchSettings {
        runs: 5,
        warmups: 1,
        with_aggregation: false,
        seed: 9,
    };
    let r = bench(map, &[256, 1024, 4096], &run.params, &run.config, &settings).expect("bench");
    let xs: Vec<f64> = r.iter().map(|b| b.prompts as f64).collect();
    let ys: Vec<f64> = r.iter().map(|b| b.forward.mean_s).collect();
    let r2 = linear_r2(&xs, &ys);
    let big = bench(
        map,
        &[16384],
        &run.params,
        &run.config,
        &BenchSettings {
            runs: 1,
            warmups: 0,
            ..settings
        },
    )
    .expect("bench");
    let big_ok = big[0].error.is_none();
    let times: Vec<String> = ys.iter().map(|t| format!("{:.3}", t)).collect();
    outcome(
        r2 >= 0.95 && big_ok && r.iter().all(|b| b.error.is_none()),
        format!(
            "R^2 {r2:.4} over 256/1024/4096 (s: {}), 16384 prompts {}",
            times.join("/"),
            match &big[0].error {
                None => format!("in {:.2} s", big[0].forward.mean_s),
                Some(e) => format!("failed: {e}"),
            }
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (m, d) = (36, 16);
    let features = Array2::from_shape_simple_fn((m, d), || rng.gen_range(-1.0f32..1.0));
    let head = PoolingHead::random(4, d, 4).expect("head");
    let full = masked_attention_pool(features.view(), &head, &vec![true; m]).expect("pool");
    let plain = attention_pool(features.view(), &head).expect("pool");
    let exact = full.iter().zip(plain.iter()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut singleton_err = 0f32;
    for j in 0..m {
        let mut members = vec![false; m];
        members[j] = true;
        let got = masked_attention_pool(features.view(), &head, &members).expect("pool");
        let want = head.w_o.dot(&head.w_v.dot(&features.row(j)));
        singleton_err = singleton_err.max(max_abs(&got, &want));
    }

    let sets: Vec<Vec<bool>> = (0..20)
        .map(|_| {
            let mut s: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.3)).collect();
            s[rng.gen_range(0..m)] = true;
            s
        })
        .collect();
    let batched = masked_attention_pool_batched(features.view(), &head, &sets).expect("batched");
    let mut batch_err = 0f32;
    for (i, s) in sets.iter().enumerate() {
        let seq = masked_attention_pool(features.view(), &head, s).expect("pool");
        batch_err = batch_err.max(max_abs(&batched.row(i).to_owned(), &seq));
    }
    outcome(
        exact && singleton_err <= 1e-6 && batch_err <= 1e-6,
        format!(
            "full mask exact: {exact}, singleton closed form err {singleton_err:.1e}, batched vs sequential err {batch_err:.1e}"
        ),
    )
}

fn max_abs(a: &Array1<f32>, b: &Array1<f32>) -> f32 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn criterion_11(combined: f64, cont: &ren::Result<TrainOutcome>, feat: &ren::Result<TrainOutcome>, scenes: &[EvalScene]) -> Outcome {
    let score = |r: &ren::Result<TrainOutcome>| r.as_ref().ok().map(|run| recovery_ari(run, scenes).mean_ari);
    let (c, f) = (score(cont), score(feat));
    let fmt = |x: Option<f64>| x.map_or("failed".to_string(), |v| format!("{v:.3}"));
    let passed = matches!((c, f), (Some(c), Some(f)) if combined >= c && combined >= f);
    outcome(
        passed,
        format!("ARI combined {combined:.3}, contrastive-only {}, feature-only {}", fmt(c), fmt(f)),
    )
}

fn timed_train(weights: LossWeights, data: &DataConfig) -> (ren::Result<TrainOutcome>, f64) {
    let start = Instant::now();
    let run = train(&train_config(weights), data, &TrainOutputs::default());
    (run, start.elapsed().as_secs_f64())
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2}: {} - {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(10, criterion_10());

    let data = data_config();
    let (run, secs) = timed_train(combined(), &data);
    let run = run.expect("combined training run");
    report(3, criterion_3(&run, secs, &data, &combined()));
    let recovery_scenes = held_out(&data, splits::RECOVERY, 20).expect("scenes");
    let rec = recovery_ari(&run, &recovery_scenes);
    report(4, criterion_4(&rec));
    report(5, criterion_5(&run, &recovery_scenes[..5]));
    report(6, criterion_6(&run, &recovery_scenes));
    report(7, criterion_7(&run, &data));
    report(8, criterion_8(&run, &data));
    report(9, criterion_9(&run, &recovery_scenes[0].view.features));

    let cont = timed_train(
        LossWeights {
            lambda_feat: 0.0,
            ..combined()
        },
        &data,
    )
    .0;
    let feat = timed_train(
        LossWeights {
            lambda_cont: 0.0,
            ..combined()
        },
        &data,
    )
    .0;
    report(11, criterion_11(rec.mean_ari, &cont, &feat, &recovery_scenes));

    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.1.passed).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

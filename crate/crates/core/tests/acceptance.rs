//! Acceptance report: one PASS/FAIL line per criterion. Failures are reported,
//! not raised, so the line set is always complete.

mod common;

use std::fs;
use std::time::Instant;

use common::accounting::{enumerated, random_config};
use common::fd;
use common::golden::{golden_run, run};
use common::laws::soft_rank_laws;
use common::{random_noise, random_prompt, rng};
use paine_core::autograd::Tensor;
use paine_core::cli::store::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, MANIFEST};
use paine_core::cli::PersistError;
use paine_core::data::{oracle_generate, Dataset, Oracle, OracleConfig};
use paine_core::networks::{count_params_flops, NoiseTensor, PainePredictor, PredictorConfig, StreamDims};
use paine_core::ranking::pearson;
use paine_core::selection::{
    distribution_stats, pcc_matrix, selection_uplift, uplift_with, UpliftParams, UpliftReport,
};
use paine_core::training::{
    adamw_step, clip_global_norm, evaluate, evaluate_prior, train, Checkpoint, EarlyStopState,
    OptimState, PlateauState, TrainConfig, TrainReport,
};
use paine_core::networks::ParamSet;
use rand::seq::SliceRandom;
use rand::Rng;
use tempfile::tempdir;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, title: &str, t0: Instant, o: Outcome) -> bool {
    println!(
        "criterion {id} {title}: {} [{:.1}s] {}",
        if o.pass { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64(),
        o.detail
    );
    o.pass
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let ops = fd::run_all(100);
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<String> = ops
        .iter()
        .filter(|s| !s.passed())
        .map(|s| format!("{} {:.1e} (mixed {:.1e})", s.name, s.max_rel_err, s.max_mixed_err))
        .collect();
    let worst = ops.iter().map(|s| s.max_rel_err).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} ops x 100 instances, worst max_rel_err {worst:.1e}, {secs:.0}s; over 1e-4: [{}]",
            ops.len(),
            failed.join(", ")
        ),
    )
}

fn soft_rank() -> Outcome {
    let l = soft_rank_laws(1000, 42);
    outcome(
        l.passed(),
        format!(
            "sum {:.1e}, bounds {:.1e}, limit {:.1e}, translation mismatches {}, pair {:.1e}",
            l.sum_err, l.bound_err, l.limit_err, l.translation_mismatches, l.pair_err
        ),
    )
}

fn recipe() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = |cond: bool, what: &str| {
        if !cond {
            notes.push(what.to_string());
        }
    };
    let one = |v: f64| ParamSet::from_named(vec![("w".into(), Tensor::vector(vec![v]).unwrap())]);

    let cfg = TrainConfig { adam_eps: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
    let mut p = one(1.0);
    let mut st = OptimState::new(&p);
    adamw_step(&mut p, &[Tensor::vector(vec![2.0]).unwrap()], &mut st, 0.1, &cfg).unwrap();
    ok((p.tensors()[0].data()[0] - 0.9).abs() < 1e-12, "adamw t=1");

    let cfg = TrainConfig { weight_decay: 0.3, ..TrainConfig::default() };
    let mut p = one(2.0);
    let mut st = OptimState::new(&p);
    for _ in 0..40 {
        adamw_step(&mut p, &[Tensor::zeros(&[1])], &mut st, 0.05, &cfg).unwrap();
    }
    let expect = 2.0 * (1.0 - 0.05 * 0.3f64).powi(40);
    ok((p.tensors()[0].data()[0] - expect).abs() < 1e-12, "decay-only law");

    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let mut g: Vec<Tensor> = (0..3)
            .map(|_| Tensor::vector((0..8).map(|_| r.random_range(-50.0..50.0)).collect()).unwrap())
            .collect();
        clip_global_norm(&mut g, 1.0).unwrap();
        worst = worst.max(g.iter().map(|t| t.sum_squares()).sum::<f64>().sqrt());
    }
    ok(worst <= 1.0 + 1e-12, "clip norm");

    let mut pl = PlateauState::new(1e-4, 0.5, 5);
    pl.step(0.5);
    let lrs: Vec<f64> = (0..5).map(|_| pl.step(0.5)).collect();
    ok(lrs[..4].iter().all(|&l| l == 1e-4) && lrs[4] == 5e-5, "plateau after 5");

    let mut es = EarlyStopState::new(15);
    es.step(0.5);
    let stops: Vec<bool> = (0..15).map(|_| es.step(0.5)).collect();
    ok(stops[..14].iter().all(|s| !s) && stops[14], "early stop after 15");

    let ocfg = OracleConfig {
        prompt_count: 20,
        noises_per_prompt: 10,
        prompt_streams: vec![StreamDims { tok: 3, d_tok: 4 }, StreamDims { tok: 2, d_tok: 2 }],
        noise_shape: [1, 16, 16],
        ..OracleConfig::default()
    };
    let ds = oracle_generate(&ocfg, 1).unwrap();
    let pcfg = ocfg.matching_predictor(PredictorConfig {
        attn_blocks: 1,
        heads: 2,
        stage_channels: [4, 4, 8, 8],
        mlp_hidden: vec![16],
        ..PredictorConfig::default()
    });
    let tc = TrainConfig { lr: 1e-3, max_epochs: 8, group_k: 4, ..TrainConfig::default() };
    let (ckpt, rep) = train(&ds, &pcfg, &tc).unwrap();
    let argmax = rep
        .history
        .iter()
        .fold((0, f64::NEG_INFINITY), |(e, b), h| if h.val.srcc_global > b { (h.epoch, h.val.srcc_global) } else { (e, b) })
        .0;
    let val = evaluate(&ckpt, &ckpt.split(&ds).unwrap().val).unwrap();
    ok(
        rep.best_epoch == argmax && val.srcc_global.to_bits() == rep.best_val_srcc.to_bits(),
        "best-val checkpoint",
    );

    outcome(
        notes.is_empty(),
        if notes.is_empty() {
            "adamw t=1, decay-only, clip, plateau 5, early stop 15, best-val selection".to_string()
        } else {
            format!("failed: {}", notes.join(", "))
        },
    )
}

struct Reference {
    oracle: OracleConfig,
    data: Dataset,
    ckpt: Checkpoint,
    report: TrainReport,
    secs: f64,
}

fn reference() -> Reference {
    let oracle = OracleConfig::default();
    let data = oracle_generate(&oracle, 0).unwrap();
    let t0 = Instant::now();
    let (ckpt, report) =
        train(&data, &oracle.matching_predictor(PredictorConfig::reduced()), &TrainConfig::default()).unwrap();
    Reference {
        oracle,
        data,
        ckpt,
        report,
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn learning(r: &Reference) -> Outcome {
    let split = r.ckpt.split(&r.data).unwrap();
    let val = evaluate(&r.ckpt, &split.val).unwrap();
    let test = evaluate(&r.ckpt, &split.test).unwrap();

    let mut scores = r.data.scores();
    scores.shuffle(&mut rng(99));
    let shuffled = r.data.with_scores(&scores).unwrap();
    let (control, _) = train(
        &shuffled,
        r.ckpt.model.config(),
        &TrainConfig::default(),
    )
    .unwrap();
    let control_split = control.split(&r.data).unwrap();
    let control_val = evaluate(&control, &control_split.val).unwrap();
    let control_test = evaluate(&control, &control_split.test).unwrap();

    outcome(
        val.srcc_global >= 0.6 && val.srcc_macro >= 0.5 && control_val.srcc_global.abs() < 0.2,
        format!(
            "val global {:.3} macro {:.3} (test {:.3} / {:.3}), best epoch {} of {}, train {:.0}s; shuffled-label control val global {:.3} (macro {:.3}, test global {:.3})",
            val.srcc_global,
            val.srcc_macro,
            test.srcc_global,
            test.srcc_macro,
            r.report.best_epoch,
            r.report.history.len(),
            r.secs,
            control_val.srcc_global,
            control_val.srcc_macro,
            control_test.srcc_global
        ),
    )
}

fn prior(r: &Reference) -> Outcome {
    let split = r.ckpt.split(&r.data).unwrap();
    let m = evaluate_prior(&r.ckpt, &split.test).unwrap();
    let model = &r.ckpt.model;
    let mut g = rng(8);
    let mut bitwise = true;
    for _ in 0..20 {
        let p = random_prompt(&mut g, model.config());
        let (a, b) = (random_noise(&mut g, model.config()), random_noise(&mut g, model.config()));
        let prior = model.predict_prior(&p).unwrap().to_bits();
        bitwise &= model.predict(&p, &a, true).unwrap().to_bits() == prior;
        bitwise &= model.predict(&p, &b, true).unwrap().to_bits() == prior;
    }
    outcome(
        m.srcc >= 0.7 && m.mape <= 5.0 && bitwise,
        format!(
            "test prompt-level srcc {:.3}, mape {:.2}%, mae {:.3}, masking bitwise {}",
            m.srcc,
            m.mape,
            m.mae,
            if bitwise { "yes" } else { "no" }
        ),
    )
}

fn fresh_prompts(cfg: &OracleConfig, count: u64) -> Vec<paine_core::networks::PromptEmbedding> {
    let oracle = Oracle::new(cfg.clone()).unwrap();
    (0..count).map(|p| oracle.prompt(0xacce, p)).collect()
}

fn uplift(r: &Reference) -> Outcome {
    let prompts = fresh_prompts(&r.oracle, 200);
    let params = UpliftParams { n: 20, b: 1, trials: 1, seed: 11 };
    let rep = selection_uplift(&r.ckpt, &r.oracle, &prompts, params).unwrap();
    let oracle = Oracle::new(r.oracle.clone()).unwrap();
    let perfect = uplift_with(&oracle, &oracle, &prompts[..50], params).unwrap();
    let perfect_ok = (perfect.recovered_fraction - 1.0).abs() <= 1e-9;
    outcome(
        rep.prompt_trials >= 200
            && rep.recovered_fraction >= 0.5
            && rep.mean_uplift > 0.0
            && rep.p_value < 0.01
            && perfect_ok,
        format!(
            "{} prompt-trials, recovered {:.3}, mean uplift {:.4}, p {:.2e}; perfect model {:.12}",
            rep.prompt_trials, rep.recovered_fraction, rep.mean_uplift, rep.p_value, perfect.recovered_fraction
        ),
    )
}

fn n_sweep(r: &Reference) -> Outcome {
    let prompts = fresh_prompts(&r.oracle, 40);
    let reps: Vec<UpliftReport> = [50, 100, 500]
        .into_iter()
        .map(|n| selection_uplift(&r.ckpt, &r.oracle, &prompts, UpliftParams { n, b: 1, trials: 1, seed: 12 }).unwrap())
        .collect();
    let means: Vec<f64> = reps.iter().map(|r| r.mean_best_predicted).collect();
    outcome(
        means.windows(2).all(|w| w[1] >= w[0]),
        format!(
            "mean best predicted {:.4} / {:.4} / {:.4} at N = 50 / 100 / 500; recovered {:.3} / {:.3} / {:.3}",
            means[0],
            means[1],
            means[2],
            reps[0].recovered_fraction,
            reps[1].recovered_fraction,
            reps[2].recovered_fraction
        ),
    )
}

fn statistics() -> Outcome {
    let mut g = rng(21);
    let mut stat_err = 0.0f64;
    let mut pcc_err = 0.0f64;
    for _ in 0..200 {
        let groups: Vec<(u64, Vec<f64>)> = (0..g.random_range(2..8u64))
            .map(|i| (i, (0..g.random_range(1..40)).map(|_| g.random_range(10.0..30.0)).collect()))
            .collect();
        for (s, (_, xs)) in distribution_stats(&groups).unwrap().iter().zip(&groups) {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            stat_err = stat_err.max((s.mean - m).abs()).max((s.std - sd).abs());
        }
        let len = g.random_range(2..30);
        let series: Vec<Vec<f64>> = (0..g.random_range(2..6))
            .map(|_| (0..len).map(|_| g.random_range(-1.0..1.0)).collect())
            .collect();
        let m = pcc_matrix(&series).unwrap();
        for i in 0..series.len() {
            for j in 0..series.len() {
                let direct = if i == j { 1.0 } else { pearson(&series[i], &series[j]).unwrap() };
                pcc_err = pcc_err.max((m.get(i, j).unwrap() - direct).abs());
            }
        }
    }

    let dir = tempdir().unwrap();
    let ds = oracle_generate(&OracleConfig::default(), 5).unwrap();
    save_dataset(&ds, &dir.path().join("data"), false).unwrap();
    let (code, out, err) = run(dir.path(), &["stats", "--data", "{dir}/data"]);
    let ratio = if code == 0 {
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        v["prompt_effect"]["ratio"].as_f64().unwrap_or(f64::NAN)
    } else {
        eprintln!("{err}");
        f64::NAN
    };
    outcome(
        stat_err <= 1e-12 && pcc_err <= 1e-12 && ratio >= 3.0,
        format!("stats err {stat_err:.1e}, pcc err {pcc_err:.1e}, between/within ratio {ratio:.2}"),
    )
}

fn accounting_and_persistence() -> Outcome {
    let mut notes = Vec::new();
    let mut g = rng(13);
    for _ in 0..10 {
        let cfg = random_config(&mut g);
        let acc = count_params_flops(&cfg).unwrap();
        let stored = PainePredictor::new(cfg.clone(), 0).unwrap().params().scalar_count() as u64;
        if (acc.params, acc.flops) != enumerated(&cfg) || stored != acc.params {
            notes.push(format!("accounting {cfg:?}"));
        }
    }

    let dir = tempdir().unwrap();
    let ocfg = OracleConfig {
        prompt_count: 10,
        noises_per_prompt: 4,
        prompt_streams: vec![StreamDims { tok: 3, d_tok: 4 }, StreamDims { tok: 2, d_tok: 2 }],
        noise_shape: [1, 16, 16],
        ..OracleConfig::default()
    };
    let ds = oracle_generate(&ocfg, 1).unwrap();
    save_dataset(&ds, &dir.path().join("d"), false).unwrap();
    let back = load_dataset(&dir.path().join("d")).unwrap();
    let f32_bits = |x: f64| (x as f32 as f64).to_bits();
    let data_ok = ds.samples().iter().zip(back.samples()).all(|(a, b)| {
        f32_bits(a.score_raw) == b.score_raw.to_bits()
            && a.noise.tensor().data().iter().zip(b.noise.tensor().data()).all(|(x, y)| f32_bits(*x) == y.to_bits())
    });
    if !data_ok {
        notes.push("dataset roundtrip".into());
    }

    let pcfg = ocfg.matching_predictor(PredictorConfig {
        attn_blocks: 1,
        heads: 2,
        stage_channels: [4, 4, 8, 8],
        mlp_hidden: vec![16],
        ..PredictorConfig::default()
    });
    let (ckpt, _) = train(&ds, &pcfg, &TrainConfig { max_epochs: 1, group_k: 4, ..TrainConfig::default() }).unwrap();
    let path = dir.path().join("c");
    save_checkpoint(&ckpt, &path, false).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let ckpt_ok = ckpt.model.params().iter().zip(loaded.model.params().iter()).all(|((_, a), (_, b))| {
        a.data().iter().zip(b.data()).all(|(x, y)| f32_bits(*x) == y.to_bits())
    });
    let noise = NoiseTensor::new(Tensor::zeros(&[1, 16, 16])).unwrap();
    let prompt = &ds.samples()[0].prompt;
    let d = ckpt.model.predict(prompt, &noise, false).unwrap() - loaded.model.predict(prompt, &noise, false).unwrap();
    if !ckpt_ok || d.abs() > 1e-5 {
        notes.push("checkpoint roundtrip".into());
    }

    let blob = path.join("param.0000.pant");
    let original = fs::read(&blob).unwrap();
    let mut flipped = original.clone();
    *flipped.last_mut().unwrap() ^= 1;
    fs::write(&blob, &flipped).unwrap();
    let integrity = matches!(load_checkpoint(&path), Err(PersistError::Integrity { .. }));
    fs::write(&blob, &original[..original.len() / 2]).unwrap();
    let truncated = matches!(load_checkpoint(&path), Err(PersistError::Integrity { .. }))
        && matches!(
            paine_core::cli::blob::decode(&original[..original.len() / 2], "x"),
            Err(PersistError::Format { .. })
        );
    fs::remove_file(&blob).unwrap();
    let missing = matches!(load_checkpoint(&path), Err(PersistError::Missing { .. }));
    fs::write(&blob, &original).unwrap();
    let manifest = fs::read_to_string(path.join(MANIFEST)).unwrap();
    fs::write(path.join(MANIFEST), manifest.replace("\"schema_version\": 1", "\"schema_version\": 7")).unwrap();
    let version = matches!(load_checkpoint(&path), Err(PersistError::Version { found: 7, .. }));
    if !(integrity && truncated && missing && version) {
        notes.push(format!(
            "corruption cases integrity {integrity} truncated {truncated} missing {missing} version {version}"
        ));
    }

    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    match (golden_run(a.path()), golden_run(b.path())) {
        (Ok(x), Ok(y)) if x == y => {}
        (Ok(_), Ok(_)) => notes.push("golden run differs".into()),
        (Err(e), _) | (_, Err(e)) => notes.push(format!("golden run failed: {e}")),
    }

    outcome(
        notes.is_empty(),
        if notes.is_empty() {
            "10 configs enumerated exactly, f32 roundtrips, 4 corruption cases, golden run reproducible".to_string()
        } else {
            notes.join("; ")
        },
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut passed = 0;
    let mut line = |id, title, t0, o| passed += report(id, title, t0, o) as usize;

    let t = Instant::now();
    line(1, "gradient integrity", t, gradients());
    let t = Instant::now();
    line(2, "soft-rank laws", t, soft_rank());
    let t = Instant::now();
    line(3, "training recipe", t, recipe());

    let t = Instant::now();
    let r = reference();
    line(4, "end-to-end learning", t, learning(&r));
    let t = Instant::now();
    line(5, "prior mode", t, prior(&r));
    let t = Instant::now();
    line(6, "selection uplift", t, uplift(&r));
    let t = Instant::now();
    line(7, "N sensitivity", t, n_sweep(&r));

    let t = Instant::now();
    line(8, "statistics suite", t, statistics());
    let t = Instant::now();
    line(9, "accounting and persistence", t, accounting_and_persistence());
    println!("acceptance: {passed}/9 criteria pass");
}

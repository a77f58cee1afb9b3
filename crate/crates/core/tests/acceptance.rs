//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits nonzero if any criterion fails.
//!
//! Artifacts (datasets, checkpoints, ablation table) are kept under
//! `target/tmp/acceptance/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use lbdt_core::encoders::{word_mask, WordVars};
use lbdt_core::flops::{
    bridged_score_flops, count_flops, direct_attention_flops, direct_score_flops, is_affine,
    lbdt_module_flops, quadratic_fit, FlopsLedger,
};
use lbdt_core::harness::ablation::{ensure_dataset, informative_rows, run_ablation, write_table, AblationRow};
use lbdt_core::harness::attention::{concentration, DEFAULT_STAGE};
use lbdt_core::harness::checkpoint::Checkpoint;
use lbdt_core::harness::config::RunConfig;
use lbdt_core::harness::gradsuite::run_suite;
use lbdt_core::harness::train::{load_splits, train, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};
use lbdt_core::lbdt::{LbdtConfig, LbdtModule};
use lbdt_core::metrics::{iou_metrics, j_and_f, summarize, Mask, Overlap, AP_THRESHOLDS, REPORTED_THRESHOLDS};
use lbdt_core::model::Model;
use lbdt_core::nn::{uniform, ParamStore};
use lbdt_core::{Scalar, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Learning rate for the trained criteria (see README, "Training budget").
const TRAINED_LR: f64 = 1e-3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Check = Result<Verdict, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// 1 ----------------------------------------------------------------------

fn gradient_suite() -> Check {
    let t = Instant::now();
    let cases = run_suite(7).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let worst = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    Ok(verdict(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} cases, failed {:?}, max rel err {worst:.2e}, {secs:.1}s",
            cases.len(),
            failed
        ),
    ))
}

// 2 ----------------------------------------------------------------------

fn random_tensor<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<F> {
    uniform(rng, shape, 1.0)
}

/// Every row sums to one over `valid` columns and is exactly zero elsewhere.
fn rows_normalized(data: &[f32], cols: usize, valid: &dyn Fn(usize) -> bool) -> Option<String> {
    for (r, row) in data.chunks(cols).enumerate() {
        let mut sum = 0.0f64;
        for (j, &v) in row.iter().enumerate() {
            if valid(j) {
                sum += v as f64;
            } else if v != 0.0 {
                return Some(format!("row {r} col {j}: masked entry {v}"));
            }
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Some(format!("row {r}: sum {sum}"));
        }
    }
    None
}

fn attention_normalization() -> Check {
    let mut rows_checked = 0usize;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, n) = if seed == 0 {
            (32, 32, 25)
        } else {
            let h = rng.gen_range(1..=32);
            (h, rng.gen_range(1..=1024 / h), rng.gen_range(1..=25))
        };
        let n_valid = rng.gen_range(1..=n);
        let cfg = LbdtConfig {
            c_m: 8,
            mlp_hidden: 16,
            insert_stages: vec![4],
            ..Default::default()
        };
        let channels = 4;
        let module = LbdtModule::new("m", 4, channels, &cfg);
        let mut store = ParamStore::<f32>::new();
        module.init(&mut store, &mut rng);
        let mut tape = Tape::no_grad();
        let s = tape.constant(random_tensor(&mut rng, &[channels, h, w]));
        let t = tape.constant(random_tensor(&mut rng, &[channels, h, w]));
        let matrix = tape.constant(random_tensor(&mut rng, &[n, cfg.c_m]));
        let words = WordVars {
            matrix,
            mask: word_mask(n_valid, n),
            n_valid,
        };
        let (_, _, trace) = module.forward(&mut tape, &store, s, t, &words).map_err(err)?;
        let word_valid = |j: usize| j < n_valid;
        let pixel_valid = |_: usize| true;
        let layer = &trace.layers[0];
        let mut mats: Vec<(&str, lbdt_core::Var, usize, &dyn Fn(usize) -> bool)> = vec![
            ("word self-attention", trace.word_self_attention.unwrap(), n, &word_valid),
        ];
        for (name, v, cols, valid) in [
            ("words over temporal", layer.words_over_temporal, h * w, &pixel_valid as &dyn Fn(usize) -> bool),
            ("spatial over words", layer.spatial_over_words, n, &word_valid),
            ("words over spatial", layer.words_over_spatial, h * w, &pixel_valid),
            ("temporal over words", layer.temporal_over_words, n, &word_valid),
        ] {
            mats.push((name, v.ok_or("missing attention in trace")?, cols, valid));
        }
        for (name, v, cols, valid) in mats {
            if tape.shape(v).last() != Some(&cols) {
                return Ok(verdict(false, format!("seed {seed}: {name} shape {:?}", tape.shape(v))));
            }
            if let Some(why) = rows_normalized(tape.data(v), cols, valid) {
                return Ok(verdict(
                    false,
                    format!("seed {seed} (HW={}, N={n}, valid={n_valid}): {name}: {why}", h * w),
                ));
            }
            rows_checked += tape.data(v).len() / cols;
        }
    }
    Ok(verdict(true, format!("100 configurations, {rows_checked} rows")))
}

// 3 ----------------------------------------------------------------------

fn identity_case<F: Scalar>(layers: usize, seed: u64, h: usize, w: usize, n: usize, n_valid: usize) -> Result<bool, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LbdtConfig {
        layers,
        c_m: 16,
        mlp_hidden: 24,
        insert_stages: vec![4],
        ..Default::default()
    };
    let channels = 12;
    let module = LbdtModule::new("m", 4, channels, &cfg);
    let mut store = ParamStore::<F>::new();
    module.init(&mut store, &mut rng);
    let mut tape = Tape::no_grad();
    let sx = random_tensor::<F>(&mut rng, &[channels, h, w]);
    let tx = random_tensor::<F>(&mut rng, &[channels, h, w]);
    let s = tape.constant(sx.clone());
    let t = tape.constant(tx.clone());
    let matrix = tape.constant(random_tensor(&mut rng, &[n, cfg.c_m]));
    let words = WordVars {
        matrix,
        mask: word_mask(n_valid, n),
        n_valid,
    };
    let (so, to, trace) = module.forward(&mut tape, &store, s, t, &words).map_err(err)?;
    Ok(trace.layers.len() == layers && tape.data(so) == sx.data() && tape.data(to) == tx.data())
}

fn identity_at_init() -> Check {
    let mut cases = 0;
    for layers in [1, 4] {
        for (seed, h, w, n, n_valid) in [(1, 4, 4, 3, 3), (2, 8, 6, 25, 4), (3, 1, 9, 5, 1)] {
            let ok32 = identity_case::<f32>(layers, seed, h, w, n, n_valid)?;
            let ok64 = identity_case::<f64>(layers, seed, h, w, n, n_valid)?;
            if !(ok32 && ok64) {
                return Ok(verdict(false, format!("L={layers}, {h}x{w}, N={n}: output differs from input")));
            }
            cases += 2;
        }
    }
    Ok(verdict(true, format!("{cases} forwards (L in {{1, 4}}, f32 and f64) bit-identical")))
}

// 4 ----------------------------------------------------------------------

fn score_entry(ledger: &FlopsLedger, module: &str) -> Option<u64> {
    ledger
        .entries
        .iter()
        .find(|e| e.module == module && e.op == "scores")
        .map(|e| e.flops)
}

fn complexity() -> Check {
    let (n, c_m, hidden, channels) = (10, 64, 128, 64);
    let cfg = LbdtConfig {
        c_m,
        mlp_hidden: hidden,
        ..Default::default()
    };
    let sizes = [64usize, 256, 1024];
    let bridged = sizes.map(|hw| (hw as u64, lbdt_module_flops("m", hw, channels, n, n, &cfg).total()));
    let direct = sizes.map(|hw| (hw as u64, direct_attention_flops("d", hw, c_m, hidden).total()));
    let fit = |pts: [(u64, u64); 3]| quadratic_fit(pts.map(|(x, y)| (x as f64, y as f64)));
    let (_, _, qb) = fit(bridged);
    let (_, _, qd) = fit(direct);
    // two directions, each: scores and context (2·C_m per pair each) plus scale and softmax
    let expected_qd = (2 * (4 * c_m + 2)) as f64;

    let mut model_points = [(0u64, 0u64); 3];
    for (i, side) in [64usize, 128, 256].into_iter().enumerate() {
        let rc = RunConfig {
            height: side,
            width: side,
            ..Default::default()
        };
        let mc = rc.model_config(rc.vocab_size()).map_err(err)?;
        model_points[i] = ((side * side) as u64, count_flops(&mc, 3).total());
    }

    let hand = lbdt_module_flops("m", 256, channels, n, n, &cfg);
    let hand_direct = direct_attention_flops("d", 256, c_m, hidden);
    let b = score_entry(&hand, "m.l0.t2s").ok_or("no bridged score entry")?;
    let d = score_entry(&hand_direct, "d.s_from_t").ok_or("no direct score entry")?;
    let exact = b == bridged_score_flops(256, n, c_m)
        && d == direct_score_flops(256, c_m)
        && b == 327_680
        && d == 8_388_608
        && d * 5 == b * 128;

    let pass = is_affine(bridged) && qb == 0.0 && qd == expected_qd && is_affine(model_points) && exact;
    Ok(verdict(
        pass,
        format!(
            "(HW)^2 coefficient bridged {qb}, direct {qd} (expected {expected_qd}); model affine in HW: {}; score products {b} vs {d} = {:.1}x",
            is_affine(model_points),
            d as f64 / b as f64
        ),
    ))
}

// 5 ----------------------------------------------------------------------

fn random_mask(rng: &mut ChaCha8Rng) -> Mask {
    let density = [0.0, 0.1, 0.3, 0.5, 0.8, 1.0][rng.gen_range(0..6)];
    let data = (0..64).map(|_| rng.gen_bool(density)).collect();
    Mask::new(8, 8, data).unwrap()
}

fn brute_counts(p: &Mask, g: &Mask) -> (u64, u64) {
    let (mut i, mut u) = (0, 0);
    for y in 0..8 {
        for x in 0..8 {
            let (a, b) = (p.get(y, x), g.get(y, x));
            if a && b {
                i += 1;
            }
            if a || b {
                u += 1;
            }
        }
    }
    (i, u)
}

fn brute_iou(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn brute_boundary(m: &Mask) -> Vec<(i64, i64)> {
    let (h, w) = (8i64, 8i64);
    let fg = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if fg(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !fg(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn brute_f(p: &Mask, g: &Mask) -> f64 {
    let (bp, bg) = (brute_boundary(p), brute_boundary(g));
    if bp.is_empty() || bg.is_empty() {
        return if bp.is_empty() && bg.is_empty() { 1.0 } else { 0.0 };
    }
    // smallest integer r with r ≥ diag/125
    let d2 = 8 * 8 + 8 * 8;
    let r = (0i64..).find(|r| 125 * 125 * r * r >= d2).unwrap();
    let near = |a: (i64, i64), set: &[(i64, i64)]| {
        set.iter().any(|b| (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2) <= r * r)
    };
    let precision = bp.iter().filter(|&&a| near(a, &bg)).count() as f64 / bp.len() as f64;
    let recall = bg.iter().filter(|&&a| near(a, &bp)).count() as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs = 0;
    while pairs < 1000 {
        let n = rng.gen_range(1..=20).min(1000 - pairs);
        let preds: Vec<Mask> = (0..n).map(|_| random_mask(&mut rng)).collect();
        let gts: Vec<Mask> = (0..n).map(|_| random_mask(&mut rng)).collect();
        let counts: Vec<(u64, u64)> = preds.iter().zip(&gts).map(|(p, g)| brute_counts(p, g)).collect();
        let (ti, tu) = counts.iter().fold((0, 0), |(a, b), &(i, u)| (a + i, b + u));
        let ious: Vec<f64> = counts.iter().map(|&(i, u)| brute_iou(i, u)).collect();
        let mean = ious.iter().sum::<f64>() / n as f64;
        let above = |pct: u64| {
            counts.iter().filter(|&&(i, u)| u == 0 || 100 * i > pct * u).count() as f64 / n as f64
        };
        let p_at = REPORTED_THRESHOLDS.map(|t| above(t as u64));
        let ap = AP_THRESHOLDS.iter().map(|&t| above(t as u64)).sum::<f64>() / AP_THRESHOLDS.len() as f64;
        let f = preds.iter().zip(&gts).map(|(p, g)| brute_f(p, g)).sum::<f64>() / n as f64;

        let got = iou_metrics(&preds, &gts).map_err(err)?;
        let (gj, gf) = j_and_f(&preds, &gts).map_err(err)?;
        let want_overall = brute_iou(ti, tu);
        if got.overall_iou != want_overall
            || got.mean_iou != mean
            || got.per_sample != ious
            || got.p_at != p_at
            || got.ap != ap
            || gj != mean
            || gf != f
        {
            return Ok(verdict(false, format!("mismatch in batch starting at pair {pairs}")));
        }
        pairs += n;
    }

    let px = |cells: &[usize]| {
        let mut d = vec![false; 64];
        for &c in cells {
            d[c] = true;
        }
        Mask::new(8, 8, d).unwrap()
    };
    let hand = iou_metrics(&[px(&[0, 1, 2, 3]), px(&[10])], &[px(&[0, 1, 2]), px(&[11])]).map_err(err)?;
    let o = |i, u| Overlap {
        intersection: i,
        union: u,
    };
    let p50 = summarize(&[o(3, 5), o(2, 5), o(11, 20)]).p_at[0];
    let ap = summarize(&[o(18, 25)]).ap;
    let hand_ok = hand.overall_iou == 0.5 && hand.mean_iou == 0.375 && p50 == 2.0 / 3.0 && ap == 0.5;
    Ok(verdict(
        hand_ok,
        format!(
            "{pairs} random pairs exact; hand: overall {}, mean {}, P@0.5 {p50:.6}, AP {ap}",
            hand.overall_iou, hand.mean_iou
        ),
    ))
}

// 6 and 7 ----------------------------------------------------------------

fn trained_base() -> RunConfig {
    let dir = root();
    RunConfig {
        data_dir: dir.join("data"),
        out_dir: dir.join("ablation"),
        lr: TRAINED_LR,
        ..Default::default()
    }
}

struct Ablation {
    rows: Vec<AblationRow>,
    seconds: f64,
}

fn run_trained() -> Result<Ablation, String> {
    let base = trained_base();
    let _ = fs::remove_dir_all(&base.out_dir);
    let t = Instant::now();
    ensure_dataset(&base).map_err(err)?;
    let rows = run_ablation(
        &base,
        &informative_rows(),
        |_, _| {},
        |row| eprintln!("  {}: mean IoU {:.4}", row.variant, row.report.mean_iou),
    )
    .map_err(err)?;
    let seconds = t.elapsed().as_secs_f64();
    write_table(&rows, &base, &base.out_dir).map_err(err)?;
    Ok(Ablation { rows, seconds })
}

fn miou(a: &Ablation, name: &str) -> Result<f64, String> {
    a.rows
        .iter()
        .find(|r| r.variant == name)
        .map(|r| r.report.mean_iou)
        .ok_or_else(|| format!("ablation row {name} missing"))
}

const FULL: &str = "transfer-duplex_gate-bca";

fn ablation_trend(a: &Ablation) -> Check {
    let full = miou(a, FULL)?;
    let none = miou(a, "transfer-none_gate-bca")?;
    let s2t = miou(a, "transfer-s2t_gate-bca")?;
    let t2s = miou(a, "transfer-t2s_gate-bca")?;
    let ld = miou(a, "transfer-duplex_gate-ld")?;
    let stc = miou(a, "transfer-duplex_gate-stc")?;
    let no_bca = miou(a, "transfer-duplex_gate-none")?;
    let transfer = full >= s2t && full >= t2s && s2t >= none && t2s >= none;
    let gating = full >= ld && full >= stc && ld >= no_bca && stc >= no_bca;
    let margin = full - none >= 0.02;
    let budget = a.seconds <= 3600.0;
    Ok(verdict(
        transfer && gating && margin && budget,
        format!(
            "full {full:.4}, S->T {s2t:.4}, T->S {t2s:.4}, none {none:.4}; LD {ld:.4}, STC {stc:.4}, no BCA {no_bca:.4}; \
             transfer order {transfer}, gating order {gating}, margin {:.4}, {:.0}s",
            full - none,
            a.seconds
        ),
    ))
}

fn end_to_end(a: &Ablation) -> Check {
    let full = miou(a, FULL)?;
    let ckpt = trained_base().out_dir.join(FULL).join(BEST_CHECKPOINT);
    let state = Checkpoint::load(&ckpt).map_err(err)?;
    let (_, val, vocab) = load_splits(&state.config).map_err(err)?;
    let model = Model::new(state.config.model_config(vocab.len()).map_err(err)?).map_err(err)?;
    let c = concentration(&model, &state.params, &val, DEFAULT_STAGE).map_err(err)?;
    Ok(verdict(
        full >= 0.70 && c.fraction_concentrated >= 0.70,
        format!(
            "mean IoU {full:.4} (target 0.70); motion word concentrated on {:.1}% of {} moving samples (target 70%)",
            100.0 * c.fraction_concentrated,
            c.per_sample.len()
        ),
    ))
}

// 8 ----------------------------------------------------------------------

fn tiny(dir: &Path, epochs: usize) -> RunConfig {
    RunConfig {
        data_dir: root().join("tiny_data"),
        out_dir: dir.to_path_buf(),
        samples: 24,
        height: 32,
        width: 32,
        c_m: 16,
        mlp_hidden: 32,
        c_d: 8,
        word_dim: 8,
        batch_size: 4,
        epochs,
        ..Default::default()
    }
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn determinism() -> Check {
    let dir = root().join("determinism");
    let _ = fs::remove_dir_all(&dir);
    let cfg = tiny(&dir, 2);
    ensure_dataset(&cfg).map_err(err)?;

    let first = train(&cfg, |_| {}).map_err(err)?;
    let best_a = read(&first.best_checkpoint())?;
    let last_a = read(&first.last_checkpoint())?;
    let log_a = read(&dir.join("train_log.jsonl"))?;
    fs::remove_dir_all(&dir).map_err(err)?;
    let second = train(&cfg, |_| {}).map_err(err)?;
    let repeat = best_a == read(&second.best_checkpoint())?
        && last_a == read(&second.last_checkpoint())?
        && log_a == read(&dir.join("train_log.jsonl"))?
        && first.best_report == second.best_report;

    let loaded = Checkpoint::load(&dir.join(LAST_CHECKPOINT)).map_err(err)?;
    let reloaded = Checkpoint::from_bytes(&loaded.to_bytes()).map_err(err)?;
    let round_trip = loaded.to_bytes() == last_a && reloaded == loaded;

    let split = root().join("determinism_resume");
    let _ = fs::remove_dir_all(&split);
    let head = tiny(&split, 1);
    train(&head, |_| {}).map_err(err)?;
    let mut state = Checkpoint::load(&split.join(LAST_CHECKPOINT)).map_err(err)?;
    state.config.epochs = 2;
    state.config.out_dir = dir.clone();
    let (tr, val, vocab) = load_splits(&state.config).map_err(err)?;
    let mut trainer = Trainer::resume(state, tr, val, vocab.len()).map_err(err)?;
    fs::remove_dir_all(&dir).map_err(err)?;
    trainer.fit(&dir, |_| {}).map_err(err)?;
    let resumed = read(&dir.join(LAST_CHECKPOINT))? == last_a;

    Ok(verdict(
        repeat && round_trip && resumed,
        format!("repeat runs identical {repeat}; save/load exact {round_trip}; 1+1 resumed epochs == 2 epochs {resumed}"),
    ))
}

fn main() -> ExitCode {
    let report = |id: u8, name: &str, check: Check| -> bool {
        let (pass, detail) = match check {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!("criterion {id} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
        pass
    };
    let mut all = true;
    all &= report(1, "gradient suite", gradient_suite());
    all &= report(2, "attention normalization", attention_normalization());
    all &= report(3, "identity at init", identity_at_init());
    all &= report(4, "complexity", complexity());
    all &= report(5, "metric oracle", metric_oracle());
    all &= report(8, "determinism and round trip", determinism());
    match run_trained() {
        Ok(a) => {
            all &= report(6, "ablation trend", ablation_trend(&a));
            all &= report(7, "end-to-end", end_to_end(&a));
        }
        Err(e) => {
            all &= report(6, "ablation trend", Err(e.clone()));
            all &= report(7, "end-to-end", Err(e));
        }
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion does.

use std::process::Command;
use std::time::{Duration, Instant};

use ulda::pipeline::checkpoint::RectifierMode;
use ulda::pipeline::config::RunConfig;
use ulda::pipeline::run::{
    baseline_checkpoint, evaluate, predict_split, run_stage1, run_stage2, Context,
};
use ulda::pipeline::selfcheck::{check_names, run_check, SelfcheckOptions};
use ulda::simulation::MiningLogEntry;
use ulda::toyworld::{generate_source, make_eval_split, EvalSplit, SourceDataset};

struct Verdict {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn line(v: &Verdict) -> String {
    format!(
        "{} criterion {} {}: {}",
        if v.passed { "PASS" } else { "FAIL" },
        v.id,
        v.name,
        v.detail
    )
}

fn checks_within(id: u32, name: &'static str, checks: &[&str], budget: Duration) -> Verdict {
    let opts = SelfcheckOptions::default();
    let start = Instant::now();
    let results: Vec<_> = checks
        .iter()
        .map(|c| run_check(&opts, c).expect("known check"))
        .collect();
    let elapsed = start.elapsed();
    let mut detail: Vec<String> = results
        .iter()
        .map(|r| format!("{} {:.2e}<={:.0e}", r.name, r.measured, r.tolerance))
        .collect();
    detail.push(format!(
        "{:.2}s (budget {}s)",
        elapsed.as_secs_f64(),
        budget.as_secs()
    ));
    Verdict {
        id,
        name,
        passed: results.iter().all(|r| r.passed) && elapsed < budget,
        detail: detail.join(", "),
    }
}

struct World {
    source: SourceDataset,
    split: EvalSplit,
}

fn world(cfg: &RunConfig) -> World {
    World {
        source: generate_source(&cfg.toy).unwrap(),
        split: make_eval_split(&cfg.toy).unwrap(),
    }
}

struct Run {
    bank: Vec<u8>,
    checkpoint: Vec<u8>,
    report: Vec<u8>,
    mean_miou: f64,
    log: Vec<MiningLogEntry>,
    ctx: Context,
    ckpt: ulda::pipeline::checkpoint::Checkpoint,
}

fn full_run(cfg: RunConfig, w: &World) -> Run {
    let ctx = Context::new(cfg).unwrap();
    let s1 = run_stage1(&ctx, &w.source).unwrap();
    let s2 = run_stage2(&ctx, &w.source, &s1.bank, RectifierMode::Learned).unwrap();
    let report = evaluate(&ctx, &s2.checkpoint, &w.split).unwrap();
    Run {
        bank: s1.bank.to_bytes().unwrap(),
        checkpoint: s2.checkpoint.to_bytes(),
        report: report.to_json().unwrap().into_bytes(),
        mean_miou: report.mean_miou,
        log: s1.log,
        ctx,
        ckpt: s2.checkpoint,
    }
}

/// Mean over images of the DC term at the first and the last logged step.
fn dc_first_last(log: &[MiningLogEntry]) -> (f64, f64) {
    let last_step = log.iter().map(|e| e.step).max().unwrap();
    let mean_at = |step: usize| {
        let xs: Vec<f64> = log
            .iter()
            .filter(|e| e.step == step)
            .map(|e| e.breakdown.components.dc)
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    (mean_at(0), mean_at(last_step))
}

#[test]
fn acceptance() {
    let mut verdicts = Vec::new();

    verdicts.push(checks_within(
        1,
        "pin statistics",
        &["pin_stats_lemma"],
        Duration::from_secs(10),
    ));
    verdicts.push(checks_within(
        2,
        "rectifier closed form",
        &["tdr_closed_form", "tdr_degeneracy_witness"],
        Duration::from_secs(10),
    ));
    verdicts.push(checks_within(
        3,
        "gradient suite",
        &[
            "grad_scene_alignment",
            "grad_regional",
            "grad_pixel",
            "grad_hca",
            "grad_dcrl",
            "grad_seg",
            "grad_rectify",
        ],
        Duration::from_secs(120),
    ));
    verdicts.push(checks_within(
        4,
        "oracle equivalences",
        &[
            "oracle_masked_average_pool",
            "oracle_regional_ce",
            "oracle_metrics_iou",
            "oracle_stage1_total",
        ],
        Duration::from_secs(120),
    ));

    let cfg = RunConfig::default();
    let w = world(&cfg);

    let start = Instant::now();
    let ulda = full_run(cfg.clone(), &w);
    let base_ctx = Context::new(cfg.clone()).unwrap();
    let base = evaluate(
        &base_ctx,
        &baseline_checkpoint(&base_ctx, &w.source).unwrap(),
        &w.split,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let gain = ulda.mean_miou - base.mean_miou;
    verdicts.push(Verdict {
        id: 5,
        name: "toy adaptation beats source-only",
        passed: gain >= 5.0 && elapsed < Duration::from_secs(300),
        detail: format!(
            "ulda {:.2} vs baseline {:.2} (+{gain:.2}, need +5), {:.1}s (budget 300s)",
            ulda.mean_miou,
            base.mean_miou,
            elapsed.as_secs_f64()
        ),
    });

    let mut scene_only = cfg.clone();
    scene_only.stage1.lambda_r = 0.0;
    scene_only.stage1.lambda_p = 0.0;
    let ablation = full_run(scene_only, &w);
    let (dc0, dc1) = dc_first_last(&ulda.log);
    verdicts.push(Verdict {
        id: 6,
        name: "regional+pixel terms vs scene-only",
        passed: ulda.mean_miou >= ablation.mean_miou - 0.5 && dc1 < dc0,
        detail: format!(
            "full {:.2} vs scene-only {:.2} (need >= -0.5), dc {dc0:.4} -> {dc1:.4}",
            ulda.mean_miou, ablation.mean_miou
        ),
    });

    let again = full_run(cfg.clone(), &w);
    let same = [
        ("bank", ulda.bank == again.bank),
        ("checkpoint", ulda.checkpoint == again.checkpoint),
        ("report", ulda.report == again.report),
    ];
    let before = predict_split(&ulda.ctx, &ulda.ckpt, &w.split).unwrap();
    let mut shuffled = w.split.clone();
    let tags: Vec<String> = shuffled
        .samples
        .iter()
        .rev()
        .map(|s| s.domain.clone())
        .collect();
    for (s, t) in shuffled.samples.iter_mut().zip(tags) {
        s.domain = t;
    }
    shuffled.domains.reverse();
    let after = predict_split(&ulda.ctx, &ulda.ckpt, &shuffled).unwrap();
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    verdicts.push(Verdict {
        id: 7,
        name: "determinism and no domain-ID",
        passed: same.iter().all(|s| s.1) && changed == 0,
        detail: format!(
            "{}, {changed}/{} predictions changed under shuffled domain tags",
            same.iter()
                .map(|(n, ok)| format!("{n} {}", if *ok { "identical" } else { "differs" }))
                .collect::<Vec<_>>()
                .join(", "),
            before.len()
        ),
    });

    let out = Command::new(env!("CARGO_BIN_EXE_ulda"))
        .arg("selfcheck")
        .output()
        .expect("run selfcheck");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let missing: Vec<&str> = check_names()
        .filter(|n| {
            !stdout
                .lines()
                .any(|l| l.starts_with("PASS ") && l.contains(n) && l.contains("error="))
        })
        .collect();
    verdicts.push(Verdict {
        id: 8,
        name: "selfcheck",
        passed: out.status.success() && missing.is_empty(),
        detail: format!(
            "exit {:?}, {} checks reported, missing or failing: {:?}",
            out.status.code(),
            stdout.lines().filter(|l| l.contains("error=")).count(),
            missing
        ),
    });

    for v in &verdicts {
        println!("{}", line(v));
    }
    let failed: Vec<u32> = verdicts
        .iter()
        .filter(|v| !v.passed)
        .map(|v| v.id)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

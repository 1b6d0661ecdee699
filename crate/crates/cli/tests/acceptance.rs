//! Acceptance criteria, one pass/fail line each.
//!
//! Runs without the libtest harness so the report always prints:
//! `cargo test -p geolang-cli --test acceptance`. The smoke training run
//! dominates the wall time.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use geolang::adci::{adci_forward, aggregate_group, group_weights, AdciParams, GroupingConfig};
use geolang::data::{generate_scene, write_dataset, ContainerReader, Difficulty, SceneConfig};
use geolang::dggm::{
    attention_forward, decay_masks, depth_relation, fuse_prior, manhattan_relation, plain_attention_forward, pool_depth, spatial_relation,
    AttentionOptions, DecaySchedule, GeoAttentionParams, GeometryPrior,
};
use geolang::metrics::{jacquard_at_n, jacquard_criterion, orientation_diff, precision_at, rotated_iou, GraspRect};
use geolang::timing::{attention_overhead, BenchSpec};
use geolang::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_geolang");

enum Verdict {
    Pass,
    Warn,
    Fail,
}

fn report(id: u32, name: &str, verdict: Verdict, detail: String) -> bool {
    let tag = match verdict {
        Verdict::Pass => "PASS",
        Verdict::Warn => "WARN",
        Verdict::Fail => "FAIL",
    };
    println!("[{tag}] {id:>2} {name}: {detail}");
    !matches!(verdict, Verdict::Fail)
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn geolang(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(BIN).args(args).current_dir(dir).env("GEOLANG_THREADS", "1").output().expect("spawn geolang")
}

fn gradient_correctness() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let out = geolang(&["gradcheck", "--layer", "all", "--eps", "1e-5", "--tol", "1e-4", "--json"], dir.path());
    let elapsed = t.elapsed();
    let reports: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap_or_default();
    let layers: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {:.1e}", r["layer"].as_str().unwrap_or("?"), r["max_rel_err"].as_f64().unwrap_or(f64::NAN)))
        .collect();
    let all_pass = out.status.success() && reports.len() == 3 && reports.iter().all(|r| r["pass"] == true);
    let ok = all_pass && elapsed < Duration::from_secs(120);
    report(1, "gradient correctness", verdict(ok), format!("{} in {:.1} s (limit 120 s)", layers.join(", "), elapsed.as_secs_f64()))
}

fn is_symmetric_zero_diag(t: &Tensor<f64>) -> bool {
    let n = t.rows();
    (0..n).all(|i| t.data()[i * n + i] == 0.0 && (0..n).all(|j| t.data()[i * n + j] == t.data()[j * n + i]))
}

fn relation_properties() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    for _ in 0..500 {
        let (rows, cols) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let k = rng.random_range(1..=3);
        let depth = Tensor::from_fn(&[rows * k, cols * k], |_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.3..1.5) });
        let dd = depth_relation(&pool_depth(&depth, rows, cols).unwrap());
        let ds = spatial_relation::<f64>(rows, cols);
        let g = fuse_prior(&dd, &ds, rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)).unwrap();
        if ![&dd, &ds, &g].iter().all(|t| is_symmetric_zero_diag(t)) {
            bad += 1;
        }
    }
    let expected = [0.0, 1.0, 1.0, 2.0, 1.0, 0.0, 2.0, 1.0, 1.0, 2.0, 0.0, 1.0, 2.0, 1.0, 1.0, 0.0];
    let two_by_two = manhattan_relation::<f64>(2, 2).data() == expected;
    report(
        2,
        "relation matrices",
        verdict(bad == 0 && two_by_two),
        format!("{bad}/500 grids asymmetric or nonzero diagonal; 2x2 spatial matrix {}", if two_by_two { "matches" } else { "differs" }),
    )
}

fn zero_prior_reduction() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..100 {
        let heads = rng.random_range(1..=4);
        let c = heads * rng.random_range(1..=6);
        let n = rng.random_range(1..=40);
        let params = GeoAttentionParams::<f64>::random(c, heads, 0.5, &mut rng).unwrap();
        let x = Tensor::from_fn(&[n, c], |_| rng.random_range(-2.0..2.0));
        let opts = AttentionOptions {
            renorm_after_decay: rng.random_bool(0.5),
            ..AttentionOptions::default()
        };
        let masks = decay_masks(&GeometryPrior::zero(n), &DecaySchedule::geometric(heads), opts.decay_mode).unwrap();
        let (a, _) = attention_forward(&x, &params, Some(&masks), opts).unwrap();
        let (b, _) = plain_attention_forward(&x, &params, opts).unwrap();
        if a.data().iter().zip(b.data()).any(|(p, q)| p.to_bits() != q.to_bits()) {
            mismatches += 1;
        }
    }
    report(3, "zero prior equals plain attention", verdict(mismatches == 0), format!("{mismatches}/100 cases differ bitwise"))
}

fn adci_probabilities() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut positive, mut sums, mut shift, mut onehot) = (0, 0, 0, 0);
    let mut worst_sum = 0.0f64;
    for _ in 0..500 {
        let groups = rng.random_range(1..=3);
        let layers = groups * rng.random_range(1..=3);
        let (n, c) = (rng.random_range(1..=9), rng.random_range(1..=6));
        let cfg = GroupingConfig::new(layers, groups).unwrap();
        let params = AdciParams::<f64>::random(&cfg, c, 4, rng.random_bool(0.5), 1.0, &mut rng);
        let xs: Vec<Tensor<f64>> = (0..layers).map(|_| Tensor::from_fn(&[n, c], |_| rng.random_range(-3.0..3.0))).collect();
        let (_, cache) = adci_forward(&xs, &cfg, &params).unwrap();
        for (g, alphas) in cache.alphas.chunks(cfg.per_group()).enumerate() {
            if alphas.iter().any(|&a| !(a > 0.0)) {
                positive += 1;
            }
            let s: f64 = alphas.iter().sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
            if (s - 1.0).abs() > 1e-6 {
                sums += 1;
            }
            // Dyadic scores and integer shifts keep every subtraction exact.
            let scores: Vec<f64> = (0..alphas.len()).map(|_| rng.random_range(-512i32..512) as f64 / 64.0).collect();
            let c0 = rng.random_range(-100i32..100) as f64;
            let shifted: Vec<f64> = scores.iter().map(|s| s + c0).collect();
            if group_weights(&scores).unwrap() != group_weights(&shifted).unwrap() {
                shift += 1;
            }
            let members: Vec<&Tensor<f64>> = (0..cfg.per_group()).map(|k| &xs[g * cfg.per_group() + k]).collect();
            let pick = rng.random_range(0..members.len());
            let hot: Vec<f64> = (0..members.len()).map(|k| if k == pick { 1.0 } else { 0.0 }).collect();
            if aggregate_group(&members, &hot).unwrap().data() != members[pick].data() {
                onehot += 1;
            }
        }
    }
    let ok = positive + sums + shift + onehot == 0;
    report(
        4,
        "ADCI probability contract",
        verdict(ok),
        format!("failures: non-positive {positive}, sum {sums} (worst |sum-1| {worst_sum:.1e}), shift {shift}, one-hot {onehot}"),
    )
}

/// Counts `pitch`-spaced sample points inside each rectangle, one scanline at
/// a time: every scanline meets a rectangle in a single interval.
fn raster_iou(a: &GraspRect, b: &GraspRect, pitch: f64) -> f64 {
    let span = |r: &GraspRect, y: f64| -> Option<(f64, f64)> {
        let (s, c) = r.theta.to_radians().sin_cos();
        let dy = y - r.cy;
        // |dx c + dy s| <= w/2 and |-dx s + dy c| <= h/2, solved for dx.
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for (coef, off, half) in [(c, dy * s, r.width / 2.0), (-s, dy * c, r.height / 2.0)] {
            if coef.abs() < 1e-15 {
                if off.abs() > half {
                    return None;
                }
                continue;
            }
            let (p, q) = ((-half - off) / coef, (half - off) / coef);
            lo = lo.max(p.min(q));
            hi = hi.min(p.max(q));
        }
        (lo <= hi).then_some((r.cx + lo, r.cx + hi))
    };
    let reach = |r: &GraspRect| (r.width + r.height) / 2.0;
    let y0 = (a.cy - reach(a)).min(b.cy - reach(b));
    let y1 = (a.cy + reach(a)).max(b.cy + reach(b));
    // Sample points sit at x = (k + 0.5) * pitch; count those in [lo, hi].
    let count = |lo: f64, hi: f64| ((hi / pitch - 0.5).floor() - (lo / pitch - 0.5).ceil() + 1.0).max(0.0);
    let (mut ia, mut ib, mut iab) = (0.0, 0.0, 0.0);
    let rows = ((y1 - y0) / pitch).ceil() as usize;
    for k in 0..rows {
        let y = y0 + (k as f64 + 0.5) * pitch;
        let sa = span(a, y);
        let sb = span(b, y);
        if let Some((l, h)) = sa {
            ia += count(l, h);
        }
        if let Some((l, h)) = sb {
            ib += count(l, h);
        }
        if let (Some((la, ha)), Some((lb, hb))) = (sa, sb) {
            iab += count(la.max(lb), ha.min(hb));
        }
    }
    iab / (ia + ib - iab)
}

fn random_rect(rng: &mut impl Rng) -> GraspRect {
    GraspRect::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(0.2..3.0),
        rng.random_range(0.2..3.0),
        rng.random_range(-90.0..90.0),
    )
    .unwrap()
}

fn metric_oracles() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (a, b) = (random_rect(&mut rng), random_rect(&mut rng));
        worst = worst.max((rotated_iou(&a, &b) - raster_iou(&a, &b, 1e-3)).abs());
    }
    let closed = rotated_iou(&GraspRect::new(0.0, 0.0, 2.0, 2.0, 0.0).unwrap(), &GraspRect::new(1.0, 0.0, 2.0, 2.0, 0.0).unwrap());
    let closed_err = (closed - 1.0 / 3.0).abs();

    let mut monotone_fail = 0;
    for _ in 0..100 {
        let ious: Vec<f64> = (0..rng.random_range(1..30)).map(|_| rng.random_range(0.0..1.0)).collect();
        let pr: Vec<f64> = [0.5, 0.6, 0.7, 0.8, 0.9].iter().map(|&x| precision_at(&ious, x).unwrap()).collect();
        let gt: Vec<GraspRect> = (0..rng.random_range(1..4)).map(|_| random_rect(&mut rng)).collect();
        let mut preds: Vec<GraspRect> = (0..8).map(|_| random_rect(&mut rng)).collect();
        if rng.random_bool(0.5) {
            let k = rng.random_range(0..preds.len());
            preds[k] = gt[0];
        }
        let j: Vec<bool> = (1..=8).map(|n| jacquard_at_n(&preds, &gt, n)).collect();
        if pr.windows(2).any(|w| w[1] > w[0]) || j.windows(2).any(|w| w[0] && !w[1]) {
            monotone_fail += 1;
        }
    }
    let ok = worst <= 5e-3 && closed_err <= 1e-9 && monotone_fail == 0;
    report(
        5,
        "metric oracles",
        verdict(ok),
        format!("raster max |diff| {worst:.2e} (tol 5e-3); offset squares {closed:.12} (err {closed_err:.1e}); monotonicity failures {monotone_fail}/100"),
    )
}

fn jacquard_fidelity() -> bool {
    let gt = GraspRect::new(30.0, 30.0, 20.0, 10.0, 15.0).unwrap();
    let same = jacquard_at_n(&[gt], &[gt], 1);
    // Small enough to fit inside gt, so the IoU is the area ratio.
    let k = 0.26f64.sqrt();
    let r29 = GraspRect::new(gt.cx, gt.cy, gt.width * k, gt.height * k, gt.theta + 29.0).unwrap();
    let iou29 = rotated_iou(&gt, &r29);
    let geo_29 = jacquard_at_n(&[r29], &[gt], 1);
    let r0 = GraspRect::new(gt.cx, gt.cy, gt.width * 0.24, gt.height, gt.theta).unwrap();
    let iou0 = rotated_iou(&gt, &r0);
    let geo_0 = jacquard_at_n(&[r0], &[gt], 1);
    // No rectangle pair reaches IoU 0.9 at 35 degrees, so that case is
    // checked on the measured values.
    let rule_35 = jacquard_criterion(0.9, 35.0);
    let rule_29 = jacquard_criterion(0.26, 29.0);
    let rule_0 = jacquard_criterion(0.24, 0.0);
    let ok = same && geo_29 && !geo_0 && !rule_35 && rule_29 && !rule_0 && (iou29 - 0.26).abs() < 1e-9 && (iou0 - 0.24).abs() < 1e-9;
    report(
        6,
        "J@N criterion fidelity",
        verdict(ok),
        format!(
            "pred==gt {same}; IoU 0.9 @35deg {rule_35}; IoU {iou29:.4} @{:.0}deg {geo_29}; IoU {iou0:.4} @0deg {geo_0}",
            orientation_diff(r29.theta, gt.theta)
        ),
    )
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_default()
}

fn overfit_smoke() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = geolang(&["gen", "--out", "train.glg", "--count", "64", "--seed", "7", "--difficulty", "isolated", "--size", "64"], d);
    assert!(gen.status.success(), "gen: {}", String::from_utf8_lossy(&gen.stderr));
    std::fs::write(d.join("smoke.json"), SMOKE_CONFIG).unwrap();
    let t = Instant::now();
    let out = geolang(&["train", "--config", "smoke.json", "--data", "train.glg", "--out", "run"], d);
    let elapsed = t.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let (iou, j1) = parse_train_line(&stdout).unwrap_or((f64::NAN, f64::NAN));
    let ok = out.status.success() && iou >= 0.85 && j1 >= 0.8 && elapsed <= Duration::from_secs(600);
    report(
        7,
        "desk-scale overfit smoke",
        verdict(ok),
        format!("train IoU {iou:.4} (>= 0.85), J@1 {j1:.4} (>= 0.8), {:.0} s (<= 600 s)", elapsed.as_secs_f64()),
    )
}

/// 64x64, C=32, batch 8, at most 2000 steps.
const SMOKE_CONFIG: &str = r#"{
  "model": { "height": 64, "width": 64, "channels": 32, "heads": 2, "seg_hidden": 32, "seg_weight": 3.0, "seed": 0 },
  "train": { "epochs": 250, "batch_size": 8, "max_steps": 2000, "adam": { "lr": 0.003 }, "clip_norm": 1.0 }
}"#;

fn parse_train_line(stdout: &str) -> Option<(f64, f64)> {
    let line = stdout.lines().rev().find(|l| l.contains("train IoU"))?;
    let words: Vec<&str> = line.split_whitespace().collect();
    let after = |key: &str| words.iter().position(|w| *w == key).and_then(|i| words.get(i + 1)).and_then(|v| v.parse().ok());
    Some((after("IoU")?, after("J@1")?))
}

fn overhead_benchmark() -> bool {
    let r = attention_overhead(&BenchSpec {
        tokens: 676,
        channels: 32,
        heads: 2,
        iters: 100,
        with_prior: true,
        seed: 0,
    })
    .unwrap();
    let o = r.overhead_pct.unwrap();
    let (lo, hi) = r.noise_band_pct.unwrap();
    let v = if o <= 25.0 {
        Verdict::Pass
    } else if o <= 50.0 {
        Verdict::Warn
    } else {
        Verdict::Fail
    };
    report(
        8,
        "prior attention overhead",
        v,
        format!(
            "median {:.2} ms plain vs {:.2} ms prior: {o:.1}% (noise band {lo:.1}% to {hi:.1}%; pass <= 25%, report <= 50%)",
            r.plain.median_ms,
            r.prior.unwrap().median_ms
        ),
    )
}

/// A shorter run than the smoke test; determinism does not depend on length.
const DETERMINISM_CONFIG: &str = r#"{
  "model": { "height": 32, "width": 32, "channels": 16, "heads": 2, "seed": 11 },
  "train": { "epochs": 3, "batch_size": 4, "max_steps": 30, "adam": { "lr": 0.003 } }
}"#;

fn determinism() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(geolang(&["gen", "--out", "data.glg", "--count", "12", "--seed", "3", "--size", "32"], d).status.success());
    std::fs::write(d.join("cfg.json"), DETERMINISM_CONFIG).unwrap();
    let a = geolang(&["train", "--config", "cfg.json", "--data", "data.glg", "--out", "a"], d);
    let b = geolang(&["train", "--config", "cfg.json", "--data", "data.glg", "--out", "b"], d);
    let files = ["metrics.jsonl", "checkpoint.glg", "checkpoint.glg.json"];
    let same: Vec<bool> = files.iter().map(|f| !read(&d.join("a").join(f)).is_empty() && read(&d.join("a").join(f)) == read(&d.join("b").join(f))).collect();
    let ok = a.status.success() && b.status.success() && same.iter().all(|&s| s);
    report(
        9,
        "training determinism",
        verdict(ok),
        files.iter().zip(&same).map(|(f, s)| format!("{f} {}", if *s { "identical" } else { "DIFFERS" })).collect::<Vec<_>>().join(", "),
    )
}

fn container_round_trip() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenes.glg");
    let cfg = SceneConfig::sized(32, 32);
    let difficulties = [Difficulty::Isolated, Difficulty::Cluttered];
    let samples: Vec<_> = (0..1000u64).map(|s| generate_scene(s, difficulties[(s % 2) as usize], &cfg).unwrap()).collect();
    write_dataset(&path, &samples).unwrap();
    let reader = ContainerReader::open(&path).unwrap();
    let back: Vec<_> = reader.samples().collect::<geolang::Result<_>>().unwrap();
    let equal = back == samples;

    let bytes = std::fs::read(&path).unwrap();
    let corrupt = |name: &str, data: &[u8]| {
        let p = dir.path().join(name);
        std::fs::write(&p, data).unwrap();
        std::fs::copy(geolang::data::container::manifest_path(&path), geolang::data::container::manifest_path(&p)).unwrap();
        match ContainerReader::open(&p).and_then(|r| r.samples().collect::<geolang::Result<Vec<_>>>()) {
            Err(Error::Format(_)) => true,
            _ => false,
        }
    };
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    let mut version = bytes.clone();
    version[4] = 99;
    let truncated = &bytes[..bytes.len() / 2];
    let mut payload = bytes.clone();
    let mid = bytes.len() / 3;
    payload.truncate(mid);
    payload.extend(std::iter::repeat_n(0xffu8, bytes.len() - mid));
    let negatives = [
        ("magic", corrupt("magic.glg", &magic)),
        ("version", corrupt("version.glg", &version)),
        ("truncated", corrupt("trunc.glg", truncated)),
        ("payload", corrupt("payload.glg", &payload)),
    ];
    let rejected = negatives.iter().filter(|(_, r)| *r).count();
    report(
        10,
        "container round-trip",
        verdict(equal && rejected == negatives.len()),
        format!(
            "1000 scenes {}; corrupt files rejected with FormatError {rejected}/{} ({})",
            if equal { "field-exact" } else { "DIFFER" },
            negatives.len(),
            negatives.iter().map(|(n, r)| format!("{n} {}", if *r { "ok" } else { "missed" })).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn main() {
    let results = [
        gradient_correctness(),
        relation_properties(),
        zero_prior_reduction(),
        adci_probabilities(),
        metric_oracles(),
        jacquard_fidelity(),
        overfit_smoke(),
        overhead_benchmark(),
        determinism(),
        container_round_trip(),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria met", results.len());
    } else {
        eprintln!("acceptance criteria failed: {failed:?}");
        std::process::exit(1);
    }
}

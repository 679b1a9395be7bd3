//! Acceptance suite. Prints one `PASS` / `FAIL` line per criterion and exits
//! nonzero when any criterion fails.
//!
//! The trend criteria train three seeds on the default world and dominate the
//! runtime. Set `LTG_ACCEPTANCE_SKIP_TRENDS=1` to run only the fast ones.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ltg_core::agm::{target_pieces, AgmModel};
use ltg_core::alm::{mix_probs, AlmConfig, AlmModel, AlmVariant};
use ltg_core::dataworld::generate_dataset;
use ltg_core::evalsuite::{anls, levenshtein, vqa_accuracy, DEFAULT_ANLS_THRESHOLD};
use ltg_core::geometry::{giou, iou, iou_hat, union_box};
use ltg_core::gradcheck::{check_agm, check_alm, GradCheckConfig};
use ltg_core::harness::{evaluate_denoising, evaluate_seed, scene_words, summarize_ablation, train_seed, PipelineConfig};
use ltg_core::preprocess::build_targets;
use ltg_core::{BBox, CorruptionSpec, SceneTextToken, WorldConfig};
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

// ---------------------------------------------------------------- geometry

const RASTER: usize = 512;

fn side(rng: &mut impl Rng) -> (f64, f64) {
    let w = rng.gen_range(0.1..=0.9);
    let a = rng.gen_range(0.0..=1.0 - w);
    (a, a + w)
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let (x1, x2) = side(rng);
    let (y1, y2) = side(rng);
    BBox::new(x1, y1, x2, y2)
}

fn inside(b: &BBox, x: f64, y: f64) -> bool {
    x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2
}

/// Stratified Monte-Carlo areas: one jittered sample per raster cell.
/// Returns `(|A|, |B|, |A∩B|, |A∪B|, |C|)` with `C` the enclosing box.
fn raster_areas(a: &BBox, b: &BBox, rng: &mut impl Rng) -> [f64; 5] {
    let c = union_box(a, b);
    let mut n = [0usize; 5];
    let cell = 1.0 / RASTER as f64;
    for i in 0..RASTER {
        for j in 0..RASTER {
            let x = (j as f64 + rng.gen::<f64>()) * cell;
            let y = (i as f64 + rng.gen::<f64>()) * cell;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            n[0] += ia as usize;
            n[1] += ib as usize;
            n[2] += (ia && ib) as usize;
            n[3] += (ia || ib) as usize;
            n[4] += inside(&c, x, y) as usize;
        }
    }
    n.map(|k| k as f64 * cell * cell)
}

fn geometry_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let a = random_box(&mut rng);
        // Half the pairs are forced to overlap.
        let b = if k % 2 == 0 {
            random_box(&mut rng)
        } else {
            let (cx, cy) = (rng.gen_range(a.x1..a.x2), rng.gen_range(a.y1..a.y2));
            let (w, h) = (rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6));
            let x1 = (cx - w / 2.0).clamp(0.0, 1.0 - w);
            let y1 = (cy - h / 2.0).clamp(0.0, 1.0 - h);
            BBox::new(x1, y1, x1 + w, y1 + h)
        };
        let [_, area_b, inter, uni, enclosing] = raster_areas(&a, &b, &mut rng);
        let mc_iou = inter / uni;
        let mc_giou = mc_iou - (enclosing - uni) / enclosing;
        let mc_hat = inter / area_b;
        for err in [
            (iou(&a, &b) - mc_iou).abs(),
            (giou(&a, &b) - mc_giou).abs(),
            (iou_hat(&a, &b) - mc_hat).abs(),
        ] {
            worst = worst.max(err);
        }
    }

    let mut props = 0usize;
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let u = union_box(&a, &b);
        let contains = |o: &BBox, i: &BBox| o.x1 <= i.x1 && o.y1 <= i.y1 && o.x2 >= i.x2 && o.y2 >= i.y2;
        if !(contains(&u, &a) && contains(&u, &b)) || union_box(&a, &a) != a || u != union_box(&b, &a) {
            props += 1;
        }
    }
    check(
        worst <= 0.01 && props == 0,
        format!("max |analytic - raster| = {worst:.5} over 1000 pairs x 3 measures; {props} union property violations"),
    )
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Outcome {
    let world = WorldConfig {
        n_train: 6,
        n_test: 0,
        ..WorldConfig::default()
    };
    let scenes = generate_dataset(&world, 21).map_err(|e| e.to_string())?.train.instances;
    let cfg = PipelineConfig::default();
    let gc = GradCheckConfig {
        eps: 1e-4,
        coords: 128,
        tolerance: 1e-4,
        seed: 5,
        ..GradCheckConfig::default()
    };
    let alm = AlmModel::new(cfg.alm.clone(), 3).map_err(|e| e.to_string())?;
    let agm = AgmModel::new(cfg.agm, 3).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for scene in &scenes[..2] {
        let targets = build_targets(&scene.answer_tokens, &scene.tokens);
        let words: Vec<String> = targets.matched_indices.iter().map(|&i| scene.tokens[i].word.clone()).collect();
        let mut batch = agm
            .batch(&scene.question, &words, &scene_words(scene))
            .map_err(|e| e.to_string())?;
        batch.target_ids = target_pieces(agm.vocab(), &scene.answer_tokens);
        for r in [
            check_alm(&alm, scene, &targets, &gc).map_err(|e| e.to_string())?,
            check_agm(&agm, &batch, &gc).map_err(|e| e.to_string())?,
        ] {
            ok &= r.passed && r.checked >= 100;
            lines.push(format!("{} {} coords max rel {:.2e}", r.name, r.checked, r.max_rel_error));
        }
    }
    check(ok, lines.join("; "))
}

// ---------------------------------------------------------------- mixture

fn mixture_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut endpoint_failures = 0usize;
    let mut convexity_failures = 0usize;
    for _ in 0..10_000 {
        let m = rng.gen_range(1..12);
        let p_v: Vec<f64> = (0..m).map(|_| rng.gen()).collect();
        let p_l: Vec<f64> = (0..m).map(|_| rng.gen()).collect();
        let p_s: f64 = rng.gen();
        let w = mix_probs(p_s, &p_v, &p_l).map_err(|e| e.to_string())?;
        for i in 0..m {
            let (lo, hi) = (p_v[i].min(p_l[i]), p_v[i].max(p_l[i]));
            if w[i] < lo || w[i] > hi {
                convexity_failures += 1;
            }
        }
        if mix_probs(1.0, &p_v, &p_l).unwrap() != p_v || mix_probs(0.0, &p_v, &p_l).unwrap() != p_l {
            endpoint_failures += 1;
        }
    }

    // The pinned locator variants hit the endpoints through the full forward.
    let world = WorldConfig {
        n_train: 3,
        n_test: 0,
        ..WorldConfig::default()
    };
    let scenes = generate_dataset(&world, 4).map_err(|e| e.to_string())?.train.instances;
    for (variant, p_s) in [(AlmVariant::Visual, 1.0), (AlmVariant::Linguistic, 0.0)] {
        let model = AlmModel::new(
            AlmConfig {
                variant,
                ..AlmConfig::default()
            },
            2,
        )
        .map_err(|e| e.to_string())?;
        for s in &scenes {
            let out = model.predict(&s.question, &s.tokens, &s.visual_grid).map_err(|e| e.to_string())?;
            let expect = if p_s == 1.0 { &out.p_v } else { &out.p_l };
            if out.p_s != p_s || &out.p_w != expect {
                endpoint_failures += 1;
            }
        }
    }
    check(
        endpoint_failures == 0 && convexity_failures == 0,
        format!("{endpoint_failures} endpoint mismatches; {convexity_failures} convexity violations in 10000 draws"),
    )
}

// ---------------------------------------------------------------- metrics

fn reference_levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let alphabet: Vec<char> = "abcde fgé".chars().collect();
    let mut lev_failures = 0;
    for _ in 0..1000 {
        let mut s = || -> String {
            let n = rng.gen_range(0..14);
            (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        };
        let (a, b) = (s(), s());
        if levenshtein(&a, &b) != reference_levenshtein(&a, &b) {
            lev_failures += 1;
        }
    }
    let gold = vec!["united states of america".to_string()];
    let got = anls("states of america", &gold, DEFAULT_ANLS_THRESHOLD).map_err(|e| e.to_string())?;
    let anls_err = (got - (1.0 - 7.0 / 24.0)).abs();

    let golds = |hits: usize| -> Vec<String> {
        (0..10).map(|i| if i < hits { "exit".to_string() } else { "other".to_string() }).collect()
    };
    let mut acc_failures = 0;
    for (hits, expect) in [(0, 0.0), (1, 1.0 / 3.0), (2, 2.0 / 3.0), (3, 1.0), (7, 1.0), (10, 1.0)] {
        if vqa_accuracy("exit", &golds(hits)).map_err(|e| e.to_string())? != expect {
            acc_failures += 1;
        }
    }
    check(
        lev_failures == 0 && anls_err <= 1e-9 && acc_failures == 0,
        format!("{lev_failures} levenshtein mismatches in 1000 pairs; anls error {anls_err:.1e}; {acc_failures} soft-vote mismatches"),
    )
}

// ---------------------------------------------------------------- preprocessing

fn preprocessing() -> Outcome {
    let world = WorldConfig::default();
    let train = generate_dataset(&world, 0).map_err(|e| e.to_string())?.train.instances;
    let untagged = train
        .iter()
        .filter(|s| s.template.requires_copy())
        .filter(|s| build_targets(&s.answer_tokens, &s.tokens).tags.iter().all(|&t| t == 0.0))
        .count();

    let tok = |w: &str, b: BBox| SceneTextToken {
        word: w.into(),
        bbox: b,
        attributes: train[0].tokens[0].attributes,
    };
    let (b1, b2) = (BBox::new(0.1, 0.2, 0.3, 0.25), BBox::new(0.35, 0.22, 0.6, 0.3));
    let tokens = [tok("exit", b1), tok("noise", BBox::new(0.7, 0.7, 0.8, 0.8)), tok("now", b2)];
    let t = build_targets(&["exit".into(), "now".into()], &tokens);
    let closed_form = BBox::new(b1.x1.min(b2.x1), b1.y1.min(b2.y1), b1.x2.max(b2.x2), b1.y2.max(b2.y2));
    check(
        untagged == 0 && t.answer_box == closed_form && t.tags == vec![1.0, 0.0, 1.0],
        format!("{untagged} of {} training scenes untagged; two-token union {:?}", train.len(), t.answer_box),
    )
}

// ---------------------------------------------------------------- trends

const SEEDS: [u64; 3] = [0, 1, 2];

fn trends() -> (Outcome, Outcome) {
    let cfg = PipelineConfig::default();
    let world = match generate_dataset(&cfg.world, 0) {
        Ok(w) => w,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let (train, test) = (&world.train.instances, &world.test.instances);
    let spec = CorruptionSpec::new(0.2, 0.0, 1234).unwrap();
    let start = Instant::now();
    let mut per_seed = Vec::new();
    let mut denoise = Vec::new();
    for &seed in &SEEDS {
        let run = train_seed(train, &cfg, seed).and_then(|m| {
            let reports = evaluate_seed(&m, test, &cfg.decode)?;
            let d = evaluate_denoising(&m.alm.model, &m.agm.model, test, &spec, &cfg.decode)?;
            Ok((reports, d))
        });
        match run {
            Ok((reports, d)) => {
                per_seed.push((seed, reports));
                denoise.push(d);
            }
            Err(e) => return (Err(format!("seed {seed}: {e}")), Err(format!("seed {seed}: {e}"))),
        }
    }
    let elapsed = start.elapsed();
    let report = summarize_ablation(&per_seed);
    let acc = |label: &str| 100.0 * report.row(label).map_or(f64::NAN, |r| r.mean_accuracy);
    let (none, v, l, vl) = (acc("None"), acc("V"), acc("L"), acc("V+L"));
    let table = check(
        vl >= v + 1.0 && vl >= l + 1.0 && v >= none + 1.0 && l >= none + 1.0 && elapsed <= Duration::from_secs(3600),
        format!(
            "accuracy None {none:.2} / V {v:.2} / L {l:.2} / V+L {vl:.2}; 3 seeds in {:.1} min",
            elapsed.as_secs_f64() / 60.0
        ),
    );
    let gains: Vec<String> = denoise
        .iter()
        .map(|d| {
            format!(
                "{:.1} vs {:.1}",
                100.0 * d.generator_exact_match,
                100.0 * d.copy_exact_match
            )
        })
        .collect();
    let min_gain = denoise
        .iter()
        .map(|d| 100.0 * (d.generator_exact_match - d.copy_exact_match))
        .fold(f64::INFINITY, f64::min);
    let denoising = check(
        min_gain >= 5.0,
        format!("generator vs copy exact match per seed: {}; smallest gain {min_gain:.1} points", gains.join(", ")),
    );
    (table, denoising)
}

// ---------------------------------------------------------------- determinism

fn ltg(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ltg"))
        .current_dir(dir)
        .env_remove("LTG_OUTPUT_ROOT")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("ltg {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Outcome {
    let tiny = [
        "--set", "world.n_train=40", "--set", "world.n_test=10", "--set", "alm_train.epochs=2", "--set",
        "alm_train.validation_size=5", "--set", "agm_train.epochs=2", "--set", "agm_train.validation_size=5",
    ];
    let run = |dir: &Path| -> Result<(), String> {
        let t = |args: &[&str]| -> Vec<String> { args.iter().chain(tiny.iter()).map(|s| s.to_string()).collect() };
        let call = |args: Vec<String>| ltg(dir, &args.iter().map(String::as_str).collect::<Vec<_>>());
        call(t(&["gen-data", "--out", "data", "--seed", "7"]))?;
        call(t(&["train-alm", "--data", "data", "--out", "run", "--seed", "1"]))?;
        call(t(&["train-agm", "--data", "data", "--alm", "run/alm.ckpt", "--out", "run", "--seed", "1"]))?;
        ltg(
            dir,
            &["predict", "--data", "data/test.jsonl", "--alm", "run/alm.ckpt", "--agm", "run/agm.ckpt", "--out", "run/pred.jsonl"],
        )?;
        ltg(dir, &["eval", "--predictions", "run/pred.jsonl", "--data", "data/test.jsonl", "--out", "run/report.json"])?;
        call(t(&["ablate", "--data", "data", "--out", "abl", "--seeds", "0,1,2"]))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path())?;
    run(b.path())?;
    let files = [
        "data/train.jsonl",
        "data/test.jsonl",
        "run/alm.ckpt",
        "run/agm.ckpt",
        "run/pred.jsonl",
        "run/report.json",
        "abl/ablation.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    check(
        differing.is_empty(),
        format!("{} artifacts compared across two runs; differing: {differing:?}", files.len()),
    )
}

fn main() {
    let skip_trends = std::env::var_os("LTG_ACCEPTANCE_SKIP_TRENDS").is_some();
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut timed = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let r = f();
        let line = match &r {
            Ok(d) => format!("PASS  {name}: {d}"),
            Err(d) => format!("FAIL  {name}: {d}"),
        };
        println!("{line}  [{:.1}s]", t.elapsed().as_secs_f64());
        results.push((name, r, t.elapsed()));
    };
    timed("geometry oracle", &geometry_oracle);
    timed("gradient suite", &gradient_suite);
    timed("mixture identities", &mixture_identities);
    timed("metric oracles", &metric_oracles);
    timed("preprocessing", &preprocessing);
    timed("determinism", &determinism);
    if skip_trends {
        println!("SKIP  selection ablation trend");
        println!("SKIP  denoising trend");
    } else {
        let t = Instant::now();
        let (table, denoising) = trends();
        let secs = t.elapsed().as_secs_f64();
        for (name, r) in [("selection ablation trend", table), ("denoising trend", denoising)] {
            match &r {
                Ok(d) => println!("PASS  {name}: {d}  [{secs:.1}s shared]"),
                Err(d) => println!("FAIL  {name}: {d}  [{secs:.1}s shared]"),
            }
            results.push((name, r, t.elapsed()));
        }
    }
    let failed = results.iter().filter(|(_, r, _)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

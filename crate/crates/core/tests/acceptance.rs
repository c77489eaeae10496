//! Acceptance suite. Each criterion runs in sequence and prints one PASS/FAIL
//! line with its measurements and wall time; the test fails if any criterion
//! fails. Set `ACCEPTANCE_CRITERIA=1,3` to run a subset.

use std::time::{Duration, Instant as Clock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lunetkit::clinical::{agreement_stats, ejection_fraction, simpson_biplane};
use lunetkit::grid::{
    encompasses, expand_bbox, iou, tight_bbox, BoundingBox, Contour, Instant, LabelMask, PixelSpacing, Structure, View,
};
use lunetkit::harness::{
    cross_validate, evaluate, gradient_checks, gradsuite, samples_from_records, train, EvalOptions, LuNetPredictor,
    RunConfig, TrainConfig,
};
use lunetkit::metrics::{
    calibrate_bounds, classify_outliers, dice, hausdorff, mean_absolute_distance, FrameScores, OutlierBounds,
    SegScores, StructureBounds,
};
use lunetkit::nets::{LuNet, LuNetConfig};
use lunetkit::phantom::{generate_dataset, stratified_folds, PatientRecord, PhantomParams};

const GRAD_CONFIGS: usize = 20;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn selected(id: usize) -> bool {
    match std::env::var("ACCEPTANCE_CRITERIA") {
        Ok(list) => list.split(',').any(|s| s.trim() == id.to_string()),
        Err(_) => true,
    }
}

fn run(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> Option<bool> {
    if !selected(id) {
        return None;
    }
    let start = Clock::now();
    let o = f();
    let elapsed = start.elapsed();
    let ok = o.passed && elapsed <= budget;
    println!(
        "criterion {id} {name}: {} | {} | {:.1}s of {}s budget",
        if ok { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    Some(ok)
}

#[test]
fn acceptance() {
    let results = [
        run(1, "gradient suite", Duration::from_secs(120), gradient_suite),
        run(2, "geometry suite", Duration::from_secs(60), geometry_suite),
        run(3, "metric oracle suite", Duration::from_secs(120), metric_suite),
        run(4, "clinical oracle suite", Duration::from_secs(60), clinical_suite),
        run(5, "phantom closed loop", Duration::from_secs(180), phantom_suite),
        run(
            6,
            "end-to-end toy training",
            Duration::from_secs(45 * 60),
            training_suite,
        ),
        run(7, "determinism", Duration::from_secs(30 * 60), determinism_suite),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == Some(false))
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

// ---------------------------------------------------------------- helpers

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMask {
    let density: f64 = rng.random_range(0.0..0.6);
    let labels = (0..h * w)
        .map(|_| {
            if rng.random_bool(density) {
                rng.random_range(1..=2u8)
            } else {
                0
            }
        })
        .collect();
    LabelMask::new(h, w, labels, PixelSpacing::default()).unwrap()
}

/// Box with integer corners inside `h x w`, possibly empty.
fn random_int_box(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BoundingBox {
    let (a, b) = (rng.random_range(0..=h), rng.random_range(0..=h));
    let (c, d) = (rng.random_range(0..=w), rng.random_range(0..=w));
    BoundingBox::new(a.min(b) as f64, a.max(b) as f64, c.min(d) as f64, c.max(d) as f64).unwrap()
}

// ------------------------------------------------------- 1: gradient suite

fn gradient_suite() -> Outcome {
    let checks = gradient_checks();
    let mut failures = Vec::new();
    let (mut worst_op, mut worst_composite): (f64, f64) = (0.0, 0.0);
    for (i, check) in checks.iter().enumerate() {
        let r = check.run(GRAD_CONFIGS, 1000 * i as u64).unwrap();
        if !r.passed {
            failures.push(format!("{} {:.2e}", r.name, r.worst));
        }
        if r.tolerance == gradsuite::COMPOSITE_TOLERANCE {
            worst_composite = worst_composite.max(r.worst);
        } else {
            worst_op = worst_op.max(r.worst);
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{} checks x {GRAD_CONFIGS} configs, worst op error {worst_op:.2e} (tol {:.0e}), composite {worst_composite:.2e} (tol {:.0e}){}",
            checks.len(),
            gradsuite::OP_TOLERANCE,
            gradsuite::COMPOSITE_TOLERANCE,
            if failures.is_empty() { String::new() } else { format!(", failing: {}", failures.join(", ")) }
        ),
    )
}

// ------------------------------------------------------- 2: geometry suite

fn oracle_tight(mask: &LabelMask, s: Structure) -> Option<[f64; 4]> {
    let mut cells = Vec::new();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if s.contains(mask.get(r, c)) {
                cells.push((r, c));
            }
        }
    }
    let r0 = cells.iter().map(|p| p.0).min()?;
    let r1 = cells.iter().map(|p| p.0).max()?;
    let c0 = cells.iter().map(|p| p.1).min()?;
    let c1 = cells.iter().map(|p| p.1).max()?;
    Some([r0 as f64, (r1 + 1) as f64, c0 as f64, (c1 + 1) as f64])
}

/// IoU of integer boxes by counting unit cells.
fn oracle_iou(a: &BoundingBox, b: &BoundingBox, h: usize, w: usize) -> f64 {
    let inside = |bx: &BoundingBox, r: usize, c: usize| {
        bx.x_min <= r as f64 && (r + 1) as f64 <= bx.x_max && bx.y_min <= c as f64 && (c + 1) as f64 <= bx.y_max
    };
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            let (ia, ib) = (inside(a, r, c), inside(b, r, c));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn oracle_encompasses(bb: &BoundingBox, mask: &LabelMask, s: Structure) -> Option<bool> {
    let mut any = false;
    let mut all = true;
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if s.contains(mask.get(r, c)) {
                any = true;
                let (rf, cf) = (r as f64, c as f64);
                all &= bb.x_min <= rf && rf + 1.0 <= bb.x_max && bb.y_min <= cf && cf + 1.0 <= bb.y_max;
            }
        }
    }
    any.then_some(all)
}

fn geometry_suite() -> Outcome {
    let mut problems = Vec::new();
    let bounds = BoundingBox::full(128, 128);
    let bb = BoundingBox::new(10.0, 50.0, 20.0, 80.0).unwrap();
    for (m, want) in [
        (0.05, [8.0, 52.0, 17.0, 83.0]),
        (0.15, [4.0, 56.0, 11.0, 89.0]),
        (0.0, bb.to_array()),
    ] {
        let got = expand_bbox(&bb, m, &bounds).to_array();
        if got != want {
            problems.push(format!("expand m={m}: {got:?} != {want:?}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let mask = random_mask(&mut rng, h, w);
        for s in Structure::ALL {
            let got = tight_bbox(&mask, s).ok().map(|b| b.to_array());
            if got != oracle_tight(&mask, s) {
                problems.push(format!("tight_bbox {h}x{w} {s:?}"));
            }
            let probe = if rng.random_bool(0.5) {
                random_int_box(&mut rng, h, w)
            } else {
                let t = oracle_tight(&mask, s).unwrap_or([0.0, 1.0, 0.0, 1.0]);
                let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-1.5..1.5);
                let lo = |v: f64, d: f64| (v + d).min(v + 0.25);
                let hi = |v: f64, d: f64| (v + d).max(v - 0.25);
                let (a, b) = (lo(t[0], jitter(&mut rng)), hi(t[1], jitter(&mut rng)));
                let (c, d) = (lo(t[2], jitter(&mut rng)), hi(t[3], jitter(&mut rng)));
                BoundingBox::new(a.min(b), a.max(b), c.min(d), c.max(d)).unwrap()
            };
            if encompasses(&probe, &mask, s).ok() != oracle_encompasses(&probe, &mask, s) {
                problems.push(format!("encompasses {probe:?} {s:?}"));
            }
        }
        let (a, b) = (random_int_box(&mut rng, h, w), random_int_box(&mut rng, h, w));
        let (got, want) = (iou(&a, &b), oracle_iou(&a, &b, h, w));
        if (got - want).abs() > 1e-12 {
            problems.push(format!("iou {a:?} {b:?}: {got} vs {want}"));
        }
        checked += 1;
    }
    outcome(
        problems.is_empty(),
        format!(
            "expand_bbox examples exact; {checked} random masks vs brute force, {} mismatches{}",
            problems.len(),
            problems.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
        ),
    )
}

// -------------------------------------------------- 3: metric oracle suite

fn oracle_dice(a: &LabelMask, b: &LabelMask, s: Structure) -> f64 {
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (ia, ib) = (s.contains(a.get(r, c)), s.contains(b.get(r, c)));
            na += ia as usize;
            nb += ib as usize;
            both += (ia && ib) as usize;
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// All nearest distances from `a` to `b`, in mm, by exhaustive search.
fn oracle_directed(a: &Contour, b: &Contour) -> Vec<f64> {
    let sp = a.spacing();
    a.points()
        .iter()
        .map(|p| {
            b.points()
                .iter()
                .map(|q| (((p[0] - q[0]) * sp.dx).powi(2) + ((p[1] - q[1]) * sp.dy).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn random_contour(rng: &mut ChaCha8Rng, spacing: PixelSpacing) -> Contour {
    let n = rng.random_range(1..=200);
    let points = (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                [
                    rng.random_range(0..64) as f64 + 0.5,
                    rng.random_range(0..64) as f64 + 0.5,
                ]
            } else {
                [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)]
            }
        })
        .collect();
    Contour::new(points, spacing).unwrap()
}

const KEYS: [(View, Instant, Structure); 8] = [
    (View::TwoChamber, Instant::ED, Structure::Endo),
    (View::TwoChamber, Instant::ED, Structure::Epi),
    (View::TwoChamber, Instant::ES, Structure::Endo),
    (View::TwoChamber, Instant::ES, Structure::Epi),
    (View::FourChamber, Instant::ED, Structure::Endo),
    (View::FourChamber, Instant::ED, Structure::Epi),
    (View::FourChamber, Instant::ES, Structure::Endo),
    (View::FourChamber, Instant::ES, Structure::Epi),
];

fn random_structure_bounds(rng: &mut ChaCha8Rng) -> StructureBounds {
    StructureBounds {
        dm_max: rng.random_range(0.5..3.0),
        dh_max: rng.random_range(2.0..8.0),
        min_simplicity: rng.random_range(0.6..0.9),
        min_convexity: rng.random_range(0.7..0.95),
    }
}

fn metric_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut problems = Vec::new();

    for _ in 0..500 {
        let (h, w) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        for s in Structure::ALL {
            if dice(&a, &b, s).unwrap() != oracle_dice(&a, &b, s) {
                problems.push(format!("dice {h}x{w} {s:?}"));
            }
        }
    }

    let mut worst_distance: f64 = 0.0;
    for _ in 0..500 {
        let spacing = PixelSpacing::new(rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)).unwrap();
        let (a, b) = (random_contour(&mut rng, spacing), random_contour(&mut rng, spacing));
        let (ab, ba) = (oracle_directed(&a, &b), oracle_directed(&b, &a));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let want_dm = 0.5 * (mean(&ab) + mean(&ba));
        let want_dh = ab.iter().chain(&ba).copied().fold(0.0, f64::max);
        let e_dm = (mean_absolute_distance(&a, &b).unwrap() - want_dm).abs();
        let e_dh = (hausdorff(&a, &b).unwrap() - want_dh).abs();
        worst_distance = worst_distance.max(e_dm).max(e_dh);
    }
    if worst_distance > 1e-9 {
        problems.push(format!("distance error {worst_distance:.2e} mm"));
    }

    let mut incomplete = 0;
    for _ in 0..1000 {
        let bounds = OutlierBounds {
            endo: random_structure_bounds(&mut rng),
            epi: random_structure_bounds(&mut rng),
        };
        let mut frames: Vec<FrameScores> = KEYS
            .iter()
            .map(|&(view, instant, structure)| FrameScores {
                view,
                instant,
                structure,
                scores: SegScores {
                    dice: rng.random_range(0.5..1.0),
                    d_m: rng.random_range(0.0..3.5),
                    d_h: rng.random_range(0.0..9.0),
                },
                simplicity: rng.random_range(0.55..1.0),
                convexity: rng.random_range(0.65..1.0),
            })
            .collect();
        // Most sets are scaled toward the bounds so every flag combination occurs.
        if rng.random_bool(0.6) {
            for f in &mut frames {
                f.scores.d_m *= 0.4;
                f.scores.d_h *= 0.4;
                f.simplicity = f.simplicity.max(0.92);
                f.convexity = f.convexity.max(0.96);
            }
            let i = rng.random_range(0..8);
            match rng.random_range(0..4) {
                0 => frames[i].scores.d_h = 9.5,
                1 => frames[i].convexity = 0.6,
                2 => {
                    frames[i].scores.d_m = 3.5;
                    frames[(i + 3) % 8].simplicity = 0.5;
                }
                _ => {}
            }
        }
        if rng.random_bool(0.1) {
            incomplete += 1;
            if rng.random_bool(0.5) {
                frames.pop();
            } else {
                frames[0] = frames[1];
            }
        }
        let b = |f: &FrameScores| *bounds.get(f.structure);
        let complete = KEYS.iter().all(|&(v, i, s)| {
            frames
                .iter()
                .filter(|f| (f.view, f.instant, f.structure) == (v, i, s))
                .count()
                == 1
        }) && frames.len() == 8;
        let want = complete.then(|| {
            let g = frames
                .iter()
                .any(|f| f.scores.d_m > b(f).dm_max || f.scores.d_h > b(f).dh_max);
            let a = frames
                .iter()
                .any(|f| f.simplicity < b(f).min_simplicity || f.convexity < b(f).min_convexity);
            (g, a, g && a)
        });
        let got = classify_outliers(&frames, &bounds)
            .ok()
            .map(|o| (o.geometric, o.anatomical, o.both));
        if got != want {
            problems.push(format!("classify_outliers {got:?} vs {want:?}"));
        }
    }

    outcome(
        problems.is_empty(),
        format!(
            "dice exact on 500 mask pairs; worst d_m/d_H error {worst_distance:.1e} mm on 500 contour pairs; 1000 outlier sets ({incomplete} incomplete); {} mismatches{}",
            problems.len(),
            problems.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
        ),
    )
}

// ------------------------------------------------- 4: clinical oracle suite

/// Cavity mask of an ellipse with semi-axes `a` (rows) and `b` (columns), in mm.
fn ellipse_mask(size: usize, spacing_mm: f64, a: f64, b: f64) -> LabelMask {
    let mut m = LabelMask::zeros(size, size, PixelSpacing::isotropic(spacing_mm));
    let center = size as f64 / 2.0;
    for r in 0..size {
        for c in 0..size {
            let x = (r as f64 + 0.5 - center) * spacing_mm;
            let y = (c as f64 + 0.5 - center) * spacing_mm;
            if (x / a).powi(2) + (y / b).powi(2) <= 1.0 {
                m.set(r, c, LabelMask::CAVITY);
            }
        }
    }
    m
}

fn clinical_suite() -> Outcome {
    let spacing = 0.5;
    let ellipsoid = simpson_biplane(
        &ellipse_mask(256, spacing, 40.0, 20.0),
        &ellipse_mask(256, spacing, 40.0, 15.0),
        20,
    )
    .unwrap();
    let ellipsoid_want = std::f64::consts::PI / 6.0 * 40.0 * 30.0 * 80.0 / 1000.0;
    let sphere = simpson_biplane(
        &ellipse_mask(256, spacing, 25.0, 25.0),
        &ellipse_mask(256, spacing, 25.0, 25.0),
        20,
    )
    .unwrap();
    let sphere_want = std::f64::consts::PI / 6.0 * 125.0;
    let e_ell = (ellipsoid - ellipsoid_want).abs() / ellipsoid_want;
    let e_sph = (sphere - sphere_want).abs() / sphere_want;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(3..=60);
        let reference: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..200.0)).collect();
        let pred: Vec<f64> = reference
            .iter()
            .map(|r| r * rng.random_range(0.7..1.3) + rng.random_range(-10.0..10.0))
            .collect();
        let got = agreement_stats(&pred, &reference).unwrap();
        let nf = n as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / nf;
        let (mp, mr) = (mean(&pred), mean(&reference));
        let cov: f64 = pred
            .iter()
            .zip(&reference)
            .map(|(p, r)| (p - mp) * (r - mr))
            .sum::<f64>();
        let vp: f64 = pred.iter().map(|p| (p - mp).powi(2)).sum();
        let vr: f64 = reference.iter().map(|r| (r - mr).powi(2)).sum();
        let d: Vec<f64> = pred.iter().zip(&reference).map(|(p, r)| p - r).collect();
        let bias = mean(&d);
        let sd = (d.iter().map(|x| (x - bias).powi(2)).sum::<f64>() / nf).sqrt();
        let mae = d.iter().map(|x| x.abs()).sum::<f64>() / nf;
        let want = [cov / (vp * vr).sqrt(), bias, 1.96 * sd, mae];
        let have = [got.corr, got.bias, got.loa, got.mae];
        for (h, w) in have.iter().zip(want) {
            worst = worst.max((h - w).abs());
        }
    }
    let passed = e_ell <= 0.02 && e_sph <= 0.02 && worst <= 1e-12;
    outcome(
        passed,
        format!(
            "ellipsoid {ellipsoid:.2} ml vs {ellipsoid_want:.2} ({:.2}%), sphere {sphere:.2} ml vs {sphere_want:.2} ({:.2}%), agreement_stats worst error {worst:.1e}",
            100.0 * e_ell,
            100.0 * e_sph
        ),
    )
}

// --------------------------------------------------- 5: phantom closed loop

fn phantom_suite() -> Outcome {
    let records = generate_dataset(&PhantomParams::high_resolution(), 100, 5).unwrap();
    let (mut e_edv, mut e_esv, mut e_ef): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for r in &records {
        let vol = |instant| {
            simpson_biplane(
                &r.frame(View::TwoChamber, instant).mask,
                &r.frame(View::FourChamber, instant).mask,
                20,
            )
            .unwrap()
        };
        let (edv, esv) = (vol(Instant::ED), vol(Instant::ES));
        e_edv = e_edv.max((edv - r.edv).abs() / r.edv);
        e_esv = e_esv.max((esv - r.esv).abs() / r.esv);
        e_ef = e_ef.max((ejection_fraction(edv, esv).unwrap() - r.ef).abs());
    }

    let k = 10;
    let folds = stratified_folds(&records, k, 5).unwrap();
    let mut strata = std::collections::BTreeMap::new();
    for (r, &f) in records.iter().zip(&folds.folds) {
        strata
            .entry((r.quality, r.ef_category))
            .or_insert_with(|| vec![0usize; k])[f] += 1;
    }
    let worst_dev = strata
        .values()
        .flat_map(|counts| {
            let uniform = counts.iter().sum::<usize>() as f64 / k as f64;
            counts.iter().map(move |&c| (c as f64 - uniform).abs())
        })
        .fold(0.0, f64::max);

    let passed = e_edv <= 0.05 && e_esv <= 0.05 && e_ef <= 3.0 && worst_dev <= 1.0;
    outcome(
        passed,
        format!(
            "100 patients at 256x256: worst EDV error {:.2}%, ESV {:.2}%, EF {e_ef:.2} points; {} strata, worst fold-count deviation {worst_dev:.2}",
            100.0 * e_edv,
            100.0 * e_esv,
            strata.len()
        ),
    )
}

// ---------------------------------------------- 6: end-to-end toy training

const TOY_PATIENTS: usize = 60;
const TOY_SEED: u64 = 2024;
const TOY_HELD_OUT_FOLDS: usize = 5;
const TOY_VALIDATION: usize = 8;

fn toy_config(margin: f64) -> LuNetConfig {
    let mut c = LuNetConfig::sized(128, 64, 3, 8, vec![256, 64, 16, 4], margin);
    c.localizer.backbone.base_filters = 4;
    c
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        max_epochs: 130,
        patience: 20,
        ..TrainConfig::default()
    }
}

struct ToyRun {
    iou: f64,
    bb_out: usize,
    bb_out_percent: f64,
    endo_dice: f64,
    initial_loss: f64,
    best_loss: f64,
    best_epoch: usize,
    stopped_epoch: usize,
}

fn toy_run(records: &[PatientRecord], held_out: &[PatientRecord], margin: f64) -> ToyRun {
    let mut pool: Vec<&PatientRecord> = records.iter().filter(|r| !held_out.contains(r)).collect();
    pool.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let (train_part, val_part) = pool.split_at(pool.len() - TOY_VALIDATION);
    let owned = |v: &[&PatientRecord]| v.iter().map(|r| (*r).clone()).collect::<Vec<_>>();
    let train_set = samples_from_records(&owned(train_part), margin);
    let val_set = samples_from_records(&owned(val_part), margin);
    let mut net = LuNet::new(toy_config(margin), 0).unwrap();
    let history = train(&mut net, &train_set, &val_set, &toy_train_config()).unwrap();

    let refs: Vec<LabelMask> = records
        .iter()
        .flat_map(|r| r.frames.iter().map(|f| f.mask.clone()))
        .collect();
    let opts = EvalOptions {
        bounds: calibrate_bounds(&refs, 2, 0).unwrap(),
        margin,
        n_discs: 20,
    };
    let report = evaluate(&LuNetPredictor::new(&net), held_out, &opts).unwrap().report;
    let endo = report
        .segmentation
        .iter()
        .find(|row| row.structure == Structure::Endo)
        .and_then(|row| row.dice)
        .map_or(0.0, |d| d.mean);
    ToyRun {
        iou: report.localization.iou.map_or(0.0, |m| m.mean),
        bb_out: report.localization.bb_out_count,
        bb_out_percent: report.localization.bb_out_percent,
        endo_dice: endo,
        initial_loss: history.initial_validation().total,
        best_loss: history.best_validation().total,
        best_epoch: history.best_epoch,
        stopped_epoch: history.stopped_epoch,
    }
}

fn training_suite() -> Outcome {
    let records = generate_dataset(&PhantomParams::desk(), TOY_PATIENTS, TOY_SEED).unwrap();
    let folds = stratified_folds(&records, TOY_HELD_OUT_FOLDS, TOY_SEED).unwrap();
    let held_out: Vec<PatientRecord> = folds.members(0).into_iter().map(|i| records[i].clone()).collect();
    let m15 = toy_run(&records, &held_out, 0.15);
    let m05 = toy_run(&records, &held_out, 0.05);
    let checks = [
        ("IoU>=0.80", m15.iou >= 0.80),
        ("BB-out=0 at m=15%", m15.bb_out == 0),
        ("BB-out m15<=m5", m15.bb_out_percent <= m05.bb_out_percent),
        ("endo Dice>=0.85", m15.endo_dice >= 0.85),
        ("val loss<epoch 0", m15.best_loss < m15.initial_loss),
    ];
    let failing: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failing.is_empty(),
        format!(
            "{} held out; m=15%: IoU {:.3}, BB-out {} ({:.1}%), endo Dice {:.3}, val loss {:.3} -> {:.3} (best epoch {}, stopped {}); m=5%: IoU {:.3}, BB-out {:.1}%{}",
            held_out.len(),
            m15.iou,
            m15.bb_out,
            m15.bb_out_percent,
            m15.endo_dice,
            m15.initial_loss,
            m15.best_loss,
            m15.best_epoch,
            m15.stopped_epoch,
            m05.iou,
            m05.bb_out_percent,
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    )
}

// ------------------------------------------------------- 7: determinism

fn determinism_suite() -> Outcome {
    let records = generate_dataset(&PhantomParams::desk(), TOY_PATIENTS, TOY_SEED).unwrap();
    let folds = stratified_folds(&records, 3, TOY_SEED).unwrap();
    let mut config = RunConfig {
        model: LuNetConfig::sized(128, 32, 2, 4, vec![16, 4], 0.15),
        ..RunConfig::default()
    };
    config.train.max_epochs = 1;
    config.train.batch_size = 4;
    let once = || {
        cross_validate(&records, &folds, &config, &|_, _| {})
            .unwrap()
            .report
            .to_json_bytes()
            .unwrap()
    };
    let (a, b) = (once(), once());
    outcome(
        a == b,
        format!(
            "two 3-fold cross-validations on {TOY_PATIENTS} patients, reports of {} and {} bytes, identical: {}",
            a.len(),
            b.len(),
            a == b
        ),
    )
}

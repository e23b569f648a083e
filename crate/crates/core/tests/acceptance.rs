//! Acceptance suite: one line per criterion, tolerances pinned below.
//!
//! `cargo test --release --test acceptance` runs everything; set
//! `ACCEPTANCE=1,4,12` to run a subset.

use std::f64::consts::PI;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cardioseg::clinical::{
    bland_altman, clinical_report, compare_variants, label_volume_ml, Variant,
};
use cardioseg::data_io::{
    read_nifti, split_dataset, write_volume, DatasetEntry, DatasetIndex, LabelMask, Phase, Split,
    SplitFractions, Volume, VolumeHeader, LV_CAVITY, MYOCARDIUM,
};
use cardioseg::metrics::{
    confusion, dice_from_counts, iou_percent, precision_recall_f1, Aggregation, MACRO_CLASS,
};
use cardioseg::phantom::{generate, generate_cohort, CohortConfig, Phantom, PhantomSpec};
use cardioseg::preprocess::{clean_mask, Connectivity};
use cardioseg::reconstruct::marching_cubes;
use cardioseg::tensor::verify::{adjoint_suite, gradient_suite, LAYERS};
use cardioseg::training::{evaluate, load_split, lr_schedule, train, TrainConfig, TrainOptions};
use cardioseg::unet::UNet;

const GRAD_TOL: f64 = 1e-5;
const GRAD_TRIALS: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ADJOINT_TOL: f64 = 1e-5;
const ADJOINT_CASES: usize = 50;
const OVERFIT_EPOCHS: usize = 40;
const OVERFIT_DICE: f64 = 0.95;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const LOOP_CONSISTENCY: f64 = 0.01;
const METRIC_PAIRS: usize = 100;
const IOU_ULPS: f64 = 4.0;
const LR_TOL: f64 = 1e-7;
const ELLIPSOID_TOL: f64 = 0.02;
const LVEF_TOL_PP: f64 = 1.0;
const BA_TOL: f64 = 1e-4;
const MESH_VOLUME_TOL: f64 = 0.05;
const SEED: u64 = 2024;

type Check = fn() -> String;

fn criteria() -> Vec<(usize, &'static str, Check)> {
    vec![
        (1, "layer gradients match finite differences", c01_gradients),
        (2, "convolution adjoint identity", c02_adjoint),
        (3, "phantom cohort overfit", c03_overfit),
        (4, "metric oracles and identities", c04_metrics),
        (5, "learning-rate constants", c05_schedule),
        (6, "split arithmetic", c06_split),
        (7, "ellipsoid volumetry and LVEF", c07_volumetry),
        (8, "papillary exclusion direction", c08_papillary),
        (9, "cleaning oracle and idempotence", c09_cleaning),
        (10, "Bland-Altman statistics", c10_bland_altman),
        (11, "file formats and meshes", c11_formats),
        (12, "single-thread CLI determinism", c12_determinism),
    ]
}

#[test]
fn acceptance() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    // written to the raw handle so the table shows even when output is captured
    let mut err = std::io::stderr();
    let mut failed = Vec::new();
    for (id, name, check) in criteria() {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok(detail) => ("PASS", detail),
            Err(payload) => {
                failed.push(id);
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                ("FAIL", msg)
            }
        };
        writeln!(
            err,
            "criterion {id:>2} {status}  {name}: {detail} [{secs:.1}s]"
        )
        .unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn c01_gradients() -> String {
    let start = Instant::now();
    let checks = gradient_suite(GRAD_TRIALS, SEED, GRAD_TOL).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(checks.len(), LAYERS.len());
    let mut worst: f64 = 0.0;
    for c in &checks {
        assert!(c.trials >= GRAD_TRIALS, "{}: {} trials", c.layer, c.trials);
        assert!(
            c.passed(),
            "{}: {} failing trials, max rel {:.3e}",
            c.layer,
            c.failures,
            c.max_rel_error
        );
        worst = worst.max(c.max_rel_error);
    }
    assert!(elapsed <= GRAD_BUDGET, "took {elapsed:?}");
    format!(
        "{} layers x {GRAD_TRIALS} trials, max rel {worst:.2e} <= {GRAD_TOL:e}",
        checks.len()
    )
}

fn c02_adjoint() -> String {
    let cases = adjoint_suite(ADJOINT_CASES, SEED).unwrap();
    assert_eq!(cases.len(), ADJOINT_CASES);
    assert!(cases.iter().any(|c| c.transposed) && cases.iter().any(|c| !c.transposed));
    assert!(cases.iter().any(|c| c.stride.iter().any(|&s| s > 1)));
    let worst = cases.iter().map(|c| c.rel_error()).fold(0.0, f64::max);
    assert!(worst <= ADJOINT_TOL, "max rel {worst:e}");
    format!("{ADJOINT_CASES} cases, max rel {worst:.2e} <= {ADJOINT_TOL:e}")
}

fn c03_overfit() -> String {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_cohort(8, &CohortConfig::default(), 7, dir.path()).unwrap();
    let cfg = TrainConfig {
        epochs: OVERFIT_EPOCHS,
        batch_size: 4,
        base_channels: 8,
        patch: [64, 64, 4],
        seed: 7,
        // validate once, after the last epoch, on the training volumes themselves
        validate_every: OVERFIT_EPOCHS,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let volumes = load_split(&index, dir.path(), Split::Train, cfg.clean_masks).unwrap();
    let model = UNet::build(cfg.unet_config()).unwrap();
    let outcome = train(model, &volumes, &volumes, &cfg, TrainOptions::default()).unwrap();
    let report = evaluate(
        &outcome.model,
        &volumes,
        cfg.stride,
        cfg.clean_masks,
        Aggregation::PerVolume,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let fg: Vec<f64> = report
        .aggregates
        .iter()
        .filter(|r| r.class == MACRO_CLASS)
        .map(|r| r.dice)
        .collect();
    assert_eq!(fg.len(), 2, "one foreground aggregate per phase");
    let mean = fg.iter().sum::<f64>() / fg.len() as f64;
    assert!(mean >= OVERFIT_DICE, "mean foreground dice {mean:.4}");
    let logged = outcome
        .log
        .last()
        .and_then(|e| e.val.as_ref())
        .expect("final epoch validates")
        .dice;
    assert!(
        (logged - mean).abs() <= LOOP_CONSISTENCY,
        "loop {logged:.4} vs evaluate {mean:.4}"
    );
    assert!(elapsed <= OVERFIT_BUDGET, "took {elapsed:?}");
    format!(
        "{} volumes, {OVERFIT_EPOCHS} epochs, foreground dice ED {:.4} ES {:.4} mean {mean:.4} >= {OVERFIT_DICE}, loop {logged:.4}",
        volumes.len(),
        fg[0],
        fg[1]
    )
}

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], fill: f64) -> LabelMask {
    let n = dims.iter().product();
    let labels = (0..n)
        .map(|_| {
            if rng.random_bool(fill) {
                rng.random_range(1..=2)
            } else {
                0
            }
        })
        .collect();
    LabelMask::new(VolumeHeader::new(dims, [1.0; 3]), labels)
}

fn c04_metrics() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut checked = 0;
    for _ in 0..METRIC_PAIRS {
        let fill: [f64; 2] = [rng.random(), rng.random()];
        let pred = random_mask(&mut rng, [16; 3], fill[0]);
        let gt = random_mask(&mut rng, [16; 3], fill[1]);
        for class in [MYOCARDIUM, LV_CAVITY] {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for z in 0..16 {
                for y in 0..16 {
                    for x in 0..16 {
                        let i = x + 16 * (y + 16 * z);
                        match (pred.labels[i] == class, gt.labels[i] == class) {
                            (true, true) => tp += 1,
                            (true, false) => fp += 1,
                            (false, true) => fn_ += 1,
                            _ => {}
                        }
                    }
                }
            }
            let c = confusion(&pred, &gt, class).unwrap();
            assert_eq!((c.tp, c.fp, c.r#fn, c.total()), (tp, fp, fn_, 4096));
            let d = dice_from_counts(&c);
            let (_, _, f1) = precision_recall_f1(&c);
            let iou = iou_percent(&c);
            assert_eq!(d, 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
            assert_eq!(iou, tp as f64 / (tp + fp + fn_) as f64 * 100.0);
            assert_eq!(f1.to_bits(), d.to_bits(), "f1 {f1} dice {d}");
            // with d = 2tp/s, d/(2−d) = 2tp/(2s−2tp); cross-multiply against tp/(tp+fp+fn)
            let s = 2 * tp + fp + fn_;
            assert_eq!(tp * (2 * s - 2 * tp), 2 * tp * (tp + fp + fn_));
            let lhs = iou / 100.0;
            let rhs = d / (2.0 - d);
            assert!(
                (lhs - rhs).abs() <= IOU_ULPS * f64::EPSILON * rhs.abs(),
                "iou {lhs} vs {rhs}"
            );
            checked += 1;
        }
    }
    format!("{checked} class comparisons on {METRIC_PAIRS} random 16^3 pairs, f1 == dice bitwise")
}

fn c05_schedule() -> String {
    let (e1, e40, e41, e60, e100) = (
        lr_schedule(1).unwrap(),
        lr_schedule(40).unwrap(),
        lr_schedule(41).unwrap(),
        lr_schedule(60).unwrap(),
        lr_schedule(100).unwrap(),
    );
    assert_eq!(e1, 0.005);
    assert_eq!(e40, 0.005);
    assert_eq!(e41, 0.001);
    assert_eq!(e60, 0.001);
    assert!((e100 - 0.0004457).abs() <= LR_TOL, "epoch 100: {e100}");
    let r = 0.4457f64.powf(1.0 / 40.0);
    for e in 61..=100 {
        let expected = 0.001 * r.powi(e as i32 - 60);
        let got = lr_schedule(e).unwrap();
        assert!(
            (got - expected).abs() <= 1e-15,
            "epoch {e}: {got} vs {expected}"
        );
    }
    format!("1 -> {e1}, 41 -> {e41}, 100 -> {e100:.7}")
}

fn c06_split() -> String {
    let entries: Vec<DatasetEntry> = (0..4200)
        .flat_map(|s| {
            [Phase::ED, Phase::ES].map(|phase| DatasetEntry {
                subject: format!("s{s:04}"),
                phase,
                image: PathBuf::from(format!("s{s:04}_{phase}_image.nii.gz")),
                mask: PathBuf::from(format!("s{s:04}_{phase}_mask.nii.gz")),
                split: Split::Train,
            })
        })
        .collect();
    let index = DatasetIndex::new(entries);
    assert_eq!(index.entries.len(), 8400);
    let a = split_dataset(&index, SplitFractions::default(), SEED).unwrap();
    let b = split_dataset(&index, SplitFractions::default(), SEED).unwrap();
    assert_eq!(a, b, "same seed, same split");
    let counts = (
        a.count(Split::Train),
        a.count(Split::Val),
        a.count(Split::Test),
    );
    assert_eq!(counts, (5880, 840, 1680));
    let mut by_subject = std::collections::HashMap::new();
    for e in &a.entries {
        assert_eq!(
            *by_subject.entry(e.subject.clone()).or_insert(e.split),
            e.split,
            "{} split",
            e.subject
        );
    }
    let other = split_dataset(&index, SplitFractions::default(), SEED + 1).unwrap();
    assert_ne!(a, other, "seed changes the assignment");
    format!(
        "8400 images -> {}/{}/{}, subject-coherent, deterministic",
        counts.0, counts.1, counts.2
    )
}

/// Spec whose ED cavity is the ellipsoid with the given semi-axes at 1 mm.
fn ellipsoid_spec(axes: [f64; 3]) -> PhantomSpec {
    let thickness = 4.0;
    let dims = axes.map(|a| (2.0 * (a + thickness)).ceil() as usize + 5);
    PhantomSpec {
        dims,
        spacing_mm: [1.0; 3],
        center_mm: dims.map(|d| (d / 2) as f64 + 0.37),
        endo_axes_mm: axes,
        thickness_mm: thickness,
        ..PhantomSpec::sphere(axes[0])
    }
}

fn c07_volumetry() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut axes_list = vec![[15.0; 3], [15.0, 20.0, 25.0], [28.0, 17.0, 21.5]];
    axes_list.extend((0..5).map(|_| std::array::from_fn(|_| rng.random_range(15.0..30.0))));
    let mut worst: f64 = 0.0;
    for axes in &axes_list {
        let ph = generate(&ellipsoid_spec(*axes)).unwrap();
        let measured = label_volume_ml(&ph.ed.clean_mask, LV_CAVITY);
        let analytic = 4.0 / 3.0 * PI * axes[0] * axes[1] * axes[2] / 1000.0;
        let rel = (measured / analytic - 1.0).abs();
        assert!(
            rel <= ELLIPSOID_TOL,
            "axes {axes:?}: {measured} ml vs {analytic} ml"
        );
        worst = worst.max(rel);
    }
    let spec = PhantomSpec::sphere(20.0);
    assert_eq!(spec.es_scale, 0.75);
    let ph = generate(&spec).unwrap();
    let report = clinical_report(
        "sphere",
        Variant::PapillaryExcluded,
        &ph.ed.clean_mask,
        &ph.es.clean_mask,
    )
    .unwrap();
    let expected = (1.0 - 0.75f64.powi(3)) * 100.0;
    assert!(
        (report.lvef_percent - expected).abs() <= LVEF_TOL_PP,
        "lvef {}",
        report.lvef_percent
    );
    format!(
        "{} ellipsoids, max rel volume error {:.2}%; LVEF {:.2}% vs {expected:.2}%",
        axes_list.len(),
        worst * 100.0,
        report.lvef_percent
    )
}

fn blob_phantoms(n: usize) -> Vec<(PhantomSpec, Phantom)> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let cohort = CohortConfig::default();
    assert!(!cohort.blob_offsets.is_empty());
    (0..n)
        .map(|_| {
            let spec = cohort.sample(&mut rng);
            let ph = generate(&spec).unwrap();
            (spec, ph)
        })
        .collect()
}

/// Voxels of the cavity at `scale` that fall inside any blob sphere.
fn blob_voxel_count(spec: &PhantomSpec, scale: f64) -> usize {
    let c = spec.center_mm;
    let endo = spec.endo_axes_mm.map(|a| a * scale);
    let [nx, ny, nz] = spec.dims;
    let mut count = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = [x, y, z];
                let p: [f64; 3] =
                    std::array::from_fn(|i| idx[i] as f64 * spec.spacing_mm[i] as f64);
                let in_cavity = (0..3)
                    .map(|i| ((p[i] - c[i]) / endo[i]).powi(2))
                    .sum::<f64>()
                    <= 1.0;
                let in_blob = spec.blobs.iter().any(|b| {
                    (0..3)
                        .map(|i| (p[i] - c[i] - b.offset_mm[i] * scale).powi(2))
                        .sum::<f64>()
                        <= b.radius_mm.powi(2)
                });
                count += usize::from(in_cavity && in_blob);
            }
        }
    }
    count
}

fn c08_papillary() -> String {
    let phantoms = blob_phantoms(8);
    let mut lvef_drops = 0;
    for (k, (spec, ph)) in phantoms.iter().enumerate() {
        let cmp = compare_variants(
            "blob",
            (&ph.ed.raw_mask, &ph.es.raw_mask),
            (&ph.ed.clean_mask, &ph.es.clean_mask),
        )
        .unwrap();
        let (inc, exc) = (&cmp.included, &cmp.excluded);
        assert!(exc.edv_ml > inc.edv_ml, "subject {k}: EDV");
        assert!(exc.esv_ml > inc.esv_ml, "subject {k}: ESV");
        assert!(exc.myo_mass_g < inc.myo_mass_g, "subject {k}: mass");

        let voxel_ml = ph.ed.raw_mask.header.voxel_volume_mm3() / 1000.0;
        let (b_ed, b_es) = (
            blob_voxel_count(spec, 1.0),
            blob_voxel_count(spec, spec.es_scale),
        );
        let lv = |m: &LabelMask| m.count(LV_CAVITY);
        assert_eq!(
            lv(&ph.ed.clean_mask) - lv(&ph.ed.raw_mask),
            b_ed,
            "subject {k}: ED blob voxels"
        );
        assert_eq!(
            lv(&ph.es.clean_mask) - lv(&ph.es.raw_mask),
            b_es,
            "subject {k}: ES blob voxels"
        );
        let delta = exc.edv_ml - inc.edv_ml;
        assert!(
            (delta - b_ed as f64 * voxel_ml).abs() <= 1e-9 * delta,
            "subject {k}: EDV delta {delta}"
        );

        // exclusion lowers LVEF exactly when b_es/ESV > b_ed/EDV
        let larger_at_es = b_es * lv(&ph.ed.raw_mask) > b_ed * lv(&ph.es.raw_mask);
        assert_eq!(
            exc.lvef_percent < inc.lvef_percent,
            larger_at_es,
            "subject {k}: LVEF direction"
        );
        lvef_drops += usize::from(larger_at_es);
    }
    assert!(lvef_drops > 0, "no subject exercised the LVEF decrease");
    format!(
        "{} blob phantoms: EDV/ESV up, mass down, EDV delta = blob voxels; LVEF down in {lvef_drops}",
        phantoms.len()
    )
}

fn structured_mask(rng: &mut ChaCha8Rng) -> LabelMask {
    let dims = [
        rng.random_range(8..24),
        rng.random_range(8..24),
        rng.random_range(1..6),
    ];
    let c = [dims[0] as f64 / 2.0, dims[1] as f64 / 2.0];
    let r_in = rng.random_range(2.0..5.0);
    let r_out = r_in + rng.random_range(1.0..3.0);
    let noise = rng.random_range(0.0..0.3);
    let mut labels = Vec::with_capacity(dims.iter().product());
    for _z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let r = ((x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2)).sqrt();
                let base = if r <= r_in {
                    LV_CAVITY
                } else if r <= r_out {
                    MYOCARDIUM
                } else {
                    0
                };
                labels.push(if rng.random_bool(noise) {
                    rng.random_range(0..=2)
                } else {
                    base
                });
            }
        }
    }
    LabelMask::new(VolumeHeader::new(dims, [1.0; 3]), labels)
}

fn c09_cleaning() -> String {
    let mut frames = 0;
    for (_, ph) in blob_phantoms(8) {
        for f in [&ph.ed, &ph.es] {
            assert_ne!(f.raw_mask, f.clean_mask, "phantom without papillary voxels");
            assert!(
                clean_mask(&f.raw_mask, Connectivity::Slice8) == f.clean_mask,
                "cleaned mask differs from truth"
            );
            frames += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for i in 0..100 {
        let m = if i % 2 == 0 {
            structured_mask(&mut rng)
        } else {
            let fill = rng.random_range(0.1..0.9);
            random_mask(&mut rng, [12, 12, 4], fill)
        };
        for conn in [Connectivity::Slice8, Connectivity::Volume26] {
            let once = clean_mask(&m, conn);
            assert!(
                clean_mask(&once, conn) == once,
                "mask {i} {conn:?} not idempotent"
            );
        }
    }
    format!("{frames} phantom frames reproduced voxel-for-voxel; 100 random masks idempotent")
}

fn c10_bland_altman() -> String {
    let pairs = [(10.0, 12.0), (20.0, 19.0), (30.0, 33.0)];
    let s = bland_altman(&pairs).unwrap();
    for (got, want) in [
        (s.bias, -1.3333),
        (s.sd_diff, 2.0817),
        (s.loa_low, -5.4134),
        (s.loa_high, 2.7468),
    ] {
        assert!((got - want).abs() <= BA_TOL, "{got} vs {want}");
    }
    // differences (-2, 1, -3): bias -4/3, sample variance 13/3
    let sd = (13.0f64 / 3.0).sqrt();
    assert!((s.bias + 4.0 / 3.0).abs() < 1e-12 && (s.sd_diff - sd).abs() < 1e-12);
    assert!((s.loa_high - (-4.0 / 3.0 + 1.96 * sd)).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for _ in 0..50 {
        let n = rng.random_range(2..20);
        let p: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)))
            .collect();
        let swapped: Vec<(f64, f64)> = p.iter().map(|&(a, b)| (b, a)).collect();
        let (x, y) = (bland_altman(&p).unwrap(), bland_altman(&swapped).unwrap());
        assert_eq!(x.bias, -y.bias);
        assert_eq!(x.sd_diff, y.sd_diff);
        assert_eq!((x.loa_low, x.loa_high), (-y.loa_high, -y.loa_low));
    }
    format!(
        "bias {:.4} sd {:.4} loa {:.4}/{:.4}; antisymmetric on 50 random sets",
        s.bias, s.sd_diff, s.loa_low, s.loa_high
    )
}

fn c11_formats() -> String {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let header = VolumeHeader::new([7, 5, 3], [1.25, 0.8, 6.0]);
    let mut values: Vec<f32> = (0..header.voxel_count())
        .map(|_| f32::from_bits(rng.random::<u32>() & !0x7f80_0000 | 0x3f00_0000))
        .collect();
    values[..6].copy_from_slice(&[
        0.0,
        -0.0,
        f32::MIN_POSITIVE / 4.0,
        f32::MAX,
        -1e-30,
        123456.78,
    ]);
    let vol = Volume::new(header, values);
    for gzip in [false, true] {
        let path = dir.path().join(if gzip { "v.nii.gz" } else { "v.nii" });
        write_volume(&vol, &path, gzip).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.header.dims, header.dims);
        assert_eq!(back.header.spacing_mm, header.spacing_mm);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.values), bits(&vol.values), "gzip {gzip}");
    }

    let voxel = LabelMask::new(VolumeHeader::new([1, 1, 1], [1.0; 3]), vec![LV_CAVITY]);
    let single = marching_cubes(&voxel, LV_CAVITY);
    assert!(single.is_watertight() && single.is_consistently_oriented());
    assert_eq!(single.euler_characteristic(), 2);

    let axes = [16.0, 20.0, 24.0];
    let ph = generate(&ellipsoid_spec(axes)).unwrap();
    let mesh = marching_cubes(&ph.ed.clean_mask, LV_CAVITY);
    assert!(mesh.is_watertight() && mesh.is_consistently_oriented());
    assert_eq!(mesh.euler_characteristic(), 2);
    let analytic = 4.0 / 3.0 * PI * axes[0] * axes[1] * axes[2];
    let rel = (mesh.enclosed_volume_mm3() / analytic - 1.0).abs();
    assert!(rel <= MESH_VOLUME_TOL, "mesh volume off by {rel}");

    let mut stl = Vec::new();
    mesh.write_stl(&mut stl, "lv").unwrap();
    let n = mesh.triangles.len();
    assert_eq!(stl.len(), 84 + 50 * n);
    assert_eq!(
        u32::from_le_bytes(stl[80..84].try_into().unwrap()) as usize,
        n
    );
    format!(
        "NIfTI float32 bit-exact (plain, gzip); STL {} bytes = 84 + 50*{n}; voxel chi 2; ellipsoid mesh {:.2}% off",
        stl.len(),
        rel * 100.0
    )
}

const CLI_CONFIG: &str =
    r#"{"epochs": 5, "batch_size": 4, "base_channels": 4, "patches_per_volume": 2, "seed": 3}"#;

fn cardioseg(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_cardioseg"))
        .arg("--threads")
        .arg("1")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Phantom generation, 5-epoch training, segmentation of every image and
/// evaluation, all in `root`.
fn cli_pipeline(root: &Path) {
    let s = |p: PathBuf| p.to_str().unwrap().to_string();
    let (data, pred) = (root.join("data"), root.join("pred"));
    cardioseg(&[
        "phantom",
        "--count",
        "10",
        "--seed",
        "3",
        "--out",
        &s(data.clone()),
        "--papillary",
    ]);
    std::fs::write(root.join("config.json"), CLI_CONFIG).unwrap();
    cardioseg(&[
        "train",
        "--config",
        &s(root.join("config.json")),
        "--data",
        &s(data.clone()),
        "--out",
        &s(root.join("model.csg")),
        "--log",
        &s(root.join("epochs.csv")),
    ]);
    std::fs::create_dir_all(&pred).unwrap();
    let mut images: Vec<PathBuf> = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_str().unwrap().ends_with("_image.nii.gz"))
        .collect();
    images.sort();
    for image in &images {
        let name = image
            .file_name()
            .unwrap()
            .to_str()
            .unwrap()
            .replace("_image", "_mask");
        cardioseg(&[
            "segment",
            "--model",
            &s(root.join("model.csg")),
            "--image",
            &s(image.clone()),
            "--out",
            &s(pred.join(name)),
        ]);
    }
    cardioseg(&[
        "eval",
        "--pred",
        &s(pred),
        "--gt",
        &s(data),
        "--report",
        &s(root.join("metrics.csv")),
        "--clean-gt",
    ]);
}

/// Relative path and contents of every file under `root`, sorted.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn c12_determinism() -> String {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cli_pipeline(a.path());
    cli_pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names = |t: &[(PathBuf, Vec<u8>)]| t.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
    assert_eq!(names(&ta), names(&tb));
    for ((p, x), (_, y)) in ta.iter().zip(&tb) {
        assert!(x == y, "{} differs between runs", p.display());
    }
    let log = String::from_utf8(std::fs::read(a.path().join("epochs.csv")).unwrap()).unwrap();
    assert_eq!(log.lines().count(), 6, "header plus 5 epochs");
    let bytes: usize = ta.iter().map(|(_, d)| d.len()).sum();
    format!(
        "{} files ({bytes} bytes) identical across two runs",
        ta.len()
    )
}

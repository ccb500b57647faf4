use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stealthpatch_core::dataset::shape_image;
use stealthpatch_core::evaluation::*;
use stealthpatch_core::generator::NetConfig;
use stealthpatch_core::imaging::{apply_patch, ImageTensor, PatchRegion};
use stealthpatch_core::saliency::saliency_map;
use stealthpatch_core::trainer::{train_all, AttackGoal, Quiet, TrainConfig};
use stealthpatch_core::victim::{predict, BlackBoxStub, LinearProbe};
use stealthpatch_tensor::Tensor;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compare against a stored map; `STEALTHPATCH_BLESS=1` rewrites it.
fn check_golden(name: &str, map: &Tensor) {
    let path = golden(name);
    if std::env::var("STEALTHPATCH_BLESS").as_deref() == Ok("1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string(map).unwrap()).unwrap();
    }
    let stored: Tensor = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(stored.shape(), map.shape());
    for (a, b) in stored.data().iter().zip(map.data()) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn saliency_matches_golden_files() {
    check_golden("saliency_shape_5_0.json", &saliency_map(&shape_image(5, 0, 32).0));
    check_golden("saliency_shape_5_1.json", &saliency_map(&shape_image(5, 1, 32).0));
}

#[test]
fn saliency_is_deterministic_and_normalized() {
    let x = shape_image(9, 3, 32).0;
    let a = saliency_map(&x);
    assert_eq!(a, saliency_map(&x));
    assert_eq!(a.max(), 1.0);
    assert!(a.min() >= 0.0);
}

fn linear_probe(seed: u64) -> LinearProbe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Tensor::randn(&[2, 3 * 8 * 8], 1.0, &mut rng);
    // A few exactly tied weights exercise the zero-gradient case.
    for i in 0..5 {
        w.data_mut()[192 + i] = w.data()[i];
    }
    LinearProbe::new("lin", (3, 8, 8), w, Tensor::zeros(&[2])).unwrap()
}

#[test]
fn one_pgd_step_on_a_linear_model_is_a_signed_epsilon() {
    let m = linear_probe(1);
    let x = ImageTensor::filled(3, 8, 8, 0.0).unwrap();
    let eps = Epsilon::new(8.0).unwrap().internal();
    let goal = AttackGoal { true_class: 0, target: None };
    let adv = pgd_attack(&m, &x, eps, 1, eps, goal).unwrap();
    let w = &m.weight;
    for i in 0..192 {
        let d = w.data()[192 + i] - w.data()[i];
        let expect = if d > 0.0 { eps } else if d < 0.0 { -eps } else { 0.0 };
        assert_eq!(adv.data()[i], expect, "pixel {i}");
    }
    // Targeted toward class 1 moves the same way.
    let toward = pgd_attack(&m, &x, eps, 1, eps, AttackGoal { true_class: 0, target: Some(1) }).unwrap();
    assert_eq!(toward, adv);
}

#[test]
fn pgd_respects_the_ball_and_range() {
    let m = linear_probe(2);
    let goal = AttackGoal { true_class: 0, target: None };
    for k in 0..5 {
        let x = ImageTensor::from_fn(3, 8, 8, |c, y, xx| (((c + y * 3 + xx * 7 + k) % 13) as f64 / 6.0 - 1.0).clamp(-1.0, 1.0)).unwrap();
        let eps = Epsilon::new(8.0).unwrap().internal();
        let adv = pgd_attack(&m, &x, eps, 40, eps / 10.0, goal).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= eps);
            assert!((-1.0..=1.0).contains(a));
        }
        let d = diff_distribution(&x, &adv, None, eps).unwrap();
        assert_eq!(d.exceed_fraction, 0.0);
        assert!(d.max_abs <= eps);
    }
    let x = ImageTensor::filled(3, 8, 8, 0.3).unwrap();
    assert_eq!(pgd_attack(&m, &x, 0.1, 0, 0.01, goal).unwrap(), x);
    let stub = BlackBoxStub { inner: std::sync::Arc::new(m) };
    assert!(pgd_attack(&stub, &x, 0.1, 1, 0.01, goal).is_err());
}

#[test]
fn patch_diffs_stay_inside_the_region() {
    let x = shape_image(2, 2, 32).0;
    let r = PatchRegion::new(5, 9, 8, 8);
    let p = checkerboard_patch(3, 8, 8, 2);
    let d = diff_distribution(&x, &apply_patch(&x, &p, &r).unwrap(), Some(&r), 16.0 / 255.0).unwrap();
    assert_eq!(d.max_abs_outside, Some(0.0));
    assert_eq!(d.elements, 3 * 64);
    assert_eq!(d.counts.iter().sum::<u64>(), 3 * 64);
    assert!(d.exceed_fraction > 0.0);
}

#[test]
fn checkerboard_is_more_conspicuous_than_the_original_content() {
    let x = shape_image(4, 7, 32).0;
    let r = PatchRegion::new(12, 12, 8, 8);
    let base = conspicuousness_ratio(&apply_patch(&x, &checkerboard_patch(3, 8, 8, 2), &r).unwrap(), &r).unwrap();
    let flat = conspicuousness_ratio(&apply_patch(&x, &ImageTensor::filled(3, 8, 8, 0.0).unwrap(), &r).unwrap(), &r).unwrap();
    assert!(base.ratio > 1.0 && base.ratio > flat.ratio);
}

fn small_run() -> (ImageTensor, LinearProbe, stealthpatch_core::trainer::TrainOutcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = LinearProbe::new("probe", (3, 16, 16), Tensor::randn(&[3, 768], 0.05, &mut rng), Tensor::zeros(&[3])).unwrap();
    let x = ImageTensor::from_fn(3, 16, 16, |c, y, xx| ((c * 5 + y * 2 + xx * 3) % 11) as f64 / 5.5 - 1.0).unwrap();
    let cfg = TrainConfig {
        epochs_per_scale: 2,
        k: 1,
        patch_h: 6,
        patch_w: 6,
        net: NetConfig { base_channels: 4, generator_blocks: 2, critic_blocks: 2 },
        ..Default::default()
    };
    let out = train_all(&x, &m, &cfg, None, &mut Quiet).unwrap();
    (x, m, out)
}

#[test]
fn report_schema_and_reproducibility() {
    let (x, m, out) = small_run();
    let cfg = EvalConfig { samples: 6, seed: 3, pgd: PgdConfig { steps: 3, ..Default::default() }, ..Default::default() };
    let eval = |name: &str| evaluate_image(name, &out.stack, &[&m, &m], &x, &out.plan.region, out.plan.goal, &cfg).unwrap();
    let report = AttackReport::new("run", &out.stack.config_hash, &cfg, vec![eval("a")]).unwrap();
    let again = AttackReport::new("run", &out.stack.config_hash, &cfg, vec![eval("a")]).unwrap();
    assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());

    let csv_text = report.to_csv().unwrap();
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, REPORT_COLUMNS);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][2], "white-box");
    assert_eq!(&rows[1][2], "transfer");
    // Identical models see identical patches.
    assert_eq!(report.images[0].rates[0].successes, report.images[0].rates[1].successes);
    assert_eq!(report.epsilon_internal, 16.0 / 255.0);
    assert_eq!(report.images[0].patch_diff.max_abs_outside, Some(0.0));
    let pgd = report.images[0].pgd_diff.as_ref().unwrap();
    assert!(pgd.max_abs <= report.epsilon_internal);

    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();
    let back: AttackReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn transfer_to_the_surrogate_equals_the_success_rate() {
    let (x, m, out) = small_run();
    let r = &out.plan.region;
    let rate = success_rate(&out.stack, &m, &x, r, 12, 5, out.plan.goal).unwrap();
    let rates = transfer_matrix(&out.stack, &[&m], &x, r, 12, 5, out.plan.goal).unwrap();
    assert_eq!(rates[0].rate, Some(rate));
    let clean = predict(&m, &x).unwrap().top_class;
    let wrong = AttackGoal { true_class: (clean + 1) % 3, target: None };
    assert!(success_rate(&out.stack, &m, &x, r, 12, 5, wrong).is_err());
}

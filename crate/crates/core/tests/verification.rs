//! Structural checks: duality, sign constraint, GDFI degeneracy, gradients
//! and parameter counts.

use mgnetlab::verify::*;
use mgnetlab::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(text: &str) -> ModelSpec {
    parse_model_spec(text).unwrap()
}

#[test]
fn duality_on_two_grids() {
    let r = check_duality(&spec("MgNet[2,2]-[8]-Bl"), 7).unwrap();
    assert!(r.passed(), "{r}");
    assert!(r.metric <= 1e-10);
}

#[test]
fn duality_with_per_iteration_smoothers_on_four_grids() {
    let r = check_duality(&spec("MgNet[2,2,2,2]-[16]-Bli"), 3).unwrap();
    assert!(r.metric <= 1e-10, "{r}");
}

#[test]
fn duality_over_a_random_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut sharings = [0usize; 2];
    for seed in 0..24 {
        let s = random_mgnet_spec(&mut rng);
        sharings[usize::from(s.b_sharing == Sharing::PerIteration)] += 1;
        let r = check_duality(&s, seed).unwrap();
        assert!(r.metric <= 1e-10, "{r}");
    }
    assert!(sharings.iter().all(|&n| n > 0));
}

#[test]
fn duality_rejects_other_families() {
    assert!(matches!(check_duality(&spec("ResNet[2,2]-[8]-Al-Bl"), 1), Err(Error::Config(_))));
}

#[test]
fn positivity_over_one_hundred_trials() {
    let r = check_positivity(&spec("MgNet[2,2]-[8]-Bl"), 11, 100).unwrap();
    assert_eq!(r.metric, 0.0, "{r}");
    assert!(r.details[0].starts_with("100 trials"));
}

#[test]
fn positivity_on_per_iteration_deep_specs() {
    let r = check_positivity(&spec("MgNet[3,2,1]-[(4,6),(5,3),(2,2)]-Bli"), 12, 30).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn gdfi_degenerate_pair_matches_mgnet() {
    for seed in [1, 2, 3] {
        let r = check_gdfi_degeneracy(&spec("GDFI[2,2]-[8]-Bl-A:K-B:sKs"), seed).unwrap();
        assert!(r.metric <= 1e-10, "{r}");
    }
}

#[test]
fn gdfi_other_pairs_depart_from_mgnet() {
    let s = spec("GDFI[2,2]-[8]-Bl-A:K-B:sKs");
    let r = check_gdfi_negative_control(&s, 4).unwrap();
    assert!(r.passed(), "{r}");
    // Activation before A alone is enough to break the match.
    let sk = spec("GDFI[2,2]-[8]-Bl-A:sK-B:sKs");
    let mut g: ModelGraph<f64> = ModelGraph::new(&sk, BuildOptions::plain()).unwrap();
    kaiming_init(&mut g, 5);
    let x = normal_tensor([2, 3, 16, 16], &mut ChaCha8Rng::seed_from_u64(6));
    assert!(gdfi_mgnet_difference(&g, &x, Mode::Infer).unwrap() > 1e-6);
}

#[test]
fn gdfi_degeneracy_needs_the_degenerate_forms() {
    assert!(matches!(check_gdfi_degeneracy(&spec("GDFI[2,2]-[8]-Bl-A:sK-B:sKs"), 1), Err(Error::Config(_))));
    assert!(matches!(check_gdfi_degeneracy(&spec("MgNet[2,2]-[8]-Bl"), 1), Err(Error::Config(_))));
}

#[test]
fn gradients_of_small_specs() {
    for text in ["MgNet[1,1]-[4]-Bl", "PreactResNet[1,1]-[4]-Ali-Bli"] {
        let r = gradient_check(&spec(text), 5, GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{r}\n{}", r.details.join("\n"));
        assert!(r.metric <= 1e-6);
    }
}

#[test]
fn shared_site_is_checked_first_with_the_untied_sum() {
    let r = gradient_check(&spec("ResNet[2,2]-[4]-Al-Bl"), 8, GradCheckOptions::default()).unwrap();
    assert!(r.passed(), "{r}");
    assert!(r.details.iter().any(|d| d.starts_with("shared kernels vs sum over untied copies")));
    assert_eq!(r.details.iter().filter(|d| d.contains("analytic=")).count(), 20);
}

#[test]
fn every_family_and_sharing_has_a_gradient_spec() {
    let specs = gradient_check_specs();
    for family in [Family::MgNet, Family::Gdfi, Family::ResNet, Family::PreactResNet] {
        for b in [Sharing::PerLevel, Sharing::PerIteration] {
            assert!(specs.iter().any(|s| s.family == family && s.b_sharing == b), "{family:?} {b:?}");
        }
    }
}

#[test]
fn zero_gradients_agree() {
    assert_eq!(relative_error(0.0, 0.0, 0.0), 0.0);
    assert_eq!(relative_error(0.0, 0.0, 1e-3), 0.0);
    assert!((relative_error(1.0, 1.0 + 1e-7, 1e-3) - 1e-7).abs() < 1e-12);
}

fn row<'a>(rows: &'a [TableRow], table: &str, text: &str) -> &'a TableRow {
    rows.iter().find(|r| r.table == table && r.spec == text).unwrap_or_else(|| panic!("{table} {text}"))
}

/// Published counts quoted from the paper, in millions.
#[test]
fn published_counts_are_listed_verbatim() {
    let rows = param_table_rows().unwrap();
    let want = [
        ("2", "ResNet[2,2,2,2]-[64,128,256,512]-Ali-Bli", 11.0),
        ("2", "ResNet[2,2,2,2]-[64,128,256,512]-Al-Bli", 8.0),
        ("3", "ResNet[2,2,2,2]-[64,128,256,512]-Al-Bli", 8.1),
        ("3", "ResNet[2,2,2,2]-[64,128,256,512]-Ali-Bl", 9.7),
        ("3", "ResNet[2,2,2,2]-[64,128,256,512]-Al-Bl", 6.6),
        ("3", "ResNet[3,4,6,3]-[64,128,256,512]-Ali-Bli", 21.0),
        ("3", "ResNet[3,4,6,3]-[64,128,256,512]-Al-Bli", 13.0),
        ("3", "ResNet[3,4,6,3]-[64,128,256,512]-Ali-Bl", 15.0),
        ("3", "ResNet[3,4,6,3]-[64,128,256,512]-Al-Bl", 6.7),
        ("5", "MgNet[2,2,2,2]-[256]-Bl", 8.3),
        ("5", "MgNet[2,2,2,2]-[512]-Bl", 33.1),
        ("5", "MgNet[2,2,2,2]-[1024]-Bl", 132.2),
        ("6", "MgNet[2,2,2,2]-[64,128,256,512]-Bl", 9.9),
        ("6", "MgNet[2,2,2,2]-[128,256,512,1024]-Bl", 38.5),
        ("7", "MgNet[2,2,2,2]-[256]-Bli", 10.7),
    ];
    for (table, text, m) in want {
        let r = row(&rows, table, text);
        assert_eq!(r.published_millions, m, "{table} {text}");
        assert!(r.gated, "{table} {text}");
    }
    assert_eq!(rows.iter().filter(|r| r.gated).count(), want.len() + 2);
}

#[test]
fn mgnet_counts_within_two_percent() {
    let rows = param_table_rows().unwrap();
    for r in rows.iter().filter(|r| r.gated && r.spec.starts_with("MgNet")) {
        assert!(r.within(TABLE_TOLERANCE), "{} {}: {} vs {}M", r.table, r.spec, r.computed, r.published_millions);
    }
    let imagenet = row(&rows, "6", "MgNet[2,2,2,2]-[64,128,256,512]-Bl");
    assert_eq!(imagenet.stem, Stem::Imagenet);
    assert_eq!(imagenet.classes, 1000);
}

#[test]
fn resnet_counts_with_untied_smoothers_within_two_percent() {
    let rows = param_table_rows().unwrap();
    for r in rows.iter().filter(|r| r.gated && r.spec.starts_with("ResNet") && r.spec.ends_with("-Bli")) {
        assert!(r.within(TABLE_TOLERANCE), "{} {}: {} vs {}M", r.table, r.spec, r.computed, r.published_millions);
    }
}

/// Counting is load-bearing for the misses: hand-summed kernel totals for
/// the shared-smoother ResNet18 rows.
#[test]
fn shared_smoother_resnet18_counts_by_hand() {
    let rows = param_table_rows().unwrap();
    let widths = [64usize, 128, 256, 512];
    let conv = |ci: usize, co: usize, k: usize| ci * co * k * k;
    let norm = |c: usize| 2 * c;
    // Stem, head (100 classes).
    let fixed = conv(3, 64, 3) + norm(64) + 512 * 100 + 100;
    // Level 1: one shared A, one shared B, both 3x3 with norms.
    let mut total = fixed + 2 * (conv(64, 64, 3) + norm(64));
    for l in 1..4 {
        let (ci, c) = (widths[l - 1], widths[l]);
        // Projection R (1x1), stride-2 B0, shared A and shared B.
        total += conv(ci, c, 1) + norm(c) + conv(ci, c, 3) + norm(c) + 2 * (conv(c, c, 3) + norm(c));
    }
    assert_eq!(row(&rows, "3", "ResNet[2,2,2,2]-[64,128,256,512]-Al-Bl").computed, total);
}

#[test]
fn counts_do_not_depend_on_smoothing_steps() {
    let counts = nu_invariance_counts(&[2, 4, 8, 16, 32]).unwrap();
    assert!(counts.windows(2).all(|w| w[0].1 == w[1].1), "{counts:?}");
    assert!(check_nu_invariance().unwrap().passed());
    let published = 8.3e6;
    assert!((counts[0].1 as f64 - published).abs() / published <= TABLE_TOLERANCE);
}

#[test]
fn suites_parse() {
    for (s, v) in [("duality", Suite::Duality), ("positivity", Suite::Positivity), ("gdfi", Suite::Gdfi), ("grad", Suite::Grad), ("tables", Suite::Tables), ("all", Suite::All)] {
        assert_eq!(s.parse::<Suite>().unwrap(), v);
    }
    assert!("nope".parse::<Suite>().is_err());
}

#[test]
fn reports_serialize_one_record_per_line() {
    let r = check_duality(&spec("MgNet[1]-[4]-Bl"), 2).unwrap();
    let line = r.to_json_line();
    assert!(!line.contains('\n'));
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["check"], "duality");
    assert_eq!(v["status"], "pass");
    assert_eq!(v["fingerprint"]["spec"], "MgNet[1]-[4]-Bl");
    assert_eq!(v["fingerprint"]["seed"], 2);
    assert!(v["metric"].is_number());
}

proptest! {
    #[test]
    fn status_follows_the_bound(metric in 0.0f64..2.0, tol in 0.0f64..2.0) {
        let fp = Fingerprint { spec: "x".into(), seed: 0, precision: Precision::Double };
        let r = VerificationReport::new("c", metric, Bound::AtMost(tol), fp.clone());
        prop_assert_eq!(r.passed(), metric <= tol);
        let r = VerificationReport::new("c", metric, Bound::AtLeast(tol), fp);
        prop_assert_eq!(r.passed(), metric >= tol);
    }
}

use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scseg_core::eval_stats::{
    aggregate_report, box_stats, dice, imbalance_stats, make_folds, mean_std, rand_disagreements, rand_error,
    regional_slices, wilcoxon_signed_rank, MetricRecord, Pairing, Region, Significance,
};
use scseg_core::{Error, Mask, Plane};

fn mask(h: usize, w: usize, bits: &[u8]) -> Mask {
    Plane::new(h, w, bits.to_vec()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Plane::from_fn(h, w, |_, _| u8::from(rng.gen_bool(p)))
}

/// Disagreeing pairs by enumerating every unordered pixel pair.
fn brute_force_rand(a: &Mask, b: &Mask) -> (u128, u128) {
    let n = a.len();
    let (mut bad, mut total) = (0u128, 0u128);
    for i in 0..n {
        for j in i + 1..n {
            let same_a = a.data[i] == a.data[j];
            let same_b = b.data[i] == b.data[j];
            bad += u128::from(same_a != same_b);
            total += 1;
        }
    }
    (bad, total)
}

/// Dice from explicit pixel index sets.
fn set_dice(a: &Mask, b: &Mask) -> f64 {
    let sa: HashSet<usize> = (0..a.len()).filter(|&i| a.data[i] != 0).collect();
    let sb: HashSet<usize> = (0..b.len()).filter(|&i| b.data[i] != 0).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Two-sided p by enumerating all 2^n sign assignments, counting those at
/// least as far from the null centre as the observed statistic.
fn brute_force_wilcoxon(diffs: &[f64]) -> f64 {
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&x| {
            let below = abs.iter().filter(|&&y| y < x).count() as f64;
            let equal = abs.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let observed: f64 = ranks.iter().zip(diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let dist = (observed - total / 2.0).abs();
    let mut extreme = 0u64;
    for signs in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (w - total / 2.0).abs() >= dist - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}

#[test]
fn dice_examples() {
    let a = mask(2, 2, &[1, 1, 0, 0]);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &mask(2, 2, &[0, 0, 1, 1])).unwrap(), 0.0);
    assert_eq!(dice(&a, &mask(2, 2, &[0, 1, 1, 0])).unwrap(), 0.5);
    let empty = mask(2, 2, &[0; 4]);
    assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    assert!(dice(&a, &mask(1, 4, &[1, 1, 0, 0])).is_err());
}

#[test]
fn rand_error_examples() {
    let a = mask(2, 2, &[1, 0, 0, 1]);
    assert_eq!(rand_error(&a, &a).unwrap(), 0.0);
    assert_eq!(rand_error(&mask(1, 2, &[1, 1]), &mask(1, 2, &[1, 0])).unwrap(), 1.0);
    assert_eq!(rand_error(&mask(1, 2, &[0, 1]), &mask(1, 2, &[1, 0])).unwrap(), 0.0);
    assert!(rand_error(&mask(1, 1, &[1]), &mask(1, 1, &[1])).is_err());
}

#[test]
fn metrics_match_oracles_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let p = [0.05, 0.3, 0.5, 0.9][i % 4];
        let a = random_mask(&mut rng, 8, 8, p);
        let b = random_mask(&mut rng, 8, 8, p);
        assert_eq!(rand_disagreements(&a, &b).unwrap(), brute_force_rand(&a, &b));
        let (bad, total) = brute_force_rand(&a, &b);
        assert_eq!(rand_error(&a, &b).unwrap(), bad as f64 / total as f64);
        assert_eq!(dice(&a, &b).unwrap(), set_dice(&a, &b));
    }
}

#[test]
fn imbalance_examples() {
    let mut m = Plane::filled(10, 10, 0u8);
    for i in 0..20 {
        m.data[i] = 1;
    }
    let s = imbalance_stats([&m]).unwrap();
    assert_eq!(s.bg_fg_ratio, 4.0);
    assert_eq!(s.fg_percent_mean, 20.0);
    let full = Plane::filled(4, 4, 1u8);
    let s = imbalance_stats([&full]).unwrap();
    assert_eq!((s.bg_fg_ratio, s.fg_percent_mean), (0.0, 100.0));
    let empty = Plane::filled(4, 4, 0u8);
    let s = imbalance_stats([&m, &empty]).unwrap();
    assert_eq!(s.empty_slices, 1);
    assert_eq!(s.fg_percent_mean, 20.0);
    assert!(imbalance_stats([&empty]).is_err());
}

#[test]
fn regional_examples() {
    let vol = |on: &[usize], n: usize| -> Vec<Mask> {
        (0..n).map(|i| Plane::filled(2, 2, u8::from(on.contains(&i)))).collect()
    };
    let r = regional_slices(&vol(&[3, 4, 5, 6, 7, 8, 9], 12)).unwrap();
    assert_eq!((r.apex, r.mid, r.base), (3, 6, 9));
    let r = regional_slices(&vol(&[5], 8)).unwrap();
    assert_eq!((r.apex, r.mid, r.base), (5, 5, 5));
    let r = regional_slices(&vol(&[0, 1], 3)).unwrap();
    assert_eq!((r.apex, r.mid, r.base), (0, 0, 1));
    assert!(regional_slices(&vol(&[], 3)).is_err());
}

#[test]
fn fold_plan_partitions_patients() {
    let patients: Vec<String> = (0..30).map(|i| format!("p{i:02}")).collect();
    let plan = make_folds(&patients, 5, 11).unwrap();
    let mut seen = HashSet::new();
    for f in &plan.folds {
        assert_eq!(f.test.len(), 6);
        assert_eq!(f.train.len(), 24);
        for p in &f.test {
            assert!(seen.insert(p.clone()));
            assert!(!f.train.contains(p));
        }
    }
    assert_eq!(seen.len(), 30);
    assert_eq!(plan, make_folds(&patients, 5, 11).unwrap());
    let mut shuffled = patients.clone();
    shuffled.reverse();
    assert_eq!(plan, make_folds(&shuffled, 5, 11).unwrap());
    assert_ne!(plan.id, make_folds(&patients, 5, 12).unwrap().id);

    let sizes: Vec<usize> = make_folds(&patients[..22], 5, 1).unwrap().folds.iter().map(|f| f.test.len()).collect();
    assert_eq!(sizes.iter().sum::<usize>(), 22);
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    assert!(make_folds(&patients[..4], 5, 1).is_err());
}

#[test]
fn wilcoxon_examples() {
    let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
    assert_eq!(r.w_plus, 15.0);
    assert_eq!(r.p, 0.0625);
    assert!(r.exact);
    assert_eq!(wilcoxon_signed_rank(&[0.3], &[0.1]).unwrap().p, 1.0);
    assert!(matches!(wilcoxon_signed_rank(&[0.5, 0.7], &[0.5, 0.7]), Err(Error::Degenerate(_))));
}

#[test]
fn wilcoxon_exact_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 1..=12 {
        for trial in 0..20 {
            // Coarse values on later trials force tied magnitudes.
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = if trial % 2 == 0 {
                        rng.gen_range(-1.0..1.0)
                    } else {
                        rng.gen_range(-3i32..=3) as f64
                    };
                    if v == 0.0 { 1.0 } else { v }
                })
                .collect();
            let got = wilcoxon_signed_rank(&diffs, &vec![0.0; n]).unwrap();
            let want = brute_force_wilcoxon(&diffs);
            assert!((got.p - want).abs() < 1e-12, "n={n} {diffs:?}: {} vs {want}", got.p);
        }
    }
}

#[test]
fn wilcoxon_normal_approximation_is_close_to_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
    let b: Vec<f64> = a.iter().map(|x| x - 0.15 + rng.gen_range(-0.3..0.3)).collect();
    let approx = wilcoxon_signed_rank(&a, &b).unwrap();
    assert!(!approx.exact);
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    // 2^20 enumeration on the first 20 pairs alongside the exact path.
    let exact20 = wilcoxon_signed_rank(&a[..20], &b[..20]).unwrap().p;
    assert!((exact20 - brute_force_wilcoxon(&diffs[..20])).abs() < 1e-12);
    assert!(approx.p > 0.0 && approx.p <= 1.0);
}

fn record(arch: &str, method: &str, fold: usize, patient: &str, slice: usize, dice: f64) -> MetricRecord {
    MetricRecord {
        architecture: arch.into(),
        method: method.into(),
        fold,
        patient: patient.into(),
        slice,
        region: Region::All,
        dice,
        rand_error: 1.0 - dice,
    }
}

#[test]
fn aggregate_mean_and_sample_std_over_folds() {
    let patients = vec!["a".to_string(), "b".to_string()];
    let plan = make_folds(&patients, 2, 0).unwrap();
    let mut records = Vec::new();
    for (fold, f) in plan.folds.iter().enumerate() {
        let d = [0.6, 0.8][fold];
        for s in 0..3 {
            records.push(record("unet", "center", fold, &f.test[0], s, d));
            records.push(record("unet", "smart", fold, &f.test[0], s, d + 0.05 + 0.01 * s as f64));
        }
    }
    let mut apex = record("unet", "center", 0, &plan.folds[0].test[0], 0, 0.6);
    apex.region = Region::Apex;
    records.push(apex.clone());
    apex.method = "smart".into();
    apex.dice = 0.7;
    records.push(apex);

    let methods = vec!["center".to_string(), "smart".to_string()];
    let report = aggregate_report(&records, &plan, &["unet".into()], &methods, Pairing::Slice).unwrap();
    let c = report.cell("unet", "center").unwrap();
    assert!((c.dice.mean - 0.7).abs() < 1e-15);
    assert!((c.dice.std - 0.02f64.sqrt()).abs() < 1e-12);
    assert_eq!(report.comparisons.len(), 1);
    assert_eq!(report.comparisons[0].pairs, 6);
    assert!(matches!(report.comparisons[0].dice_p, Significance::P(p) if p > 0.0 && p < 0.05));
    assert_eq!(report.regional.len(), 2);
    let csv = report.table_csv();
    assert!(csv.starts_with("architecture,dice_center,dice_smart,dice_p_center_vs_smart,rand_error_center,"));

    // Identical methods: zero spread and no detectable difference.
    let same: Vec<MetricRecord> = records
        .iter()
        .filter(|r| r.method == "center")
        .flat_map(|r| {
            let mut s = r.clone();
            s.method = "smart".into();
            [r.clone(), s]
        })
        .collect();
    let flat: Vec<MetricRecord> = same.into_iter().map(|mut r| { r.dice = 0.5; r }).collect();
    let report = aggregate_report(&flat, &plan, &["unet".into()], &methods, Pairing::Patient).unwrap();
    assert_eq!(report.cell("unet", "smart").unwrap().dice.std, 0.0);
    assert_eq!(report.comparisons[0].dice_p, Significance::NoDifference);

    let partial: Vec<MetricRecord> = records.iter().filter(|r| r.fold == 0).cloned().collect();
    let err = aggregate_report(&partial, &plan, &["unet".into()], &methods, Pairing::Slice).unwrap_err();
    assert!(err.to_string().contains("fold 1"), "{err}");
}

#[test]
fn two_fold_std_example() {
    let (m, s) = mean_std(&[0.6, 0.8]);
    assert!((m - 0.7).abs() < 1e-15);
    assert!((s - 0.141_421_356_237_309_5).abs() < 1e-12);
}

#[test]
fn box_stats_quartiles_and_outliers() {
    let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 5.0, 100.0]).unwrap();
    assert_eq!((b.min, b.max, b.median), (1.0, 100.0, 3.5));
    assert_eq!((b.q1, b.q3), (2.25, 4.75));
    assert_eq!(b.outliers, vec![100.0]);
    assert_eq!((b.whisker_low, b.whisker_high), (1.0, 5.0));
    assert!(box_stats(&[]).is_err());
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(&mut rng, 6, 7, 0.4);
        let b = random_mask(&mut rng, 6, 7, 0.4);
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        if a.count_foreground() > 0 {
            prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn rand_error_is_label_swap_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(&mut rng, 5, 9, 0.3);
        let b = random_mask(&mut rng, 5, 9, 0.6);
        let flipped = a.map(|v| 1 - v);
        let e = rand_error(&a, &b).unwrap();
        prop_assert_eq!(e, rand_error(&flipped, &b).unwrap());
        prop_assert_eq!(rand_error(&a, &a).unwrap(), 0.0);
        prop_assert!((0.0..=1.0).contains(&e));
    }
}

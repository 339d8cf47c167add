use super::*;
use crate::oracle;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use std::io::Write;

fn planted(groups: usize, noise: f64) -> PlantedTask {
    PlantedTask {
        n_classes: 3,
        d_in: 6,
        n_groups: groups,
        class_sep: 4.0,
        group_sep: 6.0,
        noise,
        label_rotation: false,
        samples_per_client: 40,
    }
}

#[test]
fn zero_noise_samples_sit_on_their_means() {
    let spec = TaskSpec::planted(&planted(2, 0.0), RngStream::new(1, 0)).unwrap();
    let data = gen_task(&spec, 12, RngStream::new(2, 0)).unwrap();
    for i in 0..data.batch.len() {
        let g = data.groups[i];
        let y = data.batch.labels[i];
        for (d, x) in data.batch.features.row(i).iter().enumerate() {
            let shift = spec.group_shift.as_ref().map_or(0.0, |s| s[g][d]);
            assert_eq!(*x, spec.class_means[y][d] + shift);
        }
    }
}

#[test]
fn separated_classes_are_nearly_bayes_perfect() {
    let mut cfg = planted(1, 0.3);
    cfg.n_classes = 2;
    cfg.class_sep = 10.0;
    let spec = TaskSpec::planted(&cfg, RngStream::new(3, 0)).unwrap();
    let data = gen_task(&spec, 400, RngStream::new(4, 0)).unwrap();
    let rows: Vec<Vec<f64>> = (0..data.batch.len()).map(|i| data.batch.features.row(i).to_vec()).collect();
    let acc = oracle::nearest_mean_accuracy(&rows, &data.batch.labels, &spec.class_means);
    assert!(acc >= 0.995, "{acc}");
}

#[test]
fn generation_is_deterministic() {
    let spec = TaskSpec::planted(&planted(3, 1.0), RngStream::new(5, 0)).unwrap();
    let a = gen_task(&spec, 30, RngStream::new(6, 0)).unwrap();
    let b = gen_task(&spec, 30, RngStream::new(6, 0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(spec, TaskSpec::planted(&planted(3, 1.0), RngStream::new(5, 0)).unwrap());
}

#[test]
fn duplicate_means_are_rejected() {
    let mut spec = TaskSpec::planted(&planted(1, 1.0), RngStream::new(5, 0)).unwrap();
    spec.class_means[1] = spec.class_means[0].clone();
    assert!(matches!(gen_task(&spec, 10, RngStream::new(0, 0)), Err(Error::Parameter(_))));
}

#[test]
fn group_shifts_are_equidistant() {
    let spec = TaskSpec::planted(&planted(3, 0.5), RngStream::new(7, 0)).unwrap();
    let s = spec.group_shift.unwrap();
    for i in 0..3 {
        for j in 0..i {
            let d: f64 = s[i].iter().zip(&s[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!((d - 3.0).abs() < 1e-9, "{d}");
        }
    }
}

#[test]
fn label_rotation_changes_observed_labels() {
    let mut cfg = planted(3, 1.0);
    cfg.label_rotation = true;
    let spec = TaskSpec::planted(&cfg, RngStream::new(1, 0)).unwrap();
    assert_eq!(spec.observed_label(2, 1), 0);
    assert_eq!(spec.observed_label(1, 0), 1);
}

fn labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

#[test]
fn huge_alpha_matches_global_histogram() {
    let y = labels(4000, 4);
    let (plan, _) = dirichlet_partition(&y, 4, 5, 1e6, MIN_SHARD, RngStream::new(1, 0)).unwrap();
    for c in 0..5 {
        for j in 0..4 {
            assert!((plan.proportions.get(c, j) - 0.25).abs() <= 0.02);
        }
    }
}

fn mean_tv(plan: &PartitionPlan, global: &[f64]) -> f64 {
    let k = plan.proportions.rows();
    (0..k)
        .map(|c| 0.5 * plan.proportions.row(c).iter().zip(global).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .sum::<f64>()
        / k as f64
}

#[test]
fn smaller_alpha_is_more_heterogeneous() {
    let y = labels(1200, 4);
    let global = [0.25; 4];
    let (mut low, mut high) = (0.0, 0.0);
    for seed in 0..20 {
        let (p1, _) = dirichlet_partition(&y, 4, 10, 1.0, MIN_SHARD, RngStream::new(seed, 1)).unwrap();
        let (p50, _) = dirichlet_partition(&y, 4, 10, 50.0, MIN_SHARD, RngStream::new(seed, 1)).unwrap();
        low += mean_tv(&p1, &global);
        high += mean_tv(&p50, &global);
    }
    assert!(low > high, "α=1 tv {low} vs α=50 tv {high}");
}

#[test]
fn single_client_gets_everything() {
    let y = labels(50, 3);
    let (plan, shards) = dirichlet_partition(&y, 3, 1, 0.5, MIN_SHARD, RngStream::new(1, 0)).unwrap();
    assert_eq!(shards[0], (0..50).collect::<Vec<_>>());
    assert_eq!(plan.counts, vec![50]);
}

#[test]
fn impossible_shards_exhaust_retries() {
    let y = labels(80, 4);
    let err = dirichlet_partition(&y, 4, 10, 0.01, MIN_SHARD, RngStream::new(1, 0));
    assert!(matches!(err, Err(Error::Parameter(msg)) if msg.contains("larger α")));
}

fn mean_row_entropy(plan: &PartitionPlan) -> f64 {
    let k = plan.proportions.rows();
    (0..k)
        .map(|c| -plan.proportions.row(c).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / k as f64
}

/// One-sided Mann-Whitney p-value for `hi` stochastically larger than `lo`,
/// normal approximation with the continuity correction.
fn mann_whitney_greater(hi: &[f64], lo: &[f64]) -> f64 {
    let mut u = 0.0;
    for a in hi {
        for b in lo {
            u += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    let (n1, n2) = (hi.len() as f64, lo.len() as f64);
    let mean = n1 * n2 / 2.0;
    let sd = (n1 * n2 * (n1 + n2 + 1.0) / 12.0).sqrt();
    1.0 - Normal::new(0.0, 1.0).unwrap().cdf((u - mean - 0.5) / sd)
}

#[test]
fn label_entropy_grows_with_alpha() {
    let y = labels(1200, 4);
    let entropies: Vec<Vec<f64>> = [0.5, 5.0, 50.0]
        .iter()
        .map(|&alpha| {
            (0..20)
                .map(|seed| {
                    let (p, _) = dirichlet_partition(&y, 4, 10, alpha, MIN_SHARD, RngStream::new(seed, 2)).unwrap();
                    mean_row_entropy(&p)
                })
                .collect()
        })
        .collect();
    assert!(mann_whitney_greater(&entropies[1], &entropies[0]) < 0.05);
    assert!(mann_whitney_greater(&entropies[2], &entropies[1]) < 0.05);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn partition_is_complete_and_disjoint(
        n in 80usize..300, classes in 2usize..5, k in 1usize..8, alpha in 0.5f64..20.0, seed in any::<u64>()
    ) {
        let y = labels(n, classes);
        let (plan, shards) = dirichlet_partition(&y, classes, k, alpha, MIN_SHARD, RngStream::new(seed, 0)).unwrap();
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for c in 0..k {
            prop_assert!(plan.counts[c] >= MIN_SHARD);
            prop_assert!((plan.proportions.row(c).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let (_, again) = dirichlet_partition(&y, classes, k, alpha, MIN_SHARD, RngStream::new(seed, 0)).unwrap();
        prop_assert_eq!(shards, again);
    }
}

#[test]
fn federate_assigns_groups_round_robin() {
    let spec = TaskSpec::planted(&planted(3, 1.0), RngStream::new(1, 0)).unwrap();
    let data = gen_task(&spec, 200, RngStream::new(2, 0)).unwrap();
    let clients = federate(&data, 9, 5.0, 0.2, RngStream::new(3, 0)).unwrap();
    assert_eq!(clients.len(), 9);
    let mut total = 0;
    for c in &clients {
        assert_eq!(c.group, c.client_id % 3);
        let n = c.train.len() + c.val.len();
        assert_eq!(c.val.len(), ((0.2 * n as f64).round() as usize).max(1));
        total += n;
    }
    assert_eq!(total, 600);
}

fn write_file(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
    let path = dir.path().join("data.csv");
    std::fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
    path
}

#[test]
fn three_row_csv_parses_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "a,kind,b\n1,cat,10\n2,dog,10\n3,cat,10\n");
    let data = load_csv(&path, "kind").unwrap();
    let z = (1.5f64).sqrt();
    assert_eq!(data.batch.labels, vec![0, 1, 0]);
    assert_eq!(data.n_classes, 2);
    let expect = [-z, 0.0, 0.0, 0.0, z, 0.0];
    for (a, e) in data.batch.features.data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-15, "{a} vs {e}");
    }
}

#[test]
fn csv_errors_carry_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "a,label\n1,x\nfoo,y\n");
    match load_csv(&path, "label") {
        Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 1)),
        other => panic!("expected parse error, got {other:?}"),
    }
    assert!(matches!(load_csv(&path, "missing"), Err(Error::Parameter(_))));
}

#[test]
fn csv_round_trip() {
    let spec = TaskSpec::planted(&planted(1, 1.0), RngStream::new(9, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rt.csv");
    let data = gen_task(&spec, 30, RngStream::new(9, 1)).unwrap();
    write_csv(&path, &data).unwrap();
    let standardized = load_csv(&path, "label").unwrap();
    write_csv(&path, &standardized).unwrap();
    let again = load_csv(&path, "label").unwrap();
    assert_eq!(again.batch.labels, standardized.batch.labels);
    let diff = again.batch.features.sub(&standardized.batch.features).max_abs();
    assert!(diff < 1e-12, "{diff}");
}

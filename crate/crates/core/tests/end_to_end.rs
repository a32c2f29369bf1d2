use cfl::binning::{assign_bins, quantile_bins, BinLabels};
use cfl::clustering::{adjusted_rand_index, KMeans, Partition};
use cfl::data::{read_csv, Dataset, Role, RoleMap};
use cfl::density::{fit_frequency_table, predict_cond_dist, total_variation};
use cfl::inference::heterogeneity_flags;
use cfl::regularity::{partition_regularity_report, ReportOptions, WeightedBipartiteGraph};
use cfl::scm::{observational_partition, partition_vectors, sample_dataset, Dims, ScmFamily, SyntheticScm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Random model in which states 1 and 3 copy states 0 and 2.
fn two_class_scm(seed: u64) -> SyntheticScm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SyntheticScm::random(Dims::new(2, 4, 3), ScmFamily::Unconstrained, &mut rng)
        .with_duplicated_state(0, 1)
        .unwrap()
        .with_duplicated_state(2, 3)
        .unwrap()
}

fn bin_labels(d: &Dataset, m: usize) -> BinLabels {
    let y = &d.outcome().unwrap().values;
    BinLabels::new(y.iter().map(|&v| v as usize).collect(), m).unwrap()
}

#[test]
fn frequency_table_and_kmeans_recover_the_observational_partition() {
    let separated = (0..).filter(|&s| {
        let scm = two_class_scm(s);
        total_variation(&scm.observational(0).unwrap(), &scm.observational(2).unwrap()) >= 0.2
    });
    for seed in separated.take(5) {
        let scm = two_class_scm(seed);
        let truth = observational_partition(&scm, 1e-9).unwrap();
        assert_eq!(truth.n_classes, 2);
        let d = sample_dataset(&scm, 20_000, seed, None, false).unwrap();
        let est = fit_frequency_table(&d, &bin_labels(&d, 3)).unwrap();
        let cond = predict_cond_dist(&est, &d).unwrap();
        let rows: Vec<&[f64]> = cond.rows().collect();
        let fit = KMeans::new(2, seed).restarts(4).fit(&rows).unwrap();
        let x = d.values("x").unwrap();
        let true_labels: Vec<usize> = x.iter().map(|&v| truth.class_of[v as usize]).collect();
        let ari = adjusted_rand_index(fit.partition.labels(), &true_labels);
        assert!(ari > 0.99, "seed {seed}: ari {ari}");
    }
}

#[test]
fn interventional_samples_follow_the_interventional_distribution() {
    let scm = two_class_scm(7);
    for x in 0..4 {
        let d = sample_dataset(&scm, 40_000, 100 + x as u64, Some(x), false).unwrap();
        let counts = bin_labels(&d, 3).counts();
        let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / d.n() as f64).collect();
        let tv = total_variation(&empirical, &scm.interventional(x));
        assert!(tv < 0.015, "state {x}: tv {tv}");
    }
}

#[test]
fn identical_rows_form_regular_cells() {
    let scm = two_class_scm(3);
    let g = WeightedBipartiteGraph::from_scm(&scm).unwrap();
    let classes = observational_partition(&scm, 1e-9).unwrap();
    let px = Partition::compact(&classes.class_of);
    let py = Partition::compact(&[0, 1, 2]);
    let report = partition_regularity_report(&g, &px, &py, 0.1, ReportOptions::default()).unwrap();
    assert_eq!(report.total_pairs, 6);
    assert_eq!(report.irregular_pairs, 0);
    assert!(report.pairs.iter().all(|p| p.result.worst_deviation < 1e-12));
}

/// Rows for each `(treatment, stratum)` cell drawn from its outcome
/// distribution, followed by a frequency-table fit and k-means.
fn estimated_cells(dists: &[[f64; 3]; 4], k: usize, seed: u64) -> (Dataset, Partition, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut t, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (cell, dist) in dists.iter().enumerate() {
        for _ in 0..3000 {
            t.push((cell / 2) as f64);
            x.push((cell % 2) as f64);
            let u: f64 = rng.random();
            y.push(if u < dist[0] {
                0.0
            } else if u < dist[0] + dist[1] {
                1.0
            } else {
                2.0
            });
        }
    }
    let d = Dataset::new(vec![
        ("t".into(), Role::Treatment, t),
        ("x".into(), Role::Covariate, x),
        ("y".into(), Role::Outcome, y),
    ])
    .unwrap();
    // the estimator sees the treatment as an input alongside the stratum
    let fit_on = d
        .with_column("t_input", Role::Covariate, d.treatment().unwrap().values.clone())
        .unwrap();
    let est = fit_frequency_table(&fit_on, &bin_labels(&d, 3)).unwrap();
    let cond = predict_cond_dist(&est, &fit_on).unwrap();
    let rows: Vec<&[f64]> = cond.rows().collect();
    let p = KMeans::new(k, seed).restarts(4).fit(&rows).unwrap().partition;
    let analytic = partition_vectors(&dists.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 1e-12).class_of;
    (d, p, analytic)
}

#[test]
fn case_two_from_estimated_distributions_matches_analytic_truth() {
    // cells are (control, x0), (control, x1), (treated, x0), (treated, x1)
    let dists = [[0.7, 0.2, 0.1], [0.1, 0.2, 0.7], [0.3, 0.4, 0.3], [0.3, 0.4, 0.3]];
    for seed in 0..5 {
        let (d, p, analytic) = estimated_cells(&dists, 3, seed);
        assert_eq!(analytic, vec![0, 1, 2, 2]);
        let report = heterogeneity_flags(&d, &p, "x", true).unwrap();
        assert_eq!(report.case_two, Some((0.0, 1.0)), "seed {seed}");
        assert_eq!(report.case_one, None);
        assert!(report.heterogeneous);
    }
}

#[test]
fn constant_effect_null_is_rarely_flagged() {
    let mut flagged = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 6000;
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..3u8))).collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * x[i] + 1.0 * t[i] + normal.sample(&mut rng))
            .collect();
        let d = Dataset::new(vec![
            ("x".into(), Role::Covariate, x),
            ("t".into(), Role::Treatment, t.clone()),
            ("y".into(), Role::Outcome, y.clone()),
        ])
        .unwrap();
        let fit_on = d.with_column("t_input", Role::Covariate, t).unwrap();
        let labels = assign_bins(&y, &quantile_bins(&y, 6).unwrap(), false).unwrap();
        let est = fit_frequency_table(&fit_on, &labels).unwrap();
        let cond = predict_cond_dist(&est, &fit_on).unwrap();
        let rows: Vec<&[f64]> = cond.rows().collect();
        let p = KMeans::new(6, seed).restarts(4).fit(&rows).unwrap().partition;
        flagged += usize::from(heterogeneity_flags(&d, &p, "x", true).unwrap().heterogeneous);
    }
    assert!(flagged <= 2, "{flagged} of 20 null runs flagged");
}

#[test]
fn csv_rows_with_missing_analytic_values_are_dropped() {
    let text = "id,age,treat,re78,note\n1,20,1,100.5,a\n2,,0,50,b\n3,30,0,75,\n";
    let roles = RoleMap::new()
        .with("id", Role::Id)
        .with("age", Role::Covariate)
        .with("treat", Role::Treatment)
        .with("re78", Role::Outcome);
    let d = read_csv(text.as_bytes(), &roles).unwrap();
    assert_eq!(d.n(), 2);
    assert_eq!(d.dropped(), 1);
    assert_eq!(d.row_ids(), &[0, 2]);
    assert_eq!(d.values("age").unwrap(), &[20.0, 30.0]);
    assert!(read_csv(text.as_bytes(), &RoleMap::new().with("wage", Role::Outcome)).is_err());
}

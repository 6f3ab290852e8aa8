use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use crtsim::cluster::{estimate_rd_unadjusted, rd_from_adjusted, summarize_adjusted, summarize_clusters, Records};
use crtsim::data::{AnalysisSpec, Arm, ClusterRecord, Link, TrialDataset};
use crtsim::datagen::{builtin_scenario, simulate_trial};
use crtsim::glm::{fit_glm, log_likelihood, score};
use crtsim::mmi::pool;
use crtsim::rng::SeedSpec;

fn dataset_strategy() -> impl Strategy<Value = TrialDataset> {
    let cluster = (prop::collection::vec((prop::option::weighted(0.7, 0u8..=1), -3.0f64..3.0), 1..8), any::<bool>());
    prop::collection::vec(cluster, 2..10).prop_map(|clusters| {
        let n = clusters.len();
        let records = clusters
            .into_iter()
            .enumerate()
            .map(|(j, (rows, _))| {
                let arm = if j < n / 2 { Arm::Control } else { Arm::Intervention };
                let (ys, xs): (Vec<Option<u8>>, Vec<Vec<f64>>) = rows.into_iter().map(|(y, x)| (y, vec![x])).unzip();
                ClusterRecord::new(format!("c{j}"), arm, ys, xs)
            })
            .collect();
        TrialDataset::new(records, vec!["x".into()])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn complete_records_is_idempotent(d in dataset_strategy()) {
        let once = d.complete_records();
        prop_assert_eq!(once.complete_records(), once.clone());
        prop_assert!(!once.has_missing());
        prop_assert_eq!(once.n_individuals(), d.n_individuals() - d.n_missing());
    }

    #[test]
    fn complete_records_commutes_with_permuting_individuals(d in dataset_strategy(), rot in 0usize..7) {
        let rotate = |d: &TrialDataset| {
            let clusters = d.clusters.iter().map(|c| {
                let n = c.len();
                let r = if n == 0 { 0 } else { rot % n };
                let ys: Vec<_> = (0..n).map(|l| c.outcomes[(l + r) % n]).collect();
                let xs: Vec<Vec<f64>> = (0..n).map(|l| c.covariate_row((l + r) % n).to_vec()).collect();
                ClusterRecord::new(c.id.clone(), c.arm, ys, xs)
            }).collect();
            TrialDataset::new(clusters, d.covariate_names.clone())
        };
        let a = d.complete_records();
        let b = rotate(&d).complete_records();
        for (ca, cb) in a.clusters.iter().zip(&b.clusters) {
            let mut ra: Vec<(Option<u8>, u64)> = (0..ca.len()).map(|l| (ca.outcomes[l], ca.covariate_row(l)[0].to_bits())).collect();
            let mut rb: Vec<(Option<u8>, u64)> = (0..cb.len()).map(|l| (cb.outcomes[l], cb.covariate_row(l)[0].to_bits())).collect();
            ra.sort();
            rb.sort();
            prop_assert_eq!(ra, rb);
        }
    }

    #[test]
    fn barnard_rubin_df_never_exceeds_its_bounds(
        draws in prop::collection::vec((-5.0f64..5.0, 0.0001f64..4.0), 2..40),
        nu_com in 1.0f64..500.0,
    ) {
        let p = pool(&draws, nu_com, 0.95).unwrap();
        prop_assert!(p.nu_adj <= nu_com * (1.0 + 1e-12));
        prop_assert!(p.nu_adj <= p.nu * (1.0 + 1e-12));
        prop_assert!(p.nu_adj > 0.0);
        let n = draws.len() as f64;
        prop_assert!((p.total_var - (p.within_var + (1.0 + 1.0 / n) * p.between_var)).abs() < 1e-12 * (1.0 + p.total_var));
        prop_assert_eq!(p.estimate, draws.iter().map(|d| d.0).sum::<f64>() / n);
    }

    #[test]
    fn logistic_score_matches_finite_differences(
        xs in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 12..40),
        beta in prop::collection::vec(-1.0f64..1.0, 3),
        seed in any::<u64>(),
    ) {
        let n = xs.len();
        let x = DMatrix::from_fn(n, 3, |i, j| match j { 0 => 1.0, 1 => xs[i].0, _ => xs[i].1 });
        let y: Vec<f64> = (0..n).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
        let b = DVector::from_vec(beta);
        let g = score(&x, &y, &b, Link::Logit);
        let h = 1e-5;
        for a in 0..3 {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[a] += h;
            bm[a] -= h;
            let fd = (log_likelihood(&x, &y, &bp, Link::Logit) - log_likelihood(&x, &y, &bm, Link::Logit)) / (2.0 * h);
            prop_assert!((g[a] - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{} vs {}", g[a], fd);
        }
    }
}

#[test]
fn logistic_fit_satisfies_score_equations_and_location_invariance() {
    for rep in 0..20 {
        let t = simulate_trial(&builtin_scenario("S1").unwrap().with_design(5, 20), SeedSpec::new(77, rep)).unwrap();
        let design = crtsim::design::build_design(
            &t.full,
            &AnalysisSpec::adjusted(&["x"]),
            true,
            crtsim::design::Rows::Observed,
        )
        .unwrap();
        let fit = fit_glm(&design.x, &design.y, Link::Logit).unwrap();
        let fitted = &design.x * &fit.coefficients;
        let resid = DVector::from_iterator(
            design.y.len(),
            design.y.iter().zip(fitted.iter()).map(|(y, e)| y - 1.0 / (1.0 + (-e).exp())),
        );
        assert!((design.x.transpose() * resid).amax() < 1e-6);

        let mut shifted = design.x.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, 2)] += 3.25;
        }
        let moved = fit_glm(&shifted, &design.y, Link::Logit).unwrap();
        assert!((moved.coefficients[1] - fit.coefficients[1]).abs() < 1e-8);
        assert!((moved.coefficients[2] - fit.coefficients[2]).abs() < 1e-8);
    }
}

/// The adjusted-minus-unadjusted gap equals the arm difference of mean predicted
/// proportions, on full data (common m) and on complete records (per-cluster counts).
#[test]
fn cluster_level_identities_hold_on_random_datasets() {
    let spec = AnalysisSpec::adjusted(&["x"]);
    for rep in 0..100u64 {
        let name = ["S1", "S2", "S3", "S4"][(rep % 4) as usize];
        let cfg = builtin_scenario(name).unwrap().with_design(3 + (rep % 5) as usize, 10 + (rep % 7) as usize * 5);
        let t = simulate_trial(&cfg, SeedSpec::new(500, rep)).unwrap();

        let s = summarize_adjusted(&t.full, &spec, Records::Full).unwrap();
        let u = estimate_rd_unadjusted(&summarize_clusters(&t.full, Records::Full).unwrap(), 0.95).unwrap().estimate;
        let a = rd_from_adjusted(&s, 0.95).unwrap().estimate;
        let (k, m) = (cfg.k as f64, cfg.m as f64);
        let gap: f64 =
            s.iter().map(|c| if c.arm == Arm::Control { 1.0 } else { -1.0 } * c.predicted.unwrap()).sum::<f64>()
                / (m * k);
        assert!((a - (u + gap)).abs() < 1e-10, "full rep {rep}");

        let Ok(s) = summarize_adjusted(&t.incomplete, &spec, Records::Complete) else { continue };
        let u = estimate_rd_unadjusted(&s, 0.95).unwrap().estimate;
        let a = rd_from_adjusted(&s, 0.95).unwrap().estimate;
        let arm_mean = |arm: Arm| {
            let v: Vec<f64> =
                s.iter().filter(|c| c.arm == arm).map(|c| c.predicted.unwrap() / c.observed as f64).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((a - (u + arm_mean(Arm::Control) - arm_mean(Arm::Intervention))).abs() < 1e-10, "cra rep {rep}");
    }
}

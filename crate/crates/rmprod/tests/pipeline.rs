use proptest::prelude::*;

use rmprod::measures::SpectralMeasure;
use rmprod::predict::{lln_moment_fixed_m, EnsembleModel, QuadratureConfig};
use rmprod::simulate::{quantile_spectrum, read_trials_csv, write_trials_csv, Backend, FactorSpec, TrialJob};
use rmprod::stats::estimate_statistic;

fn two_atom() -> SpectralMeasure {
    SpectralMeasure::atomic(&[0.0, 4f64.ln()], &[0.5, 0.5]).unwrap()
}

#[test]
fn fixed_spectrum_second_moment_near_limit() {
    let n = 32;
    let spec = FactorSpec::fixed(quantile_spectrum(&two_atom(), n).unwrap()).unwrap();
    let job = TrialJob { spec, m: 2, backend: Backend::Direct, checkpoints: vec![], seed: 3 };
    let results = job.run(0..60).unwrap();
    let model = EnsembleModel::identical(two_atom(), 2).unwrap();
    let q = QuadratureConfig::default();
    for k in [1, 2] {
        let pred = lln_moment_fixed_m(&model, k, &q).unwrap().value;
        let est = estimate_statistic("lln_fixed_m", k, None, &results).unwrap();
        // Finite-N bias is O(1/N); the first moment is exact.
        let tol = if k == 1 { 1e-10 } else { 0.05 * pred.abs() };
        assert!((est.value - pred).abs() < tol, "k={k}: {} vs {pred}", est.value);
    }
}

#[test]
fn statistics_survive_csv_round_trip() {
    let job = TrialJob { spec: FactorSpec::ginibre(5, 7).unwrap(), m: 4, backend: Backend::Direct, checkpoints: vec![], seed: 11 };
    let results = job.run(0..60).unwrap();
    let mut buf = Vec::new();
    write_trials_csv(&mut buf, 11, &results).unwrap();
    let back = read_trials_csv(buf.as_slice()).unwrap().into_results();
    for (stat, k, l) in [("lln_fixed_m", 2, None), ("cov_fixed_m", 1, Some(2)), ("cov_lyapunov", 2, Some(2))] {
        let a = estimate_statistic(stat, k, l, &results).unwrap();
        let b = estimate_statistic(stat, k, l, &back).unwrap();
        assert!((a.value - b.value).abs() <= 1e-12 * a.value.abs().max(1.0), "{stat}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backends_agree_on_moderate_products(
        lambda in prop::collection::vec(-1.0f64..1.0, 2..6),
        m in 1usize..6,
        seed in any::<u64>(),
    ) {
        let spec = FactorSpec::fixed(lambda.clone()).unwrap();
        let run = |backend| TrialJob { spec: spec.clone(), m, backend, checkpoints: vec![], seed }.run(0..2).unwrap();
        let direct = run(Backend::Direct);
        let big = run(Backend::Bigfloat);
        let total: f64 = lambda.iter().sum::<f64>() * m as f64;
        for (d, b) in direct.iter().zip(&big) {
            for (x, y) in d.log_sv.iter().zip(&b.log_sv) {
                prop_assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
            prop_assert!((b.log_sv.iter().sum::<f64>() - total).abs() < 1e-9);
        }
    }
}

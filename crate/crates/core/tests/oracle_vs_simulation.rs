use chaoslab_core::measure::GaussianMeasure;
use chaoslab_core::oracle::{self, GaussianState, LimitState, LinearModel};
use chaoslab_core::simulate::{self, SimConfig};
use chaoslab_core::{loglog_fit, make_family, ModelFamily};

fn model() -> (LinearModel, GaussianMeasure) {
    (LinearModel::scalar(-1.0, 0.5, 0.0, 1.0), GaussianMeasure::scalar(0.0, 0.25).unwrap())
}

#[test]
fn entropy_decays_like_inverse_square_in_n() {
    let (m, mu0) = model();
    let points: Vec<(f64, f64)> = [32usize, 64, 128, 256]
        .iter()
        .map(|&n| {
            let rows = oracle::entropy_sweep(&m, &mu0, n, &[2], &[1.0]).unwrap();
            (n as f64, rows[0].entropy)
        })
        .collect();
    let fit = loglog_fit(&points, None).unwrap();
    assert!((fit.slope + 2.0).abs() < 0.1, "{fit:?}");
}

#[test]
fn marginal_entropy_is_below_path_entropy() {
    let (m, mu0) = model();
    for row in oracle::entropy_sweep(&m, &mu0, 16, &[1, 4, 16], &[0.5, 1.0, 3.0]).unwrap() {
        assert!(row.entropy <= row.path_entropy * (1.0 + 1e-6) + 1e-14, "{row:?}");
    }
}

// Monte Carlo against the exact particle law of the same Euler-free dynamics; the
// discretization bias at dt = 1e-3 is far below the statistical tolerance.
#[test]
fn particle_moments_match_the_oracle() {
    let (m, mu0) = model();
    let n = 8;
    let t = 0.5;
    let law = oracle::evolve_particle_law(&m, &GaussianState::iid(n, &mu0), t).unwrap();
    let drift = make_family(&ModelFamily::linear_scalar(-1.0, 0.5, 0.0)).unwrap();
    let cfg = SimConfig::scalar(n, 1.0, 1e-3, t, 21, 0.0, 0.25);
    let first: Vec<(f64, f64)> = simulate::map_terminal(&*drift, &cfg, 4000, false, |mu| {
        let x = mu.points();
        (x[0], x[0] * x[1])
    })
    .unwrap();
    let (m1, se1) = simulate::mean_stderr(&first.iter().map(|p| p.0).collect::<Vec<_>>());
    let (c, sec) = simulate::mean_stderr(&first.iter().map(|p| p.1).collect::<Vec<_>>());
    assert!((m1 - law.mean[0]).abs() < 4.0 * se1, "{m1} {}", law.mean[0]);
    let exact_cross = law.cov_block[(0, 0)] + law.mean[0] * law.mean[0];
    assert!((c - exact_cross).abs() < 4.0 * sec, "{c} {exact_cross}");
}

#[test]
fn limit_law_matches_large_population() {
    let (m, mu0) = model();
    let limit = oracle::evolve_limit_law(&m, &LimitState::from_gaussian(&mu0), 1.0).unwrap();
    let drift = make_family(&ModelFamily::linear_scalar(-1.0, 0.5, 0.0)).unwrap();
    let cfg = SimConfig::scalar(20_000, 1.0, 1e-3, 1.0, 8, 0.0, 0.25);
    let cloud = simulate::run_terminal(&*drift, &cfg, 0, false).unwrap();
    let var = cloud.covariance()[(0, 0)];
    // sd of a sample variance of 2e4 Gaussian draws is about 1% of the variance
    assert!((var - limit.cov[(0, 0)]).abs() < 0.05 * limit.cov[(0, 0)], "{var}");
}

use exitlab::model::Side;
use exitlab::problem::Problem;
use exitlab::rng::{PathStream, Replay, StreamKey};
use exitlab::sde::{
    exit_summary, linearized_endpoint, linearized_exit, malliavin_derivative, malliavin_l2_gap, simulate_linearized,
    simulate_path, LinHorizon, SimConfig,
};
use exitlab::stats::ks_normal;
use std::sync::OnceLock;

fn cubic() -> &'static Problem<f64> {
    static P: OnceLock<Problem<f64>> = OnceLock::new();
    P.get_or_init(|| {
        let p = Problem::preset("cubic").unwrap();
        p.linearized().unwrap();
        p
    })
}

fn stream(seed: u64, j: u64) -> PathStream {
    PathStream::new(StreamKey::path(seed, j))
}

#[test]
fn ou_endpoint_is_gaussian() {
    // M(T) = x + int_0^T e^{-s} dW for the linear model, so M(T) ~ N(x, (1 - e^{-2T}) / 2).
    let p = Problem::<f64>::preset("linear-ou").unwrap();
    let lin = p.linearized().unwrap();
    let cfg = SimConfig::euler(1e-3, 0.1, 1.0).unwrap();
    let t = 2.0;
    let sample: Vec<f64> = (0..20_000)
        .map(|j| linearized_endpoint(lin, 0.3, 0.1, t, &cfg, &mut stream(7, j)).unwrap().m)
        .collect();
    let sd = ((1.0 - (-2.0 * t).exp()) / 2.0f64).sqrt();
    let ks = ks_normal(&sample, 0.3, sd);
    assert!(ks.1 > 0.001, "{ks:?}");
    let var = sample.iter().map(|m| (m - 0.3).powi(2)).sum::<f64>() / sample.len() as f64;
    assert!((var / (sd * sd) - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn duhamel_bookkeeping() {
    let p = cubic();
    let lin = p.linearized().unwrap();
    let eps = 0.05;
    let cfg = SimConfig::euler(1e-3, eps, 1.0).unwrap();
    let bound = lin.coeffs.h_sup() / (2.0 * lin.lambda) * eps;
    for j in 0..50 {
        let (path, trace) =
            simulate_linearized(lin, 0.5, eps, LinHorizon::UntilExit, &cfg, &mut stream(3, j)).unwrap();
        for k in 0..trace.times.len() {
            assert!((trace.m[k] - (0.5 + trace.u[k] + trace.v[k])).abs() < 1e-12);
            let y = eps * (lin.lambda * trace.times[k]).exp() * trace.m[k];
            assert!((path.states[k] - y).abs() < 1e-12);
            assert!(trace.v[k].abs() <= bound * (1.0 + 1e-9));
        }
        let exit = trace.exit.expect("path should leave the neighborhood");
        // Y = eps e^{lambda t} M, so the exit side is the sign of M there.
        assert_eq!(exit.side, Side::of(exit.m));
        let y_exit = eps * (lin.lambda * exit.tau).exp() * exit.m;
        assert!((y_exit.abs() - lin.r()).abs() < 1e-9);
    }
}

#[test]
fn cubic_coefficients_match_closed_form() {
    // f(x) = x / sqrt(1 + x^2): s(y) = (1 - y^2)^{3/2}, h(y) = -3 y (1 - y^2)^2.
    let c = &cubic().linearized().unwrap().coeffs;
    let r = c.radius();
    for k in 0..=20 {
        let y = -r + 2.0 * r * k as f64 / 20.0;
        let w = 1.0 - y * y;
        assert!((c.sigma_tilde(y) - w.powf(1.5)).abs() < 1e-5, "y={y}: {}", c.sigma_tilde(y) - w.powf(1.5));
        assert!((c.h(y) + 3.0 * y * w * w).abs() < 1e-4, "y={y}: {}", c.h(y) + 3.0 * y * w * w);
    }
    let h_sup = 3.0 * r * (1.0 - r * r).powi(2);
    assert!((c.h_sup() - h_sup).abs() < 1e-3, "{} vs {h_sup}", c.h_sup());
    assert!(c.sigma_tilde(2.0 * r) == c.sigma_tilde(r));
    assert_eq!(c.h_prime(2.0 * r), 0.0);
}

#[test]
fn u_tail_obeys_the_exponential_bound() {
    // U is a martingale with <U> <= sup s^2 / (2 lambda), so P(sup |U| >= a) <= 2 exp(-a^2 lambda / sup s^2).
    let p = cubic();
    let lin = p.linearized().unwrap();
    let cfg = SimConfig::euler(2e-3, 0.05, 1.0).unwrap();
    let n = 2000;
    let sups: Vec<f64> = (0..n)
        .map(|j| {
            let (_, trace) =
                simulate_linearized(lin, 0.0, 0.05, LinHorizon::UntilExit, &cfg, &mut stream(11, j)).unwrap();
            trace.u.iter().fold(0.0f64, |m, u| m.max(u.abs()))
        })
        .collect();
    let s2 = lin.coeffs.sigma_tilde_sup().powi(2);
    for a in [1.0, 2.0, 3.0] {
        let freq = sups.iter().filter(|&&s| s >= a).count() as f64 / n as f64;
        let bound = (2.0 * (-a * a * lin.lambda / s2).exp()).min(1.0);
        assert!(freq <= bound + 3.0 * (bound / n as f64).sqrt(), "a={a}: {freq} > {bound}");
    }
}

/// Mean `|f(X) - Y|` at times `0.05 k` before `X` leaves `V`, with both schemes fed one noise path.
fn coupling_gap(p: &Problem<f64>, eps: f64, dt: f64, fine: &[f64]) -> f64 {
    let lin = p.linearized().unwrap();
    let per = (dt / 5e-4).round() as usize;
    let dw: Vec<f64> = fine.chunks(per).map(|c| c.iter().sum()).collect();
    let t_end = 3.0;
    let cfg = SimConfig::euler(dt, eps, 1.0).unwrap().with_max_time(t_end);
    let x0 = p.conj.g(eps * 0.5).unwrap();
    let xs = simulate_path(&p.model, x0, &cfg, &mut Replay::new(&dw)).unwrap();
    let (ys, _) = simulate_linearized(lin, 0.5, eps, LinHorizon::Fixed(t_end), &cfg, &mut Replay::new(&dw)).unwrap();
    let mut total = 0.0;
    let mut count = 0;
    let stride = (0.05 / dt).round() as usize;
    for (x, y) in xs.states.iter().zip(&ys.states).step_by(stride) {
        if *x <= p.nbhd.v_minus || *x >= p.nbhd.v_plus || y.abs() >= lin.r() {
            break;
        }
        total += (p.conj.f(*x).unwrap() - y).abs();
        count += 1;
    }
    total / count as f64
}

#[test]
fn original_and_linearized_paths_agree() {
    let p = cubic();
    let (mut coarse, mut fine) = (0.0, 0.0);
    for j in 0..10 {
        let mut s = stream(5, j);
        let dw: Vec<f64> = (0..6000).map(|_| (5e-4f64).sqrt() * s.standard_normal()).collect();
        coarse += coupling_gap(p, 0.1, 4e-3, &dw);
        fine += coupling_gap(p, 0.1, 1e-3, &dw);
    }
    assert!(fine / 10.0 < 1e-3, "gap {fine} coarse {coarse}");
    assert!(fine < 0.7 * coarse, "{fine} vs {coarse}");
}

#[test]
fn start_outside_the_neighborhood_is_rejected() {
    let p = cubic();
    let lin = p.linearized().unwrap();
    let cfg = SimConfig::euler(1e-3, 0.1, 1.0).unwrap();
    assert!(linearized_exit(lin, 3.0, 0.1, &cfg, &mut stream(1, 0)).is_err());
}

#[test]
fn exit_summary_counts() {
    let p = Problem::<f64>::preset("linear-ou").unwrap();
    let cfg = SimConfig::euler(1e-3, 0.05, 1.0).unwrap();
    let s = exit_summary(&p.model, 0.9, &cfg, 200, 1).unwrap();
    assert_eq!(s.len(), 200);
    assert_eq!(s.count(Side::Plus), 200);
    assert!((s.mean_tau() - (1.0f64 / 0.9).ln()).abs() < 0.01);
    let s = exit_summary(&p.model, 0.0, &cfg, 2000, 1).unwrap();
    assert_eq!(s.censored(), 0);
    let plus = s.count(Side::Plus) as f64 / 2000.0;
    assert!((plus - 0.5).abs() < 0.04);
    assert!(s.std_tau() > 0.0);
    let again = exit_summary(&p.model, 0.0, &cfg, 2000, 1).unwrap();
    assert_eq!(s.tau, again.tau);
}

#[test]
fn malliavin_derivative_of_the_linear_model_is_exact() {
    let p = Problem::<f64>::preset("linear-ou").unwrap();
    let lin = p.linearized().unwrap();
    let cfg = SimConfig::euler(1e-3, 0.1, 1.0).unwrap();
    let (path, _) = simulate_linearized(lin, 0.0, 0.1, LinHorizon::Fixed(2.0), &cfg, &mut stream(2, 0)).unwrap();
    let grid: Vec<f64> = (0..=100).map(|k| 0.02 * k as f64).collect();
    let tr = malliavin_derivative(&path, &grid, 2.0, lin, 0.1).unwrap();
    for (t, v) in grid.iter().zip(&tr.value) {
        assert!((v - (-t).exp()).abs() < 1e-14);
    }
    assert_eq!(malliavin_l2_gap(&tr, 1.0, 1.0), 0.0);
    assert!(malliavin_derivative(&path, &grid, 2.5, lin, 0.1).is_err());
}

#[test]
fn malliavin_derivative_at_the_terminal_time() {
    let p = cubic();
    let lin = p.linearized().unwrap();
    let eps = 0.05;
    let cfg = SimConfig::euler(1e-3, eps, 1.0).unwrap();
    let t_prime = 1.5;
    let (path, _) =
        simulate_linearized(lin, 0.0, eps, LinHorizon::Fixed(t_prime), &cfg, &mut stream(4, 1)).unwrap();
    let tr = malliavin_derivative(&path, &[0.0, 0.5, t_prime], t_prime, lin, eps).unwrap();
    let y_end = *path.states.last().unwrap();
    let expected = (-lin.lambda * t_prime).exp() * lin.coeffs.sigma_tilde(y_end);
    assert!((tr.value[2] - expected).abs() < 1e-14);
    assert_eq!(tr.z_stochastic[2], 0.0);
    // at t = 0 the correction is small for a small eps
    assert!((tr.value[0] - 1.0).abs() < 0.1);
}

//! Built-in consistency checks: a fast pass over the numerical core that
//! catches a broken build before a long experiment does.
//!
//! Each suite returns how many individual checks it ran; any failure turns
//! into a runtime error naming the suite. The whole pass takes a few
//! seconds.

use ndarray::{Array1, Array2};
use rand::Rng;

use shallow_diffusion::linalg::orthonormal_complement;
use shallow_diffusion::net::{dsm_gradient, dsm_loss, exact_linear_net, ShallowScoreNet};
use shallow_diffusion::oracle::ScoreOracle;
use shallow_diffusion::rng::{normal_matrix, normal_vector, stream};
use shallow_diffusion::sampler::{ei_exact_moments, em_reference_moments};
use shallow_diffusion::schedule::{make_time_grid, ou_coefficients, ScheduleParams};
use shallow_diffusion::targets::{
    random_orthonormal, LatentMixture, SubspaceModel, Target, TrainingSet,
};
use shallow_diffusion::train::estimate_ct;

use crate::Failure;

/// Result of comparing an analytic gradient against central finite
/// differences, coordinate by coordinate.
pub struct FdCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Inner-weight coordinates whose perturbation window crossed a ReLU
    /// kink, where the two sides disagree by construction.
    pub skipped: usize,
}

/// Central finite differences against the analytic gradient of the
/// denoising loss, over every coordinate of both weight matrices.
///
/// Inner-weight coordinates are skipped when ±h flips any row's activation
/// sign: across a kink the loss is only piecewise quadratic and the two
/// one-sided slopes differ. The relative error denominator is floored at
/// 10⁻⁸ of the gradient scale so near-zero entries compare absolutely.
pub fn finite_difference_check(
    net: &ShallowScoreNet,
    ts: &TrainingSet,
    sigma: f64,
    h_scale: f64,
) -> FdCheck {
    let (_, gu, gv) = dsm_gradient(net, &ts.xt.view(), &ts.w.view(), sigma);
    let gmax = gu
        .iter()
        .chain(gv.iter())
        .fold(0.0f64, |acc, g| acc.max(g.abs()));
    let floor = 1e-8 * gmax.max(1.0);
    let pre = ts.xt.dot(&net.v.t());

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    let mut probe = |net_plus: &ShallowScoreNet, net_minus: &ShallowScoreNet, g: f64, h: f64| {
        let lp = dsm_loss(net_plus, &ts.xt.view(), &ts.w.view(), sigma);
        let lm = dsm_loss(net_minus, &ts.xt.view(), &ts.w.view(), sigma);
        let fd = (lp - lm) / (2.0 * h);
        let denom = fd.abs().max(g.abs()).max(floor);
        max_rel = max_rel.max((fd - g).abs() / denom);
        checked += 1;
    };

    for i in 0..net.width() {
        for j in 0..net.dim() {
            let h = h_scale * (1.0 + net.u[[i, j]].abs());
            let mut plus = net.clone();
            plus.u[[i, j]] += h;
            let mut minus = net.clone();
            minus.u[[i, j]] -= h;
            probe(&plus, &minus, gu[[i, j]], h);
        }
    }
    for i in 0..net.width() {
        for j in 0..net.dim() {
            let h = h_scale * (1.0 + net.v[[i, j]].abs());
            let crosses_kink = ts.xt.rows().into_iter().enumerate().any(|(r, row)| {
                let p = pre[[r, i]];
                let d = h * row[j];
                p == 0.0 || ((p + d > 0.0) != (p - d > 0.0))
            });
            if crosses_kink {
                skipped += 1;
                continue;
            }
            let h = h_scale * (1.0 + net.v[[i, j]].abs());
            let mut plus = net.clone();
            plus.v[[i, j]] += h;
            let mut minus = net.clone();
            minus.v[[i, j]] -= h;
            probe(&plus, &minus, gv[[i, j]], h);
        }
    }
    FdCheck {
        max_rel,
        checked,
        skipped,
    }
}

/// Hybrid relative distance between two score vectors: the gap over the
/// larger norm, floored at 1 so near-zero scores compare absolutely.
pub fn score_gap(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = (a - b).dot(&(a - b)).sqrt();
    let scale = a.dot(a).sqrt().max(b.dot(b).sqrt()).max(1.0);
    diff / scale
}

fn suite_schedule_invariants() -> Result<usize, String> {
    let mut rng = stream(101, 0);
    let mut checks = 0;
    for _ in 0..25 {
        let horizon = rng.random_range(1.3..7.0);
        let steps = 2 * rng.random_range(2..=100usize);
        let zeta = rng.random_range(0.01..0.4);
        let params =
            ScheduleParams::new(horizon, steps, zeta).map_err(|e| e.to_string())?;
        let grid = make_time_grid(&params).map_err(|e| e.to_string())?;
        let tau = &grid.reverse_times;
        if tau.len() != steps + 1 {
            return Err(format!("grid has {} knots, expected {}", tau.len(), steps + 1));
        }
        if tau[0] != 0.0 || tau[steps / 2] != horizon - 1.0 || tau[steps] != horizon - zeta {
            return Err(format!(
                "anchor knots off for (T, N, ζ) = ({horizon}, {steps}, {zeta})"
            ));
        }
        let kappa = params.kappa();
        for k in 0..steps {
            if !(tau[k + 1] > tau[k]) {
                return Err(format!("knots not increasing at k = {k}"));
            }
            let gap = grid.gaps[k];
            let cap = kappa * (horizon - tau[k + 1]).min(1.0);
            if gap > cap * (1.0 + 1e-12) {
                return Err(format!("gap {gap} exceeds its bound {cap} at k = {k}"));
            }
            let fwd = grid.forward_times[steps - 1 - k];
            if (fwd + tau[k + 1] - horizon).abs() > 4.0 * f64::EPSILON * horizon {
                return Err(format!("forward/reverse times do not reflect at k = {k}"));
            }
            checks += 1;
        }
    }
    Ok(checks)
}

fn suite_forward_coefficients() -> Result<usize, String> {
    let mut rng = stream(102, 0);
    let mut last_sigma = 0.0;
    let mut ts: Vec<f64> = (0..20).map(|_| rng.random_range(1e-4..6.0)).collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &t in &ts {
        let c = ou_coefficients(t).map_err(|e| e.to_string())?;
        let gap = (c.m * c.m + c.sigma * c.sigma - 1.0).abs();
        if gap > 1e-14 {
            return Err(format!("m² + σ² drifts from 1 by {gap} at t = {t}"));
        }
        if c.sigma <= last_sigma {
            return Err(format!("σ not increasing at t = {t}"));
        }
        last_sigma = c.sigma;
    }
    Ok(ts.len())
}

fn suite_oracle_agreement() -> Result<usize, String> {
    let mut rng = stream(103, 0);
    let mut checks = 0;

    let latent = LatentMixture::weighted_point_masses(
        vec![0.5, 0.3, 0.2],
        vec![
            ndarray::array![1.0, 0.4],
            ndarray::array![-0.8, 0.9],
            ndarray::array![0.2, -1.1],
        ],
    )
    .map_err(|e| e.to_string())?;
    let u = random_orthonormal(5, 2, &mut rng).map_err(|e| e.to_string())?;
    let sub = Target::Subspace(SubspaceModel::new(u, latent).map_err(|e| e.to_string())?);
    checks += three_way_agreement(&sub, 25, &mut rng)?;

    let g1 = LatentMixture::weighted_point_masses(
        vec![0.6, 0.4],
        vec![ndarray::array![0.9], ndarray::array![-0.7]],
    )
    .map_err(|e| e.to_string())?;
    let g2 = LatentMixture::weighted_point_masses(
        vec![0.5, 0.5],
        vec![ndarray::array![1.0, 0.3], ndarray::array![-0.5, 0.8]],
    )
    .map_err(|e| e.to_string())?;
    let frame = random_orthonormal(3, 3, &mut rng).map_err(|e| e.to_string())?;
    let ind = Target::Independent(
        shallow_diffusion::targets::IndependentModel::new(frame, vec![g1, g2])
            .map_err(|e| e.to_string())?,
    );
    checks += three_way_agreement(&ind, 25, &mut rng)?;
    Ok(checks)
}

/// Structured oracle vs. conditional-mean form vs. plain ambient mixture,
/// at random points and times. Point-mass targets only, since the
/// conditional-mean oracle enumerates atoms.
pub fn three_way_agreement(
    target: &Target,
    points: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<usize, String> {
    let ambient = target.ambient_mixture().map_err(|e| e.to_string())?;
    let weights: Vec<f64> = ambient.components.iter().map(|c| c.weight).collect();
    let dim = target.ambient_dim();
    let mut atoms = Array2::zeros((weights.len(), dim));
    for (i, comp) in ambient.components.iter().enumerate() {
        atoms.row_mut(i).assign(&comp.mean);
    }
    let mut checks = 0;
    for _ in 0..points {
        let t = rng.random_range(0.02..4.0);
        let x = normal_vector(rng, dim) * 1.5;
        let structured = ScoreOracle::for_target(target, t).map_err(|e| e.to_string())?;
        let tweedie =
            ScoreOracle::tweedie(&weights, atoms.clone(), t).map_err(|e| e.to_string())?;
        let plain = ScoreOracle::ambient(&ambient, t).map_err(|e| e.to_string())?;
        let a = structured.score(&x.view());
        let b = tweedie.score(&x.view());
        let c = plain.score(&x.view());
        let gap = score_gap(&a, &b).max(score_gap(&a, &c)).max(score_gap(&b, &c));
        if gap > 1e-8 {
            return Err(format!("oracle disagreement {gap:.3e} at t = {t:.3}"));
        }
        checks += 1;
    }
    Ok(checks)
}

fn suite_gradient_check() -> Result<usize, String> {
    let mut checks = 0;
    for c in 0..5u64 {
        let mut rng = stream(104, c);
        let dim = 2 + (c as usize % 3);
        let width = 8 + 4 * (c as usize % 4);
        let t = 0.2 + 0.4 * c as f64;
        let net =
            ShallowScoreNet::init_spherical(width, dim, 1.3, &mut rng).map_err(|e| e.to_string())?;
        let x0 = normal_matrix(&mut rng, 16, dim);
        let ts = shallow_diffusion::targets::forward_corrupt(&x0.view(), t, 104, 50 + c)
            .map_err(|e| e.to_string())?;
        let sigma = ou_coefficients(t).map_err(|e| e.to_string())?.sigma;
        let fd = finite_difference_check(&net, &ts, sigma, 1e-6);
        if fd.max_rel > 1e-5 {
            return Err(format!(
                "gradient mismatch {:.3e} on config {c} ({} coords checked)",
                fd.max_rel, fd.checked
            ));
        }
        checks += fd.checked;
    }
    Ok(checks)
}

fn suite_exact_linear_scores() -> Result<usize, String> {
    let mut rng = stream(105, 0);
    let t = 0.5;
    let sigma2 = {
        let c = ou_coefficients(t).map_err(|e| e.to_string())?;
        c.sigma * c.sigma
    };
    let (big_d, d) = (4, 2);
    let u = random_orthonormal(big_d, d, &mut rng).map_err(|e| e.to_string())?;
    let comp = orthonormal_complement(&u.view()).map_err(|e| e.to_string())?;
    let coeffs = vec![-1.0 / sigma2; big_d - d];
    let net = exact_linear_net(&coeffs, &comp.t()).map_err(|e| e.to_string())?;

    let mut checks = 0;
    for _ in 0..10 {
        let x = normal_vector(&mut rng, big_d) * 2.0;
        let got = net.forward(&x.view());
        let proj = u.dot(&u.t().dot(&x));
        let want = (&proj - &x) / sigma2;
        let err = (&got - &want).dot(&(&got - &want)).sqrt();
        let scale = x.dot(&x).sqrt();
        if err > 1e-12 * scale {
            return Err(format!("off-frame score off by {err:.3e} (‖x‖ = {scale:.3})"));
        }
        checks += 1;
    }
    let pn = net.path_norm();
    let want = 2.0 * (big_d - d) as f64 / sigma2;
    if (pn - want).abs() > 4.0 * f64::EPSILON * want {
        return Err(format!("path norm {pn} differs from {want}"));
    }
    Ok(checks + 1)
}

fn suite_dsm_identity() -> Result<usize, String> {
    let target = Target::Subspace(
        SubspaceModel::new(Array2::eye(4), LatentMixture::standard_gaussian(4))
            .map_err(|e| e.to_string())?,
    );
    let t = 0.5;
    let c = ou_coefficients(t).map_err(|e| e.to_string())?;
    let want = 4.0 * c.m * c.m / (c.sigma * c.sigma);
    let (est, se) = estimate_ct(&target, t, 30_000, 106, 0).map_err(|e| e.to_string())?;
    if (est - want).abs() > 4.0 * se {
        return Err(format!(
            "loss offset estimate {est:.4} ± {se:.4} disagrees with {want:.4}"
        ));
    }
    Ok(1)
}

fn suite_integrator_moments() -> Result<usize, String> {
    let mut checks = 0;
    for gamma in [0.3, 0.05] {
        let (mu_ei, v_ei) = ei_exact_moments(1.4, 0.9, -0.8, gamma);
        let (mu_em, v_em) = em_reference_moments(1.4, 0.9, -0.8, gamma, 200_000);
        if (mu_ei - mu_em).abs() > 1e-4 || (v_ei - v_em).abs() > 1e-4 {
            return Err(format!(
                "integrator moments drift at γ = {gamma}: Δμ = {:.2e}, Δv = {:.2e}",
                (mu_ei - mu_em).abs(),
                (v_ei - v_em).abs()
            ));
        }
        checks += 1;
    }
    Ok(checks)
}

/// Runs every suite, printing one line each; the first failure aborts with
/// the suite's name.
pub fn run() -> Result<(), Failure> {
    let suites: &[(&str, fn() -> Result<usize, String>)] = &[
        ("schedule invariants", suite_schedule_invariants),
        ("forward coefficients", suite_forward_coefficients),
        ("score oracle agreement", suite_oracle_agreement),
        ("gradient finite differences", suite_gradient_check),
        ("exact linear scores", suite_exact_linear_scores),
        ("loss/risk offset", suite_dsm_identity),
        ("integrator moments", suite_integrator_moments),
    ];
    let mut total = 0;
    for (name, suite) in suites {
        match suite() {
            Ok(checks) => {
                total += checks;
                println!("ok   {name} ({checks} checks)");
            }
            Err(why) => {
                println!("FAIL {name}: {why}");
                return Err(Failure::runtime(format!("selftest failed in {name}: {why}")));
            }
        }
    }
    println!("selftest: {} suites passed ({total} checks)", suites.len());
    Ok(())
}

//! Exact scores of the forward-corrupted targets.
//!
//! The forward process maps x₀ to x_t = m_t x₀ + σ_t w, so a Gaussian
//! mixture target stays a Gaussian mixture with components
//! (w_j, m_t μ_j, m_t² Σ_j + σ_t² I). [`MixtureAtTime`] evaluates that
//! mixture's score and log density directly; [`ScoreOracle`] wraps the
//! structured shortcuts (subspace decomposition, per-group independence,
//! Tweedie's formula for point masses) behind one interface so they can be
//! cross-checked against each other and against trained networks.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_logdet, cholesky_solve, solve_lower};
use crate::schedule::ou_coefficients;
use crate::targets::{LatentMixture, Target};

const LOG_2PI: f64 = 1.8378770664093453;

struct ComponentAtTime {
    log_weight: f64,
    mean: Array1<f64>,
    chol: Array2<f64>,
    logdet: f64,
}

/// A Gaussian mixture pushed forward to diffusion time t, with per-component
/// Cholesky factors cached for score and density evaluation.
pub struct MixtureAtTime {
    pub t: f64,
    dim: usize,
    components: Vec<ComponentAtTime>,
}

impl MixtureAtTime {
    /// Evolves `latent` to time `t ≥ 0`.
    ///
    /// At t = 0 this is the target itself, which works only when every
    /// component covariance is positive definite; point masses need t > 0 to
    /// pick up the σ_t² I smoothing.
    pub fn from_latent(latent: &LatentMixture, t: f64) -> Result<Self> {
        let coeff = ou_coefficients(t)?;
        let m2 = coeff.m * coeff.m;
        let s2 = coeff.sigma * coeff.sigma;
        let dim = latent.dim;
        let mut components = Vec::with_capacity(latent.components.len());
        for c in &latent.components {
            let mut cov = c.cov.mapv(|x| m2 * x);
            for i in 0..dim {
                cov[[i, i]] += s2;
            }
            let chol = cholesky(&cov.view()).map_err(|e| match e {
                Error::SingularCovariance(msg) => Error::SingularCovariance(format!(
                    "mixture component is degenerate at t = {t}: {msg}"
                )),
                other => other,
            })?;
            let logdet = cholesky_logdet(&chol.view());
            components.push(ComponentAtTime {
                log_weight: c.weight.ln(),
                mean: c.mean.mapv(|x| coeff.m * x),
                chol,
                logdet,
            });
        }
        Ok(MixtureAtTime { t, dim, components })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Per-component log densities log(w_j) + log N(z; m_j, C_j).
    fn log_terms(&self, z: &ArrayView1<f64>) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                let diff = z - &c.mean;
                let half = solve_lower(&c.chol.view(), &diff.view());
                let quad = half.dot(&half);
                c.log_weight - 0.5 * (self.dim as f64 * LOG_2PI + c.logdet + quad)
            })
            .collect()
    }

    pub fn log_density(&self, z: &ArrayView1<f64>) -> f64 {
        log_sum_exp(&self.log_terms(z))
    }

    /// ∇ log p_t(z) = Σ_j r_j(z) · (−C_j⁻¹ (z − m_j)) with responsibilities
    /// r_j computed in log space.
    pub fn score(&self, z: &ArrayView1<f64>) -> Array1<f64> {
        let terms = self.log_terms(z);
        let lse = log_sum_exp(&terms);
        let mut s = Array1::zeros(self.dim);
        for (c, lt) in self.components.iter().zip(&terms) {
            let r = (lt - lse).exp();
            if r == 0.0 {
                continue;
            }
            let diff = z - &c.mean;
            let pull = cholesky_solve(&c.chol.view(), &diff.view());
            s.scaled_add(-r, &pull);
        }
        s
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

enum OracleKind {
    /// Full ambient mixture, the reference everything else is checked
    /// against.
    Ambient { mixture: MixtureAtTime },
    /// x = U z + orthogonal noise: score decomposes into a latent part and a
    /// pull toward the subspace, −(x − U Uᵀ x)/σ_t².
    Subspace {
        u: Array2<f64>,
        latent: MixtureAtTime,
        sigma2: f64,
    },
    /// Square orthonormal frame over independent groups: rotate in, score
    /// each group, rotate back.
    Independent {
        u: Array2<f64>,
        groups: Vec<MixtureAtTime>,
        offsets: Vec<usize>,
    },
    /// Tweedie's formula specialized to a point-mass target:
    /// s(x) = (Σ_j ρ_j(x) m_t x₀_j − x)/σ_t² with softmax responsibilities.
    Tweedie {
        log_weights: Vec<f64>,
        points: Array2<f64>,
        m: f64,
        sigma2: f64,
    },
}

/// Exact score of a target at one diffusion time.
pub struct ScoreOracle {
    kind: OracleKind,
    dim: usize,
    t: f64,
}

impl ScoreOracle {
    /// The structured oracle for a target: subspace decomposition for
    /// subspace models, per-group evaluation for independent models, and the
    /// expanded ambient mixture for mixed models.
    pub fn for_target(target: &Target, t: f64) -> Result<Self> {
        match target {
            Target::Subspace(m) => Self::subspace(m.u.clone(), &m.latent, t),
            Target::Independent(m) => {
                Self::independent(m.u.clone(), &m.groups, t)
            }
            Target::Mixed(_) => Self::ambient(&target.ambient_mixture()?, t),
        }
    }

    /// Score of the plain ambient mixture.
    pub fn ambient(latent: &LatentMixture, t: f64) -> Result<Self> {
        let mixture = MixtureAtTime::from_latent(latent, t)?;
        let dim = mixture.dim();
        Ok(ScoreOracle {
            kind: OracleKind::Ambient { mixture },
            dim,
            t,
        })
    }

    /// Subspace decomposition; requires t > 0 since the off-subspace pull
    /// divides by σ_t².
    pub fn subspace(u: Array2<f64>, latent: &LatentMixture, t: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::domain(format!(
                "subspace score needs positive diffusion time, got t = {t}"
            )));
        }
        if u.ncols() != latent.dim {
            return Err(Error::model("frame and latent dimensions disagree"));
        }
        let coeff = ou_coefficients(t)?;
        let latent_t = MixtureAtTime::from_latent(latent, t)?;
        let dim = u.nrows();
        Ok(ScoreOracle {
            kind: OracleKind::Subspace {
                u,
                latent: latent_t,
                sigma2: coeff.sigma * coeff.sigma,
            },
            dim,
            t,
        })
    }

    /// Per-group evaluation for a square orthonormal frame.
    pub fn independent(u: Array2<f64>, groups: &[LatentMixture], t: f64) -> Result<Self> {
        let dim = u.nrows();
        if u.ncols() != dim {
            return Err(Error::model("independent frame must be square"));
        }
        let mut evolved = Vec::with_capacity(groups.len());
        let mut offsets = Vec::with_capacity(groups.len());
        let mut offset = 0;
        for g in groups {
            evolved.push(MixtureAtTime::from_latent(g, t)?);
            offsets.push(offset);
            offset += g.dim;
        }
        if offset != dim {
            return Err(Error::model(format!(
                "group dimensions sum to {offset}, expected {dim}"
            )));
        }
        Ok(ScoreOracle {
            kind: OracleKind::Independent {
                u,
                groups: evolved,
                offsets,
            },
            dim,
            t,
        })
    }

    /// Tweedie score for weighted point masses (rows of `points`);
    /// requires t > 0.
    pub fn tweedie(weights: &[f64], points: Array2<f64>, t: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::domain(format!(
                "the Tweedie oracle needs positive diffusion time, got t = {t}"
            )));
        }
        if weights.len() != points.nrows() || weights.is_empty() {
            return Err(Error::model("need one weight per point"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || !((total - 1.0).abs() < 1e-9) {
            return Err(Error::model("weights must be positive and sum to 1"));
        }
        let coeff = ou_coefficients(t)?;
        let dim = points.ncols();
        Ok(ScoreOracle {
            kind: OracleKind::Tweedie {
                log_weights: weights.iter().map(|w| (w / total).ln()).collect(),
                points,
                m: coeff.m,
                sigma2: coeff.sigma * coeff.sigma,
            },
            dim,
            t,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn score(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        match &self.kind {
            OracleKind::Ambient { mixture } => mixture.score(x),
            OracleKind::Subspace { u, latent, sigma2 } => {
                let z = u.t().dot(x);
                let latent_score = latent.score(&z.view());
                let mut s = u.dot(&latent_score);
                let projected = u.dot(&z);
                let mut residual = x.to_owned();
                residual -= &projected;
                s.scaled_add(-1.0 / sigma2, &residual);
                s
            }
            OracleKind::Independent { u, groups, offsets } => {
                let z = u.t().dot(x);
                let mut s_latent = Array1::zeros(self.dim);
                for (g, &off) in groups.iter().zip(offsets) {
                    let zg = z.slice(ndarray::s![off..off + g.dim()]).to_owned();
                    let sg = g.score(&zg.view());
                    s_latent
                        .slice_mut(ndarray::s![off..off + g.dim()])
                        .assign(&sg);
                }
                u.dot(&s_latent)
            }
            OracleKind::Tweedie {
                log_weights,
                points,
                m,
                sigma2,
            } => {
                let terms: Vec<f64> = log_weights
                    .iter()
                    .zip(points.rows())
                    .map(|(lw, p)| {
                        let mut diff = x.to_owned();
                        diff.scaled_add(-*m, &p);
                        lw - diff.dot(&diff) / (2.0 * sigma2)
                    })
                    .collect();
                let lse = log_sum_exp(&terms);
                let mut posterior_mean = Array1::zeros(self.dim);
                for (lt, p) in terms.iter().zip(points.rows()) {
                    let r = (lt - lse).exp();
                    posterior_mean.scaled_add(r, &p);
                }
                let mut s = posterior_mean.mapv(|v| *m * v);
                s -= x;
                s.mapv_into(|v| v / sigma2)
            }
        }
    }

    /// Scores for a batch of rows.
    pub fn score_batch(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.dim));
        for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
            dst.assign(&self.score(&row));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, normal_vector, stream};
    use crate::targets::{random_orthonormal, MixtureComponent, SubspaceModel};
    use ndarray::array;

    fn finite_difference_score(mix: &MixtureAtTime, z: &Array1<f64>) -> Array1<f64> {
        let h = 1e-6;
        Array1::from_shape_fn(z.len(), |i| {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            (mix.log_density(&zp.view()) - mix.log_density(&zm.view())) / (2.0 * h)
        })
    }

    #[test]
    fn standard_gaussian_score_is_negative_identity() {
        // N(0, I) is stationary for the forward process, so at every t the
        // score is exactly −z.
        for &t in &[0.1, 0.5, 2.0, 10.0] {
            let mix =
                MixtureAtTime::from_latent(&LatentMixture::standard_gaussian(3), t).unwrap();
            let z = array![0.3, -1.2, 2.0];
            let s = mix.score(&z.view());
            for i in 0..3 {
                assert!((s[i] + z[i]).abs() < 1e-12, "t = {t}: {} vs {}", s[i], -z[i]);
            }
        }
    }

    #[test]
    fn symmetric_two_point_score_is_shifted_tanh() {
        // Latent ±1 with equal weight: p_t = ½N(m,σ²) + ½N(−m,σ²) has
        // score (m/σ²)·tanh(m z/σ²) − z/σ².
        let latent = LatentMixture::point_masses(vec![array![1.0], array![-1.0]]).unwrap();
        let t = 0.8;
        let coeff = ou_coefficients(t).unwrap();
        let (m, s2) = (coeff.m, coeff.sigma * coeff.sigma);
        let mix = MixtureAtTime::from_latent(&latent, t).unwrap();
        for &z in &[-2.0, -0.4, 0.0, 0.9, 3.1] {
            let got = mix.score(&array![z].view())[0];
            let expect = (m / s2) * (m * z / s2).tanh() - z / s2;
            assert!((got - expect).abs() < 1e-12, "z = {z}: {got} vs {expect}");
        }
    }

    #[test]
    fn score_is_gradient_of_log_density() {
        let mut rng = stream(31, 0);
        let mix = LatentMixture::new(vec![
            MixtureComponent {
                weight: 0.25,
                mean: array![1.0, 0.0],
                cov: array![[0.5, 0.2], [0.2, 0.8]],
            },
            MixtureComponent {
                weight: 0.75,
                mean: array![-0.6, 1.1],
                cov: array![[1.2, -0.3], [-0.3, 0.4]],
            },
        ])
        .unwrap();
        for &t in &[0.05, 0.7, 3.0] {
            let at_t = MixtureAtTime::from_latent(&mix, t).unwrap();
            for _ in 0..20 {
                let z = normal_vector(&mut rng, 2) * 2.0;
                let analytic = at_t.score(&z.view());
                let numeric = finite_difference_score(&at_t, &z);
                for i in 0..2 {
                    assert!(
                        (analytic[i] - numeric[i]).abs() < 1e-5 * (1.0 + analytic[i].abs()),
                        "t = {t}: {} vs {}",
                        analytic[i],
                        numeric[i]
                    );
                }
            }
        }
    }

    #[test]
    fn degenerate_mixture_rejected_at_time_zero() {
        let latent = LatentMixture::point_masses(vec![array![1.0], array![-1.0]]).unwrap();
        assert!(MixtureAtTime::from_latent(&latent, 0.0).is_err());
        assert!(MixtureAtTime::from_latent(&latent, 0.01).is_ok());
    }

    #[test]
    fn subspace_oracle_matches_ambient_mixture() {
        let mut rng = stream(32, 0);
        let u = random_orthonormal(5, 2, &mut rng).unwrap();
        let latent = LatentMixture::new(vec![
            MixtureComponent {
                weight: 0.5,
                mean: array![1.0, -1.0],
                cov: Array2::eye(2) * 0.3,
            },
            MixtureComponent {
                weight: 0.5,
                mean: array![-1.0, 1.0],
                cov: Array2::eye(2) * 0.7,
            },
        ])
        .unwrap();
        let model = Target::Subspace(SubspaceModel::new(u.clone(), latent.clone()).unwrap());
        for &t in &[0.1, 1.0, 4.0] {
            let structured = ScoreOracle::subspace(u.clone(), &latent, t).unwrap();
            let reference = ScoreOracle::ambient(&model.ambient_mixture().unwrap(), t).unwrap();
            for _ in 0..10 {
                let x = normal_vector(&mut rng, 5) * 1.5;
                let a = structured.score(&x.view());
                let b = reference.score(&x.view());
                let diff = (&a - &b).mapv(f64::abs).sum();
                let scale = a.mapv(f64::abs).sum().max(1e-12);
                assert!(diff / scale < 1e-10, "t = {t}: relative gap {}", diff / scale);
            }
        }
    }

    #[test]
    fn tweedie_matches_ambient_mixture_on_point_masses() {
        let mut rng = stream(33, 0);
        let points = normal_matrix(&mut rng, 4, 3);
        let weights = vec![0.1, 0.2, 0.3, 0.4];
        let latent = LatentMixture::weighted_point_masses(
            weights.clone(),
            points.rows().into_iter().map(|r| r.to_owned()).collect(),
        )
        .unwrap();
        for &t in &[0.05, 0.9, 2.5] {
            let tw = ScoreOracle::tweedie(&weights, points.clone(), t).unwrap();
            let reference = ScoreOracle::ambient(&latent, t).unwrap();
            for _ in 0..10 {
                let x = normal_vector(&mut rng, 3) * 2.0;
                let a = tw.score(&x.view());
                let b = reference.score(&x.view());
                let diff = (&a - &b).mapv(f64::abs).sum();
                let scale = a.mapv(f64::abs).sum().max(1e-12);
                assert!(diff / scale < 1e-10, "t = {t}: relative gap {}", diff / scale);
            }
        }
    }

    #[test]
    fn independent_oracle_matches_ambient_product() {
        let mut rng = stream(34, 0);
        let u = random_orthonormal(3, 3, &mut rng).unwrap();
        let g1 = LatentMixture::point_masses(vec![array![1.0], array![-1.0]]).unwrap();
        let g2 = LatentMixture::gaussian(array![0.2, -0.1], Array2::eye(2) * 0.6).unwrap();
        let groups = vec![g1, g2];
        let model = Target::Independent(
            crate::targets::IndependentModel::new(u.clone(), groups.clone()).unwrap(),
        );
        for &t in &[0.2, 1.3] {
            let structured = ScoreOracle::independent(u.clone(), &groups, t).unwrap();
            let reference = ScoreOracle::ambient(&model.ambient_mixture().unwrap(), t).unwrap();
            for _ in 0..10 {
                let x = normal_vector(&mut rng, 3) * 1.5;
                let a = structured.score(&x.view());
                let b = reference.score(&x.view());
                let diff = (&a - &b).mapv(f64::abs).sum();
                let scale = a.mapv(f64::abs).sum().max(1e-12);
                assert!(diff / scale < 1e-10, "t = {t}: relative gap {}", diff / scale);
            }
        }
    }

    #[test]
    fn oracles_reject_time_zero_where_undefined() {
        let latent = LatentMixture::standard_gaussian(2);
        let u = random_orthonormal(4, 2, &mut stream(35, 0)).unwrap();
        assert!(ScoreOracle::subspace(u, &latent, 0.0).is_err());
        let points = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(ScoreOracle::tweedie(&[0.5, 0.5], points, 0.0).is_err());
    }

    #[test]
    fn responsibilities_survive_extreme_separation() {
        // Far-apart point masses drive the naive density terms to
        // exp(−huge); the log-space path must keep the nearest component's
        // responsibility at 1 instead of 0/0.
        let far = 60.0;
        let points = array![[far], [-far]];
        let tw = ScoreOracle::tweedie(&[0.5, 0.5], points, 0.5).unwrap();
        let coeff = ou_coefficients(0.5).unwrap();
        let x = array![far * coeff.m + 0.3];
        let s = tw.score(&x.view());
        // Nearest-point Tweedie limit: (m·x₀ − x)/σ².
        let expect = (coeff.m * far - x[0]) / (coeff.sigma * coeff.sigma);
        assert!(s[0].is_finite());
        assert!((s[0] - expect).abs() < 1e-10);
    }
}

//! Exponential-integrator simulation of the reverse-time process.
//!
//! The reverse SDE dy = (y + 2∇log p_{T−τ}(y)) dτ + √2 dB starts from
//! N(0, I) and runs over the grid τ_0 < … < τ_N. On each step the score is
//! frozen at the current state and the step's target time, and the remaining
//! linear SDE is integrated exactly:
//!
//!   y' = e^γ y + 2(e^γ − 1) s + ξ,   ξ ~ N(0, (e^{2γ} − 1) I).
//!
//! Step k of size γ_k = τ_{k+1} − τ_k queries the score at forward time
//! T − τ_{k+1}, which is exactly where the per-timestep models were trained;
//! the run ends at reverse time T − ζ with samples approximating p_ζ.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_logdet, cholesky_solve};
use crate::oracle::ScoreOracle;
use crate::schedule::TimeGrid;
use crate::targets::{sample_covariance, Target};
use crate::train::ScoreModelSet;

/// A source of scores for every forward time of a reverse run.
pub trait ScoreProvider {
    fn dim(&self) -> usize;

    /// Verifies that this provider can serve every forward time of the
    /// grid, before any sampling work starts.
    fn ensure_covers(&self, grid: &TimeGrid) -> Result<()>;

    /// Scores for a batch of states at forward time `t`, the grid's
    /// `forward_times[index]`.
    fn score_batch_at(&self, index: usize, t: f64, y: &ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl ScoreProvider for ScoreModelSet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ensure_covers(&self, grid: &TimeGrid) -> Result<()> {
        if self.entries.len() != grid.forward_times.len() {
            return Err(Error::provider(format!(
                "model set has {} timesteps but the grid needs {}",
                self.entries.len(),
                grid.forward_times.len()
            )));
        }
        for (e, &t) in self.entries.iter().zip(grid.forward_times.iter()) {
            if e.t != t {
                return Err(Error::provider(format!(
                    "model trained at t = {} cannot serve grid time t = {t}",
                    e.t
                )));
            }
        }
        Ok(())
    }

    fn score_batch_at(&self, index: usize, t: f64, y: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| Error::provider(format!("no model at index {index}")))?;
        if entry.t != t {
            return Err(Error::provider(format!(
                "model at index {index} was trained at t = {}, not t = {t}",
                entry.t
            )));
        }
        Ok(entry.net.forward_batch(y))
    }
}

/// Exact scores precomputed for every forward time of a grid.
pub struct OracleProvider {
    oracles: Vec<ScoreOracle>,
    dim: usize,
}

impl OracleProvider {
    pub fn for_grid(target: &Target, grid: &TimeGrid) -> Result<Self> {
        let oracles = grid
            .forward_times
            .iter()
            .map(|&t| ScoreOracle::for_target(target, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(OracleProvider {
            dim: target.ambient_dim(),
            oracles,
        })
    }
}

impl ScoreProvider for OracleProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ensure_covers(&self, grid: &TimeGrid) -> Result<()> {
        if self.oracles.len() != grid.forward_times.len() {
            return Err(Error::provider(format!(
                "oracle set has {} timesteps but the grid needs {}",
                self.oracles.len(),
                grid.forward_times.len()
            )));
        }
        for (o, &t) in self.oracles.iter().zip(grid.forward_times.iter()) {
            if o.t() != t {
                return Err(Error::provider(format!(
                    "oracle at t = {} cannot serve grid time t = {t}",
                    o.t()
                )));
            }
        }
        Ok(())
    }

    fn score_batch_at(&self, index: usize, t: f64, y: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let oracle = self
            .oracles
            .get(index)
            .ok_or_else(|| Error::provider(format!("no oracle at index {index}")))?;
        if oracle.t() != t {
            return Err(Error::provider(format!(
                "oracle at index {index} holds t = {}, not t = {t}",
                oracle.t()
            )));
        }
        Ok(oracle.score_batch(y))
    }
}

/// One exponential-integrator step for a single state.
pub fn ei_step(
    y: &ArrayView1<f64>,
    score: &ArrayView1<f64>,
    gamma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Array1<f64>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::domain(format!(
            "step size must be positive and finite, got {gamma}"
        )));
    }
    let grow = gamma.exp();
    let drift = 2.0 * gamma.exp_m1();
    let noise_sd = (2.0 * gamma).exp_m1().sqrt();
    let mut out = y.mapv(|v| grow * v);
    out.scaled_add(drift, score);
    for v in out.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v += noise_sd * g;
    }
    Ok(out)
}

/// One exponential-integrator step applied to every row in place.
pub fn ei_step_batch(
    y: &mut Array2<f64>,
    score: &ArrayView2<f64>,
    gamma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::domain(format!(
            "step size must be positive and finite, got {gamma}"
        )));
    }
    if y.dim() != score.dim() {
        return Err(Error::domain("state and score shapes disagree"));
    }
    let grow = gamma.exp();
    let drift = 2.0 * gamma.exp_m1();
    let noise_sd = (2.0 * gamma).exp_m1().sqrt();
    ndarray::Zip::from(y).and(score).for_each(|v, &s| {
        let g: f64 = rng.sample(StandardNormal);
        *v = grow * *v + drift * s + noise_sd * g;
    });
    Ok(())
}

/// Expected mean and variance of one exact EI step per coordinate, for a
/// start law with the given moments and a frozen scalar score.
pub fn ei_exact_moments(mu0: f64, v0: f64, score: f64, gamma: f64) -> (f64, f64) {
    let a = gamma.exp();
    (
        a * mu0 + 2.0 * gamma.exp_m1() * score,
        a * a * v0 + (2.0 * gamma).exp_m1(),
    )
}

/// Mean and variance after Euler–Maruyama substeps of the same frozen-score
/// linear SDE, dy = (y + 2s) dτ + √2 dB.
///
/// The moment recursion of the EM chain is exact (means and variances of a
/// linear recursion need no simulation), so this provides an independent
/// reference that converges to [`ei_exact_moments`] as substeps grow.
pub fn em_reference_moments(
    mu0: f64,
    v0: f64,
    score: f64,
    gamma: f64,
    substeps: usize,
) -> (f64, f64) {
    assert!(substeps > 0, "need at least one substep");
    let dt = gamma / substeps as f64;
    let mut mu = mu0;
    let mut v = v0;
    for _ in 0..substeps {
        mu = (1.0 + dt) * mu + 2.0 * dt * score;
        v = (1.0 + dt) * (1.0 + dt) * v + 2.0 * dt;
    }
    (mu, v)
}

/// Runs the full reverse chain from N(0, I) and returns one sample per row,
/// distributed approximately as the target corrupted to time ζ.
pub fn run_reverse<P: ScoreProvider + ?Sized>(
    provider: &P,
    grid: &TimeGrid,
    n_samples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    provider.ensure_covers(grid)?;
    if n_samples == 0 {
        return Err(Error::domain("need at least one sample"));
    }
    let dim = provider.dim();
    let mut y = crate::rng::normal_matrix(rng, n_samples, dim);
    let n_steps = grid.params.steps;
    for k in 0..n_steps {
        let idx = n_steps - 1 - k;
        let t = grid.forward_times[idx];
        let s = provider.score_batch_at(idx, t, &y.view())?;
        ei_step_batch(&mut y, &s.view(), grid.gaps[k], rng)?;
    }
    Ok(y)
}

/// Sample mean and covariance (n−1 denominator).
pub fn gaussian_fit(samples: &ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let mean = samples
        .mean_axis(ndarray::Axis(0))
        .expect("nonempty sample matrix");
    let cov = sample_covariance(samples);
    (mean, cov)
}

/// KL(N(m1, c1) ‖ N(m2, c2)) in nats.
pub fn kl_gaussian(
    m1: &ArrayView1<f64>,
    c1: &ArrayView2<f64>,
    m2: &ArrayView1<f64>,
    c2: &ArrayView2<f64>,
) -> Result<f64> {
    let k = m1.len();
    if m2.len() != k || c1.nrows() != k || c2.nrows() != k {
        return Err(Error::domain("dimension mismatch in KL"));
    }
    let l1 = cholesky(c1)?;
    let l2 = cholesky(c2)?;
    // tr(C2⁻¹ C1) column by column.
    let mut trace = 0.0;
    for j in 0..k {
        let col = c1.column(j);
        let solved = cholesky_solve(&l2.view(), &col);
        trace += solved[j];
    }
    let diff = (m2 - m1).to_owned();
    let quad = cholesky_solve(&l2.view(), &diff.view()).dot(&diff);
    let logdet1 = cholesky_logdet(&l1.view());
    let logdet2 = cholesky_logdet(&l2.view());
    Ok(0.5 * (trace + quad - k as f64 + logdet2 - logdet1))
}

const SAMPLES_MAGIC: u64 = 0x534d_504c_5f31; // "SMPL_1"

/// Writes samples in the flat binary layout (n, D as u64, then the time the
/// samples approximate, then row-major values, all little-endian).
pub fn write_samples_binary(path: &Path, samples: &ArrayView2<f64>, t: f64) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&SAMPLES_MAGIC.to_le_bytes())?;
    out.write_all(&(samples.nrows() as u64).to_le_bytes())?;
    out.write_all(&(samples.ncols() as u64).to_le_bytes())?;
    out.write_all(&t.to_le_bytes())?;
    for x in samples.iter() {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples_binary(path: &Path) -> Result<(Array2<f64>, f64)> {
    let mut input = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    if u64::from_le_bytes(buf) != SAMPLES_MAGIC {
        return Err(Error::format("not a samples file".to_string()));
    }
    input.read_exact(&mut buf)?;
    let n = u64::from_le_bytes(buf) as usize;
    input.read_exact(&mut buf)?;
    let d = u64::from_le_bytes(buf) as usize;
    input.read_exact(&mut buf)?;
    let t = f64::from_le_bytes(buf);
    let mut data = vec![0.0f64; n * d];
    for x in data.iter_mut() {
        input.read_exact(&mut buf)?;
        *x = f64::from_le_bytes(buf);
    }
    let samples = Array2::from_shape_vec((n, d), data).map_err(|e| Error::format(e.to_string()))?;
    Ok((samples, t))
}

/// Writes samples as CSV, one row per sample.
pub fn write_samples_csv(
    path: &Path,
    samples: &ArrayView2<f64>,
    t: f64,
    fingerprint: Option<&str>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    if let Some(fp) = fingerprint {
        writeln!(out, "# fingerprint={fp}")?;
    }
    writeln!(out, "# t={t}")?;
    let header: Vec<String> = (0..samples.ncols()).map(|j| format!("x_{j}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for row in samples.rows() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mean_se;
    use crate::rng::stream;
    use crate::schedule::{make_time_grid, ScheduleParams};
    use crate::targets::{random_orthonormal, IndependentModel, LatentMixture};
    use ndarray::array;

    #[test]
    fn ei_step_moments_match_closed_form() {
        let mut rng = stream(70, 0);
        let gamma = 0.3;
        let y0 = 1.4;
        let s = -0.8;
        let n = 40_000;
        let mut draws = Vec::with_capacity(n);
        let y = array![y0];
        let score = array![s];
        for _ in 0..n {
            draws.push(ei_step(&y.view(), &score.view(), gamma, &mut rng).unwrap()[0]);
        }
        let (mean, se) = mean_se(&draws);
        let (expect_mean, expect_var) = ei_exact_moments(y0, 0.0, s, gamma);
        assert!(
            (mean - expect_mean).abs() <= 3.0 * se,
            "mean {mean} vs {expect_mean} (se {se})"
        );
        let sq: Vec<f64> = draws.iter().map(|d| (d - mean) * (d - mean)).collect();
        let (var, var_se) = mean_se(&sq);
        assert!(
            (var - expect_var).abs() <= 4.0 * var_se,
            "variance {var} vs {expect_var}"
        );
    }

    #[test]
    fn em_moments_converge_to_ei_moments() {
        // The Euler–Maruyama reference approaches the exact integrator at
        // rate 1/substeps across a spread of step sizes and start moments.
        for &gamma in &[0.01, 0.05, 0.2, 0.5, 0.8] {
            for &(mu0, v0, s) in &[(0.0, 1.0, 0.0), (1.5, 0.3, -1.0), (-0.7, 2.0, 0.4)] {
                let exact = ei_exact_moments(mu0, v0, s, gamma);
                let coarse = em_reference_moments(mu0, v0, s, gamma, 1_000);
                let fine = em_reference_moments(mu0, v0, s, gamma, 1_000_000);
                let err_coarse =
                    (coarse.0 - exact.0).abs().max((coarse.1 - exact.1).abs());
                let err_fine = (fine.0 - exact.0).abs().max((fine.1 - exact.1).abs());
                assert!(
                    err_fine < 1e-4 && err_fine < err_coarse.max(1e-12),
                    "gamma {gamma}: coarse {err_coarse:.2e}, fine {err_fine:.2e}"
                );
            }
        }
    }

    #[test]
    fn reverse_chain_preserves_standard_gaussian() {
        // N(0, I) is a fixed point of the whole pipeline: the forward
        // process keeps it invariant and the reverse chain's every step has
        // it as the exact stationary law. Freezing the score across a step
        // still inflates the variance by O(gap) per step, so the grid must
        // be fine enough for that bias to sit inside the tolerances.
        let mut rng = stream(71, 0);
        let u = random_orthonormal(3, 3, &mut rng).unwrap();
        let target = Target::Independent(
            IndependentModel::new(u, vec![LatentMixture::standard_gaussian(3)]).unwrap(),
        );
        let params = ScheduleParams::new(3.0, 256, 0.05).unwrap();
        let grid = make_time_grid(&params).unwrap();
        let provider = OracleProvider::for_grid(&target, &grid).unwrap();
        let samples = run_reverse(&provider, &grid, 20_000, &mut rng).unwrap();
        let (mean, cov) = gaussian_fit(&samples.view());
        for m in mean.iter() {
            assert!(m.abs() < 0.03, "mean component {m}");
        }
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov[[i, j]] - expect).abs() < 0.05,
                    "cov[{i},{j}] = {}",
                    cov[[i, j]]
                );
            }
        }
        let kl = kl_gaussian(
            &mean.view(),
            &cov.view(),
            &Array1::zeros(3).view(),
            &Array2::<f64>::eye(3).view(),
        )
        .unwrap();
        assert!(kl < 0.01, "KL divergence {kl}");
    }

    #[test]
    fn provider_coverage_is_checked_before_sampling() {
        let mut rng = stream(72, 0);
        let u = random_orthonormal(2, 2, &mut rng).unwrap();
        let target = Target::Independent(
            IndependentModel::new(u, vec![LatentMixture::standard_gaussian(2)]).unwrap(),
        );
        let grid_a = make_time_grid(&ScheduleParams::new(2.0, 8, 0.25).unwrap()).unwrap();
        let grid_b = make_time_grid(&ScheduleParams::new(2.5, 8, 0.25).unwrap()).unwrap();
        let provider = OracleProvider::for_grid(&target, &grid_a).unwrap();
        let err = run_reverse(&provider, &grid_b, 10, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Provider(_)));
    }

    #[test]
    fn kl_gaussian_closed_forms() {
        let z = Array1::<f64>::zeros(3);
        let eye = Array2::<f64>::eye(3);
        let kl = kl_gaussian(&z.view(), &eye.view(), &z.view(), &eye.view()).unwrap();
        assert!(kl.abs() < 1e-14);
        let mu = array![0.5, -0.5, 1.0];
        let kl = kl_gaussian(&mu.view(), &eye.view(), &z.view(), &eye.view()).unwrap();
        assert!((kl - 0.5 * mu.dot(&mu)).abs() < 1e-12);
        let a = 1.7;
        let scaled = Array2::<f64>::eye(3) * a;
        let kl = kl_gaussian(&z.view(), &scaled.view(), &z.view(), &eye.view()).unwrap();
        let expect = 0.5 * 3.0 * (a - 1.0 - a.ln());
        assert!((kl - expect).abs() < 1e-12);
        // Asymmetry in the other direction.
        let kl_rev = kl_gaussian(&z.view(), &eye.view(), &z.view(), &scaled.view()).unwrap();
        let expect_rev = 0.5 * 3.0 * (1.0 / a - 1.0 + a.ln());
        assert!((kl_rev - expect_rev).abs() < 1e-12);
    }

    #[test]
    fn samples_roundtrip_binary() {
        let mut rng = stream(73, 0);
        let samples = crate::rng::normal_matrix(&mut rng, 25, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.bin");
        write_samples_binary(&path, &samples.view(), 0.05).unwrap();
        let (back, t) = read_samples_binary(&path).unwrap();
        assert_eq!(samples, back);
        assert_eq!(t, 0.05);
    }

    #[test]
    fn trained_model_set_serves_its_own_grid() {
        // Wires training output into the sampler interface; statistical
        // quality is covered by the integration suite.
        let mut rng = stream(74, 0);
        let x0 = crate::rng::normal_matrix(&mut rng, 200, 2);
        let params = ScheduleParams::new(2.0, 4, 0.25).unwrap();
        let grid = make_time_grid(&params).unwrap();
        let cfg = crate::train::TrainConfig {
            width: 16,
            epochs: 2,
            batch_size: 64,
            seed: 74,
            radius: crate::train::RadiusPolicy::Fixed { radius: 20.0 },
            ..Default::default()
        };
        let (set, _) = crate::train::train_all_timesteps(&grid, &x0.view(), &cfg).unwrap();
        let samples = run_reverse(&set, &grid, 50, &mut rng).unwrap();
        assert_eq!(samples.dim(), (50, 2));
        assert!(samples.iter().all(|x| x.is_finite()));
    }
}

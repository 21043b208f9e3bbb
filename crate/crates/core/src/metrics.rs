//! Quantitative evaluation: score risks, sampling error decompositions, and
//! distributional two-sample diagnostics.
//!
//! The central quantity is the per-timestep score risk
//! E‖s(x_t) − ∇log p_t(x_t)‖², estimated by Monte Carlo against the exact
//! oracle, and its grid-weighted aggregate Σ_k γ_k · risk(T − τ_{k+1}),
//! which is the quantity the sampler's output error tracks.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::mean_se;
use crate::net::ShallowScoreNet;
use crate::oracle::ScoreOracle;
use crate::sampler::ScoreProvider;
use crate::schedule::{ou_coefficients, TimeGrid};
use crate::targets::{LatentMixture, Target};
use crate::train::ScoreModelSet;

/// Anything that maps a batch of points to score vectors.
pub trait ScoreEval {
    fn dim(&self) -> usize;
    fn eval_batch(&self, x: &ArrayView2<f64>) -> Array2<f64>;
}

impl ScoreEval for ShallowScoreNet {
    fn dim(&self) -> usize {
        ShallowScoreNet::dim(self)
    }

    fn eval_batch(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.forward_batch(x)
    }
}

impl ScoreEval for ScoreOracle {
    fn dim(&self) -> usize {
        ScoreOracle::dim(self)
    }

    fn eval_batch(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.score_batch(x)
    }
}

/// The identically-zero score, the natural baseline: its risk equals
/// E‖∇log p_t‖².
pub struct ZeroScore {
    pub dim: usize,
}

impl ScoreEval for ZeroScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_batch(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        Array2::zeros((x.nrows(), self.dim))
    }
}

/// A Monte Carlo risk estimate at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub t: f64,
    pub estimate: f64,
    pub se: f64,
    pub n_mc: usize,
}

/// Estimates E‖s(x_t) − ∇log p_t(x_t)‖² for `model` against the exact
/// oracle of `target`, drawing x_t ~ p_t fresh from the RNG.
pub fn score_risk(
    target: &Target,
    model: &dyn ScoreEval,
    t: f64,
    n_mc: usize,
    rng: &mut ChaCha12Rng,
) -> Result<RiskEstimate> {
    if n_mc == 0 {
        return Err(Error::domain("need at least one Monte Carlo sample"));
    }
    if model.dim() != target.ambient_dim() {
        return Err(Error::domain(format!(
            "model dimension {} does not match target dimension {}",
            model.dim(),
            target.ambient_dim()
        )));
    }
    let oracle = ScoreOracle::for_target(target, t)?;
    let coeff = ou_coefficients(t)?;
    let mut sq_errors = Vec::with_capacity(n_mc);
    let chunk = 4096;
    let mut left = n_mc;
    while left > 0 {
        let take = left.min(chunk);
        let x0 = target.sample_x0(take, rng);
        let mut xt = x0.mapv(|v| coeff.m * v);
        for v in xt.iter_mut() {
            let g: f64 = rand::Rng::sample(rng, StandardNormal);
            *v += coeff.sigma * g;
        }
        let predicted = model.eval_batch(&xt.view());
        let exact = oracle.score_batch(&xt.view());
        for (p, e) in predicted.rows().into_iter().zip(exact.rows()) {
            let d: f64 = p
                .iter()
                .zip(e.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sq_errors.push(d);
        }
        left -= take;
    }
    let (estimate, se) = mean_se(&sq_errors);
    Ok(RiskEstimate {
        t,
        estimate,
        se,
        n_mc,
    })
}

/// One reverse step's contribution to the weighted score error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedRow {
    /// Reverse step index k.
    pub index: usize,
    /// Forward time T − τ_{k+1} whose model serves this step.
    pub t: f64,
    /// Step size γ_k.
    pub gamma: f64,
    pub risk: f64,
    pub se: f64,
}

/// The grid-weighted score error Σ_k γ_k · risk(T − τ_{k+1}).
///
/// `total` is the plain left-to-right sum of `gamma * risk` over `rows`, so
/// recomputing it from the rows reproduces it bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedScoreError {
    pub rows: Vec<WeightedRow>,
    pub total: f64,
    pub total_se: f64,
}

pub fn weighted_score_error(
    models: &ScoreModelSet,
    target: &Target,
    grid: &TimeGrid,
    n_mc: usize,
    rng: &mut ChaCha12Rng,
) -> Result<WeightedScoreError> {
    models.ensure_covers(grid)?;
    let n_steps = grid.params.steps;
    let mut rows = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let idx = n_steps - 1 - k;
        let entry = &models.entries[idx];
        let est = score_risk(target, &entry.net, entry.t, n_mc, rng)?;
        rows.push(WeightedRow {
            index: k,
            t: entry.t,
            gamma: grid.gaps[k],
            risk: est.estimate,
            se: est.se,
        });
    }
    let mut total = 0.0;
    let mut var = 0.0;
    for row in &rows {
        total += row.gamma * row.risk;
        var += (row.gamma * row.se) * (row.gamma * row.se);
    }
    Ok(WeightedScoreError {
        rows,
        total,
        total_se: var.sqrt(),
    })
}

/// Mean squared distance of rows to the column span of `u`:
/// (1/n) Σ ‖x − U Uᵀ x‖².
pub fn subspace_residual(samples: &ArrayView2<f64>, u: &ArrayView2<f64>) -> Result<f64> {
    if samples.ncols() != u.nrows() {
        return Err(Error::domain("samples and frame dimensions disagree"));
    }
    if samples.nrows() == 0 {
        return Err(Error::domain("no samples"));
    }
    let z = samples.dot(u);
    let back = z.dot(&u.t());
    let per_row: Vec<f64> = samples
        .rows()
        .into_iter()
        .zip(back.rows())
        .map(|(x, p)| {
            x.iter()
                .zip(p.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    Ok(crate::linalg::pairwise_sum(&per_row) / samples.nrows() as f64)
}

/// Energy distance 2·E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖ between two samples, with
/// the diagonal excluded from the within-sample means (U-statistic).
pub fn energy_distance(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::domain("sample dimensions disagree"));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::domain("each sample needs at least two rows"));
    }
    let within_a = mean_pairwise_distance(a, a, true);
    let within_b = mean_pairwise_distance(b, b, true);
    let cross = mean_pairwise_distance(a, b, false);
    Ok(2.0 * cross - within_a - within_b)
}

fn mean_pairwise_distance(a: &ArrayView2<f64>, b: &ArrayView2<f64>, same: bool) -> f64 {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..na {
        let start = if same { i + 1 } else { 0 };
        for j in start..nb {
            let d: f64 = a
                .row(i)
                .iter()
                .zip(b.row(j).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            sum += d.sqrt();
            count += 1;
        }
    }
    // Unordered within-sample pairs count each distance once; the mean over
    // ordered pairs is identical by symmetry.
    sum / count as f64
}

/// Result of a permutation two-sample test on the energy distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyTest {
    pub observed: f64,
    /// Energy distances of label permutations of the pooled sample.
    pub null: Vec<f64>,
    /// Rows actually used per sample after capping.
    pub used_a: usize,
    pub used_b: usize,
}

impl EnergyTest {
    /// Empirical upper quantile of the permutation null.
    pub fn null_quantile(&self, q: f64) -> f64 {
        assert!((0.0..=1.0).contains(&q), "quantile must lie in [0,1]");
        let mut sorted = self.null.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
        let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        sorted[rank - 1]
    }

    /// Fraction of null draws at or above the observed statistic.
    pub fn p_value(&self) -> f64 {
        let hits = self.null.iter().filter(|v| **v >= self.observed).count();
        (hits + 1) as f64 / (self.null.len() + 1) as f64
    }
}

/// Permutation test for equality of distributions, with each sample first
/// subsampled to at most `cap` rows to bound the quadratic pair cost.
pub fn energy_distance_test(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    cap: usize,
    n_perm: usize,
    rng: &mut ChaCha12Rng,
) -> Result<EnergyTest> {
    if a.ncols() != b.ncols() {
        return Err(Error::domain("sample dimensions disagree"));
    }
    if cap < 2 || n_perm == 0 {
        return Err(Error::domain("need cap at least 2 and at least one permutation"));
    }
    let sub_a = subsample_rows(a, cap, rng);
    let sub_b = subsample_rows(b, cap, rng);
    let (na, nb) = (sub_a.nrows(), sub_b.nrows());
    if na < 2 || nb < 2 {
        return Err(Error::domain("each sample needs at least two rows"));
    }
    // One distance matrix over the pooled rows; each permutation then only
    // reindexes it.
    let m = na + nb;
    let mut pooled = Array2::zeros((m, a.ncols()));
    pooled.slice_mut(ndarray::s![..na, ..]).assign(&sub_a);
    pooled.slice_mut(ndarray::s![na.., ..]).assign(&sub_b);
    let mut dist = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in i + 1..m {
            let d: f64 = pooled
                .row(i)
                .iter()
                .zip(pooled.row(j).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let d = d.sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let ed_of = |idx: &[usize]| -> f64 {
        let (ga, gb) = idx.split_at(na);
        let mut wa = 0.0;
        for (p, &i) in ga.iter().enumerate() {
            for &j in &ga[p + 1..] {
                wa += dist[[i, j]];
            }
        }
        wa /= (na * (na - 1) / 2) as f64;
        let mut wb = 0.0;
        for (p, &i) in gb.iter().enumerate() {
            for &j in &gb[p + 1..] {
                wb += dist[[i, j]];
            }
        }
        wb /= (nb * (nb - 1) / 2) as f64;
        let mut cross = 0.0;
        for &i in ga {
            for &j in gb {
                cross += dist[[i, j]];
            }
        }
        cross /= (na * nb) as f64;
        2.0 * cross - wa - wb
    };
    let identity: Vec<usize> = (0..m).collect();
    let observed = ed_of(&identity);
    let mut null = Vec::with_capacity(n_perm);
    let mut perm = identity;
    for _ in 0..n_perm {
        perm.shuffle(rng);
        null.push(ed_of(&perm));
    }
    Ok(EnergyTest {
        observed,
        null,
        used_a: na,
        used_b: nb,
    })
}

fn subsample_rows(x: &ArrayView2<f64>, cap: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let n = x.nrows();
    if n <= cap {
        return x.to_owned();
    }
    let picked = rand::seq::index::sample(rng, n, cap).into_vec();
    x.select(ndarray::Axis(0), &picked)
}

/// Largest observed ratio ‖∇log π_t(z)‖ / (1 + ‖z‖) over probes z ~ π_t,
/// per requested time.
///
/// For well-conditioned latents the ratios stay within a small factor of
/// each other across the time range; a blow-up flags a target whose score
/// stiffness the time grid cannot resolve.
pub fn lipschitz_probe(
    latent: &LatentMixture,
    times: &[f64],
    n_probe: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<(f64, f64)>> {
    if n_probe == 0 || times.is_empty() {
        return Err(Error::domain("need probes and at least one time"));
    }
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let mix = crate::oracle::MixtureAtTime::from_latent(latent, t)?;
        let coeff = ou_coefficients(t)?;
        let z0 = latent.sample(n_probe, rng);
        let mut worst = 0.0_f64;
        for row in z0.rows() {
            let mut z = row.mapv(|v| coeff.m * v);
            for v in z.iter_mut() {
                let g: f64 = rand::Rng::sample(rng, StandardNormal);
                *v += coeff.sigma * g;
            }
            let s = mix.score(&z.view());
            let ratio = s.dot(&s).sqrt() / (1.0 + z.dot(&z).sqrt());
            worst = worst.max(ratio);
        }
        out.push((t, worst));
    }
    Ok(out)
}

/// Per-coordinate sample mean, for moment checks against exact laws.
pub fn sample_mean(x: &ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(ndarray::Axis(0)).expect("nonempty sample")
}

//! Synthetic target distributions with known latent structure.
//!
//! Three ambient models over a Gaussian-mixture latent: a column-orthonormal
//! subspace embedding x₀ = U z₀ with U ∈ ℝ^{D×d}, an orthogonal
//! independent-components model whose latent splits into independently drawn
//! groups, and a non-orthogonal mixed model x₀ = A z₀ that reduces to the
//! orthogonal case after whitening. Latents are restricted to Gaussian
//! mixtures (point masses allowed) so that every score the pipeline needs is
//! available in closed form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{
    frobenius_norm, orthonormalize_columns, sym_eigen, sym_inv_sqrt, sym_sqrt,
};
use crate::rng::{normal_matrix, stream};
use crate::schedule::ou_coefficients;

const ORTHONORMALITY_TOL: f64 = 1e-12;

/// One Gaussian mixture component. A zero covariance makes it a point mass.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

/// A finite Gaussian mixture over ℝ^d.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMixture {
    pub dim: usize,
    pub components: Vec<MixtureComponent>,
}

impl LatentMixture {
    /// Validates weights, shapes, and symmetry, normalizing the weights to
    /// sum to one exactly.
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::model("mixture needs at least one component"));
        }
        let dim = components[0].mean.len();
        let mut total = 0.0;
        for comp in &components {
            if !(comp.weight > 0.0) {
                return Err(Error::model(format!(
                    "component weights must be positive, got {}",
                    comp.weight
                )));
            }
            if comp.mean.len() != dim || comp.cov.nrows() != dim || comp.cov.ncols() != dim {
                return Err(Error::model("component shapes disagree"));
            }
            let asym = frobenius_norm(&(&comp.cov - &comp.cov.t()).view());
            if asym > 1e-10 * (1.0 + frobenius_norm(&comp.cov.view())) {
                return Err(Error::model("component covariance is not symmetric"));
            }
            total += comp.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::model(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        let components = components
            .into_iter()
            .map(|mut c| {
                c.weight /= total;
                c
            })
            .collect();
        Ok(LatentMixture { dim, components })
    }

    /// A single Gaussian.
    pub fn gaussian(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        Self::new(vec![MixtureComponent {
            weight: 1.0,
            mean,
            cov,
        }])
    }

    /// The standard Gaussian N(0, I_d).
    pub fn standard_gaussian(dim: usize) -> Self {
        Self::gaussian(Array1::zeros(dim), Array2::eye(dim)).expect("valid by construction")
    }

    /// An equally weighted set of point masses.
    pub fn point_masses(points: Vec<Array1<f64>>) -> Result<Self> {
        let k = points.len();
        if k == 0 {
            return Err(Error::model("need at least one point"));
        }
        let dim = points[0].len();
        Self::new(
            points
                .into_iter()
                .map(|p| MixtureComponent {
                    weight: 1.0 / k as f64,
                    mean: p,
                    cov: Array2::zeros((dim, dim)),
                })
                .collect(),
        )
    }

    /// Weighted point masses.
    pub fn weighted_point_masses(weights: Vec<f64>, points: Vec<Array1<f64>>) -> Result<Self> {
        if weights.len() != points.len() {
            return Err(Error::model("weights and points disagree in length"));
        }
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        Self::new(
            weights
                .into_iter()
                .zip(points)
                .map(|(w, p)| MixtureComponent {
                    weight: w,
                    mean: p,
                    cov: Array2::zeros((dim, dim)),
                })
                .collect(),
        )
    }

    /// E‖z₀‖² in closed form: Σ_j w_j·(tr Σ_j + ‖μ_j‖²).
    pub fn second_moment(&self) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let tr: f64 = (0..self.dim).map(|i| c.cov[[i, i]]).sum();
                c.weight * (tr + c.mean.dot(&c.mean))
            })
            .sum()
    }

    /// The second-moment root μ₀ = (E‖z₀‖²)^{1/2}.
    pub fn mu0(&self) -> f64 {
        self.second_moment().sqrt()
    }

    /// Mixture mean Σ_j w_j μ_j.
    pub fn mean(&self) -> Array1<f64> {
        let mut m = Array1::zeros(self.dim);
        for c in &self.components {
            m.scaled_add(c.weight, &c.mean);
        }
        m
    }

    /// Mixture covariance Σ_j w_j (Σ_j + μ_j μ_jᵀ) − μ̄ μ̄ᵀ.
    pub fn covariance(&self) -> Array2<f64> {
        let mean = self.mean();
        let mut cov = Array2::zeros((self.dim, self.dim));
        for c in &self.components {
            cov.scaled_add(c.weight, &c.cov);
            for i in 0..self.dim {
                for j in 0..self.dim {
                    cov[[i, j]] += c.weight * c.mean[i] * c.mean[j];
                }
            }
        }
        for i in 0..self.dim {
            for j in 0..self.dim {
                cov[[i, j]] -= mean[i] * mean[j];
            }
        }
        cov
    }

    /// True when every component is a point mass.
    pub fn is_degenerate(&self) -> bool {
        self.components
            .iter()
            .all(|c| c.cov.iter().all(|x| *x == 0.0))
    }

    /// Largest component-covariance eigenvalue, recorded as the
    /// sub-Gaussianity surrogate for diagnostics.
    pub fn max_component_eigenvalue(&self) -> Result<f64> {
        let mut best = 0.0_f64;
        for c in &self.components {
            let (w, _) = sym_eigen(&c.cov.view())?;
            best = best.max(w.iter().cloned().fold(0.0, f64::max));
        }
        Ok(best)
    }

    /// Draws n iid latents, rows of the result.
    pub fn sample(&self, n: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
        // PSD square roots once per call; sampling is then mean + F·g, which
        // covers point masses (F = 0) and rank-deficient components alike.
        let factors: Vec<Array2<f64>> = self
            .components
            .iter()
            .map(|c| sym_sqrt(&c.cov.view()).expect("validated covariance"))
            .collect();
        let mut out = Array2::zeros((n, self.dim));
        for mut row in out.rows_mut() {
            let pick: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut idx = self.components.len() - 1;
            for (j, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if pick < acc {
                    idx = j;
                    break;
                }
            }
            let g = Array1::from_shape_fn(self.dim, |_| rng.sample::<f64, _>(StandardNormal));
            let x = &self.components[idx].mean + &factors[idx].dot(&g);
            row.assign(&x);
        }
        out
    }
}

/// Subspace model x₀ = U z₀ with column-orthonormal U ∈ ℝ^{D×d}.
#[derive(Debug, Clone)]
pub struct SubspaceModel {
    pub u: Array2<f64>,
    pub latent: LatentMixture,
}

impl SubspaceModel {
    pub fn new(u: Array2<f64>, latent: LatentMixture) -> Result<Self> {
        if u.ncols() != latent.dim {
            return Err(Error::model(format!(
                "embedding has {} columns but the latent lives in dimension {}",
                u.ncols(),
                latent.dim
            )));
        }
        check_orthonormal_columns(&u.view())?;
        Ok(SubspaceModel { u, latent })
    }

    pub fn ambient_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn sample_x0(&self, n: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
        self.latent.sample(n, rng).dot(&self.u.t())
    }

    /// μ₀ of the ambient variable; the isometric embedding preserves it.
    pub fn mu0(&self) -> f64 {
        self.latent.mu0()
    }
}

/// Orthogonal independent-components model: x₀ = U z₀ with square
/// orthonormal U and z₀ split into independently drawn groups.
#[derive(Debug, Clone)]
pub struct IndependentModel {
    pub u: Array2<f64>,
    pub groups: Vec<LatentMixture>,
}

impl IndependentModel {
    pub fn new(u: Array2<f64>, groups: Vec<LatentMixture>) -> Result<Self> {
        let d = u.nrows();
        if u.ncols() != d {
            return Err(Error::model("mixing frame must be square"));
        }
        check_orthonormal_columns(&u.view())?;
        let total: usize = groups.iter().map(|g| g.dim).sum();
        if total != d {
            return Err(Error::model(format!(
                "group dimensions sum to {total}, expected {d}"
            )));
        }
        if groups.is_empty() {
            return Err(Error::model("need at least one group"));
        }
        Ok(IndependentModel { u, groups })
    }

    pub fn ambient_dim(&self) -> usize {
        self.u.nrows()
    }

    /// Contiguous coordinate ranges of the groups inside the latent vector.
    pub fn selectors(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.groups.len());
        let mut start = 0;
        for g in &self.groups {
            out.push(start..start + g.dim);
            start += g.dim;
        }
        out
    }

    pub fn sample_x0(&self, n: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
        let d = self.ambient_dim();
        let mut z = Array2::zeros((n, d));
        for (g, range) in self.groups.iter().zip(self.selectors()) {
            let zg = g.sample(n, rng);
            z.slice_mut(ndarray::s![.., range]).assign(&zg);
        }
        z.dot(&self.u.t())
    }

    pub fn mu0(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.second_moment())
            .sum::<f64>()
            .sqrt()
    }
}

/// Non-orthogonal model x₀ = A z₀ with an invertible mixing matrix and
/// independent latent groups; the whitening path reduces it to
/// [`IndependentModel`].
#[derive(Debug, Clone)]
pub struct MixedModel {
    pub a: Array2<f64>,
    pub groups: Vec<LatentMixture>,
    /// Condition number of A, recorded at construction.
    pub condition_number: f64,
}

impl MixedModel {
    pub fn new(a: Array2<f64>, groups: Vec<LatentMixture>) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d {
            return Err(Error::model("mixing matrix must be square"));
        }
        let total: usize = groups.iter().map(|g| g.dim).sum();
        if total != d {
            return Err(Error::model(format!(
                "group dimensions sum to {total}, expected {d}"
            )));
        }
        let (w, _) = sym_eigen(&a.t().dot(&a).view())?;
        let smin = w[0].max(0.0).sqrt();
        let smax = w[d - 1].max(0.0).sqrt();
        if !(smin > 0.0) || !smax.is_finite() {
            return Err(Error::model("mixing matrix is singular"));
        }
        Ok(MixedModel {
            a,
            groups,
            condition_number: smax / smin,
        })
    }

    pub fn ambient_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn selectors(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.groups.len());
        let mut start = 0;
        for g in &self.groups {
            out.push(start..start + g.dim);
            start += g.dim;
        }
        out
    }

    pub fn sample_x0(&self, n: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
        let d = self.ambient_dim();
        let mut z = Array2::zeros((n, d));
        for (g, range) in self.groups.iter().zip(self.selectors()) {
            let zg = g.sample(n, rng);
            z.slice_mut(ndarray::s![.., range]).assign(&zg);
        }
        z.dot(&self.a.t())
    }

    /// Population covariance A·Cov(z)·Aᵀ.
    pub fn population_covariance(&self) -> Array2<f64> {
        let d = self.ambient_dim();
        let mut cz = Array2::zeros((d, d));
        for (g, range) in self.groups.iter().zip(self.selectors()) {
            let cg = g.covariance();
            cz.slice_mut(ndarray::s![range.clone(), range]).assign(&cg);
        }
        self.a.dot(&cz).dot(&self.a.t())
    }

    /// Exact whitener W = Cov(x₀)^{−1/2} from the population covariance.
    pub fn population_whitener(&self) -> Result<Array2<f64>> {
        sym_inv_sqrt(&self.population_covariance().view(), 1e-12)
    }

    /// The orthogonal model seen after applying the whitener `w`.
    ///
    /// With z̄_g = Cov(z_g)^{−1/2} z_g the whitened variable is
    /// W x₀ = (W A blockdiag(Cov(z_g)^{1/2})) z̄, and the frame in front is
    /// exactly orthonormal when `w` is the population whitener.
    pub fn whitened_independent(&self, w: &ArrayView2<f64>) -> Result<IndependentModel> {
        let d = self.ambient_dim();
        let mut root = Array2::zeros((d, d));
        let mut new_groups = Vec::with_capacity(self.groups.len());
        for (idx, (g, range)) in self.groups.iter().zip(self.selectors()).enumerate() {
            let cg = g.covariance();
            let (evals, _) = sym_eigen(&cg.view())?;
            let emax = evals[evals.len() - 1];
            if !(evals[0] > 1e-12 * emax.max(0.0)) || !(emax > 0.0) {
                return Err(Error::SingularCovariance(format!(
                    "latent group {idx} has rank-deficient covariance \
                     (λ_min = {:.3e}, λ_max = {:.3e}); whitening cannot \
                     separate it into an independent-components model",
                    evals[0], emax
                )));
            }
            let sg = sym_sqrt(&cg.view())?;
            let sg_inv = sym_inv_sqrt(&cg.view(), 1e-12)?;
            root.slice_mut(ndarray::s![range.clone(), range]).assign(&sg);
            let comps = g
                .components
                .iter()
                .map(|c| MixtureComponent {
                    weight: c.weight,
                    mean: sg_inv.dot(&c.mean),
                    cov: sg_inv.dot(&c.cov).dot(&sg_inv.t()),
                })
                .collect();
            new_groups.push(LatentMixture::new(comps)?);
        }
        let frame = w.dot(&self.a).dot(&root);
        IndependentModel::new(frame, new_groups)
    }

    pub fn mu0(&self) -> f64 {
        let d = self.ambient_dim();
        let mut second = Array2::zeros((d, d));
        let mut mean_z = Array1::zeros(d);
        for (g, range) in self.groups.iter().zip(self.selectors()) {
            let cg = g.covariance();
            second.slice_mut(ndarray::s![range.clone(), range.clone()]).assign(&cg);
            mean_z.slice_mut(ndarray::s![range]).assign(&g.mean());
        }
        // E‖Az‖² = tr(A (Cov z + μ̄μ̄ᵀ) Aᵀ).
        let am = self.a.dot(&mean_z);
        let acov = self.a.dot(&second).dot(&self.a.t());
        let tr: f64 = (0..d).map(|i| acov[[i, i]]).sum();
        (tr + am.dot(&am)).sqrt()
    }
}

/// Any of the three target models, as configured for an experiment.
#[derive(Debug, Clone)]
pub enum Target {
    Subspace(SubspaceModel),
    Independent(IndependentModel),
    Mixed(MixedModel),
}

impl Target {
    pub fn ambient_dim(&self) -> usize {
        match self {
            Target::Subspace(m) => m.ambient_dim(),
            Target::Independent(m) => m.ambient_dim(),
            Target::Mixed(m) => m.ambient_dim(),
        }
    }

    pub fn sample_x0(&self, n: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
        match self {
            Target::Subspace(m) => m.sample_x0(n, rng),
            Target::Independent(m) => m.sample_x0(n, rng),
            Target::Mixed(m) => m.sample_x0(n, rng),
        }
    }

    pub fn mu0(&self) -> f64 {
        match self {
            Target::Subspace(m) => m.mu0(),
            Target::Independent(m) => m.mu0(),
            Target::Mixed(m) => m.mu0(),
        }
    }

    /// The latent dimension governing the statistical rate: d for the
    /// subspace model, the largest group dimension otherwise.
    pub fn rate_dimension(&self) -> usize {
        match self {
            Target::Subspace(m) => m.latent_dim(),
            Target::Independent(m) => m.groups.iter().map(|g| g.dim).max().unwrap_or(1),
            Target::Mixed(m) => m.groups.iter().map(|g| g.dim).max().unwrap_or(1),
        }
    }

    /// The ambient distribution written as a single Gaussian mixture.
    ///
    /// Group structure multiplies out into a product mixture, so the number
    /// of components is the product of the per-group counts; construction is
    /// refused beyond 4096 components.
    pub fn ambient_mixture(&self) -> Result<LatentMixture> {
        match self {
            Target::Subspace(m) => {
                let comps = m
                    .latent
                    .components
                    .iter()
                    .map(|c| MixtureComponent {
                        weight: c.weight,
                        mean: m.u.dot(&c.mean),
                        cov: m.u.dot(&c.cov).dot(&m.u.t()),
                    })
                    .collect();
                LatentMixture::new(comps)
            }
            Target::Independent(m) => {
                let latent = product_mixture(&m.groups)?;
                let comps = latent
                    .components
                    .iter()
                    .map(|c| MixtureComponent {
                        weight: c.weight,
                        mean: m.u.dot(&c.mean),
                        cov: m.u.dot(&c.cov).dot(&m.u.t()),
                    })
                    .collect();
                LatentMixture::new(comps)
            }
            Target::Mixed(m) => {
                let latent = product_mixture(&m.groups)?;
                let comps = latent
                    .components
                    .iter()
                    .map(|c| MixtureComponent {
                        weight: c.weight,
                        mean: m.a.dot(&c.mean),
                        cov: m.a.dot(&c.cov).dot(&m.a.t()),
                    })
                    .collect();
                LatentMixture::new(comps)
            }
        }
    }
}

/// Expands independent groups into one mixture over the concatenated space.
fn product_mixture(groups: &[LatentMixture]) -> Result<LatentMixture> {
    let dim: usize = groups.iter().map(|g| g.dim).sum();
    let count: usize = groups.iter().map(|g| g.components.len()).product();
    if count > 4096 {
        return Err(Error::model(format!(
            "product mixture would have {count} components"
        )));
    }
    let mut combos: Vec<MixtureComponent> = vec![MixtureComponent {
        weight: 1.0,
        mean: Array1::zeros(dim),
        cov: Array2::zeros((dim, dim)),
    }];
    let mut offset = 0;
    for g in groups {
        let mut next = Vec::with_capacity(combos.len() * g.components.len());
        for base in &combos {
            for c in &g.components {
                let mut mean = base.mean.clone();
                mean.slice_mut(ndarray::s![offset..offset + g.dim]).assign(&c.mean);
                let mut cov = base.cov.clone();
                cov.slice_mut(ndarray::s![offset..offset + g.dim, offset..offset + g.dim])
                    .assign(&c.cov);
                next.push(MixtureComponent {
                    weight: base.weight * c.weight,
                    mean,
                    cov,
                });
            }
        }
        combos = next;
        offset += g.dim;
    }
    LatentMixture::new(combos)
}

pub(crate) fn check_orthonormal_columns(u: &ArrayView2<f64>) -> Result<()> {
    let k = u.ncols();
    let gram = u.t().dot(u);
    let err = frobenius_norm(&(&gram - &Array2::<f64>::eye(k)).view());
    if err > ORTHONORMALITY_TOL {
        return Err(Error::model(format!(
            "columns are not orthonormal: ‖UᵀU − I‖_F = {err:.3e}"
        )));
    }
    Ok(())
}

/// Draws a Haar-distributed D×d orthonormal frame.
pub fn random_orthonormal(
    ambient_dim: usize,
    latent_dim: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    if latent_dim == 0 || latent_dim > ambient_dim {
        return Err(Error::domain(format!(
            "need 1 ≤ d ≤ D, got d = {latent_dim}, D = {ambient_dim}"
        )));
    }
    let g = normal_matrix(rng, ambient_dim, latent_dim);
    orthonormalize_columns(&g.view())
}

/// Draws a random mixing matrix with the requested condition number:
/// U₁·diag(s)·U₂ᵀ with singular values geometric from 1 down to 1/cond.
pub fn random_mixing(
    dim: usize,
    condition_number: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    if !(condition_number >= 1.0) {
        return Err(Error::domain(format!(
            "condition number must be at least 1, got {condition_number}"
        )));
    }
    let u1 = random_orthonormal(dim, dim, rng)?;
    let u2 = random_orthonormal(dim, dim, rng)?;
    let mut s = Array2::zeros((dim, dim));
    for i in 0..dim {
        let frac = if dim == 1 { 0.0 } else { i as f64 / (dim - 1) as f64 };
        s[[i, i]] = condition_number.powf(-frac);
    }
    Ok(u1.dot(&s).dot(&u2.t()))
}

/// One per-timestep training set: matched rows (x₀ⁱ, wⁱ, x_tⁱ) with
/// x_tⁱ = m_t x₀ⁱ + σ_t wⁱ exactly for the stored noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub t: f64,
    pub x0: Array2<f64>,
    pub w: Array2<f64>,
    pub xt: Array2<f64>,
    /// Seed and stream lane that produced the noise.
    pub seed: u64,
    pub lane: u64,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x0.ncols()
    }
}

/// Corrupts a clean batch forward to time `t`, drawing one standard normal
/// noise row per data row from stream `(seed, lane)`.
pub fn forward_corrupt(
    x0: &ArrayView2<f64>,
    t: f64,
    seed: u64,
    lane: u64,
) -> Result<TrainingSet> {
    let coeff = ou_coefficients(t)?;
    let mut rng = stream(seed, lane);
    let (n, d) = (x0.nrows(), x0.ncols());
    let w = normal_matrix(&mut rng, n, d);
    let mut xt = x0.to_owned();
    xt *= coeff.m;
    xt.scaled_add(coeff.sigma, &w);
    Ok(TrainingSet {
        t,
        x0: x0.to_owned(),
        w,
        xt,
        seed,
        lane,
    })
}

const TRAINING_SET_MAGIC: u64 = 0x5453_4e44_5f31; // "TSND_1"

impl TrainingSet {
    /// Writes the flat binary layout: header (n, D as u64, t as f64, seed,
    /// lane), then row-major x₀, w, x_t as little-endian f64.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&TRAINING_SET_MAGIC.to_le_bytes())?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        out.write_all(&(self.dim() as u64).to_le_bytes())?;
        out.write_all(&self.t.to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        out.write_all(&self.lane.to_le_bytes())?;
        for block in [&self.x0, &self.w, &self.xt] {
            for x in block.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let magic = read_u64(&mut input)?;
        if magic != TRAINING_SET_MAGIC {
            return Err(Error::format(format!(
                "not a training-set file: bad magic {magic:#x}"
            )));
        }
        let n = read_u64(&mut input)? as usize;
        let d = read_u64(&mut input)? as usize;
        let t = read_f64(&mut input)?;
        let seed = read_u64(&mut input)?;
        let lane = read_u64(&mut input)?;
        let mut blocks = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut data = vec![0.0f64; n * d];
            for x in data.iter_mut() {
                *x = read_f64(&mut input)?;
            }
            blocks.push(
                Array2::from_shape_vec((n, d), data)
                    .map_err(|e| Error::format(e.to_string()))?,
            );
        }
        let xt = blocks.pop().expect("three blocks");
        let w = blocks.pop().expect("two blocks");
        let x0 = blocks.pop().expect("one block");
        Ok(TrainingSet {
            t,
            x0,
            w,
            xt,
            seed,
            lane,
        })
    }

    /// Writes a CSV with one row per record for inspection.
    pub fn write_csv(&self, path: &Path, fingerprint: Option<&str>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        if let Some(fp) = fingerprint {
            writeln!(out, "# fingerprint={fp}")?;
        }
        writeln!(out, "# t={}", self.t)?;
        let d = self.dim();
        let mut header = Vec::with_capacity(3 * d);
        for prefix in ["x0", "w", "xt"] {
            for j in 0..d {
                header.push(format!("{prefix}_{j}"));
            }
        }
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row = Vec::with_capacity(3 * d);
            for block in [&self.x0, &self.w, &self.xt] {
                for j in 0..d {
                    row.push(format!("{}", block[[i, j]]));
                }
            }
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn read_u64(input: &mut impl IoRead) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(input: &mut impl IoRead) -> Result<f64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Symmetric inverse square root of the sample covariance of `x0`.
///
/// Refuses rank-deficient covariances (smallest eigenvalue at or below
/// 10⁻¹²·λ_max): data concentrated on a subspace should be modeled with the
/// subspace target instead of whitened.
pub fn estimate_whitener(x0: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, d) = (x0.nrows(), x0.ncols());
    if n <= d {
        return Err(Error::domain(format!(
            "need more samples than dimensions to whiten, got n = {n}, D = {d}"
        )));
    }
    let cov = sample_covariance(x0);
    let (w, _) = sym_eigen(&cov.view())?;
    let wmax = w[d - 1];
    if !(w[0] > 1e-12 * wmax.max(0.0)) || !(wmax > 0.0) {
        return Err(Error::SingularCovariance(format!(
            "sample covariance is rank deficient (λ_min = {:.3e}, λ_max = {:.3e}); \
             use the subspace model for data supported on a subspace",
            w[0], wmax
        )));
    }
    sym_inv_sqrt(&cov.view(), 1e-12)
}

/// Mean-centered sample covariance with the n−1 denominator.
pub fn sample_covariance(x: &ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
    let mut cov = Array2::zeros((d, d));
    let centered = x - &mean.broadcast((n, d)).expect("broadcast mean");
    ndarray::linalg::general_mat_mul(
        1.0 / (n as f64 - 1.0),
        &centered.t(),
        &centered,
        0.0,
        &mut cov,
    );
    cov
}

/// Mean squared row norm, used by moment checks.
pub fn mean_squared_norm(x: &ArrayView2<f64>) -> f64 {
    let per_row: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    crate::linalg::pairwise_sum(&per_row) / x.nrows() as f64
}

//! Shallow ReLU score networks with a mean-field path-norm constraint.
//!
//! A network of width m maps f(x) = (1/m) Σ_i u_i · relu(⟨v_i, x⟩). Its
//! path norm (1/m) Σ_i ‖u_i‖‖v_i‖ is the complexity measure the training
//! loop constrains: after every step the weights are rescaled back into the
//! path-norm ball. Since relu(z) − relu(−z) = z, paired neurons realize any
//! rank-limited linear map exactly, which pins down the budget needed for
//! the off-subspace score component.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::rng::normal_matrix;
use crate::targets::check_orthonormal_columns;

/// Width-m shallow ReLU network from ℝ^D to ℝ^D.
#[derive(Debug, Clone, PartialEq)]
pub struct ShallowScoreNet {
    /// Outer weights, one row per neuron (m × D).
    pub u: Array2<f64>,
    /// Inner weights, one row per neuron (m × D).
    pub v: Array2<f64>,
}

impl ShallowScoreNet {
    pub fn zeros(width: usize, dim: usize) -> Self {
        ShallowScoreNet {
            u: Array2::zeros((width, dim)),
            v: Array2::zeros((width, dim)),
        }
    }

    /// Random initialization with every u_i and v_i uniform on the sphere of
    /// radius `r_init`, so the initial path norm is exactly r_init².
    pub fn init_spherical(
        width: usize,
        dim: usize,
        r_init: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if width == 0 || dim == 0 {
            return Err(Error::model("network needs positive width and dimension"));
        }
        if !(r_init > 0.0) {
            return Err(Error::model(format!(
                "initialization radius must be positive, got {r_init}"
            )));
        }
        let draw = |rng: &mut ChaCha12Rng| loop {
            let mut g = normal_matrix(rng, width, dim);
            let mut ok = true;
            for mut row in g.rows_mut() {
                let norm = row.dot(&row).sqrt();
                if norm < 1e-12 {
                    ok = false;
                    break;
                }
                row.mapv_inplace(|x| x * r_init / norm);
            }
            if ok {
                return g;
            }
        };
        let u = draw(rng);
        let v = draw(rng);
        Ok(ShallowScoreNet { u, v })
    }

    pub fn width(&self) -> usize {
        self.u.nrows()
    }

    pub fn dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn forward(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        let pre = self.v.dot(x);
        let act = pre.mapv(|p| p.max(0.0));
        self.u.t().dot(&act) / self.width() as f64
    }

    pub fn forward_batch(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let pre = x.dot(&self.v.t());
        let act = pre.mapv(|p| p.max(0.0));
        act.dot(&self.u) / self.width() as f64
    }

    /// Path norm (1/m) Σ_i ‖u_i‖‖v_i‖.
    pub fn path_norm(&self) -> f64 {
        let per_neuron: Vec<f64> = self
            .u
            .rows()
            .into_iter()
            .zip(self.v.rows())
            .map(|(u, v)| u.dot(&u).sqrt() * v.dot(&v).sqrt())
            .collect();
        pairwise_sum(&per_neuron) / self.width() as f64
    }

    /// Rescales into the path-norm ball of the given radius, leaving nets
    /// already inside untouched. Both layers shrink by the same factor, so
    /// the realized function scales by radius/path_norm.
    pub fn project_to_ball(&mut self, radius: f64) {
        let pn = self.path_norm();
        if pn > radius {
            let scale = (radius / pn).sqrt();
            self.u *= scale;
            self.v *= scale;
        }
    }

    /// Lifts a latent-dimension net through an orthonormal frame: the result
    /// computes x ↦ U f(Uᵀ x) and has the same path norm.
    pub fn embed(&self, frame: &ArrayView2<f64>) -> Result<ShallowScoreNet> {
        if frame.ncols() != self.dim() {
            return Err(Error::model(format!(
                "frame maps dimension {} but the net has dimension {}",
                frame.ncols(),
                self.dim()
            )));
        }
        check_orthonormal_columns(frame)?;
        Ok(ShallowScoreNet {
            u: self.u.dot(&frame.t()),
            v: self.v.dot(&frame.t()),
        })
    }
}

/// A width-2k net that exactly computes x ↦ Σ_k c_k a_k ⟨a_k, x⟩ for unit
/// vectors a_k (the rows of `directions`), via relu(z) − relu(−z) = z.
///
/// Its path norm is 2 Σ_k |c_k|; for the off-subspace score component
/// −(1/σ_t²)(I − UUᵀ) this comes to 2(D−d)/σ_t².
pub fn exact_linear_net(coeffs: &[f64], directions: &ArrayView2<f64>) -> Result<ShallowScoreNet> {
    let k = coeffs.len();
    if k == 0 || directions.nrows() != k {
        return Err(Error::model("need one coefficient per direction"));
    }
    let dim = directions.ncols();
    for (i, row) in directions.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::model(format!(
                "direction {i} has norm {norm}, expected a unit vector"
            )));
        }
    }
    let m = 2 * k;
    let mut u = Array2::zeros((m, dim));
    let mut v = Array2::zeros((m, dim));
    for (idx, (&c, a)) in coeffs.iter().zip(directions.rows()).enumerate() {
        let scale = m as f64 * c;
        let mut u_pos = u.row_mut(2 * idx);
        u_pos.assign(&a);
        u_pos *= scale;
        v.row_mut(2 * idx).assign(&a);
        let mut u_neg = u.row_mut(2 * idx + 1);
        u_neg.assign(&a);
        u_neg *= -scale;
        let mut v_neg = v.row_mut(2 * idx + 1);
        v_neg.assign(&a);
        v_neg *= -1.0;
    }
    Ok(ShallowScoreNet { u, v })
}

/// Denoising loss of a network on corrupted rows: (1/n) Σ_i ‖f(x_tⁱ) + wⁱ/σ‖².
pub fn dsm_loss(net: &ShallowScoreNet, xt: &ArrayView2<f64>, w: &ArrayView2<f64>, sigma: f64) -> f64 {
    let per_row = dsm_row_losses(net, xt, w, sigma);
    pairwise_sum(&per_row) / xt.nrows() as f64
}

/// Per-row squared residuals ‖f(x_tⁱ) + wⁱ/σ‖², for loss and standard-error
/// estimates.
pub fn dsm_row_losses(
    net: &ShallowScoreNet,
    xt: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    sigma: f64,
) -> Vec<f64> {
    assert!(sigma > 0.0, "denoising loss needs positive noise scale");
    let mut resid = net.forward_batch(xt);
    resid.scaled_add(1.0 / sigma, w);
    resid.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Loss and its gradient with respect to both weight matrices, in one
/// forward/backward pass over the batch.
///
/// The ReLU subgradient at exactly zero is taken to be zero, so neurons
/// sitting on their kink receive no inner-weight update.
pub fn dsm_gradient(
    net: &ShallowScoreNet,
    xt: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    sigma: f64,
) -> (f64, Array2<f64>, Array2<f64>) {
    assert!(sigma > 0.0, "denoising loss needs positive noise scale");
    let n = xt.nrows() as f64;
    let m = net.width() as f64;
    let pre = xt.dot(&net.v.t());
    let act = pre.mapv(|p| p.max(0.0));
    let mut resid = act.dot(&net.u);
    resid /= m;
    resid.scaled_add(1.0 / sigma, w);
    let per_row: Vec<f64> = resid.rows().into_iter().map(|r| r.dot(&r)).collect();
    let loss = pairwise_sum(&per_row) / n;
    let gu = act.t().dot(&resid) * (2.0 / (n * m));
    let mut back = resid.dot(&net.u.t());
    back.zip_mut_with(&pre, |b, p| {
        if !(*p > 0.0) {
            *b = 0.0;
        }
    });
    let gv = back.t().dot(xt) * (2.0 / (n * m));
    (loss, gu, gv)
}

const CHECKPOINT_MAGIC: u64 = 0x534e_4554_5f31; // "SNET_1"

/// Metadata stored alongside network weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub width: usize,
    pub dim: usize,
    pub t: f64,
    pub path_norm: f64,
    /// Fingerprint of the configuration that produced the net.
    pub fingerprint: String,
}

impl ShallowScoreNet {
    /// Writes weights to `path` (binary header m, D, t, path norm, then
    /// row-major u and v as little-endian f64) and a JSON sidecar with the
    /// same metadata plus the config fingerprint at `path` + ".json".
    pub fn write_checkpoint(&self, path: &Path, t: f64, fingerprint: &str) -> Result<()> {
        let pn = self.path_norm();
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&CHECKPOINT_MAGIC.to_le_bytes())?;
        out.write_all(&(self.width() as u64).to_le_bytes())?;
        out.write_all(&(self.dim() as u64).to_le_bytes())?;
        out.write_all(&t.to_le_bytes())?;
        out.write_all(&pn.to_le_bytes())?;
        for block in [&self.u, &self.v] {
            for x in block.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        let meta = CheckpointMeta {
            width: self.width(),
            dim: self.dim(),
            t,
            path_norm: pn,
            fingerprint: fingerprint.to_string(),
        };
        let sidecar = sidecar_path(path);
        let file = File::create(sidecar)?;
        serde_json::to_writer_pretty(BufWriter::new(file), &meta)
            .map_err(|e| Error::format(e.to_string()))?;
        Ok(())
    }

    /// Reads a checkpoint and its sidecar, verifying that the stored path
    /// norm matches the weights.
    pub fn read_checkpoint(path: &Path) -> Result<(ShallowScoreNet, CheckpointMeta)> {
        let mut input = BufReader::new(File::open(path)?);
        let magic = read_u64(&mut input)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!(
                "not a checkpoint file: bad magic {magic:#x}"
            )));
        }
        let width = read_u64(&mut input)? as usize;
        let dim = read_u64(&mut input)? as usize;
        let t = read_f64(&mut input)?;
        let pn_stored = read_f64(&mut input)?;
        let read_block = |input: &mut BufReader<File>| -> Result<Array2<f64>> {
            let mut data = vec![0.0f64; width * dim];
            for x in data.iter_mut() {
                *x = read_f64(input)?;
            }
            Array2::from_shape_vec((width, dim), data).map_err(|e| Error::format(e.to_string()))
        };
        let u = read_block(&mut input)?;
        let v = read_block(&mut input)?;
        let net = ShallowScoreNet { u, v };
        let pn = net.path_norm();
        if (pn - pn_stored).abs() > 1e-9 * pn_stored.abs().max(1.0) {
            return Err(Error::format(format!(
                "checkpoint path norm {pn_stored} does not match weights ({pn})"
            )));
        }
        let sidecar = sidecar_path(path);
        let meta: CheckpointMeta = serde_json::from_reader(BufReader::new(File::open(sidecar)?))
            .map_err(|e| Error::format(e.to_string()))?;
        if meta.width != width || meta.dim != dim || meta.t != t {
            return Err(Error::format(format!(
                "checkpoint sidecar disagrees with binary header: \
                 sidecar (width {}, dim {}, t {}) vs binary (width {width}, dim {dim}, t {t})",
                meta.width, meta.dim, meta.t
            )));
        }
        Ok((net, meta))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormal_complement;
    use crate::rng::{normal_matrix, normal_vector, stream};
    use crate::schedule::ou_coefficients;
    use crate::targets::{forward_corrupt, random_orthonormal};
    use ndarray::array;

    #[test]
    fn zero_net_outputs_zero() {
        let net = ShallowScoreNet::zeros(8, 3);
        let x = array![1.0, -2.0, 0.5];
        assert!(net.forward(&x.view()).iter().all(|y| *y == 0.0));
        assert_eq!(net.path_norm(), 0.0);
    }

    #[test]
    fn batch_forward_matches_single() {
        let mut rng = stream(41, 0);
        let net = ShallowScoreNet::init_spherical(16, 4, 2.0, &mut rng).unwrap();
        let x = normal_matrix(&mut rng, 10, 4);
        let batch = net.forward_batch(&x.view());
        for (row, out) in x.rows().into_iter().zip(batch.rows()) {
            let single = net.forward(&row);
            for j in 0..4 {
                assert!((single[j] - out[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn spherical_init_has_exact_path_norm() {
        let mut rng = stream(42, 0);
        let net = ShallowScoreNet::init_spherical(64, 5, 1.7, &mut rng).unwrap();
        assert!((net.path_norm() - 1.7 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn projection_caps_path_norm_and_scales_function() {
        let mut rng = stream(43, 0);
        let mut net = ShallowScoreNet::init_spherical(32, 3, 3.0, &mut rng).unwrap();
        let x = normal_vector(&mut rng, 3);
        let before = net.forward(&x.view());
        let pn_before = net.path_norm();
        net.project_to_ball(4.0);
        assert!((net.path_norm() - 4.0).abs() < 1e-12);
        let after = net.forward(&x.view());
        let expect = 4.0 / pn_before;
        for j in 0..3 {
            assert!((after[j] - before[j] * expect).abs() < 1e-12);
        }
        // Already inside: untouched.
        let copy = net.clone();
        net.project_to_ball(100.0);
        assert_eq!(net, copy);
    }

    #[test]
    fn linear_net_reproduces_the_map() {
        let mut rng = stream(44, 0);
        let dirs = random_orthonormal(4, 2, &mut rng).unwrap();
        let dirs_t = dirs.t().to_owned();
        let coeffs = [0.7, -1.3];
        let net = exact_linear_net(&coeffs, &dirs_t.view()).unwrap();
        assert_eq!(net.width(), 4);
        let expect_pn = 2.0 * (0.7_f64.abs() + 1.3);
        assert!((net.path_norm() - expect_pn).abs() < 1e-12);
        for _ in 0..20 {
            let x = normal_vector(&mut rng, 4) * 3.0;
            let got = net.forward(&x.view());
            let mut expect = Array1::<f64>::zeros(4);
            for (k, &c) in coeffs.iter().enumerate() {
                let a = dirs.column(k);
                expect.scaled_add(c * a.dot(&x), &a);
            }
            let err: f64 = (&got - &expect).mapv(f64::abs).sum();
            assert!(err <= 1e-12 * (1.0 + x.dot(&x).sqrt()), "error {err}");
        }
    }

    #[test]
    fn linear_net_rejects_non_unit_directions() {
        let dirs = array![[2.0, 0.0]];
        assert!(exact_linear_net(&[1.0], &dirs.view()).is_err());
    }

    #[test]
    fn complement_net_realizes_off_subspace_score() {
        let mut rng = stream(45, 0);
        let (big_d, d, t) = (5, 2, 0.9);
        let u = random_orthonormal(big_d, d, &mut rng).unwrap();
        let comp = orthonormal_complement(&u.view()).unwrap();
        let coeff = ou_coefficients(t).unwrap();
        let s2 = coeff.sigma * coeff.sigma;
        let coeffs = vec![-1.0 / s2; big_d - d];
        let comp_t = comp.t().to_owned();
        let net = exact_linear_net(&coeffs, &comp_t.view()).unwrap();
        let expect_pn = 2.0 * (big_d - d) as f64 / s2;
        assert!((net.path_norm() - expect_pn).abs() < 1e-9);
        for _ in 0..10 {
            let x = normal_vector(&mut rng, big_d) * 2.0;
            let got = net.forward(&x.view());
            let proj = u.dot(&u.t().dot(&x));
            let expect = (&proj - &x) / s2;
            let err: f64 = (&got - &expect).mapv(f64::abs).sum();
            assert!(err <= 1e-10, "error {err}");
        }
    }

    #[test]
    fn embedding_preserves_path_norm_and_function() {
        let mut rng = stream(46, 0);
        let latent_net = ShallowScoreNet::init_spherical(16, 2, 1.5, &mut rng).unwrap();
        let frame = random_orthonormal(5, 2, &mut rng).unwrap();
        let ambient_net = latent_net.embed(&frame.view()).unwrap();
        assert!((ambient_net.path_norm() - latent_net.path_norm()).abs() < 1e-12);
        for _ in 0..10 {
            let x = normal_vector(&mut rng, 5);
            let direct = ambient_net.forward(&x.view());
            let z = frame.t().dot(&x);
            let lifted = frame.dot(&latent_net.forward(&z.view()));
            let err: f64 = (&direct - &lifted).mapv(f64::abs).sum();
            assert!(err < 1e-13, "error {err}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = stream(47, 0);
        let net = ShallowScoreNet::init_spherical(6, 3, 1.2, &mut rng).unwrap();
        let x0 = normal_matrix(&mut rng, 12, 3);
        let ts = forward_corrupt(&x0.view(), 0.6, 5, 0).unwrap();
        let sigma = ou_coefficients(0.6).unwrap().sigma;
        let (loss, gu, gv) = dsm_gradient(&net, &ts.xt.view(), &ts.w.view(), sigma);
        assert!((loss - dsm_loss(&net, &ts.xt.view(), &ts.w.view(), sigma)).abs() < 1e-14);
        let h = 1e-6;
        for (grad, is_u) in [(&gu, true), (&gv, false)] {
            for &(i, j) in &[(0usize, 0usize), (2, 1), (5, 2)] {
                let mut bumped = net.clone();
                let target = if is_u { &mut bumped.u } else { &mut bumped.v };
                target[[i, j]] += h;
                let up = dsm_loss(&bumped, &ts.xt.view(), &ts.w.view(), sigma);
                let target = if is_u { &mut bumped.u } else { &mut bumped.v };
                target[[i, j]] -= 2.0 * h;
                let down = dsm_loss(&bumped, &ts.xt.view(), &ts.w.view(), sigma);
                let numeric = (up - down) / (2.0 * h);
                assert!(
                    (grad[[i, j]] - numeric).abs() < 1e-5 * (1.0 + numeric.abs()),
                    "entry ({i},{j}) of {}: analytic {} vs numeric {numeric}",
                    if is_u { "u" } else { "v" },
                    grad[[i, j]]
                );
            }
        }
    }

    #[test]
    fn kink_subgradient_is_zero() {
        // All-zero inputs park every neuron on its kink: the activations
        // vanish, so both gradients must vanish even though the residual
        // w/σ does not.
        let mut rng = stream(48, 0);
        let net = ShallowScoreNet::init_spherical(8, 2, 1.0, &mut rng).unwrap();
        let xt = Array2::<f64>::zeros((5, 2));
        let w = normal_matrix(&mut rng, 5, 2);
        let (_, gu, gv) = dsm_gradient(&net, &xt.view(), &w.view(), 0.5);
        assert!(gu.iter().all(|g| *g == 0.0));
        assert!(gv.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = stream(49, 0);
        let net = ShallowScoreNet::init_spherical(12, 4, 2.3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net_000.bin");
        net.write_checkpoint(&path, 0.75, "deadbeefdeadbeef").unwrap();
        let (back, meta) = ShallowScoreNet::read_checkpoint(&path).unwrap();
        assert_eq!(net, back);
        assert_eq!(meta.t, 0.75);
        assert_eq!(meta.fingerprint, "deadbeefdeadbeef");
        assert!((meta.path_norm - net.path_norm()).abs() < 1e-15);
    }
}

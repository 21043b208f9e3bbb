//! Time parameterization of the forward and reverse processes.
//!
//! The forward process is the standard Ornstein–Uhlenbeck SDE
//! dx = −x dt + √2 dB, whose marginals interpolate the data toward N(0, I)
//! with contraction m_t = e^{−t} and noise scale σ_t = √(1 − e^{−2t}).
//! The reverse-time discretization runs on a grid that spends half its steps
//! uniformly on [0, T−1] and the other half geometrically refining toward
//! the early-stopping time ζ, where the score stiffens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// OU coefficients at a fixed time: m = e^{−t}, σ = √(1 − e^{−2t}).
///
/// m² + σ² = 1 holds to a few ulp at every t, so isotropic unit-variance
/// data stays unit variance along the whole forward process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OUCoefficients {
    pub t: f64,
    pub m: f64,
    pub sigma: f64,
}

/// Evaluates the OU coefficients at time `t ≥ 0`.
pub fn ou_coefficients(t: f64) -> Result<OUCoefficients> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::domain(format!(
            "time must be finite and nonnegative, got {t}"
        )));
    }
    let m = (-t).exp();
    // expm1 keeps σ² accurate for small t, where 1 − e^{−2t} cancels badly.
    let sigma = (-(-2.0 * t).exp_m1()).sqrt();
    Ok(OUCoefficients { t, m, sigma })
}

/// Horizon, step count, and early-stopping time of the reverse run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Horizon T, strictly greater than 1.
    pub horizon: f64,
    /// Even number of reverse steps N, at least 2·log(1/ζ).
    pub steps: usize,
    /// Early-stopping time ζ ∈ (0, 1): the smallest forward time the
    /// sampler targets.
    pub zeta: f64,
    /// Constant of the horizon rule T = c₀·log((√D ∨ μ₀)/ε).
    pub c0: f64,
    /// Constant of the step-count rule.
    pub c1: f64,
}

impl ScheduleParams {
    /// Builds parameters with the default rule constants c₀ = 2, c₁ = 1.
    pub fn new(horizon: f64, steps: usize, zeta: f64) -> Result<Self> {
        let params = ScheduleParams {
            horizon,
            steps,
            zeta,
            c0: 2.0,
            c1: 1.0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(Error::config(format!(
                "zeta must lie in (0,1), got {}",
                self.zeta
            )));
        }
        if !(self.horizon > 1.0) {
            return Err(Error::config(format!(
                "horizon must exceed 1 (got {}); the uniform half of the grid degenerates otherwise",
                self.horizon
            )));
        }
        if self.steps == 0 || self.steps % 2 != 0 {
            return Err(Error::config(format!(
                "step count must be a positive even integer, got {}",
                self.steps
            )));
        }
        let min_steps = 2.0 * (1.0 / self.zeta).ln();
        if (self.steps as f64) < min_steps {
            return Err(Error::config(format!(
                "step count {} is below 2·log(1/zeta) = {min_steps:.3}",
                self.steps
            )));
        }
        if !(self.c0 > 0.0 && self.c1 > 0.0) {
            return Err(Error::config("rule constants c0, c1 must be positive"));
        }
        Ok(())
    }

    /// The uniform bound κ on γ_k / min{1, T − τ_{k+1}} for this grid.
    pub fn kappa(&self) -> f64 {
        (2.0 * (self.horizon - 1.0) + 4.0 * (1.0 / self.zeta).ln()) / self.steps as f64
    }
}

/// The reverse-time grid τ_0 < … < τ_N and its forward-time mirror.
///
/// `forward_times[i] = T − reverse_times[N−i]` runs increasing from ζ up to
/// T − τ_1; these are the N times at which score models are trained. The
/// sampler walks them in decreasing order, one per reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub params: ScheduleParams,
    /// τ_0 … τ_N, with τ_0 = 0, τ_{N/2} = T − 1, τ_N = T − ζ.
    pub reverse_times: Vec<f64>,
    /// t_i = T − τ_{N−i} for i = 0 … N−1.
    pub forward_times: Vec<f64>,
    /// γ_k = τ_{k+1} − τ_k.
    pub gaps: Vec<f64>,
}

/// Builds the reverse grid: τ_i = 2(T−1)·i/N on the first half and
/// τ_i = T − ζ^{2i/N − 1} on the second.
pub fn make_time_grid(params: &ScheduleParams) -> Result<TimeGrid> {
    params.validate()?;
    let t_end = params.horizon;
    let n = params.steps;
    let zeta = params.zeta;
    let mut reverse_times = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let tau = if i <= n / 2 {
            // Written as (T−1)·(2i/N) so that i = N/2 yields exactly T − 1:
            // the ratio is formed first and equals 1.0 there.
            (t_end - 1.0) * ((2 * i) as f64 / n as f64)
        } else if i == n {
            t_end - zeta
        } else {
            let exponent = (2 * i) as f64 / n as f64 - 1.0;
            t_end - zeta.powf(exponent)
        };
        reverse_times.push(tau);
    }
    for pair in reverse_times.windows(2) {
        if !(pair[1] > pair[0]) {
            return Err(Error::config(format!(
                "degenerate grid: consecutive times {} and {} are not increasing",
                pair[0], pair[1]
            )));
        }
    }
    let forward_times: Vec<f64> = (0..n).map(|i| t_end - reverse_times[n - i]).collect();
    let gaps: Vec<f64> = reverse_times.windows(2).map(|p| p[1] - p[0]).collect();
    Ok(TimeGrid {
        params: *params,
        reverse_times,
        forward_times,
        gaps,
    })
}

/// Derives (T, N) from a target accuracy ε and early-stopping time ζ.
///
/// T = c₀·log((√D ∨ μ₀)/ε) and N = 2·⌈c₁·((D ∨ μ₀²)/ε²)·(log²((√D ∨ μ₀)/ε)
/// + log²(1/ζ))⌉, with N enlarged to the smallest even integer ≥ 2·log(1/ζ)
/// when the formula comes out below that floor.
pub fn schedule_from_accuracy(
    epsilon: f64,
    zeta: f64,
    ambient_dim: usize,
    mu0: f64,
    c0: f64,
    c1: f64,
) -> Result<ScheduleParams> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::config(format!(
            "epsilon must lie in (0,1), got {epsilon}"
        )));
    }
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::config(format!("zeta must lie in (0,1), got {zeta}")));
    }
    if !(mu0 > 0.0 && c0 > 0.0 && c1 > 0.0) {
        return Err(Error::config(
            "mu0 and the rule constants must be positive",
        ));
    }
    let d = ambient_dim as f64;
    let big = d.sqrt().max(mu0);
    let log_ratio = (big / epsilon).ln();
    let horizon = c0 * log_ratio;
    if !(horizon > 1.0) {
        return Err(Error::config(format!(
            "derived horizon {horizon:.4} does not exceed 1; increase c0 (got {c0}) or decrease epsilon"
        )));
    }
    let log_zeta = (1.0 / zeta).ln();
    let raw = c1 * (d.max(mu0 * mu0) / (epsilon * epsilon))
        * (log_ratio * log_ratio + log_zeta * log_zeta);
    let mut steps = 2 * raw.ceil() as usize;
    let floor = 2 * log_zeta.ceil() as usize;
    if steps < floor {
        steps = floor;
    }
    let params = ScheduleParams {
        horizon,
        steps,
        zeta,
        c0,
        c1,
    };
    params.validate()?;
    Ok(params)
}

/// The per-timestep hypothesis-class radius R_t = r̄·n^{(d+1)/(2(d+5))} + D/σ_t².
///
/// `d_latent` is the assumed latent dimension entering the exponent; `r_bar`
/// is a tunable base constant, held fixed across t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusSchedule {
    pub r_bar: f64,
    pub d_latent: usize,
    pub ambient_dim: usize,
}

impl RadiusSchedule {
    pub fn new(r_bar: f64, d_latent: usize, ambient_dim: usize) -> Result<Self> {
        if !(r_bar > 0.0) {
            return Err(Error::config(format!("r_bar must be positive, got {r_bar}")));
        }
        if d_latent == 0 || ambient_dim == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        Ok(RadiusSchedule {
            r_bar,
            d_latent,
            ambient_dim,
        })
    }

    /// Evaluates the radius at time `t > 0` for a sample budget of `n`.
    ///
    /// t = 0 is rejected: the D/σ_t² term diverges there, which is exactly
    /// why the sampler stops early at ζ.
    pub fn radius_at(&self, t: f64, n: usize) -> Result<f64> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::domain(format!(
                "radius requested at t = {t}; the schedule is defined for t > 0 only"
            )));
        }
        if n == 0 {
            return Err(Error::domain("sample count must be at least 1"));
        }
        let d = self.d_latent as f64;
        let exponent = (d + 1.0) / (2.0 * (d + 5.0));
        let sigma2 = -(-2.0 * t).exp_m1();
        Ok(self.r_bar * (n as f64).powf(exponent) + self.ambient_dim as f64 / sigma2)
    }
}

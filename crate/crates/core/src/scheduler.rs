//! Choice of the local-update count τ and the sparsity budget s per round.
//!
//! The per-round error bound is
//!
//! ```text
//! ψ(τ, s) = A·(Y + α s / τ) + B·(σ₁/s + σ₂) + C·(σ₁/s + σ₂)·(τ − 1)
//! A = 2(F − F_inf)/(η T),  B = η L / M,  C = η² L²
//! ```
//!
//! [`optimal_full`] minimises it given estimated constants, and
//! [`plan_next`] applies the constant-free cube-root law
//! `τ_k = (F_k/F_0)^{1/3} τ_0`, `s_k = (F_0/F_k)^{1/3} s_0`.

use serde::{Deserialize, Serialize};

use crate::compressor::VarianceTerms;
use crate::error::{FflError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub eta: f64,
    /// Lipschitz constant of the gradient.
    pub lipschitz: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    /// Seconds per transmitted atom.
    pub alpha: f64,
    pub workers: usize,
    /// Wall-clock horizon `T_k` the bound is evaluated over, seconds.
    pub horizon: f64,
    pub f_inf: f64,
    /// Gradient-norm-proportional variance coefficient; carried along, not used by ψ.
    pub beta: f64,
    /// Computation time per local step, seconds.
    pub compute_time: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("eta", self.eta > 0.0),
            ("lipschitz", self.lipschitz > 0.0),
            ("sigma1", self.sigma1 >= 0.0),
            ("alpha", self.alpha > 0.0),
            ("workers", self.workers >= 1),
            ("horizon", self.horizon > 0.0),
            ("f_inf", self.f_inf >= 0.0),
            ("compute_time", self.compute_time >= 0.0),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(FflError::config(key, "violates the bound-constant ranges"));
            }
        }
        Ok(())
    }

    fn coefficients(&self, f: f64) -> (f64, f64, f64) {
        let a = 2.0 * (f - self.f_inf) / (self.eta * self.horizon);
        let b = self.eta * self.lipschitz / self.workers as f64;
        let c = (self.eta * self.lipschitz).powi(2);
        (a, b, c)
    }

    /// Warn-level check that ηL(τ_ub − 1) stays small.
    pub fn small_step_margin(&self, tau_ub: usize) -> f64 {
        self.eta * self.lipschitz * (tau_ub as f64 - 1.0)
    }
}

/// ψ with τ treated as a real number.
pub fn psi_continuous(tau: f64, s: f64, p: &BoundParams, f: f64) -> f64 {
    let (a, b, c) = p.coefficients(f);
    let var = p.sigma1 / s + p.sigma2;
    a * (p.compute_time + p.alpha * s / tau) + b * var + c * var * (tau - 1.0)
}

pub fn psi(tau: usize, s: f64, p: &BoundParams, f: f64) -> f64 {
    psi_continuous(tau as f64, s, p, f)
}

/// `∂ψ/∂τ = 0` solved for τ at fixed `s`: `τ² = A α s² / (C (σ₁ + σ₂ s))`.
/// Returns `+∞` when the variance term does not grow with τ.
pub fn tau_stationary(s: f64, p: &BoundParams, f: f64) -> f64 {
    let (a, _, c) = p.coefficients(f);
    let denom = c * (p.sigma1 + p.sigma2 * s);
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    (a * p.alpha * s * s / denom).sqrt()
}

/// `∂ψ/∂s = 0` solved for s at fixed τ: `s² = σ₁ (B + C(τ − 1)) τ / (A α)`.
pub fn s_stationary(tau: f64, p: &BoundParams, f: f64) -> f64 {
    let (a, b, c) = p.coefficients(f);
    let num = p.sigma1 * (b + c * (tau - 1.0)) * tau;
    if a <= 0.0 {
        return if num > 0.0 { f64::INFINITY } else { 0.0 };
    }
    (num / (a * p.alpha)).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub tau: usize,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullSolution {
    pub plan: RoundPlan,
    pub psi: f64,
    /// Continuous fixed point before rounding τ.
    pub fixed_point: (f64, f64),
    pub iterations: usize,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

const FIXED_POINT_TOL: f64 = 1e-6;
const FIXED_POINT_CAP: usize = 100;

/// Best `s ∈ [1, s_ub]` for an integer τ. ψ is convex in `s` whenever `σ₁ ≥ 0`,
/// so clamping the stationary point is exact.
fn best_s_for(tau: usize, p: &BoundParams, f: f64, s_ub: f64) -> f64 {
    let s = s_stationary(tau as f64, p, f);
    if s.is_nan() {
        1.0
    } else {
        s.clamp(1.0, s_ub)
    }
}

/// Minimise ψ over `τ ∈ {1..τ_ub}`, `s ∈ [1, s_ub]`.
///
/// Alternates the two stationarity conditions from `start` (clamped to the
/// ranges) until both move by less than 1e-6, rounds τ to the better of its
/// neighbours and re-solves s. The result is cross-checked against a scan of
/// every integer τ; if the fixed point did not converge or the scan finds a
/// lower ψ, the scan result is returned with a diagnostic.
pub fn optimal_full(p: &BoundParams, f: f64, tau_ub: usize, s_ub: f64, start: RoundPlan) -> Result<FullSolution> {
    p.validate()?;
    if tau_ub < 1 || !(s_ub >= 1.0) {
        return Err(FflError::invalid("need tau_ub >= 1 and s_ub >= 1"));
    }
    if f < p.f_inf {
        return Err(FflError::invalid(format!("loss {f} below F_inf {}", p.f_inf)));
    }
    let clamp_tau = |t: f64| if t.is_nan() { 1.0 } else { t.clamp(1.0, tau_ub as f64) };
    let clamp_s = |s: f64| if s.is_nan() { 1.0 } else { s.clamp(1.0, s_ub) };

    let mut tau = clamp_tau(start.tau as f64);
    let mut s = clamp_s(start.s);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < FIXED_POINT_CAP {
        iterations += 1;
        let next_tau = clamp_tau(tau_stationary(s, p, f));
        let next_s = clamp_s(s_stationary(next_tau, p, f));
        let moved = (next_tau - tau).abs().max((next_s - s).abs());
        tau = next_tau;
        s = next_s;
        if moved < FIXED_POINT_TOL {
            converged = true;
            break;
        }
    }

    let lo = (tau.floor() as usize).clamp(1, tau_ub);
    let hi = (tau.ceil() as usize).clamp(1, tau_ub);
    let rounded = [lo, hi]
        .into_iter()
        .map(|t| {
            let s = best_s_for(t, p, f, s_ub);
            (RoundPlan { tau: t, s }, psi(t, s, p, f))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("two candidates");

    let scanned = (1..=tau_ub)
        .map(|t| {
            let s = best_s_for(t, p, f, s_ub);
            (RoundPlan { tau: t, s }, psi(t, s, p, f))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("tau_ub >= 1");

    let slack = 1e-12 * rounded.1.abs().max(1.0);
    let (best, diagnostic) = if !converged {
        (scanned, Some(format!("fixed point did not settle in {FIXED_POINT_CAP} iterations; using the τ scan")))
    } else if scanned.1 < rounded.1 - slack {
        (
            scanned,
            Some(format!(
                "fixed point (τ={tau:.3}, s={s:.3}) is not the global minimum; using the τ scan"
            )),
        )
    } else {
        (rounded, None)
    };
    if let Some(d) = &diagnostic {
        log::debug!("{d}");
    }
    Ok(FullSolution {
        plan: best.0,
        psi: best.1,
        fixed_point: (tau, s),
        iterations,
        converged,
        diagnostic,
    })
}

/// State of the constant-free schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    /// Loss reference `F_0`.
    pub f0: f64,
    pub tau0: usize,
    pub s0: f64,
    pub tau_ub: usize,
    pub s_ub: f64,
    /// EMA weight on the previous smoothed loss.
    pub loss_smoothing: f64,
}

impl SchedulerState {
    pub fn validate(&self) -> Result<()> {
        if self.tau_ub < 1 {
            return Err(FflError::config("tau_ub", "must be at least 1"));
        }
        if self.tau0 < 1 || self.tau0 > self.tau_ub {
            return Err(FflError::config("tau0", format!("must lie in 1..={}", self.tau_ub)));
        }
        if !(self.s_ub >= 1.0) {
            return Err(FflError::config("s_ub", "must be at least 1"));
        }
        if !(self.s0 >= 1.0 && self.s0 <= self.s_ub) {
            return Err(FflError::config("s0", format!("must lie in [1, {}]", self.s_ub)));
        }
        if !(0.0..1.0).contains(&self.loss_smoothing) {
            return Err(FflError::config("loss_smoothing", "must lie in [0, 1)"));
        }
        if !(self.f0 > 0.0) {
            return Err(FflError::invalid("reference loss F_0 must be positive"));
        }
        Ok(())
    }

    pub fn initial_plan(&self) -> RoundPlan {
        RoundPlan {
            tau: self.tau0,
            s: self.s0,
        }
    }
}

/// Cube-root law before rounding and clamping.
pub fn conclusive_raw(state: &SchedulerState, f: f64) -> Result<(f64, f64)> {
    if !(f > 0.0) {
        return Err(FflError::invalid(format!("loss must be positive, got {f}")));
    }
    let ratio = f / state.f0;
    Ok((ratio.cbrt() * state.tau0 as f64, ratio.recip().cbrt() * state.s0))
}

/// Plan for the next round from the smoothed loss `f`.
/// τ is rounded to the nearest integer (ties to even) and both values clamped to range.
pub fn plan_next(state: &SchedulerState, f: f64) -> Result<RoundPlan> {
    let (tau, s) = conclusive_raw(state, f)?;
    let tau = (tau.round_ties_even().clamp(1.0, state.tau_ub as f64)) as usize;
    Ok(RoundPlan {
        tau,
        s: s.clamp(1.0, state.s_ub),
    })
}

/// Exponential moving average; `coeff` weights the previous value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSmoother {
    coeff: f64,
    value: Option<f64>,
}

impl LossSmoother {
    pub fn new(coeff: f64) -> Self {
        LossSmoother { coeff, value: None }
    }

    pub fn observe(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(prev) => self.coeff * prev + (1.0 - self.coeff) * x,
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hessian {
    pub h: [[f64; 2]; 2],
    pub psd: bool,
}

impl Hessian {
    pub fn determinant(&self) -> f64 {
        self.h[0][0] * self.h[1][1] - self.h[0][1] * self.h[1][0]
    }

    /// Eigenvalues of the symmetric 2×2 matrix, ascending.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let (a, b, d) = (self.h[0][0], self.h[0][1], self.h[1][1]);
        let mean = 0.5 * (a + d);
        let rad = (0.25 * (a - d).powi(2) + b * b).sqrt();
        (mean - rad, mean + rad)
    }
}

/// Exact Hessian of ψ in `(τ, s)`; PSD when both diagonal entries are
/// non-negative and the determinant is at least −1e-12.
pub fn hessian_check(tau: f64, s: f64, p: &BoundParams, f: f64) -> Hessian {
    let (a, b, c) = p.coefficients(f);
    let tt = 2.0 * a * p.alpha * s / tau.powi(3);
    let ts = -a * p.alpha / (tau * tau) - c * p.sigma1 / (s * s);
    let ss = 2.0 * b * p.sigma1 / s.powi(3) + 2.0 * c * (tau - 1.0) * p.sigma1 / s.powi(3);
    let h = [[tt, ts], [ts, ss]];
    let det = tt * ss - ts * ts;
    Hessian {
        h,
        psd: tt >= 0.0 && ss >= 0.0 && det >= -1e-12,
    }
}

/// Whether `(τ, s)` satisfies the sufficient conditions for convexity of ψ:
/// τ ≥ 2, a small learning rate (η ≤ 0.05), and
/// `2η²LTσ₁τ ≥ αMs²(F − F_inf)`.
pub fn convexity_conditions(tau: f64, s: f64, p: &BoundParams, f: f64) -> bool {
    tau >= 2.0
        && p.eta <= 0.05
        && 2.0 * p.eta * p.eta * p.lipschitz * p.horizon * p.sigma1 * tau
            >= p.alpha * p.workers as f64 * s * s * (f - p.f_inf)
}

/// Telemetry from one probe round.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRound {
    pub weights: Vec<f64>,
    /// Gradient of the probe objective at `weights`.
    pub gradient: Vec<f64>,
    pub worker_terms: Vec<VarianceTerms>,
    /// Mini-batch gradient variance estimate.
    pub sgd_variance: f64,
    pub atom_bits: f64,
    pub uplink_rate_bps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub params: BoundParams,
    pub from_probes: bool,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Fit `L, σ₁, σ₂, α` from probe rounds; the remaining fields come from
/// `fallback`. With fewer than two probes the fallback is returned unchanged.
pub fn estimate_constants(probes: &[ProbeRound], fallback: &BoundParams) -> Estimate {
    if probes.len() < 2 {
        return Estimate {
            params: *fallback,
            from_probes: false,
        };
    }
    let mut lipschitz: f64 = 0.0;
    for (i, x) in probes.iter().enumerate() {
        for y in &probes[i + 1..] {
            let dw = dist(&x.weights, &y.weights);
            if dw > 0.0 {
                lipschitz = lipschitz.max(dist(&x.gradient, &y.gradient) / dw);
            }
        }
    }
    let mean = |terms: &[VarianceTerms], pick: fn(&VarianceTerms) -> f64| {
        terms.iter().map(pick).sum::<f64>() / terms.len().max(1) as f64
    };
    let sigma1 = probes
        .iter()
        .map(|p| mean(&p.worker_terms, |t| t.sigma1))
        .fold(f64::NEG_INFINITY, f64::max);
    let sigma2 = probes
        .iter()
        .map(|p| mean(&p.worker_terms, |t| t.sigma2))
        .fold(f64::NEG_INFINITY, f64::max)
        + probes.iter().map(|p| p.sgd_variance).fold(0.0, f64::max);
    let alpha = probes.iter().map(|p| p.atom_bits / p.uplink_rate_bps).sum::<f64>() / probes.len() as f64;

    Estimate {
        params: BoundParams {
            lipschitz: if lipschitz > 0.0 { lipschitz } else { fallback.lipschitz },
            sigma1: sigma1.max(0.0),
            sigma2,
            alpha: if alpha > 0.0 { alpha } else { fallback.alpha },
            ..*fallback
        },
        from_probes: true,
    }
}

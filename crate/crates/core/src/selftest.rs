//! Quick property checks run by `ffl selftest`.

use crate::compressor::{decompose_elementwise, probabilities, reconstruct, sample, variance_closed_form};
use crate::data::MiniBatch;
use crate::error::Result;
use crate::nn::{loss, loss_and_grad, Activation, MlpSpec, ParameterSet};
use crate::rng::RngStream;
use crate::scheduler::{conclusive_raw, SchedulerState};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all(seed: u64) -> Vec<Check> {
    let checks: [(&'static str, fn(u64) -> Result<(bool, String)>); 5] = [
        ("unbiasedness", unbiasedness),
        ("variance_law", variance_law),
        ("probability_optimality", probability_optimality),
        ("gradient_check", gradient_check),
        ("schedule_monotonicity", schedule_monotonicity),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f(seed) {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn random_coeffs(rng: &mut RngStream, b: usize) -> Vec<f64> {
    (0..b)
        .map(|_| {
            let m = 0.1 + 3.0 * rng.uniform();
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn unbiasedness(seed: u64) -> Result<(bool, String)> {
    let mut rng = RngStream::derive(seed, "selftest-unbiased", &[]);
    let g = random_coeffs(&mut rng, 8);
    let decomp = decompose_elementwise(&g);
    let probs = probabilities(&decomp, 3.0)?;
    let n = 20_000;
    let mut sum = vec![0.0; g.len()];
    let mut sq = vec![0.0; g.len()];
    for _ in 0..n {
        let est = reconstruct(&sample(&decomp, &probs, &mut rng)?);
        for i in 0..g.len() {
            sum[i] += est[i];
            sq[i] += est[i] * est[i];
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..g.len() {
        let mean = sum[i] / n as f64;
        let var = (sq[i] / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt().max(1e-12);
        worst = worst.max((mean - g[i]).abs() / se);
    }
    Ok((worst <= 4.0, format!("max |mean − g|/stderr = {worst:.2}")))
}

fn variance_law(seed: u64) -> Result<(bool, String)> {
    let decomp = decompose_elementwise(&[3.0, 2.0, 1.0]);
    let probs = probabilities(&decomp, 2.0)?;
    let closed = variance_closed_form(&decomp, &probs);
    let mut rng = RngStream::derive(seed, "selftest-variance", &[]);
    let n = 50_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let est = reconstruct(&sample(&decomp, &probs, &mut rng)?);
        acc += est.iter().zip([3.0, 2.0, 1.0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let mc = acc / n as f64;
    let ok = (closed - 4.0).abs() < 1e-12 && (mc - closed).abs() <= 0.05 * closed;
    Ok((ok, format!("closed form {closed:.6}, Monte Carlo {mc:.4}")))
}

/// Exact pairwise exchange descent for `min Σ λᵢ²/pᵢ` s.t. `Σ pᵢ = s`, `0 < pᵢ ≤ 1`.
pub fn pairwise_minimizer(lambda: &[f64], s: f64, sweeps: usize) -> Vec<f64> {
    let b = lambda.len();
    let floor: f64 = 1e-9;
    let mut p = vec![s / b as f64; b];
    for _ in 0..sweeps {
        for i in 0..b {
            for j in i + 1..b {
                let (ai, aj) = (lambda[i].abs(), lambda[j].abs());
                let total = p[i] + p[j];
                let lo = floor.max(total - 1.0);
                let hi = 1.0f64.min(total - floor);
                let target = if ai + aj > 0.0 { ai * total / (ai + aj) } else { 0.5 * total };
                p[i] = target.clamp(lo, hi);
                p[j] = total - p[i];
            }
        }
    }
    p
}

fn probability_optimality(seed: u64) -> Result<(bool, String)> {
    let mut rng = RngStream::derive(seed, "selftest-optimality", &[]);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut feasible = true;
    for _ in 0..20 {
        let b = 2 + rng.index(5);
        let lambda = random_coeffs(&mut rng, b);
        let s = 1.0 + (b as f64 - 1.0) * rng.uniform();
        let closed = probabilities(&decompose_elementwise(&lambda), s)?.probs;
        let total: f64 = closed.iter().sum();
        feasible &= closed.iter().all(|&p| p > 0.0 && p <= 1.0) && (total - s).abs() < 1e-9;
        let obj = |p: &[f64]| lambda.iter().zip(p).map(|(l, p)| l * l / p).sum::<f64>();
        let numeric = pairwise_minimizer(&lambda, s, 200);
        worst_gap = worst_gap.max(obj(&closed) - obj(&numeric));
    }
    Ok((
        feasible && worst_gap <= 1e-6,
        format!("feasible = {feasible}, worst excess over numeric minimum = {worst_gap:.2e}"),
    ))
}

fn gradient_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = RngStream::derive(seed, "selftest-gradient", &[]);
    let mut worst: f64 = 0.0;
    for activation in [Activation::Tanh, Activation::Relu] {
        let spec = MlpSpec::new(vec![5, 7, 3], activation)?;
        let mut params = ParameterSet::init(&spec, &mut rng);
        let flat: Vec<f64> = params.flatten().iter().map(|w| w + 0.05 * rng.standard_normal()).collect();
        params.assign_flat(&flat)?;
        let batch = MiniBatch {
            features: (0..4 * 5).map(|_| rng.uniform()).collect(),
            labels: (0..4).map(|_| rng.index(3)).collect(),
            dim: 5,
        };
        let (_, grad) = loss_and_grad(&spec, &params, &batch)?;
        let analytic = grad.flatten();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fd = (loss(&spec, &params.unflatten_like(&plus)?, &batch)?
                - loss(&spec, &params.unflatten_like(&minus)?, &batch)?)
                / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn schedule_monotonicity(seed: u64) -> Result<(bool, String)> {
    let mut rng = RngStream::derive(seed, "selftest-schedule", &[]);
    let state = SchedulerState {
        f0: 2.3,
        tau0: 30,
        s0: 5.0,
        tau_ub: 30,
        s_ub: 9.0,
        loss_smoothing: 0.3,
    };
    let mut f = 2.3;
    let mut prev = conclusive_raw(&state, f)?;
    let mut monotone = true;
    for _ in 0..200 {
        f *= 1.0 - 0.05 * rng.uniform();
        let next = conclusive_raw(&state, f)?;
        monotone &= next.0 <= prev.0 && next.1 >= prev.1;
        prev = next;
    }
    let (a, b) = (0.7, 1.9);
    let (ta, sa) = conclusive_raw(&state, a)?;
    let (tb, sb) = conclusive_raw(&state, b)?;
    let ratio_err = ((ta / tb) / (a / b).cbrt() - 1.0)
        .abs()
        .max(((sa / sb) / (b / a).cbrt() - 1.0).abs());
    Ok((
        monotone && ratio_err <= 1e-12,
        format!("monotone = {monotone}, ratio-law error {ratio_err:.1e}"),
    ))
}

//! Self-checks exposed through the `oracle` subcommand.

use rand::Rng;

use crate::adaptation::AdaptMode;
use crate::error::Result;
use crate::model::{grad_block, grad_full, init_weights, BlockedWeights, ModelSpec};
use crate::rng;
use crate::simnet::Engine;

use super::config::{ExperimentConfig, Mode};
use super::runner::run_experiment;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Flattened parameters of every block, in serialization order.
fn flat_params(w: &BlockedWeights) -> Vec<Vec<f64>> {
    w.blocks()
        .iter()
        .map(|b| {
            b.w.iter()
                .chain(&b.b)
                .chain(&b.v)
                .chain(std::iter::once(&b.c))
                .map(|&p| p as f64)
                .collect()
        })
        .collect()
}

/// Per-block losses evaluated straight from flat f64 parameters.
fn losses(spec: &ModelSpec, params: &[Vec<f64>], x: &[f64], t: f64) -> Vec<f64> {
    let m = spec.hidden_dim;
    let mut input = x.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in params {
        let n = input.len();
        let (w, rest) = p.split_at(m * n);
        let (b, rest) = rest.split_at(m);
        let (v, c) = rest.split_at(m);
        let h: Vec<f64> = (0..m)
            .map(|r| (b[r] + (0..n).map(|k| w[r * n + k] * input[k]).sum::<f64>()).tanh())
            .collect();
        let y = c[0] + v.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
        out.push((y - t) * (y - t));
        input = h;
    }
    out
}

pub const FD_EPS: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-6;

pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= (FD_REL_TOL * analytic.abs().max(numeric.abs())).max(FD_ABS_FLOOR)
}

/// Compares both analytic gradients with central finite differences on
/// `instances` random models and inputs.
pub fn finite_difference_check(spec: ModelSpec, instances: usize, seed: u64) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    let mut failures = 0usize;
    for i in 0..instances {
        let mut r = rng::rng_from(rng::derive(seed, "fd_oracle", i as u64));
        let w = init_weights(&ModelSpec { seed: r.random(), ..spec })?;
        let x: Vec<f64> = (0..spec.input_dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let t = r.random_range(-2.0..2.0);
        let block = r.random_range(0..spec.num_blocks);
        let base = flat_params(&w);
        let full = grad_full(&w, &x, t)?;
        let restricted = grad_block(&w, &x, t, block)?.flat();
        for (bi, g) in full.iter().enumerate() {
            for (pi, &analytic) in g.flat().iter().enumerate() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[bi][pi] += FD_EPS;
                minus[bi][pi] -= FD_EPS;
                let lp = losses(&spec, &plus, &x, t);
                let lm = losses(&spec, &minus, &x, t);
                let total = (lp.iter().sum::<f64>() - lm.iter().sum::<f64>()) / (2.0 * FD_EPS);
                let mut pairs = vec![(analytic, total)];
                if bi == block {
                    pairs.push((restricted[pi], (lp[block] - lm[block]) / (2.0 * FD_EPS)));
                }
                for (a, n) in pairs {
                    if !within_tolerance(a, n) {
                        failures += 1;
                    }
                    worst = worst.max((a - n).abs() / (FD_REL_TOL * a.abs().max(n.abs())).max(FD_ABS_FLOOR));
                }
            }
        }
    }
    Ok(OracleCheck {
        name: "finite_difference",
        passed: failures == 0,
        detail: format!("{instances} instances, {failures} mismatches, worst error/tolerance ratio {worst:.3}"),
    })
}

/// One active client under FedFULL with `T = 1` on the listener's own
/// stream must reproduce single-agent FULL frame by frame.
pub fn degeneracy_check(base: &ExperimentConfig, engine: Engine) -> Result<OracleCheck> {
    let mut fed = base.clone();
    fed.mode = Mode::FedFull;
    fed.update_interval = 1;
    fed.fed_mad_local = AdaptMode::Full;
    fed.active.count = 1;
    fed.active.share_listener_stream = true;
    fed.schedule.start_barrier = false;
    fed.schedule.latency = 0.0;
    fed.schedule.active_period = fed.schedule.listener_period;
    let mut local = fed.clone();
    local.mode = Mode::Full;

    let a = run_experiment(&fed, engine)?.result.records;
    let b = run_experiment(&local, engine)?.result.records;
    let worst = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x.epe - y.epe).abs())
        .fold(0.0f64, f64::max);
    let passed = a.len() == b.len() && worst <= 1e-6;
    Ok(OracleCheck {
        name: "degeneracy",
        passed,
        detail: format!("{} vs {} frames, max |EPE difference| {worst:.3e}", a.len(), b.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_fd_check_passes() {
        let spec = ModelSpec::new(3, 4, 5, 0).unwrap();
        let c = finite_difference_check(spec, 5, 1).unwrap();
        assert!(c.passed, "{}", c.detail);
    }

    #[test]
    fn tolerance_has_absolute_floor() {
        assert!(within_tolerance(0.0, 5e-7));
        assert!(!within_tolerance(1.0, 1.001));
        assert!(within_tolerance(1000.0, 1000.05));
    }
}

//! Training and verification samples drawn from simulated runs.
//!
//! A sample is one full-window MHE instance at a time `t` drawn uniformly
//! from `[M_t, T]` on a fresh trajectory. Its prior is the estimate the exact
//! online estimator would have emitted at `t − M_t`, obtained by solving the
//! chain `t mod M_t, t mod M_t + M_t, …` only.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dual_target, network_input, primal_target, TargetKind};
use crate::config::Scenario;
use crate::dual::{solve_dual_from, AscentSettings, DualProblem};
use crate::mhe::{solve_primal_detailed, MheInstance, PrimalSolution};
use crate::model::{build_info_vector, simulate_trajectory, window_start};
use crate::qp::QpSettings;
use crate::{Error, Result};

/// The instance at time `t` given the prior estimate for `window_start(t)`.
pub fn instance_at(
    scenario: &Scenario,
    measurements: &[DVector<f64>],
    prior: &DVector<f64>,
    t: usize,
) -> Result<MheInstance> {
    let start = window_start(t, scenario.horizon);
    let iv = build_info_vector(measurements, &scenario.model, prior, scenario.arrival_at(start), t, scenario.horizon)?;
    MheInstance::new(iv, &scenario.noise, scenario.gamma)
}

/// Estimate emitted at time `t` by exact online MHE (`x̂_0` at `t = 0`).
pub fn exact_estimate(scenario: &Scenario, measurements: &[DVector<f64>], t: usize) -> Result<DVector<f64>> {
    let mut s = t % scenario.horizon;
    let mut est = scenario.x0_hat.clone();
    if s == 0 {
        if t == 0 {
            return Ok(est);
        }
        s = scenario.horizon;
    }
    loop {
        let inst = instance_at(scenario, measurements, &est, s)?;
        est = solve_primal_detailed(&inst, &QpSettings::default())?.solution.estimate().clone();
        if s == t {
            return Ok(est);
        }
        s += scenario.horizon;
    }
}

/// Where a sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub t: usize,
}

/// A drawn instance with its exact primal (and optionally dual) solution.
#[derive(Clone, Debug)]
pub struct Sample {
    pub meta: SampleMeta,
    pub inst: MheInstance,
    pub primal: PrimalSolution,
    pub mu: Option<Vec<DVector<f64>>>,
    pub dual_value: Option<f64>,
}

/// Draws the instance for one seed (trajectory and time both derive from it).
pub fn draw_instance(scenario: &Scenario, seed: u64) -> Result<(SampleMeta, MheInstance)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let t = rng.random_range(scenario.horizon..=scenario.steps);
    let traj = simulate_trajectory(&scenario.model, &scenario.noise, &scenario.x0, t, seed)?;
    let prior = exact_estimate(scenario, &traj.measurements, t - scenario.horizon)?;
    Ok((SampleMeta { seed, t }, instance_at(scenario, &traj.measurements, &prior, t)?))
}

/// Draws and solves one sample; `with_dual` adds the dual optimum.
pub fn solve_sample(scenario: &Scenario, seed: u64, with_dual: bool) -> Result<Sample> {
    let (meta, inst) = draw_instance(scenario, seed)?;
    let solve = solve_primal_detailed(&inst, &QpSettings::default())?;
    let (mu, dual_value) = if with_dual {
        let dp = DualProblem::new(&inst)?;
        let warm = dp.multipliers_from_primal(&solve);
        let sol = solve_dual_from(&inst, &warm, &AscentSettings::default())?;
        (Some(sol.mu), Some(sol.value))
    } else {
        (None, None)
    };
    Ok(Sample { meta, inst, primal: solve.solution, mu, dual_value })
}

/// Solves `count` samples from seeds `seed_base, seed_base + 1, …`, skipping
/// seeds whose solve fails (extra seeds make up the count). Results are in
/// seed order regardless of thread scheduling.
pub fn solve_samples(scenario: &Scenario, count: usize, seed_base: u64, with_dual: bool) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(count);
    let mut next = seed_base;
    let mut failures = 0usize;
    while out.len() < count {
        let want = count - out.len();
        let seeds: Vec<u64> = (0..want as u64).map(|k| next.wrapping_add(k)).collect();
        next = next.wrapping_add(want as u64);
        let batch: Vec<Result<Sample>> = seeds.par_iter().map(|&s| solve_sample(scenario, s, with_dual)).collect();
        for r in batch {
            match r {
                Ok(s) => out.push(s),
                Err(e) => {
                    failures += 1;
                    eprintln!("skipping sample: {e}");
                    if failures > count.max(100) {
                        return Err(e);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Feature/target table for one estimator kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: TargetKind,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    pub inputs: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
    pub meta: Vec<SampleMeta>,
}

impl Dataset {
    pub fn from_samples(samples: &[Sample], kind: TargetKind) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Domain("no samples".into()))?;
        let (n, m, h) = (first.inst.n(), first.inst.m(), first.inst.iv.horizon);
        let mut inputs = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            inputs.push(network_input(&s.inst));
            targets.push(match kind {
                TargetKind::Primal => primal_target(&s.inst, &s.primal.x0_hat, &s.primal.xi_hat),
                TargetKind::Dual => dual_target(
                    s.mu.as_ref().ok_or_else(|| Error::Domain("sample has no dual solution".into()))?,
                ),
            });
        }
        let feature_names = super::input_names(n, m, h, first.inst.iv.lti);
        let target_names = match kind {
            TargetKind::Primal => (0..n)
                .map(|i| format!("dx0_{i}"))
                .chain((0..h).flat_map(|k| (0..n).map(move |i| format!("xi_{k}_{i}"))))
                .collect(),
            TargetKind::Dual => (0..h).flat_map(|k| (0..m).map(move |j| format!("mu_{k}_{j}"))).collect(),
        };
        Ok(Self {
            kind,
            feature_names,
            target_names,
            inputs,
            targets,
            meta: samples.iter().map(|s| s.meta).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// CSV with a header row: `seed,t,<features>,<targets>`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<&str> = ["seed", "t"]
            .into_iter()
            .chain(self.feature_names.iter().map(String::as_str))
            .chain(self.target_names.iter().map(String::as_str))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for ((x, y), meta) in self.inputs.iter().zip(&self.targets).zip(&self.meta) {
            let mut row = vec![meta.seed.to_string(), meta.t.to_string()];
            row.extend(x.iter().chain(y.iter()).map(|v| format!("{v:e}")));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Draws `count` fresh samples and tabulates them for `kind`.
pub fn gen_dataset(scenario: &Scenario, count: usize, seed_base: u64, kind: TargetKind) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Domain("count must be at least 1".into()));
    }
    let samples = solve_samples(scenario, count, seed_base, kind == TargetKind::Dual)?;
    Dataset::from_samples(&samples, kind)
}

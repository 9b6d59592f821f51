//! Synthetic data with known ground truth and brute-force oracles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::TrainingRun;
use crate::inference::{max_batch_size, throughput_from_latencies, CostModel, LatencyProfile, LatencySample, Stage};
use crate::law::{ArchitectureConvention, DenseLawParams, ScalingLawParams};

/// Ground-truth constants shaped like a fitted MoE law: saturating `Ê`,
/// `alpha ≈ gamma` and a small negative interaction.
pub fn reference_params() -> ScalingLawParams {
    ScalingLawParams {
        coef_n: 480.0,
        coef_e: 0.15,
        coef_d: 1500.0,
        irreducible: 1.5,
        alpha: 0.34,
        beta: 0.6,
        gamma: 0.32,
        interaction: -0.003,
        e_start: 1.5,
        e_max: 64.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub ground_truth: ScalingLawParams,
    pub n_values: Vec<f64>,
    pub d_values: Vec<f64>,
    pub e_values: Vec<f64>,
    /// Standard deviation of the multiplicative log-normal noise.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    /// Four model sizes, five expert counts and five token counts.
    fn default() -> Self {
        Self {
            ground_truth: reference_params(),
            n_values: vec![1e8, 2e8, 3.2e8, 7.3e8],
            d_values: vec![2.5e9, 5e9, 1e10, 1.5e10, 2e10],
            e_values: vec![1.0, 4.0, 8.0, 16.0, 32.0],
            noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

/// One run per design point, ordered by N, then E, then D.
pub fn synth_runs(spec: &SynthSpec) -> Result<Vec<TrainingRun>> {
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be non-negative, got {}",
            spec.noise_sigma
        )));
    }
    spec.ground_truth.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut runs = Vec::with_capacity(spec.n_values.len() * spec.d_values.len() * spec.e_values.len());
    for &n in &spec.n_values {
        for &e in &spec.e_values {
            for &d in &spec.d_values {
                let loss = spec.ground_truth.predict_loss(n, d, e)?;
                let z: f64 = StandardNormal.sample(&mut rng);
                let val_loss = if spec.noise_sigma == 0.0 {
                    loss
                } else {
                    loss * (spec.noise_sigma * z).exp()
                };
                runs.push(TrainingRun {
                    n_dense: n,
                    d_tokens: d,
                    experts: e,
                    val_loss,
                });
            }
        }
    }
    Ok(runs)
}

/// `latency = (c0 + c1·batch + c2·model_bytes) / gpus`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineLatency {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl AffineLatency {
    pub fn eval(&self, model_bytes: f64, gpus: u32, batch: f64) -> f64 {
        (self.c0 + self.c1 * batch + self.c2 * model_bytes) / gpus as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineProfileModel {
    pub prompt: AffineLatency,
    pub decode: AffineLatency,
}

impl AffineProfileModel {
    pub fn reference() -> Self {
        Self {
            prompt: AffineLatency {
                c0: 5e-3,
                c1: 5e-3,
                c2: 1e-12,
            },
            decode: AffineLatency {
                c0: 1e-3,
                c1: 1e-5,
                c2: 1e-12,
            },
        }
    }

    pub fn stage(&self, stage: Stage) -> &AffineLatency {
        match stage {
            Stage::Prompt => &self.prompt,
            Stage::Decode => &self.decode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileGrid {
    pub model_bytes: Vec<f64>,
    pub batches: Vec<f64>,
    pub gpus: Vec<u32>,
}

impl Default for ProfileGrid {
    fn default() -> Self {
        Self {
            model_bytes: vec![1e8, 1e9, 1e10, 1e11, 1e12],
            batches: vec![1.0, 16.0, 256.0, 4096.0, 65536.0],
            gpus: (1..=8).collect(),
        }
    }
}

/// Tabulates an affine latency model on `grid`.
pub fn synth_profile(model: &AffineProfileModel, grid: &ProfileGrid) -> Result<LatencyProfile> {
    let mut samples = Vec::new();
    for &g in &grid.gpus {
        for stage in [Stage::Prompt, Stage::Decode] {
            let m = model.stage(stage);
            for &mb in &grid.model_bytes {
                for &b in &grid.batches {
                    samples.push(LatencySample {
                        stage,
                        model_bytes: mb,
                        gpus: g,
                        batch: b,
                        latency_s: m.eval(mb, g, b),
                    });
                }
            }
        }
    }
    LatencyProfile::new(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimReport {
    pub throughput: f64,
    pub measured_steps: u64,
    /// Set when `steps` did not reach past the warmup window; the figure
    /// then covers every step, ramp-up included.
    pub warmup: bool,
}

/// Cohort-level serving simulation.
///
/// Requests are tracked as fluid cohorts by tokens left to emit. Starting
/// empty, each iteration admits up to `b/n` new requests (capped by free
/// capacity), runs one prompt pass over them and one decode pass over every
/// live request, each of which emits a token. A cohort leaves after `n`
/// tokens. Throughput is counted after `2n` warmup iterations.
pub fn serve_simulate(
    model: &CostModel<'_>,
    n_dense: f64,
    experts: f64,
    gpus: u32,
    steps: u64,
) -> Result<SimReport> {
    let n_total = model.arch.total_params(n_dense, experts);
    let b = max_batch_size(n_total, n_dense, gpus, model.hw, model.geom)?;
    let model_bytes = n_total * model.hw.dtype_bytes;
    let out_len = model.hw.output_len.round().max(1.0) as usize;
    let warmup_steps = 2 * out_len as u64;
    let warmup = steps <= warmup_steps;
    if b == 0.0 {
        return Ok(SimReport {
            throughput: 0.0,
            measured_steps: 0,
            warmup,
        });
    }

    let rate = b / out_len as f64;
    // cohorts[k] holds requests with k + 1 tokens still to emit.
    let mut cohorts = vec![0.0f64; out_len];
    let mut live = 0.0;
    let mut tokens = 0.0;
    let mut elapsed = 0.0;
    let mut measured = 0;
    for step in 0..steps {
        let admit = rate.min(b - live).max(0.0);
        live += admit;
        cohorts[out_len - 1] += admit;

        let mut dt = 0.0;
        if admit > 0.0 {
            dt += model
                .profile
                .iteration_latency(Stage::Prompt, model_bytes, gpus, admit)?
                .seconds;
        }
        if live > 0.0 {
            dt += model
                .profile
                .iteration_latency(Stage::Decode, model_bytes, gpus, live)?
                .seconds;
        }
        let emitted = live;
        live -= cohorts[0];
        cohorts.rotate_left(1);
        cohorts[out_len - 1] = 0.0;

        if warmup || step >= warmup_steps {
            tokens += emitted;
            elapsed += dt;
            measured += 1;
        }
    }
    Ok(SimReport {
        throughput: if elapsed > 0.0 { tokens / elapsed } else { 0.0 },
        measured_steps: measured,
        warmup,
    })
}

/// Exhaustive log-spaced search over `N` at a fixed training budget.
/// Both endpoints are evaluated.
pub fn grid_argmin_loss(
    budget_flops: f64,
    experts: f64,
    params: &ScalingLawParams,
    arch: &ArchitectureConvention,
    n_bounds: (f64, f64),
    grid_size: usize,
) -> Result<(f64, f64)> {
    if grid_size < 2 {
        return Err(Error::InvalidArgument("grid_size must be at least 2".into()));
    }
    let (lo, hi) = (n_bounds.0.ln(), n_bounds.1.ln());
    let mut best = (f64::NAN, f64::INFINITY);
    for i in 0..grid_size {
        let n = if i == 0 {
            n_bounds.0
        } else if i == grid_size - 1 {
            n_bounds.1
        } else {
            (lo + (hi - lo) * i as f64 / (grid_size - 1) as f64).exp()
        };
        let d = arch.tokens_for_budget(budget_flops, n, experts);
        let loss = params.predict_loss(n, d, experts)?;
        if loss < best.1 {
            best = (n, loss);
        }
    }
    Ok(best)
}

/// Loss-optimal dense allocation found numerically: bisection on the
/// stationarity condition of the loss along the exact-budget curve.
pub fn dense_lagrange_oracle(budget_flops: f64, params: &DenseLawParams) -> Result<(f64, f64)> {
    params.validate()?;
    let c6 = budget_flops / 6.0;
    // d loss / d ln N along N·D = C/6; increasing in ln N.
    let slope = |ln_n: f64| {
        let n = ln_n.exp();
        let d = c6 / n;
        params.beta * params.coef_d * d.powf(-params.beta) - params.alpha * params.coef_n * n.powf(-params.alpha)
    };
    let mid = 0.5 * c6.ln();
    let (mut lo, mut hi) = (mid - 1.0, mid + 1.0);
    let mut widen = 0;
    while slope(lo) > 0.0 || slope(hi) < 0.0 {
        lo -= 2.0 * (widen + 1) as f64;
        hi += 2.0 * (widen + 1) as f64;
        widen += 1;
        if widen > 200 {
            return Err(Error::NotBracketed("dense stationarity condition".into()));
        }
    }
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if m <= lo || m >= hi {
            break;
        }
        if slope(m) < 0.0 {
            lo = m;
        } else {
            hi = m;
        }
    }
    let n = (0.5 * (lo + hi)).exp();
    Ok((n, c6 / n))
}

/// Closed-form steady-state throughput next to the simulated value.
pub fn throughput_pair(
    model: &CostModel<'_>,
    n_dense: f64,
    experts: f64,
    gpus: u32,
    steps: u64,
) -> Result<(f64, SimReport)> {
    let p = model.serving_point(n_dense, experts, gpus)?;
    let sim = serve_simulate(model, n_dense, experts, gpus, steps)?;
    Ok((throughput_from_latencies(p.batch, p.prompt_latency_s, p.decode_latency_s), sim))
}

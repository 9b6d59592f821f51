//! Serving throughput and dollar cost per generated token.
//!
//! The batch size is bounded by memory: whatever the weights leave free on
//! `G` GPUs holds the KV cache, and an average request occupies
//! `(2p + n)·h·l` cache elements over its lifetime. Each serving iteration
//! runs one prompt pass over `b/n` fresh requests and one decode pass over
//! all `b` live requests.

mod profile;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::law::ArchitectureConvention;

pub use profile::{Latency, LatencyProfile, LatencySample, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    pub gpu_mem_bytes: f64,
    pub max_gpus: u32,
    pub cost_per_gpu_second: f64,
    /// Average prompt length in tokens.
    pub prompt_len: f64,
    /// Average output length in tokens.
    pub output_len: f64,
    pub dtype_bytes: f64,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            gpu_mem_bytes: 40.0 * (1u64 << 30) as f64,
            max_gpus: 8,
            cost_per_gpu_second: 1e-3,
            prompt_len: 512.0,
            output_len: 256.0,
            dtype_bytes: 2.0,
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gpu_mem_bytes", self.gpu_mem_bytes),
            ("cost_per_gpu_second", self.cost_per_gpu_second),
            ("prompt_len", self.prompt_len),
            ("output_len", self.output_len),
            ("dtype_bytes", self.dtype_bytes),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_gpus == 0 {
            return Err(Error::InvalidArgument("max_gpus must be at least 1".into()));
        }
        Ok(())
    }

    /// Lifetime-averaged KV-cache elements per request, per unit of `h·l`.
    fn kv_elements_per_hl(&self) -> f64 {
        2.0 * self.prompt_len + self.output_len
    }
}

/// `h·l = mu·N^(2/3)` for dense-equivalent size `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryFit {
    pub mu: f64,
}

/// (hidden size, layers, non-embedding parameters) of reference dense models.
pub const REFERENCE_GEOMETRY: [(f64, f64, f64); 3] = [
    (768.0, 12.0, 81_395_712.0),
    (1024.0, 16.0, 289_406_976.0),
    (1536.0, 16.0, 679_477_248.0),
];

impl GeometryFit {
    pub fn reference() -> Self {
        fit_geometry(&REFERENCE_GEOMETRY).expect("reference rows are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu must be positive, got {}", self.mu)));
        }
        Ok(())
    }

    pub fn hidden_times_layers(&self, n_dense: f64) -> f64 {
        self.mu * n_dense.powf(2.0 / 3.0)
    }
}

impl Default for GeometryFit {
    fn default() -> Self {
        Self::reference()
    }
}

/// Least-squares `mu` through the origin for rows of `(h, l, N)`.
pub fn fit_geometry(rows: &[(f64, f64, f64)]) -> Result<GeometryFit> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("geometry fit needs at least one row".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &(h, l, n) in rows {
        if !(n > 0.0) || !(h > 0.0) || !(l > 0.0) {
            return Err(Error::InvalidArgument(format!("geometry row needs positive h, l, N: ({h}, {l}, {n})")));
        }
        let x = n.powf(2.0 / 3.0);
        num += h * l * x;
        den += x * x;
    }
    Ok(GeometryFit { mu: num / den })
}

/// Largest concurrent batch that fits beside the weights of a `n_total`
/// parameter model on `gpus` GPUs.
pub fn max_batch_size(
    n_total: f64,
    n_dense: f64,
    gpus: u32,
    hw: &HardwareConfig,
    geom: &GeometryFit,
) -> Result<f64> {
    if gpus == 0 {
        return Err(Error::InvalidArgument("gpus must be at least 1".into()));
    }
    if !(n_total > 0.0) || !(n_dense > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "parameter counts must be positive: total={n_total}, dense={n_dense}"
        )));
    }
    let available = gpus as f64 * hw.gpu_mem_bytes;
    let weights = n_total * hw.dtype_bytes;
    if weights >= available {
        return Err(Error::InsufficientMemory {
            gpus,
            required_bytes: weights,
            available_bytes: available,
            min_gpus: (weights / hw.gpu_mem_bytes).floor() as u64 + 1,
        });
    }
    let per_request = hw.kv_elements_per_hl() * geom.hidden_times_layers(n_dense) * hw.dtype_bytes;
    Ok((available - weights) / per_request)
}

/// Tokens per second for batch `b` given the two per-iteration latencies.
pub fn throughput_from_latencies(batch: f64, prompt_latency_s: f64, decode_latency_s: f64) -> f64 {
    if batch == 0.0 {
        return 0.0;
    }
    batch / (prompt_latency_s + decode_latency_s)
}

/// Serving figures for one model on one GPU count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ServingPoint {
    pub gpus: u32,
    pub batch: f64,
    pub model_bytes: f64,
    pub prompt_latency_s: f64,
    pub decode_latency_s: f64,
    pub throughput: f64,
    pub cost_per_token: f64,
    pub extrapolated: bool,
}

/// Everything needed to price a model: hardware, geometry, profile, architecture.
#[derive(Debug, Clone, Copy)]
pub struct CostModel<'a> {
    pub hw: &'a HardwareConfig,
    pub geom: &'a GeometryFit,
    pub profile: &'a LatencyProfile,
    pub arch: &'a ArchitectureConvention,
}

impl<'a> CostModel<'a> {
    pub fn new(
        hw: &'a HardwareConfig,
        geom: &'a GeometryFit,
        profile: &'a LatencyProfile,
        arch: &'a ArchitectureConvention,
    ) -> Result<Self> {
        hw.validate()?;
        geom.validate()?;
        arch.validate()?;
        Ok(Self { hw, geom, profile, arch })
    }

    pub fn serving_point(&self, n_dense: f64, experts: f64, gpus: u32) -> Result<ServingPoint> {
        let n_total = self.arch.total_params(n_dense, experts);
        let batch = max_batch_size(n_total, n_dense, gpus, self.hw, self.geom)?;
        let model_bytes = n_total * self.hw.dtype_bytes;
        let prompt = self
            .profile
            .iteration_latency(Stage::Prompt, model_bytes, gpus, batch / self.hw.output_len)?;
        let decode = self.profile.iteration_latency(Stage::Decode, model_bytes, gpus, batch)?;
        let throughput = throughput_from_latencies(batch, prompt.seconds, decode.seconds);
        if !(throughput > 0.0) {
            return Err(Error::Unservable { gpus });
        }
        Ok(ServingPoint {
            gpus,
            batch,
            model_bytes,
            prompt_latency_s: prompt.seconds,
            decode_latency_s: decode.seconds,
            throughput,
            cost_per_token: gpus as f64 * self.hw.cost_per_gpu_second / throughput,
            extrapolated: prompt.extrapolated || decode.extrapolated,
        })
    }

    pub fn throughput(&self, n_dense: f64, experts: f64, gpus: u32) -> Result<f64> {
        Ok(self.serving_point(n_dense, experts, gpus)?.throughput)
    }

    pub fn cost_per_token(&self, n_dense: f64, experts: f64, gpus: u32) -> Result<f64> {
        Ok(self.serving_point(n_dense, experts, gpus)?.cost_per_token)
    }

    /// One entry per `G` in `1..=max_gpus`, infeasible ones included as errors.
    pub fn cost_table(&self, n_dense: f64, experts: f64) -> Vec<(u32, Result<ServingPoint>)> {
        (1..=self.hw.max_gpus)
            .map(|g| (g, self.serving_point(n_dense, experts, g)))
            .collect()
    }

    /// Cheapest GPU count; near-ties go to the smaller count.
    pub fn min_cost_over_gpus(&self, n_dense: f64, experts: f64) -> Result<ServingPoint> {
        let mut best: Option<ServingPoint> = None;
        let mut last_err = None;
        for g in 1..=self.hw.max_gpus {
            match self.serving_point(n_dense, experts, g) {
                Ok(p) => {
                    let better = match &best {
                        None => true,
                        Some(b) => p.cost_per_token < b.cost_per_token * (1.0 - TIE_TOL),
                    };
                    if better {
                        best = Some(p);
                    }
                }
                Err(e @ Error::InvalidArgument(_)) => return Err(e),
                Err(Error::InsufficientMemory { .. }) => {}
                Err(e) => last_err = Some(e),
            }
        }
        best.ok_or_else(|| {
            last_err.unwrap_or_else(|| Error::ModelTooLarge {
                required_bytes: self.arch.total_params(n_dense, experts) * self.hw.dtype_bytes,
                available_bytes: self.hw.max_gpus as f64 * self.hw.gpu_mem_bytes,
                max_gpus: self.hw.max_gpus,
            })
        })
    }
}

const TIE_TOL: f64 = 1e-12;

pub fn throughput(
    n_dense: f64,
    experts: f64,
    gpus: u32,
    hw: &HardwareConfig,
    geom: &GeometryFit,
    profile: &LatencyProfile,
    arch: &ArchitectureConvention,
) -> Result<f64> {
    CostModel::new(hw, geom, profile, arch)?.throughput(n_dense, experts, gpus)
}

pub fn cost_per_token(
    n_dense: f64,
    experts: f64,
    gpus: u32,
    hw: &HardwareConfig,
    geom: &GeometryFit,
    profile: &LatencyProfile,
    arch: &ArchitectureConvention,
) -> Result<f64> {
    CostModel::new(hw, geom, profile, arch)?.cost_per_token(n_dense, experts, gpus)
}

pub fn min_cost_over_gpus(
    n_dense: f64,
    experts: f64,
    hw: &HardwareConfig,
    geom: &GeometryFit,
    profile: &LatencyProfile,
    arch: &ArchitectureConvention,
) -> Result<ServingPoint> {
    CostModel::new(hw, geom, profile, arch)?.min_cost_over_gpus(n_dense, experts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_profile(max_gpus: u32, seconds: impl Fn(u32) -> f64) -> LatencyProfile {
        let mut s = vec![];
        for g in 1..=max_gpus {
            for stage in [Stage::Prompt, Stage::Decode] {
                for m in [1e6, 1e12] {
                    for b in [1.0, 1e6] {
                        s.push(LatencySample {
                            stage,
                            model_bytes: m,
                            gpus: g,
                            batch: b,
                            latency_s: seconds(g),
                        });
                    }
                }
            }
        }
        LatencyProfile::new(s).unwrap()
    }

    fn dense_hl(hl: f64, n_dense: f64) -> GeometryFit {
        GeometryFit {
            mu: hl / n_dense.powf(2.0 / 3.0),
        }
    }

    #[test]
    fn geometry_fits() {
        let one = fit_geometry(&REFERENCE_GEOMETRY[..1]).unwrap();
        assert!((one.mu - 0.04906910255950005).abs() < 1e-15);
        assert!((GeometryFit::reference().mu - 0.033849246460112156).abs() < 1e-14);
        assert!(fit_geometry(&[]).is_err());
        assert!(fit_geometry(&[(1.0, 1.0, 0.0)]).is_err());
    }

    #[test]
    fn batch_size_hand_value() {
        let hw = HardwareConfig::default();
        let geom = dense_hl(1e4, 1e9);
        let b = max_batch_size(1e9, 1e9, 1, &hw, &geom).unwrap();
        assert!((b - 1599.5966).abs() < 1e-9);
    }

    #[test]
    fn batch_size_zero_headroom_and_doubling() {
        let hw = HardwareConfig::default();
        let geom = dense_hl(1e4, 1e9);
        let n = hw.gpu_mem_bytes / hw.dtype_bytes;
        assert!(matches!(
            max_batch_size(n, 1e9, 1, &hw, &geom),
            Err(Error::InsufficientMemory { min_gpus: 2, .. })
        ));
        assert!(matches!(
            max_batch_size(2.5 * n, 1e9, 2, &hw, &geom),
            Err(Error::InsufficientMemory { min_gpus: 3, .. })
        ));
        let free = |g: u32, nt: f64| g as f64 * hw.gpu_mem_bytes - nt * hw.dtype_bytes;
        let b1 = max_batch_size(0.5 * n, 1e9, 1, &hw, &geom).unwrap();
        // Two GPUs with twice the weights: free memory exactly doubles.
        let b2 = max_batch_size(n, 1e9, 2, &hw, &geom).unwrap();
        assert_eq!(free(2, n), 2.0 * free(1, 0.5 * n));
        assert!((b2 / b1 - 2.0).abs() < 1e-14);
    }

    #[test]
    fn constant_latency_throughput_and_cost() {
        let hw = HardwareConfig::default();
        let geom = dense_hl(1e4, 1e9);
        let arch = ArchitectureConvention::default();
        let prof = constant_profile(1, |_| 1.0);
        let m = CostModel::new(&hw, &geom, &prof, &arch).unwrap();
        let p = m.serving_point(1e9, 1.0, 1).unwrap();
        assert!((p.throughput - p.batch / 2.0).abs() < 1e-12);
        assert!((p.cost_per_token - 1.2503152357288081e-06).abs() < 1e-18);
        let hw2 = HardwareConfig {
            cost_per_gpu_second: 2e-3,
            ..hw
        };
        let c2 = cost_per_token(1e9, 1.0, 1, &hw2, &geom, &prof, &arch).unwrap();
        assert_eq!(c2, 2.0 * p.cost_per_token);
        assert_eq!(throughput_from_latencies(0.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn more_gpus_more_throughput() {
        let hw = HardwareConfig::default();
        let geom = GeometryFit::reference();
        let arch = ArchitectureConvention::default();
        let prof = constant_profile(2, |_| 0.05);
        let m = CostModel::new(&hw, &geom, &prof, &arch).unwrap();
        let p1 = m.serving_point(5e9, 8.0, 1).unwrap();
        let p2 = m.serving_point(5e9, 8.0, 2).unwrap();
        assert!(p2.batch > 2.0 * p1.batch);
        assert!(p2.throughput > p1.throughput);
    }

    #[test]
    fn min_over_gpus_tie_goes_to_fewer_gpus() {
        // Latency shrinks with G so that G·C0/T is identical at G=1 and G=2.
        let hw = HardwareConfig {
            max_gpus: 2,
            ..HardwareConfig::default()
        };
        let geom = dense_hl(1e4, 1e9);
        let arch = ArchitectureConvention::default();
        let n = 1e9;
        let b = |g: u32| max_batch_size(n, n, g, &hw, &geom).unwrap();
        let (b1, b2) = (b(1), b(2));
        let prof = constant_profile(2, |g| if g == 1 { 1.0 } else { 0.5 * b2 / b1 });
        let m = CostModel::new(&hw, &geom, &prof, &arch).unwrap();
        let c1 = m.cost_per_token(n, 1.0, 1).unwrap();
        let c2 = m.cost_per_token(n, 1.0, 2).unwrap();
        assert!(((c1 - c2) / c1).abs() < 1e-12);
        assert_eq!(m.min_cost_over_gpus(n, 1.0).unwrap().gpus, 1);

        let hw1 = HardwareConfig { max_gpus: 1, ..hw };
        let m1 = CostModel::new(&hw1, &geom, &prof, &arch).unwrap();
        assert_eq!(m1.min_cost_over_gpus(n, 1.0).unwrap().cost_per_token, c1);
    }

    #[test]
    fn infeasible_gpu_counts_are_skipped_or_reported() {
        let hw = HardwareConfig::default();
        let geom = GeometryFit::reference();
        let arch = ArchitectureConvention::default();
        let prof = constant_profile(8, |g| 1.0 / g as f64);
        let m = CostModel::new(&hw, &geom, &prof, &arch).unwrap();
        // 30e9 parameters at 2 bytes need two GPUs.
        let table = m.cost_table(30e9, 1.0);
        assert_eq!(table.len(), 8);
        assert!(matches!(table[0].1, Err(Error::InsufficientMemory { min_gpus: 2, .. })));
        assert!(m.min_cost_over_gpus(30e9, 1.0).unwrap().gpus >= 2);
        assert!(matches!(m.min_cost_over_gpus(500e9, 1.0), Err(Error::ModelTooLarge { max_gpus: 8, .. })));
    }

    #[test]
    fn hardware_json() {
        let hw: HardwareConfig = serde_json::from_str(r#"{"max_gpus": 4}"#).unwrap();
        assert_eq!(hw.max_gpus, 4);
        assert_eq!(hw.gpu_mem_bytes, 42949672960.0);
        assert!(serde_json::from_str::<HardwareConfig>(r#"{"gpus": 4}"#).is_err());
        assert!(HardwareConfig { output_len: 0.0, ..hw }.validate().is_err());
    }
}

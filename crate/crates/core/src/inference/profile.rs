use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prompt,
    Decode,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Prompt => "prompt",
            Stage::Decode => "decode",
        })
    }
}

/// One profiled latency measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySample {
    pub stage: Stage,
    pub model_bytes: f64,
    pub gpus: u32,
    pub batch: f64,
    pub latency_s: f64,
}

/// Interpolated latency, flagged when the query left the sampled hull.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latency {
    pub seconds: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone)]
struct Row {
    model_bytes: f64,
    batches: Vec<f64>,
    latencies: Vec<f64>,
}

/// Tabulated latencies keyed by (stage, gpu count), interpolated linearly in
/// batch within each model-size row and then linearly across model sizes.
#[derive(Debug, Clone)]
pub struct LatencyProfile {
    samples: Vec<LatencySample>,
    slices: BTreeMap<(Stage, u32), Vec<Row>>,
}

impl Serialize for LatencyProfile {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.samples.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LatencyProfile {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let samples = Vec::<LatencySample>::deserialize(d)?;
        LatencyProfile::new(samples).map_err(serde::de::Error::custom)
    }
}

impl LatencyProfile {
    pub fn new(samples: Vec<LatencySample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidProfile("no samples".into()));
        }
        let mut grouped: BTreeMap<(Stage, u32), Vec<LatencySample>> = BTreeMap::new();
        for s in &samples {
            if !(s.latency_s > 0.0 && s.latency_s.is_finite()) {
                return Err(Error::InvalidProfile(format!("latency must be positive, got {}", s.latency_s)));
            }
            if !(s.batch >= 1.0 && s.batch.is_finite()) {
                return Err(Error::InvalidProfile(format!("batch must be at least 1, got {}", s.batch)));
            }
            if !(s.model_bytes > 0.0 && s.model_bytes.is_finite()) {
                return Err(Error::InvalidProfile(format!("model_bytes must be positive, got {}", s.model_bytes)));
            }
            if s.gpus == 0 {
                return Err(Error::InvalidProfile("gpus must be at least 1".into()));
            }
            grouped.entry((s.stage, s.gpus)).or_default().push(*s);
        }

        let mut slices = BTreeMap::new();
        for (key, mut group) in grouped {
            group.sort_by(|a, b| a.model_bytes.total_cmp(&b.model_bytes).then(a.batch.total_cmp(&b.batch)));
            let mut rows: Vec<Row> = Vec::new();
            for s in group {
                match rows.last_mut() {
                    Some(r) if r.model_bytes == s.model_bytes => {
                        if r.batches.last() == Some(&s.batch) {
                            return Err(Error::InvalidProfile(format!(
                                "duplicate sample for {} on {} GPU(s) at model_bytes={}, batch={}",
                                key.0, key.1, s.model_bytes, s.batch
                            )));
                        }
                        r.batches.push(s.batch);
                        r.latencies.push(s.latency_s);
                    }
                    _ => rows.push(Row {
                        model_bytes: s.model_bytes,
                        batches: vec![s.batch],
                        latencies: vec![s.latency_s],
                    }),
                }
            }
            if rows.len() < 2 {
                return Err(Error::InvalidProfile(format!(
                    "{} on {} GPU(s) needs at least 2 distinct model sizes",
                    key.0, key.1
                )));
            }
            if let Some(r) = rows.iter().find(|r| r.batches.len() < 2) {
                return Err(Error::InvalidProfile(format!(
                    "{} on {} GPU(s) at model_bytes={} needs at least 2 distinct batch sizes",
                    key.0, key.1, r.model_bytes
                )));
            }
            slices.insert(key, rows);
        }
        Ok(Self { samples, slices })
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let samples: Vec<LatencySample> = serde_json::from_reader(reader)?;
        Self::new(samples)
    }

    pub fn samples(&self) -> &[LatencySample] {
        &self.samples
    }

    pub fn has_slice(&self, stage: Stage, gpus: u32) -> bool {
        self.slices.contains_key(&(stage, gpus))
    }

    pub fn gpu_counts(&self) -> Vec<u32> {
        let mut g: Vec<u32> = self.slices.keys().map(|k| k.1).collect();
        g.dedup();
        g
    }

    pub fn iteration_latency(&self, stage: Stage, model_bytes: f64, gpus: u32, batch: f64) -> Result<Latency> {
        let rows = self.slices.get(&(stage, gpus)).ok_or_else(|| Error::MissingProfileSlice {
            stage: stage.to_string(),
            gpus,
        })?;
        let sizes: Vec<f64> = rows.iter().map(|r| r.model_bytes).collect();
        let (i, t, out_m) = locate(&sizes, model_bytes);
        let (l0, out0) = along_row(&rows[i], batch);
        let (l1, out1) = along_row(&rows[i + 1], batch);
        let seconds = l0 + t * (l1 - l0);
        if !(seconds > 0.0) || !seconds.is_finite() {
            return Err(Error::NonPositiveLatency {
                stage: stage.to_string(),
                model_bytes,
                batch,
                latency: seconds,
            });
        }
        Ok(Latency {
            seconds,
            extrapolated: out_m || out0 || out1,
        })
    }
}

fn along_row(row: &Row, batch: f64) -> (f64, bool) {
    let (j, t, out) = locate(&row.batches, batch);
    let (a, b) = (row.latencies[j], row.latencies[j + 1]);
    (a + t * (b - a), out)
}

/// Segment index, fractional position within it, and whether `x` lies outside
/// the knots. Outside the range the end segment is extended.
fn locate(knots: &[f64], x: f64) -> (usize, f64, bool) {
    let last = knots.len() - 1;
    let outside = x < knots[0] || x > knots[last];
    let i = match knots.partition_point(|&k| k <= x) {
        0 => 0,
        p => (p - 1).min(last - 1),
    };
    let t = (x - knots[i]) / (knots[i + 1] - knots[i]);
    (i, t, outside)
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::ModelConfig;
use crate::noise::CorruptionLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    /// `None` when the bucket is empty.
    pub value: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub model: String,
    /// One entry per corruption label, in label order.
    pub buckets: BTreeMap<String, BucketStat>,
    /// All non-Original positions pooled.
    pub corrupted: BucketStat,
    pub per_layer: Vec<f64>,
    pub scalars: BTreeMap<String, f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl ProbeReport {
    pub fn bucket(&self, label: CorruptionLabel) -> BucketStat {
        self.buckets[label.name()]
    }

    pub fn total_count(&self) -> usize {
        self.buckets.values().map(|b| b.count).sum()
    }
}

pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
}

/// Running per-label sums, finished by a map `(sum, count) -> value`.
#[derive(Debug, Clone, Default)]
pub struct BucketTally {
    sums: [f64; 4],
    counts: [usize; 4],
}

const LABELS: [CorruptionLabel; 4] =
    [CorruptionLabel::Original, CorruptionLabel::Masked, CorruptionLabel::Replaced, CorruptionLabel::Misplaced];

fn slot(l: CorruptionLabel) -> usize {
    LABELS.iter().position(|&x| x == l).unwrap()
}

impl BucketTally {
    pub fn add(&mut self, label: CorruptionLabel, v: f64) {
        self.sums[slot(label)] += v;
        self.counts[slot(label)] += 1;
    }

    pub fn count(&self, label: CorruptionLabel) -> usize {
        self.counts[slot(label)]
    }

    pub fn mean(&self, label: CorruptionLabel) -> Option<f64> {
        let i = slot(label);
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }

    pub fn finish(
        &self,
        probe: &str,
        model: &str,
        config: &ModelConfig,
        seed: u64,
        f: impl Fn(f64) -> f64,
    ) -> ProbeReport {
        let stat = |s: f64, c: usize| BucketStat { value: (c > 0).then(|| f(s / c as f64)), count: c };
        let buckets = LABELS.iter().map(|&l| (l.name().to_string(), stat(self.sums[slot(l)], self.count(l)))).collect();
        let (cs, cc) = (self.sums[1..].iter().sum(), self.counts[1..].iter().sum());
        ProbeReport {
            probe: probe.to_string(),
            model: model.to_string(),
            buckets,
            corrupted: stat(cs, cc),
            per_layer: Vec::new(),
            scalars: BTreeMap::new(),
            seed,
            config_hash: config_hash(config),
        }
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// How a token is drawn from a categorical distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplePolicy {
    /// Ancestral sampling at temperature 1.
    Standard,
    /// Top-p sampling.
    Nucleus { p: f64 },
    /// Argmax, lowest id wins ties.
    Greedy,
}

impl Default for SamplePolicy {
    fn default() -> Self {
        SamplePolicy::Standard
    }
}

/// Smallest probability-sorted prefix with cumulative mass ≥ `p`,
/// renormalized. Ties in probability are ordered by id.
pub fn nucleus_support(dist: &[f64], p: f64) -> Result<Vec<(usize, f64)>> {
    if !(p > 0.0 && p <= 1.0) {
        return invalid(format!("nucleus mass {p} outside (0, 1]"));
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut support = Vec::new();
    let mut mass = 0.0;
    for i in order {
        support.push((i, dist[i]));
        mass += dist[i];
        // tolerate accumulated rounding in the running sum
        if mass >= p - 1e-12 {
            break;
        }
    }
    support.iter_mut().for_each(|s| s.1 /= mass);
    Ok(support)
}

pub fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in dist.iter().enumerate() {
        if v > dist[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng + ?Sized>(weights: impl Iterator<Item = (usize, f64)> + Clone, rng: &mut R) -> usize {
    let total: f64 = weights.clone().map(|w| w.1).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights {
        if w <= 0.0 {
            continue;
        }
        if u < w {
            return i;
        }
        u -= w;
        last = i;
    }
    last
}

pub fn sample_policy<R: Rng + ?Sized>(dist: &[f64], policy: SamplePolicy, rng: &mut R) -> Result<u32> {
    let id = match policy {
        SamplePolicy::Greedy => argmax(dist),
        SamplePolicy::Standard => draw(dist.iter().copied().enumerate(), rng),
        SamplePolicy::Nucleus { p } => {
            let support = nucleus_support(dist, p)?;
            draw(support.into_iter(), rng)
        }
    };
    Ok(id as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    const DIST: [f64; 4] = [0.5, 0.3, 0.15, 0.05];

    #[test]
    fn nucleus_truncates_and_renormalizes() {
        let s = nucleus_support(&DIST, 0.9).unwrap();
        let ids: Vec<usize> = s.iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        for (got, want) in s.iter().map(|x| x.1).zip([0.5263, 0.3158, 0.1579]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn nucleus_rejects_bad_mass() {
        assert!(nucleus_support(&DIST, 0.0).is_err());
        assert!(nucleus_support(&DIST, 1.5).is_err());
        assert!(sample_policy(&DIST, SamplePolicy::Nucleus { p: -0.1 }, &mut rng(0)).is_err());
    }

    #[test]
    fn greedy_takes_lowest_argmax() {
        assert_eq!(sample_policy(&DIST, SamplePolicy::Greedy, &mut rng(0)).unwrap(), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn standard_sampling_matches_frequencies() {
        let mut r = rng(11);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_policy(&DIST, SamplePolicy::Standard, &mut r).unwrap() as usize] += 1;
        }
        for (c, p) in counts.iter().zip(DIST) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn nucleus_never_samples_outside_support() {
        let mut r = rng(3);
        for _ in 0..10_000 {
            let id = sample_policy(&DIST, SamplePolicy::Nucleus { p: 0.9 }, &mut r).unwrap();
            assert!(id < 3);
        }
    }
}

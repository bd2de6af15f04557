//! Expert dropout masks.
//!
//! During training a fresh boolean mask over experts is drawn every step.
//! Masked experts are invisible to routing: their scores carry the mask
//! sentinel, their gates are exactly zero, and they receive no tokens and no
//! gradient for the step.
//!
//! Two sampling levels exist:
//!
//! * **cluster-level** — every cluster independently drops exactly
//!   `floor(rate · L)` of its `L` members, chosen uniformly, so each cluster
//!   always keeps at least one survivor. Tokens that would have gone to a
//!   dropped expert land on a cluster sibling, which is what spreads shared
//!   knowledge inside a cluster.
//! * **global-level** — `floor(rate · N)` experts are dropped over the whole
//!   layer with no regard for cluster structure; whole clusters can go dark,
//!   which is exactly the failure mode the cluster-level variant avoids.
//!
//! Masks are deterministic functions of their seed and are never resampled
//! within a step. Inference uses the all-alive mask.

use crate::error::{Error, Result};
use crate::losses::ClusterConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which sampling scheme produced a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutLevel {
    /// No dropout (inference, or dropout disabled).
    None,
    /// Per-cluster sampling; every cluster keeps a survivor.
    Cluster,
    /// Layer-wide sampling; clusters may be emptied.
    Global,
}

impl std::fmt::Display for DropoutLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DropoutLevel::None => "none",
            DropoutLevel::Cluster => "cluster",
            DropoutLevel::Global => "global",
        };
        f.write_str(s)
    }
}

/// A per-step boolean mask over experts, plus the provenance needed to
/// reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMask {
    alive: Vec<bool>,
    level: DropoutLevel,
    rate: f64,
    seed: u64,
}

impl ExpertMask {
    /// Wraps an explicit survivor vector (for tests and hand-built
    /// scenarios). At least one expert must survive.
    pub fn from_alive(alive: Vec<bool>) -> Result<Self> {
        if alive.is_empty() || !alive.iter().any(|&a| a) {
            return Err(Error::contract(
                "ExpertMask::from_alive",
                "a mask needs at least one surviving expert",
            ));
        }
        Ok(ExpertMask {
            alive,
            level: DropoutLevel::None,
            rate: 0.0,
            seed: 0,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.alive.len()
    }

    pub fn is_alive(&self, expert: usize) -> bool {
        self.alive[expert]
    }

    pub fn num_alive(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// Indices of surviving experts, ascending.
    pub fn alive_indices(&self) -> Vec<usize> {
        (0..self.alive.len()).filter(|&e| self.alive[e]).collect()
    }

    /// The raw survivor flags.
    pub fn alive_flags(&self) -> &[bool] {
        &self.alive
    }

    pub fn level(&self) -> DropoutLevel {
        self.level
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// How many experts to drop from a pool of `size` at `rate`: `floor(rate ·
/// size)`, with products within 1e-9 of an integer snapped to it first so
/// that decimal rates like 0.3 on a pool of 10 drop 3, not 2. Never exceeds
/// `size - 1`.
fn drop_count(rate: f64, size: usize) -> usize {
    let x = rate * size as f64;
    let snapped = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.floor()
    };
    (snapped as usize).min(size.saturating_sub(1))
}

fn check_rate(op: &'static str, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(
            op,
            format!("dropout rate must satisfy 0 <= rate < 1, got {rate}"),
        ));
    }
    Ok(())
}

/// The all-alive mask used outside training.
pub fn inference_mask(num_experts: usize) -> ExpertMask {
    ExpertMask {
        alive: vec![true; num_experts],
        level: DropoutLevel::None,
        rate: 0.0,
        seed: 0,
    }
}

/// Samples a cluster-level mask: each cluster independently drops exactly
/// `floor(rate · L)` members, uniformly without replacement, so every
/// cluster keeps at least one survivor for any `rate < 1`.
pub fn cluster_level_mask(cfg: &ClusterConfig, rate: f64, seed: u64) -> Result<ExpertMask> {
    check_rate("cluster_level_mask", rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = cfg.cluster_size();
    let drops = drop_count(rate, l);
    let mut alive = vec![true; cfg.num_experts()];
    for c in 0..cfg.num_clusters() {
        let start = cfg.members(c).start;
        for local in rand::seq::index::sample(&mut rng, l, drops) {
            alive[start + local] = false;
        }
    }
    Ok(ExpertMask {
        alive,
        level: DropoutLevel::Cluster,
        rate,
        seed,
    })
}

/// Samples a global-level mask: `floor(rate · N)` experts dropped over the
/// whole layer, ignoring cluster boundaries. At least one expert survives
/// overall, but individual clusters may be emptied.
pub fn global_level_mask(num_experts: usize, rate: f64, seed: u64) -> Result<ExpertMask> {
    check_rate("global_level_mask", rate)?;
    if num_experts == 0 {
        return Err(Error::contract("global_level_mask", "no experts to mask"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drops = drop_count(rate, num_experts);
    let mut alive = vec![true; num_experts];
    for e in rand::seq::index::sample(&mut rng, num_experts, drops) {
        alive[e] = false;
    }
    Ok(ExpertMask {
        alive,
        level: DropoutLevel::Global,
        rate,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, m: usize) -> ClusterConfig {
        ClusterConfig::new(n, m).unwrap()
    }

    #[test]
    fn inference_mask_is_all_alive() {
        let mask = inference_mask(6);
        assert_eq!(mask.num_alive(), 6);
        assert_eq!(mask.level(), DropoutLevel::None);
        assert_eq!(mask.alive_indices(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn cluster_mask_drops_exactly_the_floor_per_cluster() {
        // N=8, m=2, rate 0.5: each cluster of 4 keeps exactly 2 survivors.
        let cfg = cfg(8, 2);
        for seed in 0..200 {
            let mask = cluster_level_mask(&cfg, 0.5, seed).unwrap();
            for c in 0..2 {
                let alive = cfg.members(c).filter(|&e| mask.is_alive(e)).count();
                assert_eq!(alive, 2, "seed {seed}, cluster {c}");
            }
        }
    }

    #[test]
    fn cluster_mask_floor_semantics() {
        // rate 0.5 on clusters of 3 drops floor(1.5) = 1.
        let cfg3 = cfg(6, 2);
        let mask = cluster_level_mask(&cfg3, 0.5, 7).unwrap();
        for c in 0..2 {
            assert_eq!(cfg3.members(c).filter(|&e| mask.is_alive(e)).count(), 2);
        }
        // rate 0.75 on clusters of 4 keeps exactly 1.
        let cfg4 = cfg(8, 2);
        let mask = cluster_level_mask(&cfg4, 0.75, 7).unwrap();
        for c in 0..2 {
            assert_eq!(cfg4.members(c).filter(|&e| mask.is_alive(e)).count(), 1);
        }
        // A decimal rate whose product is integral up to float noise.
        assert_eq!(drop_count(0.3, 10), 3);
    }

    #[test]
    fn every_cluster_keeps_a_survivor_across_many_seeds() {
        let cfg = cfg(8, 2);
        for seed in 0..1000 {
            let mask = cluster_level_mask(&cfg, 0.75, seed).unwrap();
            for c in 0..2 {
                assert!(
                    cfg.members(c).any(|e| mask.is_alive(e)),
                    "cluster {c} emptied at seed {seed}"
                );
            }
        }
    }

    #[test]
    fn global_mask_drops_the_floor_overall_and_can_empty_a_cluster() {
        let cfg = cfg(8, 2);
        let mut emptied = false;
        for seed in 0..1000 {
            let mask = global_level_mask(8, 0.5, seed).unwrap();
            assert_eq!(mask.num_alive(), 4, "seed {seed}");
            for c in 0..2 {
                if !cfg.members(c).any(|e| mask.is_alive(e)) {
                    emptied = true;
                }
            }
        }
        assert!(
            emptied,
            "with 4 of 8 dropped globally, some seed must empty a cluster"
        );
    }

    #[test]
    fn global_mask_always_leaves_a_survivor() {
        for seed in 0..200 {
            let mask = global_level_mask(4, 0.9, seed).unwrap();
            assert!(mask.num_alive() >= 1);
            // floor(0.9 * 4) = 3 dropped, 1 survivor.
            assert_eq!(mask.num_alive(), 1);
        }
    }

    #[test]
    fn masks_are_deterministic_per_seed_and_vary_across_seeds() {
        let cfg = cfg(8, 2);
        let a = cluster_level_mask(&cfg, 0.5, 42).unwrap();
        let b = cluster_level_mask(&cfg, 0.5, 42).unwrap();
        assert_eq!(a, b);
        let distinct = (0..50)
            .map(|s| {
                cluster_level_mask(&cfg, 0.5, s)
                    .unwrap()
                    .alive_flags()
                    .to_vec()
            })
            .collect::<std::collections::BTreeSet<_>>();
        assert!(distinct.len() > 1, "seeds never changed the mask");
    }

    #[test]
    fn drops_are_uniform_over_members_monte_carlo() {
        // Single cluster of 4 at rate 0.25: each expert should be dropped in
        // about a quarter of seeds.
        let cfg = cfg(4, 1);
        let trials = 10_000u64;
        let mut dropped = [0u32; 4];
        for seed in 0..trials {
            let mask = cluster_level_mask(&cfg, 0.25, seed).unwrap();
            for (e, d) in dropped.iter_mut().enumerate() {
                if !mask.is_alive(e) {
                    *d += 1;
                }
            }
        }
        for (e, &d) in dropped.iter().enumerate() {
            let freq = d as f64 / trials as f64;
            assert!(
                (freq - 0.25).abs() <= 0.02,
                "expert {e} dropped with frequency {freq}, expected 0.25 ± 0.02"
            );
        }
    }

    #[test]
    fn zero_rate_keeps_everyone() {
        let cfg = cfg(8, 2);
        let mask = cluster_level_mask(&cfg, 0.0, 3).unwrap();
        assert_eq!(mask.num_alive(), 8);
        let mask = global_level_mask(8, 0.0, 3).unwrap();
        assert_eq!(mask.num_alive(), 8);
    }

    #[test]
    fn out_of_range_rates_are_rejected() {
        let cfg = cfg(4, 2);
        assert!(cluster_level_mask(&cfg, 1.0, 0).is_err());
        assert!(cluster_level_mask(&cfg, -0.1, 0).is_err());
        assert!(global_level_mask(4, 1.0, 0).is_err());
        assert!(global_level_mask(4, 2.5, 0).is_err());
    }

    #[test]
    fn hand_built_masks_validate_survivorship() {
        assert!(ExpertMask::from_alive(vec![false, false]).is_err());
        assert!(ExpertMask::from_alive(vec![]).is_err());
        let m = ExpertMask::from_alive(vec![true, false, true]).unwrap();
        assert_eq!(m.alive_indices(), vec![0, 2]);
        assert_eq!(m.num_alive(), 2);
    }
}

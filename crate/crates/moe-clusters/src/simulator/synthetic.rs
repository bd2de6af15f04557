//! Clustered synthetic data with known group structure.
//!
//! Samples come from `G` groups. Each group owns a unit-norm center in input
//! space; a sample is its group's center plus isotropic Gaussian noise. The
//! supervision depends on the task:
//!
//! - **Regression**: each group also owns a private linear map, and the
//!   target is that map applied to the sample. A model can only fit all
//!   groups if different parameters handle different groups — exactly the
//!   pressure that makes distinct experts useful.
//! - **Classification**: the label is the group id itself.
//!
//! Generation is fully deterministic given the caller's RNG, so two
//! generators seeded identically produce identical tasks and identical
//! sample streams.

use crate::error::{Error, Result};
use crate::model::{TaskKind, TaskTargets};
use crate::numerics::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Shape of a synthetic task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    /// Number of latent groups `G`.
    pub groups: usize,
    /// Input feature dimension.
    pub input_dim: usize,
    /// Regression target width, or the class count (must equal `groups`)
    /// for classification.
    pub output_dim: usize,
    /// Standard deviation of the within-group noise.
    pub noise: f64,
    pub task: TaskKind,
}

/// A concrete sampled task: centers plus (for regression) per-group maps.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    spec: TaskSpec,
    /// G×input_dim, each row unit-norm.
    centers: Tensor,
    /// Per-group linear maps (input_dim×output_dim); empty for
    /// classification.
    maps: Vec<Tensor>,
    /// Per-group output offsets (1×output_dim); empty for classification.
    offsets: Vec<Tensor>,
}

/// One batch of samples with group provenance and supervision.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    /// True group of each row (the router never sees this).
    pub groups: Vec<usize>,
    pub targets: TaskTargets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Assembles a minibatch from the given rows of this batch (the training
    /// loop draws indices into a fixed pool rather than fresh samples).
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::contract(
                "Batch::select",
                format!("row {bad} out of range for a pool of {n}"),
            ));
        }
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| self.inputs.row(i).to_vec())
            .collect();
        let inputs = Tensor::from_rows(&rows)?;
        let groups = indices.iter().map(|&i| self.groups[i]).collect();
        let targets = match &self.targets {
            TaskTargets::Regression(t) => {
                let rows: Vec<Vec<f64>> = indices.iter().map(|&i| t.row(i).to_vec()).collect();
                TaskTargets::Regression(Tensor::from_rows(&rows)?)
            }
            TaskTargets::Classification(labels) => {
                TaskTargets::Classification(indices.iter().map(|&i| labels[i]).collect())
            }
        };
        Ok(Batch {
            inputs,
            groups,
            targets,
        })
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // A Gaussian draw is almost never this small; the retry keeps the
        // normalization well-conditioned without biasing the direction.
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl SyntheticTask {
    /// Draws a task: group centers on the unit sphere and, for regression,
    /// one linear map and offset per group.
    pub fn generate(spec: TaskSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.groups == 0 || spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(Error::contract(
                "SyntheticTask::generate",
                "groups, input_dim, and output_dim must all be positive",
            ));
        }
        if !spec.noise.is_finite() || spec.noise < 0.0 {
            return Err(Error::contract(
                "SyntheticTask::generate",
                format!("noise must be finite and non-negative, got {}", spec.noise),
            ));
        }
        if spec.task == TaskKind::Classification && spec.output_dim != spec.groups {
            return Err(Error::contract(
                "SyntheticTask::generate",
                format!(
                    "classification needs output_dim == groups, got {} vs {}",
                    spec.output_dim, spec.groups
                ),
            ));
        }
        let rows: Vec<Vec<f64>> = (0..spec.groups)
            .map(|_| unit_vector(rng, spec.input_dim))
            .collect();
        let centers = Tensor::from_rows(&rows)?;
        let (maps, offsets) = if spec.task == TaskKind::Regression {
            let bound = 1.0 / (spec.input_dim as f64).sqrt();
            let maps = (0..spec.groups)
                .map(|_| {
                    let data = (0..spec.input_dim * spec.output_dim)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    Tensor::from_vec(spec.input_dim, spec.output_dim, data)
                })
                .collect::<Result<Vec<_>>>()?;
            let offsets = (0..spec.groups)
                .map(|_| {
                    let data = (0..spec.output_dim)
                        .map(|_| rng.random_range(-0.5..0.5))
                        .collect();
                    Tensor::from_vec(1, spec.output_dim, data)
                })
                .collect::<Result<Vec<_>>>()?;
            (maps, offsets)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(SyntheticTask {
            spec,
            centers,
            maps,
            offsets,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// Group centers (G×input_dim, unit-norm rows).
    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    /// Draws `count` samples with uniformly random group membership.
    pub fn sample(&self, rng: &mut ChaCha8Rng, count: usize) -> Result<Batch> {
        if count == 0 {
            return Err(Error::contract("SyntheticTask::sample", "empty batch"));
        }
        let d = self.spec.input_dim;
        let mut inputs = Tensor::zeros(count, d);
        let mut groups = Vec::with_capacity(count);
        for row in 0..count {
            let g = rng.random_range(0..self.spec.groups);
            groups.push(g);
            for c in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                inputs.set(row, c, self.centers.get(g, c) + self.spec.noise * eps);
            }
        }
        let targets = match self.spec.task {
            TaskKind::Classification => TaskTargets::Classification(groups.clone()),
            TaskKind::Regression => {
                let mut targets = Tensor::zeros(count, self.spec.output_dim);
                for (row, &g) in groups.iter().enumerate() {
                    let x = Tensor::row_vector(inputs.row(row).to_vec());
                    let y = x.matmul(&self.maps[g])?;
                    for c in 0..self.spec.output_dim {
                        targets.set(row, c, y.get(0, c) + self.offsets[g].get(0, c));
                    }
                }
                TaskTargets::Regression(targets)
            }
        };
        Ok(Batch {
            inputs,
            groups,
            targets,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spec(task: TaskKind, groups: usize, output_dim: usize) -> TaskSpec {
        TaskSpec {
            groups,
            input_dim: 6,
            output_dim,
            noise: 0.1,
            task,
        }
    }

    #[test]
    fn centers_sit_on_the_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let task = SyntheticTask::generate(spec(TaskKind::Regression, 5, 3), &mut rng).unwrap();
        for g in 0..5 {
            let norm: f64 = task
                .centers()
                .row(g)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "center {g} has norm {norm}");
        }
    }

    #[test]
    fn group_sample_means_converge_to_the_centers() {
        // Monte-Carlo: with noise σ and n samples per group, each coordinate
        // of the empirical mean sits within ~5σ/√n of the center.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let task = SyntheticTask::generate(spec(TaskKind::Regression, 4, 2), &mut rng).unwrap();
        let mut sums = [[0.0; 6]; 4];
        let mut counts = [0usize; 4];
        for _ in 0..20 {
            let batch = task.sample(&mut rng, 512).unwrap();
            for (row, &g) in batch.groups.iter().enumerate() {
                counts[g] += 1;
                for (c, s) in sums[g].iter_mut().enumerate() {
                    *s += batch.inputs.get(row, c);
                }
            }
        }
        for g in 0..4 {
            assert!(
                counts[g] > 1500,
                "uniform groups: got {} of ~2560",
                counts[g]
            );
            let tol = 5.0 * 0.1 / (counts[g] as f64).sqrt();
            for (c, &sum) in sums[g].iter().enumerate() {
                let mean = sum / counts[g] as f64;
                let center = task.centers().get(g, c);
                assert!(
                    (mean - center).abs() < tol,
                    "group {g} coord {c}: mean {mean} vs center {center} (tol {tol})"
                );
            }
        }
    }

    #[test]
    fn noiseless_regression_targets_follow_the_group_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = spec(TaskKind::Regression, 3, 2);
        s.noise = 0.0;
        let task = SyntheticTask::generate(s, &mut rng).unwrap();
        let batch = task.sample(&mut rng, 50).unwrap();
        let TaskTargets::Regression(targets) = &batch.targets else {
            panic!("regression task must produce regression targets");
        };
        for (row, &g) in batch.groups.iter().enumerate() {
            // x is exactly the center; recompute x·W_g + b_g by hand.
            let x = Tensor::row_vector(batch.inputs.row(row).to_vec());
            let want = x.matmul(&task.maps[g]).unwrap();
            for c in 0..2 {
                let w = want.get(0, c) + task.offsets[g].get(0, c);
                assert!((targets.get(row, c) - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn classification_labels_are_the_group_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let task = SyntheticTask::generate(spec(TaskKind::Classification, 4, 4), &mut rng).unwrap();
        let batch = task.sample(&mut rng, 64).unwrap();
        let TaskTargets::Classification(labels) = &batch.targets else {
            panic!("classification task must produce labels");
        };
        assert_eq!(labels, &batch.groups);
    }

    #[test]
    fn generation_and_sampling_are_deterministic_per_seed() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let task = SyntheticTask::generate(spec(TaskKind::Regression, 4, 2), &mut rng).unwrap();
            let batch = task.sample(&mut rng, 32).unwrap();
            (task, batch)
        };
        let (task_a, batch_a) = build();
        let (task_b, batch_b) = build();
        assert_eq!(task_a.centers().data(), task_b.centers().data());
        assert_eq!(batch_a.inputs.data(), batch_b.inputs.data());
        assert_eq!(batch_a.groups, batch_b.groups);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Classification with output_dim != groups.
        assert!(SyntheticTask::generate(spec(TaskKind::Classification, 4, 3), &mut rng).is_err());
        // Zero groups.
        assert!(SyntheticTask::generate(spec(TaskKind::Regression, 0, 2), &mut rng).is_err());
        // Negative noise.
        let mut s = spec(TaskKind::Regression, 2, 2);
        s.noise = -0.1;
        assert!(SyntheticTask::generate(s, &mut rng).is_err());
        // Empty batches.
        let task = SyntheticTask::generate(spec(TaskKind::Regression, 2, 2), &mut rng).unwrap();
        assert!(task.sample(&mut rng, 0).is_err());
    }

    #[test]
    fn select_gathers_rows_with_their_supervision() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let task = SyntheticTask::generate(spec(TaskKind::Regression, 3, 2), &mut rng).unwrap();
        let pool = task.sample(&mut rng, 10).unwrap();
        let picked = pool.select(&[4, 4, 0, 9]).unwrap();
        assert_eq!(picked.len(), 4);
        for (out_row, &src) in [4usize, 4, 0, 9].iter().enumerate() {
            assert_eq!(picked.inputs.row(out_row), pool.inputs.row(src));
            assert_eq!(picked.groups[out_row], pool.groups[src]);
            match (&picked.targets, &pool.targets) {
                (TaskTargets::Regression(a), TaskTargets::Regression(b)) => {
                    assert_eq!(a.row(out_row), b.row(src));
                }
                _ => panic!("regression targets expected"),
            }
        }
        // Out-of-range rows are rejected.
        assert!(pool.select(&[10]).is_err());

        // Classification labels travel with their rows too.
        let task = SyntheticTask::generate(spec(TaskKind::Classification, 4, 4), &mut rng).unwrap();
        let pool = task.sample(&mut rng, 8).unwrap();
        let picked = pool.select(&[7, 1]).unwrap();
        match (&picked.targets, &pool.targets) {
            (TaskTargets::Classification(a), TaskTargets::Classification(b)) => {
                assert_eq!(a[0], b[7]);
                assert_eq!(a[1], b[1]);
            }
            _ => panic!("classification labels expected"),
        }
    }
}

//! Paired-trial ablations on synthetic tasks: projection source, sharing at
//! a matched parameter budget, and singular-vector drift after full
//! fine-tuning.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::optim::Hyper;
use crate::task::{Perturbation, Spectrum, SyntheticTask, TaskSpec};
use crate::theory::alignment::{alignment_stats, AlignmentReport};
use crate::train::{run_method, Method};

/// Final eval losses of two methods trained on the same task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedLosses {
    pub seed: u64,
    pub first: f64,
    pub second: f64,
}

impl PairedLosses {
    /// `|first − second| / max(first, second)`.
    pub fn relative_gap(&self) -> f64 {
        (self.first - self.second).abs() / self.first.max(self.second)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionAblation {
    pub width: usize,
    pub groups: Vec<String>,
    pub rank: usize,
    pub steps: u64,
    pub eta: f64,
    pub eps: f64,
    pub sigma_shift: f64,
}

impl Default for ProjectionAblation {
    fn default() -> Self {
        Self {
            width: 32,
            groups: vec!["q".into(), "v".into(), "q".into(), "v".into()],
            rank: 4,
            steps: 300,
            eta: 1e-2,
            eps: 1e-2,
            sigma_shift: 0.3,
        }
    }
}

impl ProjectionAblation {
    pub fn task(&self, seed: u64) -> Result<SyntheticTask> {
        let groups: Vec<&str> = self.groups.iter().map(String::as_str).collect();
        SyntheticTask::generate(
            seed,
            TaskSpec::uniform(
                self.width,
                &groups,
                Perturbation::Theorem1Form {
                    eps: self.eps,
                    sigma_shift: self.sigma_shift,
                },
            ),
        )
    }

    /// Column-space PiCa (`first`) against random-space PiCa (`second`).
    pub fn run(&self, seed: u64) -> Result<PairedLosses> {
        let task = self.task(seed)?;
        let hyper = Hyper::new(self.rank, self.eta);
        let (col, _) = run_method(&task, Method::Pica, &hyper, self.steps, seed)?;
        let (rnd, _) = run_method(&task, Method::PicaRandom, &hyper, self.steps, seed)?;
        Ok(PairedLosses {
            seed,
            first: col.loss,
            second: rnd.loss,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharingAblation {
    pub width: usize,
    pub layers_per_group: usize,
    /// Unshared rank; shared PiCa runs at `layers_per_group · rank`.
    pub rank: usize,
    pub task_rank: usize,
    pub task_scale: f64,
    pub steps: u64,
    pub eta: f64,
    /// Base spectrum; a deep stack needs a top singular value near 1 to keep
    /// tanh out of saturation.
    pub spectrum: Spectrum,
}

impl Default for SharingAblation {
    fn default() -> Self {
        Self {
            width: 16,
            layers_per_group: 4,
            rank: 2,
            task_rank: 2,
            task_scale: 1.0,
            steps: 600,
            eta: 3e-3,
            spectrum: Spectrum { top: 1.0, decay: 0.9 },
        }
    }
}

impl SharingAblation {
    pub fn task(&self, seed: u64) -> Result<SyntheticTask> {
        let groups: Vec<&str> = (0..2 * self.layers_per_group)
            .map(|i| if i % 2 == 0 { "q" } else { "v" })
            .collect();
        let mut spec = TaskSpec::uniform(
            self.width,
            &groups,
            Perturbation::InColumnSpace {
                rank: self.task_rank,
                scale: self.task_scale,
            },
        );
        spec.spectrum = self.spectrum;
        SyntheticTask::generate(seed, spec)
    }

    /// Shared PiCa at rank `L·r` (`first`) against unshared PiCa at rank
    /// `r` (`second`); both train the same number of parameters.
    pub fn run(&self, seed: u64) -> Result<PairedLosses> {
        let task = self.task(seed)?;
        let shared = Hyper::new(self.layers_per_group * self.rank, self.eta);
        let unshared = Hyper::new(self.rank, self.eta);
        let (a, _) = run_method(&task, Method::Pica, &shared, self.steps, seed)?;
        let (b, _) = run_method(&task, Method::PicaNosharing, &unshared, self.steps, seed)?;
        Ok(PairedLosses {
            seed,
            first: a.loss,
            second: b.loss,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftAfterFineTuning {
    pub width: usize,
    pub groups: Vec<String>,
    pub steps: u64,
    pub eta: f64,
    /// Leading block used for diagonal similarity.
    pub rank: usize,
    pub perturbation: Perturbation,
}

impl Default for DriftAfterFineTuning {
    fn default() -> Self {
        Self {
            width: 32,
            groups: vec!["q".into(), "v".into(), "q".into(), "v".into()],
            steps: 200,
            eta: 1e-4,
            rank: 8,
            perturbation: Perturbation::Unstructured { scale: 0.3 },
        }
    }
}

impl DriftAfterFineTuning {
    /// Fully fine-tunes the toy model and measures `E^P`, `E^Q` between
    /// each base weight and its fine-tuned counterpart.
    pub fn run(&self, seed: u64) -> Result<AlignmentReport> {
        let groups: Vec<&str> = self.groups.iter().map(String::as_str).collect();
        let task = SyntheticTask::generate(seed, TaskSpec::uniform(self.width, &groups, self.perturbation.clone()))?;
        let hyper = Hyper::new(self.rank, self.eta);
        let (_, adapter) = run_method(&task, Method::FullFt, &hyper, self.steps, seed)?;
        let tuned = adapter.weights(&task.model)?;
        let pairs = task
            .model
            .layers()
            .iter()
            .zip(&tuned)
            .map(|(l, w)| (l.group.as_str(), &l.base_weight, w));
        alignment_stats(pairs, self.rank)
    }
}

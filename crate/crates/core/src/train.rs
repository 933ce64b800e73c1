//! A method-agnostic training loop over synthetic tasks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{full_ft_param_count, lora_param_count, random_pica_init, FullFtState, LoraState};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{self, ToyModel};
use crate::optim::{param_count, Hyper, PicaOptions, PicaState, Sharing};
use crate::task::SyntheticTask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pica,
    PicaRandom,
    PicaNosharing,
    Lora,
    LoraSharedB,
    FullFt,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Pica,
        Method::PicaRandom,
        Method::PicaNosharing,
        Method::Lora,
        Method::LoraSharedB,
        Method::FullFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pica => "pica",
            Method::PicaRandom => "pica_random",
            Method::PicaNosharing => "pica_nosharing",
            Method::Lora => "lora",
            Method::LoraSharedB => "lora_shared_b",
            Method::FullFt => "full_ft",
        }
    }

    pub fn needs_rank(self) -> bool {
        self != Method::FullFt
    }

    pub fn is_pica(self) -> bool {
        matches!(self, Method::Pica | Method::PicaRandom | Method::PicaNosharing)
    }

    /// Trainable parameter count without building any state.
    pub fn param_count(self, model: &ToyModel, rank: usize) -> usize {
        match self {
            Method::Pica | Method::PicaRandom => param_count(model, rank, Sharing::Shared),
            Method::PicaNosharing => param_count(model, rank, Sharing::PerLayer),
            Method::Lora => lora_param_count(model, rank, false),
            Method::LoraSharedB => lora_param_count(model, rank, true),
            Method::FullFt => full_ft_param_count(model),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Trainable state of any method.
#[derive(Clone, Debug)]
pub enum Adapter {
    Pica(PicaState),
    Lora(LoraState),
    Full(FullFtState),
}

impl Adapter {
    pub fn new(method: Method, model: &ToyModel, hyper: &Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        Ok(match method {
            Method::Pica => Adapter::Pica(PicaState::init(model, hyper)?),
            Method::PicaRandom => Adapter::Pica(random_pica_init(model, hyper, seed)?),
            Method::PicaNosharing => Adapter::Pica(PicaState::init_with(
                model,
                hyper,
                PicaOptions {
                    sharing: Sharing::PerLayer,
                    ..PicaOptions::default()
                },
            )?),
            Method::Lora => Adapter::Lora(LoraState::init(model, hyper.rank, seed, false)?),
            Method::LoraSharedB => Adapter::Lora(LoraState::init(model, hyper.rank, seed, true)?),
            Method::FullFt => Adapter::Full(FullFtState::init(model)),
        })
    }

    pub fn weights(&self, model: &ToyModel) -> Result<Vec<Matrix>> {
        match self {
            Adapter::Pica(s) => s.effective_weights(model),
            Adapter::Lora(s) => Ok(s.effective_weights()),
            Adapter::Full(s) => Ok(s.weights().to_vec()),
        }
    }

    pub fn step(&mut self, grads: &net::GradientSet, hyper: &Hyper) -> Result<Vec<Matrix>> {
        match self {
            Adapter::Pica(s) => s.step(grads, hyper),
            Adapter::Lora(s) => s.step(grads, hyper),
            Adapter::Full(s) => s.step(grads, hyper),
        }
    }

    pub fn trainable_params(&self, model: &ToyModel) -> usize {
        match self {
            Adapter::Pica(s) => s.trainable_params(),
            Adapter::Lora(s) => s.trainable_params(),
            Adapter::Full(_) => full_ft_param_count(model),
        }
    }

    pub fn as_pica(&self) -> Option<&PicaState> {
        match self {
            Adapter::Pica(s) => Some(s),
            _ => None,
        }
    }
}

/// Loss and distance-to-teacher on the task's evaluation batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub loss: f64,
    pub distance: f64,
}

pub fn evaluate(task: &SyntheticTask, weights: &[Matrix], step: u64) -> Result<EvalPoint> {
    Ok(EvalPoint {
        step,
        loss: net::forward(&task.model, weights, &task.eval_batch())?,
        distance: task.distance_to_teacher(weights),
    })
}

/// Trains `adapter` for `steps` steps on `task`, calling `on_eval` at step 0,
/// every `eval_interval` steps, and at the final step.
///
/// A non-finite training loss aborts with [`Error::Diverged`].
pub fn train(
    task: &SyntheticTask,
    adapter: &mut Adapter,
    hyper: &Hyper,
    steps: u64,
    eval_interval: u64,
    mut on_eval: impl FnMut(&EvalPoint) -> Result<()>,
) -> Result<EvalPoint> {
    let model = &task.model;
    let mut last = evaluate(task, &adapter.weights(model)?, 0)?;
    on_eval(&last)?;
    for step in 1..=steps {
        let weights = adapter.weights(model)?;
        let batch = task.train_batch(step - 1);
        let (loss, grads) = net::loss_and_grad(model, &weights, &batch)?;
        if !loss.is_finite() || grads.layers().iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                last_good_step: step - 1,
            });
        }
        adapter.step(&grads, hyper)?;
        if step == steps || (eval_interval > 0 && step % eval_interval == 0) {
            let point = evaluate(task, &adapter.weights(model)?, step)?;
            if !point.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_good_step: last.step,
                });
            }
            on_eval(&point)?;
            last = point;
        }
    }
    Ok(last)
}

/// Builds the adapter for `method` and trains it; returns the final eval
/// point and the trained adapter.
pub fn run_method(
    task: &SyntheticTask,
    method: Method,
    hyper: &Hyper,
    steps: u64,
    seed: u64,
) -> Result<(EvalPoint, Adapter)> {
    let mut adapter = Adapter::new(method, &task.model, hyper, seed)?;
    let last = train(task, &mut adapter, hyper, steps, 0, |_| Ok(()))?;
    Ok((last, adapter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{Perturbation, TaskSpec};

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("adam".parse::<Method>().is_err());
    }

    #[test]
    fn zero_steps_reports_initial_loss() {
        let task = SyntheticTask::generate(1, TaskSpec::default_toy(Perturbation::Unstructured { scale: 0.2 })).unwrap();
        let mut adapter = Adapter::new(Method::Pica, &task.model, &Hyper::new(4, 0.01), 0).unwrap();
        let mut seen = Vec::new();
        let last = train(&task, &mut adapter, &Hyper::new(4, 0.01), 0, 10, |p| {
            seen.push(*p);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), 1);
        assert_eq!(last.step, 0);
        assert_eq!(last.loss, net::forward(&task.model, &task.model.base_weights(), &task.eval_batch()).unwrap());
    }

    #[test]
    fn every_method_starts_at_base_weights() {
        let task = SyntheticTask::generate(2, TaskSpec::default_toy(Perturbation::Unstructured { scale: 0.2 })).unwrap();
        for m in Method::ALL {
            let a = Adapter::new(m, &task.model, &Hyper::new(4, 0.01), 3).unwrap();
            assert_eq!(a.weights(&task.model).unwrap(), task.model.base_weights(), "{m}");
            assert_eq!(a.trainable_params(&task.model), m.param_count(&task.model, 4), "{m}");
        }
    }

    #[test]
    fn divergence_is_reported() {
        let task = SyntheticTask::generate(3, TaskSpec::default_toy(Perturbation::Unstructured { scale: 0.2 })).unwrap();
        let mut hyper = Hyper::new(4, 1e300);
        hyper.eps_adam = 1e-300;
        let mut a = Adapter::new(Method::FullFt, &task.model, &hyper, 0).unwrap();
        let err = train(&task, &mut a, &hyper, 50, 1, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}

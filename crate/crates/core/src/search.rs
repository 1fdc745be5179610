//! Random hyperparameter search: log-uniform learning rate and sparsity
//! weight, pooling percentage from a fixed menu.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlamError, Result};
use crate::rng::rng_from;

fn default_eta_log10() -> (f64, f64) {
    (-5.5, -4.0)
}
fn default_lambda_log10() -> (f64, f64) {
    (-5.5, -3.5)
}
fn default_t_choices() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 5.0, 10.0, 20.0]
}
fn default_n_trials() -> usize {
    30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    /// log10 bounds for the learning rate, inclusive-exclusive.
    #[serde(default = "default_eta_log10")]
    pub eta_log10: (f64, f64),
    /// log10 bounds for the sparsity weight.
    #[serde(default = "default_lambda_log10")]
    pub lambda_log10: (f64, f64),
    /// Pooling percentage menu, applied to both the global and local nets.
    #[serde(default = "default_t_choices")]
    pub t_choices: Vec<f64>,
    #[serde(default = "default_n_trials")]
    pub n_trials: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            eta_log10: default_eta_log10(),
            lambda_log10: default_lambda_log10(),
            t_choices: default_t_choices(),
            n_trials: default_n_trials(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("eta_log10", self.eta_log10),
            ("lambda_log10", self.lambda_log10),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(GlamError::config(format!(
                    "{name} bounds ({lo}, {hi}) must be finite with lo < hi"
                )));
            }
        }
        if self.t_choices.is_empty() {
            return Err(GlamError::config("t_choices must be non-empty"));
        }
        for &t in &self.t_choices {
            if !(t > 0.0 && t <= 100.0) {
                return Err(GlamError::config(format!("t choice {t} outside (0, 100]")));
            }
        }
        if self.n_trials == 0 {
            return Err(GlamError::config("n_trials must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub eta: f64,
    pub lambda: f64,
    /// Top-t% pooling percentage for both nets.
    pub t: f64,
}

/// Draws `space.n_trials` configurations. The draw order inside a trial is
/// fixed (eta, lambda, t) so results are reproducible for a given seed.
pub fn random_search(space: &SearchSpace, seed: u64) -> Result<Vec<Trial>> {
    space.validate()?;
    let mut rng = rng_from(seed);
    let mut trials = Vec::with_capacity(space.n_trials);
    for index in 0..space.n_trials {
        let eta = 10f64.powf(rng.gen_range(space.eta_log10.0..space.eta_log10.1));
        let lambda = 10f64.powf(rng.gen_range(space.lambda_log10.0..space.lambda_log10.1));
        let t = space.t_choices[rng.gen_range(0..space.t_choices.len())];
        trials.push(Trial {
            index,
            eta,
            lambda,
            t,
        });
    }
    Ok(trials)
}

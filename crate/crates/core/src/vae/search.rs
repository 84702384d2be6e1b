//! Random hyperparameter search scored by the test-set sum of `ln BC` over
//! chosen alternatives.

use rand::seq::SliceRandom;

use crate::data::AttributeSchema;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::child_rng;

use super::{train, VaeHyperparams, VaeModel};

/// Candidate value lists for the varying hyperparameters. The defaults are
/// the published search space; trim them in configuration for desk-scale
/// runs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchSpace {
    pub latent_dim: Vec<usize>,
    pub encoder_hidden_layers: Vec<usize>,
    pub decoder_hidden_layers: Vec<usize>,
    pub batch_norm: Vec<bool>,
    pub minibatch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub mc_draws: Vec<usize>,
    pub max_iterations: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            latent_dim: (1..=10).collect(),
            encoder_hidden_layers: (0..=6).collect(),
            decoder_hidden_layers: (0..=6).collect(),
            batch_norm: vec![true, false],
            minibatch_size: vec![50, 100, 200, 500, 1000],
            learning_rate: vec![0.0, 0.1, 0.01, 1e-3, 1e-5],
            mc_draws: vec![50, 100, 200, 500, 1000],
            max_iterations: vec![500, 1000, 5000, 10_000, 20_000],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim.is_empty()
            || self.encoder_hidden_layers.is_empty()
            || self.decoder_hidden_layers.is_empty()
            || self.batch_norm.is_empty()
            || self.minibatch_size.is_empty()
            || self.learning_rate.is_empty()
            || self.mc_draws.is_empty()
            || self.max_iterations.is_empty()
        {
            return Err(Error::Config("search space has an empty value list".into()));
        }
        Ok(())
    }

    /// Uniform draw from each value list; fixed hyperparameters keep their
    /// defaults.
    pub fn sample(&self, rng: &mut crate::SeedRng) -> VaeHyperparams {
        VaeHyperparams {
            latent_dim: *self.latent_dim.choose(rng).unwrap(),
            encoder_hidden_layers: *self.encoder_hidden_layers.choose(rng).unwrap(),
            decoder_hidden_layers: *self.decoder_hidden_layers.choose(rng).unwrap(),
            batch_norm: *self.batch_norm.choose(rng).unwrap(),
            minibatch_size: *self.minibatch_size.choose(rng).unwrap(),
            learning_rate: *self.learning_rate.choose(rng).unwrap(),
            mc_draws: *self.mc_draws.choose(rng).unwrap(),
            max_iterations: *self.max_iterations.choose(rng).unwrap(),
            ..VaeHyperparams::default()
        }
    }
}

/// Outcome of one search trial. Failed trials keep their error message and
/// rank below every scored trial.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub hyper: VaeHyperparams,
    pub score: Option<f64>,
    pub error: Option<String>,
    pub model: Option<VaeModel>,
}

/// Sum of `ln BC` over rows, one child generator per row.
pub fn score_rows(model: &VaeModel, rows: &[Vec<f64>], s: usize, seed: u64) -> Result<f64> {
    let scores = parallel::map_indexed(rows.len(), |i| {
        model.estimate_log_bc(&rows[i], s, &mut child_rng(seed, i as u64))
    });
    let mut total = 0.0;
    for v in scores {
        total += v?;
    }
    Ok(total)
}

/// Runs `trials` random configurations and returns them ranked by descending
/// test-set score. Each trial derives every random stream from
/// `(seed, trial index)`, so the ranking does not depend on execution order;
/// failed trials are recorded and the search continues.
pub fn random_search(
    space: &SearchSpace,
    trials: usize,
    train_rows: &[Vec<f64>],
    test_rows: &[Vec<f64>],
    schema: &AttributeSchema,
    seed: u64,
) -> Result<Vec<TrialResult>> {
    space.validate()?;
    if trials == 0 {
        return Err(Error::param("search needs at least one trial"));
    }
    let mut results: Vec<TrialResult> = (0..trials)
        .map(|trial| {
            let hyper = space.sample(&mut child_rng(seed, trial as u64));
            let outcome = run_trial(&hyper, train_rows, test_rows, schema, seed, trial);
            match outcome {
                Ok((score, model)) => TrialResult {
                    trial,
                    hyper,
                    score: Some(score),
                    error: None,
                    model: Some(model),
                },
                Err(e) => TrialResult {
                    trial,
                    hyper,
                    score: None,
                    error: Some(e.to_string()),
                    model: None,
                },
            }
        })
        .collect();
    results.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.trial.cmp(&b.trial)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.trial.cmp(&b.trial),
    });
    Ok(results)
}

fn run_trial(
    hyper: &VaeHyperparams,
    train_rows: &[Vec<f64>],
    test_rows: &[Vec<f64>],
    schema: &AttributeSchema,
    seed: u64,
    trial: usize,
) -> Result<(f64, VaeModel)> {
    let t = trial as u64;
    let mut model = VaeModel::init(
        hyper.clone(),
        schema.clone(),
        &mut child_rng(seed, 1_000_000 + t),
    )?;
    train(&mut model, train_rows, &mut child_rng(seed, 2_000_000 + t))?;
    let score_seed = crate::rng::derive_seed(seed, 3_000_000 + t);
    let score = score_rows(&model, test_rows, hyper.mc_draws, score_seed)?;
    Ok((score, model))
}

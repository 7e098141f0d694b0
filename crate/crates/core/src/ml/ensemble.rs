//! Bagged random forests and least-squares gradient boosting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{build_tree, Tree, TreeParams};
use crate::error::{MaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_samples_leaf: usize,
    /// Features tried per split; `None` means `ceil(p / 3)`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub max_depth: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 400,
            min_samples_leaf: 2,
            max_features: None,
            bootstrap: true,
            max_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
}

impl Forest {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

fn check_xy(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(MaError::InvalidInput(format!(
            "need a nonempty design with matching targets, got {} rows and {} targets",
            x.len(),
            y.len()
        )));
    }
    let p = x[0].len();
    if p == 0 || x.iter().any(|r| r.len() != p) {
        return Err(MaError::InvalidInput("ragged or empty feature matrix".into()));
    }
    Ok(p)
}

pub fn fit_forest(x: &[Vec<f64>], y: &[f64], params: &ForestParams, seed: u64) -> Result<Forest> {
    let p = check_xy(x, y)?;
    if params.n_trees == 0 {
        return Err(MaError::InvalidInput("forest needs at least one tree".into()));
    }
    let tree_params = TreeParams {
        max_depth: params.max_depth,
        min_samples_leaf: params.min_samples_leaf,
        max_features: Some(params.max_features.unwrap_or(p.div_ceil(3)).clamp(1, p)),
    };
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        let samples: Vec<usize> = if params.bootstrap {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        trees.push(build_tree(x, y, &samples, &tree_params, &mut rng)?);
    }
    Ok(Forest { trees })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            n_rounds: 500,
            learning_rate: 0.05,
            max_depth: 3,
            min_samples_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boosted {
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

impl Boosted {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_rounds(x, self.trees.len())
    }

    /// Prediction using only the first `rounds` trees.
    pub fn predict_rounds(&self, x: &[f64], rounds: usize) -> f64 {
        self.base_score
            + self.learning_rate * self.trees[..rounds.min(self.trees.len())].iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

/// Stagewise fitting of shallow trees to the current residuals.
/// Also returns the training loss (mean squared error) after each round,
/// starting with round 0.
pub fn fit_boosted(x: &[Vec<f64>], y: &[f64], params: &BoostParams) -> Result<(Boosted, Vec<f64>)> {
    check_xy(x, y)?;
    if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) {
        return Err(MaError::InvalidInput(format!(
            "learning rate must lie in (0, 1], got {}",
            params.learning_rate
        )));
    }
    let n = x.len();
    let base_score = y.iter().sum::<f64>() / n as f64;
    let mut fitted = vec![base_score; n];
    let tree_params = TreeParams {
        max_depth: Some(params.max_depth),
        min_samples_leaf: params.min_samples_leaf,
        max_features: None,
    };
    let samples: Vec<usize> = (0..n).collect();
    // The trees use every feature, so the generator is never drawn from.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mse = |f: &[f64]| f.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    let mut losses = vec![mse(&fitted)];
    let mut trees = Vec::with_capacity(params.n_rounds);
    for _ in 0..params.n_rounds {
        let resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let tree = build_tree(x, &resid, &samples, &tree_params, &mut rng)?;
        for (f, row) in fitted.iter_mut().zip(x) {
            *f += params.learning_rate * tree.predict(row);
        }
        trees.push(tree);
        losses.push(mse(&fitted));
    }
    Ok((
        Boosted {
            base_score,
            learning_rate: params.learning_rate,
            trees,
        },
        losses,
    ))
}

//! Impurity-based and permutation feature importance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MaError, Result};
use crate::ml::{r2_score, Predictor, TrainedRegressor};

pub const PERMUTATION_REPEATS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceKind {
    Impurity,
    Permutation,
}

/// Split gains summed per feature over every tree, normalized to sum to 1.
/// An ensemble without splits scores all zeros.
pub fn impurity_importance(model: &TrainedRegressor) -> Result<Vec<f64>> {
    let trees = model
        .trees()
        .ok_or_else(|| MaError::Unsupported("impurity importance needs a tree ensemble".into()))?;
    let mut score = vec![0.0; model.n_features];
    for t in trees {
        for n in &t.nodes {
            if let Some(s) = n.split {
                score[s.feature] += s.gain;
            }
        }
    }
    let total: f64 = score.iter().sum();
    if total > 0.0 {
        for s in &mut score {
            *s /= total;
        }
    }
    Ok(score)
}

/// Mean drop in R² over seeded shuffles of each feature column.
pub fn permutation_importance<P: Predictor + ?Sized>(
    model: &P,
    rows: &[Vec<f64>],
    y: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    if rows.len() < 2 || rows.len() != y.len() {
        return Err(MaError::InvalidInput(
            "permutation importance needs at least 2 rows with matching targets".into(),
        ));
    }
    let p = model.n_features();
    let baseline = r2_score(y, &model.predict_many(rows)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = rows.to_vec();
    let mut scores = Vec::with_capacity(p);
    for j in 0..p {
        let column: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let mut drop = 0.0;
        for _ in 0..PERMUTATION_REPEATS {
            let mut shuffled = column.clone();
            shuffled.shuffle(&mut rng);
            for (r, v) in work.iter_mut().zip(&shuffled) {
                r[j] = *v;
            }
            drop += baseline - r2_score(y, &model.predict_many(&work)?);
        }
        for (r, v) in work.iter_mut().zip(&column) {
            r[j] = *v;
        }
        scores.push(drop / PERMUTATION_REPEATS as f64);
    }
    Ok(scores)
}

pub fn feature_importance(
    model: &TrainedRegressor,
    kind: ImportanceKind,
    rows: &[Vec<f64>],
    y: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    match kind {
        ImportanceKind::Impurity => impurity_importance(model),
        ImportanceKind::Permutation => permutation_importance(model, rows, y, seed),
    }
}

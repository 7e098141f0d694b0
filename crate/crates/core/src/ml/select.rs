//! Cross-validated model selection and held-out evaluation per target.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::dataset::{split_and_folds, ParamDataset, SplitPlan, TargetName};
use super::ensemble::{fit_boosted, BoostParams, ForestParams};
use super::{metrics, r2_score, train, Hyperparams, Metrics, Pipeline, Predictor, RegressorKind, TrainedRegressor};
use crate::error::{MaError, Result};
use crate::features::{standardize, Direction, TargetTransform, TransformKind};

/// Seven log-spaced penalties from 1e-3 to 1e2.
pub fn alpha_grid() -> [f64; 7] {
    std::array::from_fn(|i| 10f64.powf(-3.0 + 5.0 * i as f64 / 6.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub test_fraction: f64,
    pub k: usize,
    pub seed: u64,
    pub kinds: Vec<RegressorKind>,
    pub forest: ForestParams,
    /// `n_rounds` is the upper limit for early stopping.
    pub boost: BoostParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            k: 5,
            seed: 0,
            kinds: RegressorKind::ALL.to_vec(),
            forest: ForestParams::default(),
            boost: BoostParams::default(),
        }
    }
}

impl Hyperparams {
    pub fn summary(&self) -> String {
        match self {
            Hyperparams::Ridge { alpha } | Hyperparams::Lasso { alpha } => format!("alpha={alpha:.6}"),
            Hyperparams::RandomForest(p) => format!(
                "n_trees={} min_leaf={} max_features={}",
                p.n_trees,
                p.min_samples_leaf,
                p.max_features.map_or("ceil(p/3)".to_string(), |m| m.to_string())
            ),
            Hyperparams::GradientBoosting(p) => format!(
                "rounds={} learning_rate={} depth={}",
                p.n_rounds, p.learning_rate, p.max_depth
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindResult {
    pub kind: RegressorKind,
    pub hyperparams: Hyperparams,
    pub cv_r2: Vec<f64>,
    pub cv_mean_r2: f64,
    pub test: Metrics,
    pub best: bool,
}

/// Metric table for one target, in transformed target space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTable {
    pub target: TargetName,
    pub transform: TargetTransform,
    pub n_rows: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub results: Vec<KindResult>,
}

impl TargetTable {
    pub fn best(&self) -> Option<&KindResult> {
        self.results.iter().find(|r| r.best)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub table: TargetTable,
    pub split: SplitPlan,
    /// One pipeline per entry of `table.results`, refit on all training rows.
    pub models: Vec<Pipeline>,
    /// Targets of every row after the target transform.
    pub y: Vec<f64>,
}

impl Evaluation {
    pub fn best_model(&self) -> Option<&Pipeline> {
        self.table.results.iter().position(|r| r.best).map(|i| &self.models[i])
    }
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Splits the dataset, chooses hyperparameters by k-fold CV on the training
/// rows, refits each kind and scores it on the held-out rows. The kind with
/// the highest test R² is flagged as best.
pub fn evaluate_and_select(dataset: &ParamDataset, config: &EvalConfig) -> Result<Evaluation> {
    if config.kinds.is_empty() {
        return Err(MaError::InvalidInput("no regressor kinds requested".into()));
    }
    let n = dataset.len();
    let split = split_and_folds(n, config.test_fraction, config.k, config.seed)?;
    let raw = dataset.targets();
    let transform = TargetTransform::fit(dataset.transform, &pick(&raw, &split.train))?;
    let y = transform.apply(&raw, Direction::Forward)?;
    let (x, scaler) = standardize(&dataset.feature_matrix(), &split.train)?;

    let x_train = pick(&x, &split.train);
    let y_train = pick(&y, &split.train);
    let x_test = pick(&x, &split.test);
    let y_test = pick(&y, &split.test);

    let mut results = Vec::with_capacity(config.kinds.len());
    let mut models = Vec::with_capacity(config.kinds.len());
    for &kind in &config.kinds {
        let (hp, cv_r2) = choose_hyperparams(kind, &x, &y, &split, config)?;
        let model = train(&hp, &x_train, &y_train, config.seed)?;
        let test = metrics(&y_test, &model.predict_many(&x_test)?)?;
        log::debug!("{} {}: test r2 {:.4}", dataset.target, kind.name(), test.r2);
        results.push(KindResult {
            kind,
            hyperparams: hp,
            cv_mean_r2: cv_r2.iter().sum::<f64>() / cv_r2.len() as f64,
            cv_r2,
            test,
            best: false,
        });
        models.push(Pipeline {
            scaler: scaler.clone(),
            model,
        });
    }
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.test.r2 > results[best].test.r2 {
            best = i;
        }
    }
    results[best].best = true;

    Ok(Evaluation {
        table: TargetTable {
            target: dataset.target,
            transform,
            n_rows: n,
            n_train: split.train.len(),
            n_test: split.test.len(),
            results,
        },
        split,
        models,
        y,
    })
}

fn fold_data(x: &[Vec<f64>], y: &[f64], idx: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    (pick(x, idx), pick(y, idx))
}

fn cv_scores(hp: &Hyperparams, x: &[Vec<f64>], y: &[f64], split: &SplitPlan, seed: u64) -> Result<Vec<f64>> {
    (0..split.k)
        .map(|f| {
            let (fit, val) = split.fold(f);
            let (xf, yf) = fold_data(x, y, &fit);
            let (xv, yv) = fold_data(x, y, &val);
            let m: TrainedRegressor = train(hp, &xf, &yf, seed.wrapping_add(f as u64 + 1))?;
            Ok(r2_score(&yv, &m.predict_many(&xv)?))
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn choose_hyperparams(
    kind: RegressorKind,
    x: &[Vec<f64>],
    y: &[f64],
    split: &SplitPlan,
    config: &EvalConfig,
) -> Result<(Hyperparams, Vec<f64>)> {
    match kind {
        RegressorKind::Ridge | RegressorKind::Lasso => {
            let mut best: Option<(Hyperparams, Vec<f64>)> = None;
            for alpha in alpha_grid() {
                let hp = if kind == RegressorKind::Ridge {
                    Hyperparams::Ridge { alpha }
                } else {
                    Hyperparams::Lasso { alpha }
                };
                let scores = cv_scores(&hp, x, y, split, config.seed)?;
                if best.as_ref().is_none_or(|b| mean(&scores) > mean(&b.1)) {
                    best = Some((hp, scores));
                }
            }
            Ok(best.expect("alpha grid is nonempty"))
        }
        RegressorKind::RandomForest => {
            let hp = Hyperparams::RandomForest(config.forest);
            let scores = cv_scores(&hp, x, y, split, config.seed)?;
            Ok((hp, scores))
        }
        RegressorKind::GradientBoosting => boosting_early_stop(x, y, split, &config.boost),
    }
}

/// Picks the number of boosting rounds (at least one) that minimizes the
/// mean validation error across folds.
fn boosting_early_stop(
    x: &[Vec<f64>],
    y: &[f64],
    split: &SplitPlan,
    params: &BoostParams,
) -> Result<(Hyperparams, Vec<f64>)> {
    let max_rounds = params.n_rounds;
    let mut curve = vec![0.0; max_rounds + 1];
    let mut per_fold = Vec::with_capacity(split.k);
    for f in 0..split.k {
        let (fit, val) = split.fold(f);
        let (xf, yf) = fold_data(x, y, &fit);
        let (xv, yv) = fold_data(x, y, &val);
        let (model, _) = fit_boosted(&xf, &yf, params)?;
        let mut preds = vec![model.base_score; xv.len()];
        let mut fold_preds = Vec::with_capacity(max_rounds + 1);
        fold_preds.push(preds.clone());
        for tree in &model.trees {
            for (p, row) in preds.iter_mut().zip(&xv) {
                *p += model.learning_rate * tree.predict(row);
            }
            fold_preds.push(preds.clone());
        }
        for (r, p) in fold_preds.iter().enumerate() {
            let mse = p.iter().zip(&yv).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / yv.len() as f64;
            curve[r] += mse / split.k as f64;
        }
        per_fold.push((yv, fold_preds));
    }
    let mut rounds = 1.min(max_rounds);
    for r in 1..=max_rounds {
        if curve[r] < curve[rounds] {
            rounds = r;
        }
    }
    let scores = per_fold.iter().map(|(yv, fp)| r2_score(yv, &fp[rounds])).collect();
    Ok((
        Hyperparams::GradientBoosting(BoostParams {
            n_rounds: rounds,
            ..*params
        }),
        scores,
    ))
}

pub fn transform_label(t: &TargetTransform) -> String {
    match (t.kind, t.yj_lambda) {
        (TransformKind::Log1p, _) => "log1p".into(),
        (TransformKind::YeoJohnson, Some(l)) => format!("yeo-johnson({l:.2})"),
        (TransformKind::YeoJohnson, None) => "yeo-johnson".into(),
    }
}

/// One row per target with the test R² of each kind, in the order of `kinds`.
pub fn write_metric_table<W: Write>(mut out: W, tables: &[TargetTable], kinds: &[RegressorKind]) -> Result<()> {
    write!(out, "parameter,transform")?;
    for k in kinds {
        write!(out, ",{}", k.name())?;
    }
    writeln!(out, ",best")?;
    for t in tables {
        write!(out, "{},{}", t.target, transform_label(&t.transform))?;
        for k in kinds {
            match t.results.iter().find(|r| r.kind == *k) {
                Some(r) => write!(out, ",{:.4}", r.test.r2)?,
                None => write!(out, ",")?,
            }
        }
        writeln!(out, ",{}", t.best().map_or("", |r| r.kind.name()))?;
    }
    Ok(())
}

pub fn write_metric_details<W: Write>(mut out: W, tables: &[TargetTable]) -> Result<()> {
    writeln!(out, "parameter,kind,hyperparams,cv_mean_r2,test_r2,mae,rmse,best")?;
    for t in tables {
        for r in &t.results {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                t.target,
                r.kind.name(),
                r.hyperparams.summary(),
                r.cv_mean_r2,
                r.test.r2,
                r.test.mae,
                r.test.rmse,
                r.best
            )?;
        }
    }
    Ok(())
}

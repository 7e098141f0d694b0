//! Shapley attributions: path-dependent TreeSHAP and exhaustive-subset oracles.

use serde::{Deserialize, Serialize};

use crate::error::{MaError, Result};
use crate::ml::tree::Tree;
use crate::ml::{FittedModel, Pipeline, Predictor, TrainedRegressor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    pub base_value: f64,
    pub phi: Vec<f64>,
    pub prediction: f64,
}

impl ShapExplanation {
    /// `base_value + sum(phi) - prediction`.
    pub fn additivity_error(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>() - self.prediction
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElem {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: Option<usize>) {
    let d = path.len();
    path.push(PathElem {
        feature,
        zero,
        one,
        weight: if d == 0 { 1.0 } else { 0.0 },
    });
    for i in (0..d).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / (d + 1) as f64;
        path[i].weight = zero * path[i].weight * (d - i) as f64 / (d + 1) as f64;
    }
}

fn unwind(path: &mut Vec<PathElem>, k: usize) {
    let d = path.len() - 1;
    let (one, zero) = (path[k].one, path[k].zero);
    let mut next = path[d].weight;
    for i in (0..d).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * (d + 1) as f64 / ((i + 1) as f64 * one);
            next = tmp - path[i].weight * zero * (d - i) as f64 / (d + 1) as f64;
        } else {
            path[i].weight = path[i].weight * (d + 1) as f64 / (zero * (d - i) as f64);
        }
    }
    for i in k..d {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElem], k: usize) -> f64 {
    let d = path.len() - 1;
    let (one, zero) = (path[k].one, path[k].zero);
    let mut next = path[d].weight;
    let mut total = 0.0;
    for i in (0..d).rev() {
        if one != 0.0 {
            let tmp = next * (d + 1) as f64 / ((i + 1) as f64 * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (d - i) as f64 / (d + 1) as f64;
        } else {
            total += path[i].weight / zero / ((d - i) as f64 / (d + 1) as f64);
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    x: &[f64],
    node: usize,
    mut path: Vec<PathElem>,
    zero: f64,
    one: f64,
    feature: Option<usize>,
    phi: &mut [f64],
) {
    extend(&mut path, zero, one, feature);
    let n = &tree.nodes[node];
    match n.split {
        None => {
            for k in 1..path.len() {
                let w = unwound_sum(&path, k);
                let e = path[k];
                if let Some(f) = e.feature {
                    phi[f] += w * (e.one - e.zero) * n.value;
                }
            }
        }
        Some(s) => {
            let (hot, cold) = if x[s.feature] <= s.threshold {
                (s.left, s.right)
            } else {
                (s.right, s.left)
            };
            let mut iz = 1.0;
            let mut io = 1.0;
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == Some(s.feature)) {
                iz = path[k].zero;
                io = path[k].one;
                unwind(&mut path, k);
            }
            let hot_frac = tree.nodes[hot].cover / n.cover;
            let cold_frac = tree.nodes[cold].cover / n.cover;
            recurse(tree, x, hot, path.clone(), iz * hot_frac, io, Some(s.feature), phi);
            recurse(tree, x, cold, path, iz * cold_frac, 0.0, Some(s.feature), phi);
        }
    }
}

/// TreeSHAP attributions of one tree, added into `phi`.
pub fn tree_shap_single(tree: &Tree, x: &[f64], phi: &mut [f64]) {
    recurse(tree, x, 0, Vec::new(), 1.0, 1.0, None, phi);
}

fn check_len(model: &TrainedRegressor, x: &[f64]) -> Result<()> {
    if x.len() != model.n_features {
        return Err(MaError::InvalidInput(format!(
            "expected {} features, got {}",
            model.n_features,
            x.len()
        )));
    }
    Ok(())
}

/// Path-dependent TreeSHAP for a forest or boosted ensemble.
pub fn tree_shap(model: &TrainedRegressor, x: &[f64]) -> Result<ShapExplanation> {
    check_len(model, x)?;
    let p = model.n_features;
    let (trees, scale, offset) = match &model.fitted {
        FittedModel::Forest(f) => (&f.trees, 1.0 / f.trees.len() as f64, 0.0),
        FittedModel::Boosted(b) => (&b.trees, b.learning_rate, b.base_score),
        FittedModel::Linear(_) => {
            return Err(MaError::Unsupported(
                "TreeSHAP needs a tree ensemble; use linear attributions".into(),
            ))
        }
    };
    let mut phi = vec![0.0; p];
    let mut base = 0.0;
    let mut pred = 0.0;
    for t in trees {
        tree_shap_single(t, x, &mut phi);
        base += t.expected_value();
        pred += t.predict(x);
    }
    for v in &mut phi {
        *v *= scale;
    }
    Ok(ShapExplanation {
        base_value: offset + scale * base,
        phi,
        prediction: offset + scale * pred,
    })
}

/// Linear attributions `coef_j * (x_j - mean_j)` around the training means.
pub fn linear_shap(model: &TrainedRegressor, x: &[f64]) -> Result<ShapExplanation> {
    check_len(model, x)?;
    let FittedModel::Linear(m) = &model.fitted else {
        return Err(MaError::Unsupported("linear attributions need a linear model".into()));
    };
    let phi: Vec<f64> = m
        .coef
        .iter()
        .zip(x.iter().zip(&m.feature_means))
        .map(|(c, (v, mu))| c * (v - mu))
        .collect();
    Ok(ShapExplanation {
        base_value: m.predict(&m.feature_means),
        phi,
        prediction: m.predict(x),
    })
}

/// TreeSHAP for tree ensembles, linear attributions otherwise.
pub fn explain(model: &TrainedRegressor, x: &[f64]) -> Result<ShapExplanation> {
    match model.fitted {
        FittedModel::Linear(_) => linear_shap(model, x),
        _ => tree_shap(model, x),
    }
}

/// Explains a pipeline on a row given in original feature units; attributions
/// refer to the standardized inputs the model sees.
pub fn explain_pipeline(pipeline: &Pipeline, x: &[f64]) -> Result<ShapExplanation> {
    if x.len() != pipeline.model.n_features {
        return Err(MaError::InvalidInput(format!(
            "expected {} features, got {}",
            pipeline.model.n_features,
            x.len()
        )));
    }
    explain(&pipeline.model, &pipeline.scaler.transform_row(x))
}

pub const MAX_BRUTE_FORCE_FEATURES: usize = 12;

pub enum ValueFunction<'a> {
    /// Features outside the coalition are integrated out along tree paths,
    /// weighted by training cover.
    TreePath,
    /// Features outside the coalition are replaced by background rows.
    Interventional { background: &'a [Vec<f64>] },
}

/// Expected tree output when only features in `mask` are known.
pub fn tree_path_value(tree: &Tree, x: &[f64], mask: u32) -> f64 {
    fn go(t: &Tree, x: &[f64], mask: u32, i: usize) -> f64 {
        let n = &t.nodes[i];
        match n.split {
            None => n.value,
            Some(s) if mask & (1 << s.feature) != 0 => {
                go(t, x, mask, if x[s.feature] <= s.threshold { s.left } else { s.right })
            }
            Some(s) => {
                (t.nodes[s.left].cover * go(t, x, mask, s.left) + t.nodes[s.right].cover * go(t, x, mask, s.right))
                    / n.cover
            }
        }
    }
    go(tree, x, mask, 0)
}

fn shapley_from_values(p: usize, v: &[f64]) -> Vec<f64> {
    let mut fact = vec![1.0f64; p + 1];
    for i in 1..=p {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..p).map(|s| fact[s] * fact[p - s - 1] / fact[p]).collect();
    let mut phi = vec![0.0; p];
    for (j, ph) in phi.iter_mut().enumerate() {
        let bit = 1usize << j;
        for mask in 0..(1usize << p) {
            if mask & bit == 0 {
                *ph += weight[mask.count_ones() as usize] * (v[mask | bit] - v[mask]);
            }
        }
    }
    phi
}

fn check_brute_force(p: usize) -> Result<()> {
    if p > MAX_BRUTE_FORCE_FEATURES {
        return Err(MaError::InvalidInput(format!(
            "exhaustive Shapley values over {p} features is refused (limit {MAX_BRUTE_FORCE_FEATURES})"
        )));
    }
    Ok(())
}

/// Exact Shapley values by enumerating all `2^p` coalitions.
pub fn brute_force_shapley(model: &TrainedRegressor, x: &[f64], value_fn: ValueFunction<'_>) -> Result<ShapExplanation> {
    check_len(model, x)?;
    match value_fn {
        ValueFunction::Interventional { background } => brute_force_interventional(model, x, background),
        ValueFunction::TreePath => {
            let p = model.n_features;
            check_brute_force(p)?;
            let (trees, scale, offset) = match &model.fitted {
                FittedModel::Forest(f) => (&f.trees, 1.0 / f.trees.len() as f64, 0.0),
                FittedModel::Boosted(b) => (&b.trees, b.learning_rate, b.base_score),
                FittedModel::Linear(_) => {
                    return Err(MaError::Unsupported("tree-path values need a tree ensemble".into()))
                }
            };
            let v: Vec<f64> = (0..(1u32 << p))
                .map(|mask| offset + scale * trees.iter().map(|t| tree_path_value(t, x, mask)).sum::<f64>())
                .collect();
            Ok(ShapExplanation {
                base_value: v[0],
                prediction: v[v.len() - 1],
                phi: shapley_from_values(p, &v),
            })
        }
    }
}

/// Exact Shapley values of any predictor with features outside the coalition
/// drawn from `background`.
pub fn brute_force_interventional<P: Predictor + ?Sized>(
    model: &P,
    x: &[f64],
    background: &[Vec<f64>],
) -> Result<ShapExplanation> {
    let p = model.n_features();
    check_brute_force(p)?;
    if x.len() != p {
        return Err(MaError::InvalidInput(format!("expected {p} features, got {}", x.len())));
    }
    if background.is_empty() {
        return Err(MaError::InvalidInput("background set is empty".into()));
    }
    let mut v = Vec::with_capacity(1 << p);
    let mut row = vec![0.0; p];
    for mask in 0..(1usize << p) {
        let mut acc = 0.0;
        for b in background {
            for j in 0..p {
                row[j] = if mask & (1 << j) != 0 { x[j] } else { b[j] };
            }
            acc += model.predict(&row)?;
        }
        v.push(acc / background.len() as f64);
    }
    Ok(ShapExplanation {
        base_value: v[0],
        prediction: model.predict(x)?,
        phi: shapley_from_values(p, &v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ml::ensemble::{BoostParams, ForestParams};
    use crate::ml::tree::{Node, Split};
    use crate::ml::{train, Hyperparams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stump(feature: usize, threshold: f64, vl: f64, vr: f64, cl: f64, cr: f64) -> Tree {
        Tree {
            nodes: vec![
                Node {
                    split: Some(Split {
                        feature,
                        threshold,
                        left: 1,
                        right: 2,
                        gain: 1.0,
                    }),
                    value: (cl * vl + cr * vr) / (cl + cr),
                    cover: cl + cr,
                },
                Node {
                    split: None,
                    value: vl,
                    cover: cl,
                },
                Node {
                    split: None,
                    value: vr,
                    cover: cr,
                },
            ],
        }
    }

    #[test]
    fn balanced_stump() {
        let t = stump(1, 0.0, 2.0, 6.0, 10.0, 10.0);
        let mut phi = vec![0.0; 3];
        tree_shap_single(&t, &[5.0, 1.0, -3.0], &mut phi);
        assert_eq!(phi, vec![0.0, 6.0 - 4.0, 0.0]);
        assert_eq!(t.expected_value(), 4.0);
    }

    fn random_data(n: usize, p: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y = x
            .iter()
            .map(|r| r[0] * r[1] + (3.0 * r[2 % p]).sin() + r[p - 1].abs() + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        (x, y)
    }

    #[test]
    fn matches_brute_force_on_small_ensembles() {
        for seed in 0..4u64 {
            let (x, y) = random_data(60, 5, seed);
            for hp in [
                Hyperparams::RandomForest(ForestParams {
                    n_trees: 2,
                    min_samples_leaf: 1,
                    ..Default::default()
                }),
                Hyperparams::GradientBoosting(BoostParams {
                    n_rounds: 10,
                    ..Default::default()
                }),
            ] {
                let m = train(&hp, &x, &y, seed).unwrap();
                for row in x.iter().take(5) {
                    let fast = tree_shap(&m, row).unwrap();
                    let slow = brute_force_shapley(&m, row, ValueFunction::TreePath).unwrap();
                    assert!(fast.additivity_error().abs() < 1e-9);
                    assert!((fast.base_value - slow.base_value).abs() < 1e-9);
                    assert!((fast.prediction - slow.prediction).abs() < 1e-12);
                    for (a, b) in fast.phi.iter().zip(&slow.phi) {
                        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn repeated_feature_on_path() {
        // Two splits on feature 0 along one path exercise the unwind step.
        let (x, _) = random_data(80, 3, 9);
        let y: Vec<f64> = x.iter().map(|r| (4.0 * r[0]).floor() + r[1]).collect();
        let m = train(
            &Hyperparams::RandomForest(ForestParams {
                n_trees: 1,
                min_samples_leaf: 1,
                max_features: Some(3),
                bootstrap: false,
                max_depth: None,
            }),
            &x,
            &y,
            0,
        )
        .unwrap();
        for row in x.iter().take(10) {
            let fast = tree_shap(&m, row).unwrap();
            let slow = brute_force_shapley(&m, row, ValueFunction::TreePath).unwrap();
            for (a, b) in fast.phi.iter().zip(&slow.phi) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn linear_attributions_are_additive() {
        let (x, y) = random_data(40, 4, 2);
        let m = train(&Hyperparams::Ridge { alpha: 0.5 }, &x, &y, 0).unwrap();
        assert!(matches!(tree_shap(&m, &x[0]), Err(MaError::Unsupported(_))));
        let e = explain(&m, &x[3]).unwrap();
        assert!(e.additivity_error().abs() < 1e-12);
        // With the training rows as background the interventional values coincide.
        let b = brute_force_shapley(&m, &x[3], ValueFunction::Interventional { background: &x }).unwrap();
        for (a, c) in e.phi.iter().zip(&b.phi) {
            assert!((a - c).abs() < 1e-10);
        }
    }

    struct Additive;

    impl Predictor for Additive {
        fn n_features(&self) -> usize {
            2
        }
        fn predict(&self, x: &[f64]) -> Result<f64> {
            Ok(x[0] * x[0] + (2.0 * x[1]).exp())
        }
    }

    struct Constant;

    impl Predictor for Constant {
        fn n_features(&self) -> usize {
            3
        }
        fn predict(&self, _: &[f64]) -> Result<f64> {
            Ok(7.0)
        }
    }

    #[test]
    fn interventional_oracle_examples() {
        let bg = vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-2.0, 1.0]];
        let e = brute_force_interventional(&Additive, &[3.0, -1.0], &bg).unwrap();
        let g1_mean = (0.0 + 1.0 + 4.0) / 3.0;
        let g2_mean = (1.0 + 1f64.exp() + 2f64.exp()) / 3.0;
        assert!((e.phi[0] - (9.0 - g1_mean)).abs() < 1e-12);
        assert!((e.phi[1] - ((-2f64).exp() - g2_mean)).abs() < 1e-12);

        let bg3 = vec![vec![1.0, 2.0, 3.0]];
        let c = brute_force_interventional(&Constant, &[0.0, 0.0, 0.0], &bg3).unwrap();
        assert_eq!(c.phi, vec![0.0; 3]);
    }

    #[test]
    fn refuses_wide_inputs() {
        let (x, y) = random_data(30, 13, 1);
        let m = train(
            &Hyperparams::RandomForest(ForestParams {
                n_trees: 1,
                ..Default::default()
            }),
            &x,
            &y,
            0,
        )
        .unwrap();
        assert!(brute_force_shapley(&m, &x[0], ValueFunction::TreePath).is_err());
        assert!(tree_shap(&m, &x[0]).is_ok());
    }

    #[test]
    fn symmetric_features_share_credit() {
        // f = 1 when x0 > 0 and x1 > 0, built as a symmetric depth-2 tree.
        let leaf = |v: f64, c: f64| Node {
            split: None,
            value: v,
            cover: c,
        };
        let split = |f: usize, l: usize, r: usize, v: f64, c: f64| Node {
            split: Some(Split {
                feature: f,
                threshold: 0.0,
                left: l,
                right: r,
                gain: 0.0,
            }),
            value: v,
            cover: c,
        };
        let t = Tree {
            nodes: vec![
                split(0, 1, 2, 0.25, 4.0),
                leaf(0.0, 2.0),
                split(1, 3, 4, 0.5, 2.0),
                leaf(0.0, 1.0),
                leaf(1.0, 1.0),
            ],
        };
        let mut phi = vec![0.0; 2];
        tree_shap_single(&t, &[1.0, 1.0], &mut phi);
        assert!((phi[0] - phi[1]).abs() < 1e-15);
        assert!((phi[0] + phi[1] - 0.75).abs() < 1e-15);
    }
}

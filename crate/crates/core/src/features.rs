//! Architecture features and the transforms applied to features and targets.

use serde::{Deserialize, Serialize};

use crate::error::{MaError, Result};

/// One model family member, as listed in an architecture registry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub model_id: String,
    pub n_layers: u32,
    pub hidden_dim: u32,
    pub n_heads: u32,
    pub intermediate_dim: u32,
}

impl ModelArch {
    pub fn at_layer(&self, layer_index: u32) -> ArchSpec {
        ArchSpec {
            arch: self.clone(),
            layer_index,
        }
    }
}

/// Parses a registry: a JSON array of [`ModelArch`] objects.
pub fn parse_registry(text: &str) -> Result<Vec<ModelArch>> {
    let archs: Vec<ModelArch> = serde_json::from_str(text)?;
    for a in &archs {
        if a.n_layers == 0 || a.hidden_dim == 0 || a.n_heads == 0 || a.intermediate_dim == 0 {
            return Err(MaError::InvalidInput(format!(
                "architecture {} has a zero dimension",
                a.model_id
            )));
        }
    }
    Ok(archs)
}

/// A model architecture together with one (1-based) layer of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub arch: ModelArch,
    pub layer_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerIndexing {
    /// `layer_pos = l / L` with `l` in `1..=L`.
    #[default]
    OneBased,
    /// `layer_pos = (l - 1) / L`, so the first layer sits at 0.
    ZeroBased,
}

pub const N_FEATURES: usize = 10;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "layer_pos",
    "layer_pos_sq",
    "layer_pos_cube",
    "layer_pos_sqrt",
    "attn_density",
    "intermediate_ratio",
    "width_depth",
    "heads_per_layer",
    "log_hidden",
    "depth_interaction",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn layer_pos(&self) -> f64 {
        self.0[0]
    }
}

pub fn build_features(spec: &ArchSpec) -> Result<FeatureVector> {
    build_features_with(spec, LayerIndexing::OneBased)
}

pub fn build_features_with(spec: &ArchSpec, indexing: LayerIndexing) -> Result<FeatureVector> {
    let a = &spec.arch;
    if a.n_layers == 0 || a.hidden_dim == 0 || a.n_heads == 0 || a.intermediate_dim == 0 {
        return Err(MaError::InvalidInput(format!("{} has a zero dimension", a.model_id)));
    }
    if spec.layer_index == 0 || spec.layer_index > a.n_layers {
        return Err(MaError::InvalidInput(format!(
            "layer {} outside 1..={} for {}",
            spec.layer_index, a.n_layers, a.model_id
        )));
    }
    let l = spec.layer_index as f64;
    let depth = a.n_layers as f64;
    let d = a.hidden_dim as f64;
    let heads = a.n_heads as f64;
    let pos = match indexing {
        LayerIndexing::OneBased => l / depth,
        LayerIndexing::ZeroBased => (l - 1.0) / depth,
    };
    Ok(FeatureVector([
        pos,
        pos * pos,
        pos * pos * pos,
        pos.sqrt(),
        heads / d,
        a.intermediate_dim as f64 / d,
        d / depth,
        heads / depth,
        d.ln(),
        l * depth,
    ]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Log1p,
    YeoJohnson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// A fitted target transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetTransform {
    pub kind: TransformKind,
    /// Present for Yeo-Johnson.
    pub yj_lambda: Option<f64>,
}

impl TargetTransform {
    pub fn log1p() -> Self {
        Self {
            kind: TransformKind::Log1p,
            yj_lambda: None,
        }
    }

    pub fn yeo_johnson(lambda: f64) -> Self {
        Self {
            kind: TransformKind::YeoJohnson,
            yj_lambda: Some(lambda),
        }
    }

    /// Fits the transform parameters (only Yeo-Johnson has any) on `values`.
    pub fn fit(kind: TransformKind, values: &[f64]) -> Result<Self> {
        match kind {
            TransformKind::Log1p => Ok(Self::log1p()),
            TransformKind::YeoJohnson => Ok(Self::yeo_johnson(fit_yeo_johnson_lambda(values)?)),
        }
    }

    pub fn apply(&self, values: &[f64], direction: Direction) -> Result<Vec<f64>> {
        match self.kind {
            TransformKind::Log1p => log1p_transform(values, direction),
            TransformKind::YeoJohnson => {
                let lambda = self.yj_lambda.ok_or_else(|| {
                    MaError::InvalidInput("Yeo-Johnson transform without lambda".into())
                })?;
                yeo_johnson(values, lambda, direction)
            }
        }
    }
}

fn log1p_transform(values: &[f64], direction: Direction) -> Result<Vec<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &x)| match direction {
            Direction::Forward if x > -1.0 => Ok(x.ln_1p()),
            Direction::Forward => Err(MaError::Domain(format!("log1p: value {x} at index {i} is <= -1"))),
            Direction::Inverse if x.is_finite() => Ok(x.exp_m1()),
            Direction::Inverse => Err(MaError::Domain(format!("expm1: value {x} at index {i} is not finite"))),
        })
        .collect()
}

const LAMBDA_EPS: f64 = 1e-12;

fn yj_forward(x: f64, lambda: f64) -> f64 {
    if x >= 0.0 {
        if lambda.abs() < LAMBDA_EPS {
            x.ln_1p()
        } else {
            (lambda * x.ln_1p()).exp_m1() / lambda
        }
    } else {
        let mu = 2.0 - lambda;
        if mu.abs() < LAMBDA_EPS {
            -(-x).ln_1p()
        } else {
            -(mu * (-x).ln_1p()).exp_m1() / mu
        }
    }
}

fn yj_inverse(y: f64, lambda: f64) -> Option<f64> {
    if y >= 0.0 {
        if lambda.abs() < LAMBDA_EPS {
            Some(y.exp_m1())
        } else {
            let base = lambda * y;
            (base > -1.0).then(|| (base.ln_1p() / lambda).exp_m1())
        }
    } else {
        let mu = 2.0 - lambda;
        if mu.abs() < LAMBDA_EPS {
            Some(-(-y).exp_m1())
        } else {
            let base = -mu * y;
            (base > -1.0).then(|| -(base.ln_1p() / mu).exp_m1())
        }
    }
}

/// Yeo-Johnson power transform with parameter `lambda`.
pub fn yeo_johnson(values: &[f64], lambda: f64, direction: Direction) -> Result<Vec<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v.is_finite() {
                return Err(MaError::Domain(format!("Yeo-Johnson: value {v} at index {i} is not finite")));
            }
            match direction {
                Direction::Forward => Ok(yj_forward(v, lambda)),
                Direction::Inverse => yj_inverse(v, lambda).ok_or_else(|| {
                    MaError::Domain(format!(
                        "Yeo-Johnson inverse: value {v} at index {i} is outside the range for lambda {lambda}"
                    ))
                }),
            }
        })
        .collect()
}

/// Profile log-likelihood of the Yeo-Johnson parameter under normality.
pub fn yeo_johnson_log_likelihood(values: &[f64], lambda: f64) -> f64 {
    let n = values.len() as f64;
    let transformed: Vec<f64> = values.iter().map(|&x| yj_forward(x, lambda)).collect();
    let mean = transformed.iter().sum::<f64>() / n;
    let var = transformed.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let jacobian: f64 = values.iter().map(|&x| x.signum() * x.abs().ln_1p()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * jacobian
}

/// Maximizes the profile log-likelihood over `[-5, 5]` in steps of 0.01.
pub fn fit_yeo_johnson_lambda(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(MaError::InvalidInput("Yeo-Johnson fit needs at least 2 values".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(MaError::Domain(format!("value at index {i} is not finite")));
    }
    let mut best = (1.0, f64::NEG_INFINITY);
    for i in 0..=1000 {
        let lambda = (i as f64 - 500.0) / 100.0;
        let ll = yeo_johnson_log_likelihood(values, lambda);
        if ll > best.1 {
            best = (lambda, ll);
        }
    }
    Ok(best.0)
}

/// Per-column standardization fitted on a subset of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Columns that were constant on the fit rows; their `sd` is set to 1.
    pub constant_columns: Vec<usize>,
}

impl Scaler {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(MaError::InvalidInput("scaler needs at least 2 rows".into()));
        }
        let p = rows[0].len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(MaError::InvalidInput("ragged feature matrix".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; p];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n;
            }
        }
        let mut sd = vec![0.0; p];
        for r in rows {
            for j in 0..p {
                sd[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        let mut constant_columns = Vec::new();
        for j in 0..p {
            sd[j] = sd[j].sqrt();
            if !(sd[j] > 1e-12 * mean[j].abs().max(1.0)) {
                log::warn!("column {j} is constant on the fit rows; leaving it unscaled");
                constant_columns.push(j);
                sd[j] = 1.0;
            }
        }
        Ok(Self {
            mean,
            sd,
            constant_columns,
        })
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Scales every row of `matrix` with statistics from the rows in `fit_on`.
pub fn standardize(matrix: &[Vec<f64>], fit_on: &[usize]) -> Result<(Vec<Vec<f64>>, Scaler)> {
    let fit_rows = fit_on
        .iter()
        .map(|&i| {
            matrix
                .get(i)
                .map(Vec::as_slice)
                .ok_or_else(|| MaError::InvalidInput(format!("fit row {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    let scaler = Scaler::fit(&fit_rows)?;
    let scaled = matrix.iter().map(|r| scaler.transform_row(r)).collect();
    Ok((scaled, scaler))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch(l: u32, d: u32, h: u32) -> ModelArch {
        ModelArch {
            model_id: "m".into(),
            n_layers: l,
            hidden_dim: d,
            n_heads: h,
            intermediate_dim: 4 * d,
        }
    }

    #[test]
    fn feature_examples() {
        let f = build_features(&arch(6, 512, 8).at_layer(6)).unwrap();
        assert_eq!(&f.0[0..4], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(f.0[4], 0.015625);
        assert_eq!(f.0[5], 4.0);
        assert_eq!(f.0[6], 512.0 / 6.0);
        assert_eq!(f.0[7], 8.0 / 6.0);
        assert_eq!(f.0[8], 512f64.ln());
        assert_eq!(f.0[9], 36.0);

        let f = build_features(&arch(4, 128, 4).at_layer(1)).unwrap();
        assert_eq!(f.0[0], 0.25);
        assert_eq!(f.0[3], 0.5);
        let z = build_features_with(&arch(4, 128, 4).at_layer(1), LayerIndexing::ZeroBased).unwrap();
        assert_eq!(z.0[0], 0.0);
    }

    #[test]
    fn feature_errors() {
        assert!(build_features(&arch(4, 128, 4).at_layer(5)).is_err());
        assert!(build_features(&arch(4, 128, 4).at_layer(0)).is_err());
        assert!(build_features(&arch(4, 0, 4).at_layer(1)).is_err());
    }

    #[test]
    fn registry_parsing() {
        let text = r#"[{"model_id":"a","n_layers":6,"hidden_dim":128,"n_heads":4,"intermediate_dim":512}]"#;
        assert_eq!(parse_registry(text).unwrap()[0], ModelArch { model_id: "a".into(), ..arch(6, 128, 4) });
        assert!(parse_registry("[{}]").is_err());
        assert!(parse_registry(&text.replace("\"n_heads\":4", "\"n_heads\":0")).is_err());
    }

    #[test]
    fn yeo_johnson_special_cases() {
        let xs = [-3.0, -0.5, 0.0, 0.7, 12.0];
        let id = yeo_johnson(&xs, 1.0, Direction::Forward).unwrap();
        for (a, b) in id.iter().zip(xs) {
            assert!((a - b).abs() < 1e-15);
        }
        let l0 = yeo_johnson(&[0.0, 1.0, 5.0], 0.0, Direction::Forward).unwrap();
        assert_eq!(l0, vec![0.0, 2f64.ln(), 6f64.ln()]);
        let l2 = yeo_johnson(&[-1.0, -4.0], 2.0, Direction::Forward).unwrap();
        assert_eq!(l2, vec![-(2f64.ln()), -(5f64.ln())]);
        assert!(yeo_johnson(&[f64::NAN], 1.0, Direction::Forward).is_err());
        // lambda < 0 bounds the positive range by -1/lambda
        let err = yeo_johnson(&[0.1, 3.0], -0.5, Direction::Inverse).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }

    #[test]
    fn log1p_examples() {
        assert_eq!(log1p_transform(&[0.0, 1.0], Direction::Forward).unwrap(), vec![0.0, 2f64.ln()]);
        let err = log1p_transform(&[1.0, -1.0], Direction::Forward).unwrap_err();
        assert!(err.to_string().contains("index 1"));
    }

    #[test]
    fn yeo_johnson_lambda_fit() {
        // Exponential-looking data is pulled toward negative lambda.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let skewed: Vec<f64> = (0..300).map(|_| (rng.random_range(0.0..3.0f64)).exp() * 10.0).collect();
        let lam = fit_yeo_johnson_lambda(&skewed).unwrap();
        assert!(lam < 0.5, "{lam}");
        assert!((-5.0..=5.0).contains(&lam));
        // The chosen lambda is the grid maximizer.
        let best = yeo_johnson_log_likelihood(&skewed, lam);
        for l in [-2.0, 0.0, 1.0, 2.0] {
            assert!(yeo_johnson_log_likelihood(&skewed, l) <= best);
        }
        assert!(fit_yeo_johnson_lambda(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn yeo_johnson_round_trip_and_monotone(
            lambda in -3.0f64..5.0,
            mut xs in prop::collection::vec(-50.0f64..50.0, 2..40),
        ) {
            xs.sort_by(f64::total_cmp);
            let y = yeo_johnson(&xs, lambda, Direction::Forward).unwrap();
            for w in y.windows(2).zip(xs.windows(2)) {
                if w.1[1] > w.1[0] {
                    prop_assert!(w.0[1] > w.0[0]);
                }
            }
            let back = yeo_johnson(&y, lambda, Direction::Inverse).unwrap();
            for (a, b) in back.iter().zip(&xs) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn standardize_fit_subset() {
        let m = vec![
            vec![1.0, 5.0, 4.0],
            vec![3.0, 5.0, 4.0],
            vec![10.0, 5.0, 4.0],
            vec![-2.0, 7.0, 4.0],
        ];
        let (scaled, scaler) = standardize(&m, &[0, 1]).unwrap();
        // fit rows: col0 mean 2, sd 1; col1, col2 constant
        assert_eq!(scaler.mean, vec![2.0, 5.0, 4.0]);
        assert_eq!(scaler.sd, vec![1.0, 1.0, 1.0]);
        assert_eq!(scaler.constant_columns, vec![1, 2]);
        assert_eq!(scaled[0], vec![-1.0, 0.0, 0.0]);
        assert_eq!(scaled[1], vec![1.0, 0.0, 0.0]);
        assert_eq!(scaled[2], vec![8.0, 0.0, 0.0]);
        assert_eq!(scaled[3], vec![-4.0, 2.0, 0.0]);

        let (scaled, _) = standardize(&m, &[0, 1, 2, 3]).unwrap();
        let mean0: f64 = scaled.iter().map(|r| r[0]).sum::<f64>() / 4.0;
        let var0: f64 = scaled.iter().map(|r| r[0] * r[0]).sum::<f64>() / 4.0;
        assert!(mean0.abs() < 1e-15 && (var0 - 1.0).abs() < 1e-12);

        assert!(standardize(&m, &[0]).is_err());
        assert!(standardize(&m, &[0, 9]).is_err());
    }

    #[test]
    fn held_out_rows_do_not_leak() {
        let mut m = vec![vec![1.0, 2.0], vec![2.0, 0.0], vec![3.0, 1.0], vec![100.0, -50.0]];
        let (a, sa) = standardize(&m, &[0, 1, 2]).unwrap();
        m[3] = vec![-7.0, 9.0];
        let (b, sb) = standardize(&m, &[0, 1, 2]).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a[..3], b[..3]);
    }
}

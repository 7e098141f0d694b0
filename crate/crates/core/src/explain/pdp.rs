//! One- and two-feature partial dependence.

use serde::{Deserialize, Serialize};

use crate::error::{MaError, Result};
use crate::ml::Predictor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdpGrid {
    pub features: Vec<usize>,
    pub grids: Vec<Vec<f64>>,
    /// Averaged predictions, row-major over the grids (last feature fastest).
    pub values: Vec<f64>,
    pub warnings: Vec<String>,
}

impl PdpGrid {
    pub fn value_at(&self, cell: &[usize]) -> f64 {
        let mut idx = 0;
        for (g, &c) in self.grids.iter().zip(cell) {
            idx = idx * g.len() + c;
        }
        self.values[idx]
    }
}

fn feature_grid(rows: &[Vec<f64>], j: usize, size: usize) -> (Vec<f64>, Option<String>) {
    let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return (vec![lo], Some(format!("feature {j} is constant; grid has a single point")));
    }
    let mut g: Vec<f64> = (0..size).map(|i| lo + (hi - lo) * i as f64 / (size - 1) as f64).collect();
    g[size - 1] = hi;
    (g, None)
}

/// Mean prediction over `rows` with the chosen features set to each grid
/// point. Grids span the observed range of each feature.
pub fn pdp<P: Predictor + ?Sized>(
    model: &P,
    rows: &[Vec<f64>],
    features: &[usize],
    grid_sizes: &[usize],
) -> Result<PdpGrid> {
    if features.is_empty() || features.len() > 2 || features.len() != grid_sizes.len() {
        return Err(MaError::InvalidInput(
            "partial dependence takes one or two features with one grid size each".into(),
        ));
    }
    if features.len() == 2 && features[0] == features[1] {
        return Err(MaError::InvalidInput("partial dependence features must be distinct".into()));
    }
    if grid_sizes.iter().any(|&s| s < 2) {
        return Err(MaError::InvalidInput("grid sizes must be at least 2".into()));
    }
    if rows.is_empty() {
        return Err(MaError::InvalidInput("partial dependence needs at least one row".into()));
    }
    let p = model.n_features();
    if let Some(&j) = features.iter().find(|&&j| j >= p) {
        return Err(MaError::InvalidInput(format!("feature {j} out of range for {p} features")));
    }

    let mut grids = Vec::new();
    let mut warnings = Vec::new();
    for (&j, &s) in features.iter().zip(grid_sizes) {
        let (g, w) = feature_grid(rows, j, s);
        if let Some(w) = w {
            log::warn!("{w}");
            warnings.push(w);
        }
        grids.push(g);
    }

    let cells: Vec<Vec<f64>> = match grids.as_slice() {
        [a] => a.iter().map(|&v| vec![v]).collect(),
        [a, b] => a.iter().flat_map(|&u| b.iter().map(move |&v| vec![u, v])).collect(),
        _ => unreachable!(),
    };
    let mut values = Vec::with_capacity(cells.len());
    let mut row = vec![0.0; p];
    for cell in &cells {
        let mut acc = 0.0;
        for r in rows {
            row.copy_from_slice(r);
            for (&j, &v) in features.iter().zip(cell) {
                row[j] = v;
            }
            acc += model.predict(&row)?;
        }
        values.push(acc / rows.len() as f64);
    }
    Ok(PdpGrid {
        features: features.to_vec(),
        grids,
        values,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Mult;

    impl Predictor for Mult {
        fn n_features(&self) -> usize {
            3
        }
        fn predict(&self, x: &[f64]) -> Result<f64> {
            Ok(x[0] * x[1] + x[0].sin())
        }
    }

    fn rows() -> Vec<Vec<f64>> {
        (0..12).map(|i| vec![i as f64 * 0.3, (i % 5) as f64 - 2.0, 1.0]).collect()
    }

    #[test]
    fn ignored_feature_is_flat() {
        let r: Vec<Vec<f64>> = rows().into_iter().map(|mut v| {
            v[2] = v[0] * 2.0;
            v
        }).collect();
        let g = pdp(&Mult, &r, &[2], &[9]).unwrap();
        let lo = g.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = g.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 1e-12);
        assert_eq!(g.grids[0].len(), 9);
    }

    #[test]
    fn two_d_matches_direct_averaging() {
        let r = rows();
        let g = pdp(&Mult, &r, &[0, 1], &[4, 3]).unwrap();
        assert_eq!(g.values.len(), 12);
        for (k, v) in g.grids[0].iter().enumerate() {
            assert!((v - 1.1 * k as f64).abs() < 1e-12);
        }
        assert_eq!(g.grids[1], vec![-2.0, 0.0, 2.0]);
        for (a, &u) in g.grids[0].iter().enumerate() {
            for (b, &v) in g.grids[1].iter().enumerate() {
                // every row's prediction ignores its own x0, x1 once both are fixed
                let direct = u * v + u.sin();
                assert!((g.value_at(&[a, b]) - direct).abs() < 1e-12);
            }
        }
        let one = pdp(&Mult, &r, &[1], &[5]).unwrap();
        let mean_x0: f64 = r.iter().map(|v| v[0]).sum::<f64>() / 12.0;
        let mean_sin: f64 = r.iter().map(|v| v[0].sin()).sum::<f64>() / 12.0;
        for (k, &v) in one.grids[0].iter().enumerate() {
            assert!((one.values[k] - (mean_x0 * v + mean_sin)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_feature_and_errors() {
        let r = rows();
        let g = pdp(&Mult, &r, &[2], &[5]).unwrap();
        assert_eq!(g.grids[0], vec![1.0]);
        assert_eq!(g.warnings.len(), 1);
        assert!(pdp(&Mult, &r, &[0, 0], &[3, 3]).is_err());
        assert!(pdp(&Mult, &r, &[0], &[1]).is_err());
        assert!(pdp(&Mult, &r, &[7], &[3]).is_err());
        assert!(pdp(&Mult, &r, &[0, 1, 2], &[3, 3, 3]).is_err());
    }
}

//! Per-layer ratio trajectories across training checkpoints.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curve::{eval_model, FitParams};
use crate::error::{MaError, Result};
use crate::stats::{guarded_ratio, StatsRecord};

/// Minimum number of checkpoints a trajectory needs before it is fitted.
pub const MIN_FIT_POINTS: usize = 27;
pub const DEFAULT_SAMPLE_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub ratio: f64,
    pub n_inputs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrajectory {
    pub model_id: String,
    pub layer: u32,
    pub points: Vec<TrajectoryPoint>,
}

impl LayerTrajectory {
    pub fn new(model_id: impl Into<String>, layer: u32, points: Vec<TrajectoryPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(MaError::InvalidInput(format!(
                "trajectory needs at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(w) = points.windows(2).find(|w| w[1].step <= w[0].step) {
            return Err(MaError::InvalidInput(format!(
                "steps must strictly increase ({} then {})",
                w[0].step, w[1].step
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.ratio.is_finite()) {
            return Err(MaError::InvalidInput(format!(
                "non-finite ratio at step {}",
                p.step
            )));
        }
        Ok(Self {
            model_id: model_id.into(),
            layer,
            points,
        })
    }

    pub fn steps(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.step as f64).collect()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.ratio).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// CSV with header `step,ratio,n_inputs`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,ratio,n_inputs")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.step, p.ratio, p.n_inputs)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationInfo {
    /// Largest observed step.
    pub t_scale: f64,
    /// Largest observed ratio.
    pub r_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint {
    pub t: f64,
    pub r: f64,
}

/// Averages per-input statistics of one (model, layer, step) into a single
/// point: the ratio of the mean max to the mean median.
pub fn aggregate_step(records: &[StatsRecord]) -> Result<TrajectoryPoint> {
    let first = records
        .first()
        .ok_or_else(|| MaError::InvalidInput("no records to aggregate".into()))?;
    if let Some(r) = records.iter().find(|r| {
        r.model_id != first.model_id || r.layer != first.layer || r.step != first.step
    }) {
        return Err(MaError::InvalidInput(format!(
            "mixed keys: ({}, {}, {}) vs ({}, {}, {})",
            first.model_id, first.layer, first.step, r.model_id, r.layer, r.step
        )));
    }
    let n = records.len() as f64;
    let mean_max = records.iter().map(|r| r.max_abs).sum::<f64>() / n;
    let mean_median = records.iter().map(|r| r.median_abs).sum::<f64>() / n;
    Ok(TrajectoryPoint {
        step: first.step,
        ratio: guarded_ratio(mean_max, mean_median),
        n_inputs: records.len(),
    })
}

/// One point per distinct step for `(model_id, layer)`, ascending by step.
///
/// Duplicate `(step, input_id)` pairs are rejected.
pub fn build_trajectory(records: &[StatsRecord], model_id: &str, layer: u32) -> Result<LayerTrajectory> {
    let mut by_step: BTreeMap<u64, Vec<StatsRecord>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for r in records.iter().filter(|r| r.model_id == model_id && r.layer == layer) {
        if !seen.insert((r.step, r.input_id.as_str())) {
            return Err(MaError::InvalidInput(format!(
                "duplicate record for step {} input {:?} (model {model_id}, layer {layer})",
                r.step, r.input_id
            )));
        }
        by_step.entry(r.step).or_default().push(r.clone());
    }
    if by_step.is_empty() {
        return Err(MaError::NotFound(format!(
            "no records for model {model_id:?} layer {layer}"
        )));
    }
    let points = by_step
        .values()
        .map(|group| aggregate_step(group))
        .collect::<Result<Vec<_>>>()?;
    LayerTrajectory::new(model_id, layer, points)
}

/// Every `(model_id, layer)` key present in `records`, sorted.
pub fn trajectory_keys(records: &[StatsRecord]) -> Vec<(String, u32)> {
    let keys: std::collections::BTreeSet<(String, u32)> = records
        .iter()
        .map(|r| (r.model_id.clone(), r.layer))
        .collect();
    keys.into_iter().collect()
}

/// Scales steps by the largest step and ratios by the largest ratio.
pub fn normalize(traj: &LayerTrajectory) -> Result<(Vec<NormalizedPoint>, NormalizationInfo)> {
    let t_scale = traj.points.iter().map(|p| p.step).max().unwrap_or(0) as f64;
    let r_scale = traj.points.iter().map(|p| p.ratio).fold(f64::NEG_INFINITY, f64::max);
    if !(t_scale > 0.0) {
        return Err(MaError::InvalidInput("all steps are zero".into()));
    }
    if !(r_scale > 0.0) {
        return Err(MaError::InvalidInput("largest ratio is not positive".into()));
    }
    let info = NormalizationInfo { t_scale, r_scale };
    let points = traj
        .points
        .iter()
        .map(|p| NormalizedPoint {
            t: p.step as f64 / t_scale,
            r: p.ratio / r_scale,
        })
        .collect();
    Ok((points, info))
}

/// Maps normalized points back to `(step, ratio)` pairs.
pub fn denormalize_points(points: &[NormalizedPoint], info: &NormalizationInfo) -> Vec<(f64, f64)> {
    points
        .iter()
        .map(|p| (p.t * info.t_scale, p.r * info.r_scale))
        .collect()
}

/// Converts parameters fitted on normalized data to raw steps and ratios so
/// that `f_raw(t) = R * f_norm(t / T)`.
pub fn denormalize_params(p: &FitParams, info: &NormalizationInfo) -> Result<FitParams> {
    if !(info.t_scale > 0.0 && info.r_scale > 0.0) {
        return Err(MaError::InvalidInput(format!("invalid normalization {info:?}")));
    }
    Ok(FitParams {
        amplitude: info.r_scale * p.amplitude,
        lambda: p.lambda,
        gamma: p.gamma / info.t_scale,
        t0: p.t0,
        baseline: info.r_scale * p.baseline,
    })
}

/// Inverse of [`denormalize_params`].
pub fn normalize_params(p: &FitParams, info: &NormalizationInfo) -> FitParams {
    FitParams {
        amplitude: p.amplitude / info.r_scale,
        lambda: p.lambda,
        gamma: p.gamma * info.t_scale,
        t0: p.t0,
        baseline: p.baseline / info.r_scale,
    }
}

/// Samples the model at `steps` with additive Gaussian noise, clamping ratios
/// to at least 1.
pub fn gen_synthetic(
    model_id: &str,
    layer: u32,
    p: &FitParams,
    steps: &[u64],
    noise_sd: f64,
    seed: u64,
) -> Result<LayerTrajectory> {
    if !(noise_sd >= 0.0) {
        return Err(MaError::InvalidInput(format!("noise_sd {noise_sd} < 0")));
    }
    let normal = Normal::new(0.0, noise_sd).map_err(|e| MaError::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = steps
        .iter()
        .map(|&s| {
            let clean = eval_model(p, s as f64).map_err(|e| MaError::InvalidInput(e.to_string()))?;
            let noise = if noise_sd > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            Ok(TrajectoryPoint {
                step: s,
                ratio: (clean + noise).max(1.0),
                n_inputs: DEFAULT_SAMPLE_SIZE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LayerTrajectory::new(model_id, layer, points)
}

/// `n` evenly spaced integer steps from 0 to `last` inclusive.
pub fn linear_steps(last: u64, n: usize) -> Vec<u64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| ((i as f64) * last as f64 / (n - 1) as f64).round() as u64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng};

    fn rec(step: u64, input: &str, max: f64, median: f64) -> StatsRecord {
        StatsRecord {
            model_id: "m".into(),
            step,
            layer: 3,
            input_id: input.into(),
            seq_len: 1,
            hidden_dim: 1,
            median_abs: median,
            max_abs: max,
            top: vec![],
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_step(&[rec(0, "a", 200.0, 1.0)]).unwrap().ratio, 200.0);
        let p = aggregate_step(&[rec(5, "a", 100.0, 2.0), rec(5, "b", 300.0, 2.0)]).unwrap();
        assert_eq!(p.ratio, 100.0);
        assert_eq!(p.n_inputs, 2);
        assert_eq!(p.step, 5);
    }

    #[test]
    fn aggregate_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let recs: Vec<_> = (0..10)
            .map(|i| {
                let med = rng.random_range(0.1..2.0);
                rec(7, &format!("s{i}"), med + rng.random_range(0.0..500.0), med)
            })
            .collect();
        let mut max_sum = 0.0;
        let mut med_sum = 0.0;
        for r in &recs {
            max_sum += r.max_abs;
            med_sum += r.median_abs;
        }
        let expected = (max_sum / 10.0) / (med_sum / 10.0);
        let got = aggregate_step(&recs).unwrap().ratio;
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn aggregate_rejects_mixed_and_guards_zero() {
        assert!(aggregate_step(&[rec(0, "a", 1.0, 1.0), rec(1, "b", 1.0, 1.0)]).is_err());
        assert!(aggregate_step(&[]).is_err());
        assert!(aggregate_step(&[rec(0, "a", 3.0, 0.0)]).unwrap().ratio.is_infinite());
    }

    #[test]
    fn build_sorts_and_dedups() {
        let mut recs = vec![
            rec(2000, "a", 30.0, 1.0),
            rec(0, "a", 10.0, 1.0),
            rec(1000, "a", 20.0, 1.0),
            rec(1000, "b", 40.0, 1.0),
        ];
        let t = build_trajectory(&recs, "m", 3).unwrap();
        assert_eq!(t.points.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 1000, 2000]);
        assert_eq!(t.points[1].ratio, 30.0);

        recs.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(build_trajectory(&recs, "m", 3).unwrap(), t);

        assert!(matches!(build_trajectory(&recs, "m", 9), Err(MaError::NotFound(_))));
        recs.push(rec(1000, "a", 20.0, 1.0));
        assert!(matches!(build_trajectory(&recs, "m", 3), Err(MaError::InvalidInput(_))));
    }

    #[test]
    fn normalize_examples() {
        let steps = linear_steps(143_000, 37);
        let points: Vec<_> = steps
            .iter()
            .enumerate()
            .map(|(i, &s)| TrajectoryPoint { step: s, ratio: 10.0 + 2340.0 * (i as f64 / 36.0), n_inputs: 10 })
            .collect();
        let traj = LayerTrajectory::new("m", 1, points).unwrap();
        let (norm, info) = normalize(&traj).unwrap();
        assert_eq!(norm.last().unwrap().t, 1.0);
        assert_eq!(info.r_scale, 2350.0);
        assert_eq!(norm.iter().map(|p| p.r).fold(0.0, f64::max), 1.0);
        assert!(norm.iter().all(|p| (0.0..=1.0).contains(&p.t) && p.r > 0.0 && p.r <= 1.0));
        for ((t, r), orig) in denormalize_points(&norm, &info).iter().zip(&traj.points) {
            assert!((t - orig.step as f64).abs() <= 1e-12 * orig.step.max(1) as f64);
            assert!((r - orig.ratio).abs() <= 1e-12 * orig.ratio);
        }

        let flat = LayerTrajectory::new(
            "m",
            1,
            vec![TrajectoryPoint { step: 0, ratio: 1.0, n_inputs: 1 }],
        );
        assert!(flat.is_err());
    }

    #[test]
    fn denormalize_examples() {
        let p = FitParams::new(0.5, 0.2, 14.3, 0.1, 0.4);
        let id = NormalizationInfo { t_scale: 1.0, r_scale: 1.0 };
        assert_eq!(denormalize_params(&p, &id).unwrap(), p);
        let info = NormalizationInfo { t_scale: 143_000.0, r_scale: 2350.0 };
        let raw = denormalize_params(&p, &info).unwrap();
        assert!((raw.gamma - 1e-4).abs() < 1e-18);
        assert_eq!(raw.amplitude, 2350.0 * 0.5);
        assert!(denormalize_params(&p, &NormalizationInfo { t_scale: 0.0, r_scale: 1.0 }).is_err());
    }

    proptest! {
        #[test]
        fn denormalized_curve_matches_scaled_normalized_curve(
            a in -5.0f64..5.0, lambda in 0.0f64..5.0, gamma in 0.1f64..50.0,
            t0 in 0.01f64..2.0, k in -2.0f64..2.0,
            t_scale in 10.0f64..1e6, r_scale in 1.0f64..1e4,
        ) {
            let p = FitParams::new(a, lambda, gamma, t0, k);
            let info = NormalizationInfo { t_scale, r_scale };
            let raw = denormalize_params(&p, &info).unwrap();
            for i in 0..100 {
                let t = t_scale * i as f64 / 99.0;
                let lhs = eval_model(&raw, t).unwrap();
                let rhs = r_scale * eval_model(&p, t / t_scale).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-9 * r_scale.max(1.0));
            }
        }

        #[test]
        fn aggregate_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut recs: Vec<_> = (0..6)
                .map(|i| rec(1, &format!("s{i}"), rng.random_range(1.0..100.0), rng.random_range(0.1..1.0)))
                .collect();
            let a = aggregate_step(&recs).unwrap();
            recs.shuffle(&mut rng);
            let b = aggregate_step(&recs).unwrap();
            prop_assert!((a.ratio - b.ratio).abs() <= 1e-12 * a.ratio);
        }
    }

    #[test]
    fn synthetic_generation() {
        let p = FitParams::new(300.0, 0.0, 1e-3, 1.0, 5.0);
        let steps = linear_steps(143_000, 37);
        let clean = gen_synthetic("m", 1, &p, &steps, 0.0, 1).unwrap();
        for pt in &clean.points {
            let f = eval_model(&p, pt.step as f64).unwrap().max(1.0);
            assert_eq!(pt.ratio, f);
        }
        let a = gen_synthetic("m", 1, &p, &steps, 5.0, 42).unwrap();
        let b = gen_synthetic("m", 1, &p, &steps, 5.0, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, clean);

        let flat = FitParams::new(0.0, 0.1, 1e-3, 0.5, 12.0);
        let t = gen_synthetic("m", 1, &flat, &steps, 0.0, 0).unwrap();
        assert!(t.points.iter().all(|p| p.ratio == 12.0));

        let bad = FitParams::new(1.0, 0.0, 1.0, -5.0, 2.0);
        assert!(gen_synthetic("m", 1, &bad, &steps, 0.0, 0).is_err());
    }

    #[test]
    fn csv_export() {
        let t = LayerTrajectory::new(
            "m",
            1,
            vec![
                TrajectoryPoint { step: 0, ratio: 1.5, n_inputs: 10 },
                TrajectoryPoint { step: 1000, ratio: 0.1 + 0.2, n_inputs: 10 },
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,ratio,n_inputs\n0,1.5,10\n1000,0.30000000000000004,10\n");
    }
}

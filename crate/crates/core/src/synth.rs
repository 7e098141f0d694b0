//! Synthetic trajectories and stats records with known generating parameters.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::curve::{eval_model, FitParams};
use crate::error::Result;
use crate::stats::{StatsRecord, TopEntry};
use crate::trajectory::{denormalize_params, gen_synthetic, linear_steps, LayerTrajectory, NormalizationInfo};

/// Lowest value of the noiseless normalized curve on `[0, 1]`.
pub const MIN_NORMALIZED_LEVEL: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_points: usize,
    pub last_step: u64,
    /// Scale applied to the normalized curve.
    pub r_scale: f64,
    /// Noise standard deviation as a fraction of the noiseless range.
    pub noise_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_points: 37,
            last_step: 143_000,
            r_scale: 1000.0,
            noise_frac: 0.02,
        }
    }
}

/// Draws normalized parameters with `A' in [0.3, 1]`, `lambda in [0, 2]`,
/// `gamma' in [2, 30]`, `t0 in [0.05, 1]`, `K' in [0.3, 1]`, then lifts `K'`
/// so the curve stays above [`MIN_NORMALIZED_LEVEL`] on `[0, 1]`.
pub fn draw_normalized_params<R: Rng>(rng: &mut R) -> FitParams {
    let mut p = FitParams::new(
        rng.random_range(0.3..=1.0),
        rng.random_range(0.0..=2.0),
        rng.random_range(2.0..=30.0),
        rng.random_range(0.05..=1.0),
        rng.random_range(0.3..=1.0),
    );
    let lowest = (0..=1000)
        .map(|i| eval_model(&p, i as f64 / 1000.0).expect("x > 0 on [0, 1]"))
        .fold(f64::INFINITY, f64::min);
    if lowest < MIN_NORMALIZED_LEVEL {
        p.baseline += MIN_NORMALIZED_LEVEL - lowest;
    }
    p
}

/// A synthetic layer: the raw-scale generating parameters and the noisy trajectory.
pub fn synthetic_layer(
    model_id: &str,
    layer: u32,
    config: &SynthConfig,
    seed: u64,
) -> Result<(FitParams, LayerTrajectory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = draw_normalized_params(&mut rng);
    let info = NormalizationInfo {
        t_scale: config.last_step as f64,
        r_scale: config.r_scale,
    };
    let raw = denormalize_params(&norm, &info)?;
    let steps = linear_steps(config.last_step, config.n_points);
    let clean: Vec<f64> = steps
        .iter()
        .map(|&s| eval_model(&raw, s as f64))
        .collect::<Result<_>>()?;
    let lo = clean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = clean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let noise_sd = config.noise_frac * (hi - lo);
    let traj = gen_synthetic(model_id, layer, &raw, &steps, noise_sd, rng.random())?;
    Ok((raw, traj))
}

/// Stats records whose per-step ratio of means reproduces `traj` exactly:
/// every input has median 1 and the max values average to the ratio.
pub fn stats_records_for(traj: &LayerTrajectory, n_inputs: usize, seed: u64) -> Vec<StatsRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(traj.len() * n_inputs);
    for pt in &traj.points {
        let mut jitter: Vec<f64> = (0..n_inputs).map(|_| rng.random_range(-0.05..0.05)).collect();
        let mean = jitter.iter().sum::<f64>() / n_inputs as f64;
        for j in &mut jitter {
            *j -= mean;
        }
        for (i, j) in jitter.iter().enumerate() {
            let max_abs = pt.ratio * (1.0 + j);
            out.push(StatsRecord {
                model_id: traj.model_id.clone(),
                step: pt.step,
                layer: traj.layer,
                input_id: format!("seq{i}"),
                seq_len: 16,
                hidden_dim: 64,
                median_abs: 1.0,
                max_abs,
                top: vec![TopEntry {
                    value: max_abs,
                    rank: 1,
                    seq_pos: 0,
                    dim: i % 64,
                }],
            });
        }
    }
    out
}

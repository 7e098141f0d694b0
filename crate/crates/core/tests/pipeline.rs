use ma_core::curve::eval_model;
use ma_core::fit::{multistart_fit, multistart_fit_detailed};
use ma_core::peak::compare_modes;
use ma_core::stats::{
    compute_layer_stats, ingest_stats_lines, read_raw_tensor, write_raw_tensor, write_stats_lines, ActivationTensor,
    StatsRecord,
};
use ma_core::synth::{stats_records_for, synthetic_layer, SynthConfig};
use ma_core::trajectory::{build_trajectory, trajectory_keys, LayerTrajectory, TrajectoryPoint};
use ma_core::MaError;

#[test]
fn stats_file_to_fit_and_peaks() {
    let config = SynthConfig::default();
    let mut records = Vec::new();
    let mut truth = Vec::new();
    for layer in 1..=3 {
        let (raw, traj) = synthetic_layer("pythia-test", layer, &config, 40 + layer as u64).unwrap();
        records.extend(stats_records_for(&traj, 10, layer as u64));
        truth.push((raw, traj));
    }
    let mut buf = Vec::new();
    write_stats_lines(&mut buf, &records).unwrap();
    let parsed = ingest_stats_lines(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(parsed, records);

    let keys = trajectory_keys(&parsed);
    assert_eq!(keys.len(), 3);
    for ((model, layer), (_, expected)) in keys.iter().zip(&truth) {
        let traj = build_trajectory(&parsed, model, *layer).unwrap();
        assert_eq!(traj.len(), 37);
        let fit = multistart_fit(&traj).unwrap();
        let r2 = fit.r_squared.unwrap();
        assert!(r2 > 0.95, "layer {layer}: r2 {r2}");
        for (a, b) in traj.points.iter().zip(&expected.points) {
            assert!((a.ratio - b.ratio).abs() <= 1e-9 * b.ratio);
        }
        let cmp = compare_modes(&fit.params, 143_000.0).unwrap();
        assert_eq!(cmp.corrected.exists, cmp.numeric.exists);
    }
}

#[test]
fn fit_is_invariant_to_prescaling() {
    let (_, traj) = synthetic_layer("m", 1, &SynthConfig::default(), 9).unwrap();
    let scaled = LayerTrajectory::new(
        "m",
        1,
        traj.points
            .iter()
            .map(|p| TrajectoryPoint {
                step: p.step * 7,
                ratio: p.ratio * 0.003,
                ..*p
            })
            .collect(),
    )
    .unwrap();
    let a = multistart_fit(&traj).unwrap();
    let b = multistart_fit(&scaled).unwrap();
    for (p, q) in traj.points.iter().zip(&scaled.points) {
        let fa = eval_model(&a.params, p.step as f64).unwrap();
        let fb = eval_model(&b.params, q.step as f64).unwrap() / 0.003;
        assert!((fa - fb).abs() <= 1e-9 * fa.abs().max(1.0), "{fa} vs {fb}");
    }
}

#[test]
fn best_start_is_never_beaten() {
    let (_, traj) = synthetic_layer("m", 2, &SynthConfig::default(), 77).unwrap();
    let (best, starts) = multistart_fit_detailed(&traj).unwrap();
    assert_eq!(best.n_starts_tried, starts.len());
    let best_norm = starts
        .iter()
        .filter_map(|s| s.outcome.as_ref().ok().map(|o| o.1))
        .fold(f64::INFINITY, f64::min);
    assert!(best_norm.is_finite());
    let r_scale = traj.points.iter().map(|p| p.ratio).fold(0.0, f64::max);
    // the reported SSE is the best normalized SSE mapped back to raw ratios
    assert!((best.sse - best_norm * r_scale * r_scale).abs() <= 1e-6 * best.sse.max(1e-12));
}

#[test]
fn raw_tensor_file_to_stats() {
    let values: Vec<f64> = (0..48).map(|i| if i == 29 { -900.0 } else { (i % 5) as f64 * 0.25 }).collect();
    let t = ActivationTensor::new(6, 8, values).unwrap();
    let mut buf = Vec::new();
    write_raw_tensor(&mut buf, &t).unwrap();
    let back = read_raw_tensor(buf.as_slice()).unwrap();
    let rec = StatsRecord::from_stats("m", 512, 4, "seq0", compute_layer_stats(&back, 3).unwrap());
    assert_eq!(rec.max_abs, 900.0);
    assert_eq!((rec.top[0].seq_pos, rec.top[0].dim), (3, 5));
    assert_eq!(rec.median_abs, 0.5);
    assert!(rec.validate().is_ok());

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_raw_tensor(bad.as_slice()), Err(MaError::Format(_))));
    assert!(matches!(read_raw_tensor(&buf[..buf.len() - 2]), Err(MaError::Format(_))));
    assert!(matches!(read_raw_tensor(&buf[..7]), Err(MaError::Format(_))));
    let mut huge = buf[..12].to_vec();
    huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
    huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(read_raw_tensor(huge.as_slice()), Err(MaError::Format(_))));
}

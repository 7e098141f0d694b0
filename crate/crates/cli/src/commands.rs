//! The subcommands. Each returns `Ok(Status)` once its outputs are written;
//! `Err` means nothing useful could be produced.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use log::info;
use rayon::prelude::*;
use serde::Serialize;

use ma_core::curve::eval_model;
use ma_core::explain::{
    explain_pipeline, impurity_importance, pdp, permutation_importance, waterfall_order, write_pdp,
    write_shap_summary, write_shap_waterfall, ExplainedRow, ShapExplanation,
};
use ma_core::features::{build_features, parse_registry, ModelArch, TargetTransform, FEATURE_NAMES};
use ma_core::fit::{compare_aic, fit_rival, multistart_fit, RivalKind, ScoredModel};
use ma_core::ml::{
    evaluate_and_select, select::write_metric_details, select::write_metric_table, EvalConfig, Evaluation,
    LayerParams, ParamDataset, Pipeline, RegressorKind, TargetName, MODEL_FORMAT_VERSION,
};
use ma_core::peak::{compare_modes, peak_surface, PeakMode};
use ma_core::stats::{
    compute_layer_stats, detect_massive, ingest_stats_lines, read_raw_tensor, write_stats_lines, StatsRecord,
};
use ma_core::trajectory::{build_trajectory, trajectory_keys, LayerTrajectory};

use crate::output::{read_input, slug, CliError, CliResult, FitRecord, Grid, OutDir, PeakRecord};
use crate::svg::{bar_chart, dot_rows, heatmap, line_chart, Mark, Series};
use crate::{CommonArgs, ModeArg, StatsArgs};

/// Fewer rows than this cannot support a split plus five folds.
pub const MIN_PREDICT_ROWS: usize = 10;

const PDP_PAIRS: [(&str, &str); 2] = [("attn_density", "layer_pos"), ("heads_per_layer", "log_hidden")];
const PDP_GRID: usize = 20;
const SURFACE_GRID: usize = 40;

pub enum Status {
    Complete,
    /// Outputs were written but these items failed.
    Partial(Vec<String>),
}

impl Status {
    fn from_failures(failures: Vec<String>) -> Self {
        if failures.is_empty() {
            Status::Complete
        } else {
            Status::Partial(failures)
        }
    }
}

fn peak_mode(m: ModeArg) -> PeakMode {
    match m {
        ModeArg::Paper => PeakMode::PaperW0,
        ModeArg::Corrected => PeakMode::Corrected,
        ModeArg::Numeric => PeakMode::Numeric,
    }
}

pub fn stats(a: &StatsArgs) -> CliResult<Status> {
    let c = &a.common;
    let path = c.input.clone().ok_or_else(|| CliError("--input is required (stats JSONL or MAT1 tensor)".into()))?;
    let bytes = fs::read(&path).map_err(|e| CliError(format!("cannot read {}: {e}", path.display())))?;
    let out = OutDir::create(&c.out, !c.no_plots)?;

    let records = if bytes.starts_with(b"MAT1") {
        let tensor = read_raw_tensor(bytes.as_slice())?;
        let st = compute_layer_stats(&tensor, c.top_k)?;
        let rec = StatsRecord::from_stats(a.model_id.clone(), a.step, a.layer, a.input_id.clone(), st);
        let mut buf = Vec::new();
        write_stats_lines(&mut buf, std::slice::from_ref(&rec))?;
        out.write("stats.jsonl", buf)?;
        vec![rec]
    } else {
        let text = String::from_utf8(bytes).map_err(|_| CliError(format!("{} is not UTF-8", path.display())))?;
        ingest_stats_lines(&text)?
    };
    if records.is_empty() {
        return Err(CliError(format!("{} holds no stats records", path.display())));
    }

    let mut csv = String::from("model_id,step,layer,input_id,median_abs,max_abs,ratio,is_candidate,is_strict_massive\n");
    let mut per_layer: BTreeMap<(String, u64, u32), (usize, usize, usize)> = BTreeMap::new();
    for r in &records {
        let v = detect_massive(r, c.threshold)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.model_id, r.step, r.layer, r.input_id, r.median_abs, r.max_abs, v.ratio, v.is_candidate, v.is_strict_massive
        );
        let e = per_layer.entry((r.model_id.clone(), r.step, r.layer)).or_default();
        e.0 += 1;
        e.1 += v.is_candidate as usize;
        e.2 += v.is_strict_massive as usize;
    }
    out.write("verdicts.csv", csv)?;
    let mut summary = String::from("model_id,step,layer,n_inputs,n_candidate,n_strict\n");
    for ((m, s, l), (n, cand, strict)) in &per_layer {
        let _ = writeln!(summary, "{m},{s},{l},{n},{cand},{strict}");
    }
    out.write("verdict_summary.csv", summary)?;
    info!("{} records, {} (model, step, layer) groups", records.len(), per_layer.len());
    Ok(Status::Complete)
}

/// Trajectories from a stats JSONL file or from a `trajectories.json` array.
fn load_trajectories(c: &CommonArgs) -> CliResult<(Vec<LayerTrajectory>, Vec<String>)> {
    let (path, text) = read_input(&c.input, "stats JSONL or trajectories JSON")?;
    let mut failures = Vec::new();
    let trajs: Vec<LayerTrajectory> = if text.trim_start().starts_with('[') {
        let raw: Vec<LayerTrajectory> = serde_json::from_str(&text)?;
        raw.into_iter()
            .map(|t| LayerTrajectory::new(t.model_id, t.layer, t.points))
            .collect::<Result<_, _>>()?
    } else {
        let records = ingest_stats_lines(&text)?;
        let mut trajs = Vec::new();
        for (m, l) in trajectory_keys(&records) {
            match build_trajectory(&records, &m, l) {
                Ok(t) => trajs.push(t),
                Err(e) => failures.push(format!("{m} layer {l}: {e}")),
            }
        }
        trajs
    };
    if trajs.is_empty() && failures.is_empty() {
        return Err(CliError(format!("{} holds no layer trajectories", path.display())));
    }
    Ok((trajs, failures))
}

fn write_trajectories(out: &OutDir, trajs: &[LayerTrajectory]) -> CliResult<()> {
    out.write_json("trajectories.json", trajs)?;
    let dir = out.sub("trajectories")?;
    for t in trajs {
        let mut buf = Vec::new();
        t.write_csv(&mut buf)?;
        dir.write(&format!("{}_L{}.csv", slug(&t.model_id), t.layer), buf)?;
    }
    Ok(())
}

pub fn trajectory(c: &CommonArgs) -> CliResult<Status> {
    let (trajs, failures) = load_trajectories(c)?;
    let out = OutDir::create(&c.out, !c.no_plots)?;
    write_trajectories(&out, &trajs)?;
    Ok(Status::from_failures(failures))
}

struct LayerFit {
    record: FitRecord,
    rivals: [Option<f64>; 2],
    preferred: String,
}

fn fit_layer(t: &LayerTrajectory) -> Result<LayerFit, String> {
    let r = multistart_fit(t).map_err(|e| e.to_string())?;
    let mut scored = vec![ScoredModel::from(&r)];
    let mut rivals = [None, None];
    for (slot, kind) in [RivalKind::StepLinear, RivalKind::StepQuadratic].into_iter().enumerate() {
        match fit_rival(t, kind) {
            Ok(rf) => {
                rivals[slot] = Some(rf.aic);
                scored.push(ScoredModel::from(&rf));
            }
            Err(e) => log::warn!("{} layer {}: {} rival failed: {e}", t.model_id, t.layer, kind.name()),
        }
    }
    let preferred = if scored.len() > 1 {
        let order = compare_aic(&scored).map_err(|e| e.to_string())?;
        scored[order[0]].label.clone()
    } else {
        scored[0].label.clone()
    };
    Ok(LayerFit {
        record: FitRecord::new(&t.model_id, t.layer, &r),
        rivals,
        preferred,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn run_fit(out: &OutDir, trajs: &[LayerTrajectory]) -> CliResult<(Vec<FitRecord>, Vec<String>)> {
    let results: Vec<Result<LayerFit, String>> = trajs.par_iter().map(fit_layer).collect();
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    let mut aic = String::from("model_id,layer,log_modulated,step_linear,step_quadratic,preferred\n");
    let overlays = out.sub("overlays")?;
    for (t, r) in trajs.iter().zip(results) {
        let lf = match r {
            Ok(lf) => lf,
            Err(e) => {
                failures.push(format!("{} layer {}: {e}", t.model_id, t.layer));
                continue;
            }
        };
        let rec = &lf.record;
        let _ = writeln!(
            aic,
            "{},{},{},{},{},{}",
            rec.model_id,
            rec.layer,
            rec.aic,
            opt(lf.rivals[0]),
            opt(lf.rivals[1]),
            lf.preferred
        );
        let mut csv = String::from("step,observed,fitted\n");
        let mut observed = Vec::new();
        let mut fitted = Vec::new();
        for p in &t.points {
            let f = eval_model(&rec.params, p.step as f64)?;
            let _ = writeln!(csv, "{},{},{}", p.step, p.ratio, f);
            observed.push((p.step as f64, p.ratio));
            fitted.push((p.step as f64, f));
        }
        let stem = format!("{}_L{}", slug(&rec.model_id), rec.layer);
        overlays.write(&format!("{stem}.csv"), csv)?;
        overlays.write_svg(&format!("{stem}.svg"), || {
            line_chart(
                &format!("{} layer {} (R2 {})", rec.model_id, rec.layer, opt(rec.r_squared.map(|r| (r * 1e4).round() / 1e4))),
                "training step",
                "max / median",
                &[
                    Series { name: "observed", points: observed, mark: Mark::Dots },
                    Series { name: "fitted", points: fitted, mark: Mark::Line },
                ],
            )
        })?;
        fits.push(lf.record);
    }
    out.write_json("fits.json", &fits)?;
    out.write("aic.csv", aic)?;

    let grid = Grid::of(fits.iter().map(|f| (f.model_id.as_str(), f.layer)));
    let cells = grid.fill(fits.iter().map(|f| (f.model_id.as_str(), f.layer, f.r_squared)));
    out.write("r2_heatmap.csv", grid.to_csv(&cells))?;
    out.write_svg("r2_heatmap.svg", || heatmap("R2 by layer and model", &grid.row_labels(), &grid.models, &cells))?;
    if !failures.is_empty() {
        out.write("fit_failures.txt", failures.join("\n") + "\n")?;
    }
    Ok((fits, failures))
}

pub fn fit(c: &CommonArgs) -> CliResult<Status> {
    let (trajs, mut failures) = load_trajectories(c)?;
    let out = OutDir::create(&c.out, !c.no_plots)?;
    let (_, fit_failures) = run_fit(&out, &trajs)?;
    failures.extend(fit_failures);
    Ok(Status::from_failures(failures))
}

fn load_fits(c: &CommonArgs) -> CliResult<Vec<FitRecord>> {
    let (path, text) = read_input(&c.input, "fits JSON")?;
    let fits: Vec<FitRecord> = serde_json::from_str(&text)
        .map_err(|e| CliError(format!("{} is not a fits file: {e}", path.display())))?;
    if fits.is_empty() {
        return Err(CliError(format!("{} holds no fits", path.display())));
    }
    Ok(fits)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_peaks(out: &OutDir, fits: &[FitRecord], c: &CommonArgs) -> CliResult<Vec<String>> {
    let mode = peak_mode(c.mode);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut comparison = String::from("model_id,layer,regime,paper_w0,paper_wm1,corrected,numeric,matching_modes,modes_disagree\n");
    for f in fits {
        let cmp = match compare_modes(&f.params, c.horizon) {
            Ok(cmp) => cmp,
            Err(e) => {
                failures.push(format!("{} layer {}: {e}", f.model_id, f.layer));
                continue;
            }
        };
        for r in cmp.reports() {
            let agrees = r.mode == PeakMode::Numeric || cmp.matching_modes.contains(&r.mode);
            records.push(PeakRecord::new(f, r, cmp.regime, agrees));
        }
        let t = |r: &ma_core::peak::PeakReport| opt(r.t_peak);
        let matching: Vec<&str> = cmp.matching_modes.iter().map(|m| m.name()).collect();
        let _ = writeln!(
            comparison,
            "{},{},{},{},{},{},{},{},{}",
            f.model_id,
            f.layer,
            serde_json::to_value(cmp.regime)?.as_str().unwrap_or_default(),
            t(&cmp.paper_w0),
            t(&cmp.paper_wm1),
            t(&cmp.corrected),
            t(&cmp.numeric),
            matching.join(";"),
            cmp.modes_disagree()
        );
    }
    out.write_json("peaks.json", &records)?;
    out.write("mode_comparison.csv", comparison)?;

    let chosen: Vec<&PeakRecord> = records.iter().filter(|r| r.mode == mode).collect();
    let grid = Grid::of(chosen.iter().map(|r| (r.model_id.as_str(), r.layer)));
    for (name, title, pick) in [
        ("peak_step", "peak step", Box::new(|r: &PeakRecord| r.t_peak) as Box<dyn Fn(&PeakRecord) -> Option<f64>>),
        ("peak_value", "peak ratio", Box::new(|r: &PeakRecord| r.peak_value)),
    ] {
        let cells = grid.fill(chosen.iter().map(|r| (r.model_id.as_str(), r.layer, pick(r))));
        out.write(&format!("{name}_heatmap.csv"), grid.to_csv(&cells))?;
        out.write_svg(&format!("{name}_heatmap.svg"), || {
            heatmap(&format!("{title} ({} mode)", mode.name()), &grid.row_labels(), &grid.models, &cells)
        })?;
    }

    let gammas: Vec<f64> = fits.iter().map(|f| f.params.gamma).filter(|g| *g > 0.0).collect();
    if !gammas.is_empty() {
        let lo = gammas.iter().copied().fold(f64::INFINITY, f64::min) * 0.5;
        let hi = gammas.iter().copied().fold(f64::NEG_INFINITY, f64::max) * 2.0;
        let gamma_grid: Vec<f64> = (0..SURFACE_GRID)
            .map(|i| lo * (hi / lo).powf(i as f64 / (SURFACE_GRID - 1) as f64))
            .collect();
        let lambda_grid: Vec<f64> = (0..SURFACE_GRID)
            .map(|i| 0.01 + (2.0 - 0.01) * i as f64 / (SURFACE_GRID - 1) as f64)
            .collect();
        let t0 = median(fits.iter().map(|f| f.params.t0).collect());
        let surface = peak_surface(mode, &gamma_grid, &lambda_grid, t0, c.horizon)?;
        let mut csv = String::from("gamma,lambda,t_peak\n");
        for (g, row) in gamma_grid.iter().zip(&surface) {
            for (l, v) in lambda_grid.iter().zip(row) {
                let _ = writeln!(csv, "{g},{l},{}", opt(*v));
            }
        }
        out.write("lambert_surface.csv", csv)?;
        out.write_svg("lambert_surface.svg", || {
            let log_cells: Vec<Vec<Option<f64>>> = surface
                .iter()
                .map(|row| row.iter().map(|v| v.filter(|t| *t > 0.0).map(f64::log10)).collect())
                .collect();
            heatmap(
                &format!("log10 peak step over gamma x lambda, t0 = {t0:.3} ({} mode)", mode.name()),
                &gamma_grid.iter().map(|g| format!("{g:.2e}")).collect::<Vec<_>>(),
                &lambda_grid.iter().map(|l| format!("{l:.2}")).collect::<Vec<_>>(),
                &log_cells,
            )
        })?;
    }
    Ok(failures)
}

pub fn peaks(c: &CommonArgs) -> CliResult<Status> {
    let fits = load_fits(c)?;
    let out = OutDir::create(&c.out, !c.no_plots)?;
    Ok(Status::from_failures(run_peaks(&out, &fits, c)?))
}

fn load_registry(c: &CommonArgs) -> CliResult<Vec<ModelArch>> {
    let path = c
        .arch_registry
        .clone()
        .ok_or_else(|| CliError("--arch-registry is required".into()))?;
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError(format!("cannot read registry {}: {e}", path.display())))?;
    let reg = parse_registry(&text)?;
    if reg.is_empty() {
        return Err(CliError(format!("registry {} is empty", path.display())));
    }
    Ok(reg)
}

pub fn features(c: &CommonArgs) -> CliResult<Status> {
    let registry = load_registry(c)?;
    let out = OutDir::create(&c.out, !c.no_plots)?;
    let mut csv = format!("model_id,layer,{}\n", FEATURE_NAMES.join(","));
    for arch in &registry {
        for l in 1..=arch.n_layers {
            let f = build_features(&arch.at_layer(l))?;
            let vals: Vec<String> = f.as_slice().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(csv, "{},{l},{}", arch.model_id, vals.join(","));
        }
    }
    out.write("features.csv", csv)?;
    Ok(Status::Complete)
}

#[derive(Serialize)]
struct SavedPipeline<'a> {
    format_version: u32,
    target: TargetName,
    transform: &'a TargetTransform,
    kind: RegressorKind,
    pipeline: &'a Pipeline,
}

fn feature_index(name: &str) -> usize {
    FEATURE_NAMES.iter().position(|n| *n == name).expect("known feature name")
}

fn explain_target(out: &OutDir, data: &ParamDataset, ev: &Evaluation, seed: u64) -> CliResult<()> {
    let target = data.target.name();
    let best = ev
        .table
        .best()
        .ok_or_else(|| CliError(format!("no model selected for {target}")))?;
    let model = ev.best_model().expect("best result has a model");
    out.write_json(
        &format!("model_{target}.json"),
        &SavedPipeline {
            format_version: MODEL_FORMAT_VERSION,
            target: data.target,
            transform: &ev.table.transform,
            kind: best.kind,
            pipeline: model,
        },
    )?;

    let rows = data.feature_matrix();
    let ids: Vec<String> = data.rows.iter().map(|r| format!("{}/{}", r.model_id, r.layer)).collect();
    let explanations: Vec<ShapExplanation> = rows
        .iter()
        .map(|r| explain_pipeline(model, r))
        .collect::<Result<_, _>>()?;
    let names: Vec<&str> = FEATURE_NAMES.to_vec();
    let explained: Vec<ExplainedRow<'_>> = ids
        .iter()
        .zip(&rows)
        .zip(&explanations)
        .map(|((id, values), e)| ExplainedRow { row_id: id, values, explanation: e })
        .collect();
    let mut buf = Vec::new();
    write_shap_summary(&mut buf, &explained, &names)?;
    out.write(&format!("shap_summary_{target}.csv"), buf)?;
    out.write_svg(&format!("shap_summary_{target}.svg"), || {
        let labels: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let dots: Vec<Vec<(f64, f64)>> = (0..names.len())
            .map(|j| explanations.iter().zip(&rows).map(|(e, r)| (e.phi[j], r[j])).collect())
            .collect();
        dot_rows(&format!("{target}: attributions ({})", best.kind.name()), &labels, &dots)
    })?;

    // the row with the highest prediction, ties to the first
    let top = explanations
        .iter()
        .enumerate()
        .fold(0, |b, (i, e)| if e.prediction > explanations[b].prediction { i } else { b });
    let e = &explanations[top];
    let mut buf = Vec::new();
    write_shap_waterfall(&mut buf, e, &names)?;
    out.write(&format!("shap_waterfall_{target}.csv"), buf)?;
    out.write_svg(&format!("shap_waterfall_{target}.svg"), || {
        let order = waterfall_order(e);
        bar_chart(
            &format!("{target}: {} (base {:.3}, prediction {:.3})", ids[top], e.base_value, e.prediction),
            &order.iter().map(|&j| names[j].to_string()).collect::<Vec<_>>(),
            &order.iter().map(|&j| e.phi[j]).collect::<Vec<_>>(),
        )
    })?;

    for (a, b) in PDP_PAIRS {
        let g = pdp(model, &rows, &[feature_index(a), feature_index(b)], &[PDP_GRID, PDP_GRID])?;
        let stem = format!("pdp_{target}_{a}_{b}");
        let mut buf = Vec::new();
        write_pdp(&mut buf, &g, &names)?;
        out.write(&format!("{stem}.csv"), buf)?;
        out.write_svg(&format!("{stem}.svg"), || {
            let n1 = g.grids[1].len();
            let cells: Vec<Vec<Option<f64>>> = g.values.chunks(n1).map(|r| r.iter().map(|v| Some(*v)).collect()).collect();
            heatmap(
                &format!("{target}: partial dependence, rows {a}, columns {b}"),
                &g.grids[0].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
                &g.grids[1].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
                &cells,
            )
        })?;
    }

    let impurity = if best.kind.is_tree() { Some(impurity_importance(&model.model)?) } else { None };
    let permutation = permutation_importance(model, &rows, &ev.y, seed)?;
    let mut csv = String::from("feature,impurity,permutation\n");
    for (j, name) in names.iter().enumerate() {
        let _ = writeln!(csv, "{name},{},{}", opt(impurity.as_ref().map(|v| v[j])), permutation[j]);
    }
    out.write(&format!("importance_{target}.csv"), csv)?;
    out.write_svg(&format!("importance_{target}.svg"), || {
        bar_chart(
            &format!("{target}: permutation importance (R2 drop)"),
            &names.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            &permutation,
        )
    })?;
    Ok(())
}

fn run_predict(out: &OutDir, fits: &[FitRecord], registry: &[ModelArch], seed: u64) -> CliResult<()> {
    let layer_params: Vec<LayerParams> = fits
        .iter()
        .map(|f| LayerParams { model_id: f.model_id.clone(), layer: f.layer, params: f.params })
        .collect();
    let datasets: Vec<ParamDataset> = TargetName::ALL
        .iter()
        .map(|&t| ParamDataset::assemble(&layer_params, registry, t))
        .collect::<Result<_, _>>()?;
    let n = datasets[0].len();
    if n < MIN_PREDICT_ROWS {
        return Err(CliError(format!(
            "{n} fitted layers with known architecture; prediction needs at least {MIN_PREDICT_ROWS}"
        )));
    }
    let config = EvalConfig { seed, ..EvalConfig::default() };
    let evaluations: Vec<Evaluation> = datasets
        .par_iter()
        .map(|d| evaluate_and_select(d, &config))
        .collect::<Result<_, _>>()?;

    let tables: Vec<_> = evaluations.iter().map(|e| e.table.clone()).collect();
    let mut buf = Vec::new();
    write_metric_table(&mut buf, &tables, &config.kinds)?;
    out.write("metric_table.csv", buf)?;
    let mut buf = Vec::new();
    write_metric_details(&mut buf, &tables)?;
    out.write("metric_details.csv", buf)?;
    out.write_json("metric_tables.json", &tables)?;
    for (d, ev) in datasets.iter().zip(&evaluations) {
        explain_target(out, d, ev, seed)?;
    }
    Ok(())
}

pub fn predict(c: &CommonArgs) -> CliResult<Status> {
    let registry = load_registry(c)?;
    let fits = load_fits(c)?;
    let out = OutDir::create(&c.out, !c.no_plots)?;
    run_predict(&out, &fits, &registry, c.seed)?;
    Ok(Status::Complete)
}

pub fn report(c: &CommonArgs) -> CliResult<Status> {
    let registry = c.arch_registry.as_ref().map(|_| load_registry(c)).transpose()?;
    let (trajs, mut failures) = load_trajectories(c)?;
    let out = OutDir::create(&c.out, !c.no_plots)?;
    write_trajectories(&out, &trajs)?;
    let (fits, fit_failures) = run_fit(&out.sub("fit")?, &trajs)?;
    failures.extend(fit_failures);
    if fits.is_empty() {
        return Err(CliError("no layer could be fitted".into()));
    }
    failures.extend(run_peaks(&out.sub("peaks")?, &fits, c)?);
    match registry {
        Some(reg) => run_predict(&out.sub("predict")?, &fits, &reg, c.seed)?,
        None => info!("no architecture registry given; skipping prediction"),
    }
    Ok(Status::from_failures(failures))
}

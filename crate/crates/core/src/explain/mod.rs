//! Attributions, partial dependence and feature importance for trained regressors.

pub mod importance;
pub mod pdp;
pub mod shap;

use std::io::Write;

use crate::error::{MaError, Result};

pub use importance::{feature_importance, impurity_importance, permutation_importance, ImportanceKind};
pub use pdp::{pdp, PdpGrid};
pub use shap::{
    brute_force_interventional, brute_force_shapley, explain, explain_pipeline, linear_shap, tree_shap,
    ShapExplanation, ValueFunction,
};

/// One explained row: its id, its feature values and the attributions.
pub struct ExplainedRow<'a> {
    pub row_id: &'a str,
    pub values: &'a [f64],
    pub explanation: &'a ShapExplanation,
}

/// Long-form table with one line per (row, feature).
pub fn write_shap_summary<W: Write>(mut out: W, rows: &[ExplainedRow<'_>], names: &[&str]) -> Result<()> {
    writeln!(out, "row_id,feature,value,phi")?;
    for r in rows {
        if r.values.len() != names.len() || r.explanation.phi.len() != names.len() {
            return Err(MaError::InvalidInput(format!("row {} has the wrong width", r.row_id)));
        }
        for (j, name) in names.iter().enumerate() {
            writeln!(out, "{},{},{},{}", r.row_id, name, r.values[j], r.explanation.phi[j])?;
        }
    }
    Ok(())
}

/// Attributions of one row ordered by magnitude, with the running total
/// starting from the base value.
pub fn write_shap_waterfall<W: Write>(mut out: W, e: &ShapExplanation, names: &[&str]) -> Result<()> {
    if e.phi.len() != names.len() {
        return Err(MaError::InvalidInput("attribution and name counts differ".into()));
    }
    writeln!(out, "feature,phi,cumulative")?;
    let mut cumulative = e.base_value;
    for j in waterfall_order(e) {
        cumulative += e.phi[j];
        writeln!(out, "{},{},{}", names[j], e.phi[j], cumulative)?;
    }
    Ok(())
}

/// Feature indices by decreasing `|phi|`, ties by index.
pub fn waterfall_order(e: &ShapExplanation) -> Vec<usize> {
    let mut order: Vec<usize> = (0..e.phi.len()).collect();
    order.sort_by(|&a, &b| e.phi[b].abs().total_cmp(&e.phi[a].abs()).then(a.cmp(&b)));
    order
}

pub fn write_pdp<W: Write>(mut out: W, g: &PdpGrid, names: &[&str]) -> Result<()> {
    for &j in &g.features {
        let name = names
            .get(j)
            .ok_or_else(|| MaError::InvalidInput(format!("no name for feature {j}")))?;
        write!(out, "{name},")?;
    }
    writeln!(out, "value")?;
    match g.grids.as_slice() {
        [a] => {
            for (u, v) in a.iter().zip(&g.values) {
                writeln!(out, "{u},{v}")?;
            }
        }
        [a, b] => {
            for (i, u) in a.iter().enumerate() {
                for (k, w) in b.iter().enumerate() {
                    writeln!(out, "{u},{w},{}", g.values[i * b.len() + k])?;
                }
            }
        }
        _ => return Err(MaError::InvalidInput("grid must have one or two features".into())),
    }
    Ok(())
}

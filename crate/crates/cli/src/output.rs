//! Output files and the records the commands exchange on disk.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ma_core::curve::FitParams;
use ma_core::fit::FitResult;
use ma_core::peak::{PeakMode, PeakReport, RegimeLabel};
use ma_core::MaError;

/// An input or environment problem; maps to exit code 1.
#[derive(Debug)]
pub struct CliError(pub String);

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<MaError> for CliError {
    fn from(e: MaError) -> Self {
        Self(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Output directory that every command writes through.
pub struct OutDir {
    root: PathBuf,
    pub plots: bool,
}

impl OutDir {
    pub fn create(root: &Path, plots: bool) -> CliResult<Self> {
        if root.is_file() {
            return Err(CliError(format!("output path {} is a file", root.display())));
        }
        fs::create_dir_all(root)
            .map_err(|e| CliError(format!("cannot create output directory {}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            plots,
        })
    }

    pub fn sub(&self, name: &str) -> CliResult<Self> {
        Self::create(&self.root.join(name), self.plots)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| CliError(format!("cannot write {}: {e}", p.display())))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Writes the SVG unless plots are off; the matching CSV is written by the caller.
    pub fn write_svg(&self, name: &str, render: impl FnOnce() -> String) -> CliResult<()> {
        if self.plots {
            self.write(name, render())?;
        }
        Ok(())
    }
}

pub fn read_input(path: &Option<PathBuf>, what: &str) -> CliResult<(PathBuf, String)> {
    let path = path
        .clone()
        .ok_or_else(|| CliError(format!("--input is required ({what})")))?;
    let text = fs::read_to_string(&path).map_err(|e| CliError(format!("cannot read {}: {e}", path.display())))?;
    Ok((path, text))
}

/// File-name-safe form of a model id.
pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

/// One fitted layer, as stored in `fits.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub model_id: String,
    pub layer: u32,
    pub params: FitParams,
    pub r_squared: Option<f64>,
    pub aic: f64,
    pub sse: f64,
    pub n_points: usize,
    pub converged: bool,
}

impl FitRecord {
    pub fn new(model_id: &str, layer: u32, r: &FitResult) -> Self {
        Self {
            model_id: model_id.to_string(),
            layer,
            params: r.params,
            r_squared: r.r_squared,
            aic: r.aic,
            sse: r.sse,
            n_points: r.n_points,
            converged: r.converged,
        }
    }
}

/// One peak report line of `peaks.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakRecord {
    pub model_id: String,
    pub layer: u32,
    pub mode: PeakMode,
    pub exists: bool,
    pub t_peak: Option<f64>,
    pub peak_value: Option<f64>,
    pub within_training: bool,
    pub regime: RegimeLabel,
    /// Whether this mode agrees with the numerical argmax (always true for it).
    pub agrees_with_numeric: bool,
}

impl PeakRecord {
    pub fn new(fit: &FitRecord, r: &PeakReport, regime: RegimeLabel, agrees: bool) -> Self {
        Self {
            model_id: fit.model_id.clone(),
            layer: fit.layer,
            mode: r.mode,
            exists: r.exists,
            t_peak: r.t_peak,
            peak_value: r.peak_value,
            within_training: r.within_training,
            regime,
            agrees_with_numeric: agrees,
        }
    }
}

/// Models in first-seen order and the layer range, for (layer x model) tables.
pub struct Grid {
    pub models: Vec<String>,
    pub max_layer: u32,
}

impl Grid {
    pub fn of<'a>(keys: impl Iterator<Item = (&'a str, u32)>) -> Self {
        let mut models: Vec<String> = Vec::new();
        let mut max_layer = 0;
        for (m, l) in keys {
            if !models.iter().any(|x| x == m) {
                models.push(m.to_string());
            }
            max_layer = max_layer.max(l);
        }
        Self { models, max_layer }
    }

    /// Cells indexed `[layer - 1][model]`.
    pub fn fill<'a>(&self, cells: impl Iterator<Item = (&'a str, u32, Option<f64>)>) -> Vec<Vec<Option<f64>>> {
        let mut grid = vec![vec![None; self.models.len()]; self.max_layer as usize];
        for (m, l, v) in cells {
            if let Some(j) = self.models.iter().position(|x| x == m) {
                if l >= 1 {
                    grid[l as usize - 1][j] = v;
                }
            }
        }
        grid
    }

    pub fn row_labels(&self) -> Vec<String> {
        (1..=self.max_layer).map(|l| l.to_string()).collect()
    }

    pub fn to_csv(&self, cells: &[Vec<Option<f64>>]) -> String {
        let mut s = String::from("layer");
        for m in &self.models {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for (i, row) in cells.iter().enumerate() {
            s.push_str(&(i + 1).to_string());
            for v in row {
                s.push(',');
                if let Some(v) = v {
                    s.push_str(&v.to_string());
                }
            }
            s.push('\n');
        }
        s
    }
}

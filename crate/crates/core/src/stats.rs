//! Per-layer activation statistics and massive-activation detection.
//!
//! Statistics are taken over every scalar of a layer's post-residual hidden
//! state (all `seq_len * hidden_dim` entries), not per token.

use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{MaError, Result};

/// Absolute magnitude above which an activation can be strictly massive.
pub const STRICT_MIN_MAGNITUDE: f64 = 100.0;
/// Ratio to the layer median required for a strictly massive activation.
pub const STRICT_MIN_RATIO: f64 = 1000.0;
pub const DEFAULT_THRESHOLD: f64 = 50.0;
pub const DEFAULT_TOP_K: usize = 3;

const MAT1_MAGIC: &[u8; 4] = b"MAT1";

/// A layer output `h` of shape `seq_len x hidden_dim`, row-major by token.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    seq_len: usize,
    hidden_dim: usize,
    values: Vec<f64>,
}

impl ActivationTensor {
    pub fn new(seq_len: usize, hidden_dim: usize, values: Vec<f64>) -> Result<Self> {
        if seq_len == 0 || hidden_dim == 0 {
            return Err(MaError::InvalidInput(format!(
                "empty tensor ({seq_len}x{hidden_dim})"
            )));
        }
        let expected = seq_len
            .checked_mul(hidden_dim)
            .ok_or_else(|| MaError::InvalidInput("tensor size overflows".into()))?;
        if values.len() != expected {
            return Err(MaError::InvalidInput(format!(
                "expected {expected} values for {seq_len}x{hidden_dim}, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MaError::InvalidInput(format!(
                "non-finite activation at flat index {i}"
            )));
        }
        Ok(Self {
            seq_len,
            hidden_dim,
            values,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, seq_pos: usize, dim: usize) -> f64 {
        self.values[seq_pos * self.hidden_dim + dim]
    }

    /// Returns a copy with every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.seq_len,
            self.hidden_dim,
            self.values.iter().map(|v| v * c).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub value: f64,
    pub rank: usize,
    pub seq_pos: usize,
    pub dim: usize,
}

/// The statistics part of a [`StatsRecord`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub median_abs: f64,
    pub max_abs: f64,
    pub top: Vec<TopEntry>,
    pub seq_len: usize,
    pub hidden_dim: usize,
}

/// One line of the stats file: statistics of one layer for one input at one
/// checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub model_id: String,
    pub step: u64,
    pub layer: u32,
    pub input_id: String,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub median_abs: f64,
    pub max_abs: f64,
    pub top: Vec<TopEntry>,
}

impl StatsRecord {
    pub fn from_stats(
        model_id: impl Into<String>,
        step: u64,
        layer: u32,
        input_id: impl Into<String>,
        stats: LayerStats,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            step,
            layer,
            input_id: input_id.into(),
            seq_len: stats.seq_len,
            hidden_dim: stats.hidden_dim,
            median_abs: stats.median_abs,
            max_abs: stats.max_abs,
            top: stats.top,
        }
    }

    /// Checks the record invariants, naming the first offending field.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.layer == 0 {
            return Err(("layer", "layers are 1-based".into()));
        }
        if self.seq_len == 0 {
            return Err(("seq_len", "must be positive".into()));
        }
        if self.hidden_dim == 0 {
            return Err(("hidden_dim", "must be positive".into()));
        }
        if !(self.median_abs.is_finite() && self.median_abs >= 0.0) {
            return Err(("median_abs", format!("{} is not finite and >= 0", self.median_abs)));
        }
        if !(self.max_abs.is_finite() && self.max_abs >= 0.0) {
            return Err(("max_abs", format!("{} is not finite and >= 0", self.max_abs)));
        }
        if self.max_abs < self.median_abs {
            return Err((
                "max_abs",
                format!("{} is below median_abs {}", self.max_abs, self.median_abs),
            ));
        }
        for (i, e) in self.top.iter().enumerate() {
            if !(e.value.is_finite() && e.value >= 0.0) {
                return Err(("top", format!("entry {i} has invalid value {}", e.value)));
            }
            if e.rank != i + 1 {
                return Err(("top", format!("entry {i} has rank {}, expected {}", e.rank, i + 1)));
            }
            if e.seq_pos >= self.seq_len || e.dim >= self.hidden_dim {
                return Err((
                    "top",
                    format!("entry {i} position ({}, {}) out of bounds", e.seq_pos, e.dim),
                ));
            }
            if i > 0 && e.value > self.top[i - 1].value {
                return Err(("top", format!("entry {i} breaks nonincreasing order")));
            }
        }
        if let Some(first) = self.top.first() {
            if first.value != self.max_abs {
                return Err((
                    "top",
                    format!("top[0].value {} differs from max_abs {}", first.value, self.max_abs),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaVerdict {
    pub is_strict_massive: bool,
    pub is_candidate: bool,
    /// `max_abs / median_abs`; `+inf` when the median is zero but the max is not.
    pub ratio: f64,
    pub threshold_used: f64,
}

/// Median of `values` (mean of the two central order statistics for even
/// counts). `values` is reordered.
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    debug_assert!(n > 0);
    let mid = n / 2;
    let (lower, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_max + upper)
    }
}

fn by_magnitude_desc(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Median and top-k of `|h|` over all entries of `tensor`.
///
/// Ties in the top list are broken by flat (row-major) index.
pub fn compute_layer_stats(tensor: &ActivationTensor, k: usize) -> Result<LayerStats> {
    let n = tensor.values.len();
    if k == 0 || k > n {
        return Err(MaError::InvalidInput(format!(
            "top-k must be in 1..={n}, got {k}"
        )));
    }
    let mut abs: Vec<f64> = tensor.values.iter().map(|v| v.abs()).collect();
    let mut indexed: Vec<(f64, usize)> = abs.iter().copied().zip(0..).collect();
    let median_abs = median_in_place(&mut abs);

    if k < n {
        indexed.select_nth_unstable_by(k - 1, by_magnitude_desc);
        indexed.truncate(k);
    }
    indexed.sort_unstable_by(by_magnitude_desc);

    let d = tensor.hidden_dim;
    let top: Vec<TopEntry> = indexed
        .iter()
        .enumerate()
        .map(|(i, &(value, flat))| TopEntry {
            value,
            rank: i + 1,
            seq_pos: flat / d,
            dim: flat % d,
        })
        .collect();

    Ok(LayerStats {
        median_abs,
        max_abs: top[0].value,
        top,
        seq_len: tensor.seq_len,
        hidden_dim: tensor.hidden_dim,
    })
}

/// Ratio of a maximum to a median with the zero-median convention:
/// `0/0 -> 0`, `x/0 -> +inf`.
pub(crate) fn guarded_ratio(max: f64, median: f64) -> f64 {
    if median > 0.0 {
        max / median
    } else if max > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

pub fn detect_massive(record: &StatsRecord, threshold: f64) -> Result<MaVerdict> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(MaError::InvalidInput(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    if !(record.median_abs >= 0.0) {
        return Err(MaError::InvalidInput("median_abs must be >= 0".into()));
    }
    let ratio = guarded_ratio(record.max_abs, record.median_abs);
    Ok(MaVerdict {
        is_strict_massive: record.max_abs > STRICT_MIN_MAGNITUDE && ratio >= STRICT_MIN_RATIO,
        is_candidate: ratio > threshold,
        ratio,
        threshold_used: threshold,
    })
}

/// Parses a JSON Lines stats file. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn ingest_stats_lines(text: &str) -> Result<Vec<StatsRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: StatsRecord = serde_json::from_str(line).map_err(|e| MaError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        record
            .validate()
            .map_err(|(field, message)| MaError::Validation {
                line: line_no,
                field,
                message,
            })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_stats_lines<W: Write>(mut out: W, records: &[StatsRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a MAT1 tensor: magic, u32 LE rows, u32 LE cols, then f32 LE values.
pub fn read_raw_tensor<R: Read>(mut input: R) -> Result<ActivationTensor> {
    let mut header = [0u8; 12];
    read_exact_or(&mut input, &mut header, "header")?;
    if &header[0..4] != MAT1_MAGIC {
        return Err(MaError::Format(format!(
            "bad magic {:?}, expected \"MAT1\"",
            String::from_utf8_lossy(&header[0..4])
        )));
    }
    let seq_len = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let hidden_dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = seq_len
        .checked_mul(hidden_dim)
        .ok_or_else(|| MaError::Format("size overflow".into()))?;
    let byte_len = count
        .checked_mul(4)
        .ok_or_else(|| MaError::Format("size overflow".into()))?;

    let mut payload = Vec::new();
    input
        .take(byte_len as u64 + 1)
        .read_to_end(&mut payload)?;
    if payload.len() < byte_len {
        return Err(MaError::Format(format!(
            "truncated payload: header claims {seq_len}x{hidden_dim} ({byte_len} bytes), got {} bytes",
            payload.len()
        )));
    }
    if payload.len() > byte_len {
        return Err(MaError::Format(format!(
            "trailing bytes after {seq_len}x{hidden_dim} payload"
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    ActivationTensor::new(seq_len, hidden_dim, values).map_err(|e| MaError::Format(e.to_string()))
}

fn read_exact_or<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => MaError::Format(format!("truncated {what}")),
        _ => MaError::Io(e),
    })
}

/// Writes a MAT1 tensor. Values are stored as f32.
pub fn write_raw_tensor<W: Write>(mut out: W, tensor: &ActivationTensor) -> Result<()> {
    let rows = u32::try_from(tensor.seq_len)
        .map_err(|_| MaError::Format("seq_len exceeds u32".into()))?;
    let cols = u32::try_from(tensor.hidden_dim)
        .map_err(|_| MaError::Format("hidden_dim exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(12 + 4 * tensor.values.len());
    buf.extend_from_slice(MAT1_MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for v in &tensor.values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(max_abs: f64, median_abs: f64) -> StatsRecord {
        StatsRecord {
            model_id: "m".into(),
            step: 0,
            layer: 1,
            input_id: "x".into(),
            seq_len: 1,
            hidden_dim: 1,
            median_abs,
            max_abs,
            top: vec![],
        }
    }

    #[test]
    fn small_tensor_stats() {
        let t = ActivationTensor::new(2, 2, vec![1.0, -1.0, 1.0, 200.0]).unwrap();
        let s = compute_layer_stats(&t, 2).unwrap();
        assert_eq!(s.median_abs, 1.0);
        assert_eq!(s.max_abs, 200.0);
        assert_eq!(
            s.top[0],
            TopEntry { value: 200.0, rank: 1, seq_pos: 1, dim: 1 }
        );
        assert_eq!(s.top[1].value, 1.0);
        assert_eq!(s.top[1].rank, 2);
    }

    #[test]
    fn zeros_tensor() {
        let t = ActivationTensor::new(3, 5, vec![0.0; 15]).unwrap();
        let s = compute_layer_stats(&t, 3).unwrap();
        assert_eq!(s.median_abs, 0.0);
        assert_eq!(s.max_abs, 0.0);
    }

    #[test]
    fn rejects_bad_tensors() {
        assert!(ActivationTensor::new(0, 4, vec![]).is_err());
        assert!(ActivationTensor::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(ActivationTensor::new(1, 2, vec![1.0]).is_err());
        let t = ActivationTensor::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(compute_layer_stats(&t, 0).is_err());
        assert!(compute_layer_stats(&t, 3).is_err());
    }

    #[test]
    fn random_tensor_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..128).map(|_| rng.random_range(-10.0..10.0)).collect();
        let t = ActivationTensor::new(8, 16, values.clone()).unwrap();
        let s = compute_layer_stats(&t, 5).unwrap();

        let mut sorted: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(s.median_abs, 0.5 * (sorted[63] + sorted[64]));
        assert_eq!(s.max_abs, sorted[127]);
        for (i, e) in s.top.iter().enumerate() {
            assert_eq!(e.value, sorted[127 - i]);
            assert_eq!(t.get(e.seq_pos, e.dim).abs(), e.value);
        }
    }

    #[test]
    fn verdicts() {
        let v = detect_massive(&record(200.0, 1.0), 50.0).unwrap();
        assert!(v.is_candidate && !v.is_strict_massive);
        assert_eq!(v.ratio, 200.0);
        let v = detect_massive(&record(150_000.0, 1.0), 50.0).unwrap();
        assert!(v.is_candidate && v.is_strict_massive);
        let v = detect_massive(&record(40.0, 1.0), 50.0).unwrap();
        assert!(!v.is_candidate && !v.is_strict_massive);
    }

    #[test]
    fn zero_median_sentinels() {
        let v = detect_massive(&record(500.0, 0.0), 50.0).unwrap();
        assert!(v.ratio.is_infinite());
        assert!(v.is_candidate && v.is_strict_massive);
        let v = detect_massive(&record(0.0, 0.0), 50.0).unwrap();
        assert_eq!(v.ratio, 0.0);
        assert!(!v.is_candidate && !v.is_strict_massive);
        assert!(detect_massive(&record(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn strict_needs_absolute_magnitude() {
        // ratio 2000 but |a| = 20
        let v = detect_massive(&record(20.0, 0.01), 50.0).unwrap();
        assert!(v.is_candidate);
        assert!(!v.is_strict_massive);
    }

    const LINE: &str = r#"{"model_id":"m","step":1000,"layer":2,"input_id":"s0","seq_len":4,"hidden_dim":8,"median_abs":0.5,"max_abs":80.0,"top":[{"value":80.0,"rank":1,"seq_pos":0,"dim":3}]}"#;

    #[test]
    fn ingest_valid_and_empty() {
        let text = format!("{LINE}\n{LINE}\n\n{LINE}\n");
        assert_eq!(ingest_stats_lines(&text).unwrap().len(), 3);
        assert!(ingest_stats_lines("").unwrap().is_empty());
    }

    #[test]
    fn ingest_reports_line_numbers() {
        let text = format!("{LINE}\n{{not json\n");
        match ingest_stats_lines(&text) {
            Err(MaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad = LINE.replace("\"max_abs\":80.0", "\"max_abs\":0.1");
        let bad = bad.replace("\"value\":80.0", "\"value\":0.1");
        match ingest_stats_lines(&bad) {
            Err(MaError::Validation { line, field, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(field, "max_abs");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stats_lines_round_trip() {
        let recs = ingest_stats_lines(LINE).unwrap();
        let mut buf = Vec::new();
        write_stats_lines(&mut buf, &recs).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), LINE);
    }

    #[test]
    fn mat1_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..32).map(|_| rng.random::<f32>() as f64 * 10.0 - 5.0).collect();
        let values: Vec<f64> = values.into_iter().map(|v| v as f32 as f64).collect();
        let t = ActivationTensor::new(4, 8, values).unwrap();
        let mut buf = Vec::new();
        write_raw_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 12 + 32 * 4);
        assert_eq!(read_raw_tensor(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn mat1_errors() {
        let mut buf = b"XXXX".to_vec();
        buf.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(read_raw_tensor(buf.as_slice()), Err(MaError::Format(_))));

        let mut buf = b"MAT1".to_vec();
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        match read_raw_tensor(buf.as_slice()) {
            Err(MaError::Format(m)) => assert!(m.contains("truncated")),
            other => panic!("unexpected {other:?}"),
        }

        let mut buf = b"MAT1".to_vec();
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(read_raw_tensor(buf.as_slice()), Err(MaError::Format(_))));

        assert!(matches!(read_raw_tensor(&b"MA"[..]), Err(MaError::Format(_))));
    }
}

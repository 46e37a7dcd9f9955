//! Dataset ingestion, chronological splitting, sliding windows, instance
//! normalization, and forecast metrics.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;

/// An ingested multivariate series: N rows × D features plus timestamps.
#[derive(Debug, Clone)]
pub struct SeriesFrame {
    pub timestamps: Vec<String>,
    pub values: Tensor,
    pub feature_names: Vec<String>,
    pub frequency: String,
}

impl SeriesFrame {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dims(&self) -> usize {
        self.values.shape()[1]
    }

    /// One feature column as a contiguous vector.
    pub fn column(&self, d: usize) -> Vec<f64> {
        let dd = self.dims();
        self.values
            .data()
            .iter()
            .skip(d)
            .step_by(dd)
            .copied()
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("date");
        for name in &self.feature_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        let d = self.dims();
        for (i, ts) in self.timestamps.iter().enumerate() {
            out.push_str(ts);
            for j in 0..d {
                out.push(',');
                out.push_str(&format!("{}", self.values.at(&[i, j])));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Parse a UTF-8 CSV with a header whose first column is `date` and whose
/// remaining columns are numeric. Timestamps must be strictly increasing.
pub fn load_csv(path: &Path, expected_dims: Option<usize>) -> Result<SeriesFrame> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.first().map(|c| c.trim()) != Some("date") {
        return Err(Error::Format(format!(
            "{}: first header column must be \"date\", got {:?}",
            path.display(),
            cols.first().unwrap_or(&"")
        )));
    }
    if cols.len() < 2 {
        return Err(Error::Format(format!(
            "{}: no feature columns after \"date\"",
            path.display()
        )));
    }
    let feature_names: Vec<String> = cols[1..].iter().map(|c| c.trim().to_string()).collect();
    let d = feature_names.len();
    let mut timestamps: Vec<String> = Vec::new();
    let mut data = Vec::new();
    for (row0, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let row = row0 + 1; // 1-based data row for error reporting
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 1 {
            return Err(Error::Parse {
                row,
                column: "date".into(),
                message: format!("expected {} cells, got {}", d + 1, cells.len()),
            });
        }
        let ts = cells[0].trim();
        if let Some(prev) = timestamps.last() {
            if ts <= prev.as_str() {
                return Err(Error::Validation(format!(
                    "timestamps not strictly increasing at data row {row}: {prev:?} then {ts:?}"
                )));
            }
        }
        timestamps.push(ts.to_string());
        for (j, cell) in cells[1..].iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: feature_names[j].clone(),
                message: format!("not a number: {:?}", cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: feature_names[j].clone(),
                    message: "non-finite value".into(),
                });
            }
            data.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    if let Some(want) = expected_dims {
        if d != want {
            return Err(Error::Validation(format!(
                "expected {want} feature columns, file has {d}"
            )));
        }
    }
    let n = timestamps.len();
    Ok(SeriesFrame {
        timestamps,
        values: Tensor::checked(vec![n, d], data)?,
        feature_names,
        frequency: "unknown".into(),
    })
}

/// How the chronological train/val/test borders are derived.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitKind {
    /// ETT hourly protocol: fixed month-based borders, look-back context
    /// carried into val/test.
    EttHour,
    /// ETT 15-minute protocol.
    EttMinute,
    /// Fractional split. `context_overlap` prepends look-back rows of the
    /// preceding split to val/test, matching the common benchmark loaders;
    /// without it the splits share no rows at all.
    Ratio {
        train: f64,
        test: f64,
        context_overlap: bool,
    },
}

#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub kind: SplitKind,
    /// Keep only the chronologically earliest fraction of training windows.
    pub few_shot_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            kind: SplitKind::Ratio {
                train: 0.7,
                test: 0.2,
                context_overlap: false,
            },
            few_shot_fraction: 1.0,
        }
    }
}

impl SplitSpec {
    /// Benchmark preset for a known dataset name; `None` for unknown names.
    pub fn preset(name: &str) -> Option<SplitSpec> {
        let kind = match name.to_ascii_lowercase().as_str() {
            "etth1" | "etth2" => SplitKind::EttHour,
            "ettm1" | "ettm2" => SplitKind::EttMinute,
            "electricity" | "ecl" | "traffic" | "weather" => SplitKind::Ratio {
                train: 0.7,
                test: 0.2,
                context_overlap: true,
            },
            _ => return None,
        };
        Some(SplitSpec {
            kind,
            few_shot_fraction: 1.0,
        })
    }

    /// Row ranges [start, end) per split. `seq_len` matters only for
    /// context-overlapping protocols.
    pub fn bounds(&self, rows: usize, seq_len: usize) -> Result<[(usize, usize); 3]> {
        let fixed = |edges: [usize; 4]| -> Result<[(usize, usize); 3]> {
            if rows < edges[3] {
                return Err(Error::Config(format!(
                    "dataset has {rows} rows, protocol needs {}",
                    edges[3]
                )));
            }
            Ok([
                (0, edges[1]),
                (edges[1] - seq_len, edges[2]),
                (edges[2] - seq_len, edges[3]),
            ])
        };
        match &self.kind {
            SplitKind::EttHour => fixed([0, 8640, 11520, 14400]),
            SplitKind::EttMinute => fixed([0, 34560, 46080, 57600]),
            SplitKind::Ratio {
                train,
                test,
                context_overlap,
            } => {
                let n_train = (rows as f64 * train) as usize;
                let n_test = (rows as f64 * test) as usize;
                if n_train == 0 || n_test == 0 || n_train + n_test >= rows {
                    return Err(Error::Config(format!(
                        "ratio split {train}/{test} degenerate for {rows} rows"
                    )));
                }
                let n_val = rows - n_train - n_test;
                if *context_overlap {
                    if n_train < seq_len || rows - n_test < seq_len {
                        return Err(Error::Config(
                            "splits shorter than the look-back context".into(),
                        ));
                    }
                    Ok([
                        (0, n_train),
                        (n_train - seq_len, n_train + n_val),
                        (rows - n_test - seq_len, rows),
                    ])
                } else {
                    Ok([
                        (0, n_train),
                        (n_train, n_train + n_val),
                        (n_train + n_val, rows),
                    ])
                }
            }
        }
    }
}

/// Sliding windows of one split, materialized on demand.
#[derive(Debug, Clone)]
pub struct SplitWindows {
    values: Arc<Tensor>,
    /// Absolute row index where each look-back window starts.
    pub origins: Vec<usize>,
    pub seq_len: usize,
    pub pred_len: usize,
}

impl SplitWindows {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.values.shape()[1]
    }

    /// Gather (X, Y) for the windows at `picks` (indices into `origins`).
    pub fn batch(&self, picks: &[usize]) -> (Tensor, Tensor) {
        let (l, h, d) = (self.seq_len, self.pred_len, self.dims());
        let b = picks.len();
        let src = self.values.data();
        let mut x = vec![0.0; b * l * d];
        let mut y = vec![0.0; b * h * d];
        for (bi, &pi) in picks.iter().enumerate() {
            let o = self.origins[pi];
            x[bi * l * d..(bi + 1) * l * d].copy_from_slice(&src[o * d..(o + l) * d]);
            y[bi * h * d..(bi + 1) * h * d].copy_from_slice(&src[(o + l) * d..(o + l + h) * d]);
        }
        (Tensor::new(vec![b, l, d], x), Tensor::new(vec![b, h, d], y))
    }

    /// Batches of indices covering the whole split in order.
    pub fn index_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Shuffled batches, deterministic per RNG stream.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        idx.chunks(batch_size).map(|c| c.to_vec()).collect()
    }

    /// Clone restricted to the first `n` windows.
    pub fn take(&self, n: usize) -> SplitWindows {
        SplitWindows {
            values: Arc::clone(&self.values),
            origins: self.origins[..n.min(self.origins.len())].to_vec(),
            seq_len: self.seq_len,
            pred_len: self.pred_len,
        }
    }

    /// Inclusive range of rows any window of this split touches.
    pub fn row_span(&self) -> Option<(usize, usize)> {
        let first = *self.origins.first()?;
        let last = *self.origins.last()?;
        Some((first, last + self.seq_len + self.pred_len - 1))
    }
}

/// Per-split count of look-back-only window origins (targets not required to
/// fit), the convention benchmark tables quote.
pub fn window_origin_counts(spec: &SplitSpec, rows: usize, seq_len: usize) -> Result<[usize; 3]> {
    let bounds = spec.bounds(rows, seq_len)?;
    let mut out = [0; 3];
    for (i, (start, end)) in bounds.iter().enumerate() {
        out[i] = (end - start).saturating_sub(seq_len) + 1;
    }
    Ok(out)
}

/// Build stride-1 sliding windows inside each split. Both look-back and
/// target must fit within the split's row range. The few-shot fraction keeps
/// the earliest training windows.
pub fn make_windows(
    frame: &SeriesFrame,
    spec: &SplitSpec,
    seq_len: usize,
    pred_len: usize,
    label_len: usize,
) -> Result<[SplitWindows; 3]> {
    if label_len > seq_len {
        return Err(Error::Config(format!(
            "label_len {label_len} exceeds seq_len {seq_len}"
        )));
    }
    let bounds = spec.bounds(frame.rows(), seq_len)?;
    let values = Arc::new(frame.values.clone());
    let mut splits = Vec::with_capacity(3);
    for (si, &(start, end)) in bounds.iter().enumerate() {
        let rows = end - start;
        if rows < seq_len + pred_len {
            return Err(Error::Config(format!(
                "split {si} has {rows} rows, needs at least seq_len + pred_len = {}",
                seq_len + pred_len
            )));
        }
        let count = rows - seq_len - pred_len + 1;
        let mut origins: Vec<usize> = (start..start + count).collect();
        if si == 0 && spec.few_shot_fraction < 1.0 {
            if spec.few_shot_fraction <= 0.0 {
                return Err(Error::Config(format!(
                    "few-shot fraction must be in (0, 1], got {}",
                    spec.few_shot_fraction
                )));
            }
            let keep = ((origins.len() as f64 * spec.few_shot_fraction) as usize).max(1);
            origins.truncate(keep);
        }
        splits.push(SplitWindows {
            values: Arc::clone(&values),
            origins,
            seq_len,
            pred_len,
        });
    }
    let [train, val, test]: [SplitWindows; 3] = splits.try_into().unwrap();
    Ok([train, val, test])
}

/// Per-instance, per-feature statistics used for normalization and for
/// mapping forecasts back to original units.
#[derive(Debug, Clone)]
pub struct NormStats {
    /// B×1×D
    pub means: Tensor,
    /// B×1×D, floored
    pub stdev: Tensor,
    pub norm_const: f64,
}

pub const STD_FLOOR: f64 = 1e-5;

/// Standardize each (instance, feature) series of a B×L×D batch with its own
/// mean and population standard deviation. `norm_const`, when given, scales
/// the divisor (used only on the image-construction path).
pub fn instance_normalize(x: &Tensor, norm_const: Option<f64>) -> (Tensor, NormStats) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "instance_normalize expects B×L×D");
    let (b, l, d) = (s[0], s[1], s[2]);
    let nc = norm_const.unwrap_or(1.0);
    let mut means = vec![0.0; b * d];
    let mut stds = vec![0.0; b * d];
    let src = x.data();
    for bi in 0..b {
        for di in 0..d {
            let mut sum = 0.0;
            for li in 0..l {
                sum += src[(bi * l + li) * d + di];
            }
            let mean = sum / l as f64;
            let mut var = 0.0;
            for li in 0..l {
                let v = src[(bi * l + li) * d + di] - mean;
                var += v * v;
            }
            let std = (var / l as f64).sqrt();
            means[bi * d + di] = mean;
            stds[bi * d + di] = (std * nc).max(STD_FLOOR);
        }
    }
    let mut out = vec![0.0; b * l * d];
    for bi in 0..b {
        for li in 0..l {
            for di in 0..d {
                let i = (bi * l + li) * d + di;
                out[i] = (src[i] - means[bi * d + di]) / stds[bi * d + di];
            }
        }
    }
    (
        Tensor::new(vec![b, l, d], out),
        NormStats {
            means: Tensor::new(vec![b, 1, d], means),
            stdev: Tensor::new(vec![b, 1, d], stds),
            norm_const: nc,
        },
    )
}

/// Invert [`instance_normalize`] on a B×H×D tensor (H may differ from L).
pub fn denormalize(y: &Tensor, stats: &NormStats) -> Tensor {
    let s = y.shape();
    assert_eq!(s.len(), 3, "denormalize expects B×H×D");
    let (b, h, d) = (s[0], s[1], s[2]);
    assert_eq!(stats.means.shape(), &[b, 1, d], "stats batch mismatch");
    let means = stats.means.data();
    let stds = stats.stdev.data();
    let src = y.data();
    let mut out = vec![0.0; b * h * d];
    for bi in 0..b {
        for hi in 0..h {
            for di in 0..d {
                let i = (bi * h + hi) * d + di;
                out[i] = src[i] * stds[bi * d + di] + means[bi * d + di];
            }
        }
    }
    Tensor::new(vec![b, h, d], out)
}

/// Mean squared and mean absolute error over every entry.
pub fn compute_metrics(y: &Tensor, y_hat: &Tensor) -> Result<(f64, f64)> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Dimension(format!(
            "metric shapes differ: {:?} vs {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    let n = y.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (&a, &b) in y.data().iter().zip(y_hat.data()) {
        let e = b - a;
        se += e * e;
        ae += e.abs();
    }
    Ok((se / n, ae / n))
}

/// Two incommensurate sinusoids (periods 24 and 24·√2) plus Gaussian noise.
/// Timestamps are synthetic hourly ISO-8601 strings.
pub fn synthetic_sinusoids(n: usize, seed: u64, noise: f64) -> SeriesFrame {
    let mut rng = RngStream::new(seed, "synthetic");
    let mut data = Vec::with_capacity(n * 2);
    let p2 = 24.0 * std::f64::consts::SQRT_2;
    for t in 0..n {
        let tf = t as f64;
        data.push((2.0 * std::f64::consts::PI * tf / 24.0).sin() + noise * rng.normal());
        data.push((2.0 * std::f64::consts::PI * tf / p2).sin() + noise * rng.normal());
    }
    let timestamps = (0..n)
        .map(|t| {
            let day = t / 24;
            let (year, rem) = (2020 + day / 360, day % 360);
            format!(
                "{year}-{:02}-{:02} {:02}:00:00",
                rem / 30 + 1,
                rem % 30 + 1,
                t % 24
            )
        })
        .collect();
    SeriesFrame {
        timestamps,
        values: Tensor::new(vec![n, 2], data),
        feature_names: vec!["s24".into(), "s24r2".into()],
        frequency: "1h".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_a_small_csv() {
        let f = write_temp("date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n2020-01-03,5,6\n");
        let frame = load_csv(f.path(), None).unwrap();
        assert_eq!(frame.rows(), 3);
        assert_eq!(frame.dims(), 2);
        assert_eq!(frame.feature_names, vec!["a", "b"]);
        assert_eq!(frame.values.at(&[2, 1]), 6.0);
    }

    #[test]
    fn parse_error_names_row_and_column() {
        let f = write_temp("date,a,b\n2020-01-01,1,2\n2020-01-02,abc,4\n");
        match load_csv(f.path(), None) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_header_is_a_format_error() {
        let f = write_temp("time,a\n2020-01-01,1\n");
        assert!(matches!(load_csv(f.path(), None), Err(Error::Format(_))));
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let f = write_temp("date,a\n2020-01-02,1\n2020-01-01,2\n");
        assert!(matches!(load_csv(f.path(), None), Err(Error::Validation(_))));
    }

    #[test]
    fn dimension_mismatch_is_a_validation_error() {
        let f = write_temp("date,a,b\n2020-01-01,1,2\n");
        assert!(matches!(
            load_csv(f.path(), Some(7)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let frame = synthetic_sinusoids(50, 3, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        frame.write_csv(&path).unwrap();
        let loaded = load_csv(&path, Some(2)).unwrap();
        assert_eq!(loaded.rows(), 50);
        for i in 0..50 {
            for j in 0..2 {
                assert!((loaded.values.at(&[i, j]) - frame.values.at(&[i, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_count_formula() {
        // Single range of N=10 rows with L=3, H=2 -> 6 windows.
        let frame = synthetic_sinusoids(10, 0, 0.0);
        let sw = SplitWindows {
            values: Arc::new(frame.values.clone()),
            origins: (0..(10 - 3 - 2 + 1)).collect(),
            seq_len: 3,
            pred_len: 2,
        };
        assert_eq!(sw.len(), 6);
        // And per split through make_windows: train has 8 rows.
        let spec = SplitSpec {
            kind: SplitKind::Ratio {
                train: 0.8,
                test: 0.1,
                context_overlap: false,
            },
            few_shot_fraction: 1.0,
        };
        let frame = synthetic_sinusoids(100, 0, 0.0);
        let [train, val, test] = make_windows(&frame, &spec, 3, 2, 0).unwrap();
        assert_eq!(train.len(), 80 - 3 - 2 + 1);
        assert_eq!(val.len(), 10 - 3 - 2 + 1);
        assert_eq!(test.len(), 10 - 3 - 2 + 1);
    }

    #[test]
    fn few_shot_keeps_earliest_prefix() {
        let frame = synthetic_sinusoids(200, 0, 0.0);
        let mut spec = SplitSpec::default();
        let [full, _, _] = make_windows(&frame, &spec, 10, 5, 0).unwrap();
        spec.few_shot_fraction = 0.5;
        let [half, _, _] = make_windows(&frame, &spec, 10, 5, 0).unwrap();
        assert_eq!(half.len(), (full.len() as f64 * 0.5) as usize);
        assert_eq!(&full.origins[..half.len()], &half.origins[..]);
        // Prefix rule on exactly 6 windows.
        assert_eq!((6.0f64 * 0.5) as usize, 3);
    }

    #[test]
    fn split_too_short_is_a_config_error() {
        let frame = synthetic_sinusoids(30, 0, 0.0);
        let spec = SplitSpec::default();
        assert!(matches!(
            make_windows(&frame, &spec, 20, 20, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn strict_splits_share_no_rows() {
        let frame = synthetic_sinusoids(200, 1, 0.1);
        let spec = SplitSpec::default();
        let [train, val, test] = make_windows(&frame, &spec, 12, 4, 0).unwrap();
        let (t0, t1) = train.row_span().unwrap();
        let (v0, v1) = val.row_span().unwrap();
        let (e0, e1) = test.row_span().unwrap();
        assert!(t1 < v0 || v1 < t0, "train {t0}..{t1} overlaps val {v0}..{v1}");
        assert!(t1 < e0 || e1 < t0, "train overlaps test");
        assert!(v1 < e0 || e1 < v0, "val overlaps test");
    }

    #[test]
    fn ett_hour_origin_counts_match_protocol() {
        let spec = SplitSpec::preset("ETTh1").unwrap();
        let counts = window_origin_counts(&spec, 17420, 96).unwrap();
        assert_eq!(counts, [8545, 2881, 2881]);
    }

    #[test]
    fn ett_minute_origin_counts_match_protocol() {
        let spec = SplitSpec::preset("ETTm1").unwrap();
        let counts = window_origin_counts(&spec, 69680, 96).unwrap();
        assert_eq!(counts, [34465, 11521, 11521]);
    }

    #[test]
    fn ratio_preset_matches_weather_counts() {
        let spec = SplitSpec::preset("weather").unwrap();
        let counts = window_origin_counts(&spec, 52696, 96).unwrap();
        assert_eq!(counts, [36792, 5271, 10540]);
    }

    #[test]
    fn batch_layout_is_time_then_feature() {
        let frame = synthetic_sinusoids(30, 0, 0.0);
        let sw = SplitWindows {
            values: Arc::new(frame.values.clone()),
            origins: vec![0, 5],
            seq_len: 4,
            pred_len: 2,
        };
        let (x, y) = sw.batch(&[1]);
        assert_eq!(x.shape(), &[1, 4, 2]);
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(x.at(&[0, 0, 0]), frame.values.at(&[5, 0]));
        assert_eq!(x.at(&[0, 3, 1]), frame.values.at(&[8, 1]));
        assert_eq!(y.at(&[0, 0, 0]), frame.values.at(&[9, 0]));
    }

    #[test]
    fn normalize_matches_hand_arithmetic() {
        // Row [1,2,3]: mean 2, population std sqrt(2/3).
        let x = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]);
        let (xn, stats) = instance_normalize(&x, None);
        let want = (2.0f64 / 3.0).sqrt();
        assert!((stats.means.item() - 2.0).abs() < 1e-12);
        assert!((stats.stdev.item() - want).abs() < 1e-12);
        assert!((xn.data()[0] + 1.2247).abs() < 1e-4);
        assert!(xn.data()[1].abs() < 1e-12);
        assert!((xn.data()[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn constant_rows_hit_the_std_floor() {
        let x = Tensor::new(vec![1, 3, 1], vec![5.0, 5.0, 5.0]);
        let (xn, stats) = instance_normalize(&x, None);
        assert_eq!(xn.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(stats.stdev.item(), STD_FLOOR);
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let mut rng = RngStream::new(8, "norm");
        let x = rng.normal_tensor(vec![3, 7, 2]).map(|v| v * 4.0 + 10.0);
        let (xn, stats) = instance_normalize(&x, None);
        let back = denormalize(&xn, &stats);
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // Per-instance per-feature mean of the normalized data is 0.
        let s = xn.shape();
        for bi in 0..s[0] {
            for di in 0..s[2] {
                let mut m = 0.0;
                for li in 0..s[1] {
                    m += xn.at(&[bi, li, di]);
                }
                assert!((m / s[1] as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn norm_const_scales_the_divisor() {
        let x = Tensor::new(vec![1, 2, 1], vec![0.0, 2.0]);
        let (plain, _) = instance_normalize(&x, None);
        let (scaled, stats) = instance_normalize(&x, Some(0.4));
        assert!((scaled.data()[1] - plain.data()[1] / 0.4).abs() < 1e-12);
        assert!((stats.norm_const - 0.4).abs() < 1e-15);
    }

    #[test]
    fn metrics_trivial_cases() {
        let y = Tensor::from_vec(vec![0.0, 0.0]);
        let yh = Tensor::from_vec(vec![1.0, 1.0]);
        let (mse, mae) = compute_metrics(&y, &yh).unwrap();
        assert_eq!((mse, mae), (1.0, 1.0));

        let y = Tensor::from_vec(vec![0.0, 2.0]);
        let yh = Tensor::from_vec(vec![1.0, 0.0]);
        let (mse, mae) = compute_metrics(&y, &yh).unwrap();
        assert_eq!((mse, mae), (2.5, 1.5));
    }

    #[test]
    fn metrics_match_double_loop_oracle() {
        let mut rng = RngStream::new(10, "metrics");
        let y = rng.normal_tensor(vec![96, 7]);
        let yh = rng.normal_tensor(vec![96, 7]);
        let (mse, mae) = compute_metrics(&y, &yh).unwrap();
        let mut se = 0.0;
        let mut ae = 0.0;
        for i in 0..96 {
            for j in 0..7 {
                let e = yh.at(&[i, j]) - y.at(&[i, j]);
                se += e * e;
                ae += e.abs();
            }
        }
        let n = (96 * 7) as f64;
        assert!((mse - se / n).abs() < 1e-12);
        assert!((mae - ae / n).abs() < 1e-12);
    }

    #[test]
    fn metric_shape_mismatch_is_rejected() {
        let y = Tensor::from_vec(vec![0.0; 4]);
        let yh = Tensor::from_vec(vec![0.0; 5]);
        assert!(matches!(compute_metrics(&y, &yh), Err(Error::Dimension(_))));
    }

    #[test]
    fn metrics_zero_iff_equal() {
        let mut rng = RngStream::new(11, "mz");
        let y = rng.normal_tensor(vec![8, 3]);
        let (mse, mae) = compute_metrics(&y, &y).unwrap();
        assert_eq!((mse, mae), (0.0, 0.0));
        let mut y2 = y.clone();
        y2.data_mut()[5] += 1e-9;
        let (mse, mae) = compute_metrics(&y, &y2).unwrap();
        assert!(mse > 0.0 && mae > 0.0);
    }
}

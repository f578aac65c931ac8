//! CSV ingestion, min-max scaling and fixed-length windowing.

use std::path::Path;

use log::warn;
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A cleaned multivariate series, timestamps along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub values: Array2<f64>,
    pub feature_names: Vec<String>,
    pub interval: String,
    /// Source row numbers (0-based, header excluded) that survived cleaning.
    pub rows: Vec<usize>,
    pub dropped_rows: usize,
}

impl RawSeries {
    pub fn new(values: Array2<f64>, feature_names: Vec<String>) -> Self {
        let rows = (0..values.nrows()).collect();
        Self {
            values,
            feature_names,
            interval: String::new(),
            rows,
            dropped_rows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn features(&self) -> usize {
        self.values.ncols()
    }
}

/// Per-feature min-max scaling metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaling {
    /// Fit over every value of each column. Constant columns get
    /// `max = min + 1` so they scale to zero.
    pub fn fit(values: &Array2<f64>, names: &[String]) -> Self {
        let mut min = Vec::with_capacity(values.ncols());
        let mut max = Vec::with_capacity(values.ncols());
        for (j, col) in values.axis_iter(Axis(1)).enumerate() {
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi <= lo {
                let name = names.get(j).map(String::as_str).unwrap_or("?");
                warn!("feature `{name}` is constant; widening its scale denominator to 1");
                hi = lo + 1.0;
            }
            min.push(lo);
            max.push(hi);
        }
        Self { min, max }
    }

    pub fn features(&self) -> usize {
        self.min.len()
    }

    /// `(x − min) / (max − min)` on the last axis.
    pub fn scale(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut out = x.clone();
        for (j, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
            let (lo, span) = (self.min[j], self.max[j] - self.min[j]);
            lane.mapv_inplace(|v| (v - lo) / span);
        }
        out
    }

    /// `x · (max − min) + min` on the last axis.
    pub fn unscale(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut out = x.clone();
        for (j, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
            let (lo, span) = (self.min[j], self.max[j] - self.min[j]);
            lane.mapv_inplace(|v| v * span + lo);
        }
        out
    }
}

/// Scaled windows `(N, L, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesBatch {
    pub windows: Array3<f64>,
    pub scaling: Option<Scaling>,
    pub source_id: String,
}

impl SeriesBatch {
    pub fn len(&self) -> usize {
        self.windows.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.windows.dim().1
    }

    pub fn channels(&self) -> usize {
        self.windows.dim().2
    }
}

fn parse_number(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Read a headed CSV file. A non-numeric first column is treated as the
/// date/index column and skipped. Rows with a missing or non-numeric entry in
/// any selected column are dropped.
pub fn load_csv(path: &Path, feature_columns: Option<&[String]>) -> Result<RawSeries> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let records: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>()?;
    fn cell(r: &csv::StringRecord, j: usize) -> &str {
        r.get(j).unwrap_or("")
    }

    let index_col = match records.first() {
        Some(r) if !headers.is_empty() && parse_number(cell(r, 0)).is_none() && !cell(r, 0).trim().is_empty() => Some(0),
        _ => None,
    };
    let numeric: Vec<usize> = (0..headers.len())
        .filter(|&j| Some(j) != index_col)
        .filter(|&j| records.iter().any(|r| parse_number(cell(r, j)).is_some()))
        .collect();

    let selected: Vec<usize> = match feature_columns {
        Some(names) => names
            .iter()
            .map(|n| {
                headers
                    .iter()
                    .position(|h| h == n)
                    .filter(|j| numeric.contains(j))
                    .ok_or_else(|| Error::MissingColumn(n.clone()))
            })
            .collect::<Result<_>>()?,
        None => numeric,
    };
    if selected.is_empty() {
        return Err(Error::NoNumericColumns(path.display().to_string()));
    }

    let mut values = Vec::with_capacity(records.len() * selected.len());
    let mut rows = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for (i, r) in records.iter().enumerate() {
        let parsed: Option<Vec<f64>> = selected.iter().map(|&j| parse_number(cell(r, j))).collect();
        match parsed {
            Some(v) => {
                values.extend(v);
                rows.push(i);
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} rows with missing or non-numeric entries from {}", path.display());
    }
    let values = Array2::from_shape_vec((rows.len(), selected.len()), values)
        .expect("row-major collection matches shape");
    Ok(RawSeries {
        values,
        feature_names: selected.iter().map(|&j| headers[j].clone()).collect(),
        interval: String::new(),
        rows,
        dropped_rows: dropped,
    })
}

/// Write a series as headed CSV with one column per feature.
pub fn write_csv(path: &Path, series: &RawSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&series.feature_names)?;
    for row in series.values.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Number of windows of length `window` at `stride` in `total` timestamps.
pub fn window_count(total: usize, window: usize, stride: usize) -> usize {
    if total < window || window == 0 || stride == 0 {
        0
    } else {
        (total - window) / stride + 1
    }
}

/// Scale each feature over the whole series, then cut overlapping windows.
pub fn make_windows(series: &RawSeries, window: usize, stride: usize) -> Result<SeriesBatch> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("window and stride must be positive".into()));
    }
    if series.len() < window {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            window,
        });
    }
    let scaling = Scaling::fit(&series.values, &series.feature_names);
    let k = series.features();
    let n = window_count(series.len(), window, stride);
    let mut windows = Array3::zeros((n, window, k));
    for w in 0..n {
        let start = w * stride;
        windows
            .index_axis_mut(Axis(0), w)
            .assign(&series.values.slice(ndarray::s![start..start + window, ..]));
    }
    let windows = scaling.scale(&windows);
    Ok(SeriesBatch {
        windows,
        scaling: Some(scaling),
        source_id: String::new(),
    })
}

/// Map scaled windows back to data units.
pub fn unscale(batch: &SeriesBatch) -> Result<Array3<f64>> {
    let scaling = batch.scaling.as_ref().ok_or(Error::MissingScale)?;
    if scaling.features() != batch.channels() {
        return Err(Error::Shape(format!(
            "scaling has {} features, batch has {}",
            scaling.features(),
            batch.channels()
        )));
    }
    Ok(scaling.unscale(&batch.windows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let series = RawSeries::new(
            Array2::from_shape_vec((3, 2), vec![1.0, 2.5, -3.0, 4.0, 0.125, 6.0]).unwrap(),
            vec!["a".into(), "b".into()],
        );
        super::write_csv(&p, &series).unwrap();
        assert_eq!(load_csv(&p, None).unwrap(), series);
    }

    #[test]
    fn missing_entries_drop_rows() {
        let f = write_csv("date,a,b\n2020-01-01,1,2\n2020-01-02,3,\n2020-01-03,5,6\n");
        let s = load_csv(f.path(), None).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.features(), 2);
        assert_eq!(s.feature_names, vec!["a", "b"]);
        assert_eq!(s.rows, vec![0, 2]);
        assert_eq!(s.dropped_rows, 1);
        assert_eq!(s.values[[1, 1]], 6.0);
    }

    #[test]
    fn etth1_layout_yields_eight_features() {
        let mut text = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        // The published ETTh1 header: 8 columns, the first being the date.
        text.push_str("2016-07-01 00:00:00,5.827,2.009,1.599,0.462,4.203,1.340,30.531\n");
        text.push_str("2016-07-01 01:00:00,5.693,2.076,1.492,0.426,4.142,1.371,27.787\n");
        let f = write_csv(&text);
        let s = load_csv(f.path(), None).unwrap();
        assert_eq!(s.features(), 7);
        let mut eight = String::from("date,a,b,c,d,e,f,g,h\n");
        eight.push_str("x,1,2,3,4,5,6,7,8\n");
        let f = write_csv(&eight);
        assert_eq!(load_csv(f.path(), None).unwrap().features(), 8);
    }

    #[test]
    fn error_paths() {
        let f = write_csv("date,name\nx,foo\ny,bar\n");
        assert!(matches!(load_csv(f.path(), None), Err(Error::NoNumericColumns(_))));
        assert!(matches!(
            load_csv(Path::new("/nonexistent/file.csv"), None),
            Err(Error::MissingFile(_))
        ));
        let f = write_csv("a,b\n1,2\n");
        assert!(matches!(
            load_csv(f.path(), Some(&["c".to_string()])),
            Err(Error::MissingColumn(_))
        ));
        let s = load_csv(f.path(), Some(&["b".to_string()])).unwrap();
        assert_eq!(s.feature_names, vec!["b"]);
    }

    fn ramp(t: usize, k: usize) -> RawSeries {
        let values = Array2::from_shape_fn((t, k), |(i, j)| (i * (j + 1)) as f64);
        RawSeries::new(values, (0..k).map(|j| format!("f{j}")).collect())
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&ramp(24, 2), 24, 1).unwrap().len(), 1);
        assert_eq!(make_windows(&ramp(100, 2), 24, 1).unwrap().len(), 77);
        assert!(matches!(
            make_windows(&ramp(10, 2), 24, 1),
            Err(Error::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn constant_feature_scales_to_zero() {
        let mut s = ramp(30, 2);
        s.values.column_mut(1).fill(7.0);
        let b = make_windows(&s, 10, 1).unwrap();
        let sc = b.scaling.as_ref().unwrap();
        assert_eq!(sc.max[1], sc.min[1] + 1.0);
        assert!(b.windows.index_axis(Axis(2), 1).iter().all(|&v| v == 0.0));
        assert!(b.windows.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn unscale_arithmetic() {
        let b = SeriesBatch {
            windows: Array3::from_elem((1, 1, 1), 0.5),
            scaling: Some(Scaling { min: vec![10.0], max: vec![30.0] }),
            source_id: String::new(),
        };
        assert_eq!(unscale(&b).unwrap()[[0, 0, 0]], 20.0);
        let zeros = SeriesBatch {
            windows: Array3::zeros((2, 3, 2)),
            scaling: Some(Scaling { min: vec![1.0, -4.0], max: vec![2.0, 4.0] }),
            source_id: String::new(),
        };
        let raw = unscale(&zeros).unwrap();
        assert!(raw.index_axis(Axis(2), 0).iter().all(|&v| v == 1.0));
        assert!(raw.index_axis(Axis(2), 1).iter().all(|&v| v == -4.0));
        let bare = SeriesBatch { scaling: None, ..b };
        assert!(matches!(unscale(&bare), Err(Error::MissingScale)));
    }

    proptest! {
        #[test]
        fn window_count_formula(total in 1usize..200, window in 1usize..50, stride in 1usize..10) {
            prop_assume!(total >= window);
            let b = make_windows(&ramp(total, 1), window, stride).unwrap();
            prop_assert_eq!(b.len(), (total - window) / stride + 1);
            // Windows are contiguous slices starting at w·stride (feature 0 is the row index).
            let unscaled = unscale(&b).unwrap();
            for w in 0..b.len() {
                for t in 0..window {
                    prop_assert!((unscaled[[w, t, 0]] - (w * stride + t) as f64).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn scale_unscale_roundtrip(vals in proptest::collection::vec(-1e3f64..1e3, 40)) {
            let values = Array2::from_shape_vec((20, 2), vals).unwrap();
            prop_assume!(values.column(0).iter().any(|&v| v != values[[0, 0]]));
            prop_assume!(values.column(1).iter().any(|&v| v != values[[0, 1]]));
            let s = RawSeries::new(values.clone(), vec!["a".into(), "b".into()]);
            let b = make_windows(&s, 20, 1).unwrap();
            let back = unscale(&b).unwrap();
            for ((i, j), v) in values.indexed_iter() {
                let r = back[[0, i, j]];
                prop_assert!((r - v).abs() <= 1e-9 * v.abs().max(1.0));
            }
            let sc = b.scaling.unwrap();
            let again = sc.scale(&sc.unscale(&b.windows));
            for (u, v) in again.iter().zip(b.windows.iter()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}

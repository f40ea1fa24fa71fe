use std::collections::HashMap;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One (possibly multichannel) series: `values` is `[L, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub id: String,
    /// Channel offset in the source series; non-zero only after [`decompose_channels`].
    pub channel: usize,
    pub values: Tensor,
    pub frequency: String,
}

impl TimeSeries {
    pub fn univariate(id: impl Into<String>, values: Vec<f64>) -> Self {
        let n = values.len();
        TimeSeries {
            id: id.into(),
            channel: 0,
            values: Tensor::new(&[n, 1], values).expect("sized"),
            frequency: "unknown".into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Values of one channel as a contiguous vector.
    pub fn channel_values(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.values.row(i)[c]).collect()
    }
}

/// Splits a `D`-channel series into `D` univariate streams that keep their
/// `(id, channel)` identity.
pub fn decompose_channels(series: &TimeSeries) -> Vec<TimeSeries> {
    (0..series.channels())
        .map(|c| {
            let vals = series.channel_values(c);
            let n = vals.len();
            TimeSeries {
                id: series.id.clone(),
                channel: series.channel + c,
                values: Tensor::new(&[n, 1], vals).expect("sized"),
                frequency: series.frequency.clone(),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvLayout {
    /// `timestamp,ch0,ch1,...`; one series per file named after the file stem.
    Wide,
    /// `series_id,timestamp,value`; rows of one series must be contiguous in time order.
    Long,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SeriesLoadReport {
    pub id: String,
    pub length: usize,
    pub channels: usize,
    pub imputed: usize,
    pub irregular_gaps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub series: Vec<SeriesLoadReport>,
}

impl LoadReport {
    pub fn imputed(&self) -> usize {
        self.series.iter().map(|s| s.imputed).sum()
    }

    pub fn irregular_gaps(&self) -> usize {
        self.series.iter().map(|s| s.irregular_gaps).sum()
    }
}

fn parse_timestamp(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc().timestamp() as f64);
        }
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp() as f64)
}

fn parse_value(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    if raw.is_empty() || ["nan", "na", "null", "none"].contains(&raw.to_ascii_lowercase().as_str()) {
        return None;
    }
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

struct RawSeries {
    id: String,
    stamps: Vec<f64>,
    rows: Vec<Vec<Option<f64>>>,
    first_row: usize,
}

/// Reads a CSV file into ordered, gap-checked series with forward-filled gaps.
pub fn load_csv(path: &Path, layout: CsvLayout) -> Result<(Vec<TimeSeries>, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).comment(Some(b'#')).from_path(path)?;
    let headers = reader.headers()?.clone();
    let loc = |row: usize| format!("{}:{}", path.display(), row);
    let mut raws: Vec<RawSeries> = Vec::new();
    match layout {
        CsvLayout::Wide => {
            if headers.len() < 2 {
                return Err(Error::Parse { location: loc(1), detail: "wide layout needs a timestamp and ≥1 value column".into() });
            }
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "series".into());
            let mut raw = RawSeries { id, stamps: Vec::new(), rows: Vec::new(), first_row: 2 };
            for (i, rec) in reader.records().enumerate() {
                let rec = rec?;
                let row = i + 2;
                let ts = parse_timestamp(&rec[0])
                    .ok_or_else(|| Error::Parse { location: loc(row), detail: format!("bad timestamp `{}`", &rec[0]) })?;
                raw.stamps.push(ts);
                raw.rows.push(rec.iter().skip(1).map(parse_value).collect());
            }
            raws.push(raw);
        }
        CsvLayout::Long => {
            if headers.len() != 3 {
                return Err(Error::Parse { location: loc(1), detail: "long layout is `series_id,timestamp,value`".into() });
            }
            let mut by_id: HashMap<String, usize> = HashMap::new();
            for (i, rec) in reader.records().enumerate() {
                let rec = rec?;
                let row = i + 2;
                let ts = parse_timestamp(&rec[1])
                    .ok_or_else(|| Error::Parse { location: loc(row), detail: format!("bad timestamp `{}`", &rec[1]) })?;
                let id = rec[0].to_string();
                let slot = *by_id.entry(id.clone()).or_insert_with(|| {
                    raws.push(RawSeries { id, stamps: Vec::new(), rows: Vec::new(), first_row: row });
                    raws.len() - 1
                });
                let raw = &mut raws[slot];
                if let Some(&prev) = raw.stamps.last() {
                    if ts <= prev {
                        return Err(Error::Parse {
                            location: loc(row),
                            detail: format!("timestamp {} of series `{}` does not increase (previous {})", ts, raw.id, prev),
                        });
                    }
                }
                raw.stamps.push(ts);
                raw.rows.push(vec![parse_value(&rec[2])]);
            }
        }
    }

    let mut series = Vec::with_capacity(raws.len());
    let mut report = LoadReport::default();
    for raw in raws {
        for (i, w) in raw.stamps.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Parse {
                    location: loc(raw.first_row + i + 1),
                    detail: format!("timestamp {} does not increase (previous {})", w[1], w[0]),
                });
            }
        }
        let (ts, rep) = finish_series(raw)?;
        series.push(ts);
        report.series.push(rep);
    }
    Ok((series, report))
}

fn finish_series(raw: RawSeries) -> Result<(TimeSeries, SeriesLoadReport)> {
    let n = raw.rows.len();
    let d = raw.rows.first().map(|r| r.len()).unwrap_or(0);
    let mut values = vec![0.0; n * d];
    let mut imputed = 0;
    for c in 0..d {
        let first = raw.rows.iter().find_map(|r| r[c]);
        let Some(mut last) = first else {
            return Err(Error::Data(format!("series `{}` channel {} has no observed values", raw.id, c)));
        };
        for (i, r) in raw.rows.iter().enumerate() {
            match r[c] {
                Some(v) => last = v,
                None => imputed += 1,
            }
            values[i * d + c] = last;
        }
    }

    let deltas: Vec<f64> = raw.stamps.windows(2).map(|w| w[1] - w[0]).collect();
    let mut counts: Vec<(f64, usize)> = Vec::new();
    for &dl in &deltas {
        match counts.iter_mut().find(|(v, _)| (*v - dl).abs() <= 1e-9 * v.abs().max(1.0)) {
            Some(slot) => slot.1 += 1,
            None => counts.push((dl, 1)),
        }
    }
    let modal = counts.iter().max_by_key(|(_, c)| *c).map(|(v, _)| *v);
    let irregular = modal.map(|m| deltas.len() - counts.iter().find(|(v, _)| *v == m).map(|x| x.1).unwrap_or(0)).unwrap_or(0);
    let frequency = modal.map(|m| format!("step={m}")).unwrap_or_else(|| "unknown".into());

    let rep = SeriesLoadReport { id: raw.id.clone(), length: n, channels: d, imputed, irregular_gaps: irregular };
    let ts = TimeSeries { id: raw.id, channel: 0, values: Tensor::new(&[n, d], values)?, frequency };
    Ok((ts, rep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_row_single_channel() {
        let f = write("timestamp,ch0\n0,1.0\n1,2.0\n2,3.0\n");
        let (series, report) = load_csv(f.path(), CsvLayout::Wide).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].len(), 3);
        assert_eq!(series[0].channels(), 1);
        assert_eq!(report.imputed(), 0);
    }

    #[test]
    fn interior_gap_is_forward_filled() {
        let f = write("timestamp,ch0\n0,1.0\n1,\n2,3.0\n");
        let (series, report) = load_csv(f.path(), CsvLayout::Wide).unwrap();
        assert_eq!(series[0].channel_values(0), vec![1.0, 1.0, 3.0]);
        assert_eq!(report.imputed(), 1);
    }

    #[test]
    fn decreasing_timestamp_names_the_row() {
        let f = write("timestamp,ch0\n0,1.0\n2,2.0\n1,3.0\n");
        let err = load_csv(f.path(), CsvLayout::Wide).unwrap_err();
        match err {
            Error::Parse { location, .. } => assert!(location.ends_with(":4"), "{location}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn all_missing_channel_is_a_data_error() {
        let f = write("timestamp,ch0,ch1\n0,1.0,\n1,2.0,nan\n");
        assert!(matches!(load_csv(f.path(), CsvLayout::Wide), Err(Error::Data(_))));
    }

    #[test]
    fn long_layout_groups_series_and_checks_order() {
        let f = write("series_id,timestamp,value\na,0,1\na,1,2\nb,0,5\nb,1,6\nb,2,7\n");
        let (series, _) = load_csv(f.path(), CsvLayout::Long).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[1].id, "b");
        assert_eq!(series[1].channel_values(0), vec![5.0, 6.0, 7.0]);

        let bad = write("series_id,timestamp,value\na,0,1\na,0,2\n");
        let err = load_csv(bad.path(), CsvLayout::Long).unwrap_err().to_string();
        assert!(err.contains(":3"), "{err}");
    }

    #[test]
    fn datetime_stamps_and_gap_count() {
        let f = write("timestamp,ch0\n2024-01-01 00:00:00,1\n2024-01-01 01:00:00,2\n2024-01-01 03:00:00,3\n2024-01-01 04:00:00,4\n");
        let (series, report) = load_csv(f.path(), CsvLayout::Wide).unwrap();
        assert_eq!(series[0].frequency, "step=3600");
        assert_eq!(report.irregular_gaps(), 1);
    }

    #[test]
    fn decompose_keeps_identity() {
        let ts = TimeSeries {
            id: "x".into(),
            channel: 0,
            values: Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(),
            frequency: "unknown".into(),
        };
        let parts = decompose_channels(&ts);
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[2].channel, 2);
        assert_eq!(parts[2].channel_values(0), vec![3.0, 6.0]);
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `T × V` multivariate series stored row-major (one row per timestep),
/// with optional point-wise anomaly labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    values: Vec<f64>,
    len: usize,
    dim: usize,
    labels: Option<Vec<u8>>,
    names: Vec<String>,
}

impl RawSeries {
    pub fn new(values: Vec<f64>, dim: usize, labels: Option<Vec<u8>>, names: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("series needs at least one variable".into()));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::Data(format!(
                "{} values do not form rows of {dim} variables",
                values.len()
            )));
        }
        let len = values.len() / dim;
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::Data(format!("{} labels for {len} timesteps", l.len())));
            }
            if l.iter().any(|&x| x > 1) {
                return Err(Error::Data("labels must be 0 or 1".into()));
            }
        }
        if names.len() != dim {
            return Err(Error::Data(format!("{} names for {dim} variables", names.len())));
        }
        Ok(Self {
            values,
            len,
            dim,
            labels,
            names,
        })
    }

    /// Series with generated names `x0, x1, ...`.
    pub fn unnamed(values: Vec<f64>, dim: usize, labels: Option<Vec<u8>>) -> Result<Self> {
        let names = (0..dim).map(|i| format!("x{i}")).collect();
        Self::new(values, dim, labels, names)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.dim + v]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn with_labels(mut self, labels: Option<Vec<u8>>) -> Result<Self> {
        let names = std::mem::take(&mut self.names);
        Self::new(self.values, self.dim, labels, names)
    }

    /// Contiguous timestep range `[start, end)`.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len {
            return Err(Error::Data(format!("time range [{start},{end}) of {}", self.len)));
        }
        Self::new(
            self.values[start * self.dim..end * self.dim].to_vec(),
            self.dim,
            self.labels.as_ref().map(|l| l[start..end].to_vec()),
            self.names.clone(),
        )
    }

    /// Keep only the listed variables, in order.
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        if keep.iter().any(|&k| k >= self.dim) {
            return Err(Error::Data(format!("variable index out of range for dim {}", self.dim)));
        }
        let mut values = Vec::with_capacity(self.len * keep.len());
        for t in 0..self.len {
            values.extend(keep.iter().map(|&k| self.at(t, k)));
        }
        let names = keep.iter().map(|&k| self.names[k].clone()).collect();
        Self::new(values, keep.len(), self.labels.clone(), names)
    }

    /// Population variance of variable `v`.
    pub fn variance(&self, v: usize) -> f64 {
        let n = self.len as f64;
        let mean = (0..self.len).map(|t| self.at(t, v)).sum::<f64>() / n;
        (0..self.len).map(|t| (self.at(t, v) - mean).powi(2)).sum::<f64>() / n
    }

    /// Reads a CSV with a header row, one column per variable and an
    /// optional trailing `label` column.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let has_label = headers.last().map(|h| h == "label").unwrap_or(false);
        let dim = headers.len() - usize::from(has_label);
        if dim == 0 {
            return Err(Error::Data("CSV has no variable columns".into()));
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != headers.len() {
                return Err(Error::Data(format!("row {} has {} fields", row + 1, rec.len())));
            }
            for i in 0..dim {
                let x: f64 = rec[i].trim().parse().map_err(|_| {
                    Error::Data(format!("row {}, column {}: not a number: {:?}", row + 1, i, &rec[i]))
                })?;
                if !x.is_finite() {
                    return Err(Error::Data(format!("row {}, column {i}: non-finite value", row + 1)));
                }
                values.push(x);
            }
            if has_label {
                let l = match rec[dim].trim() {
                    "0" | "0.0" => 0,
                    "1" | "1.0" => 1,
                    other => return Err(Error::Data(format!("row {}: label {other:?} not in {{0,1}}", row + 1))),
                };
                labels.push(l);
            }
        }
        Self::new(values, dim, has_label.then_some(labels), headers[..dim].to_vec())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = self.names.clone();
        if self.labels.is_some() {
            header.push("label".into());
        }
        wtr.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for t in 0..self.len {
            rec.clear();
            rec.extend((0..self.dim).map(|v| format!("{}", self.at(t, v))));
            if let Some(l) = &self.labels {
                rec.push(l[t].to_string());
            }
            wtr.write_record(&rec)?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Drops variables with zero variance on `train` from `train` and every
/// series in `others`, returning the masked series and the removed indices.
pub fn remove_constant_channels(train: &RawSeries, others: &[RawSeries]) -> Result<(RawSeries, Vec<RawSeries>, Vec<usize>)> {
    if train.is_empty() {
        return Err(Error::Data("training series is empty".into()));
    }
    let removed: Vec<usize> = (0..train.dim()).filter(|&v| train.variance(v) == 0.0).collect();
    let keep: Vec<usize> = (0..train.dim()).filter(|v| !removed.contains(v)).collect();
    if keep.is_empty() {
        return Err(Error::Data("every channel is constant on the training split".into()));
    }
    let masked_others = others
        .iter()
        .map(|s| {
            if s.dim() != train.dim() {
                return Err(Error::Data(format!("series has {} variables, training has {}", s.dim(), train.dim())));
            }
            s.select(&keep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((train.select(&keep)?, masked_others, removed))
}

/// Applies a previously computed removal mask to a series of `raw_dim` variables.
pub fn apply_channel_mask(series: &RawSeries, raw_dim: usize, removed: &[usize]) -> Result<RawSeries> {
    if series.dim() != raw_dim {
        return Err(Error::Incompatible(format!(
            "series has {} variables, checkpoint expects {raw_dim}",
            series.dim()
        )));
    }
    let keep: Vec<usize> = (0..raw_dim).filter(|v| !removed.contains(v)).collect();
    series.select(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_labels() {
        let s = RawSeries::unnamed(vec![1.0, 2.5, -3.0, 4.0], 2, Some(vec![0, 1])).unwrap();
        let text = s.to_csv_string().unwrap();
        assert!(text.starts_with("x0,x1,label\n"));
        let back = RawSeries::from_reader(text.as_bytes()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn csv_without_label_column() {
        let s = RawSeries::from_reader("a,b\n1,2\n3,4\n".as_bytes()).unwrap();
        assert_eq!(s.dim(), 2);
        assert!(s.labels().is_none());
        assert_eq!(s.names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn bad_label_rejected() {
        assert!(RawSeries::from_reader("a,label\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn no_constant_channel_is_unchanged() {
        let s = RawSeries::unnamed(vec![1.0, 2.0, 3.0, 5.0], 2, None).unwrap();
        let (m, _, removed) = remove_constant_channels(&s, &[]).unwrap();
        assert_eq!(m, s);
        assert!(removed.is_empty());
    }

    #[test]
    fn constant_channel_removed_from_train_and_test() {
        let train = RawSeries::unnamed(vec![7.0, 1.0, 7.0, 2.0, 7.0, 3.0], 2, None).unwrap();
        let test = RawSeries::unnamed(vec![1.0, 9.0, 2.0, 8.0], 2, None).unwrap();
        let (tr, others, removed) = remove_constant_channels(&train, &[test]).unwrap();
        assert_eq!(removed, vec![0]);
        assert_eq!(tr.values(), &[1.0, 2.0, 3.0]);
        assert_eq!(others[0].values(), &[9.0, 8.0]);
    }

    #[test]
    fn all_constant_is_an_error() {
        let s = RawSeries::unnamed(vec![1.0, 1.0, 1.0], 1, None).unwrap();
        assert!(remove_constant_channels(&s, &[]).is_err());
    }

    #[test]
    fn msl_constant_indices_leave_33_channels() {
        let constant = [1, 4, 8, 10, 18, 21, 22, 24, 25, 26, 30, 32, 34, 36, 37, 38, 40, 42, 44, 50, 51, 52];
        let t = 4;
        let values = (0..t * 55)
            .map(|i| {
                let (row, v) = (i / 55, i % 55);
                if constant.contains(&v) {
                    0.5
                } else {
                    (row * 55 + v) as f64
                }
            })
            .collect();
        let s = RawSeries::unnamed(values, 55, None).unwrap();
        let (m, _, removed) = remove_constant_channels(&s, &[]).unwrap();
        assert_eq!(removed, constant.to_vec());
        assert_eq!(m.dim(), 33);
    }
}

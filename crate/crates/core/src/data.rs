//! Supervised regression datasets: loading, standardization, splitting and
//! the homogeneous (features, label) representation used by the matcher.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Dense regression data with its norm bounds.
///
/// `feature_bound` is the largest row norm of `features` and `label_bound`
/// the largest label magnitude; both are recomputed whenever rows change.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
    pub feature_bound: f64,
    pub label_bound: f64,
}

impl RegressionDataset {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Empty("dataset has no rows".into()));
        }
        if features.ncols() == 0 {
            return Err(Error::Empty("dataset has no feature columns".into()));
        }
        if labels.len() != features.nrows() {
            return Err(Error::Dimension {
                expected: features.nrows(),
                got: labels.len(),
            });
        }
        let (feature_bound, label_bound) = bounds(&features, &labels);
        Ok(Self {
            features,
            labels,
            feature_bound,
            label_bound,
        })
    }

    /// Builds a dataset from homogeneous rows `(x, y)`; the last column is the label.
    pub fn from_homogeneous(z: &DMatrix<f64>) -> Result<Self> {
        if z.ncols() < 2 {
            return Err(Error::InvalidArgument(
                "homogeneous rows need at least one feature and a label".into(),
            ));
        }
        let d = z.ncols() - 1;
        let features = z.columns(0, d).into_owned();
        let labels = z.column(d).into_owned();
        Self::new(features, labels)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("row selection is empty".into()));
        }
        let features = self.features.select_rows(rows.iter());
        let labels = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.labels[i]));
        Self::new(features, labels)
    }

    pub fn homogenize(&self) -> DMatrix<f64> {
        homogenize(self)
    }
}

fn bounds(features: &DMatrix<f64>, labels: &DVector<f64>) -> (f64, f64) {
    let feature_bound = features
        .row_iter()
        .map(|r| r.norm())
        .fold(0.0_f64, f64::max);
    let label_bound = labels.iter().map(|y| y.abs()).fold(0.0_f64, f64::max);
    (feature_bound, label_bound)
}

/// Stacks `(x_i, y_i)` into the rows of an `n × (d+1)` matrix.
pub fn homogenize(ds: &RegressionDataset) -> DMatrix<f64> {
    let (n, d) = (ds.n(), ds.d());
    let mut z = DMatrix::zeros(n, d + 1);
    z.columns_mut(0, d).copy_from(&ds.features);
    z.column_mut(d).copy_from(&ds.labels);
    z
}

/// File layouts understood by [`load_csv_regression`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Semicolon-delimited with a header; the label column is `quality` and must be last.
    Wine,
    /// Whitespace-delimited, 14 numeric columns, label last (MEDV).
    Housing,
    /// Comma-delimited; `label_column` indexes the label (negative values count from the end).
    Generic { has_header: bool, label_column: i64 },
}

impl DataFormat {
    pub fn generic_label_last(has_header: bool) -> Self {
        DataFormat::Generic {
            has_header,
            label_column: -1,
        }
    }
}

pub fn load_csv_regression(path: impl AsRef<Path>, format: &DataFormat) -> Result<RegressionDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_regression(BufReader::new(file), format)
}

/// Parses regression rows from any reader. Row indices in errors are zero-based data rows.
pub fn parse_regression<R: Read>(reader: R, format: &DataFormat) -> Result<RegressionDataset> {
    match format {
        DataFormat::Wine => parse_delimited(reader, b';', true, LabelSpec::Named("quality")),
        DataFormat::Generic {
            has_header,
            label_column,
        } => parse_delimited(reader, b',', *has_header, LabelSpec::Index(*label_column)),
        DataFormat::Housing => parse_whitespace(reader, 14),
    }
}

enum LabelSpec {
    Named(&'static str),
    Index(i64),
}

fn parse_delimited<R: Read>(
    reader: R,
    delimiter: u8,
    has_header: bool,
    label: LabelSpec,
) -> Result<RegressionDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut width = None;
    let mut label_idx = None;
    if has_header {
        let headers = rdr.headers()?.clone();
        width = Some(headers.len());
        if let LabelSpec::Named(name) = label {
            let pos = headers
                .iter()
                .position(|h| h.trim_matches('"').eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::Parse {
                    row: 0,
                    message: format!("header has no `{name}` column"),
                })?;
            if pos + 1 != headers.len() {
                return Err(Error::Parse {
                    row: 0,
                    message: format!("`{name}` must be the last column"),
                });
            }
            label_idx = Some(pos);
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Parse {
                row,
                message: format!("expected {w} columns, found {}", record.len()),
            });
        }
        rows.push(parse_fields(record.iter(), row)?);
    }
    let width = width.unwrap_or(0);
    if rows.is_empty() {
        return Err(Error::Empty("no data rows".into()));
    }
    if width < 2 {
        return Err(Error::Parse {
            row: 0,
            message: "need at least one feature and one label column".into(),
        });
    }
    let label_idx = match (label_idx, label) {
        (Some(i), _) => i,
        (None, LabelSpec::Index(i)) => resolve_index(i, width)?,
        (None, LabelSpec::Named(name)) => {
            return Err(Error::Parse {
                row: 0,
                message: format!("no header to locate `{name}`"),
            })
        }
    };
    assemble(rows, label_idx)
}

fn parse_whitespace<R: Read>(reader: R, columns: usize) -> Result<RegressionDataset> {
    let mut rows = Vec::new();
    for (row, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != columns {
            return Err(Error::Parse {
                row,
                message: format!("expected {columns} columns, found {}", fields.len()),
            });
        }
        rows.push(parse_fields(fields.into_iter(), row)?);
    }
    if rows.is_empty() {
        return Err(Error::Empty("no data rows".into()));
    }
    assemble(rows, columns - 1)
}

fn parse_fields<'a>(fields: impl Iterator<Item = &'a str>, row: usize) -> Result<Vec<f64>> {
    fields
        .map(|f| {
            f.trim().parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("unparsable number `{f}`"),
            })
        })
        .collect()
}

fn resolve_index(i: i64, width: usize) -> Result<usize> {
    let idx = if i < 0 { width as i64 + i } else { i };
    if idx < 0 || idx as usize >= width {
        return Err(Error::InvalidArgument(format!(
            "label column {i} out of range for {width} columns"
        )));
    }
    Ok(idx as usize)
}

fn assemble(rows: Vec<Vec<f64>>, label_idx: usize) -> Result<RegressionDataset> {
    let n = rows.len();
    let width = rows[0].len();
    let d = width - 1;
    let mut features = DMatrix::zeros(n, d);
    let mut labels = DVector::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        let mut c = 0;
        for (j, &v) in row.iter().enumerate() {
            if j == label_idx {
                labels[i] = v;
            } else {
                features[(i, c)] = v;
                c += 1;
            }
        }
    }
    RegressionDataset::new(features, labels)
}

/// Per-column statistics over the homogeneous columns (features then label).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant columns.
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

impl StandardizationParams {
    pub fn transform(&self, ds: &RegressionDataset) -> Result<RegressionDataset> {
        crate::error::check_dim(self.mean.len(), ds.d() + 1)?;
        let mut z = homogenize(ds);
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.mean[j]) / self.std[j]);
        }
        RegressionDataset::from_homogeneous(&z)
    }

    pub fn inverse_transform(&self, ds: &RegressionDataset) -> Result<RegressionDataset> {
        crate::error::check_dim(self.mean.len(), ds.d() + 1)?;
        let mut z = homogenize(ds);
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.apply(|v| *v = *v * self.std[j] + self.mean[j]);
        }
        RegressionDataset::from_homogeneous(&z)
    }
}

/// Centers every column and scales non-constant columns to unit population stddev.
pub fn standardize(ds: &RegressionDataset) -> Result<(RegressionDataset, StandardizationParams)> {
    if ds.n() < 2 {
        return Err(Error::InvalidArgument(
            "standardization needs at least two rows".into(),
        ));
    }
    let z = homogenize(ds);
    let n = z.nrows() as f64;
    let mut mean = Vec::with_capacity(z.ncols());
    let mut std = Vec::with_capacity(z.ncols());
    let mut constant = Vec::with_capacity(z.ncols());
    for col in z.column_iter() {
        let mu = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let sd = var.sqrt();
        let is_const = col.iter().all(|&v| v == col[0]) || sd <= f64::EPSILON * mu.abs().max(1.0);
        mean.push(mu);
        std.push(if is_const { 1.0 } else { sd });
        constant.push(is_const);
    }
    let params = StandardizationParams {
        mean,
        std,
        constant,
    };
    let out = params.transform(ds)?;
    Ok((out, params))
}

/// Shuffles rows under `seed` and splits off `⌊n·f⌋` test rows; train keeps the rest.
pub fn train_test_split(
    ds: &RegressionDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(RegressionDataset, RegressionDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = ds.n();
    let n_test = split_test_size(n, test_fraction);
    if n_test == 0 || n_test == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} rows at fraction {test_fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let (train_idx, test_idx) = order.split_at(n - n_test);
    Ok((ds.select_rows(train_idx)?, ds.select_rows(test_idx)?))
}

/// Test-side size of a split: `⌊n·f⌋`, guarded against representation error
/// (e.g. `0.29 · 100` evaluating just below 29).
pub fn split_test_size(n: usize, test_fraction: f64) -> usize {
    (n as f64 * test_fraction + 1e-9).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn ds(rows: &[&[f64]], labels: &[f64]) -> RegressionDataset {
        let d = rows[0].len();
        let features = DMatrix::from_row_iterator(rows.len(), d, rows.iter().flat_map(|r| r.iter().copied()));
        RegressionDataset::new(features, DVector::from_row_slice(labels)).unwrap()
    }

    #[test]
    fn generic_two_rows_label_last() {
        let d = parse_regression("1,2\n3,4".as_bytes(), &DataFormat::generic_label_last(false)).unwrap();
        assert_eq!(d.features, DMatrix::from_row_slice(2, 1, &[1.0, 3.0]));
        assert_eq!(d.labels, DVector::from_row_slice(&[2.0, 4.0]));
        assert_eq!(d.feature_bound, 3.0);
        assert_eq!(d.label_bound, 4.0);
    }

    #[test]
    fn generic_label_in_middle_with_header() {
        let fmt = DataFormat::Generic {
            has_header: true,
            label_column: 1,
        };
        let d = parse_regression("a,y,b\n1,9,2\n3,8,4\n".as_bytes(), &fmt).unwrap();
        assert_eq!(d.features, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(d.labels.as_slice(), &[9.0, 8.0]);
    }

    #[test]
    fn malformed_rows_report_index() {
        let err = parse_regression("1,2\n3,4,5\n".as_bytes(), &DataFormat::generic_label_last(false)).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }), "{err}");
        let err = parse_regression("1,2\n3,x\n".as_bytes(), &DataFormat::generic_label_last(false)).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }), "{err}");
    }

    #[test]
    fn empty_input_is_error() {
        let err = parse_regression("".as_bytes(), &DataFormat::generic_label_last(false)).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
        let err = parse_regression("\n\n".as_bytes(), &DataFormat::Housing).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn wine_header_and_semicolons() {
        let text = "\"a\";\"b\";\"quality\"\n1.5;2;5\n0;1;6\n";
        let d = parse_regression(text.as_bytes(), &DataFormat::Wine).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.d(), 2);
        assert_eq!(d.labels.as_slice(), &[5.0, 6.0]);
        let bad = "\"quality\";\"a\"\n1;2\n";
        assert!(parse_regression(bad.as_bytes(), &DataFormat::Wine).is_err());
    }

    #[test]
    fn housing_requires_fourteen_columns() {
        let row: String = (0..14).map(|i| format!(" {i}.5")).collect();
        let d = parse_regression(format!("{row}\n{row}\n").as_bytes(), &DataFormat::Housing).unwrap();
        assert_eq!((d.n(), d.d()), (2, 13));
        assert_eq!(d.labels[0], 13.5);
        assert!(parse_regression(" 1 2 3\n".as_bytes(), &DataFormat::Housing).is_err());
    }

    #[test]
    fn standardize_two_point_column() {
        let d = ds(&[&[1.0], &[3.0]], &[0.0, 2.0]);
        let (s, p) = standardize(&d).unwrap();
        assert_eq!(s.features.as_slice(), &[-1.0, 1.0]);
        assert_eq!(s.labels.as_slice(), &[-1.0, 1.0]);
        assert_eq!(p.constant, vec![false, false]);
    }

    #[test]
    fn standardize_constant_column() {
        let d = ds(&[&[5.0, 1.0], &[5.0, 2.0], &[5.0, 3.0]], &[1.0, 1.0, 2.0]);
        let (s, p) = standardize(&d).unwrap();
        assert_eq!(s.features.column(0).as_slice(), &[0.0, 0.0, 0.0]);
        assert!(p.constant[0]);
        assert_eq!(p.std[0], 1.0);
        assert!(!p.constant[1]);
    }

    #[test]
    fn standardize_needs_two_rows() {
        let d = ds(&[&[1.0]], &[1.0]);
        assert!(standardize(&d).is_err());
    }

    #[test]
    fn standardize_round_trip() {
        let mut rng = rng_from_seed(3);
        let n = 40;
        let f = DMatrix::from_fn(n, 4, |_, j| rng.gen_range(-5.0..5.0) * (j + 1) as f64 + 10.0);
        let y = DVector::from_fn(n, |_, _| rng.gen_range(3.0..9.0));
        let d = RegressionDataset::new(f, y).unwrap();
        let (s, p) = standardize(&d).unwrap();
        for col in homogenize(&s).column_iter() {
            let mu = col.mean();
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            assert_abs_diff_eq!(mu, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
        }
        let back = p.inverse_transform(&s).unwrap();
        assert!((homogenize(&back) - homogenize(&d)).amax() < 1e-10);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let f = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let d = RegressionDataset::new(f, DVector::from_fn(10, |i, _| i as f64)).unwrap();
        let (tr, te) = train_test_split(&d, 0.2, 11).unwrap();
        assert_eq!((tr.n(), te.n()), (8, 2));
        let (tr2, te2) = train_test_split(&d, 0.2, 11).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        let mut all: Vec<f64> = tr.labels.iter().chain(te.labels.iter()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let d = ds(&[&[1.0], &[2.0], &[3.0]], &[1.0, 2.0, 3.0]);
        assert!(train_test_split(&d, 0.0, 1).is_err());
        assert!(train_test_split(&d, 1.0, 1).is_err());
        assert!(train_test_split(&d, -0.5, 1).is_err());
    }

    #[test]
    fn split_rounding_rule() {
        assert_eq!(split_test_size(1599, 0.2), 319);
        assert_eq!(split_test_size(506, 0.2), 101);
        assert_eq!(split_test_size(100, 0.29), 29);
    }

    #[test]
    fn seeds_give_different_permutations() {
        let f = DMatrix::from_fn(50, 1, |i, _| i as f64);
        let d = RegressionDataset::new(f, DVector::zeros(50)).unwrap();
        let splits: Vec<Vec<f64>> = (0..20)
            .map(|s| train_test_split(&d, 0.2, s).unwrap().1.features.as_slice().to_vec())
            .collect();
        for i in 0..splits.len() {
            for j in i + 1..splits.len() {
                assert_ne!(splits[i], splits[j], "seeds {i} and {j} collide");
            }
        }
    }

    #[test]
    fn homogenize_appends_label() {
        let d = ds(&[&[1.0, 2.0]], &[3.0]);
        assert_eq!(homogenize(&d), DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]));
        let zero = RegressionDataset::new(DMatrix::zeros(3, 2), DVector::zeros(3)).unwrap();
        assert_eq!(homogenize(&zero), DMatrix::zeros(3, 3));
    }

    #[test]
    fn residual_identity() {
        let mut rng = rng_from_seed(9);
        for _ in 0..100 {
            let d = 5;
            let x = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let v = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let y: f64 = rng.gen_range(-2.0..2.0);
            let z = homogenize(&RegressionDataset::new(DMatrix::from_row_slice(1, d, x.as_slice()), DVector::from_element(1, y)).unwrap());
            let mut r = v.clone().insert_row(d, -1.0);
            r[d] = -1.0;
            let lhs = (z.row(0) * &r)[0];
            assert_abs_diff_eq!(lhs, v.dot(&x) - y, epsilon = 1e-12);
        }
    }
}

//! Encounter records and their CSV representation.
//!
//! A dataset file has the columns `id`, `time`, `y`, any number of `w_`
//! columns (transition covariates) and any number of `a_` columns
//! (shift-susceptible covariates). Column order is irrelevant; columns are
//! matched by name.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Result, TracerError};
use crate::glm::DesignMatrix;

pub const W_PREFIX: &str = "w_";
pub const A_PREFIX: &str = "a_";

/// Observed records. There is deliberately no field for the latent
/// transition state: simulated truth lives in [`crate::simulation::GroundTruth`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    time: Vec<i64>,
    y: Vec<u8>,
    w: DMatrix<f64>,
    a: DMatrix<f64>,
    w_names: Vec<String>,
    a_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        ids: Vec<String>,
        time: Vec<i64>,
        y: Vec<u8>,
        w: DMatrix<f64>,
        a: DMatrix<f64>,
        w_names: Vec<String>,
        a_names: Vec<String>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(TracerError::Schema("dataset has no rows".into()));
        }
        if time.len() != n || y.len() != n || w.nrows() != n || a.nrows() != n {
            return Err(TracerError::Dimension(format!(
                "ids={n}, time={}, y={}, w rows={}, a rows={}",
                time.len(),
                y.len(),
                w.nrows(),
                a.nrows()
            )));
        }
        if w.ncols() != w_names.len() || a.ncols() != a_names.len() {
            return Err(TracerError::Dimension("column names do not match matrices".into()));
        }
        if let Some(i) = y.iter().position(|v| *v > 1) {
            return Err(TracerError::Schema(format!("row {i}: y must be 0 or 1")));
        }
        for (m, what) in [(&w, "w"), (&a, "a")] {
            if let Some(k) = m.iter().position(|v| !v.is_finite()) {
                return Err(TracerError::Schema(format!(
                    "non-finite {what} value at row {}, column {}",
                    k % n,
                    k / n
                )));
            }
        }
        Ok(Self {
            ids,
            time,
            y,
            w,
            a,
            w_names,
            a_names,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim_w(&self) -> usize {
        self.w.ncols()
    }

    pub fn dim_a(&self) -> usize {
        self.a.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn time(&self) -> &[i64] {
        &self.time
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn y_f64(&self) -> Vec<f64> {
        self.y.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn w_names(&self) -> &[String] {
        &self.w_names
    }

    pub fn a_names(&self) -> &[String] {
        &self.a_names
    }

    pub fn w_row(&self, i: usize) -> Vec<f64> {
        self.w.row(i).iter().copied().collect()
    }

    pub fn a_row(&self, i: usize) -> Vec<f64> {
        self.a.row(i).iter().copied().collect()
    }

    /// Outcome-model feature names: intercept, then `A`, then `W`.
    pub fn outcome_feature_names(&self) -> Vec<String> {
        outcome_feature_names(&self.a_names, &self.w_names)
    }

    /// `[1, A, W]`, intercept at column 0.
    pub fn outcome_design(&self) -> DesignMatrix {
        let n = self.len();
        let (da, dw) = (self.dim_a(), self.dim_w());
        let mut m = DMatrix::from_element(n, 1 + da + dw, 1.0);
        m.columns_mut(1, da).copy_from(&self.a);
        m.columns_mut(1 + da, dw).copy_from(&self.w);
        DesignMatrix::new(m, self.outcome_feature_names(), Some(0))
            .expect("validated dataset yields a valid design")
    }

    /// `[1, W]`, intercept at column 0.
    pub fn transition_design(&self) -> DesignMatrix {
        DesignMatrix::with_intercept(&self.w, &self.w_names)
            .expect("validated dataset yields a valid design")
    }

    pub fn has_both_classes(&self) -> bool {
        self.y.iter().any(|&v| v == 1) && self.y.iter().any(|&v| v == 0)
    }

    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let pick_rows = |m: &DMatrix<f64>| DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)]);
        Dataset::new(
            idx.iter().map(|&i| self.ids[i].clone()).collect(),
            idx.iter().map(|&i| self.time[i]).collect(),
            idx.iter().map(|&i| self.y[i]).collect(),
            pick_rows(&self.w),
            pick_rows(&self.a),
            self.w_names.clone(),
            self.a_names.clone(),
        )
    }

    /// Rows of `self` followed by rows of `other`; feature layouts must match.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.w_names != other.w_names || self.a_names != other.a_names {
            return Err(TracerError::Schema(
                "cannot concatenate datasets with different feature columns".into(),
            ));
        }
        let stack = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
            m.rows_mut(0, a.nrows()).copy_from(a);
            m.rows_mut(a.nrows(), b.nrows()).copy_from(b);
            m
        };
        Dataset::new(
            self.ids.iter().chain(&other.ids).cloned().collect(),
            self.time.iter().chain(&other.time).copied().collect(),
            self.y.iter().chain(&other.y).copied().collect(),
            stack(&self.w, &other.w),
            stack(&self.a, &other.a),
            self.w_names.clone(),
            self.a_names.clone(),
        )
    }

    /// Reorders feature columns to the given layout, failing with the full
    /// list of missing and unexpected columns on mismatch.
    pub fn align_to(&self, w_names: &[String], a_names: &[String]) -> Result<Dataset> {
        let mut missing = Vec::new();
        let mut extra = Vec::new();
        for (want, have) in [(w_names, &self.w_names), (a_names, &self.a_names)] {
            missing.extend(want.iter().filter(|n| !have.contains(n)).cloned());
            extra.extend(have.iter().filter(|n| !want.contains(n)).cloned());
        }
        if !missing.is_empty() || !extra.is_empty() {
            return Err(TracerError::Schema(format!(
                "feature mismatch: missing columns {missing:?}, unexpected columns {extra:?}"
            )));
        }
        let reorder = |m: &DMatrix<f64>, have: &[String], want: &[String]| {
            let idx: Vec<usize> = want
                .iter()
                .map(|n| have.iter().position(|h| h == n).expect("checked above"))
                .collect();
            DMatrix::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
        };
        Dataset::new(
            self.ids.clone(),
            self.time.clone(),
            self.y.clone(),
            reorder(&self.w, &self.w_names, w_names),
            reorder(&self.a, &self.a_names, a_names),
            w_names.to_vec(),
            a_names.to_vec(),
        )
    }

    /// Values of a named feature column, if present.
    pub fn feature(&self, name: &str) -> Option<Vec<f64>> {
        if let Some(j) = self.w_names.iter().position(|n| n == name) {
            return Some(self.w.column(j).iter().copied().collect());
        }
        self.a_names
            .iter()
            .position(|n| n == name)
            .map(|j| self.a.column(j).iter().copied().collect())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| TracerError::io(path, e))?;
        Self::from_reader(file).map_err(|e| match e {
            TracerError::Schema(msg) => TracerError::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let mut missing = Vec::new();
        let (id_col, time_col, y_col) = (find("id"), find("time"), find("y"));
        for (c, name) in [(id_col, "id"), (time_col, "time"), (y_col, "y")] {
            if c.is_none() {
                missing.push(name);
            }
        }
        if !missing.is_empty() {
            return Err(TracerError::Schema(format!("missing required columns {missing:?}")));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = headers.iter().find(|h| !seen.insert(h.as_str())) {
            return Err(TracerError::Schema(format!("duplicate column {dup:?}")));
        }
        let unknown: Vec<&String> = headers
            .iter()
            .filter(|h| {
                !matches!(h.as_str(), "id" | "time" | "y")
                    && !h.starts_with(W_PREFIX)
                    && !h.starts_with(A_PREFIX)
            })
            .collect();
        if !unknown.is_empty() {
            return Err(TracerError::Schema(format!("unknown columns {unknown:?}")));
        }
        let w_cols: Vec<usize> = (0..headers.len()).filter(|&j| headers[j].starts_with(W_PREFIX)).collect();
        let a_cols: Vec<usize> = (0..headers.len()).filter(|&j| headers[j].starts_with(A_PREFIX)).collect();
        let (id_col, time_col, y_col) = (id_col.unwrap(), time_col.unwrap(), y_col.unwrap());

        let mut ids = Vec::new();
        let mut time = Vec::new();
        let mut y = Vec::new();
        let mut w_vals = Vec::new();
        let mut a_vals = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = r + 1;
            let field = |j: usize| -> Result<&str> {
                let v = rec.get(j).unwrap_or("").trim();
                if v.is_empty() || v.eq_ignore_ascii_case("na") || v.eq_ignore_ascii_case("nan") {
                    Err(TracerError::Schema(format!(
                        "missing value at data row {row}, column {:?}",
                        headers[j]
                    )))
                } else {
                    Ok(v)
                }
            };
            let bad = |j: usize, v: &str| {
                TracerError::Schema(format!(
                    "unparseable value {v:?} at data row {row}, column {:?}",
                    headers[j]
                ))
            };
            ids.push(field(id_col)?.to_string());
            let t = field(time_col)?;
            time.push(t.parse::<i64>().map_err(|_| bad(time_col, t))?);
            let yv = field(y_col)?;
            y.push(match yv {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad(y_col, yv)),
            });
            for &j in &w_cols {
                let v = field(j)?;
                let x: f64 = v.parse().map_err(|_| bad(j, v))?;
                if !x.is_finite() {
                    return Err(bad(j, v));
                }
                w_vals.push(x);
            }
            for &j in &a_cols {
                let v = field(j)?;
                let x: f64 = v.parse().map_err(|_| bad(j, v))?;
                if !x.is_finite() {
                    return Err(bad(j, v));
                }
                a_vals.push(x);
            }
        }
        let n = ids.len();
        Dataset::new(
            ids,
            time,
            y,
            DMatrix::from_row_slice(n, w_cols.len(), &w_vals),
            DMatrix::from_row_slice(n, a_cols.len(), &a_vals),
            w_cols.iter().map(|&j| headers[j].clone()).collect(),
            a_cols.iter().map(|&j| headers[j].clone()).collect(),
        )
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| TracerError::io(path, e))?;
        self.to_writer(file)
    }

    /// Writes `id,time,y,w_...,a_...`; floats use the shortest decimal form
    /// that parses back to the same bits.
    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "time".to_string(), "y".to_string()];
        header.extend(self.w_names.iter().cloned());
        header.extend(self.a_names.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].clone(), self.time[i].to_string(), self.y[i].to_string()];
            rec.extend(self.w.row(i).iter().map(|v| format_float(*v)));
            rec.extend(self.a.row(i).iter().map(|v| format_float(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| TracerError::io("<csv writer>", e))?;
        Ok(())
    }
}

pub fn outcome_feature_names(a_names: &[String], w_names: &[String]) -> Vec<String> {
    let mut names = vec!["(intercept)".to_string()];
    names.extend(a_names.iter().cloned());
    names.extend(w_names.iter().cloned());
    names
}

/// Shortest round-trip decimal representation.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "y,a_x,id,time,w_age\n1,0.5,r1,3,1.25\n0,-2,r2,4,0.1\n";

    #[test]
    fn parses_columns_by_prefix_in_any_order() {
        let d = Dataset::from_reader(SAMPLE.as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.w_names(), ["w_age"]);
        assert_eq!(d.a_names(), ["a_x"]);
        assert_eq!(d.y(), [1, 0]);
        assert_eq!(d.a()[(1, 0)], -2.0);
        let x = d.outcome_design();
        assert_eq!(x.column_names(), ["(intercept)", "a_x", "w_age"]);
        assert_eq!(x.row(0), vec![1.0, 0.5, 1.25]);
    }

    #[test]
    fn missing_value_reports_row_and_column() {
        let bad = "id,time,y,w_a\nr1,1,1,\n";
        let err = Dataset::from_reader(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 1") && err.contains("w_a"), "{err}");
    }

    #[test]
    fn rejects_unknown_and_missing_columns() {
        let err = Dataset::from_reader("id,time,y,z\nr,1,1,2\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("unknown"), "{err}");
        let err = Dataset::from_reader("id,y\nr,1\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("time"), "{err}");
        let err = Dataset::from_reader("id,time,y\nr,1,2\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("unparseable"), "{err}");
    }

    #[test]
    fn write_then_read_is_identical() {
        let d = Dataset::from_reader(SAMPLE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        d.to_writer(&mut buf).unwrap();
        let back = Dataset::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, d);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id,time,y,w_age,a_x\n"));
    }

    #[test]
    fn align_reports_mismatch() {
        let d = Dataset::from_reader(SAMPLE.as_bytes()).unwrap();
        let err = d
            .align_to(&["w_age".into(), "w_sex".into()], &["a_x".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("w_sex"), "{err}");
    }
}

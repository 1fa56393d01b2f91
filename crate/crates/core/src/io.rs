//! CSV and JSON artifacts.
//!
//! Tables have an integer index column followed by real columns written with 17
//! significant digits, so values read back bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::staging::StageReport;

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Writes `header` then one row per `(index, values)`.
pub fn write_table<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = (usize, Vec<f64>)>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for (index, values) in rows {
        if values.len() + 1 != header.len() {
            return Err(Error::Invalid(format!(
                "{}: row {index} has {} columns, header has {}",
                path.display(),
                values.len() + 1,
                header.len()
            )));
        }
        let mut record = Vec::with_capacity(header.len());
        record.push(index.to_string());
        record.extend(values.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let header = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let parse_error = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut rows = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        let mut fields = record.iter();
        let index = fields
            .next()
            .ok_or_else(|| parse_error(line, "empty row".into()))?
            .parse()
            .map_err(|e| parse_error(line, format!("{e}")))?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_error(line, format!("{e}: `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((index, values));
    }
    Ok(Table { header, rows })
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

/// `k,x1,...,xn`.
pub fn write_trajectory_csv(path: &Path, states: &[DVector<f64>]) -> Result<()> {
    let n = states.first().map_or(0, |s| s.len());
    let header: Vec<String> = std::iter::once("k".to_string()).chain(numbered("x", n)).collect();
    write_table(path, &header, states.iter().enumerate().map(|(k, s)| (k, s.as_slice().to_vec())))
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<DVector<f64>>> {
    let table = read_table(path)?;
    table
        .rows
        .into_iter()
        .enumerate()
        .map(|(i, (k, values))| {
            if k != i {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("expected step {i}, found {k}"),
                });
            }
            Ok(DVector::from_vec(values))
        })
        .collect()
}

/// `m,rho` for `m = 0..=num_stages`.
pub fn write_cumulative_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let header = ["m".to_string(), "rho".to_string()];
    write_table(path, &header, curve.iter().enumerate().map(|(m, r)| (m, vec![*r])))
}

pub fn read_cumulative_csv(path: &Path) -> Result<Vec<f64>> {
    Ok(read_table(path)?.rows.into_iter().map(|(_, v)| v[0]).collect())
}

/// `stage,lambda1,lambda2,rho,omega,resA,resL`; reports without λ are skipped.
pub fn write_homotopy_csv(path: &Path, reports: &[StageReport]) -> Result<()> {
    let header: Vec<String> = ["stage", "lambda1", "lambda2", "rho", "omega", "resA", "resL"]
        .map(String::from)
        .to_vec();
    let rows = reports.iter().filter_map(|r| {
        let l = r.lambda?;
        Some((
            r.index,
            vec![l[0], l[1], r.rho, r.omega, r.residual_norm, r.lambda_residual.unwrap_or(0.0)],
        ))
    });
    write_table(path, &header, rows)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = match n {
            0 => return None,
            _ if n % 2 == 1 => v[n / 2],
            _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        };
        Some(Stats {
            min: v[0],
            median,
            max: v[n - 1],
        })
    }
}

/// Run digest written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub steps: usize,
    pub stages: usize,
    /// ρ over the whole horizon with every stage's own matrix.
    pub final_rho: Option<f64>,
    /// First entry of the cumulative curve, when there is one.
    pub initial_rho: Option<f64>,
    pub stage_rho: Option<Stats>,
    pub stages_below_0_9: usize,
    pub converged_stages: usize,
    pub all_converged: bool,
    pub seed: u64,
}

impl Summary {
    pub fn new(mode: &str, steps: usize, reports: &[StageReport], cumulative: &[f64], final_rho: Option<f64>, seed: u64) -> Self {
        let rhos: Vec<f64> = reports.iter().map(|r| r.rho).collect();
        let converged_stages = reports.iter().filter(|r| r.converged).count();
        Summary {
            mode: mode.to_string(),
            steps,
            stages: reports.len(),
            final_rho: final_rho.or_else(|| cumulative.last().copied()),
            initial_rho: cumulative.first().copied(),
            stage_rho: Stats::of(&rhos),
            stages_below_0_9: rhos.iter().filter(|r| **r < 0.9).count(),
            converged_stages,
            all_converged: converged_stages == reports.len(),
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(Stats::of(&[3.0, 1.0, 2.0]).unwrap().median, 2.0);
        assert_eq!(Stats::of(&[4.0, 1.0, 2.0, 3.0]).unwrap().median, 2.5);
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn trajectory_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let states = vec![DVector::from_vec(vec![0.1, -2.0, 3e-300]), DVector::from_vec(vec![1.0, 2.0, 3.0])];
        write_trajectory_csv(&path, &states).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("k,x1,x2,x3\n0,1.0000000000000001e-1,"));
        assert_eq!(read_trajectory_csv(&path).unwrap(), states);
    }

    #[test]
    fn malformed_table_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "k,x1\n0,1.0\n1,abc\n").unwrap();
        let err = read_trajectory_csv(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(matches!(read_table(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn cumulative_round_trip(curve in prop::collection::vec(-1e300f64..1e300, 0..20)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.csv");
            write_cumulative_csv(&path, &curve).unwrap();
            prop_assert_eq!(read_cumulative_csv(&path).unwrap(), curve);
        }
    }
}

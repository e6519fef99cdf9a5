//! Curve tables: a header `id,<t_1>,...,<t_T>` followed by one sample per
//! row.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rfflr::{CurveSet, TimeGrid};

use crate::error::{CliError, Result};

/// Shortest decimal literal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_cell(name: &str, row: usize, col: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| CliError::input(format!("{name}: row {row}, column {col}: cannot parse `{cell}` as a number")))?;
    if !v.is_finite() {
        return Err(CliError::input(format!("{name}: row {row}, column {col}: value `{cell}` is not finite")));
    }
    Ok(v)
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Parse a curve table; `name` labels error messages.
pub fn read_curves_from(reader: impl Read, name: &str) -> Result<CurveSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| CliError::input(format!("{name}: {e}")))?,
        None => return Err(CliError::input(format!("{name}: file is empty"))),
    };
    if header.get(0).map(str::trim) != Some("id") {
        return Err(CliError::input(format!("{name}: row 1, column 1: header must start with `id`")));
    }
    let width = header.len();
    if width < 3 {
        return Err(CliError::input(format!("{name}: row 1: at least two time points are needed")));
    }
    let mut times = Vec::with_capacity(width - 1);
    for (j, cell) in header.iter().enumerate().skip(1) {
        let t = parse_cell(name, 1, j + 1, cell)?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(CliError::input(format!(
                    "{name}: row 1, column {}: time {t} does not exceed the previous time {prev}",
                    j + 1
                )));
            }
        }
        times.push(t);
    }
    let grid = TimeGrid::new(times).map_err(|e| CliError::input(format!("{name}: row 1: {e}")))?;

    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    let mut values = Vec::new();
    for (i, rec) in records.enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| CliError::input(format!("{name}: row {row}: {e}")))?;
        if rec.len() != width {
            return Err(CliError::input(format!(
                "{name}: row {row}: expected {width} columns, found {}",
                rec.len()
            )));
        }
        let id = rec[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(CliError::input(format!("{name}: row {row}, column 1: duplicate id `{id}`")));
        }
        ids.push(id);
        for (j, cell) in rec.iter().enumerate().skip(1) {
            values.push(parse_cell(name, row, j + 1, cell)?);
        }
    }
    if ids.is_empty() {
        return Err(CliError::input(format!("{name}: no data rows")));
    }
    let samples = DMatrix::from_row_slice(ids.len(), width - 1, &values);
    Ok(CurveSet::new(grid, samples, ids)?)
}

pub fn read_curves(path: &Path) -> Result<CurveSet> {
    read_curves_from(open(path)?, &path.display().to_string())
}

pub fn write_curves_to(mut writer: impl Write, curves: &CurveSet) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(&mut writer);
    let mut header = vec!["id".to_string()];
    header.extend(curves.grid().points().iter().map(|&t| fmt_f64(t)));
    wtr.write_record(&header)?;
    for (i, id) in curves.ids().iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(curves.samples().row(i).iter().map(|&v| fmt_f64(v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()
}

pub fn write_curves(path: &Path, curves: &CurveSet) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    write_curves_to(std::io::BufWriter::new(file), curves)
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

/// Long-format series `id,t,value`, grouped by id in order of appearance.
pub struct Series {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn read_series_from(reader: impl Read, name: &str) -> Result<Vec<Series>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| CliError::input(format!("{name}: {e}")))?,
        None => return Err(CliError::input(format!("{name}: file is empty"))),
    };
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols != ["id", "t", "value"] {
        return Err(CliError::input(format!("{name}: row 1: header must be `id,t,value`")));
    }
    let mut out: Vec<Series> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (i, rec) in records.enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| CliError::input(format!("{name}: row {row}: {e}")))?;
        if rec.len() != 3 {
            return Err(CliError::input(format!("{name}: row {row}: expected 3 columns, found {}", rec.len())));
        }
        let id = rec[0].trim().to_string();
        let t = parse_cell(name, row, 2, &rec[1])?;
        let v = parse_cell(name, row, 3, &rec[2])?;
        let k = *index.entry(id.clone()).or_insert_with(|| {
            out.push(Series { id, times: Vec::new(), values: Vec::new() });
            out.len() - 1
        });
        let s = &mut out[k];
        if let Some(&prev) = s.times.last() {
            if t <= prev {
                return Err(CliError::input(format!(
                    "{name}: row {row}, column 2: time {t} of series `{}` does not exceed {prev}",
                    s.id
                )));
            }
        }
        s.times.push(t);
        s.values.push(v);
    }
    if out.is_empty() {
        return Err(CliError::input(format!("{name}: no data rows")));
    }
    Ok(out)
}

/// `id,outlier` with 0/1 flags.
pub fn write_flags(path: &Path, ids: &[String], flags: &[bool]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::Failed(format!("{}: {e}", path.display()));
    wtr.write_record(["id", "outlier"]).map_err(io)?;
    for (id, &f) in ids.iter().zip(flags) {
        wtr.write_record([id.as_str(), if f { "1" } else { "0" }]).map_err(io)?;
    }
    wtr.flush().map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

pub fn read_flags(path: &Path) -> Result<Vec<bool>> {
    let name = path.display().to_string();
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut flags = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::input(format!("{name}: row {}: {e}", i + 2)))?;
        flags.push(match rec.get(1).map(str::trim) {
            Some("1") => true,
            Some("0") => false,
            other => {
                return Err(CliError::input(format!("{name}: row {}, column 2: expected 0 or 1, got {other:?}", i + 2)))
            }
        });
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<CurveSet> {
        read_curves_from(text.as_bytes(), "t.csv")
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let text = "id,0.0,0.5,1.0\na,1.0,-2.5,3.0000000000000004\nb,1e-7,0.1,12345.678\n";
        let curves = parse(text).unwrap();
        let mut out = Vec::new();
        write_curves_to(&mut out, &curves).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn ragged_rows_are_rejected_with_their_row() {
        let err = parse("id,0,0.5,1\na,1,2,3\nb,1,2\n").unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn non_monotone_header_is_rejected() {
        let err = parse("id,0,1,0.5\na,1,2,3\n").unwrap_err();
        assert!(err.to_string().contains("row 1, column 4"), "{err}");
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let err = parse("id,0,0.5,1\na,1,2,3\nb,1,x,3\n").unwrap_err();
        assert!(err.to_string().contains("row 3, column 3"), "{err}");
    }

    #[test]
    fn series_are_grouped_by_id() {
        let s = read_series_from("id,t,value\na,0,1\nb,0,2\na,1,3\n".as_bytes(), "s.csv").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].times, vec![0.0, 1.0]);
        assert_eq!(s[1].values, vec![2.0]);
        assert!(read_series_from("id,t,value\na,1,1\na,0,2\n".as_bytes(), "s.csv").is_err());
    }
}

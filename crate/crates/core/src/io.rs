//! CSV path files. Single paths use the header `t,v1,...,vd`; ensembles add
//! a leading `path_id` column. Reals are written with 17 significant digits.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::path_space::{validate_grid, Grid, SamplePath};

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn header(dim: usize, with_id: bool) -> Vec<String> {
    let mut h = Vec::with_capacity(dim + 2);
    if with_id {
        h.push("path_id".to_string());
    }
    h.push("t".to_string());
    h.extend((1..=dim).map(|j| format!("v{j}")));
    h
}

pub fn write_path_csv<W: Write>(path: &SamplePath, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(path.dim(), false))?;
    for i in 0..path.len() {
        let mut rec = vec![fmt_real(path.time(i))];
        rec.extend(path.value(i).iter().map(|&v| fmt_real(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ensemble_csv<W: Write>(paths: &[SamplePath], out: W) -> Result<()> {
    let dim = paths.first().map_or(1, |p| p.dim());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(dim, true))?;
    for (id, path) in paths.iter().enumerate() {
        for i in 0..path.len() {
            let mut rec = vec![id.to_string(), fmt_real(path.time(i))];
            rec.extend(path.value(i).iter().map(|&v| fmt_real(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_cell(s: &str, line: u64) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: not a number: {s:?}")))
}

fn dim_from_header(h: &csv::StringRecord, with_id: bool) -> Result<usize> {
    let skip = if with_id { 2 } else { 1 };
    let ok_prefix = if with_id {
        h.get(0) == Some("path_id") && h.get(1) == Some("t")
    } else {
        h.get(0) == Some("t")
    };
    if !ok_prefix || h.len() <= skip {
        return Err(Error::Parse(format!("unexpected header {:?}", h)));
    }
    Ok(h.len() - skip)
}

pub fn read_path_csv<R: Read>(input: R) -> Result<SamplePath> {
    let mut r = csv::Reader::from_reader(input);
    let dim = dim_from_header(r.headers()?, false)?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        times.push(parse_cell(&rec[0], line)?);
        for j in 0..dim {
            values.push(parse_cell(&rec[1 + j], line)?);
        }
    }
    if times.is_empty() {
        return Err(Error::InvalidPath("path file contains no rows".into()));
    }
    SamplePath::new(times, values, dim)
}

/// Paths must appear in contiguous `path_id` blocks and share one grid.
pub fn read_ensemble_csv<R: Read>(input: R) -> Result<Vec<SamplePath>> {
    let mut r = csv::Reader::from_reader(input);
    let dim = dim_from_header(r.headers()?, true)?;
    let mut blocks: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[0].trim().to_string();
        if blocks.last().map(|b| &b.0) != Some(&id) {
            if blocks.iter().any(|b| b.0 == id) {
                return Err(Error::Parse(format!("line {line}: path_id {id} is not contiguous")));
            }
            blocks.push((id, Vec::new(), Vec::new()));
        }
        let b = blocks.last_mut().unwrap();
        b.1.push(parse_cell(&rec[1], line)?);
        for j in 0..dim {
            b.2.push(parse_cell(&rec[2 + j], line)?);
        }
    }
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidPath("ensemble file contains no paths".into()))?;
    validate_grid(&first.1)?;
    let grid: Grid = Arc::from(first.1.as_slice());
    blocks
        .into_iter()
        .map(|(id, times, values)| {
            if times.as_slice() != &*grid {
                return Err(Error::GridMismatch(format!("path {id} uses a different grid")));
            }
            SamplePath::new(grid.clone(), values, dim)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_round_trip_is_exact() {
        let p = SamplePath::new(
            vec![0.0, 0.1, 1.0 / 3.0],
            vec![1e-300, -2.5, std::f64::consts::PI, 0.0, 7.0, -1.0 / 7.0],
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_path_csv(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,v1,v2\n"));
        let q = read_path_csv(buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn ensemble_round_trip() {
        let a = SamplePath::scalar(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 0.0]).unwrap();
        let b = a.with_values(vec![2.0, -1.0, 0.25], 1).unwrap();
        let mut buf = Vec::new();
        write_ensemble_csv(&[a.clone(), b.clone()], &mut buf).unwrap();
        let back = read_ensemble_csv(buf.as_slice()).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(read_path_csv("t,v1\n".as_bytes()).is_err());
        assert!(read_ensemble_csv("path_id,t,v1\n".as_bytes()).is_err());
        assert!(read_path_csv("x,y\n0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_real(0.1), "1.0000000000000001e-1");
    }
}

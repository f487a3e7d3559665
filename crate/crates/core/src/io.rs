//! Text formats for scans, stimulus timings, dense matrices and JSON files.
//!
//! - scan: `bold <T> <N> <tr>` then T rows of N values
//! - stimuli: `task <name>` blocks of `onset duration [amplitude]` lines
//! - matrix: `matrix <rows> <cols>` then one row per line
//!
//! Blank lines and lines starting with `#` are skipped everywhere.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::preprocess::{Event, ScanData, Stimulus};

fn records<R: BufRead>(r: R) -> impl Iterator<Item = Result<(usize, Vec<String>)>> {
    r.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(Error::from(e))),
        Ok(l) => {
            let t = l.trim();
            if t.is_empty() || t.starts_with('#') {
                None
            } else {
                Some(Ok((
                    i + 1,
                    t.split_whitespace().map(str::to_owned).collect(),
                )))
            }
        }
    })
}

fn num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("bad number `{s}`")))
}

fn read_rows<R: BufRead>(r: R, tag: &str) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut it = records(r);
    let (ln, head) = it
        .next()
        .ok_or_else(|| Error::parse(0, format!("missing `{tag}` header")))??;
    if head[0] != tag || head.len() < 3 {
        return Err(Error::parse(
            ln,
            format!("expected `{tag} <rows> <cols> ...` header"),
        ));
    }
    let rows: usize = num(&head[1], ln)?;
    let cols: usize = num(&head[2], ln)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for rec in it {
        let (ln, f) = rec?;
        if f.len() != cols {
            return Err(Error::parse(
                ln,
                format!("expected {cols} values, found {}", f.len()),
            ));
        }
        for s in &f {
            data.push(num::<f64>(s, ln)?);
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::parse(
            0,
            format!("header declares {rows} rows, found {seen}"),
        ));
    }
    Ok((head, DMatrix::from_row_slice(rows, cols, &data)))
}

fn write_rows<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn read_matrix<R: BufRead>(r: R) -> Result<DMatrix<f64>> {
    let (head, m) = read_rows(r, "matrix")?;
    if head.len() != 3 {
        return Err(Error::parse(1, "expected `matrix <rows> <cols>`"));
    }
    Ok(m)
}

pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    writeln!(w, "matrix {} {}", m.nrows(), m.ncols())?;
    write_rows(&mut w, m)
}

/// Columns as a `rows × columns.len()` matrix.
pub fn columns_to_matrix(columns: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let rows = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != rows) {
        return Err(Error::DimensionMismatch("columns differ in length".into()));
    }
    Ok(DMatrix::from_fn(rows, columns.len(), |i, j| columns[j][i]))
}

pub fn read_bold<R: BufRead>(r: R) -> Result<ScanData> {
    let (head, y) = read_rows(r, "bold")?;
    if head.len() != 4 {
        return Err(Error::parse(1, "expected `bold <T> <N> <tr>`"));
    }
    ScanData::new(y, num(&head[3], 1)?)
}

pub fn write_bold<W: Write>(mut w: W, scan: &ScanData) -> Result<()> {
    writeln!(
        w,
        "bold {} {} {}",
        scan.n_time(),
        scan.n_locations(),
        scan.tr
    )?;
    write_rows(&mut w, &scan.y)
}

pub fn read_stimuli<R: BufRead>(r: R) -> Result<Vec<Stimulus>> {
    let mut out: Vec<Stimulus> = Vec::new();
    for rec in records(r) {
        let (ln, f) = rec?;
        if f[0] == "task" {
            if f.len() != 2 {
                return Err(Error::parse(ln, "expected `task <name>`"));
            }
            out.push(Stimulus {
                name: f[1].clone(),
                events: Vec::new(),
            });
            continue;
        }
        let s = out
            .last_mut()
            .ok_or_else(|| Error::parse(ln, "event before the first `task` line"))?;
        if f.len() != 2 && f.len() != 3 {
            return Err(Error::parse(ln, "expected `onset duration [amplitude]`"));
        }
        let amplitude = if f.len() == 3 { num(&f[2], ln)? } else { 1.0 };
        s.events.push(Event {
            onset: num(&f[0], ln)?,
            duration: num(&f[1], ln)?,
            amplitude,
        });
    }
    if out.is_empty() {
        return Err(Error::parse(0, "no tasks"));
    }
    Ok(out)
}

pub fn write_stimuli<W: Write>(mut w: W, stimuli: &[Stimulus]) -> Result<()> {
    for s in stimuli {
        if s.name.split_whitespace().count() != 1 {
            return Err(Error::Validation(format!(
                "task name {:?} must be one word",
                s.name
            )));
        }
        writeln!(w, "task {}", s.name)?;
        for e in &s.events {
            if e.amplitude == 1.0 {
                writeln!(w, "{} {}", e.onset, e.duration)?;
            } else {
                writeln!(w, "{} {} {}", e.onset, e.duration, e.amplitude)?;
            }
        }
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn save_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_matrix(open(path.as_ref())?)
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    save_with(path.as_ref(), |w| write_matrix(w, m))
}

pub fn load_bold(path: impl AsRef<Path>) -> Result<ScanData> {
    read_bold(open(path.as_ref())?)
}

pub fn save_bold(path: impl AsRef<Path>, scan: &ScanData) -> Result<()> {
    save_with(path.as_ref(), |w| write_bold(w, scan))
}

pub fn load_stimuli(path: impl AsRef<Path>) -> Result<Vec<Stimulus>> {
    read_stimuli(open(path.as_ref())?)
}

pub fn save_stimuli(path: impl AsRef<Path>, stimuli: &[Stimulus]) -> Result<()> {
    save_with(path.as_ref(), |w| write_stimuli(w, stimuli))
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(open(path.as_ref())?)?)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    save_with(path.as_ref(), |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

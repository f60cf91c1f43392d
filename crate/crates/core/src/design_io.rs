//! Text serialization of a synthesized design.
//!
//! Self-describing line format, UTF-8, reals at 17 significant digits so
//! round trips reproduce every f64 bit-exactly.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::contraction::{ContractionDesign, TightenedMargins};

const MAGIC: &str = "contraction-design v1";

#[derive(Debug, Error)]
pub enum DesignIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_design<W: std::io::Write>(
    design: &ContractionDesign,
    margins: &TightenedMargins,
    out: &mut W,
) -> Result<(), DesignIoError> {
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "beta {}", fmt(design.beta))?;
    writeln!(out, "r {}", fmt(design.r))?;
    writeln!(out, "alpha {}", fmt(design.alpha))?;
    writeln!(out, "sigma {}", fmt(design.sigma))?;
    match design.kappa_hat {
        Some(k) => writeln!(out, "kappa_hat {}", fmt(k))?,
        None => writeln!(out, "kappa_hat none")?,
    }
    write_matrix(out, "K", &design.k)?;
    write_matrix(out, "Z", &design.z)?;
    writeln!(out, "horizon {}", margins.horizon())?;
    for (k, c) in margins.c_hat.iter().enumerate() {
        write_vector(out, &format!("c_hat {k}"), c)?;
    }
    for (k, d) in margins.d_hat.iter().enumerate() {
        write_vector(out, &format!("d_hat {k}"), d)?;
    }
    Ok(())
}

fn write_matrix<W: std::io::Write>(
    out: &mut W,
    name: &str,
    m: &DMatrix<f64>,
) -> Result<(), DesignIoError> {
    writeln!(out, "{name} {} {}", m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt(m[(i, j)])).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

fn write_vector<W: std::io::Write>(
    out: &mut W,
    name: &str,
    v: &DVector<f64>,
) -> Result<(), DesignIoError> {
    let vals: Vec<String> = v.iter().map(|x| fmt(*x)).collect();
    writeln!(out, "{name} {}", vals.join(" "))?;
    Ok(())
}

struct Lines<'a> {
    it: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str, DesignIoError> {
        loop {
            let line = self
                .it
                .next()
                .ok_or_else(|| DesignIoError::Parse("unexpected end of file".into()))?;
            self.line_no += 1;
            if !line.trim().is_empty() {
                return Ok(line.trim());
            }
        }
    }

    fn err(&self, msg: &str) -> DesignIoError {
        DesignIoError::Parse(format!("line {}: {msg}", self.line_no))
    }
}

fn parse_f64(s: &str, lines: &Lines) -> Result<f64, DesignIoError> {
    s.parse::<f64>()
        .map_err(|_| lines.err(&format!("bad number '{s}'")))
}

fn expect_key<'a>(lines: &mut Lines<'a>, key: &str) -> Result<&'a str, DesignIoError> {
    let line = lines.next()?;
    line.strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| lines.err(&format!("expected '{key}', got '{line}'")))
}

fn read_matrix(lines: &mut Lines, key: &str) -> Result<DMatrix<f64>, DesignIoError> {
    let dims = expect_key(lines, key)?;
    let parts: Vec<&str> = dims.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(lines.err("expected '<rows> <cols>'"));
    }
    let nrows: usize = parts[0].parse().map_err(|_| lines.err("bad row count"))?;
    let ncols: usize = parts[1].parse().map_err(|_| lines.err("bad col count"))?;
    let mut m = DMatrix::zeros(nrows, ncols);
    for i in 0..nrows {
        let row = lines.next()?;
        let vals: Vec<&str> = row.split_whitespace().collect();
        if vals.len() != ncols {
            return Err(lines.err(&format!("expected {ncols} entries")));
        }
        for (j, v) in vals.iter().enumerate() {
            m[(i, j)] = parse_f64(v, lines)?;
        }
    }
    Ok(m)
}

fn read_vector(lines: &mut Lines, key: &str) -> Result<DVector<f64>, DesignIoError> {
    let rest = expect_key(lines, key)?;
    let vals: Result<Vec<f64>, _> = rest
        .split_whitespace()
        .map(|v| parse_f64(v, lines))
        .collect();
    Ok(DVector::from_vec(vals?))
}

pub fn read_design(text: &str) -> Result<(ContractionDesign, TightenedMargins), DesignIoError> {
    let mut lines = Lines {
        it: text.lines(),
        line_no: 0,
    };
    let magic = lines.next()?;
    if magic != MAGIC {
        return Err(lines.err(&format!("unrecognized header '{magic}'")));
    }
    let beta = parse_f64(expect_key(&mut lines, "beta")?, &lines)?;
    let r = parse_f64(expect_key(&mut lines, "r")?, &lines)?;
    let alpha = parse_f64(expect_key(&mut lines, "alpha")?, &lines)?;
    let sigma = parse_f64(expect_key(&mut lines, "sigma")?, &lines)?;
    let kappa_raw = expect_key(&mut lines, "kappa_hat")?;
    let kappa_hat = if kappa_raw == "none" {
        None
    } else {
        Some(parse_f64(kappa_raw, &lines)?)
    };
    let k = read_matrix(&mut lines, "K")?;
    let z = read_matrix(&mut lines, "Z")?;
    let horizon: usize = expect_key(&mut lines, "horizon")?
        .parse()
        .map_err(|_| lines.err("bad horizon"))?;
    let mut c_hat = Vec::with_capacity(horizon + 1);
    for kk in 0..=horizon {
        c_hat.push(read_vector(&mut lines, &format!("c_hat {kk}"))?);
    }
    let mut d_hat = Vec::with_capacity(horizon);
    for kk in 0..horizon {
        d_hat.push(read_vector(&mut lines, &format!("d_hat {kk}"))?);
    }
    Ok((
        ContractionDesign {
            k,
            beta,
            z,
            r,
            alpha,
            sigma,
            kappa_hat,
        },
        TightenedMargins { c_hat, d_hat },
    ))
}

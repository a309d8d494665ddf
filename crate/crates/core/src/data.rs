//! Linked two-source records, validation, and CSV ingestion.
//!
//! One record per unit of the primary study: selection indicator `r`,
//! treatment `z`, outcome `y`, fully observed covariates `x`, and the extra
//! covariate block `v`, which exists exactly when the unit is linked
//! (`r = 1`). The dataset is stored column-wise so that resampling and design
//! construction stay allocation-light.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeFamily {
    Continuous,
    Binary,
}

impl std::str::FromStr for OutcomeFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(OutcomeFamily::Continuous),
            "binary" => Ok(OutcomeFamily::Binary),
            other => Err(Error::Validation(format!("unknown outcome family `{other}`"))),
        }
    }
}

/// Owned record used to build datasets. `v.is_some()` is the selection
/// indicator, so `r` and the presence of `v` cannot disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedRecord {
    pub z: bool,
    pub y: f64,
    pub x: Vec<f64>,
    pub v: Option<Vec<f64>>,
}

impl LinkedRecord {
    pub fn linked(z: bool, y: f64, x: Vec<f64>, v: Vec<f64>) -> Self {
        LinkedRecord { z, y, x, v: Some(v) }
    }

    pub fn unlinked(z: bool, y: f64, x: Vec<f64>) -> Self {
        LinkedRecord { z, y, x, v: None }
    }

    pub fn r(&self) -> bool {
        self.v.is_some()
    }
}

/// Borrowed view of one row of a [`LinkedDataset`].
#[derive(Debug, Clone, Copy)]
pub struct Record<'a> {
    pub index: usize,
    pub z: bool,
    pub y: f64,
    pub x: &'a [f64],
    pub v: Option<&'a [f64]>,
}

impl Record<'_> {
    pub fn r(&self) -> bool {
        self.v.is_some()
    }

    pub fn z_f64(&self) -> f64 {
        if self.z {
            1.0
        } else {
            0.0
        }
    }

    pub fn r_f64(&self) -> f64 {
        if self.r() {
            1.0
        } else {
            0.0
        }
    }

    pub fn to_owned(&self) -> LinkedRecord {
        LinkedRecord {
            z: self.z,
            y: self.y,
            x: self.x.to_vec(),
            v: self.v.map(<[f64]>::to_vec),
        }
    }
}

/// Immutable, validated collection of linked records.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedDataset {
    family: OutcomeFamily,
    p: usize,
    q: usize,
    z: Vec<bool>,
    y: Vec<f64>,
    x: Vec<f64>,
    v: Vec<f64>,
    linked: Vec<bool>,
    n_linked: usize,
}

fn check_record(rec: &LinkedRecord, p: usize, q: usize, family: OutcomeFamily) -> std::result::Result<(), String> {
    if rec.x.len() != p {
        return Err(format!("expected {p} x values, found {}", rec.x.len()));
    }
    if let Some(v) = &rec.v {
        if v.len() != q {
            return Err(format!("expected {q} v values, found {}", v.len()));
        }
        if v.iter().any(|a| !a.is_finite()) {
            return Err("non-finite v value".into());
        }
    }
    if rec.x.iter().any(|a| !a.is_finite()) {
        return Err("non-finite x value".into());
    }
    if !rec.y.is_finite() {
        return Err("non-finite outcome".into());
    }
    if family == OutcomeFamily::Binary && rec.y != 0.0 && rec.y != 1.0 {
        return Err(format!("binary outcome must be 0 or 1, found {}", rec.y));
    }
    Ok(())
}

impl LinkedDataset {
    /// Builds and validates a dataset from owned records.
    pub fn from_records(records: Vec<LinkedRecord>, p: usize, q: usize, family: OutcomeFamily) -> Result<Self> {
        let n = records.len();
        let mut ds = LinkedDataset {
            family,
            p,
            q,
            z: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            x: Vec::with_capacity(n * p),
            v: Vec::with_capacity(n * q),
            linked: Vec::with_capacity(n),
            n_linked: 0,
        };
        for (i, rec) in records.into_iter().enumerate() {
            check_record(&rec, p, q, family).map_err(|m| Error::Validation(format!("record {i}: {m}")))?;
            ds.push(rec);
        }
        ds.check_support()?;
        Ok(ds)
    }

    /// Builds a dataset from records that are valid by construction, without
    /// the support check (callers run [`LinkedDataset::check_support`]).
    pub(crate) fn from_unchecked(records: Vec<LinkedRecord>, p: usize, q: usize, family: OutcomeFamily) -> Self {
        let n = records.len();
        let mut ds = LinkedDataset {
            family,
            p,
            q,
            z: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            x: Vec::with_capacity(n * p),
            v: Vec::with_capacity(n * q),
            linked: Vec::with_capacity(n),
            n_linked: 0,
        };
        for rec in records {
            debug_assert!(check_record(&rec, p, q, family).is_ok());
            ds.push(rec);
        }
        ds
    }

    fn push(&mut self, rec: LinkedRecord) {
        self.z.push(rec.z);
        self.y.push(rec.y);
        self.x.extend_from_slice(&rec.x);
        match rec.v {
            Some(v) => {
                self.v.extend_from_slice(&v);
                self.linked.push(true);
                self.n_linked += 1;
            }
            None => {
                self.v.extend(std::iter::repeat_n(0.0, self.q));
                self.linked.push(false);
            }
        }
    }

    /// Positivity support: some linked records, and both arms among them.
    pub fn check_support(&self) -> Result<()> {
        if self.n_linked == 0 {
            return Err(Error::Degenerate("no linked records (r = 1)".into()));
        }
        let treated = (0..self.len()).filter(|&i| self.linked[i] && self.z[i]).count();
        if treated == 0 || treated == self.n_linked {
            return Err(Error::Degenerate(
                "linked subset contains a single treatment arm".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn family(&self) -> OutcomeFamily {
        self.family
    }

    pub fn n_linked(&self) -> usize {
        self.n_linked
    }

    pub fn record(&self, i: usize) -> Record<'_> {
        Record {
            index: i,
            z: self.z[i],
            y: self.y[i],
            x: &self.x[i * self.p..(i + 1) * self.p],
            v: self.linked[i].then(|| &self.v[i * self.q..(i + 1) * self.q]),
        }
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = Record<'_>> + '_ {
        (0..self.len()).map(move |i| self.record(i))
    }

    /// Indices of linked records.
    pub fn linked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.linked[i]).collect()
    }

    /// Dataset made of the given rows (with repetition), as used by the
    /// pairs bootstrap. Fails if the selection loses positivity support.
    pub fn select(&self, rows: &[usize]) -> Result<LinkedDataset> {
        let mut ds = LinkedDataset {
            family: self.family,
            p: self.p,
            q: self.q,
            z: Vec::with_capacity(rows.len()),
            y: Vec::with_capacity(rows.len()),
            x: Vec::with_capacity(rows.len() * self.p),
            v: Vec::with_capacity(rows.len() * self.q),
            linked: Vec::with_capacity(rows.len()),
            n_linked: 0,
        };
        for &i in rows {
            ds.z.push(self.z[i]);
            ds.y.push(self.y[i]);
            ds.x.extend_from_slice(&self.x[i * self.p..(i + 1) * self.p]);
            ds.v.extend_from_slice(&self.v[i * self.q..(i + 1) * self.q]);
            ds.linked.push(self.linked[i]);
            ds.n_linked += usize::from(self.linked[i]);
        }
        ds.check_support()?;
        Ok(ds)
    }

    /// Same records with every outcome multiplied by `c`.
    pub fn scale_outcome(&self, c: f64) -> LinkedDataset {
        let mut ds = self.clone();
        ds.y.iter_mut().for_each(|y| *y *= c);
        ds
    }

    pub fn header(&self) -> String {
        let mut h = String::from("r,z,y");
        for j in 1..=self.p {
            let _ = write!(h, ",x{j}");
        }
        for j in 1..=self.q {
            let _ = write!(h, ",v{j}");
        }
        h
    }

    /// Writes the dataset in the CSV interchange format (LF line endings,
    /// shortest round-trip float formatting).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.header())?;
        for rec in self.records() {
            let mut line = format!("{},{},{}", u8::from(rec.r()), u8::from(rec.z), rec.y);
            for a in rec.x {
                let _ = write!(line, ",{a}");
            }
            match rec.v {
                Some(v) => {
                    for a in v {
                        let _ = write!(line, ",{a}");
                    }
                }
                None => line.push_str(&",".repeat(self.q)),
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn parse_header(fields: &csv::StringRecord) -> Result<(usize, usize)> {
    let bad = |msg: String| Error::Parse { line: 1, msg };
    let names: Vec<&str> = fields.iter().map(str::trim).collect();
    if names.len() < 3 || names[0] != "r" || names[1] != "z" || names[2] != "y" {
        return Err(bad("header must start with `r,z,y`".into()));
    }
    let mut p = 0;
    let mut q = 0;
    for name in &names[3..] {
        if q == 0 && *name == format!("x{}", p + 1) {
            p += 1;
        } else if *name == format!("v{}", q + 1) {
            q += 1;
        } else {
            return Err(bad(format!("unexpected column `{name}`")));
        }
    }
    Ok((p, q))
}

fn parse_indicator(s: &str, name: &str, line: u64) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse {
            line,
            msg: format!("`{name}` must be 0 or 1, found `{other}`"),
        }),
    }
}

fn parse_float(s: &str, name: &str, line: u64) -> Result<f64> {
    let a: f64 = s.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("`{name}` is not a number: `{s}`"),
    })?;
    if !a.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("`{name}` is not finite"),
        });
    }
    Ok(a)
}

/// Reads a dataset in the `r,z,y,x1..xp,v1..vq` CSV schema.
pub fn read_csv<R: Read>(reader: R, family: OutcomeFamily) -> Result<LinkedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let (p, q) = parse_header(header)?;
    let width = 3 + p + q;
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("expected {width} fields, found {}", row.len()),
            });
        }
        let cell = |j: usize| row.get(j).unwrap_or("").trim();
        let r = parse_indicator(cell(0), "r", line)?;
        let z = parse_indicator(cell(1), "z", line)?;
        let y = parse_float(cell(2), "y", line)?;
        let x = (0..p)
            .map(|j| parse_float(cell(3 + j), &format!("x{}", j + 1), line))
            .collect::<Result<Vec<_>>>()?;
        let v_cells: Vec<&str> = (0..q).map(|j| cell(3 + p + j)).collect();
        let present = v_cells.iter().filter(|c| !c.is_empty()).count();
        let v = if r {
            if present != q {
                return Err(Error::Consistency {
                    line,
                    msg: "linked row (r = 1) has empty v cells".into(),
                });
            }
            let v = v_cells
                .iter()
                .enumerate()
                .map(|(j, c)| parse_float(c, &format!("v{}", j + 1), line))
                .collect::<Result<Vec<_>>>()?;
            Some(v)
        } else {
            if present != 0 {
                return Err(Error::Consistency {
                    line,
                    msg: "unlinked row (r = 0) has v values".into(),
                });
            }
            None
        };
        let rec = LinkedRecord { z, y, x, v };
        check_record(&rec, p, q, family).map_err(|msg| Error::Consistency { line, msg })?;
        records.push(rec);
    }
    LinkedDataset::from_records(records, p, q, family)
}

pub fn load_csv(path: impl AsRef<Path>, family: OutcomeFamily) -> Result<LinkedDataset> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f), family)
}

//! Adversarial domains, domain pools and their on-disk formats.
//!
//! A domain is the set of feature vectors produced from one attack. Pools are
//! stored either as CSV (`attack_id,f_1,...,f_d`, one row per sample, no
//! header) or in the little-endian `PADF` binary layout:
//!
//! ```text
//! "PADF" | version u32 | M u32 | d u32
//! per domain: id_len u32 | id bytes (UTF-8) | v u32 | v*d f64
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const POOL_MAGIC: &[u8; 4] = b"PADF";
pub const POOL_VERSION: u32 = 1;

/// Feature vectors of one attack, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainFeatures {
    attack_id: String,
    features: Matrix,
}

impl DomainFeatures {
    pub fn new(attack_id: impl Into<String>, features: Matrix) -> Result<Self> {
        let attack_id = attack_id.into();
        if features.rows() == 0 {
            return Err(Error::EmptyDomain(attack_id));
        }
        if features.cols() == 0 {
            return Err(Error::FormatViolation(format!(
                "domain `{attack_id}` has zero-dimensional features"
            )));
        }
        if !features.is_finite() {
            return Err(Error::FormatViolation(format!(
                "domain `{attack_id}` contains non-finite values"
            )));
        }
        Ok(DomainFeatures {
            attack_id,
            features,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(attack_id: impl Into<String>, rows: &[R]) -> Result<Self> {
        let attack_id = attack_id.into();
        if rows.is_empty() {
            return Err(Error::EmptyDomain(attack_id));
        }
        let m = Matrix::from_rows(rows)?;
        DomainFeatures::new(attack_id, m)
    }

    pub fn attack_id(&self) -> &str {
        &self.attack_id
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    /// Concatenates the samples of several same-dimension domains.
    pub fn concat(attack_id: impl Into<String>, parts: &[&DomainFeatures]) -> Result<Self> {
        let attack_id = attack_id.into();
        if parts.is_empty() {
            return Err(Error::EmptyDomain(attack_id));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|d| &d.features).collect();
        let stacked = Matrix::vstack(&mats)?;
        DomainFeatures::new(attack_id, stacked)
    }
}

/// A set of domains sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPool {
    domains: Vec<DomainFeatures>,
    dim: usize,
}

impl DomainPool {
    pub fn new(domains: Vec<DomainFeatures>) -> Result<Self> {
        if domains.len() < 2 {
            return Err(Error::FormatViolation(format!(
                "a pool needs at least 2 domains, got {}",
                domains.len()
            )));
        }
        let dim = domains[0].dim();
        let mut seen = HashSet::new();
        for d in &domains {
            if d.dim() != dim {
                return Err(Error::FormatViolation(format!(
                    "domain `{}` has dimension {}, pool dimension is {dim}",
                    d.attack_id(),
                    d.dim()
                )));
            }
            if !seen.insert(d.attack_id().to_string()) {
                return Err(Error::FormatViolation(format!(
                    "duplicate attack_id `{}`",
                    d.attack_id()
                )));
            }
        }
        Ok(DomainPool { domains, dim })
    }

    pub fn domains(&self) -> &[DomainFeatures] {
        &self.domains
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn attack_ids(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.attack_id()).collect()
    }

    pub fn index_of(&self, attack_id: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.attack_id() == attack_id)
    }
}

/// A probability vector over feature dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDistribution {
    probs: Vec<f64>,
}

impl DomainDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(
                "distribution entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "distribution sums to {total}, not 1"
            )));
        }
        Ok(DomainDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    /// Sample-count weighted mixture, equal to normalising the concatenation
    /// of the underlying domains.
    pub fn mixture(parts: &[(&DomainDistribution, usize)]) -> Result<Self> {
        let dim = parts
            .first()
            .map(|(d, _)| d.dim())
            .ok_or_else(|| Error::InvalidInput("empty mixture".into()))?;
        let total: usize = parts.iter().map(|(_, n)| n).sum();
        let mut probs = vec![0.0; dim];
        for (d, n) in parts {
            if d.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: d.dim(),
                });
            }
            let w = *n as f64 / total as f64;
            for (p, q) in probs.iter_mut().zip(&d.probs) {
                *p += w * q;
            }
        }
        Ok(DomainDistribution { probs })
    }
}

/// Numerically stable softmax written into `out`.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Per-sample softmax followed by the mean over samples.
pub fn normalize_domain(dom: &DomainFeatures) -> Result<DomainDistribution> {
    let feats = dom.features();
    if feats.rows() == 0 {
        return Err(Error::EmptyDomain(dom.attack_id().to_string()));
    }
    let d = feats.cols();
    let mut acc = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for row in feats.row_iter() {
        softmax_into(row, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b;
        }
    }
    let inv = 1.0 / feats.rows() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(DomainDistribution { probs: acc })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolFormat {
    Csv,
    Binary,
}

impl PoolFormat {
    /// `.csv` means CSV; everything else is treated as binary.
    pub fn from_path(path: &Path) -> PoolFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => PoolFormat::Csv,
            _ => PoolFormat::Binary,
        }
    }
}

pub fn save_pool(pool: &DomainPool, path: &Path, format: PoolFormat) -> Result<()> {
    match format {
        PoolFormat::Csv => {
            let rows = pool
                .domains()
                .iter()
                .flat_map(|d| d.features().row_iter().map(move |r| (d.attack_id(), r)));
            write_labeled_csv(path, rows)
        }
        PoolFormat::Binary => {
            let mut buf = Vec::new();
            buf.extend_from_slice(POOL_MAGIC);
            buf.extend_from_slice(&POOL_VERSION.to_le_bytes());
            buf.extend_from_slice(&(pool.len() as u32).to_le_bytes());
            buf.extend_from_slice(&(pool.dim() as u32).to_le_bytes());
            for d in pool.domains() {
                let id = d.attack_id().as_bytes();
                buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
                buf.extend_from_slice(id);
                buf.extend_from_slice(&(d.len() as u32).to_le_bytes());
                for v in d.features().as_slice() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            fs::write(path, buf).map_err(|e| Error::io(path, e))
        }
    }
}

pub fn load_pool(path: &Path, format: PoolFormat) -> Result<DomainPool> {
    match format {
        PoolFormat::Csv => {
            let rows = read_labeled_csv(path)?;
            let mut order: Vec<String> = Vec::new();
            let mut grouped: Vec<Vec<Vec<f64>>> = Vec::new();
            for (id, values) in rows {
                match order.iter().position(|o| *o == id) {
                    Some(i) => grouped[i].push(values),
                    None => {
                        order.push(id);
                        grouped.push(vec![values]);
                    }
                }
            }
            let domains = order
                .into_iter()
                .zip(grouped)
                .map(|(id, rows)| DomainFeatures::from_rows(id, &rows))
                .collect::<Result<Vec<_>>>()?;
            DomainPool::new(domains)
        }
        PoolFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_pool(&bytes)
        }
    }
}

fn decode_pool(bytes: &[u8]) -> Result<DomainPool> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != POOL_MAGIC {
        return Err(Error::FormatViolation("bad magic bytes, expected PADF".into()));
    }
    let version = r.u32()?;
    if version != POOL_VERSION {
        return Err(Error::FormatViolation(format!("unsupported pool version {version}")));
    }
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut domains = Vec::with_capacity(m);
    for _ in 0..m {
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::FormatViolation("attack_id is not UTF-8".into()))?
            .to_string();
        let v = r.u32()? as usize;
        let mut data = Vec::with_capacity(v * d);
        for _ in 0..v * d {
            data.push(r.f64()?);
        }
        domains.push(DomainFeatures::new(id, Matrix::from_vec(v, d, data)?)?);
    }
    if !r.is_done() {
        return Err(Error::FormatViolation("trailing bytes after pool".into()));
    }
    DomainPool::new(domains)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::FormatViolation("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Writes `label,v_1,...,v_d` rows. Floats use the shortest representation
/// that parses back to the same value.
pub(crate) fn write_labeled_csv<'a, I>(path: &Path, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    let mut out = csv::WriterBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_writer(Vec::new());
    for (label, values) in rows {
        let mut record = Vec::with_capacity(values.len() + 1);
        record.push(label.to_string());
        record.extend(values.iter().map(|v| format!("{v:?}")));
        out.write_record(&record)
            .map_err(|e| Error::FormatViolation(e.to_string()))?;
    }
    let bytes = out
        .into_inner()
        .map_err(|e| Error::FormatViolation(e.to_string()))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads `label,v_1,...,v_d` rows; all rows must have the same width.
pub(crate) fn read_labeled_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_labeled_csv(&text)
}

pub(crate) fn parse_labeled_csv(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                message: "expected an attack_id followed by at least one value".into(),
            });
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "row {line} has {} fields, expected {w}",
                        record.len()
                    ),
                })
            }
            _ => {}
        }
        let values = record
            .iter()
            .skip(1)
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("`{s}` is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push((record[0].to_string(), values));
    }
    Ok(out)
}

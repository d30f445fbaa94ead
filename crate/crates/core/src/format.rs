//! On-disk formats. All integers and floats are little-endian.
//!
//! Score matrix (`ANCM`):
//!
//! ```text
//! magic "ANCM" | u32 version = 1 | u64 rows | u64 cols | rows*cols f64, row-major
//! ```
//!
//! Index (`ANCI`):
//!
//! ```text
//! magic "ANCI" | u32 version = 1 | u64 k_i | u64 n_items | u64 k_q
//! | k_i x u64 anchor items | k_q x u64 anchor queries | f64 rcond | u64 build_cost
//! | k_i*n_items f64 item embeddings, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::index::CurIndex;
use crate::linalg::DenseMatrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"ANCM";
pub const INDEX_MAGIC: &[u8; 4] = b"ANCI";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("count {v} overflows usize")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::format(
                self.path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            ));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::format(self.path, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.path, "payload size overflows"))?;
        let raw = self.take(bytes)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn ids(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.usize()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn matrix_from(path: &Path, rows: usize, cols: usize, data: Vec<f64>) -> Result<DenseMatrix> {
    DenseMatrix::new(rows, cols, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_matrix(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * m.data().len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    write_file(path, &encode_matrix(m))
}

fn decode_matrix_prefix(r: &mut Reader<'_>) -> Result<DenseMatrix> {
    r.header(MATRIX_MAGIC)?;
    let rows = r.usize()?;
    let cols = r.usize()?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format(r.path, "matrix size overflows"))?;
    let data = r.f64s(n)?;
    matrix_from(r.path, rows, cols, data)
}

pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    let buf = read_file(path)?;
    let mut r = Reader { path, buf: &buf, pos: 0 };
    let m = decode_matrix_prefix(&mut r)?;
    r.finish()?;
    Ok(m)
}

/// An `ANCM` matrix followed by a UTF-8 `key=value` metadata blob
/// (`u64` byte length, then the text).
pub fn write_matrix_with_metadata(path: &Path, m: &DenseMatrix, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut out = encode_matrix(m);
    let text = key_values_to_string(meta.iter());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    write_file(path, &out)
}

pub fn read_matrix_with_metadata(path: &Path) -> Result<(DenseMatrix, BTreeMap<String, String>)> {
    let buf = read_file(path)?;
    let mut r = Reader { path, buf: &buf, pos: 0 };
    let m = decode_matrix_prefix(&mut r)?;
    let len = r.usize()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
    r.finish()?;
    Ok((m, parse_key_values(text)))
}

pub fn encode_index(index: &CurIndex) -> Vec<u8> {
    let e = index.item_embeddings();
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(index.k_i() as u64).to_le_bytes());
    out.extend_from_slice(&(index.n_items() as u64).to_le_bytes());
    out.extend_from_slice(&(index.k_q() as u64).to_le_bytes());
    for &id in index.anchor_items() {
        out.extend_from_slice(&(id as u64).to_le_bytes());
    }
    for &id in index.anchor_queries() {
        out.extend_from_slice(&(id as u64).to_le_bytes());
    }
    out.extend_from_slice(&index.rcond().to_le_bytes());
    out.extend_from_slice(&index.build_cost().to_le_bytes());
    for v in e.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_index(path: &Path, buf: &[u8]) -> Result<CurIndex> {
    let mut r = Reader { path, buf, pos: 0 };
    r.header(INDEX_MAGIC)?;
    let k_i = r.usize()?;
    let n_items = r.usize()?;
    let k_q = r.usize()?;
    let anchor_items = r.ids(k_i)?;
    let anchor_queries = r.ids(k_q)?;
    let rcond = r.f64()?;
    let build_cost = r.u64()?;
    let n = k_i
        .checked_mul(n_items)
        .ok_or_else(|| Error::format(path, "embedding size overflows"))?;
    let data = r.f64s(n)?;
    r.finish()?;
    let embeddings = matrix_from(path, k_i, n_items, data)?;
    CurIndex::from_parts(anchor_items, anchor_queries, embeddings, rcond, build_cost)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_index(index: &CurIndex, path: &Path) -> Result<()> {
    write_file(path, &encode_index(index))
}

pub fn load_index(path: &Path) -> Result<CurIndex> {
    decode_index(path, &read_file(path)?)
}

/// Reads a score table from CSV: either a `q,i,score` triplet list with that
/// header, covering every cell exactly once, or a headerless dense grid.
pub fn read_scores_csv(path: &Path) -> Result<DenseMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut records = Vec::new();
    for rec in reader.records() {
        records.push(rec.map_err(|e| Error::format(path, e.to_string()))?);
    }
    let Some(first) = records.first() else {
        return Err(Error::format(path, "empty CSV"));
    };
    let parse = |s: &str, line: usize| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::format(path, format!("line {line}: cannot parse {s:?}")))
    };

    if first.iter().collect::<Vec<_>>() == ["q", "i", "score"] {
        let mut cells = BTreeMap::new();
        let (mut nq, mut ni) = (0usize, 0usize);
        for (line, rec) in records.iter().enumerate().skip(1) {
            if rec.len() != 3 {
                return Err(Error::format(path, format!("line {}: expected 3 fields", line + 1)));
            }
            let q: usize = rec[0]
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad query id", line + 1)))?;
            let i: usize = rec[1]
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad item id", line + 1)))?;
            let s = parse(&rec[2], line + 1)?;
            if cells.insert((q, i), s).is_some() {
                return Err(Error::format(path, format!("duplicate cell ({q}, {i})")));
            }
            nq = nq.max(q + 1);
            ni = ni.max(i + 1);
        }
        if cells.len() != nq * ni {
            return Err(Error::format(
                path,
                format!("{} cells given for a {nq}x{ni} table", cells.len()),
            ));
        }
        return matrix_from(path, nq, ni, cells.into_values().collect());
    }

    let cols = first.len();
    let mut data = Vec::with_capacity(records.len() * cols);
    for (line, rec) in records.iter().enumerate() {
        if rec.len() != cols {
            return Err(Error::format(path, format!("line {}: ragged row", line + 1)));
        }
        for field in rec.iter() {
            data.push(parse(field, line + 1)?);
        }
    }
    matrix_from(path, records.len(), cols, data)
}

/// Reads `.csv` as CSV, anything else as `ANCM`.
pub fn read_scores(path: &Path) -> Result<DenseMatrix> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_scores_csv(path)
    } else {
        read_matrix(path)
    }
}

pub fn key_values_to_string<'a, K, V>(pairs: impl IntoIterator<Item = (K, V)>) -> String
where
    K: AsRef<str> + 'a,
    V: AsRef<str> + 'a,
{
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k.as_ref());
        s.push('=');
        s.push_str(v.as_ref());
        s.push('\n');
    }
    s
}

pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

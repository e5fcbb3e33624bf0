use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Compressed sparse row matrix in canonical form: column indices strictly
/// increasing within each row, duplicates merged at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCsr<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<T>,
}

/// Structure of a sparse matrix without its values; shared between the
/// graph assembly plan and tape ops that carry values as tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrPattern {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl CsrPattern {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_cols(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    /// Row index of every stored entry, in storage order.
    pub fn slot_rows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            out.extend(std::iter::repeat_n(r, self.row_ptr[r + 1] - self.row_ptr[r]));
        }
        out
    }
}

impl<T: Real> SparseCsr<T> {
    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseCsr {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Builds canonical CSR from (row, col, value) triplets; duplicate
    /// coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, trips: &[(usize, usize, T)]) -> Result<Self> {
        for &(r, c, _) in trips {
            if r >= rows || c >= cols {
                return Err(Error::Index(format!(
                    "triplet ({r},{c}) outside {rows}x{cols}"
                )));
            }
        }
        let mut sorted: Vec<(usize, usize, T)> = trips.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut entry_rows: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut col_idx: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut vals: Vec<T> = Vec::with_capacity(sorted.len());
        for (r, c, v) in sorted {
            if entry_rows.last() == Some(&r) && col_idx.last() == Some(&c) {
                *vals.last_mut().unwrap() += v;
            } else {
                entry_rows.push(r);
                col_idx.push(c);
                vals.push(v);
            }
        }
        let mut row_ptr = vec![0usize; rows + 1];
        for &r in &entry_rows {
            row_ptr[r + 1] += 1;
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(SparseCsr {
            rows,
            cols,
            row_ptr,
            col_idx,
            vals,
        })
    }

    /// Rebuilds canonical form (sorted columns, duplicates summed). A matrix
    /// already canonical comes back unchanged.
    pub fn canonicalize(&self) -> Self {
        let trips: Vec<(usize, usize, T)> = self.iter().map(|((r, c), v)| (r, c, v)).collect();
        Self::from_triplets(self.rows, self.cols, &trips).expect("indices already validated")
    }

    pub fn is_canonical(&self) -> bool {
        for r in 0..self.rows {
            let cols = self.row_cols(r);
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return false;
            }
        }
        true
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[T] {
        &self.vals
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.vals
    }

    pub fn row_cols(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn row_vals(&self, r: usize) -> &[T] {
        &self.vals[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        match self.row_cols(r).binary_search(&c) {
            Ok(k) => self.row_vals(r)[k],
            Err(_) => T::ZERO,
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row_cols(r).binary_search(&c).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), T)> + '_ {
        (0..self.rows).flat_map(move |r| {
            self.row_cols(r)
                .iter()
                .zip(self.row_vals(r))
                .map(move |(&c, &v)| ((r, c), v))
        })
    }

    pub fn densify(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for ((r, c), v) in self.iter() {
            out.set(r, c, v);
        }
        out
    }

    pub fn transpose(&self) -> SparseCsr<T> {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let mut row_ptr = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut vals = vec![T::ZERO; self.nnz()];
        let mut next = row_ptr.clone();
        for ((r, c), v) in self.iter() {
            let slot = next[c];
            col_idx[slot] = r;
            vals[slot] = v;
            next[c] += 1;
        }
        row_ptr[self.cols] = self.nnz();
        SparseCsr {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            vals,
        }
    }

    /// Elementwise sum; support is the union of both supports.
    pub fn add(&self, other: &SparseCsr<T>) -> Result<SparseCsr<T>> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(
                "sparse_add",
                format!(
                    "{}x{} + {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut trips: Vec<(usize, usize, T)> =
            self.iter().map(|((r, c), v)| (r, c, v)).collect();
        trips.extend(other.iter().map(|((r, c), v)| (r, c, v)));
        Self::from_triplets(self.rows, self.cols, &trips)
    }

    pub fn row_sums(&self) -> Vec<T> {
        let mut out = vec![T::ZERO; self.rows];
        for r in 0..self.rows {
            for &v in self.row_vals(r) {
                out[r] += v;
            }
        }
        out
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> SparseCsr<T> {
        SparseCsr {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            vals: self.vals.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn convert<U: Real>(&self) -> SparseCsr<U> {
        SparseCsr {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            vals: self.vals.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn pattern(&self) -> Rc<CsrPattern> {
        Rc::new(CsrPattern {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
        })
    }

    /// Reassembles a matrix from a pattern plus a value slice in slot order.
    pub fn from_pattern(pattern: &CsrPattern, vals: Vec<T>) -> Result<Self> {
        if vals.len() != pattern.nnz() {
            return Err(Error::dim(
                "from_pattern",
                format!("{} values for {} slots", vals.len(), pattern.nnz()),
            ));
        }
        Ok(SparseCsr {
            rows: pattern.rows,
            cols: pattern.cols,
            row_ptr: pattern.row_ptr.clone(),
            col_idx: pattern.col_idx.clone(),
            vals,
        })
    }
}

const GRAPH_MAGIC: &[u8; 4] = b"IDFG";
const GRAPH_VERSION: u8 = 1;

/// Writes a square graph as `IDFG` + version, u32 LE n, u32 LE nnz,
/// row_ptr, col_idx (u32 LE each), then values as f32 LE.
pub fn write_graph(graph: &SparseCsr<f32>, path: &Path) -> Result<()> {
    if graph.rows != graph.cols {
        return Err(Error::dim(
            "write_graph",
            format!("graph container is square-only, got {}x{}", graph.rows, graph.cols),
        ));
    }
    let mut buf: Vec<u8> = Vec::with_capacity(9 + 4 * (graph.rows + 1 + 2 * graph.nnz()));
    buf.extend_from_slice(GRAPH_MAGIC);
    buf.push(GRAPH_VERSION);
    buf.extend_from_slice(&(graph.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(graph.nnz() as u32).to_le_bytes());
    for &p in &graph.row_ptr {
        buf.extend_from_slice(&(p as u32).to_le_bytes());
    }
    for &c in &graph.col_idx {
        buf.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for &v in &graph.vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_graph(path: &Path) -> Result<SparseCsr<f32>> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let ctx = path.display().to_string();
    if buf.len() < 13 || &buf[0..4] != GRAPH_MAGIC {
        return Err(Error::Data(format!("{ctx}: not a graph container")));
    }
    if buf[4] != GRAPH_VERSION {
        return Err(Error::Data(format!("{ctx}: unsupported graph version {}", buf[4])));
    }
    let n = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let nnz = u32::from_le_bytes(buf[9..13].try_into().unwrap()) as usize;
    let need = 13 + 4 * (n + 1) + 4 * nnz + 4 * nnz;
    if buf.len() != need {
        return Err(Error::Data(format!(
            "{ctx}: truncated graph container ({} bytes, expected {need})",
            buf.len()
        )));
    }
    let mut off = 13;
    let read_u32 = |off: &mut usize| {
        let v = u32::from_le_bytes(buf[*off..*off + 4].try_into().unwrap());
        *off += 4;
        v
    };
    let row_ptr: Vec<usize> = (0..=n).map(|_| read_u32(&mut off) as usize).collect();
    let col_idx: Vec<usize> = (0..nnz).map(|_| read_u32(&mut off) as usize).collect();
    let mut vals = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        vals.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
        off += 4;
    }
    if row_ptr.last() != Some(&nnz) || row_ptr.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Data(format!("{ctx}: corrupt row offsets")));
    }
    if col_idx.iter().any(|&c| c >= n) {
        return Err(Error::Data(format!("{ctx}: column index out of range")));
    }
    Ok(SparseCsr {
        rows: n,
        cols: n,
        row_ptr,
        col_idx,
        vals,
    })
}

/// Convenience used by dataset persistence: newline-separated `row<TAB>col`.
pub fn write_pairs(csr: &SparseCsr<f32>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for ((r, c), _) in csr.iter() {
        out.push_str(&format!("{r}\t{c}\n"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pairs(path: &Path, rows: usize, cols: usize) -> Result<SparseCsr<f32>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut trips = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected two tab-separated indices".into(),
            })
        };
        let r = parse(parts.next())?;
        let c = parse(parts.next())?;
        trips.push((r, c, 1.0f32));
    }
    SparseCsr::from_triplets(rows, cols, &trips)
}

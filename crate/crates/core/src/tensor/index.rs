//! Static element-index maps for the gather operation.
//!
//! A single gather op with a precomputed `out[i] = src[map[i]]` table covers
//! slicing, row selection, broadcasting, embedding lookup and the
//! patchify/unpatchify reshuffles — and its backward (scatter-add) handles
//! the duplicated indices that broadcasting introduces.

use crate::error::{Error, Result};

/// An element-level index map from a source tensor into an output shape.
pub struct IndexMap {
    /// Shape of the gathered output.
    pub out_shape: Vec<usize>,
    /// Element count the source tensor must have.
    pub source_len: usize,
    /// `out[i] = src[map[i]]` for every flat output position `i`.
    pub map: Vec<u32>,
}

impl IndexMap {
    /// Builds a map after validating that every index is in range and the
    /// table fills the output shape exactly.
    pub fn new(out_shape: Vec<usize>, source_len: usize, map: Vec<u32>) -> Result<Self> {
        let numel: usize = out_shape.iter().product();
        if out_shape.is_empty() || out_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "index map output shape must be positive, got {out_shape:?}"
            )));
        }
        if numel != map.len() {
            return Err(Error::ShapeMismatch {
                op: "index_map",
                details: format!("shape {out_shape:?} wants {numel} indices, got {}", map.len()),
            });
        }
        if source_len > u32::MAX as usize {
            return Err(Error::InvalidArgument(
                "index map sources are limited to u32 offsets".into(),
            ));
        }
        if let Some(&bad) = map.iter().find(|&&i| i as usize >= source_len) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for source of {source_len} elements"
            )));
        }
        Ok(IndexMap {
            out_shape,
            source_len,
            map,
        })
    }

    /// Rows `[start, end)` of a tensor whose first axis is `shape[0]`.
    pub fn slice_rows(shape: &[usize], start: usize, end: usize) -> Result<Self> {
        let rows = shape[0];
        let row_len: usize = shape[1..].iter().product::<usize>().max(1);
        if start >= end || end > rows {
            return Err(Error::InvalidArgument(format!(
                "row slice [{start}, {end}) invalid for {rows} rows"
            )));
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = end - start;
        let map = (start * row_len..end * row_len).map(|i| i as u32).collect();
        IndexMap::new(out_shape, rows * row_len, map)
    }

    /// Arbitrary (possibly repeating) row selection — embedding lookup.
    pub fn select_rows(shape: &[usize], ids: &[usize]) -> Result<Self> {
        let rows = shape[0];
        let row_len: usize = shape[1..].iter().product::<usize>().max(1);
        if ids.is_empty() {
            return Err(Error::InvalidArgument("select_rows needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "row id {bad} out of range for {rows} rows"
            )));
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = ids.len();
        let mut map = Vec::with_capacity(ids.len() * row_len);
        for &r in ids {
            map.extend((r * row_len..(r + 1) * row_len).map(|i| i as u32));
        }
        IndexMap::new(out_shape, rows * row_len, map)
    }

    /// Repeats a rank-1 tensor of length `cols` as `copies` identical rows.
    /// Backward sums over the copies, which is exactly a bias gradient.
    pub fn broadcast_rows(cols: usize, copies: usize) -> Result<Self> {
        if cols == 0 || copies == 0 {
            return Err(Error::InvalidArgument(
                "broadcast_rows needs positive dims".into(),
            ));
        }
        let mut map = Vec::with_capacity(cols * copies);
        for _ in 0..copies {
            map.extend((0..cols).map(|i| i as u32));
        }
        IndexMap::new(vec![copies, cols], cols, map)
    }

    /// Column range `[col_start, col_start+col_len)` over selected rows of a
    /// `(rows, cols)` matrix — attention-head slicing.
    pub fn rows_and_cols(
        rows: usize,
        cols: usize,
        row_ids: &[usize],
        col_start: usize,
        col_len: usize,
    ) -> Result<Self> {
        if col_start + col_len > cols || col_len == 0 {
            return Err(Error::InvalidArgument(format!(
                "column slice [{col_start}, {}) invalid for {cols} columns",
                col_start + col_len
            )));
        }
        if let Some(&bad) = row_ids.iter().find(|&&r| r >= rows) {
            return Err(Error::InvalidArgument(format!(
                "row id {bad} out of range for {rows} rows"
            )));
        }
        let mut map = Vec::with_capacity(row_ids.len() * col_len);
        for &r in row_ids {
            let base = r * cols + col_start;
            map.extend((base..base + col_len).map(|i| i as u32));
        }
        IndexMap::new(vec![row_ids.len(), col_len], rows * cols, map)
    }
}

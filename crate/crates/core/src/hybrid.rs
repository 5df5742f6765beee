//! Embedding stores and hybrid (concatenated) embeddings.
//!
//! Store file layout, all integers little-endian:
//!
//! ```text
//! "EMBD" | version u32 = 1 | count u32 | dim u32 | name_len u16 | name
//! | count × (id_len u16 | id) | count × dim f32, row-major
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::binio::{atomic_write, read_file, ByteReader};
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"EMBD";
pub const STORE_VERSION: u32 = 1;

/// Named matrix of embeddings with one id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    name: String,
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(name: impl Into<String>, dim: usize, ids: Vec<String>, matrix: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if dim == 0 {
            return Err(Error::Input("embedding dimension must be positive".into()));
        }
        if matrix.len() != ids.len() * dim {
            return Err(Error::Shape {
                op: "embedding_store",
                lhs: vec![ids.len(), dim],
                rhs: vec![matrix.len()],
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Input(format!("duplicate id `{dup}` in store `{name}`")));
        }
        if let Some(pos) = matrix.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value in row {} of store `{name}`", pos / dim)));
        }
        Ok(EmbeddingStore { name, dim, ids, matrix })
    }

    pub fn from_rows(name: impl Into<String>, dim: usize, ids: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self> {
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Shape {
                op: "embedding_store",
                lhs: vec![dim],
                rhs: vec![rows[bad].len()],
            });
        }
        Self::new(name, dim, ids, rows.concat())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.matrix.chunks_exact(self.dim)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let too_long = |what: &str, s: &str| Error::Input(format!("{what} `{s}` exceeds 65535 bytes"));
        if self.name.len() > u16::MAX as usize {
            return Err(too_long("store name", &self.name));
        }
        let mut out = Vec::with_capacity(22 + self.name.len() + self.matrix.len() * 4);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.name.len() as u16).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        for id in &self.ids {
            if id.len() > u16::MAX as usize {
                return Err(too_long("id", id));
            }
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for x in &self.matrix {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != STORE_MAGIC {
            return Err(Error::format(0, "bad embedding store magic"));
        }
        let version = r.u32("version")?;
        if version != STORE_VERSION {
            return Err(Error::format(4, format!("unsupported store version {version}")));
        }
        let count = r.u32("count")? as usize;
        let dim_at = r.offset();
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(Error::format(dim_at, "dimension is zero"));
        }
        let name_len = r.u16("name length")? as usize;
        let name = r.utf8(name_len, "name")?;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let n = r.u16("id length")? as usize;
            ids.push(r.utf8(n, "id")?);
        }
        let data_at = r.offset();
        let n = count
            .checked_mul(dim)
            .ok_or_else(|| Error::format(data_at, "matrix size overflow"))?;
        let matrix = r.f32s(n, "matrix")?;
        if !r.is_at_end() {
            return Err(Error::format(r.offset(), "trailing bytes after matrix"));
        }
        Self::new(name, dim, ids, matrix).map_err(|e| Error::format(data_at, e.to_string()))
    }
}

pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    atomic_write(path, &store.to_bytes()?)
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::from_bytes(&read_file(path)?)
}

/// Cosine similarity computed in `f64`. `None` when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        None
    } else {
        Some(ab / (aa.sqrt() * bb.sqrt()))
    }
}

fn unit_row(row: &[f32], store: &str, id: &str) -> Result<Vec<f32>> {
    let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numeric(format!("zero-norm row `{id}` in store `{store}`")));
    }
    Ok(row.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Row-wise concatenation `[a | b]`, each part L2-normalized first when
/// `normalize` is set. The id lists must match exactly and in order.
pub fn concat_embeddings(a: &EmbeddingStore, b: &EmbeddingStore, normalize: bool) -> Result<EmbeddingStore> {
    if a.ids != b.ids {
        let first = a
            .ids
            .iter()
            .zip(&b.ids)
            .position(|(x, y)| x != y)
            .unwrap_or(a.len().min(b.len()));
        let show = |s: &EmbeddingStore| s.ids.get(first).map_or("<end>".to_string(), |x| format!("`{x}`"));
        return Err(Error::Alignment(format!(
            "ids diverge at row {first}: {} in `{}` vs {} in `{}`",
            show(a),
            a.name,
            show(b),
            b.name
        )));
    }
    let dim = a.dim + b.dim;
    let mut matrix = Vec::with_capacity(a.len() * dim);
    for (i, id) in a.ids.iter().enumerate() {
        if normalize {
            matrix.extend(unit_row(a.row(i), &a.name, id)?);
            matrix.extend(unit_row(b.row(i), &b.name, id)?);
        } else {
            matrix.extend_from_slice(a.row(i));
            matrix.extend_from_slice(b.row(i));
        }
    }
    EmbeddingStore::new(format!("{}+{}", a.name, b.name), dim, a.ids.clone(), matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(name: &str, rows: &[&[f32]]) -> EmbeddingStore {
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        EmbeddingStore::from_rows(name, rows[0].len(), ids, rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn self_concatenation_repeats_unit_row() {
        let a = store("a", &[&[3.0, 4.0], &[0.0, -2.0]]);
        let h = concat_embeddings(&a, &a, true).unwrap();
        assert_eq!(h.dim(), 4);
        assert_eq!(h.name(), "a+a");
        assert_eq!(h.row(0), &[0.6, 0.8, 0.6, 0.8]);
        assert_eq!(h.row(1), &[0.0, -1.0, 0.0, -1.0]);
    }

    #[test]
    fn unnormalized_concat_copies_rows() {
        let a = store("a", &[&[3.0, 4.0]]);
        let b = store("b", &[&[1.0]]);
        assert_eq!(concat_embeddings(&a, &b, false).unwrap().row(0), &[3.0, 4.0, 1.0]);
    }

    #[test]
    fn misaligned_ids_are_rejected() {
        let a = store("a", &[&[1.0], &[2.0]]);
        let b = EmbeddingStore::new("b", 1, vec!["r0".into(), "x".into()], vec![1.0, 2.0]).unwrap();
        let err = concat_embeddings(&a, &b, true).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
        assert!(err.to_string().contains("`r1`"), "{err}");
    }

    #[test]
    fn zero_row_with_normalization_is_numeric_error() {
        let a = store("a", &[&[0.0, 0.0]]);
        let b = store("b", &[&[1.0, 0.0]]);
        assert!(matches!(concat_embeddings(&a, &b, true), Err(Error::Numeric(_))));
        assert!(concat_embeddings(&a, &b, false).is_ok());
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let a = store("model", &[&[1.5, -0.25], &[f32::MIN_POSITIVE, 3.0e7]]);
        let bytes = a.to_bytes().unwrap();
        assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap(), a);
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(matches!(EmbeddingStore::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let empty = EmbeddingStore::new("e", 8, vec![], vec![]).unwrap();
        assert_eq!(EmbeddingStore::from_bytes(&empty.to_bytes().unwrap()).unwrap(), empty);
    }

    #[test]
    fn exact_header_layout() {
        let s = EmbeddingStore::new("ab", 1, vec!["x".into()], vec![1.0]).unwrap();
        let bytes = s.to_bytes().unwrap();
        let expected: Vec<u8> = [
            &b"EMBD"[..],
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &2u16.to_le_bytes(),
            b"ab",
            &1u16.to_le_bytes(),
            b"x",
            &1.0f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, expected);
    }
}

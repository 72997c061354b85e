//! Exact cosine-similarity search over training-sample embeddings.
//!
//! Vectors are L2-normalized on insertion and stored row-major in one
//! contiguous buffer, so a query is a scan of dot products. Results are
//! ordered by similarity (descending) and then id (ascending), which makes
//! them independent of insertion order.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::vector::{check_dim, check_finite};
use crate::{normalize, Error, Result};

pub const DEFAULT_TOPM: usize = 50;
const MAGIC: &[u8; 7] = b"CCFRDB1";

/// One database row or query: identity, class label and feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub label: usize,
    pub similarity: f64,
}

/// Neighbours ordered by (similarity desc, id asc).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Keeps hits with similarity strictly above `t_sc`, preserving order.
pub fn filter_by_threshold(r: &SearchResult, t_sc: f64) -> SearchResult {
    SearchResult {
        hits: r
            .hits
            .iter()
            .filter(|h| h.similarity > t_sc)
            .cloned()
            .collect(),
    }
}

/// Immutable searching database.
#[derive(Debug, Clone, PartialEq)]
pub struct Database {
    dim: usize,
    ids: Vec<String>,
    labels: Vec<usize>,
    data: Vec<f64>,
}

impl Database {
    pub fn build(records: &[EmbeddingRecord]) -> Result<Self> {
        let dim = records
            .first()
            .map(|r| r.embedding.len())
            .ok_or(Error::EmptyInput("database records"))?;
        if dim == 0 {
            return Err(Error::EmptyInput("embedding dimension"));
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut db = Database {
            dim,
            ids: Vec::with_capacity(records.len()),
            labels: Vec::with_capacity(records.len()),
            data: Vec::with_capacity(records.len() * dim),
        };
        for r in records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            check_dim("database embedding", dim, r.embedding.len())?;
            check_finite("database embedding", &r.embedding)?;
            let unit = normalize(&r.embedding).map_err(|_| Error::ZeroNorm("database embedding"))?;
            db.ids.push(r.id.clone());
            db.labels.push(r.label);
            db.data.extend(unit);
        }
        Ok(db)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Stored (unit-norm) vector of row `i`.
    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine similarity of the normalized query to every row, clamped to [-1, 1].
    pub fn similarities(&self, q: &[f64]) -> Result<Vec<f64>> {
        check_dim("query embedding", self.dim, q.len())?;
        check_finite("query embedding", q)?;
        let q = normalize(q).map_err(|_| Error::ZeroNorm("query embedding"))?;
        Ok(self
            .data
            .chunks_exact(self.dim)
            .map(|row| crate::dot(row, &q).clamp(-1.0, 1.0))
            .collect())
    }

    fn rank_order(&self, sims: &[f64], a: usize, b: usize) -> Ordering {
        sims[b]
            .total_cmp(&sims[a])
            .then_with(|| self.ids[a].cmp(&self.ids[b]))
    }

    /// Exact top-`topm` neighbours of `q`.
    pub fn query_topm(&self, q: &[f64], topm: usize) -> Result<SearchResult> {
        if topm == 0 {
            return Err(Error::config("topm", "must be at least 1"));
        }
        let sims = self.similarities(q)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        if topm < order.len() {
            order.select_nth_unstable_by(topm - 1, |&a, &b| self.rank_order(&sims, a, b));
            order.truncate(topm);
        }
        order.sort_unstable_by(|&a, &b| self.rank_order(&sims, a, b));
        Ok(SearchResult {
            hits: order
                .into_iter()
                .map(|i| Hit {
                    id: self.ids[i].clone(),
                    label: self.labels[i],
                    similarity: sims[i],
                })
                .collect(),
        })
    }

    /// Serialized form: magic, `u32` N, `u32` E, then per record
    /// `u32` id length, id bytes, `u32` label and E `f32`, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(15 + self.len() * (8 + 4 * self.dim + 16));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for i in 0..self.len() {
            let id = self.ids[i].as_bytes();
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id);
            out.extend_from_slice(&(self.labels[i] as u32).to_le_bytes());
            for &x in self.embedding(i) {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses [`Database::to_bytes`] output. Stored `f32` rows are
    /// re-normalized in `f64`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("id is not utf-8: {e}")))?
                .to_owned();
            let label = r.u32()? as usize;
            let embedding = (0..dim)
                .map(|_| r.f32().map(f64::from))
                .collect::<Result<Vec<f64>>>()?;
            records.push(EmbeddingRecord {
                id,
                label,
                embedding,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Database::build(&records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::l2_norm;

    fn rec(id: &str, label: usize, embedding: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            id: id.into(),
            label,
            embedding,
        }
    }

    fn small() -> Vec<EmbeddingRecord> {
        vec![
            rec("a", 0, vec![1.0, 0.0, 0.0]),
            rec("b", 1, vec![0.0, 2.0, 0.0]),
            rec("c", 1, vec![1.0, 1.0, 0.0]),
            rec("d", 2, vec![0.0, 0.0, -3.0]),
        ]
    }

    #[test]
    fn build_reports_size_and_normalizes() {
        let db = Database::build(&small()).unwrap();
        assert_eq!(db.len(), 4);
        assert_eq!(db.dim(), 3);
        for i in 0..db.len() {
            assert!((l2_norm(db.embedding(i)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn build_errors() {
        let mut dup = small();
        dup.push(rec("b", 0, vec![1.0, 1.0, 1.0]));
        let err = Database::build(&dup).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
        let mut ragged = small();
        ragged.push(rec("e", 0, vec![1.0]));
        assert!(matches!(Database::build(&ragged), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(Database::build(&[]), Err(Error::EmptyInput(_))));
        assert!(Database::build(&[rec("z", 0, vec![0.0, 0.0])]).is_err());
    }

    #[test]
    fn self_retrieval_first() {
        let db = Database::build(&small()).unwrap();
        let r = db.query_topm(&[0.0, 5.0, 0.0], 2).unwrap();
        assert_eq!(r.hits[0].id, "b");
        assert!((r.hits[0].similarity - 1.0).abs() < 1e-12);
        assert_eq!(r.hits[1].id, "c");
    }

    #[test]
    fn topm_beyond_size_returns_everything_sorted() {
        let db = Database::build(&small()).unwrap();
        let r = db.query_topm(&[1.0, 0.5, 0.0], 10).unwrap();
        let ids: Vec<&str> = r.hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b", "d"]);
        assert!(r.hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn ties_break_by_id() {
        let recs = vec![
            rec("z", 0, vec![1.0, 0.0]),
            rec("m", 1, vec![2.0, 0.0]),
            rec("a", 2, vec![0.5, 0.0]),
        ];
        let db = Database::build(&recs).unwrap();
        let r = db.query_topm(&[1.0, 0.0], 2).unwrap();
        let ids: Vec<&str> = r.hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["a", "m"]);
    }

    #[test]
    fn query_errors() {
        let db = Database::build(&small()).unwrap();
        assert!(db.query_topm(&[1.0, 0.0], 3).is_err());
        assert!(db.query_topm(&[1.0, 0.0, 0.0], 0).is_err());
        assert!(db.query_topm(&[0.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn threshold_filter() {
        let r = SearchResult {
            hits: [0.9, 0.7, 0.5]
                .iter()
                .enumerate()
                .map(|(i, &s)| Hit {
                    id: i.to_string(),
                    label: 0,
                    similarity: s,
                })
                .collect(),
        };
        assert_eq!(filter_by_threshold(&r, -1.0), r);
        assert!(filter_by_threshold(&r, 1.0).is_empty());
        let kept = filter_by_threshold(&r, 0.7);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.hits[0].similarity, 0.9);
    }

    #[test]
    fn binary_layout() {
        let db = Database::build(&[rec("ab", 7, vec![3.0, 4.0])]).unwrap();
        let bytes = db.to_bytes();
        let mut expected = b"CCFRDB1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(7u32.to_le_bytes());
        expected.extend(0.6f32.to_le_bytes());
        expected.extend(0.8f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn load_rejects_corruption() {
        let bytes = Database::build(&small()).unwrap().to_bytes();
        assert!(Database::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Database::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Database::from_bytes(&long).is_err());
    }

    #[test]
    fn persisted_database_roundtrips() {
        let db = Database::build(&small()).unwrap();
        let back = Database::from_bytes(&db.to_bytes()).unwrap();
        assert_eq!(back.len(), db.len());
        assert_eq!(back.to_bytes(), db.to_bytes());
        for i in 0..db.len() {
            assert_eq!(back.id(i), db.id(i));
            assert_eq!(back.label(i), db.label(i));
            for (a, b) in back.embedding(i).iter().zip(db.embedding(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

//! Frozen text embeddings: the `GEMB` vector file, truncation, and a
//! deterministic hashing encoder used when no external model output is
//! available.
//!
//! Vector file layout (little-endian):
//!
//! ```text
//! magic   b"GEMB"
//! version u32 = 1
//! count   u32
//! dim     u32
//! payload count * dim f32, row-major
//! ```
//!
//! Row `i` belongs to line `i` of the UTF-8 sidecar id file.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GEMB";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TEXT_DIM: usize = 384;

/// Id-indexed table of fixed-length `f32` vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
    pub source_tag: String,
}

/// Equality over contents; `source_tag` is provenance only.
impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingStore {
    pub fn new(dim: usize, source_tag: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        Ok(EmbeddingStore {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
            source_tag: source_tag.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Appends a vector; rejects wrong length, non-finite components and
    /// duplicate ids.
    pub fn insert<T: Copy + Into<f64>>(&mut self, id: impl Into<String>, vector: &[T]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector for `{id}` has length {}, store dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Format(format!("duplicate id `{id}`")));
        }
        let start = self.data.len();
        for &v in vector {
            let v = v.into() as f32;
            if !v.is_finite() {
                self.data.truncate(start);
                return Err(Error::NonFinite(format!("component of `{id}`")));
            }
            self.data.push(v);
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        Ok(())
    }

    /// Gathers the rows for `ids` into an `f64` matrix.
    pub fn matrix_for<S: AsRef<str>>(&self, ids: &[S]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.dim));
        for (r, id) in ids.iter().enumerate() {
            let v = self
                .get(id.as_ref())
                .ok_or_else(|| Error::MissingEmbedding(id.as_ref().to_string()))?;
            for (dst, &src) in out.row_mut(r).iter_mut().zip(v) {
                *dst = src as f64;
            }
        }
        Ok(out)
    }
}

pub fn load_embeddings(vector_path: impl AsRef<Path>, id_path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let (vp, ip) = (vector_path.as_ref(), id_path.as_ref());
    let vf = std::fs::File::open(vp).map_err(|e| Error::io(vp, e))?;
    let idf = std::fs::File::open(ip).map_err(|e| Error::io(ip, e))?;
    read_embeddings(BufReader::new(vf), BufReader::new(idf))
}

pub fn read_embeddings<V: Read, I: BufRead>(mut vectors: V, ids: I) -> Result<EmbeddingStore> {
    let mut payload = Vec::new();
    vectors
        .read_to_end(&mut payload)
        .map_err(|e| Error::io("<vectors>", e))?;
    if payload.len() < 16 {
        return Err(Error::Format("truncated header".into()));
    }
    if &payload[..4] != MAGIC {
        return Err(Error::Format("magic mismatch: not a GEMB vector file".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(payload[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported GEMB version {version}")));
    }
    let count = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("header size overflow".into()))?;
    let body = &payload[16..];
    if body.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: expected {expected} bytes, found {}",
            body.len()
        )));
    }
    if body.len() > expected {
        return Err(Error::Format(format!(
            "trailing bytes after payload: expected {expected}, found {}",
            body.len()
        )));
    }

    let id_list: Vec<String> = ids
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io("<ids>", e))?;
    if id_list.len() != count {
        return Err(Error::Format(format!(
            "id/vector count mismatch: {} ids, {count} vectors",
            id_list.len()
        )));
    }

    let mut store = EmbeddingStore::new(dim, "external")?;
    store.data.reserve(count * dim);
    for (row, id) in id_list.into_iter().enumerate() {
        if store.index.contains_key(&id) {
            return Err(Error::line(row + 1, format!("duplicate id `{id}`")));
        }
        let chunk = &body[row * dim * 4..(row + 1) * dim * 4];
        for b in chunk.chunks_exact(4) {
            let v = f32::from_le_bytes(b.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("NaN/Inf component in vector of `{id}`")));
            }
            store.data.push(v);
        }
        store.index.insert(id.clone(), row);
        store.ids.push(id);
    }
    Ok(store)
}

pub fn write_embeddings(
    store: &EmbeddingStore,
    vector_path: impl AsRef<Path>,
    id_path: impl AsRef<Path>,
) -> Result<()> {
    let (vp, ip) = (vector_path.as_ref(), id_path.as_ref());
    let mut vf = std::io::BufWriter::new(std::fs::File::create(vp).map_err(|e| Error::io(vp, e))?);
    let mut idf = std::io::BufWriter::new(std::fs::File::create(ip).map_err(|e| Error::io(ip, e))?);
    write_embeddings_to(store, &mut vf, &mut idf)?;
    vf.flush().map_err(|e| Error::io(vp, e))?;
    idf.flush().map_err(|e| Error::io(ip, e))
}

pub fn write_embeddings_to<V: Write, I: Write>(store: &EmbeddingStore, mut vectors: V, mut ids: I) -> Result<()> {
    let count = u32::try_from(store.len()).map_err(|_| Error::Format("too many vectors".into()))?;
    let dim = u32::try_from(store.dim).map_err(|_| Error::Format("dim too large".into()))?;
    let io = |e| Error::io("<embeddings>", e);
    vectors.write_all(MAGIC).map_err(io)?;
    vectors.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    vectors.write_all(&count.to_le_bytes()).map_err(io)?;
    vectors.write_all(&dim.to_le_bytes()).map_err(io)?;
    for v in &store.data {
        vectors.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for id in &store.ids {
        if id.contains('\n') || id.contains('\r') {
            return Err(Error::Format(format!("id `{id:?}` contains a line break")));
        }
        writeln!(ids, "{id}").map_err(io)?;
    }
    Ok(())
}

/// Keeps the first `k` components of every vector.
pub fn truncate_dims(store: &EmbeddingStore, k: usize) -> Result<EmbeddingStore> {
    if k == 0 || k > store.dim {
        return Err(Error::InvalidArgument(format!(
            "cannot truncate dim {} to {k}",
            store.dim
        )));
    }
    let mut data = Vec::with_capacity(store.len() * k);
    for i in 0..store.len() {
        data.extend_from_slice(&store.row(i)[..k]);
    }
    Ok(EmbeddingStore {
        dim: k,
        ids: store.ids.clone(),
        index: store.index.clone(),
        data,
        source_tag: store.source_tag.clone(),
    })
}

/// Scales every vector to unit L2 norm.
pub fn l2_normalize_store(store: &EmbeddingStore) -> Result<EmbeddingStore> {
    let mut out = store.clone();
    for (i, id) in store.ids.iter().enumerate() {
        let row = &mut out.data[i * store.dim..(i + 1) * store.dim];
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm(Some(id.clone())));
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
    Ok(out)
}

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over `seed (LE) ++ token`, finished with the splitmix64 mixer.
pub fn token_hash(token: &str, seed: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Signed feature-hashing encoder: each token adds `±1` to bucket
/// `hash % dim` (sign from the top hash bit), then the vector is
/// L2-normalized. Stand-in for an external sentence encoder in tests and
/// quickstarts; it only preserves lexical overlap.
pub fn fallback_encode(text: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 8 {
        return Err(Error::InvalidArgument(format!(
            "fallback encoder needs dim >= 8, got {dim}"
        )));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "text `{text}` has no tokens"
        )));
    }
    let mut v = vec![0.0f64; dim];
    for t in &tokens {
        let h = token_hash(t, seed);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNorm(Some(text.to_string())));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Builds a store by running [`fallback_encode`] over `(id, text)` pairs.
pub fn fallback_store<'a, I>(items: I, dim: usize, seed: u64) -> Result<EmbeddingStore>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut store = EmbeddingStore::new(dim, "fallback")?;
    for (id, text) in items {
        store.insert(id, &fallback_encode(text, dim, seed)?)?;
    }
    Ok(store)
}

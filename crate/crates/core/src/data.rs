//! Package data model, ingestion, and stratified splitting.
//!
//! Embeddings file: `AIRDEMB1`, `u32` rows, `u32` dim, then `rows * dim`
//! little-endian `f32` values row-major. Metadata file: one UTF-8 line per
//! embedding row, `package_id<TAB>metadata`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::binio::{Reader, Writer};
use crate::error::{AirdError, Result};

pub const EMBEDDINGS_MAGIC: &[u8; 8] = b"AIRDEMB1";

/// One image embedding paired with one structured metadata identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Package {
    pub package_id: u64,
    pub image_embedding: Vec<f32>,
    pub metadata_id: u32,
}

/// Bidirectional map between metadata strings and dense ids, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id for `name`, assigning the next free id on first sight.
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl<S: AsRef<str>> FromIterator<S> for Vocabulary {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut v = Vocabulary::new();
        for s in iter {
            v.intern(s.as_ref());
        }
        v
    }
}

/// An ordered, immutable collection of packages over a shared vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    packages: Vec<Package>,
    vocabulary: Vocabulary,
    dim: usize,
}

impl Dataset {
    /// Validates ids, dimensions and finiteness. Embeddings are taken as given.
    pub fn new(packages: Vec<Package>, vocabulary: Vocabulary, dim: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(packages.len());
        for p in &packages {
            if p.image_embedding.len() != dim {
                return Err(AirdError::ingestion(format!(
                    "package {} has dimension {}, expected {dim}",
                    p.package_id,
                    p.image_embedding.len()
                )));
            }
            if p.image_embedding.iter().any(|x| !x.is_finite()) {
                return Err(AirdError::ingestion(format!(
                    "package {} has a non-finite component",
                    p.package_id
                )));
            }
            if p.metadata_id as usize >= vocabulary.len() {
                return Err(AirdError::ingestion(format!(
                    "package {} references metadata id {} outside vocabulary of {}",
                    p.package_id,
                    p.metadata_id,
                    vocabulary.len()
                )));
            }
            if !seen.insert(p.package_id) {
                return Err(AirdError::ingestion(format!(
                    "duplicate package_id {}",
                    p.package_id
                )));
            }
        }
        Ok(Self {
            packages,
            vocabulary,
            dim,
        })
    }

    pub fn packages(&self) -> &[Package] {
        &self.packages
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.packages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packages.is_empty()
    }

    /// Package counts per metadata id, indexed by id.
    pub fn stratum_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocabulary.len()];
        for p in &self.packages {
            counts[p.metadata_id as usize] += 1;
        }
        counts
    }

    /// A dataset over the same vocabulary holding the packages selected by `keep`.
    pub fn subset(&self, mut keep: impl FnMut(usize, &Package) -> bool) -> Dataset {
        let packages = self
            .packages
            .iter()
            .enumerate()
            .filter(|(i, p)| keep(*i, p))
            .map(|(_, p)| p.clone())
            .collect();
        Dataset {
            packages,
            vocabulary: self.vocabulary.clone(),
            dim: self.dim,
        }
    }
}

/// Divides `v` by its Euclidean norm (computed in `f64`).
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = crate::dot(v, v).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(AirdError::DegenerateEmbedding);
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

pub fn read_embeddings(path: &Path) -> Result<(usize, Vec<Vec<f32>>)> {
    let bytes = fs::read(path)?;
    decode_embeddings(&bytes)
}

pub(crate) fn decode_embeddings(bytes: &[u8]) -> Result<(usize, Vec<Vec<f32>>)> {
    let mut r = Reader::new(bytes);
    r.expect_magic(EMBEDDINGS_MAGIC)
        .map_err(|e| AirdError::ingestion(e.to_string()))?;
    let rows = r.u32().map_err(|e| AirdError::ingestion(e.to_string()))? as usize;
    let dim = r.u32().map_err(|e| AirdError::ingestion(e.to_string()))? as usize;
    if dim == 0 {
        return Err(AirdError::ingestion("embedding dimension is zero"));
    }
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let row = r.f32s(dim).map_err(|_| {
            AirdError::ingestion(format!(
                "embeddings file declares {rows}x{dim} values but is truncated"
            ))
        })?;
        out.push(row);
    }
    if !r.is_empty() {
        return Err(AirdError::ingestion(
            "embeddings file has trailing bytes beyond the declared size",
        ));
    }
    Ok((dim, out))
}

pub fn write_embeddings(path: &Path, dim: usize, rows: &[&[f32]]) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(EMBEDDINGS_MAGIC);
    w.len_u32(rows.len())?;
    w.len_u32(dim)?;
    for row in rows {
        if row.len() != dim {
            return Err(AirdError::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        w.f32s(row);
    }
    fs::write(path, w.buf)?;
    Ok(())
}

fn parse_metadata(text: &str) -> Result<Vec<(u64, &str)>> {
    let mut out = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(out);
    }
    for (lineno, line) in body.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let (id, meta) = line.split_once('\t').ok_or_else(|| {
            AirdError::ingestion(format!("metadata line {}: missing tab", lineno + 1))
        })?;
        let id: u64 = id.parse().map_err(|_| {
            AirdError::ingestion(format!("metadata line {}: bad package_id {id:?}", lineno + 1))
        })?;
        out.push((id, meta));
    }
    Ok(out)
}

/// Loads and L2-normalizes a dataset; the vocabulary follows first appearance.
pub fn load_dataset(embeddings_path: &Path, metadata_path: &Path) -> Result<Dataset> {
    load_dataset_with_vocabulary(embeddings_path, metadata_path, Vocabulary::new())
}

/// As [`load_dataset`], starting from `vocabulary` so ids agree with another
/// file (a test split read against its train split). New names are appended.
pub fn load_dataset_with_vocabulary(
    embeddings_path: &Path,
    metadata_path: &Path,
    mut vocabulary: Vocabulary,
) -> Result<Dataset> {
    let (dim, rows) = read_embeddings(embeddings_path)?;
    let text = fs::read_to_string(metadata_path)?;
    let records = parse_metadata(&text)?;
    if records.len() != rows.len() {
        return Err(AirdError::ingestion(format!(
            "count mismatch: {} embeddings but {} metadata records",
            rows.len(),
            records.len()
        )));
    }
    let mut packages = Vec::with_capacity(rows.len());
    for (row, (package_id, meta)) in rows.into_iter().zip(records) {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(AirdError::ingestion(format!(
                "package {package_id} has a non-finite component"
            )));
        }
        let image_embedding = normalize(&row).map_err(|_| {
            AirdError::ingestion(format!("package {package_id}: degenerate embedding"))
        })?;
        packages.push(Package {
            package_id,
            image_embedding,
            metadata_id: vocabulary.intern(meta),
        });
    }
    Dataset::new(packages, vocabulary, dim)
}

/// Writes the two files `load_dataset` reads.
pub fn save_dataset(ds: &Dataset, embeddings_path: &Path, metadata_path: &Path) -> Result<()> {
    let rows: Vec<&[f32]> = ds
        .packages
        .iter()
        .map(|p| p.image_embedding.as_slice())
        .collect();
    write_embeddings(embeddings_path, ds.dim, &rows)?;
    let mut text = String::new();
    for p in &ds.packages {
        let name = ds.vocabulary.name(p.metadata_id).expect("validated id");
        if name.contains(['\t', '\n']) {
            return Err(AirdError::ingestion(format!(
                "metadata {name:?} contains a tab or newline"
            )));
        }
        text.push_str(&p.package_id.to_string());
        text.push('\t');
        text.push_str(name);
        text.push('\n');
    }
    fs::write(metadata_path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: Dataset,
    pub test: Dataset,
}

/// Number of packages of a stratum of size `n` that go to train.
pub fn train_quota(n: usize, train_fraction: f64) -> usize {
    // The epsilon keeps exact products such as 0.8 * 5 from rounding up.
    let q = (train_fraction * n as f64 - 1e-9).ceil() as usize;
    q.clamp(1.min(n), n)
}

/// Per metadata id, `ceil(fraction * n)` randomly chosen packages go to train.
///
/// Both halves keep the full vocabulary and the input package order.
pub fn split_stratified(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitPair> {
    if ds.is_empty() {
        return Err(AirdError::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(AirdError::config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut strata: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, p) in ds.packages.iter().enumerate() {
        strata.entry(p.metadata_id).or_default().push(i);
    }
    let mut rng = crate::seeded_rng(seed);
    let mut in_train = vec![false; ds.len()];
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let quota = train_quota(members.len(), train_fraction);
        for &i in &members[..quota] {
            in_train[i] = true;
        }
    }
    Ok(SplitPair {
        train: ds.subset(|i, _| in_train[i]),
        test: ds.subset(|i, _| !in_train[i]),
    })
}

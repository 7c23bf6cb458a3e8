//! Reference-dataset retrieval engine.
//!
//! Cascaded approximate search: an inverted file over coarse k-means cells,
//! product-quantized residual codes scanned with asymmetric distance tables,
//! then exact cosine reranking of a shortlist against the stored full
//! vectors. Metadata lookups go through an exact `metadata_id -> packages`
//! map and rank the stratum by image similarity.

mod io;
pub mod kmeans;

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use crate::data::Dataset;
use crate::error::{check_dim, AirdError, Result};

pub use io::{load_index, save_index, INDEX_MAGIC, INDEX_VERSION};
pub use kmeans::kmeans;

/// A retrieved package with its exact cosine similarity to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub package_id: u64,
    pub metadata_id: u32,
    pub similarity: f64,
}

/// Descending similarity, then ascending package id.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.package_id.cmp(&b.package_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexParams {
    /// Coarse cells; `None` picks `ceil(sqrt(n))` clamped to `[16, 4096]` (and to `n`).
    pub nlist: Option<usize>,
    pub m_sub: usize,
    pub bits: u32,
    pub kmeans_iters: usize,
    /// Cap on residuals used per sub-quantizer, as a multiple of the codebook size.
    pub pq_train_per_code: usize,
    pub seed: u64,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            nlist: None,
            m_sub: 8,
            bits: 8,
            kmeans_iters: 12,
            pq_train_per_code: 32,
            seed: 0,
        }
    }
}

pub fn default_nlist(n: usize) -> usize {
    let root = (n as f64).sqrt().ceil() as usize;
    root.clamp(16, 4096).min(n.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub k: usize,
    pub nprobe: usize,
    pub shortlist: usize,
}

impl SearchParams {
    /// Defaults: `nprobe = 16`, `shortlist = 10 * k`.
    pub fn new(k: usize) -> Self {
        Self {
            k,
            nprobe: 16,
            shortlist: 10 * k,
        }
    }
}

/// Probe depth and shortlist multiplier shared by every retrieval call site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub nprobe: usize,
    /// Shortlist size as a multiple of `k`.
    pub shortlist_factor: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            nprobe: 16,
            shortlist_factor: 10,
        }
    }
}

impl ProbeConfig {
    pub fn params(&self, k: usize) -> SearchParams {
        SearchParams {
            k,
            nprobe: self.nprobe,
            shortlist: self.shortlist_factor.max(1) * k,
        }
    }
}

/// Filters applied after reranking and before the top-k cut.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Exclusion {
    pub metadata_id: Option<u32>,
    pub package_id: Option<u64>,
}

impl Exclusion {
    fn admits(&self, package_id: u64, metadata_id: u32) -> bool {
        self.metadata_id != Some(metadata_id) && self.package_id != Some(package_id)
    }

    fn is_empty(&self) -> bool {
        self.metadata_id.is_none() && self.package_id.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct InvertedList {
    pub ids: Vec<u64>,
    /// `ids.len() * m_sub` code bytes.
    pub codes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexModel {
    pub(crate) dim: usize,
    pub(crate) nlist: usize,
    pub(crate) m_sub: usize,
    pub(crate) bits: u32,
    pub(crate) coarse: Vec<f32>,
    /// `m_sub × 2^bits × (dim / m_sub)`.
    pub(crate) codebooks: Vec<f32>,
    pub(crate) lists: Vec<InvertedList>,
    /// Sorted by package id.
    pub(crate) ids: Vec<u64>,
    pub(crate) metadata: Vec<u32>,
    pub(crate) vectors: Vec<f32>,
    pub(crate) slots: HashMap<u64, usize>,
    pub(crate) meta_map: BTreeMap<u32, Vec<u64>>,
}

fn check_params(dim: usize, m_sub: usize, bits: u32) -> Result<()> {
    if m_sub == 0 || dim % m_sub != 0 {
        return Err(AirdError::config(format!(
            "dimension {dim} is not divisible by m_sub={m_sub}"
        )));
    }
    if !(1..=8).contains(&bits) {
        return Err(AirdError::config(format!(
            "bits must lie in 1..=8, got {bits}"
        )));
    }
    Ok(())
}

impl IndexModel {
    pub fn build(ds: &Dataset, params: &IndexParams) -> Result<Self> {
        if ds.is_empty() {
            return Err(AirdError::EmptyDataset);
        }
        let dim = ds.dim();
        check_params(dim, params.m_sub, params.bits)?;
        let n = ds.len();
        let nlist = params.nlist.unwrap_or_else(|| default_nlist(n));
        if nlist == 0 || nlist > n {
            return Err(AirdError::config(format!(
                "nlist must lie in 1..={n}, got {nlist}"
            )));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| ds.packages()[i].package_id);
        let mut ids = Vec::with_capacity(n);
        let mut metadata = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * dim);
        for &i in &order {
            let p = &ds.packages()[i];
            ids.push(p.package_id);
            metadata.push(p.metadata_id);
            vectors.extend_from_slice(&p.image_embedding);
        }

        let coarse = kmeans(&vectors, dim, nlist, params.kmeans_iters, params.seed)?;
        let assignment: Vec<usize> = vectors
            .chunks_exact(dim)
            .map(|v| kmeans::nearest(v, &coarse, dim).0)
            .collect();
        let residuals: Vec<f32> = vectors
            .chunks_exact(dim)
            .zip(&assignment)
            .flat_map(|(v, &c)| {
                let cc = &coarse[c * dim..(c + 1) * dim];
                v.iter().zip(cc).map(|(&x, &y)| x - y)
            })
            .collect();

        let m_sub = params.m_sub;
        let dsub = dim / m_sub;
        let ksub = 1usize << params.bits;
        let train_rows = sample_rows(n, ksub * params.pq_train_per_code.max(1), params.seed);
        let mut codebooks = Vec::with_capacity(m_sub * ksub * dsub);
        for m in 0..m_sub {
            let sub: Vec<f32> = train_rows
                .iter()
                .flat_map(|&r| residuals[r * dim + m * dsub..r * dim + (m + 1) * dsub].iter().copied())
                .collect();
            let k = ksub.min(train_rows.len());
            let seed = params.seed.wrapping_add(1 + m as u64);
            let mut book = kmeans(&sub, dsub, k, params.kmeans_iters, seed)?;
            // Pad small codebooks; duplicates never win a tie against the original.
            while book.len() < ksub * dsub {
                let first: Vec<f32> = book[..dsub].to_vec();
                book.extend_from_slice(&first);
            }
            codebooks.extend_from_slice(&book);
        }

        let mut lists = vec![
            InvertedList {
                ids: Vec::new(),
                codes: Vec::new(),
            };
            nlist
        ];
        for (row, &c) in assignment.iter().enumerate() {
            let r = &residuals[row * dim..(row + 1) * dim];
            let list = &mut lists[c];
            list.ids.push(ids[row]);
            for m in 0..m_sub {
                let book = &codebooks[m * ksub * dsub..(m + 1) * ksub * dsub];
                let code = kmeans::nearest(&r[m * dsub..(m + 1) * dsub], book, dsub).0;
                list.codes.push(code as u8);
            }
        }

        let mut meta_map: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        for (&id, &m) in ids.iter().zip(&metadata) {
            meta_map.entry(m).or_default().push(id);
        }
        let slots = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(Self {
            dim,
            nlist,
            m_sub,
            bits: params.bits,
            coarse,
            codebooks,
            lists,
            ids,
            metadata,
            vectors,
            slots,
            meta_map,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nlist(&self) -> usize {
        self.nlist
    }

    pub fn m_sub(&self) -> usize {
        self.m_sub
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, package_id: u64) -> bool {
        self.slots.contains_key(&package_id)
    }

    /// Indexed package ids, ascending.
    pub fn package_ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, package_id: u64) -> Option<&[f32]> {
        self.slots
            .get(&package_id)
            .map(|&s| &self.vectors[s * self.dim..(s + 1) * self.dim])
    }

    pub fn metadata_of(&self, package_id: u64) -> Option<u32> {
        self.slots.get(&package_id).map(|&s| self.metadata[s])
    }

    /// Package ids carrying `metadata_id`, ascending.
    pub fn stratum(&self, metadata_id: u32) -> Option<&[u64]> {
        self.meta_map.get(&metadata_id).map(Vec::as_slice)
    }

    pub fn metadata_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.meta_map.keys().copied()
    }

    /// Sizes of the inverted lists.
    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(|l| l.ids.len()).collect()
    }

    fn hit_for_slot(&self, slot: usize, query: &[f32]) -> Hit {
        Hit {
            package_id: self.ids[slot],
            metadata_id: self.metadata[slot],
            similarity: crate::dot(query, &self.vectors[slot * self.dim..(slot + 1) * self.dim]),
        }
    }

    /// Approximate distances for every entry of the `nprobe` nearest lists, as `(distance, package_id)`.
    fn scan(&self, query: &[f32], nprobe: usize) -> Vec<(f64, u64)> {
        let dim = self.dim;
        let dsub = dim / self.m_sub;
        let ksub = 1usize << self.bits;
        let mut cells: Vec<(f64, usize)> = self
            .coarse
            .chunks_exact(dim)
            .enumerate()
            .map(|(j, c)| (crate::l2_sq(query, c), j))
            .collect();
        cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out = Vec::new();
        let mut table = vec![0f64; self.m_sub * ksub];
        let mut residual = vec![0f32; dim];
        for &(_, cell) in cells.iter().take(nprobe) {
            let list = &self.lists[cell];
            if list.ids.is_empty() {
                continue;
            }
            let c = &self.coarse[cell * dim..(cell + 1) * dim];
            for ((r, &q), &x) in residual.iter_mut().zip(query).zip(c) {
                *r = q - x;
            }
            for m in 0..self.m_sub {
                let rs = &residual[m * dsub..(m + 1) * dsub];
                let book = &self.codebooks[m * ksub * dsub..(m + 1) * ksub * dsub];
                for (t, word) in table[m * ksub..(m + 1) * ksub]
                    .iter_mut()
                    .zip(book.chunks_exact(dsub))
                {
                    *t = crate::l2_sq(rs, word);
                }
            }
            for (id, code) in list.ids.iter().zip(list.codes.chunks_exact(self.m_sub)) {
                let d: f64 = code
                    .iter()
                    .enumerate()
                    .map(|(m, &b)| table[m * ksub + b as usize])
                    .sum();
                out.push((d, *id));
            }
        }
        out
    }

    fn search_once(
        &self,
        query: &[f32],
        k: usize,
        nprobe: usize,
        shortlist: usize,
        exclusion: &Exclusion,
    ) -> Vec<Hit> {
        let mut approx = self.scan(query, nprobe);
        let cmp = |a: &(f64, u64), b: &(f64, u64)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if approx.len() > shortlist {
            approx.select_nth_unstable_by(shortlist, cmp);
            approx.truncate(shortlist);
        }
        let mut hits: Vec<Hit> = approx
            .iter()
            .map(|&(_, id)| self.hit_for_slot(self.slots[&id], query))
            .filter(|h| exclusion.admits(h.package_id, h.metadata_id))
            .collect();
        hits.sort_by(hit_order);
        hits.truncate(k);
        hits
    }

    fn validate_query(&self, query: &[f32], nprobe: usize) -> Result<()> {
        if self.is_empty() {
            return Err(AirdError::EmptyIndex);
        }
        check_dim(self.dim, query.len())?;
        if nprobe == 0 {
            return Err(AirdError::config("nprobe must be at least 1"));
        }
        Ok(())
    }

    /// Top-`k` by exact cosine among the reranked shortlist of the probed lists.
    pub fn search(&self, query: &[f32], params: &SearchParams) -> Result<Vec<Hit>> {
        self.search_excluding(query, params, &Exclusion::default())
    }

    /// As [`search`](Self::search), dropping excluded hits before the top-k cut.
    ///
    /// When fewer than `k` hits survive, the shortlist doubles and the search is
    /// retried, escalating to the exhaustive scan.
    pub fn search_excluding(
        &self,
        query: &[f32],
        params: &SearchParams,
        exclusion: &Exclusion,
    ) -> Result<Vec<Hit>> {
        self.validate_query(query, params.nprobe)?;
        if params.k == 0 {
            return Ok(Vec::new());
        }
        let n = self.len();
        let mut nprobe = params.nprobe.min(self.nlist);
        let mut shortlist = params.shortlist.max(params.k).min(n);
        loop {
            let hits = self.search_once(query, params.k, nprobe, shortlist, exclusion);
            let exhaustive = shortlist >= n && nprobe >= self.nlist;
            if hits.len() >= params.k || exhaustive || exclusion.is_empty() {
                return Ok(hits);
            }
            shortlist = (shortlist * 2).min(n);
            if shortlist >= n {
                nprobe = self.nlist;
            }
        }
    }

    /// The `k` nearest packages whose metadata differs from `excluded_metadata_id`.
    pub fn search_excluding_metadata(
        &self,
        query: &[f32],
        k: usize,
        excluded_metadata_id: u32,
        nprobe: usize,
        shortlist: usize,
    ) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(AirdError::EmptyIndex);
        }
        if self.meta_map.keys().all(|&m| m == excluded_metadata_id) {
            return Err(AirdError::NoCounterfeitSource(excluded_metadata_id));
        }
        self.search_excluding(
            query,
            &SearchParams {
                k,
                nprobe,
                shortlist,
            },
            &Exclusion {
                metadata_id: Some(excluded_metadata_id),
                package_id: None,
            },
        )
    }

    /// Exact top-`k` by cosine to `query_image` among packages carrying `metadata_id`.
    ///
    /// Shorter strata are cycled to pad the result to exactly `k`.
    pub fn lookup_by_metadata(
        &self,
        metadata_id: u32,
        k: usize,
        query_image: &[f32],
    ) -> Result<Vec<Hit>> {
        self.lookup_by_metadata_excluding(metadata_id, k, query_image, None)
    }

    /// As [`lookup_by_metadata`](Self::lookup_by_metadata), leaving out `exclude_package`
    /// unless it is the stratum's only member.
    pub fn lookup_by_metadata_excluding(
        &self,
        metadata_id: u32,
        k: usize,
        query_image: &[f32],
        exclude_package: Option<u64>,
    ) -> Result<Vec<Hit>> {
        check_dim(self.dim, query_image.len())?;
        let stratum = self
            .meta_map
            .get(&metadata_id)
            .ok_or(AirdError::UnknownMetadata(metadata_id))?;
        let mut hits: Vec<Hit> = stratum
            .iter()
            .filter(|&&id| Some(id) != exclude_package || stratum.len() == 1)
            .map(|id| self.hit_for_slot(self.slots[id], query_image))
            .collect();
        hits.sort_by(hit_order);
        Ok(pad_cyclic(hits, k))
    }

    /// Exhaustive cosine scan; the reference the approximate path is measured against.
    pub fn exhaustive_search(&self, query: &[f32], k: usize, exclusion: &Exclusion) -> Vec<Hit> {
        let mut hits: Vec<Hit> = (0..self.len())
            .map(|s| self.hit_for_slot(s, query))
            .filter(|h| exclusion.admits(h.package_id, h.metadata_id))
            .collect();
        hits.sort_by(hit_order);
        hits.truncate(k);
        hits
    }
}

/// Repeats `hits` in order until exactly `k` entries (empty stays empty).
pub fn pad_cyclic<T: Clone>(mut hits: Vec<T>, k: usize) -> Vec<T> {
    if hits.is_empty() {
        return hits;
    }
    if hits.len() >= k {
        hits.truncate(k);
        return hits;
    }
    let base = hits.clone();
    hits.extend(base.iter().cycle().take(k - base.len()).cloned());
    hits
}

/// Deterministic sample of at most `cap` row indices out of `n`, ascending.
fn sample_rows(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = crate::seeded_rng(seed ^ 0x5bd1_e995);
    let mut rows = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    rows.sort_unstable();
    rows
}

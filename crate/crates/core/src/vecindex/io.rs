//! Index file: `AIRDIDX1`, `u32` version, `u32` dim, nlist, m_sub, bits, then
//! coarse centroids, PQ codebooks, inverted lists (`u32` length, then
//! `u64` package id plus `m_sub` code bytes per entry), full vectors
//! (`u32` count, then `u64` package id plus `dim` floats each) and the
//! metadata map (`u32` count, then `u32` metadata id, `u32` length, `u64` ids).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::{check_params, IndexModel, InvertedList};
use crate::binio::{Reader, Writer};
use crate::error::{AirdError, Result};

pub const INDEX_MAGIC: &[u8; 8] = b"AIRDIDX1";
pub const INDEX_VERSION: u32 = 1;

impl IndexModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.len_u32(self.dim)?;
        w.len_u32(self.nlist)?;
        w.len_u32(self.m_sub)?;
        w.u32(self.bits);
        w.f32s(&self.coarse);
        w.f32s(&self.codebooks);
        for list in &self.lists {
            w.len_u32(list.ids.len())?;
            for (id, code) in list.ids.iter().zip(list.codes.chunks_exact(self.m_sub)) {
                w.u64(*id);
                w.bytes(code);
            }
        }
        w.len_u32(self.ids.len())?;
        for (id, v) in self.ids.iter().zip(self.vectors.chunks_exact(self.dim)) {
            w.u64(*id);
            w.f32s(v);
        }
        w.len_u32(self.meta_map.len())?;
        for (m, ids) in &self.meta_map {
            w.u32(*m);
            w.len_u32(ids.len())?;
            for id in ids {
                w.u64(*id);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(INDEX_MAGIC)?;
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(AirdError::format(format!(
                "unsupported index version {version}"
            )));
        }
        let dim = r.u32()? as usize;
        let nlist = r.u32()? as usize;
        let m_sub = r.u32()? as usize;
        let bits = r.u32()?;
        if dim == 0 || nlist == 0 {
            return Err(AirdError::format("zero dimension or nlist"));
        }
        check_params(dim, m_sub, bits).map_err(|e| AirdError::format(e.to_string()))?;
        let ksub = 1usize << bits;
        let coarse = r.f32s(nlist * dim)?;
        let codebooks = r.f32s(m_sub * ksub * (dim / m_sub))?;
        let mut lists = Vec::with_capacity(nlist);
        for _ in 0..nlist {
            let len = r.u32()? as usize;
            let mut list = InvertedList {
                ids: Vec::with_capacity(len.min(bytes.len())),
                codes: Vec::new(),
            };
            for _ in 0..len {
                list.ids.push(r.u64()?);
                list.codes.extend_from_slice(r.take(m_sub)?);
            }
            if list.codes.iter().any(|&c| c as usize >= ksub) {
                return Err(AirdError::format("code byte exceeds codebook size"));
            }
            lists.push(list);
        }
        let count = r.u32()? as usize;
        let mut ids = Vec::with_capacity(count.min(bytes.len()));
        let mut vectors = Vec::new();
        for _ in 0..count {
            ids.push(r.u64()?);
            vectors.extend(r.f32s(dim)?);
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AirdError::format("full vectors not sorted by package id"));
        }
        let slots: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let groups = r.u32()? as usize;
        let mut meta_map = BTreeMap::new();
        let mut metadata = vec![u32::MAX; count];
        for _ in 0..groups {
            let m = r.u32()?;
            let len = r.u32()? as usize;
            let mut members = Vec::with_capacity(len.min(count));
            for _ in 0..len {
                let id = r.u64()?;
                let slot = *slots
                    .get(&id)
                    .ok_or_else(|| AirdError::format(format!("metadata map names unknown package {id}")))?;
                if metadata[slot] != u32::MAX {
                    return Err(AirdError::format(format!("package {id} in two metadata groups")));
                }
                metadata[slot] = m;
                members.push(id);
            }
            meta_map.insert(m, members);
        }
        r.finish()?;
        if metadata.contains(&u32::MAX) {
            return Err(AirdError::format("metadata map does not cover every package"));
        }
        let listed: usize = lists.iter().map(|l| l.ids.len()).sum();
        if listed != count || lists.iter().flat_map(|l| &l.ids).any(|id| !slots.contains_key(id)) {
            return Err(AirdError::format("inverted lists disagree with stored vectors"));
        }
        Ok(Self {
            dim,
            nlist,
            m_sub,
            bits,
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
}

pub fn save_index(idx: &IndexModel, path: &Path) -> Result<()> {
    fs::write(path, idx.to_bytes()?)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<IndexModel> {
    IndexModel::from_bytes(&fs::read(path)?)
}

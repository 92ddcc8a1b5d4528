use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::error::{Error, Result};
use crate::types::Rank;

/// Handle naming a registered memory region on some rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemoryToken {
    pub owner: Rank,
    pub region: u32,
    pub len: u64,
}

impl MemoryToken {
    pub const ENCODED_LEN: usize = 16;

    pub fn to_bytes(&self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[0..4].copy_from_slice(&self.owner.0.to_le_bytes());
        b[4..8].copy_from_slice(&self.region.to_le_bytes());
        b[8..16].copy_from_slice(&self.len.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Option<MemoryToken> {
        if b.len() < 16 {
            return None;
        }
        Some(MemoryToken {
            owner: Rank(u32::from_le_bytes(b[0..4].try_into().unwrap())),
            region: u32::from_le_bytes(b[4..8].try_into().unwrap()),
            len: u64::from_le_bytes(b[8..16].try_into().unwrap()),
        })
    }
}

type Region = Arc<Mutex<Vec<u8>>>;

/// Memory regions registered on one rank, addressable by remote
/// WRITE/READ. Region ids are never reused.
#[derive(Debug)]
pub struct RegionTable {
    owner: Rank,
    next: AtomicU32,
    regions: RwLock<HashMap<u32, Region>>,
}

impl RegionTable {
    pub fn new(owner: Rank) -> Self {
        RegionTable {
            owner,
            next: AtomicU32::new(0),
            regions: RwLock::new(HashMap::new()),
        }
    }

    pub fn register(&self, buf: Vec<u8>) -> Result<MemoryToken> {
        if buf.is_empty() {
            return Err(Error::invalid("cannot register a zero-length region"));
        }
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        let len = buf.len() as u64;
        self.regions.write().insert(id, Arc::new(Mutex::new(buf)));
        Ok(MemoryToken {
            owner: self.owner,
            region: id,
            len,
        })
    }

    /// Unregister and hand the memory back.
    pub fn deregister(&self, token: MemoryToken) -> Result<Vec<u8>> {
        self.check_owner(token)?;
        let r = self
            .regions
            .write()
            .remove(&token.region)
            .ok_or_else(|| Error::invalid("region is not registered"))?;
        let v = std::mem::take(&mut *r.lock());
        Ok(v)
    }

    fn check_owner(&self, token: MemoryToken) -> Result<()> {
        if token.owner != self.owner {
            return Err(Error::invalid(format!(
                "token of rank {} used on rank {}",
                token.owner, self.owner
            )));
        }
        Ok(())
    }

    fn region(&self, id: u32) -> Result<Region> {
        self.regions
            .read()
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::fatal(format!("region {id} is not registered")))
    }

    /// Copy `data` into region `id` at `offset`.
    pub fn write(&self, id: u32, offset: u64, data: &[u8]) -> Result<()> {
        let r = self.region(id)?;
        let mut r = r.lock();
        let (start, end) = bounds(offset, data.len(), r.len())?;
        r[start..end].copy_from_slice(data);
        Ok(())
    }

    /// Fill `out` from region `id` at `offset`.
    pub fn read(&self, id: u32, offset: u64, out: &mut [u8]) -> Result<()> {
        let r = self.region(id)?;
        let r = r.lock();
        let (start, end) = bounds(offset, out.len(), r.len())?;
        out.copy_from_slice(&r[start..end]);
        Ok(())
    }

    /// Run `f` over the region's bytes.
    pub fn with<R>(&self, token: MemoryToken, f: impl FnOnce(&mut [u8]) -> R) -> Result<R> {
        self.check_owner(token)?;
        let r = self
            .region(token.region)
            .map_err(|_| Error::invalid("region is not registered"))?;
        let mut g = r.lock();
        Ok(f(&mut g))
    }

    pub fn len(&self) -> usize {
        self.regions.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn bounds(offset: u64, len: usize, size: usize) -> Result<(usize, usize)> {
    let end = offset.checked_add(len as u64);
    match end {
        Some(end) if end <= size as u64 => Ok((offset as usize, end as usize)),
        _ => Err(Error::fatal(format!(
            "access [{offset}, +{len}) outside region of {size} bytes"
        ))),
    }
}

use serde::Serialize;

use crate::error::{Error, Result};

/// Assignment of users to shards: `uid mod num_shards`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ShardMap {
    num_shards: usize,
}

impl ShardMap {
    pub fn new(num_shards: usize) -> Result<Self> {
        if num_shards == 0 {
            return Err(Error::InvalidArgument("shard count must be positive".into()));
        }
        Ok(ShardMap { num_shards })
    }

    pub fn num_shards(&self) -> usize {
        self.num_shards
    }

    #[inline]
    pub fn route(&self, uid: u64) -> usize {
        (uid % self.num_shards as u64) as usize
    }

    /// Redistribute `(uid, value)` pairs over a new shard count.
    pub fn reshard<T>(&self, shards: Vec<Vec<(u64, T)>>, num_shards: usize) -> Result<(ShardMap, Vec<Vec<(u64, T)>>)> {
        let map = ShardMap::new(num_shards)?;
        let mut out: Vec<Vec<(u64, T)>> = (0..num_shards).map(|_| Vec::new()).collect();
        for (uid, value) in shards.into_iter().flatten() {
            out[map.route(uid)].push((uid, value));
        }
        Ok((map, out))
    }
}

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, TokenId};
use crate::error::{CapeError, Result};
use crate::par::Execution;

/// Euclidean distances from one origin token to every vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRow {
    pub origin: TokenId,
    pub distances: Vec<f64>,
}

impl DistanceRow {
    pub fn max(&self) -> f64 {
        self.distances.iter().copied().fold(0.0, f64::max)
    }
}

#[inline]
fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn distance_row(table: &EmbeddingTable, origin: TokenId) -> Result<DistanceRow> {
    if origin.index() >= table.rows() {
        return Err(CapeError::TokenOutOfRange { id: origin.index(), size: table.rows() });
    }
    let base = table.row(origin);
    let distances = (0..table.rows()).map(|j| euclidean(base, table.row(TokenId::from_index(j)))).collect();
    Ok(DistanceRow { origin, distances })
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    vocab_size: usize,
    table_sha256: String,
}

const CACHE_MAGIC: &[u8; 4] = b"CDST";

/// Lazily computed, shared distance rows.
///
/// Rows are deterministic, so two threads racing to fill the same origin
/// store identical values.
#[derive(Debug)]
pub struct DistanceCache {
    table: Arc<EmbeddingTable>,
    rows: RwLock<HashMap<TokenId, Arc<DistanceRow>>>,
}

impl DistanceCache {
    pub fn new(table: Arc<EmbeddingTable>) -> Self {
        DistanceCache { table, rows: RwLock::new(HashMap::new()) }
    }

    pub fn table(&self) -> &Arc<EmbeddingTable> {
        &self.table
    }

    pub fn get(&self, origin: TokenId) -> Result<Arc<DistanceRow>> {
        if let Some(row) = self.rows.read().expect("distance cache poisoned").get(&origin) {
            return Ok(Arc::clone(row));
        }
        let row = Arc::new(distance_row(&self.table, origin)?);
        self.rows.write().expect("distance cache poisoned").insert(origin, Arc::clone(&row));
        Ok(row)
    }

    pub fn cached_rows(&self) -> usize {
        self.rows.read().expect("distance cache poisoned").len()
    }

    /// Materializes every row (the opt-in full setup mode).
    pub fn precompute_all(&self, exec: Execution) -> Result<()> {
        let rows = exec.try_map_range(self.table.rows(), |i| distance_row(&self.table, TokenId::from_index(i)))?;
        let mut map = self.rows.write().expect("distance cache poisoned");
        for row in rows {
            map.insert(row.origin, Arc::new(row));
        }
        Ok(())
    }

    /// Hex SHA-256 of the binary embedding encoding, used to tie a saved
    /// matrix to the table it came from.
    pub fn table_fingerprint(table: &EmbeddingTable) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(table.to_binary_bytes(None)))
    }

    /// Writes the full `|V| x |V|` f64 matrix (computing missing rows).
    pub fn save(&self, path: &Path, exec: Execution) -> Result<()> {
        self.precompute_all(exec)?;
        let n = self.table.rows();
        let header =
            serde_json::to_vec(&CacheHeader { vocab_size: n, table_sha256: Self::table_fingerprint(&self.table) })?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CapeError::io(dir, e))?;
        let io = |e| CapeError::io(path, e);
        {
            let mut w = std::io::BufWriter::new(tmp.as_file_mut());
            w.write_all(CACHE_MAGIC).map_err(io)?;
            w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&header).map_err(io)?;
            let rows = self.rows.read().expect("distance cache poisoned");
            for i in 0..n {
                let row = &rows[&TokenId::from_index(i)];
                for d in &row.distances {
                    w.write_all(&d.to_le_bytes()).map_err(io)?;
                }
            }
            w.flush().map_err(io)?;
        }
        tmp.persist(path).map_err(|e| CapeError::io(path, e.error))?;
        Ok(())
    }

    /// Loads a saved matrix. Fails if it was computed from a different table.
    pub fn load(path: &Path, table: Arc<EmbeddingTable>) -> Result<Self> {
        let io = |e| CapeError::io(path, e);
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CACHE_MAGIC {
            return Err(CapeError::format(path, "not a distance cache"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(io)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header).map_err(io)?;
        let header: CacheHeader = serde_json::from_slice(&header)?;
        if header.vocab_size != table.rows() || header.table_sha256 != Self::table_fingerprint(&table) {
            return Err(CapeError::format(path, "distance cache was built from a different embedding table"));
        }
        let n = header.vocab_size;
        let mut map = HashMap::with_capacity(n);
        let mut buf = vec![0u8; n * 8];
        for i in 0..n {
            r.read_exact(&mut buf).map_err(io)?;
            let distances =
                buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            let origin = TokenId::from_index(i);
            map.insert(origin, Arc::new(DistanceRow { origin, distances }));
        }
        Ok(DistanceCache { table, rows: RwLock::new(map) })
    }
}

//! Whole-file atomic writes.

use std::io::Write;
use std::path::Path;

use crate::error::{CapeError, Result};

/// Writes `bytes` to a temporary file beside `path` and renames it into place,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CapeError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CapeError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CapeError::io(path, e))?;
    tmp.persist(path).map_err(|e| CapeError::io(path, e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json_atomic<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

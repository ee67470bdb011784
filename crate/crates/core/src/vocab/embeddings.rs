use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TokenId, Vocabulary};
use crate::error::{CapeError, Result};

/// Magic prefix of the binary embedding format.
pub const EMBEDDING_MAGIC: &[u8; 4] = b"CEMB";

/// JSON header of the binary embedding format.
///
/// Layout: `CEMB`, header length as u32 LE, this header as UTF-8 JSON, then
/// `vocab_size * dim` little-endian f32 values in row-major token order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingHeader {
    pub vocab_size: usize,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
}

/// Row-major `|V| x d` matrix of embedding coordinates.
///
/// Stored as f32 (the precision both file formats carry); all distance
/// arithmetic widens to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    data: Vec<f32>,
    rows: usize,
    dim: usize,
}

impl EmbeddingTable {
    pub fn from_flat(data: Vec<f32>, rows: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CapeError::InvalidParameter("embedding dimension is zero".into()));
        }
        if data.len() != rows * dim {
            return Err(CapeError::SizeMismatch { what: "embedding data", expected: rows * dim, actual: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(CapeError::NonFinite { row: pos / dim, column: pos % dim, value: data[pos] as f64 });
        }
        Ok(EmbeddingTable { data, rows, dim })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(CapeError::InvalidParameter(format!(
                    "ragged embedding rows: row {i} has {} values, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(data, rows.len(), dim)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: TokenId) -> &[f32] {
        let start = id.index() * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if self.rows != vocab.len() {
            return Err(CapeError::SizeMismatch {
                what: "embedding table rows",
                expected: vocab.len(),
                actual: self.rows,
            });
        }
        Ok(())
    }

    /// Parses `token<TAB>v1 v2 ... vd` lines. Rows may appear in any order but
    /// must cover every vocabulary token exactly once.
    pub fn read_text(reader: impl Read, vocab: &Vocabulary, path: &Path) -> Result<Self> {
        let mut slots: Vec<Option<Vec<f32>>> = vec![None; vocab.len()];
        let mut dim = None;
        let mut count = 0usize;
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| CapeError::io(path, e))?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (token, values) = line
                .split_once('\t')
                .ok_or_else(|| CapeError::format(path, format!("line {}: missing tab separator", lineno + 1)))?;
            let id = vocab.id(token).ok_or_else(|| {
                CapeError::format(path, format!("line {}: token {token:?} not in vocabulary", lineno + 1))
            })?;
            let row: Vec<f32> = values
                .split_ascii_whitespace()
                .map(|v| {
                    v.parse::<f32>()
                        .map_err(|_| CapeError::format(path, format!("line {}: bad number {v:?}", lineno + 1)))
                })
                .collect::<Result<_>>()?;
            if let Some(col) = row.iter().position(|v| !v.is_finite()) {
                return Err(CapeError::NonFinite { row: id.index(), column: col, value: row[col] as f64 });
            }
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(CapeError::format(
                        path,
                        format!("line {}: ragged row with {} values, expected {d}", lineno + 1, row.len()),
                    ))
                }
                _ => {}
            }
            let slot = &mut slots[id.index()];
            if slot.is_some() {
                return Err(CapeError::format(path, format!("token {token:?} has two rows")));
            }
            *slot = Some(row);
            count += 1;
        }
        if count != vocab.len() {
            return Err(CapeError::SizeMismatch { what: "embedding rows", expected: vocab.len(), actual: count });
        }
        let rows: Vec<Vec<f32>> = slots.into_iter().map(|r| r.unwrap_or_default()).collect();
        Self::from_rows(&rows)
    }

    pub fn read_binary(mut reader: impl Read, vocab: &Vocabulary, path: &Path) -> Result<Self> {
        let io = |e| CapeError::io(path, e);
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic).map_err(io)?;
        if &magic != EMBEDDING_MAGIC {
            return Err(CapeError::format(path, "missing binary embedding magic"));
        }
        let mut len = [0u8; 4];
        reader.read_exact(&mut len).map_err(io)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        reader.read_exact(&mut header).map_err(io)?;
        let header: EmbeddingHeader =
            serde_json::from_slice(&header).map_err(|e| CapeError::format(path, format!("bad header: {e}")))?;
        if header.vocab_size != vocab.len() {
            return Err(CapeError::SizeMismatch {
                what: "embedding rows",
                expected: vocab.len(),
                actual: header.vocab_size,
            });
        }
        if let Some(tokens) = &header.tokens {
            if tokens.as_slice() != vocab.tokens() {
                return Err(CapeError::format(path, "header token order differs from the vocabulary"));
            }
        }
        let n = header.vocab_size * header.dim;
        let mut bytes = vec![0u8; n * 4];
        reader.read_exact(&mut bytes).map_err(io)?;
        let mut rest = [0u8; 1];
        if reader.read(&mut rest).map_err(io)? != 0 {
            return Err(CapeError::format(path, "trailing bytes after embedding data"));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::from_flat(data, header.vocab_size, header.dim)
    }

    pub fn write_binary(&self, mut writer: impl Write, tokens: Option<&[String]>) -> std::io::Result<()> {
        let header = EmbeddingHeader { vocab_size: self.rows, dim: self.dim, tokens: tokens.map(<[String]>::to_vec) };
        let header = serde_json::to_vec(&header).expect("header serializes");
        writer.write_all(EMBEDDING_MAGIC)?;
        writer.write_all(&(header.len() as u32).to_le_bytes())?;
        writer.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        writer.write_all(&buf)
    }

    pub fn to_binary_bytes(&self, tokens: Option<&[String]>) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_binary(&mut out, tokens).expect("writing to a Vec cannot fail");
        out
    }

    /// Text rows use Rust's shortest round-trip formatting, so reading the
    /// file back reproduces the table exactly.
    pub fn write_text(&self, mut writer: impl Write, vocab: &Vocabulary) -> std::io::Result<()> {
        for id in vocab.ids() {
            let row: Vec<String> = self.row(id).iter().map(|v| v.to_string()).collect();
            writeln!(writer, "{}\t{}", vocab.token(id).unwrap_or_default(), row.join(" "))?;
        }
        Ok(())
    }
}

/// Loads either embedding format, detected by the binary magic prefix.
pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CapeError::io(path, e))?;
    if bytes.starts_with(EMBEDDING_MAGIC) {
        EmbeddingTable::read_binary(bytes.as_slice(), vocab, path)
    } else {
        EmbeddingTable::read_text(bytes.as_slice(), vocab, path)
    }
}

//! The IDX container: a big-endian header (two zero bytes, a type byte,
//! a dimension count, one `u32` per dimension) followed by raw bytes.

use std::path::Path;

use crate::error::IdxError;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    /// Rank-3 `u8`: count × rows × columns.
    Images,
    /// Rank-1 `u8`.
    Labels,
}

impl IdxKind {
    fn name(self) -> &'static str {
        match self {
            Self::Images => "image",
            Self::Labels => "label",
        }
    }

    fn magic(self) -> u32 {
        match self {
            Self::Images => IMAGE_MAGIC,
            Self::Labels => LABEL_MAGIC,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxData {
    pub kind: IdxKind,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxData {
    /// Rows × columns of one image.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        match self.kind {
            IdxKind::Images => Some((self.dims[1], self.dims[2])),
            IdxKind::Labels => None,
        }
    }

    /// Bytes of the `i`-th item along the first axis.
    pub fn item(&self, i: usize) -> &[u8] {
        let stride: usize = self.dims[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn count(&self) -> usize {
        self.dims[0]
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            available: bytes.len(),
        })
}

/// Header length and payload size if `bytes` holds exactly `rank`
/// dimensions followed by their payload.
fn layout(bytes: &[u8], rank: usize) -> Result<(Vec<usize>, usize), IdxError> {
    let mut raw = Vec::with_capacity(rank);
    for i in 0..rank {
        raw.push(read_u32(bytes, 4 + 4 * i)?);
    }
    let payload = raw
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| IdxError::DimOverflow(raw.clone()))?;
    let header = 4 + 4 * rank;
    header
        .checked_add(payload)
        .ok_or_else(|| IdxError::DimOverflow(raw.clone()))?;
    Ok((raw.iter().map(|&d| d as usize).collect(), payload))
}

/// Parses image (`0x00000803`) or label (`0x00000801`) data.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, IdxError> {
    let magic = read_u32(bytes, 0)?;
    let kind = match magic {
        IMAGE_MAGIC => IdxKind::Images,
        LABEL_MAGIC => IdxKind::Labels,
        other => return Err(IdxError::BadMagic(other)),
    };
    let rank = match kind {
        IdxKind::Images => 3,
        IdxKind::Labels => 1,
    };
    let (dims, payload) = layout(bytes, rank)?;
    let start = 4 + 4 * rank;
    let end = start + payload;
    if bytes.len() != end {
        // the rest of the file may really be laid out for the other kind
        if kind == IdxKind::Labels {
            if let Ok((_, p3)) = layout(bytes, 3) {
                if bytes.len() == 16 + p3 {
                    return Err(IdxError::LabelMagicWithImageDims);
                }
            }
        } else if let Ok((_, p1)) = layout(bytes, 1) {
            if bytes.len() == 8 + p1 {
                return Err(IdxError::KindMismatch {
                    expected: "image",
                    found: "label",
                });
            }
        }
        if bytes.len() < end {
            return Err(IdxError::Truncated {
                needed: end,
                available: bytes.len(),
            });
        }
        return Err(IdxError::TrailingBytes(bytes.len() - end));
    }
    Ok(IdxData {
        kind,
        dims,
        data: bytes[start..end].to_vec(),
    })
}

pub fn load_idx(path: &Path) -> Result<IdxData, IdxError> {
    let bytes = std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_idx(&bytes)
}

/// Loads a file and insists on the given kind.
pub fn load_idx_kind(path: &Path, kind: IdxKind) -> Result<IdxData, IdxError> {
    let data = load_idx(path)?;
    if data.kind != kind {
        return Err(IdxError::KindMismatch {
            expected: kind.name(),
            found: data.kind.name(),
        });
    }
    Ok(data)
}

/// Serialises `data` in IDX layout.
pub fn encode_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * data.dims.len() + data.data.len());
    out.extend_from_slice(&data.kind.magic().to_be_bytes());
    for &d in &data.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&data.data);
    out
}

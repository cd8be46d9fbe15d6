//! Image grids (binary PGM/PPM) and CSV tables.

use std::io::Write;
use std::path::Path;

use crate::error::DataError;
use crate::grid::GridFunction;

/// `[−1, 1] → [0, 255]`, rounded and clamped.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Tiles `images` row-major, `cols` per row, without gaps. Missing tiles
/// in the last row are mid-gray. One channel gives P5, three give P6.
pub fn encode_grid(images: &[GridFunction], cols: usize) -> Result<Vec<u8>, DataError> {
    let first = images
        .first()
        .ok_or_else(|| DataError::Invalid("no images to tile".into()))?;
    if cols == 0 {
        return Err(DataError::Invalid("grid needs at least one column".into()));
    }
    let (c, h, w) = first.shape();
    if c != 1 && c != 3 {
        return Err(DataError::Invalid(format!("cannot write {c}-channel images")));
    }
    if images.iter().any(|i| i.shape() != (c, h, w)) {
        return Err(DataError::Invalid("images in a grid must share a shape".into()));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut out = format!("{}\n{gw} {gh}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    for gy in 0..gh {
        for gx in 0..gw {
            let tile = (gy / h) * cols + gx / w;
            for ch in 0..c {
                let v = images.get(tile).map_or(0.0, |img| img.get(ch, gy % h, gx % w));
                out.push(to_byte(v));
            }
        }
    }
    Ok(out)
}

pub fn write_grid(images: &[GridFunction], cols: usize, path: &Path) -> Result<(), DataError> {
    let bytes = encode_grid(images, cols)?;
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

/// Header row plus records, written with the `csv` crate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: ToString>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(|s| s.to_string()).collect());
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        let enc = |e: csv::Error| DataError::Invalid(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(enc)?;
        for r in &self.rows {
            w.write_record(r).map_err(enc)?;
        }
        w.into_inner().map_err(|e| DataError::Invalid(format!("csv: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        if self.header.is_empty() {
            return Err(DataError::Encode {
                path: path.to_path_buf(),
                message: "csv table has no columns".into(),
            });
        }
        let bytes = self.to_bytes().map_err(|e| DataError::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        write_file(path, &bytes)
    }
}

/// Parses a binary PGM (P5, maxval ≤ 255) into one channel in `[−1, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<GridFunction, DataError> {
    let bad = |m: &str| DataError::Invalid(format!("PGM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-text header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary greymaps (P5) are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if data.len() < w * h {
        return Err(bad("truncated pixel data"));
    }
    let values = data[..w * h]
        .iter()
        .map(|&b| 2.0 * b as f64 / max as f64 - 1.0)
        .collect();
    Ok(GridFunction::new(1, h, w, values)?)
}

pub fn read_pgm(path: &Path) -> Result<GridFunction, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pgm(&bytes)
}

//! Persisted per-instance embeddings bridging the two training stages.
//!
//! Binary layout (little endian): magic `MMGCDEC1`, version u32,
//! n u64, dim_v u32, dim_t u32, float width u32 (always 4), the n
//! instance ids (u32 length + utf8, sorted ascending), then the visual
//! embeddings and the pseudo text embeddings as row-major f32.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::data::InstanceId;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MMGCDEC1";
const VERSION: u32 = 1;

/// In-memory embedding cache; payloads stay f32 so a write/read cycle is
/// bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    ids: Vec<InstanceId>,
    dim_v: usize,
    dim_t: usize,
    z_v: Vec<f32>,
    z_t: Vec<f32>,
}

impl EmbeddingCache {
    /// Builds a cache from f64 embedding matrices, rounding to f32.
    /// Ids must be sorted, unique, and match the matrix row counts.
    pub fn from_f64(ids: Vec<InstanceId>, z_v: &Array2<f64>, z_t: &Array2<f64>) -> Result<Self> {
        if ids.len() != z_v.nrows() || ids.len() != z_t.nrows() {
            return Err(Error::invalid_argument(
                "id count must match both embedding row counts",
            ));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid_argument(
                "cache ids must be sorted and unique",
            ));
        }
        Ok(Self {
            ids,
            dim_v: z_v.ncols(),
            dim_t: z_t.ncols(),
            z_v: z_v.iter().map(|&v| v as f32).collect(),
            z_t: z_t.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[InstanceId] {
        &self.ids
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim_v, self.dim_t)
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok()
    }

    /// Visual embeddings widened back to f64, one row per id.
    pub fn visual_f64(&self) -> Array2<f64> {
        to_f64(&self.z_v, self.ids.len(), self.dim_v)
    }

    /// Pseudo text embeddings widened back to f64.
    pub fn text_f64(&self) -> Array2<f64> {
        to_f64(&self.z_t, self.ids.len(), self.dim_t)
    }

    /// Raw f32 rows, for bit-exactness checks.
    pub fn visual_row_f32(&self, row: usize) -> &[f32] {
        &self.z_v[row * self.dim_v..(row + 1) * self.dim_v]
    }

    pub fn text_row_f32(&self, row: usize) -> &[f32] {
        &self.z_t[row * self.dim_t..(row + 1) * self.dim_t]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
        w.write_u64::<LittleEndian>(self.ids.len() as u64)
            .map_err(io_err)?;
        w.write_u32::<LittleEndian>(self.dim_v as u32)
            .map_err(io_err)?;
        w.write_u32::<LittleEndian>(self.dim_t as u32)
            .map_err(io_err)?;
        w.write_u32::<LittleEndian>(4).map_err(io_err)?;
        for id in &self.ids {
            let bytes = id.as_bytes();
            w.write_u32::<LittleEndian>(bytes.len() as u32)
                .map_err(io_err)?;
            w.write_all(bytes).map_err(io_err)?;
        }
        for &v in &self.z_v {
            w.write_f32::<LittleEndian>(v).map_err(io_err)?;
        }
        for &v in &self.z_t {
            w.write_f32::<LittleEndian>(v).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "not an embedding cache"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported cache version {version}"),
            ));
        }
        let n = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let dim_v = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let dim_t = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let width = r.read_u32::<LittleEndian>().map_err(io_err)?;
        if width != 4 {
            return Err(Error::format(
                path,
                format!("unsupported float width {width}"),
            ));
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(io_err)?;
            ids.push(
                String::from_utf8(buf).map_err(|e| Error::format(path, format!("id utf8: {e}")))?,
            );
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format(path, "cache ids must be sorted and unique"));
        }
        let mut z_v = vec![0f32; n * dim_v];
        for v in &mut z_v {
            *v = r.read_f32::<LittleEndian>().map_err(io_err)?;
        }
        let mut z_t = vec![0f32; n * dim_t];
        for v in &mut z_t {
            *v = r.read_f32::<LittleEndian>().map_err(io_err)?;
        }
        // must now be at EOF
        let mut probe = [0u8; 1];
        match r.read(&mut probe) {
            Ok(0) => {}
            Ok(_) => return Err(Error::format(path, "trailing bytes after payload")),
            Err(e) => return Err(io_err(e)),
        }
        Ok(Self {
            ids,
            dim_v,
            dim_t,
            z_v,
            z_t,
        })
    }
}

fn to_f64(data: &[f32], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| f64::from(data[i * cols + j]))
}

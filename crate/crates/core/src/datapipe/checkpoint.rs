//! Binary embedding checkpoints.
//!
//! Layout, all little-endian: magic `GODE`, format version (u32), then
//! `n_users`, `n_items`, `dim` as u64, then the user matrix and the item
//! matrix as row-major f32. Round-trips are bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::embedding::{EmbeddingSet, Flavor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GODE";
const VERSION: u32 = 1;

/// Writes `set` to `path` in the binary checkpoint format.
pub fn save_checkpoint(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(set.n_users() as u64)?;
    w.write_u64::<LittleEndian>(set.n_items() as u64)?;
    w.write_u64::<LittleEndian>(set.dim() as u64)?;
    for matrix in [&set.users, &set.items] {
        for &x in matrix.iter() {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Tracks how many bytes have been consumed so truncation errors can report
/// the exact offset where the file ran out.
struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

/// Reads a checkpoint written by [`save_checkpoint`].
///
/// The loaded set carries [`Flavor::Initial`]; callers that know the file
/// holds convolved embeddings can retag it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let file = File::open(path.as_ref())?;
    let mut r = CountingReader {
        inner: BufReader::new(file),
        offset: 0,
    };

    let truncated = |r: &CountingReader<_>, e: io::Error| -> Error {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated { offset: r.offset }
        } else {
            Error::Io(e)
        }
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| truncated(&r, e))?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| truncated(&r, e))?;
    if version != VERSION {
        return Err(Error::BadVersion { found: version });
    }

    let read_dim = |r: &mut CountingReader<BufReader<File>>| -> Result<usize> {
        let v = r
            .read_u64::<LittleEndian>()
            .map_err(|e| truncated(r, e))?;
        usize::try_from(v).map_err(|_| Error::ShapeMismatch {
            expected: "dimension fitting in usize".into(),
            found: v.to_string(),
        })
    };
    let n_users = read_dim(&mut r)?;
    let n_items = read_dim(&mut r)?;
    let dim = read_dim(&mut r)?;

    let read_matrix = |r: &mut CountingReader<BufReader<File>>,
                           rows: usize|
     -> Result<Array2<f32>> {
        let len = rows.checked_mul(dim).ok_or_else(|| Error::ShapeMismatch {
            expected: "matrix size fitting in usize".into(),
            found: format!("{rows} x {dim}"),
        })?;
        let mut data = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|e| truncated(r, e))?;
        Array2::from_shape_vec((rows, dim), data).map_err(|e| Error::ShapeMismatch {
            expected: format!("{rows} x {dim}"),
            found: e.to_string(),
        })
    };
    let users = read_matrix(&mut r, n_users)?;
    let items = read_matrix(&mut r, n_items)?;

    let mut extra = [0u8; 1];
    let trailing = match r.inner.read(&mut extra) {
        Ok(0) => 0,
        Ok(_) => 1 + io::copy(&mut r.inner, &mut io::sink())?,
        Err(e) => return Err(Error::Io(e)),
    };
    if trailing > 0 {
        return Err(Error::TrailingData { extra: trailing });
    }

    EmbeddingSet::new(users, items, Flavor::Initial)
}

//! Little-endian binary formats for embeddings, codebooks and code tables.
//!
//! Every file starts with a 4-byte magic followed by `u32` dimensions and a
//! row-major payload. Floats are stored as `f32`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{CodeAssignment, SemanticCodebook};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const EMB_MAGIC: &[u8; 4] = b"EMB1";
const SID_MAGIC: &[u8; 4] = b"SID1";
const OPQ_MAGIC: &[u8; 4] = b"OPQ1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], path: &'a Path, magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::Format(format!(
                "{}: expected magic {}",
                path.display(),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Reader { buf, pos: 4, path })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("{}: truncated at byte {}", self.path.display(), self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.path.display(),
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_embeddings(path: &Path, x: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(EMB_MAGIC)?;
    put_u32(&mut w, x.rows())?;
    put_u32(&mut w, x.cols())?;
    put_f32s(&mut w, x.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path)?;
    let mut r = Reader::open(&buf, path, EMB_MAGIC)?;
    let rows = r.u32()?;
    let cols = r.u32()?;
    let data = r.f32s(rows * cols)?;
    r.finish()?;
    Tensor::matrix(rows, cols, data)
}

pub fn write_codes(path: &Path, codes: &CodeAssignment) -> Result<()> {
    if codes.codebook_size > u16::MAX as usize + 1 {
        return Err(Error::Format("codebook too large for u16 codes".into()));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(SID_MAGIC)?;
    put_u32(&mut w, codes.rows)?;
    put_u32(&mut w, codes.subspaces)?;
    put_u32(&mut w, codes.codebook_size)?;
    for &c in &codes.codes {
        w.write_all(&(c as u16).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_codes(path: &Path) -> Result<CodeAssignment> {
    let buf = fs::read(path)?;
    let mut r = Reader::open(&buf, path, SID_MAGIC)?;
    let rows = r.u32()?;
    let subspaces = r.u32()?;
    let codebook_size = r.u32()?;
    let raw = r.take(rows * subspaces * 2)?;
    r.finish()?;
    let codes: Vec<usize> = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect();
    if let Some(&bad) = codes.iter().find(|&&c| c >= codebook_size) {
        return Err(Error::Format(format!("{}: code {bad} out of range {codebook_size}", path.display())));
    }
    Ok(CodeAssignment {
        rows,
        subspaces,
        codebook_size,
        codes,
    })
}

pub fn write_codebook(path: &Path, cb: &SemanticCodebook) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(OPQ_MAGIC)?;
    put_u32(&mut w, cb.d_text)?;
    put_u32(&mut w, cb.subspaces)?;
    put_u32(&mut w, cb.codebook_size)?;
    put_f32s(&mut w, &cb.rotation)?;
    put_f32s(&mut w, &cb.centroids)?;
    w.flush()?;
    Ok(())
}

pub fn read_codebook(path: &Path) -> Result<SemanticCodebook> {
    let buf = fs::read(path)?;
    let mut r = Reader::open(&buf, path, OPQ_MAGIC)?;
    let d_text = r.u32()?;
    let subspaces = r.u32()?;
    let codebook_size = r.u32()?;
    if subspaces == 0 || d_text % subspaces != 0 {
        return Err(Error::Format(format!("{}: {d_text} not divisible by {subspaces}", path.display())));
    }
    let rotation = r.f32s(d_text * d_text)?;
    // D codebooks of C centroids, each d_text / D wide
    let centroids = r.f32s(codebook_size * d_text)?;
    r.finish()?;
    Ok(SemanticCodebook {
        d_text,
        subspaces,
        codebook_size,
        rotation,
        centroids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.emb");
        let x = Tensor::matrix(2, 3, vec![0.1, -2.0, 3.5, 1e-3, 0.0, 7.25]).unwrap();
        write_embeddings(&p, &x).unwrap();
        let y = read_embeddings(&p).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn codes_round_trip_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.sid");
        let codes = CodeAssignment {
            rows: 2,
            subspaces: 2,
            codebook_size: 4,
            codes: vec![0, 3, 2, 1],
        };
        write_codes(&p, &codes).unwrap();
        assert_eq!(read_codes(&p).unwrap(), codes);

        let bad = CodeAssignment {
            codes: vec![0, 9, 2, 1],
            ..codes
        };
        write_codes(&p, &bad).unwrap();
        assert!(read_codes(&p).is_err());
    }

    #[test]
    fn wrong_magic_and_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.emb");
        std::fs::write(&p, b"SID1\0\0\0\0").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Format(_))));
        std::fs::write(&p, b"EMB1\x02\0\0\0\x02\0\0\0\0\0").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Format(_))));
    }
}

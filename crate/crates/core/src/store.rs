//! Append-only little-endian embedding store with a JSONL sidecar index.
//!
//! Header: magic `PFEM`, `u32` version, `u32` dim, `u8` dtype, `u64` count.
//! Record: `u32` id length, id bytes, `u32` x, `u32` y, `dim` values.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"PFEM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 21;
const COUNT_OFFSET: u64 = 13;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not an embedding store: {0}")]
    Format(String),
    #[error("dimension mismatch: store has {store}, record has {record}")]
    DimMismatch { store: usize, record: usize },
    #[error("store header says {header} records but {found} were read")]
    Count { header: u64, found: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_u8(v: u8) -> Result<Self, StoreError> {
        match v {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            _ => Err(StoreError::Format(format!("unknown dtype {v}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub dim: usize,
    pub dtype: Dtype,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub offset: u64,
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx.jsonl");
    PathBuf::from(s)
}

fn read_header<R: Read>(r: &mut R) -> Result<Header, StoreError> {
    let mut buf = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut buf).map_err(|_| StoreError::Format("truncated header".into()))?;
    if &buf[..4] != MAGIC {
        return Err(StoreError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(StoreError::Format(format!("unsupported version {version}")));
    }
    Ok(Header {
        version,
        dim: u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize,
        dtype: Dtype::from_u8(buf[12])?,
        count: u64::from_le_bytes(buf[13..21].try_into().unwrap()),
    })
}

fn encode_record(rec: &EmbeddingRecord, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + rec.slide_id.len() + rec.vector.len() * dtype.width());
    out.extend((rec.slide_id.len() as u32).to_le_bytes());
    out.extend(rec.slide_id.as_bytes());
    out.extend(rec.x.to_le_bytes());
    out.extend(rec.y.to_le_bytes());
    for &v in &rec.vector {
        match dtype {
            Dtype::F32 => out.extend((v as f32).to_le_bytes()),
            Dtype::F64 => out.extend(v.to_le_bytes()),
        }
    }
    out
}

/// Single writer over a store file.
pub struct StoreWriter {
    file: BufWriter<File>,
    index: BufWriter<File>,
    header: Header,
    offset: u64,
}

impl StoreWriter {
    pub fn create(path: &Path, dim: usize, dtype: Dtype) -> Result<Self, StoreError> {
        let mut file = File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        file.write_all(&(dim as u32).to_le_bytes())?;
        file.write_all(&[dtype as u8])?;
        file.write_all(&0u64.to_le_bytes())?;
        let index = File::create(index_path(path))?;
        Ok(Self {
            file: BufWriter::new(file),
            index: BufWriter::new(index),
            header: Header {
                version: VERSION,
                dim,
                dtype,
                count: 0,
            },
            offset: HEADER_LEN,
        })
    }

    /// Reopen an existing store for appending after checking its contents.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let (header, _) = read_store(path)?;
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        let offset = file.seek(SeekFrom::End(0))?;
        let index = OpenOptions::new().append(true).create(true).open(index_path(path))?;
        Ok(Self {
            file: BufWriter::new(file),
            index: BufWriter::new(index),
            header,
            offset,
        })
    }

    pub fn header(&self) -> Header {
        self.header
    }

    pub fn append(&mut self, rec: &EmbeddingRecord) -> Result<(), StoreError> {
        if rec.vector.len() != self.header.dim {
            return Err(StoreError::DimMismatch {
                store: self.header.dim,
                record: rec.vector.len(),
            });
        }
        let bytes = encode_record(rec, self.header.dtype);
        self.file.write_all(&bytes)?;
        serde_json::to_writer(
            &mut self.index,
            &IndexEntry {
                slide_id: rec.slide_id.clone(),
                x: rec.x,
                y: rec.y,
                offset: self.offset,
            },
        )?;
        self.index.write_all(b"\n")?;
        self.offset += bytes.len() as u64;
        self.header.count += 1;
        Ok(())
    }

    /// Flush records and rewrite the header count.
    pub fn finish(mut self) -> Result<Header, StoreError> {
        self.sync()?;
        Ok(self.header)
    }

    fn sync(&mut self) -> Result<(), StoreError> {
        self.file.flush()?;
        self.index.flush()?;
        let f = self.file.get_mut();
        f.seek(SeekFrom::Start(COUNT_OFFSET))?;
        f.write_all(&self.header.count.to_le_bytes())?;
        f.seek(SeekFrom::End(0))?;
        f.flush()?;
        Ok(())
    }
}

impl Drop for StoreWriter {
    fn drop(&mut self) {
        let _ = self.sync();
    }
}

pub fn read_header_at(path: &Path) -> Result<Header, StoreError> {
    read_header(&mut File::open(path)?)
}

/// Read every record, checking that the count matches the header.
pub fn read_store(path: &Path) -> Result<(Header, Vec<EmbeddingRecord>), StoreError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let mut out = Vec::with_capacity(header.count as usize);
    let mut len = [0u8; 4];
    loop {
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let n = u32::from_le_bytes(len) as usize;
        let mut body = vec![0u8; n + 8 + header.dim * header.dtype.width()];
        r.read_exact(&mut body).map_err(|_| StoreError::Format("truncated record".into()))?;
        let slide_id = String::from_utf8(body[..n].to_vec()).map_err(|_| StoreError::Format("slide id is not utf-8".into()))?;
        let x = u32::from_le_bytes(body[n..n + 4].try_into().unwrap());
        let y = u32::from_le_bytes(body[n + 4..n + 8].try_into().unwrap());
        let vector = body[n + 8..]
            .chunks_exact(header.dtype.width())
            .map(|c| match header.dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        out.push(EmbeddingRecord { slide_id, x, y, vector });
    }
    if out.len() as u64 != header.count {
        return Err(StoreError::Count {
            header: header.count,
            found: out.len() as u64,
        });
    }
    Ok((header, out))
}

pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>, StoreError> {
    let r = BufReader::new(File::open(index_path(path))?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, i: u32, dim: usize) -> EmbeddingRecord {
        EmbeddingRecord {
            slide_id: id.into(),
            x: i * 224,
            y: i,
            vector: (0..dim).map(|j| (i as f64 + j as f64 * 0.25) - 3.0).collect(),
        }
    }

    #[test]
    fn reopen_appends_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pfem");
        let mut w = StoreWriter::create(&path, 4, Dtype::F32).unwrap();
        for i in 0..3 {
            w.append(&rec("a", i, 4)).unwrap();
        }
        assert_eq!(w.finish().unwrap().count, 3);
        let mut w = StoreWriter::open(&path).unwrap();
        w.append(&rec("b", 9, 4)).unwrap();
        drop(w);
        let (h, recs) = read_store(&path).unwrap();
        assert_eq!(h.count, 4);
        assert_eq!(recs[3], rec("b", 9, 4));
        let idx = read_index(&path).unwrap();
        assert_eq!(idx.len(), 4);
        assert_eq!(idx[0].offset, HEADER_LEN);
        let bytes = std::fs::read(&path).unwrap();
        let at = idx[3].offset as usize;
        assert_eq!(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()), 1);
        assert_eq!(&bytes[at + 4..at + 5], b"b");
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pfem");
        let mut w = StoreWriter::create(&path, 4, Dtype::F64).unwrap();
        assert!(matches!(w.append(&rec("a", 0, 5)), Err(StoreError::DimMismatch { store: 4, record: 5 })));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pfem");
        let mut w = StoreWriter::create(&path, 2, Dtype::F64).unwrap();
        w.append(&rec("a", 0, 2)).unwrap();
        w.finish().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_store(&path), Err(StoreError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_store(&path), Err(StoreError::Format(_))));
        let mut miscount = bytes.clone();
        miscount[COUNT_OFFSET as usize] = 2;
        std::fs::write(&path, &miscount).unwrap();
        assert!(matches!(read_store(&path), Err(StoreError::Count { header: 2, found: 1 })));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pfem");
        StoreWriter::create(&path, 258, Dtype::F32).unwrap().finish().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes, [b'P', b'F', b'E', b'M', 1, 0, 0, 0, 2, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
    }

    proptest! {
        #[test]
        fn f64_round_trip(values in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 3), 0..20)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("e.pfem");
            let mut w = StoreWriter::create(&path, 3, Dtype::F64).unwrap();
            let recs: Vec<EmbeddingRecord> = values.into_iter().enumerate()
                .map(|(i, vector)| EmbeddingRecord { slide_id: format!("s{i}"), x: i as u32, y: 7, vector })
                .collect();
            for r in &recs {
                w.append(r).unwrap();
            }
            w.finish().unwrap();
            let (_, got) = read_store(&path).unwrap();
            prop_assert_eq!(got, recs);
        }
    }
}

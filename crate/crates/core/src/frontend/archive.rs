use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::FeatureMatrix;
use crate::error::{invalid, Error, Result};
use crate::nn::Mat;

const MAGIC: &[u8; 4] = b"FARC";
const VERSION: u16 = 1;
const SEP: char = '\u{1f}';

fn pack_id(f: &FeatureMatrix) -> Result<String> {
    for s in [&f.utterance_id, &f.speaker_id, &f.language_id] {
        if s.contains(SEP) {
            return Err(invalid!("archive: id {s:?} contains a unit separator"));
        }
    }
    if f.utterance_id.is_empty() {
        return Err(invalid!("archive: empty utterance id"));
    }
    Ok(format!("{}{SEP}{}{SEP}{}", f.utterance_id, f.speaker_id, f.language_id))
}

/// Streaming writer. Records land in a temp file that is renamed into
/// place by [`ArchiveWriter::finish`].
pub struct ArchiveWriter {
    out: BufWriter<File>,
    tmp: PathBuf,
    path: PathBuf,
    seen: HashSet<String>,
}

impl ArchiveWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        let tmp = path.with_extension("tmp~");
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        Ok(ArchiveWriter { out, tmp, path: path.to_path_buf(), seen: HashSet::new() })
    }

    pub fn write(&mut self, f: &FeatureMatrix) -> Result<()> {
        if !self.seen.insert(f.utterance_id.clone()) {
            return Err(invalid!("archive: duplicate utterance id {:?}", f.utterance_id));
        }
        let id = pack_id(f)?;
        if id.len() > u16::MAX as usize {
            return Err(invalid!("archive: id of {} bytes is too long", id.len()));
        }
        let mut payload = Vec::with_capacity(10 + id.len() + 4 * f.data.data.len());
        payload.extend_from_slice(&(id.len() as u16).to_le_bytes());
        payload.extend_from_slice(id.as_bytes());
        payload.extend_from_slice(&(f.data.rows as u32).to_le_bytes());
        payload.extend_from_slice(&(f.data.cols as u32).to_le_bytes());
        for &v in &f.data.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.out.write_all(&payload)?;
        self.out.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        std::fs::rename(&self.tmp, &self.path)?;
        Ok(())
    }
}

pub fn write_archive<'a>(path: &Path, items: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<()> {
    let mut w = ArchiveWriter::create(path)?;
    for f in items {
        w.write(f)?;
    }
    w.finish()
}

/// Iterates records one at a time.
pub struct ArchiveReader<R: Read> {
    input: R,
    offset: u64,
    index: usize,
    seen: HashSet<String>,
    done: bool,
}

impl ArchiveReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| crate::fsutil::missing(path, e))?;
        ArchiveReader::new(BufReader::new(f))
    }
}

impl<R: Read> ArchiveReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut head = [0u8; 6];
        input.read_exact(&mut head).map_err(|_| Error::Format { offset: 0, msg: "archive: missing header".into() })?;
        if &head[..4] != MAGIC {
            return Err(Error::Format { offset: 0, msg: "archive: bad magic".into() });
        }
        let v = u16::from_le_bytes([head[4], head[5]]);
        if v != VERSION {
            return Err(Error::Format { offset: 4, msg: format!("archive: unsupported version {v}") });
        }
        Ok(ArchiveReader { input, offset: 6, index: 0, seen: HashSet::new(), done: false })
    }

    fn fail(&mut self, name: &str, msg: &str) -> Error {
        self.done = true;
        Error::Format { offset: self.offset, msg: format!("archive record {} ({name}): {msg}", self.index) }
    }

    fn take(&mut self, buf: &mut [u8], name: &str) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            match self.input.read(&mut buf[got..]) {
                Ok(0) => {
                    self.offset += got as u64;
                    return Err(self.fail(name, "truncated"));
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn next_record(&mut self) -> Result<Option<FeatureMatrix>> {
        let mut len = [0u8; 2];
        match self.input.read(&mut len[..1])? {
            0 => return Ok(None),
            _ => {
                self.offset += 1;
                self.take(&mut len[1..], "?")?;
            }
        }
        let id_len = u16::from_le_bytes(len) as usize;
        let mut id = vec![0u8; id_len];
        self.take(&mut id, "?")?;
        let id = match String::from_utf8(id) {
            Ok(s) => s,
            Err(_) => return Err(self.fail("?", "id is not UTF-8")),
        };
        let parts: Vec<&str> = id.split(SEP).collect();
        if parts.len() != 3 {
            return Err(self.fail(&id, "malformed id field"));
        }
        let utt = parts[0].to_string();
        let mut dims = [0u8; 8];
        self.take(&mut dims, &utt)?;
        let rows = u32::from_le_bytes(dims[..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(dims[4..].try_into().unwrap()) as usize;
        let n = rows.checked_mul(cols).filter(|&n| n < (1 << 31)).ok_or_else(|| self.fail(&utt, "implausible shape"));
        let n = n?;
        let mut raw = vec![0u8; 4 * n];
        self.take(&mut raw, &utt)?;
        let mut crc = [0u8; 4];
        self.take(&mut crc, &utt)?;
        let mut h = crc32fast::Hasher::new();
        h.update(&len);
        h.update(id.as_bytes());
        h.update(&dims);
        h.update(&raw);
        if h.finalize() != u32::from_le_bytes(crc) {
            return Err(self.fail(&utt, "checksum mismatch"));
        }
        if !self.seen.insert(utt.clone()) {
            return Err(self.fail(&utt, "duplicate id"));
        }
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        self.index += 1;
        Ok(Some(FeatureMatrix::new(&utt, parts[1], parts[2], Mat::from_vec(rows, cols, data))))
    }
}

impl<R: Read> Iterator for ArchiveReader<R> {
    type Item = Result<FeatureMatrix>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let r = self.next_record();
        if !matches!(r, Ok(Some(_))) {
            self.done = true;
        }
        r.transpose()
    }
}

pub fn read_archive(path: &Path) -> Result<Vec<FeatureMatrix>> {
    ArchiveReader::open(path)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample(seed: u64, id: &str, rows: usize) -> FeatureMatrix {
        let mut r = crate::util::rng(seed);
        let data = (0..rows * 7).map(|_| r.random_range(-10.0f32..10.0) as f64).collect();
        FeatureMatrix::new(id, "spk", "A", Mat::from_vec(rows, 7, data))
    }

    #[test]
    fn round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.farc");
        let items = vec![sample(1, "a", 3), sample(2, "b", 11), sample(3, "c", 1)];
        write_archive(&p, &items).unwrap();
        let back = read_archive(&p).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in items.iter().zip(&back) {
            assert_eq!(a.utterance_id, b.utterance_id);
            assert_eq!(a.speaker_id, b.speaker_id);
            assert_eq!(a.language_id, b.language_id);
            assert!(a.data.data.iter().zip(&b.data.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        write_archive(&p, &[]).unwrap();
        assert!(read_archive(&p).unwrap().is_empty());
    }

    #[test]
    fn duplicate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = sample(1, "a", 2);
        let err = write_archive(&dir.path().join("x"), [&a, &a]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn truncation_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.farc");
        write_archive(&p, &[sample(1, "first", 3), sample(2, "second", 4)]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 30] {
            std::fs::write(&p, &bytes[..cut]).unwrap();
            match read_archive(&p).unwrap_err() {
                Error::Format { offset, msg } => {
                    assert!(msg.contains("second"), "{msg}");
                    assert!(offset <= cut as u64);
                }
                e => panic!("{e:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_archive(&p), Err(Error::Format { .. })));
    }
}

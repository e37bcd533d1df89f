//! Checkpoint container shared by every trained model.
//!
//! Layout (little endian): magic `NNCK`, `u16` version, `u32` header length,
//! UTF-8 JSON header, `u32` section count, then per section a 4-byte tag,
//! `u32` tensor count and per tensor `u16` name length, name, `u32` rows,
//! `u32` cols and `rows * cols` `f32` values. A CRC32 of everything before
//! it closes the file.

use std::path::Path;

use serde_json::Value;

use crate::error::{invalid, Error, Result};
use crate::nn::{InputSpec, LayerSpec, Mat, NetworkGraph, Real};

pub const MAGIC: &[u8; 4] = b"NNCK";
pub const VERSION: u16 = 1;
pub const PARAMS_TAG: [u8; 4] = *b"PARM";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_mat<R: Real>(name: impl Into<String>, m: &Mat<R>) -> Self {
        Tensor { name: name.into(), rows: m.rows, cols: m.cols, data: m.data.iter().map(|v| v.to_f64c() as f32).collect() }
    }

    pub fn from_slice(name: impl Into<String>, v: &[f64]) -> Self {
        Tensor { name: name.into(), rows: 1, cols: v.len(), data: v.iter().map(|&x| x as f32).collect() }
    }

    pub fn to_mat<R: Real>(&self) -> Mat<R> {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|&v| R::from_f64c(v as f64)).collect())
    }

    pub fn to_vec64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub tensors: Vec<Tensor>,
}

impl Section {
    pub fn new(tag: [u8; 4]) -> Self {
        Section { tag, tensors: Vec::new() }
    }

    pub fn push(&mut self, t: Tensor) -> &mut Self {
        self.tensors.push(t);
        self
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("section {} has no tensor '{name}'", String::from_utf8_lossy(&self.tag)),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Value,
    pub sections: Vec<Section>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format { offset: self.pos as u64, msg: format!("truncated while reading {what}") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn new(header: Value) -> Self {
        Container { header, sections: Vec::new() }
    }

    pub fn section(&self, tag: &[u8; 4]) -> Result<&Section> {
        self.sections.iter().find(|s| &s.tag == tag).ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("checkpoint has no {} section", String::from_utf8_lossy(tag)),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("json header");
        b.extend_from_slice(&(header.len() as u32).to_le_bytes());
        b.extend_from_slice(&header);
        b.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            b.extend_from_slice(&s.tag);
            b.extend_from_slice(&(s.tensors.len() as u32).to_le_bytes());
            for t in &s.tensors {
                b.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
                b.extend_from_slice(t.name.as_bytes());
                b.extend_from_slice(&(t.rows as u32).to_le_bytes());
                b.extend_from_slice(&(t.cols as u32).to_le_bytes());
                for v in &t.data {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 10 || &buf[..4] != MAGIC {
            return Err(Error::Format { offset: 0, msg: "not an NNCK checkpoint".into() });
        }
        let body = buf.len() - 4;
        let want = u32::from_le_bytes(buf[body..].try_into().unwrap());
        if crc32fast::hash(&buf[..body]) != want {
            return Err(Error::Format { offset: body as u64, msg: "checkpoint CRC mismatch".into() });
        }
        let mut c = Cursor { buf: &buf[..body], pos: 4 };
        let version = c.u16("version")?;
        if version != VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported checkpoint version {version}") });
        }
        let hl = c.u32("header length")? as usize;
        let hpos = c.pos;
        let header: Value = serde_json::from_slice(c.take(hl, "header")?)
            .map_err(|e| Error::Format { offset: hpos as u64, msg: format!("bad header: {e}") })?;
        let ns = c.u32("section count")?;
        let mut sections = Vec::new();
        for _ in 0..ns {
            let tag: [u8; 4] = c.take(4, "section tag")?.try_into().unwrap();
            let nt = c.u32("tensor count")?;
            let mut tensors = Vec::new();
            for _ in 0..nt {
                let nl = c.u16("tensor name length")? as usize;
                let npos = c.pos;
                let name = std::str::from_utf8(c.take(nl, "tensor name")?)
                    .map_err(|_| Error::Format { offset: npos as u64, msg: "tensor name is not UTF-8".into() })?
                    .to_string();
                let rows = c.u32("rows")? as usize;
                let cols = c.u32("cols")? as usize;
                let raw = c.take(rows * cols * 4, &format!("tensor '{name}'"))?;
                let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                tensors.push(Tensor { name, rows, cols, data });
            }
            sections.push(Section { tag, tensors });
        }
        if c.pos != body {
            return Err(Error::Format { offset: c.pos as u64, msg: "trailing bytes before CRC".into() });
        }
        Ok(Container { header, sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| crate::fsutil::missing(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Pack a graph into a container: the header holds the input spec and
/// layer table, section `PARM` the parameters (`L<i>.<k>`).
pub fn graph_container<R: Real>(graph: &NetworkGraph<R>, mut header: serde_json::Map<String, Value>) -> Container {
    header.insert("input".into(), serde_json::to_value(graph.input()).unwrap());
    header.insert("layers".into(), serde_json::to_value(graph.layers()).unwrap());
    let mut s = Section::new(PARAMS_TAG);
    for (i, group) in graph.params().iter().enumerate() {
        for (k, m) in group.iter().enumerate() {
            s.push(Tensor::from_mat(format!("L{i}.{k}"), m));
        }
    }
    let mut c = Container::new(Value::Object(header));
    c.sections.push(s);
    c
}

pub fn graph_from_container<R: Real>(c: &Container) -> Result<NetworkGraph<R>> {
    let input: InputSpec = serde_json::from_value(c.header.get("input").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Format { offset: 0, msg: format!("checkpoint input spec: {e}") })?;
    let layers: Vec<LayerSpec> = serde_json::from_value(c.header.get("layers").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Format { offset: 0, msg: format!("checkpoint layer table: {e}") })?;
    let s = c.section(&PARAMS_TAG)?;
    let params = layers
        .iter()
        .enumerate()
        .map(|(i, l)| (0..l.param_shapes().len()).map(|k| s.get(&format!("L{i}.{k}")).map(|t| t.to_mat())).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    NetworkGraph::from_parts(input, layers, params).map_err(|e| invalid!("checkpoint: {e}"))
}

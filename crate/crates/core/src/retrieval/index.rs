use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INDEX_MAGIC: &[u8; 4] = b"EMBX";
pub const INDEX_VERSION: u32 = 1;

/// Identified, optionally labelled unit embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub ids: Vec<String>,
    /// `[n × d_e]`.
    pub embeddings: Tensor,
    pub labels: Vec<Option<usize>>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, embeddings: Tensor, labels: Vec<Option<usize>>) -> Result<Self> {
        let (n, _) = embeddings.dims2()?;
        if ids.len() != n || labels.len() != n {
            return Err(Error::dim("EmbeddingIndex", &[n], &[ids.len(), labels.len()]));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Format(format!("duplicate id {dup:?} in embedding index")));
        }
        Ok(Self { ids, embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_u32::<LittleEndian>(id.len() as u32)?;
            w.write_all(id.as_bytes())?;
            w.write_i32::<LittleEndian>(self.labels[i].map_or(-1, |l| l as i32))?;
            for &v in self.embeddings.row(i) {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("not an embedding index (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let d = r.read_u32::<LittleEndian>()? as usize;
        let (mut ids, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes)?;
            ids.push(String::from_utf8(bytes).map_err(|e| Error::Format(format!("index id is not UTF-8: {e}")))?);
            let label = r.read_i32::<LittleEndian>()?;
            labels.push(usize::try_from(label).ok());
            for _ in 0..d {
                data.push(r.read_f64::<LittleEndian>()?);
            }
        }
        Self::new(ids, Tensor::new(&[n, d], data)?, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

//! `NMPW` weight checkpoints: named little-endian f32 tensors.
//!
//! ```text
//! "NMPW" | version u16 | section count u32 |
//!   { name_len u16 | name | ndims u8 | dims u32 × ndims | f32 × Π dims } ...
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NMPW";
pub const WEIGHTS_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Section {
    pub fn new(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data,
        }
    }

    pub fn len_from_dims(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::parse(self.at, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::config(format!("checkpoint has no section {name:?}")))
    }

    /// Returns the payload after checking the stored shape.
    pub fn tensor(&self, name: &str, dims: &[usize]) -> Result<&[f32]> {
        let s = self.get(name)?;
        let want: Vec<u32> = dims.iter().map(|&d| d as u32).collect();
        if s.dims != want {
            return Err(Error::shape(format!("section {name}: dims {:?}, expected {:?}", s.dims, want)));
        }
        Ok(&s.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.dims.len() as u8);
            for d in &s.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, at: 0 };
        if rd.take(4, "magic")? != WEIGHTS_MAGIC {
            return Err(Error::parse(0, "bad magic, expected NMPW"));
        }
        let version = rd.u16("version")?;
        if version != WEIGHTS_VERSION {
            return Err(Error::parse(4, format!("unsupported checkpoint version {version}")));
        }
        let count = rd.u32("section count")?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let name_at = rd.at;
            let len = rd.u16("name length")? as usize;
            let name = std::str::from_utf8(rd.take(len, "name")?)
                .map_err(|_| Error::parse(name_at, "section name is not UTF-8"))?
                .to_string();
            let ndims = rd.u8("ndims")? as usize;
            let mut dims = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                dims.push(rd.u32("dim")?);
            }
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let raw = rd.take(n * 4, &format!("payload of {name}"))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            ck.sections.push(Section { name, dims, data });
        }
        if rd.at != bytes.len() {
            return Err(Error::parse(rd.at, "trailing bytes after last section"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let mut ck = Checkpoint::default();
        ck.push(Section::new("a.b", &[2, 3], (0..6).map(|v| v as f32 * 0.5).collect()));
        ck.push(Section::new("c", &[], vec![1.0]));
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"NMPW");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(ck.tensor("a.b", &[2, 3]).unwrap().len(), 6);
        assert!(ck.tensor("a.b", &[3, 2]).is_err());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Parse { .. })));
    }
}

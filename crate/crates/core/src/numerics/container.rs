//! Versioned binary parameter container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "ALNF" | version | header_len | header JSON bytes | count
//!        | count x (name_len | name | rows | cols | rows*cols f64 LE)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ALNF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub params: IndexMap<String, Matrix>,
}

impl Container {
    pub fn new(header: serde_json::Value, params: IndexMap<String, Matrix>) -> Self {
        Container { header, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out).map_err(|e| Error::io("<memory>", e))?;
        Ok(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_u32(w, header.len())?;
        w.write_all(&header)?;
        write_u32(w, self.params.len())?;
        for (name, m) in &self.params {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, m.rows())?;
            write_u32(w, m.cols())?;
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let header_len = read_u32(r)? as usize;
        let mut header = vec![0u8; header_len];
        read_exact(r, &mut header)?;
        let header: serde_json::Value = serde_json::from_slice(&header)?;
        let count = read_u32(r)?;
        let mut params = IndexMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                read_exact(r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            if params.insert(name.clone(), Matrix::from_vec(rows, cols, data)?).is_some() {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io("<model>", e))? != 0 {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Container { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_u32(w: &mut impl Write, n: usize) -> std::io::Result<()> {
    let n = u32::try_from(n).map_err(|_| std::io::Error::other("length exceeds u32"))?;
    w.write_all(&n.to_le_bytes())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated model file".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_stable() {
        let params: IndexMap<String, Matrix> = [("w".to_owned(), Matrix::from_rows(&[[1.5, -2.0]]))].into_iter().collect();
        let c = Container::new(serde_json::json!({}), params);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ALNF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], b"{}");
        assert_eq!(&bytes[14..18], &1u32.to_le_bytes());
        assert_eq!(&bytes[18..22], &1u32.to_le_bytes());
        assert_eq!(bytes[22], b'w');
        assert_eq!(&bytes[31..39], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 47);
    }

    #[test]
    fn rejects_corruption() {
        let c = Container::new(serde_json::json!({"a": 1}), IndexMap::new());
        let mut bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(Container::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            mats in prop::collection::vec((1usize..4, 1usize..4, prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 16)), 0..5),
            tag in "[a-z]{0,8}",
        ) {
            let params: IndexMap<String, Matrix> = mats
                .into_iter()
                .enumerate()
                .map(|(k, (r, c, vals))| (format!("p{k}"), Matrix::from_vec(r, c, vals[..r * c].to_vec()).unwrap()))
                .collect();
            let c = Container::new(serde_json::json!({ "tag": tag, "alpha": 0.15 }), params);
            let bytes = c.to_bytes().unwrap();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            for (a, b) in c.params.values().zip(back.params.values()) {
                let bits = |m: &Matrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a), bits(b));
            }
        }
    }
}

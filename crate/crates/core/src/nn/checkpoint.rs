//! `MFCK` checkpoint files.
//!
//! ```text
//! "MFCK" | version u8 | meta_len u32 | meta (UTF-8 `key=value` lines)
//! | count u32 | count × { name_len u16 | name | rank u8 | dims u32×rank | f32 data }
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::arcface::{MarginConfig, MarginKind};
use super::graph::ParamStore;
use super::model::{ArcFaceHead, Model, ModelSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MFCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated MFCK file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 text in MFCK".into()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            meta: BTreeMap::new(),
            params: Vec::new(),
        }
    }

    pub fn from_model(model: &Model) -> Self {
        let mut ck = Self::new();
        ck.meta.insert("model".into(), model.spec().to_string());
        if model.input_scale() != 1.0 {
            ck.meta.insert("input_scale".into(), model.input_scale().to_string());
        }
        ck.extend(model.params());
        ck
    }

    pub fn with_head(mut self, head: &ArcFaceHead) -> Self {
        self.meta.insert("margin".into(), margin_to_string(&head.margin));
        self.extend(head.params());
        self
    }

    fn extend(&mut self, store: &ParamStore) {
        self.params
            .extend(store.params().iter().map(|p| (p.name.clone(), p.value.clone())));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad MFCK magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported MFCK version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let mut meta = BTreeMap::new();
        for line in r.utf8(meta_len)?.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad MFCK metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = r.utf8(name_len)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::Format("MFCK tensor size overflow".into()))?;
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after MFCK parameter table".into()));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::io(path, e))
    }

    fn store_where(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in self.params.iter().filter(|(n, _)| keep(n)) {
            store.push(name.clone(), t.clone());
        }
        store
    }

    /// Rebuild the model; parameter names and shapes must match its spec.
    pub fn model(&self) -> Result<Model> {
        let spec: ModelSpec = self
            .meta
            .get("model")
            .ok_or_else(|| Error::Format("checkpoint has no model spec".into()))?
            .parse()?;
        self.with_scale(Model::from_params(spec, self.store_where(|n| !n.starts_with("head.")))?)
    }

    fn with_scale(&self, mut model: Model) -> Result<Model> {
        if let Some(s) = self.meta.get("input_scale") {
            let scale: f32 = s
                .parse()
                .map_err(|_| Error::Format(format!("bad input_scale metadata {s:?}")))?;
            model.set_input_scale(scale)?;
        }
        Ok(model)
    }

    /// Rebuild the model against a spec the caller expects.
    pub fn model_with_spec(&self, spec: &ModelSpec) -> Result<Model> {
        self.with_scale(Model::from_params(spec.clone(), self.store_where(|n| !n.starts_with("head.")))?)
    }

    pub fn head(&self) -> Result<ArcFaceHead> {
        let margin = self
            .meta
            .get("margin")
            .ok_or_else(|| Error::Format("checkpoint has no margin head".into()))?;
        ArcFaceHead::from_params(self.store_where(|n| n.starts_with("head.")), parse_margin(margin)?)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

fn margin_to_string(m: &MarginConfig) -> String {
    let kind = match m.kind {
        MarginKind::Angular => "angular",
        MarginKind::Cosine => "cosine",
    };
    format!("scale:{},margin:{},kind:{kind}", m.scale, m.margin)
}

fn parse_margin(s: &str) -> Result<MarginConfig> {
    let mut cfg = MarginConfig::default();
    for part in s.split(',') {
        let bad = || Error::Format(format!("bad margin metadata {s:?}"));
        let (k, v) = part.split_once(':').ok_or_else(bad)?;
        match k {
            "scale" => cfg.scale = v.parse().map_err(|_| bad())?,
            "margin" => cfg.margin = v.parse().map_err(|_| bad())?,
            "kind" => {
                cfg.kind = match v {
                    "angular" => MarginKind::Angular,
                    "cosine" => MarginKind::Cosine,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(bad()),
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{build_generator, build_recognizer};

    #[test]
    fn roundtrip_model_and_head() {
        let (f, head) = build_recognizer(12, 16, 4, MarginConfig::default(), 3).unwrap();
        let bytes = Checkpoint::from_model(&f).with_head(&head).to_bytes();
        assert_eq!(&bytes[..5], b"MFCK\x01");
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let f2 = ck.model().unwrap();
        assert_eq!(f2.spec(), f.spec());
        for (a, b) in f.params().params().iter().zip(f2.params().params()) {
            assert_eq!(a.value, b.value);
        }
        let h2 = ck.head().unwrap();
        assert_eq!(h2.weight(), head.weight());
        assert_eq!(h2.margin, head.margin);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = build_generator(12, 8, 1).unwrap();
        let ck = Checkpoint::from_model(&g);
        let other = build_generator(192, 8, 1).unwrap();
        assert!(ck.model_with_spec(other.spec()).is_err());
    }

    #[test]
    fn truncated_and_corrupt() {
        let g = build_generator(12, 4, 1).unwrap();
        let bytes = Checkpoint::from_model(&g).to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}

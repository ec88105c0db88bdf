//! Versioned checkpoint files with separable backbone and head sections.
//!
//! Layout (little-endian): magic `NBFC`, version u32, section count u32,
//! then sections. A section is a kind byte, a length-prefixed UTF-8 label
//! and a u64 body length. Key/value bodies hold string pairs; tensor bodies
//! hold length-prefixed records of name, dtype tag, rank, u64 dims and the
//! payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelConfig, ProjectionHead, Standardizer};

const MAGIC: &[u8; 4] = b"NBFC";
pub const FORMAT_VERSION: u32 = 1;

const KIND_KV: u8 = 0;
const KIND_TENSORS: u8 = 1;
const DTYPE_F64: u8 = 1;

const META: &str = "meta";
const BACKBONE: &str = "backbone";
const OPTIM: &str = "optim";
const HEAD_PREFIX: &str = "head:";
const STD_MEAN: &str = "standardizer.mean";
const STD_STD: &str = "standardizer.std";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    Full,
    /// Skips head and optimizer sections.
    BackboneOnly,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub sources: Vec<String>,
    /// Free-form entries, stored verbatim.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub backbone: ParamStore,
    pub heads: BTreeMap<String, ProjectionHead>,
    /// Optimizer moments keyed by store: `backbone` or `head:<dataset>`.
    pub optimizer: Option<BTreeMap<String, AdamState>>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(backbone: &Backbone, heads: BTreeMap<String, ProjectionHead>, meta: TrainingMeta) -> Self {
        Checkpoint {
            config: backbone.config.clone(),
            backbone: backbone.params.clone(),
            heads,
            optimizer: None,
            meta,
        }
    }

    pub fn backbone(&self) -> Backbone {
        Backbone {
            config: self.config.clone(),
            params: self.backbone.clone(),
        }
    }

    pub fn head(&self, dataset: &str) -> Option<&ProjectionHead> {
        self.heads.get(dataset)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections = Vec::new();
        let mut kv = vec![
            ("model_config".to_string(), serde_json::to_string(&self.config)?),
            ("training".to_string(), serde_json::to_string(&self.meta)?),
        ];
        kv.sort();
        sections.push(encode_section(KIND_KV, META, &encode_kv(&kv)));
        sections.push(encode_section(KIND_TENSORS, BACKBONE, &encode_store(&self.backbone)));
        for (name, head) in &self.heads {
            let mut store = head.params.clone();
            store.insert(STD_MEAN, Tensor::vector(head.standardizer.mean.clone()));
            store.insert(STD_STD, Tensor::vector(head.standardizer.std.clone()));
            sections.push(encode_section(
                KIND_TENSORS,
                &format!("{HEAD_PREFIX}{name}"),
                &encode_store(&store),
            ));
        }
        if let Some(opt) = &self.optimizer {
            let mut tensors: Vec<(String, Tensor)> = Vec::new();
            for (store, state) in opt {
                tensors.push((format!("{store}/step"), Tensor::scalar(state.step as f64)));
                for (p, t) in &state.first {
                    tensors.push((format!("{store}/m/{p}"), t.clone()));
                }
                for (p, t) in &state.second {
                    tensors.push((format!("{store}/v/{p}"), t.clone()));
                }
            }
            sections.push(encode_section(KIND_TENSORS, OPTIM, &encode_tensors(&tensors)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for s in sections {
            out.extend_from_slice(&s);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], mode: LoadMode) -> Result<Self> {
        let sections = read_sections(bytes)?;
        let mut config = None;
        let mut meta = TrainingMeta::default();
        let mut backbone = None;
        let mut heads = BTreeMap::new();
        let mut optimizer = None;
        for s in sections {
            match (s.kind, s.label.as_str()) {
                (KIND_KV, META) => {
                    for (k, v) in decode_kv(s.body)? {
                        match k.as_str() {
                            "model_config" => config = Some(serde_json::from_str::<ModelConfig>(&v)?),
                            "training" => meta = serde_json::from_str(&v)?,
                            _ => {}
                        }
                    }
                }
                (KIND_TENSORS, BACKBONE) => backbone = Some(decode_store(s.body)?),
                (KIND_TENSORS, label) if label.starts_with(HEAD_PREFIX) => {
                    if mode == LoadMode::BackboneOnly {
                        continue;
                    }
                    heads.insert(label[HEAD_PREFIX.len()..].to_string(), decode_store(s.body)?);
                }
                (KIND_TENSORS, OPTIM) => {
                    if mode == LoadMode::BackboneOnly {
                        continue;
                    }
                    optimizer = Some(decode_optim(s.body)?);
                }
                (kind, label) => {
                    return Err(Error::Format(format!("unexpected section '{label}' of kind {kind}")));
                }
            }
        }
        let config = config.ok_or_else(|| Error::Format("checkpoint has no model config".into()))?;
        let backbone = backbone.ok_or_else(|| Error::Format("checkpoint has no backbone section".into()))?;
        let heads = heads
            .into_iter()
            .map(|(name, mut store)| {
                let take = |store: &mut ParamStore, key: &str| -> Result<Vec<f64>> {
                    let t = store
                        .split_prefix(key)
                        .iter()
                        .next()
                        .map(|(_, t)| t.data().to_vec())
                        .ok_or_else(|| Error::Format(format!("head '{name}' lacks {key}")))?;
                    Ok(t)
                };
                let mean = take(&mut store, STD_MEAN)?;
                let std = take(&mut store, STD_STD)?;
                let standardizer = Standardizer { mean, std };
                let spec = config.proj_spec(standardizer.dim());
                for l in 0..spec.num_layers() {
                    let w = store.require(&crate::diff::MlpSpec::weight_name(crate::model::PROJ_PREFIX, l))?;
                    if w.rows() != spec.dims[l] || w.cols() != spec.dims[l + 1] {
                        return Err(Error::Format(format!("head '{name}' layer {l} has wrong shape")));
                    }
                }
                Ok((
                    name,
                    ProjectionHead {
                        spec,
                        params: store,
                        standardizer,
                    },
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Checkpoint {
            config,
            backbone,
            heads,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, mode: LoadMode) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?, mode)
    }
}

/// Encoded size in bytes of every section, by label.
pub fn section_sizes(bytes: &[u8]) -> Result<Vec<(String, usize)>> {
    Ok(read_sections(bytes)?
        .into_iter()
        .map(|s| (s.label, s.body.len()))
        .collect())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode_section(kind: u8, label: &str, body: &[u8]) -> Vec<u8> {
    let mut out = vec![kind];
    put_str(&mut out, label);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
    out
}

fn encode_kv(pairs: &[(String, String)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for (k, v) in pairs {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    out
}

fn encode_store(store: &ParamStore) -> Vec<u8> {
    let tensors: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    encode_tensors(&tensors)
}

fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let mut rec = Vec::new();
        put_str(&mut rec, name);
        rec.push(DTYPE_F64);
        rec.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            rec.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return Err(Error::Format(format!(
                "checkpoint truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len64(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Format("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

struct Section<'a> {
    kind: u8,
    label: String,
    body: &'a [u8],
}

fn read_sections(bytes: &[u8]) -> Result<Vec<Section<'_>>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Format("not a checkpoint (file too short)".into()))?;
    if magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let kind = r.u8()?;
        let label = r.string()?;
        let len = r.len64()?;
        let body = r.take(len)?;
        out.push(Section { kind, label, body });
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after last section".into()));
    }
    Ok(out)
}

fn decode_kv(body: &[u8]) -> Result<Vec<(String, String)>> {
    let mut r = Reader { buf: body, pos: 0 };
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let k = r.string()?;
        let v = r.string()?;
        out.push((k, v));
    }
    Ok(out)
}

fn decode_tensors(body: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: body, pos: 0 };
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.len64()?;
        let mut rec = Reader { buf: r.take(len)?, pos: 0 };
        let name = rec.string()?;
        let dtype = rec.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("tensor '{name}' has unknown dtype tag {dtype}")));
        }
        let rank = rec.u32()? as usize;
        let shape = (0..rank).map(|_| rec.len64()).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let payload = rec.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !rec.done() {
            return Err(Error::Format(format!("tensor record '{name}' has trailing bytes")));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if !r.done() {
        return Err(Error::Format("tensor section has trailing bytes".into()));
    }
    Ok(out)
}

fn decode_store(body: &[u8]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in decode_tensors(body)? {
        store.insert(name, t);
    }
    Ok(store)
}

fn decode_optim(body: &[u8]) -> Result<BTreeMap<String, AdamState>> {
    let mut out: BTreeMap<String, AdamState> = BTreeMap::new();
    for (name, t) in decode_tensors(body)? {
        let bad = || Error::Format(format!("malformed optimizer tensor '{name}'"));
        if let Some(store) = name.strip_suffix("/step") {
            out.entry(store.to_string()).or_default().step = t.data().first().copied().ok_or_else(bad)? as u64;
            continue;
        }
        let (store, rest) = name
            .split_once("/m/")
            .map(|(s, p)| (s, (true, p)))
            .or_else(|| name.split_once("/v/").map(|(s, p)| (s, (false, p))))
            .ok_or_else(bad)?;
        let state = out.entry(store.to_string()).or_default();
        let (first, param) = rest;
        let map = if first { &mut state.first } else { &mut state.second };
        map.insert(param.to_string(), t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeRecord, InteractionGraph};

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            hidden_dim: 4,
            proj_dim: 3,
            num_layers: 2,
            ..ModelConfig::default()
        };
        let backbone = Backbone::init(config.clone(), 1).unwrap();
        let g = InteractionGraph::new(2, 2, 1, vec![EdgeRecord::new(0, 1, vec![0.25]), EdgeRecord::new(1, 0, vec![-3.0])]).unwrap();
        let mut heads = BTreeMap::new();
        heads.insert("a".to_string(), ProjectionHead::for_graph(&config, &g, 2));
        heads.insert("b".to_string(), ProjectionHead::for_graph(&config, &g, 3));
        let meta = TrainingMeta {
            epochs: 3,
            seeds: vec![7],
            sources: vec!["a".into(), "b".into()],
            extra: BTreeMap::new(),
        };
        let mut ck = Checkpoint::new(&backbone, heads, meta);
        let mut state = AdamState {
            step: 4,
            ..AdamState::default()
        };
        state.first.insert("boundary".into(), Tensor::vector(vec![0.5; 4]));
        state.second.insert("boundary".into(), Tensor::vector(vec![0.25; 4]));
        ck.optimizer = Some(BTreeMap::from([("backbone".to_string(), state)]));
        ck
    }

    #[test]
    fn full_round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), LoadMode::Full).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn backbone_only_drops_heads() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), LoadMode::BackboneOnly).unwrap();
        assert!(back.heads.is_empty());
        assert!(back.optimizer.is_none());
        assert_eq!(back.backbone, ck.backbone);
    }

    #[test]
    fn header_checks() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, LoadMode::Full), Err(Error::Format(_))));
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&newer, LoadMode::Full).unwrap_err();
        assert!(err.to_string().contains('7') && err.to_string().contains('1'));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut], LoadMode::Full).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn sections_are_labelled() {
        let sizes = section_sizes(&sample().to_bytes().unwrap()).unwrap();
        let labels: Vec<&str> = sizes.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["meta", "backbone", "head:a", "head:b", "optim"]);
    }
}

//! Binary containers for features (`M3FT`) and checkpoints (`M3CK`).
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! M3FT: "M3FT" | version u32 | kind u8 | rank u8 | dims u64 x rank | f32 payload | crc32(payload) u32
//! M3CK: "M3CK" | version u32 | entries...
//!       entry: name_len u16 | name utf-8 | rank u8 | dims u64 x rank | f32 payload
//! ```
//!
//! A checkpoint carries its metadata as a JSON document in the entry named
//! `__config__.json`: a rank-1 tensor holding one byte per element.

use serde_json::Value;
use thiserror::Error;

use crate::dsp::FeatureKind;
use crate::model::{M3Model, ModelConfig, ModelError};
use crate::tensor::{Real, Tensor};

pub const M3FT_MAGIC: &[u8; 4] = b"M3FT";
pub const M3CK_MAGIC: &[u8; 4] = b"M3CK";
pub const VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "__config__.json";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("file truncated")]
    Truncated,
    #[error("payload checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("unknown feature kind code {0}")]
    Kind(u8),
    #[error("{0}")]
    Invalid(String),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, FormatError>;

/// A feature array with its kind; `dims` is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub kind: FeatureKind,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl FeatureFile {
    pub fn new(kind: FeatureKind, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() || dims.len() > u8::MAX as usize {
            return Err(FormatError::Invalid(format!(
                "dims {dims:?} do not describe {} values",
                data.len()
            )));
        }
        Ok(FeatureFile { kind, dims, data })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn header(&mut self, magic: &'static [u8; 4], name: &'static str) -> Result<()> {
        if self.take(4).map_err(|_| FormatError::BadMagic { expected: name })? != magic {
            return Err(FormatError::BadMagic { expected: name });
        }
        match self.u32()? {
            VERSION => Ok(()),
            v => Err(FormatError::Version(v)),
        }
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(dims)
    }

    /// Payload bytes for `dims`, bounds-checked before allocation.
    fn payload(&mut self, dims: &[usize]) -> Result<&'a [u8]> {
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(FormatError::Truncated)?;
        self.take(n)
    }
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn encode_m3ft(f: &FeatureFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + 8 * f.dims.len() + 4 * f.data.len());
    out.extend_from_slice(M3FT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(f.kind.code());
    put_dims(&mut out, &f.dims);
    let start = out.len();
    put_f32s(&mut out, &f.data);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_m3ft(bytes: &[u8]) -> Result<FeatureFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(M3FT_MAGIC, "M3FT")?;
    let code = r.u8()?;
    let kind = FeatureKind::from_code(code).ok_or(FormatError::Kind(code))?;
    let dims = r.dims()?;
    let payload = r.payload(&dims)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    if !r.done() {
        return Err(FormatError::Invalid("trailing bytes after checksum".into()));
    }
    Ok(FeatureFile {
        kind,
        dims,
        data: get_f32s(payload),
    })
}

/// One named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Metadata plus named tensors, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub entries: Vec<Entry>,
}

pub fn encode_m3ck(ck: &Checkpoint) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&ck.meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(M3CK_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = Entry {
        name: CONFIG_ENTRY.into(),
        dims: vec![json.len()],
        data: json.iter().map(|&b| b as f32).collect(),
    };
    for e in std::iter::once(&config).chain(&ck.entries) {
        if e.name == CONFIG_ENTRY && !std::ptr::eq(e, &config) {
            return Err(FormatError::Invalid(format!("entry name {CONFIG_ENTRY} is reserved")));
        }
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize || e.dims.len() > u8::MAX as usize {
            return Err(FormatError::Invalid(format!("entry {} is too large to encode", e.name)));
        }
        if e.dims.iter().product::<usize>() != e.data.len() {
            return Err(FormatError::Invalid(format!(
                "entry {}: dims do not match data",
                e.name
            )));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        put_dims(&mut out, &e.dims);
        put_f32s(&mut out, &e.data);
    }
    Ok(out)
}

pub fn decode_m3ck(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(M3CK_MAGIC, "M3CK")?;
    let mut meta = None;
    let mut entries = Vec::new();
    while !r.done() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Invalid("entry name is not UTF-8".into()))?
            .to_string();
        let dims = r.dims()?;
        let data = get_f32s(r.payload(&dims)?);
        if name == CONFIG_ENTRY {
            let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
            meta = Some(serde_json::from_slice(&bytes)?);
        } else {
            entries.push(Entry { name, dims, data });
        }
    }
    Ok(Checkpoint {
        meta: meta.ok_or_else(|| FormatError::Invalid(format!("missing {CONFIG_ENTRY}")))?,
        entries,
    })
}

/// Snapshot of a model: its config under `"model"`, `"pruned"`, and any
/// `extra` top-level fields merged in.
pub fn model_checkpoint<T: Real>(
    model: &mut M3Model<T>,
    extra: serde_json::Map<String, Value>,
    extra_entries: Vec<Entry>,
) -> Result<Checkpoint> {
    let mut meta = serde_json::Map::new();
    meta.insert("model".into(), serde_json::to_value(model.config())?);
    meta.insert("pruned".into(), Value::Bool(model.config().pruned));
    meta.extend(extra);
    let mut entries: Vec<Entry> = model
        .state()
        .into_iter()
        .map(|(name, t)| Entry {
            name,
            dims: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
        .collect();
    entries.extend(extra_entries);
    Ok(Checkpoint {
        meta: Value::Object(meta),
        entries,
    })
}

/// Rebuilds a model from a checkpoint. Entries that are not model state are
/// returned alongside.
pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<(M3Model<T>, Vec<Entry>)> {
    let cfg: ModelConfig = serde_json::from_value(
        ck.meta
            .get("model")
            .cloned()
            .ok_or_else(|| FormatError::Invalid("checkpoint has no model config".into()))?,
    )?;
    let mut model = M3Model::<T>::new(cfg, 0)?;
    let names: std::collections::HashSet<String> = model.state().into_iter().map(|(n, _)| n).collect();
    let mut state = Vec::new();
    let mut rest = Vec::new();
    for e in &ck.entries {
        if names.contains(&e.name) {
            let data = e.data.iter().map(|&v| T::cast(v as f64)).collect();
            let t = Tensor::from_vec(&e.dims, data).map_err(ModelError::from)?;
            state.push((e.name.clone(), t));
        } else {
            rest.push(e.clone());
        }
    }
    model.load_state(&state)?;
    Ok((model, rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use proptest::prelude::*;

    #[test]
    fn m3ft_layout() {
        let f = FeatureFile::new(FeatureKind::Welch, vec![2], vec![1.0, -2.5]).unwrap();
        let b = encode_m3ft(&f);
        assert_eq!(&b[..4], b"M3FT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 1);
        assert_eq!(u64::from_le_bytes(b[10..18].try_into().unwrap()), 2);
        assert_eq!(&b[18..22], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 18 + 8 + 4);
        assert_eq!(decode_m3ft(&b).unwrap(), f);
    }

    #[test]
    fn m3ft_detects_damage() {
        let f = FeatureFile::new(FeatureKind::Centroid, vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = encode_m3ft(&f);
        b[20] ^= 1;
        assert!(matches!(decode_m3ft(&b), Err(FormatError::Checksum { .. })));
        let b = encode_m3ft(&f);
        assert!(matches!(decode_m3ft(&b[..b.len() - 1]), Err(FormatError::Truncated)));
        assert!(matches!(
            decode_m3ft(b"M3CK\x01\0\0\0"),
            Err(FormatError::BadMagic { .. })
        ));
        let mut v = b.clone();
        v[4] = 9;
        assert!(matches!(decode_m3ft(&v), Err(FormatError::Version(9))));
        let mut k = b;
        k[8] = 7;
        assert!(matches!(decode_m3ft(&k), Err(FormatError::Kind(7))));
        // absurd dims must not allocate
        let mut huge = encode_m3ft(&FeatureFile::new(FeatureKind::Welch, vec![1], vec![0.0]).unwrap());
        huge[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_m3ft(&huge).is_err());
    }

    #[test]
    fn checkpoint_meta_and_reserved_name() {
        let ck = Checkpoint {
            meta: serde_json::json!({"pruned": true, "note": "é"}),
            entries: vec![Entry {
                name: "a.b".into(),
                dims: vec![2, 1],
                data: vec![0.5, f32::MIN_POSITIVE],
            }],
        };
        let bytes = encode_m3ck(&ck).unwrap();
        assert_eq!(&bytes[..4], b"M3CK");
        assert_eq!(decode_m3ck(&bytes).unwrap(), ck);
        let bad = Checkpoint {
            meta: Value::Null,
            entries: vec![Entry {
                name: CONFIG_ENTRY.into(),
                dims: vec![0],
                data: vec![],
            }],
        };
        assert!(encode_m3ck(&bad).is_err());
    }

    #[test]
    fn model_round_trip() {
        let mut cfg = ModelConfig::desk(Variant::M3Tse, 7);
        cfg.tower_widths = vec![4, 4];
        cfg.expert_channels = 4;
        let mut m = M3Model::<f32>::new(cfg, 3).unwrap();
        let extra = vec![Entry {
            name: "loss.s_main".into(),
            dims: vec![1],
            data: vec![0.25],
        }];
        let ck = model_checkpoint(&mut m, Default::default(), extra.clone()).unwrap();
        let bytes = encode_m3ck(&ck).unwrap();
        let back = decode_m3ck(&bytes).unwrap();
        let (mut m2, rest) = model_from_checkpoint::<f32>(&back).unwrap();
        assert_eq!(rest, extra);
        assert_eq!(m2.state(), m.state());
        let again = encode_m3ck(&model_checkpoint(&mut m2, Default::default(), rest).unwrap()).unwrap();
        assert_eq!(again, bytes);
    }

    proptest! {
        #[test]
        fn m3ft_bitwise_round_trip(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
            code in 0u8..4,
        ) {
            let n: usize = dims.iter().product();
            let mut rng = crate::tensor::ParamRng::new(seed, 0);
            let data: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
            let f = FeatureFile::new(FeatureKind::from_code(code).unwrap(), dims, data).unwrap();
            let back = decode_m3ft(&encode_m3ft(&f)).unwrap();
            prop_assert_eq!(back.dims, f.dims);
            let a: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = f.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn m3ck_bitwise_round_trip(bits in prop::collection::vec(any::<u32>(), 0..40)) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let ck = Checkpoint {
                meta: serde_json::json!({"k": 1}),
                entries: vec![Entry { name: "x".into(), dims: vec![data.len()], data }],
            };
            let back = decode_m3ck(&encode_m3ck(&ck).unwrap()).unwrap();
            let got: Vec<u32> = back.entries[0].data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, bits);
        }
    }
}

//! Versioned binary container for parameters and optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "SKLBCKPT"
//! version   u32      currently 1
//! count     u32      number of entries
//! entry*    name_len u32, name (utf-8), kind u8, ndim u32, dims u64 * ndim, payload
//! checksum  u64      FNV-1a over every preceding byte
//! ```
//!
//! `kind` is 0 for f64 arrays (payload is `prod(dims)` little-endian f64),
//! 1 for u64 arrays and 2 for utf-8 text (one dim holding the byte length).
//! Entries keep insertion order, so save -> load -> save is byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::{AdamState, HiddenActivation, NetParams, NetSpec, OutputActivation};

const MAGIC: &[u8; 8] = b"SKLBCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U64 { shape: Vec<usize>, data: Vec<u64> },
    Text(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    fn insert(&mut self, name: &str, entry: Entry) {
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| n == name) {
            slot.1 = entry;
        } else {
            self.entries.push((name.to_string(), entry));
        }
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn put_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.insert(
            name,
            Entry::F64 {
                shape: shape.to_vec(),
                data: data.to_vec(),
            },
        );
    }

    pub fn put_u64(&mut self, name: &str, data: &[u64]) {
        self.insert(
            name,
            Entry::U64 {
                shape: vec![data.len()],
                data: data.to_vec(),
            },
        );
    }

    pub fn put_text(&mut self, name: &str, text: &str) {
        self.insert(name, Entry::Text(text.to_string()));
    }

    pub fn f64_array(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            Entry::F64 { shape, data } => Ok((shape, data)),
            _ => Err(Error::Checkpoint(format!("entry `{name}` is not an f64 array"))),
        }
    }

    pub fn u64_array(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Entry::U64 { data, .. } => Ok(data),
            _ => Err(Error::Checkpoint(format!("entry `{name}` is not a u64 array"))),
        }
    }

    pub fn f64_scalar(&self, name: &str) -> Result<f64> {
        let (_, d) = self.f64_array(name)?;
        d.first()
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` is empty")))
    }

    pub fn u64_scalar(&self, name: &str) -> Result<u64> {
        self.u64_array(name)?
            .first()
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` is empty")))
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Entry::Text(t) => Ok(t),
            _ => Err(Error::Checkpoint(format!("entry `{name}` is not text"))),
        }
    }

    /// Stores a network under `prefix.spec` and `prefix.params`.
    pub fn put_net(&mut self, prefix: &str, net: &NetParams) {
        let spec = net.spec();
        let widths: Vec<String> = spec.layer_widths.iter().map(|w| w.to_string()).collect();
        self.put_text(
            &format!("{prefix}.spec"),
            &format!(
                "widths={};hidden={};output={}",
                widths.join(","),
                spec.hidden_activation,
                spec.output_activation
            ),
        );
        self.put_f64(&format!("{prefix}.params"), &[net.len()], net.as_slice());
    }

    pub fn net(&self, prefix: &str) -> Result<NetParams> {
        let spec = parse_spec(self.text(&format!("{prefix}.spec"))?)?;
        let (_, data) = self.f64_array(&format!("{prefix}.params"))?;
        NetParams::from_vec(spec, data.to_vec())
    }

    pub fn put_adam(&mut self, prefix: &str, s: &AdamState) {
        let n = s.first_moment.len();
        self.put_f64(&format!("{prefix}.m"), &[n], &s.first_moment);
        self.put_f64(&format!("{prefix}.v"), &[n], &s.second_moment);
        self.put_u64(&format!("{prefix}.step"), &[s.step_count]);
        self.put_f64(
            &format!("{prefix}.hyper"),
            &[4],
            &[s.learning_rate, s.beta1, s.beta2, s.epsilon],
        );
    }

    pub fn adam(&self, prefix: &str) -> Result<AdamState> {
        let (_, m) = self.f64_array(&format!("{prefix}.m"))?;
        let (_, v) = self.f64_array(&format!("{prefix}.v"))?;
        let step = self.u64_scalar(&format!("{prefix}.step"))?;
        let (_, h) = self.f64_array(&format!("{prefix}.hyper"))?;
        if m.len() != v.len() || h.len() != 4 {
            return Err(Error::Checkpoint(format!("inconsistent adam state `{prefix}`")));
        }
        Ok(AdamState {
            first_moment: m.to_vec(),
            second_moment: v.to_vec(),
            step_count: step,
            learning_rate: h[0],
            beta1: h[1],
            beta2: h[2],
            epsilon: h[3],
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (kind, shape): (u8, Vec<usize>) = match entry {
                Entry::F64 { shape, .. } => (0, shape.clone()),
                Entry::U64 { shape, .. } => (1, shape.clone()),
                Entry::Text(t) => (2, vec![t.len()]),
            };
            out.push(kind);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match entry {
                Entry::F64 { data, .. } => data
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_bits().to_le_bytes())),
                Entry::U64 { data, .. } => data
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Entry::Text(t) => out.extend_from_slice(t.as_bytes()),
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if stored != fnv1a(body) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?;
            let kind = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let entry = match kind {
                0 => {
                    let mut data = Vec::with_capacity(n);
                    for _ in 0..n {
                        data.push(f64::from_bits(r.u64()?));
                    }
                    Entry::F64 { shape, data }
                }
                1 => {
                    let mut data = Vec::with_capacity(n);
                    for _ in 0..n {
                        data.push(r.u64()?);
                    }
                    Entry::U64 { shape, data }
                }
                2 => Entry::Text(
                    String::from_utf8(r.take(n)?.to_vec())
                        .map_err(|_| Error::Checkpoint(format!("entry `{name}` is not utf-8")))?,
                ),
                k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
            };
            ckpt.entries.push((name, entry));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(ckpt)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_spec(text: &str) -> Result<NetSpec> {
    let bad = || Error::Checkpoint(format!("malformed network spec `{text}`"));
    let mut widths = None;
    let mut hidden = None;
    let mut output = None;
    for part in text.split(';') {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        match k {
            "widths" => {
                widths = Some(
                    v.split(',')
                        .map(|w| w.parse::<usize>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            "hidden" => hidden = Some(v.parse::<HiddenActivation>().map_err(|_| bad())?),
            "output" => output = Some(v.parse::<OutputActivation>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    NetSpec::new(
        widths.ok_or_else(bad)?,
        hidden.ok_or_else(bad)?,
        output.ok_or_else(bad)?,
    )
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

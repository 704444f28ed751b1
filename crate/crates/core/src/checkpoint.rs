//! The `FRDM` checkpoint container.
//!
//! Layout: magic `FRDM`, version (u32 LE), header length (u64 LE), a UTF-8
//! header, then the raw little-endian payload of every tensor in header
//! order. Header lines are one of
//!
//! ```text
//! meta <key> <value>
//! counter <name> <u64>
//! rng chacha8 <seed hex> <stream> <word_pos>
//! tensor <name> f32 <d0>x<d1>...
//! ```
//!
//! Encoding is canonical, so decoding and re-encoding yields identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::NetworkParams;
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FRDM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub counters: Vec<(String, u64)>,
    pub rng: Option<RngState>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(Error::contract(format!("checkpoint {kind} {s:?} must be a non-empty token without whitespace")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn counter(&self, name: &str) -> Option<u64> {
        self.counters.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    /// Appends every tensor of `params`, prefixing each name.
    pub fn push_params(&mut self, prefix: &str, params: &NetworkParams<f32>) {
        self.tensors
            .extend(params.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
    }

    /// Collects the tensors whose names start with `prefix`, optionally
    /// stripping it.
    pub fn select(&self, prefix: &str, strip: bool) -> Result<NetworkParams<f32>> {
        let mut params = NetworkParams::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                params.insert(if strip { rest } else { name.as_str() }, t.clone())?;
            }
        }
        Ok(params)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(Error::contract(format!("meta value for {k} spans lines")));
            }
            writeln!(header, "meta {k} {v}").unwrap();
        }
        for (k, v) in &self.counters {
            check_token("counter", k)?;
            writeln!(header, "counter {k} {v}").unwrap();
        }
        if let Some(r) = &self.rng {
            let hex: String = r.seed.iter().map(|b| format!("{b:02x}")).collect();
            writeln!(header, "rng chacha8 {hex} {} {}", r.stream, r.word_pos).unwrap();
        }
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(header, "tensor {name} {} {}", DType::F32.name(), dims.join("x")).unwrap();
        }
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Decodes `bytes`; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(path, detail);
        if bytes.len() < 16 {
            return Err(bad("truncated preamble".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic, expected FRDM".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file")))?;
        let header = std::str::from_utf8(&bytes[16..header_end]).map_err(|_| bad("header is not UTF-8".into()))?;

        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        for (lineno, line) in header.lines().enumerate() {
            let corrupt = || bad(format!("corrupt header line {}: {line:?}", lineno + 1));
            let (kind, rest) = line.split_once(' ').ok_or_else(corrupt)?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(corrupt)?;
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                "counter" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(corrupt)?;
                    ck.counters.push((k.to_string(), v.parse().map_err(|_| corrupt())?));
                }
                "rng" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    let [algo, hex, stream, word_pos] = fields[..] else { return Err(corrupt()) };
                    if algo != "chacha8" || hex.len() != 64 || !hex.is_ascii() || ck.rng.is_some() {
                        return Err(corrupt());
                    }
                    let mut seed = [0u8; 32];
                    for (i, b) in seed.iter_mut().enumerate() {
                        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| corrupt())?;
                    }
                    ck.rng = Some(RngState {
                        seed,
                        stream: stream.parse().map_err(|_| corrupt())?,
                        word_pos: word_pos.parse().map_err(|_| corrupt())?,
                    });
                }
                "tensor" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    let [name, dtype, dims] = fields[..] else { return Err(corrupt()) };
                    if DType::parse(dtype) != Some(DType::F32) {
                        return Err(bad(format!("tensor {name} has unsupported dtype {dtype}")));
                    }
                    let shape = if dims.is_empty() {
                        Vec::new()
                    } else {
                        dims.split('x').map(|d| d.parse::<usize>()).collect::<Result<Vec<_>, _>>().map_err(|_| corrupt())?
                    };
                    shapes.push((name.to_string(), shape));
                }
                _ => return Err(corrupt()),
            }
        }

        let mut offset = header_end;
        for (name, shape) in shapes {
            let numel: usize = shape.iter().product();
            let end = numel
                .checked_mul(4)
                .and_then(|n| n.checked_add(offset))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad(format!("payload of {name} is truncated")))?;
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            ck.tensors.push((name, Tensor::new(shape, data)?));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes after payload", bytes.len() - offset)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

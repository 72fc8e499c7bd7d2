//! Portable checkpoints.
//!
//! ```text
//! SWITCHHEAD-CHECKPOINT 1
//! tokenizer listops | tokenizer bytes <hex of the byte vocabulary>
//! spec <n>
//! <n bytes of model spec TOML>
//! tensors <count>
//! <name> <comma-separated shape>      (one line per tensor)
//! data <total floats>
//! <little-endian f64 values of every tensor, in index order>
//! ```

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use switchhead_core::model::{build, Model, ModelSpec};
use switchhead_core::numerics::Tensor;
use switchhead_core::tasks::CharCorpus;
use switchhead_core::{Error, Result};

use crate::{CliError, CliResult};

pub const MAGIC: &str = "SWITCHHEAD-CHECKPOINT 1";

/// How text inputs map to token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tokenizer {
    ListOps,
    /// Byte vocabulary in ascending order; a byte's id is its index.
    Bytes(Vec<u8>),
}

impl Tokenizer {
    pub fn for_corpus(c: &CharCorpus) -> Self {
        Tokenizer::Bytes(c.vocab().to_vec())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        match self {
            Tokenizer::ListOps => text.split_whitespace().map(switchhead_core::tasks::listops::parse_token).collect(),
            Tokenizer::Bytes(vocab) => text
                .bytes()
                .map(|b| vocab.binary_search(&b).map_err(|_| Error::Parse(format!("byte {b:#04x} is not in the vocabulary"))))
                .collect(),
        }
    }

    /// Display label of one token id.
    pub fn label(&self, id: usize) -> String {
        match self {
            Tokenizer::ListOps => switchhead_core::tasks::listops::token_name(id).to_string(),
            Tokenizer::Bytes(vocab) => match vocab.get(id) {
                Some(b) if b.is_ascii_graphic() => (*b as char).to_string(),
                Some(b) => format!("{b:#04x}"),
                None => "?".into(),
            },
        }
    }

    fn header(&self) -> String {
        match self {
            Tokenizer::ListOps => "tokenizer listops".into(),
            Tokenizer::Bytes(v) => format!("tokenizer bytes {}", v.iter().map(|b| format!("{b:02x}")).collect::<String>()),
        }
    }

    fn parse(line: &str) -> Result<Self> {
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("tokenizer"), Some("listops"), None) => Ok(Tokenizer::ListOps),
            (Some("tokenizer"), Some("bytes"), hex) => {
                let hex = hex.unwrap_or("");
                if hex.len() % 2 != 0 {
                    return Err(Error::Parse("odd-length byte vocabulary".into()));
                }
                (0..hex.len())
                    .step_by(2)
                    .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).map_err(|e| Error::Parse(format!("byte vocabulary: {e}"))))
                    .collect::<Result<Vec<u8>>>()
                    .map(Tokenizer::Bytes)
            }
            _ => Err(Error::Parse(format!("expected a tokenizer line, found `{line}`"))),
        }
    }
}

pub fn write_checkpoint(w: &mut impl Write, model: &Model, tokenizer: &Tokenizer) -> std::io::Result<()> {
    let spec = model.spec().to_toml();
    let store = model.params();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{}", tokenizer.header())?;
    writeln!(w, "spec {}", spec.len())?;
    w.write_all(spec.as_bytes())?;
    writeln!(w)?;
    writeln!(w, "tensors {}", store.len())?;
    for id in store.ids() {
        let shape: Vec<String> = store.get(id).shape().iter().map(usize::to_string).collect();
        writeln!(w, "{} {}", store.name(id), shape.join(","))?;
    }
    writeln!(w, "data {}", store.numel())?;
    for id in store.ids() {
        for v in store.get(id).data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Line-oriented reader over the header part of a checkpoint.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Parse("truncated checkpoint header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Parse("checkpoint header is not UTF-8".into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Parse("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn counted(&mut self, tag: &str) -> Result<usize> {
        let line = self.line()?;
        line.strip_prefix(tag)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Parse(format!("expected `{tag} <count>`, found `{line}`")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(Model, Tokenizer)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.line()?;
    if magic != MAGIC {
        return Err(Error::Parse(format!("not a checkpoint (header `{magic}`)")));
    }
    let tokenizer = Tokenizer::parse(c.line()?)?;
    let spec_len = c.counted("spec")?;
    let spec_text = std::str::from_utf8(c.take(spec_len)?).map_err(|_| Error::Parse("spec is not UTF-8".into()))?;
    let spec = ModelSpec::from_toml(spec_text)?;
    c.take(1)?;
    let n_tensors = c.counted("tensors")?;
    let mut index = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let line = c.line()?;
        let (name, shape) = line.rsplit_once(' ').ok_or_else(|| Error::Parse(format!("bad index line `{line}`")))?;
        let shape = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split(',')
                .map(|d| d.parse().map_err(|_| Error::Parse(format!("bad shape in `{line}`"))))
                .collect::<Result<Vec<usize>>>()?
        };
        index.push((name.to_string(), shape));
    }
    let total = c.counted("data")?;
    let data = c.take(total * 8)?;
    if c.pos != bytes.len() {
        return Err(Error::Parse(format!("{} trailing bytes after tensor data", bytes.len() - c.pos)));
    }

    let mut model = build(&spec, 0)?;
    let store = model.params_mut();
    if n_tensors != store.len() {
        return Err(Error::Parse(format!("checkpoint has {n_tensors} tensors, the spec defines {}", store.len())));
    }
    let mut seen = HashSet::new();
    let mut offset = 0;
    for (name, shape) in index {
        let id = store.find(&name).ok_or_else(|| Error::Parse(format!("unknown tensor `{name}`")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Parse(format!("tensor `{name}` appears twice")));
        }
        let n: usize = shape.iter().product();
        if offset + n > total {
            return Err(Error::Parse("tensor index exceeds the data section".into()));
        }
        let values = data[offset * 8..(offset + n) * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        offset += n;
        store.set(id, Tensor::new(&shape, values)?).map_err(|e| Error::Parse(format!("tensor `{name}`: {e}")))?;
    }
    if offset != total {
        return Err(Error::Parse(format!("data section holds {total} floats, index covers {offset}")));
    }
    Ok((model, tokenizer))
}

pub fn save(path: &Path, model: &Model, tokenizer: &Tokenizer) -> CliResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model, tokenizer)?;
    w.flush()?;
    Ok(())
}

/// A missing file is a usage error; a malformed one a parse error.
pub fn load(path: &Path) -> CliResult<(Model, Tokenizer)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Ok(read_checkpoint(&bytes)?)
}

//! Shared on-disk container used by the style bank, checkpoints and the
//! external-encoder weight files.
//!
//! Layout:
//!
//! ```text
//! <magic>\n
//! key = value\n        (zero or more, order preserved)
//! end_header\n
//! <payload bytes>      (little-endian f64 / u8 arrays, layout given by the header)
//! ```
//!
//! Keys are `[a-z0-9_.]+`; values are any text without a newline. Duplicate
//! keys are rejected.

use crate::error::{Result, UldaError};

const END: &str = "end_header";
const MAX_HEADER_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Header::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(valid_key(key), "bad header key {key}");
        debug_assert!(!value.contains('\n'));
        self.entries.push((key.to_string(), value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, what: &'static str, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| UldaError::format(what, format!("missing header key `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, what: &'static str, key: &str) -> Result<T> {
        let raw = self.require(what, key)?;
        raw.trim()
            .parse()
            .map_err(|_| UldaError::format(what, format!("bad value for `{key}`: {raw:?}")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'.')
}

pub fn encode(magic: &str, header: &Header, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(256 + payload.len());
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    for (k, v) in &header.entries {
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(b" = ");
        out.extend_from_slice(v.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(END.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(payload);
    out
}

/// Splits `bytes` into its header and payload, checking the magic line.
pub fn decode<'a>(what: &'static str, magic: &str, bytes: &'a [u8]) -> Result<(Header, &'a [u8])> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<&'a str> {
        let rest = &bytes[*pos..];
        let nl = rest
            .iter()
            .take(MAX_HEADER_BYTES)
            .position(|&b| b == b'\n')
            .ok_or_else(|| UldaError::format(what, "unterminated header line"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| UldaError::format(what, "header is not valid UTF-8"))?;
        *pos += nl + 1;
        if *pos > MAX_HEADER_BYTES {
            return Err(UldaError::format(what, "header too large"));
        }
        Ok(line)
    };

    let first = next_line(&mut pos)?;
    if first != magic {
        return Err(UldaError::format(
            what,
            format!("bad magic {first:?}, expected {magic:?}"),
        ));
    }
    let mut header = Header::new();
    loop {
        let line = next_line(&mut pos)?;
        if line == END {
            break;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| UldaError::format(what, format!("bad header line {line:?}")))?;
        if !valid_key(k) {
            return Err(UldaError::format(what, format!("bad header key {k:?}")));
        }
        if header.get(k).is_some() {
            return Err(UldaError::format(
                what,
                format!("duplicate header key `{k}`"),
            ));
        }
        header.entries.push((k.to_string(), v.to_string()));
    }
    Ok((header, &bytes[pos..]))
}

/// Appends `xs` as little-endian f64.
pub fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Sequential reader over a payload with bounds checks on every read.
pub struct PayloadReader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(what: &'static str, bytes: &'a [u8]) -> Self {
        PayloadReader {
            what,
            bytes,
            pos: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let need = count
            .checked_mul(8)
            .filter(|&n| n <= self.remaining())
            .ok_or_else(|| {
                UldaError::format(
                    self.what,
                    format!("payload truncated: need {count} f64 values"),
                )
            })?;
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        self.pos += need;
        Ok(out)
    }

    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(UldaError::format(
                self.what,
                format!("{} trailing payload bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

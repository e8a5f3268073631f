//! Flat stack payloads: layout, output formats, bad-byte checks.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::Chain;
use crate::x86::Reg;

/// Set of byte values forbidden in a payload.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BadBytes([bool; 256]);

impl Default for BadBytes {
    fn default() -> Self {
        BadBytes([false; 256])
    }
}

impl BadBytes {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(bytes: impl IntoIterator<Item = u8>) -> Self {
        let mut set = [false; 256];
        for b in bytes {
            set[b as usize] = true;
        }
        BadBytes(set)
    }

    pub fn contains(&self, b: u8) -> bool {
        self.0[b as usize]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(|&b| self.contains(b))
    }

    pub fn word_ok(&self, w: u64) -> bool {
        w.to_le_bytes().iter().all(|&b| !self.contains(b))
    }
}

impl fmt::Debug for BadBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(|b| format!("{b:02x}"))).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Unrebased vaddr of the gadget this word dispatches to.
    GadgetAddress(u64),
    /// Stack word popped into `reg`.
    Immediate(Reg),
    Padding,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::GadgetAddress(v) => write!(f, "gadget {v:#x}"),
            Role::Immediate(r) => write!(f, "immediate for {r}"),
            Role::Padding => f.write_str("padding"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Payload {
    pub words: Vec<u64>,
    pub roles: Vec<Role>,
    pub base_offset: u64,
}

impl Payload {
    pub fn to_raw(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("AddressOverflow: gadget {vaddr:#x} + base {base:#x} wraps past 2^64")]
    AddressOverflow { vaddr: u64, base: u64 },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

/// Lay a chain out as stack words.
///
/// Each step contributes its gadget address followed by its stack words. A
/// `ret imm16` step's trailing displacement words are skipped by the CPU only
/// after it has popped the next gadget address, so they are emitted right
/// after that next address.
pub fn layout(chain: &Chain, base_offset: u64) -> Result<Payload, PayloadError> {
    let mut p = Payload { base_offset, ..Payload::default() };
    let mut pending: Vec<(u64, Role)> = Vec::new();
    for step in &chain.steps {
        let vaddr = step.gadget.vaddr;
        let addr = vaddr
            .checked_add(base_offset)
            .ok_or(PayloadError::AddressOverflow { vaddr, base: base_offset })?;
        p.words.push(addr);
        p.roles.push(Role::GadgetAddress(vaddr));
        for (w, r) in pending.drain(..) {
            p.words.push(w);
            p.roles.push(r);
        }
        let tail = step.ret_padding_words();
        let body = step.stack_words.len() - tail;
        for (i, (&w, &r)) in step.stack_words.iter().zip(&step.annotations).enumerate() {
            if i < body {
                p.words.push(w);
                p.roles.push(r);
            } else {
                pending.push((w, r));
            }
        }
    }
    for (w, r) in pending {
        p.words.push(w);
        p.roles.push(r);
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Raw,
    Hex,
    Json,
    Script,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Format::Raw),
            "hex" => Ok(Format::Hex),
            "json" => Ok(Format::Json),
            "script" => Ok(Format::Script),
            other => Err(format!("unknown format {other:?} (expected raw, hex, json, script)")),
        }
    }
}

mod dec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct DecWord(#[serde(with = "dec")] u64);

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RoleJson {
    GadgetAddress {
        #[serde(with = "dec")]
        vaddr: u64,
    },
    Immediate {
        reg: Reg,
    },
    Padding,
}

#[derive(Serialize, Deserialize)]
struct PayloadJson {
    words: Vec<DecWord>,
    roles: Vec<RoleJson>,
    #[serde(with = "dec")]
    base_offset: u64,
}

impl From<&Payload> for PayloadJson {
    fn from(p: &Payload) -> Self {
        PayloadJson {
            words: p.words.iter().map(|&w| DecWord(w)).collect(),
            roles: p
                .roles
                .iter()
                .map(|r| match *r {
                    Role::GadgetAddress(vaddr) => RoleJson::GadgetAddress { vaddr },
                    Role::Immediate(reg) => RoleJson::Immediate { reg },
                    Role::Padding => RoleJson::Padding,
                })
                .collect(),
            base_offset: p.base_offset,
        }
    }
}

/// Parse the `json` rendering back into a payload.
pub fn from_json(text: &str) -> Result<Payload, PayloadError> {
    let j: PayloadJson = serde_json::from_str(text).map_err(|e| PayloadError::Malformed(e.to_string()))?;
    if j.words.len() != j.roles.len() {
        return Err(PayloadError::Malformed("words and roles differ in length".into()));
    }
    Ok(Payload {
        words: j.words.into_iter().map(|w| w.0).collect(),
        roles: j
            .roles
            .into_iter()
            .map(|r| match r {
                RoleJson::GadgetAddress { vaddr } => Role::GadgetAddress(vaddr),
                RoleJson::Immediate { reg } => Role::Immediate(reg),
                RoleJson::Padding => Role::Padding,
            })
            .collect(),
        base_offset: j.base_offset,
    })
}

fn render_script(p: &Payload) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "#!/usr/bin/env python3");
    let _ = writeln!(s, "# ROP payload: {} words, load base {:#x}.", p.words.len(), p.base_offset);
    let _ = writeln!(s, "# Word 0 overwrites the saved return address. Prepend the buffer");
    let _ = writeln!(s, "# padding that precedes it for your target; it is not included here.");
    let _ = writeln!(s, "import struct");
    let _ = writeln!(s, "import sys");
    let _ = writeln!(s);
    let _ = writeln!(s, "payload = b\"\"");
    for (w, r) in p.words.iter().zip(&p.roles) {
        let _ = writeln!(s, "payload += struct.pack(\"<Q\", {w:#018x})  # {r}");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "sys.stdout.buffer.write(payload)");
    s
}

pub fn render(p: &Payload, format: Format) -> Vec<u8> {
    match format {
        Format::Raw => p.to_raw(),
        Format::Hex => p.words.iter().map(|w| format!("{w:016x}\n")).collect::<String>().into_bytes(),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&PayloadJson::from(p)).expect("payload serializes");
            s.push('\n');
            s.into_bytes()
        }
        Format::Script => render_script(p).into_bytes(),
    }
}

/// Decode a payload file: the `hex` format if it consists only of hex digits
/// and whitespace, otherwise raw little-endian words.
pub fn parse_payload_file(bytes: &[u8]) -> Result<Vec<u64>, PayloadError> {
    let is_hex = !bytes.is_empty()
        && bytes.iter().all(|b| b.is_ascii_hexdigit() || b.is_ascii_whitespace());
    if is_hex {
        let text = std::str::from_utf8(bytes).expect("ascii");
        return text
            .split_whitespace()
            .map(|tok| {
                if tok.len() != 16 {
                    return Err(PayloadError::Malformed(format!("hex word {tok:?} is not 16 digits")));
                }
                u64::from_str_radix(tok, 16).map_err(|e| PayloadError::Malformed(e.to_string()))
            })
            .collect();
    }
    if !bytes.len().is_multiple_of(8) {
        return Err(PayloadError::Malformed(format!(
            "raw payload length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub word: usize,
    pub byte: usize,
    pub value: u8,
}

/// Every forbidden byte in the raw rendering, with its location.
pub fn check_bad_bytes(p: &Payload, bad: &BadBytes) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    for (word, w) in p.words.iter().enumerate() {
        for (byte, value) in w.to_le_bytes().into_iter().enumerate() {
            if bad.contains(value) {
                v.push(Violation { word, byte, value });
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

//! Document trees for V2G messages, their canonical XML text form, and a
//! compact schema-less binary encoding in the spirit of EXI.
//!
//! Binary layout: one magic byte followed by the depth-first event stream of
//! exactly one root element.
//!
//! ```text
//! SE  0x01 name-ref                 start element
//! AT  0x02 name-ref string          attribute (only directly after SE/AT)
//! CH  0x03 string                   character content
//! EE  0x04                          end element
//!
//! name-ref = varint 0, varint len, utf8      literal, appended to the table
//!          | varint (index + 1)              previously seen name
//! string   = varint len, utf8
//! ```
//!
//! Element and attribute names share one string table. Varints are unsigned
//! LEB128 and must be minimally encoded; literals are only legal for names not
//! yet in the table. Together these make decoding injective, so re-encoding a
//! decoded document reproduces its bytes.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

pub const EXI_MAGIC: u8 = 0xEC;

const EV_START: u8 = 0x01;
const EV_ATTRIBUTE: u8 = 0x02;
const EV_CHARACTERS: u8 = 0x03;
const EV_END: u8 = 0x04;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct DocNode {
    pub name: String,
    pub attributes: Vec<(String, String)>,
    pub text: Option<String>,
    pub children: Vec<DocNode>,
}

impl DocNode {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn with_text(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            text: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn with_children(name: impl Into<String>, children: Vec<DocNode>) -> Self {
        Self {
            name: name.into(),
            children,
            ..Self::default()
        }
    }

    pub fn child(&self, name: &str) -> Option<&DocNode> {
        self.children.iter().find(|c| c.name == name)
    }

    pub fn children_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a DocNode> + 'a {
        self.children.iter().filter(move |c| c.name == name)
    }

    pub fn text(&self) -> Option<&str> {
        self.text.as_deref()
    }

    /// Visits every node in depth-first pre-order, allowing mutation.
    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&mut DocNode)) {
        f(self);
        for c in &mut self.children {
            c.walk_mut(f);
        }
    }

    /// Checks the simplified content model over the whole subtree.
    pub fn validate(&self) -> Result<(), CodecError> {
        if !is_valid_name(&self.name) {
            return Err(CodecError::InvalidName(self.name.clone()));
        }
        for (i, (name, _)) in self.attributes.iter().enumerate() {
            if !is_valid_name(name) {
                return Err(CodecError::InvalidName(name.clone()));
            }
            if self.attributes[..i].iter().any(|(n, _)| n == name) {
                return Err(CodecError::DuplicateAttribute(name.clone()));
            }
        }
        if self.text.is_some() && !self.children.is_empty() {
            return Err(CodecError::MixedContent(self.name.clone()));
        }
        self.children.iter().try_for_each(DocNode::validate)
    }
}

pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.chars().all(|c| {
            !c.is_whitespace() && !matches!(c, '<' | '>' | '/' | '=' | '"' | '\'' | '&' | '?' | '!')
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("empty input")]
    EmptyInput,
    #[error("malformed XML at byte {position}: {reason}")]
    MalformedXml { position: usize, reason: String },
    #[error("invalid element or attribute name {0:?}")]
    InvalidName(String),
    #[error("duplicate attribute {0:?}")]
    DuplicateAttribute(String),
    #[error("element {0:?} has both text and children")]
    MixedContent(String),
    #[error("bad magic byte {0:#04x}")]
    BadMagic(u8),
    #[error("stream truncated at byte {0}")]
    TruncatedStream(usize),
    #[error("string table index {index} out of range (table has {len} entries)")]
    BadStringTableIndex { index: u64, len: usize },
    #[error("unexpected event code {code:#04x} at byte {position}")]
    BadEventCode { code: u8, position: usize },
    #[error("invalid UTF-8 in string at byte {0}")]
    InvalidUtf8(usize),
    #[error("non-minimal varint at byte {0}")]
    NonCanonicalVarint(usize),
    #[error("{0} trailing bytes after the root element")]
    TrailingBytes(usize),
}

// ---------------------------------------------------------------------------
// XML text
// ---------------------------------------------------------------------------

fn escape_into(out: &mut String, s: &str) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
}

fn render_into(out: &mut String, node: &DocNode, indent: Option<usize>) {
    out.push('<');
    out.push_str(&node.name);
    for (k, v) in &node.attributes {
        let _ = write!(out, " {k}=\"");
        escape_into(out, v);
        out.push('"');
    }
    match (&node.text, node.children.is_empty()) {
        (None, true) => out.push_str("/>"),
        (Some(text), _) => {
            out.push('>');
            escape_into(out, text);
            let _ = write!(out, "</{}>", node.name);
        }
        (None, false) => {
            out.push('>');
            for c in &node.children {
                if let Some(depth) = indent {
                    out.push('\n');
                    out.push_str(&"  ".repeat(depth + 1));
                }
                render_into(out, c, indent.map(|d| d + 1));
            }
            if let Some(depth) = indent {
                out.push('\n');
                out.push_str(&"  ".repeat(depth));
            }
            let _ = write!(out, "</{}>", node.name);
        }
    }
}

/// Canonical rendering: attributes in stored order, no insignificant
/// whitespace, the five reserved characters escaped.
pub fn to_xml_text(node: &DocNode) -> String {
    let mut out = String::new();
    render_into(&mut out, node, None);
    out
}

/// Indented rendering of the same document; parses back to the same tree.
pub fn to_xml_pretty(node: &DocNode) -> String {
    let mut out = String::new();
    render_into(&mut out, node, Some(0));
    out
}

struct XmlParser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> XmlParser<'a> {
    fn err(&self, reason: impl Into<String>) -> CodecError {
        CodecError::MalformedXml {
            position: self.pos,
            reason: reason.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.rest().starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn name(&mut self) -> Result<String, CodecError> {
        let rest = self.rest();
        let end = rest
            .find(|c: char| {
                c.is_whitespace() || matches!(c, '<' | '>' | '/' | '=' | '"' | '\'' | '&')
            })
            .unwrap_or(rest.len());
        if end == 0 {
            return Err(self.err("expected a name"));
        }
        let name = &rest[..end];
        if !is_valid_name(name) {
            return Err(self.err(format!("invalid name {name:?}")));
        }
        self.pos += end;
        Ok(name.to_string())
    }

    fn unescape(&self, raw: &str, base: usize) -> Result<String, CodecError> {
        let mut out = String::with_capacity(raw.len());
        let mut rest = raw;
        while let Some(amp) = rest.find('&') {
            out.push_str(&rest[..amp]);
            let after = &rest[amp + 1..];
            let semi = after.find(';').ok_or_else(|| CodecError::MalformedXml {
                position: base + (raw.len() - rest.len()) + amp,
                reason: "unterminated entity".into(),
            })?;
            let entity = &after[..semi];
            let c = match entity {
                "amp" => '&',
                "lt" => '<',
                "gt" => '>',
                "quot" => '"',
                "apos" => '\'',
                e if e.starts_with("#x") => u32::from_str_radix(&e[2..], 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| self.bad_entity(e))?,
                e if e.starts_with('#') => e[1..]
                    .parse::<u32>()
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| self.bad_entity(e))?,
                e => return Err(self.bad_entity(e)),
            };
            out.push(c);
            rest = &after[semi + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }

    fn bad_entity(&self, e: &str) -> CodecError {
        self.err(format!("unknown entity &{e};"))
    }

    fn attribute_value(&mut self) -> Result<String, CodecError> {
        let quote = if self.eat("\"") {
            '"'
        } else if self.eat("'") {
            '\''
        } else {
            return Err(self.err("expected quoted attribute value"));
        };
        let start = self.pos;
        let end = self
            .rest()
            .find(quote)
            .ok_or_else(|| self.err("unterminated attribute value"))?;
        let raw = &self.rest()[..end];
        if raw.contains('<') {
            return Err(self.err("'<' in attribute value"));
        }
        self.pos += end + 1;
        self.unescape(raw, start)
    }

    fn element(&mut self) -> Result<DocNode, CodecError> {
        if !self.eat("<") {
            return Err(self.err("expected '<'"));
        }
        let mut node = DocNode::new(self.name()?);
        loop {
            let before = self.pos;
            self.skip_ws();
            if self.eat("/>") {
                return Ok(node);
            }
            if self.eat(">") {
                break;
            }
            if self.pos == before {
                return Err(self.err("expected whitespace before attribute"));
            }
            let key = self.name()?;
            self.skip_ws();
            if !self.eat("=") {
                return Err(self.err("expected '='"));
            }
            self.skip_ws();
            let value = self.attribute_value()?;
            if node.attributes.iter().any(|(k, _)| *k == key) {
                return Err(self.err(format!("duplicate attribute {key:?}")));
            }
            node.attributes.push((key, value));
        }

        // Content: either a single text run or whitespace-separated children.
        let mut text_segments: Vec<(usize, &str)> = Vec::new();
        loop {
            let start = self.pos;
            let next_lt = self
                .rest()
                .find('<')
                .ok_or_else(|| self.err(format!("unclosed element <{}>", node.name)))?;
            if next_lt > 0 {
                text_segments.push((start, &self.rest()[..next_lt]));
                self.pos += next_lt;
            }
            if self.eat("</") {
                let close = self.name()?;
                self.skip_ws();
                if !self.eat(">") {
                    return Err(self.err("expected '>' after closing tag"));
                }
                if close != node.name {
                    return Err(self.err(format!(
                        "mismatched closing tag </{close}> for <{}>",
                        node.name
                    )));
                }
                break;
            }
            if self.rest().starts_with("<!") || self.rest().starts_with("<?") {
                return Err(
                    self.err("comments, doctypes and processing instructions are not supported")
                );
            }
            node.children.push(self.element()?);
        }

        if node.children.is_empty() {
            if let Some(&(start, raw)) = text_segments.first() {
                node.text = Some(self.unescape(raw, start)?);
            } else {
                node.text = Some(String::new());
            }
        } else if let Some(&(start, _)) = text_segments.iter().find(|(_, s)| !s.trim().is_empty()) {
            return Err(CodecError::MalformedXml {
                position: start,
                reason: format!("element <{}> mixes text and children", node.name),
            });
        }
        Ok(node)
    }
}

/// Parses the canonical XML dialect produced by [`to_xml_text`], tolerating
/// whitespace between elements.
pub fn parse_xml_text(text: &str) -> Result<DocNode, CodecError> {
    if text.trim().is_empty() {
        return Err(CodecError::EmptyInput);
    }
    let mut p = XmlParser { src: text, pos: 0 };
    p.skip_ws();
    if p.rest().starts_with("<?xml") {
        let end = p
            .rest()
            .find("?>")
            .ok_or_else(|| p.err("unterminated XML declaration"))?;
        p.pos += end + 2;
        p.skip_ws();
    }
    let node = p.element()?;
    p.skip_ws();
    if p.pos != text.len() {
        return Err(p.err("content after the root element"));
    }
    Ok(node)
}

// ---------------------------------------------------------------------------
// Binary encoding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExiDocument {
    pub bytes: Vec<u8>,
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7F) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_varint(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

#[derive(Default)]
struct NameTable {
    index: HashMap<String, u64>,
}

impl NameTable {
    fn put(&mut self, out: &mut Vec<u8>, name: &str) {
        if let Some(&i) = self.index.get(name) {
            put_varint(out, i + 1);
        } else {
            put_varint(out, 0);
            put_string(out, name);
            let next = self.index.len() as u64;
            self.index.insert(name.to_string(), next);
        }
    }
}

fn encode_node(out: &mut Vec<u8>, table: &mut NameTable, node: &DocNode) {
    out.push(EV_START);
    table.put(out, &node.name);
    for (k, v) in &node.attributes {
        out.push(EV_ATTRIBUTE);
        table.put(out, k);
        put_string(out, v);
    }
    if let Some(text) = &node.text {
        out.push(EV_CHARACTERS);
        put_string(out, text);
    }
    for c in &node.children {
        encode_node(out, table, c);
    }
    out.push(EV_END);
}

/// Deterministic binary encoding; structurally equal trees give identical
/// bytes.
pub fn encode_exi(node: &DocNode) -> ExiDocument {
    let mut bytes = vec![EXI_MAGIC];
    encode_node(&mut bytes, &mut NameTable::default(), node);
    ExiDocument { bytes }
}

struct ExiReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    table: Vec<String>,
}

impl<'a> ExiReader<'a> {
    fn byte(&mut self) -> Result<u8, CodecError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or(CodecError::TruncatedStream(self.pos))?;
        self.pos += 1;
        Ok(b)
    }

    fn varint(&mut self) -> Result<u64, CodecError> {
        let start = self.pos;
        let mut value = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.byte()?;
            if shift == 63 && b > 1 {
                return Err(CodecError::NonCanonicalVarint(start));
            }
            value |= u64::from(b & 0x7F) << shift;
            if b & 0x80 == 0 {
                if b == 0 && shift > 0 {
                    return Err(CodecError::NonCanonicalVarint(start));
                }
                return Ok(value);
            }
        }
        Err(CodecError::NonCanonicalVarint(start))
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let len = self.varint()?;
        let start = self.pos;
        let available = (self.bytes.len() - self.pos) as u64;
        if len > available {
            return Err(CodecError::TruncatedStream(self.bytes.len()));
        }
        let end = start + len as usize;
        self.pos = end;
        String::from_utf8(self.bytes[start..end].to_vec())
            .map_err(|_| CodecError::InvalidUtf8(start))
    }

    fn name_ref(&mut self) -> Result<String, CodecError> {
        match self.varint()? {
            0 => {
                let name = self.string()?;
                if !is_valid_name(&name) {
                    return Err(CodecError::InvalidName(name));
                }
                if self.table.contains(&name) {
                    // Literal for an already-tabled name is never produced.
                    return Err(CodecError::BadStringTableIndex {
                        index: 0,
                        len: self.table.len(),
                    });
                }
                self.table.push(name.clone());
                Ok(name)
            }
            n => {
                let index = n - 1;
                self.table
                    .get(index as usize)
                    .cloned()
                    .ok_or(CodecError::BadStringTableIndex {
                        index,
                        len: self.table.len(),
                    })
            }
        }
    }

    /// Reads one element whose SE code has already been consumed.
    fn element(&mut self, depth: usize) -> Result<DocNode, CodecError> {
        if depth > 256 {
            return Err(CodecError::BadEventCode {
                code: EV_START,
                position: self.pos,
            });
        }
        let mut node = DocNode::new(self.name_ref()?);
        let mut seen_content = false;
        loop {
            let position = self.pos;
            let code = self.byte()?;
            match code {
                EV_ATTRIBUTE if !seen_content => {
                    let key = self.name_ref()?;
                    let value = self.string()?;
                    if node.attributes.iter().any(|(k, _)| *k == key) {
                        return Err(CodecError::DuplicateAttribute(key));
                    }
                    node.attributes.push((key, value));
                }
                EV_CHARACTERS if !seen_content => {
                    node.text = Some(self.string()?);
                    seen_content = true;
                }
                EV_START if node.text.is_none() => {
                    seen_content = true;
                    node.children.push(self.element(depth + 1)?);
                }
                EV_END => return Ok(node),
                code => return Err(CodecError::BadEventCode { code, position }),
            }
        }
    }
}

pub fn decode_exi(doc: &ExiDocument) -> Result<DocNode, CodecError> {
    decode_exi_bytes(&doc.bytes)
}

pub fn decode_exi_bytes(bytes: &[u8]) -> Result<DocNode, CodecError> {
    let magic = *bytes.first().ok_or(CodecError::TruncatedStream(0))?;
    if magic != EXI_MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    let mut r = ExiReader {
        bytes,
        pos: 1,
        table: Vec::new(),
    };
    let position = r.pos;
    let code = r.byte()?;
    if code != EV_START {
        return Err(CodecError::BadEventCode { code, position });
    }
    let node = r.element(0)?;
    if r.pos != bytes.len() {
        return Err(CodecError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(node)
}

//! Column-oriented reader and writer for the `vertex` element of PLY files.
//!
//! Both `ascii` and `binary_little_endian` bodies are supported. Other
//! elements are skipped on read (list properties included); big-endian files
//! are rejected.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalarType::I8 => "char",
            ScalarType::U8 => "uchar",
            ScalarType::I16 => "short",
            ScalarType::U16 => "ushort",
            ScalarType::I32 => "int",
            ScalarType::U32 => "uint",
            ScalarType::F32 => "float",
            ScalarType::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn encode_le(self, v: f64, out: &mut Vec<u8>) {
        match self {
            ScalarType::I8 => out.extend_from_slice(&(v as i8).to_le_bytes()),
            ScalarType::U8 => out.extend_from_slice(&(v as u8).to_le_bytes()),
            ScalarType::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            ScalarType::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            ScalarType::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            ScalarType::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            ScalarType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            ScalarType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    fn format_ascii(self, v: f64) -> String {
        match self {
            ScalarType::F32 => format!("{}", v as f32),
            ScalarType::F64 => format!("{v}"),
            ScalarType::I8 => format!("{}", v as i8),
            ScalarType::U8 => format!("{}", v as u8),
            ScalarType::I16 => format!("{}", v as i16),
            ScalarType::U16 => format!("{}", v as u16),
            ScalarType::I32 => format!("{}", v as i32),
            ScalarType::U32 => format!("{}", v as u32),
        }
    }
}

#[derive(Debug, Clone)]
struct PropertyDef {
    name: String,
    ty: ScalarType,
    /// Count type for list properties.
    list: Option<ScalarType>,
}

#[derive(Debug, Clone)]
struct ElementDef {
    name: String,
    count: usize,
    properties: Vec<PropertyDef>,
}

/// One scalar property of the vertex element, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub ty: ScalarType,
    pub values: Vec<f64>,
}

/// The vertex element of a PLY file as named columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VertexTable {
    pub len: usize,
    pub columns: Vec<Column>,
}

impl VertexTable {
    pub fn new(len: usize) -> Self {
        VertexTable {
            len,
            columns: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    pub fn has(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c.name == name)
    }

    pub fn push(&mut self, name: &str, ty: ScalarType, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len {
            return Err(Error::LengthMismatch {
                what: "ply column",
                left: values.len(),
                right: self.len,
            });
        }
        self.columns.push(Column {
            name: name.to_string(),
            ty,
            values,
        });
        Ok(())
    }
}

pub fn read_vertices(path: &Path) -> Result<VertexTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_vertices_from(BufReader::new(file))
}

fn read_header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut buf = Vec::new();
    let n = r
        .read_until(b'\n', &mut buf)
        .map_err(|e| Error::Ply(format!("reading header: {e}")))?;
    if n == 0 {
        return Err(Error::Ply("unexpected end of file in header".into()));
    }
    let s = String::from_utf8(buf).map_err(|_| Error::Ply("header is not valid UTF-8".into()))?;
    Ok(s.trim_end_matches(['\n', '\r']).to_string())
}

pub fn read_vertices_from<R: BufRead>(mut r: R) -> Result<VertexTable> {
    let magic = read_header_line(&mut r)?;
    if magic.trim() != "ply" {
        return Err(Error::Ply("missing 'ply' magic line".into()));
    }
    let mut format = None;
    let mut elements: Vec<ElementDef> = Vec::new();
    loop {
        let line = read_header_line(&mut r)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                format = Some(match toks.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some("binary_big_endian") => {
                        return Err(Error::Ply(
                            "unsupported endianness: binary_big_endian".into(),
                        ))
                    }
                    other => return Err(Error::Ply(format!("unknown format {other:?}"))),
                });
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err(Error::Ply(format!("malformed element line: {line}")));
                }
                let count = toks[2]
                    .parse()
                    .map_err(|_| Error::Ply(format!("bad element count in: {line}")))?;
                elements.push(ElementDef {
                    name: toks[1].to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Ply("property before any element".into()))?;
                let prop = if toks.get(1) == Some(&"list") {
                    if toks.len() != 5 {
                        return Err(Error::Ply(format!("malformed list property: {line}")));
                    }
                    let ct = ScalarType::parse(toks[2])
                        .ok_or_else(|| Error::Ply(format!("unknown type {}", toks[2])))?;
                    let it = ScalarType::parse(toks[3])
                        .ok_or_else(|| Error::Ply(format!("unknown type {}", toks[3])))?;
                    PropertyDef {
                        name: toks[4].to_string(),
                        ty: it,
                        list: Some(ct),
                    }
                } else {
                    if toks.len() != 3 {
                        return Err(Error::Ply(format!("malformed property: {line}")));
                    }
                    let ty = ScalarType::parse(toks[1])
                        .ok_or_else(|| Error::Ply(format!("unknown type {}", toks[1])))?;
                    PropertyDef {
                        name: toks[2].to_string(),
                        ty,
                        list: None,
                    }
                };
                el.properties.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(Error::Ply(format!("unexpected header keyword '{other}'"))),
        }
    }
    let format = format.ok_or_else(|| Error::Ply("header has no format line".into()))?;
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Ply("no vertex element".into()))?;

    match format {
        PlyFormat::Ascii => read_ascii_body(r, &elements, vertex_pos),
        PlyFormat::BinaryLittleEndian => read_binary_body(r, &elements, vertex_pos),
    }
}

fn empty_table(el: &ElementDef) -> VertexTable {
    let mut table = VertexTable::new(el.count);
    for p in el.properties.iter().filter(|p| p.list.is_none()) {
        table.columns.push(Column {
            name: p.name.clone(),
            ty: p.ty,
            values: Vec::with_capacity(el.count),
        });
    }
    table
}

fn read_ascii_body<R: BufRead>(r: R, elements: &[ElementDef], vertex_pos: usize) -> Result<VertexTable> {
    let mut lines = r.lines();
    let mut next_line = |what: &str, i: usize| -> Result<String> {
        loop {
            match lines.next() {
                None => return Err(Error::Ply(format!("unexpected end of file in {what} {i}"))),
                Some(Err(e)) => return Err(Error::Ply(format!("reading {what} {i}: {e}"))),
                Some(Ok(l)) if l.trim().is_empty() => continue,
                Some(Ok(l)) => return Ok(l),
            }
        }
    };
    for el in &elements[..vertex_pos] {
        for i in 0..el.count {
            next_line(&el.name, i)?;
        }
    }
    let el = &elements[vertex_pos];
    let mut table = empty_table(el);
    for i in 0..el.count {
        let line = next_line("vertex", i)?;
        let mut toks = line.split_whitespace();
        let mut col = 0;
        for p in &el.properties {
            let mut take = || -> Result<f64> {
                let t = toks
                    .next()
                    .ok_or_else(|| Error::Ply(format!("vertex {i}: missing value for '{}'", p.name)))?;
                t.parse::<f64>()
                    .map_err(|_| Error::Ply(format!("vertex {i}: bad value '{t}' for '{}'", p.name)))
            };
            match p.list {
                Some(_) => {
                    let n = take()? as usize;
                    for _ in 0..n {
                        take()?;
                    }
                }
                None => {
                    let v = take()?;
                    table.columns[col].values.push(v);
                    col += 1;
                }
            }
        }
    }
    Ok(table)
}

fn read_exact_ply<R: Read>(r: &mut R, buf: &mut [u8], what: &str, i: usize) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Ply(format!("truncated binary body in {what} {i}: {e}")))
}

fn read_binary_body<R: BufRead>(mut r: R, elements: &[ElementDef], vertex_pos: usize) -> Result<VertexTable> {
    let mut scratch = [0u8; 8];
    for el in &elements[..vertex_pos] {
        for i in 0..el.count {
            for p in &el.properties {
                match p.list {
                    Some(ct) => {
                        read_exact_ply(&mut r, &mut scratch[..ct.size()], &el.name, i)?;
                        let n = ct.decode_le(&scratch) as usize;
                        let mut skip = vec![0u8; n * p.ty.size()];
                        read_exact_ply(&mut r, &mut skip, &el.name, i)?;
                    }
                    None => read_exact_ply(&mut r, &mut scratch[..p.ty.size()], &el.name, i)?,
                }
            }
        }
    }
    let el = &elements[vertex_pos];
    let mut table = empty_table(el);
    for i in 0..el.count {
        let mut col = 0;
        for p in &el.properties {
            match p.list {
                Some(ct) => {
                    read_exact_ply(&mut r, &mut scratch[..ct.size()], "vertex", i)?;
                    let n = ct.decode_le(&scratch) as usize;
                    let mut skip = vec![0u8; n * p.ty.size()];
                    read_exact_ply(&mut r, &mut skip, "vertex", i)?;
                }
                None => {
                    let sz = p.ty.size();
                    read_exact_ply(&mut r, &mut scratch[..sz], "vertex", i)?;
                    table.columns[col].values.push(p.ty.decode_le(&scratch[..sz]));
                    col += 1;
                }
            }
        }
    }
    Ok(table)
}

pub fn write_vertices(path: &Path, table: &VertexTable, format: PlyFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_vertices_to(&mut w, table, format).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_vertices_to<W: Write>(w: &mut W, table: &VertexTable, format: PlyFormat) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    match format {
        PlyFormat::Ascii => writeln!(w, "format ascii 1.0")?,
        PlyFormat::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
    }
    writeln!(w, "element vertex {}", table.len)?;
    for c in &table.columns {
        writeln!(w, "property {} {}", c.ty.name(), c.name)?;
    }
    writeln!(w, "end_header")?;
    match format {
        PlyFormat::Ascii => {
            let mut line = String::new();
            for i in 0..table.len {
                line.clear();
                for (j, c) in table.columns.iter().enumerate() {
                    if j > 0 {
                        line.push(' ');
                    }
                    line.push_str(&c.ty.format_ascii(c.values[i]));
                }
                writeln!(w, "{line}")?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = Vec::with_capacity(64);
            for i in 0..table.len {
                buf.clear();
                for c in &table.columns {
                    c.ty.encode_le(c.values[i], &mut buf);
                }
                w.write_all(&buf)?;
            }
        }
    }
    Ok(())
}

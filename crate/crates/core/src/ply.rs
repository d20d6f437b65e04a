//! Minimal PLY support for vertex tables.
//!
//! Reads ASCII and binary (either endianness) files, keeping every scalar
//! vertex property as an `f64` column; list properties and other elements
//! are skipped. Writes `binary_little_endian` with `double` columns.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Parse(format!("unknown PLY scalar type '{other}'"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, bytes: &[u8], format: Format) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&bytes[..$n]);
                (if format == Format::BinaryBe { <$t>::from_be_bytes(a) } else { <$t>::from_le_bytes(a) }) as f64
            }};
        }
        match self {
            Scalar::I8 => bytes[0] as i8 as f64,
            Scalar::U8 => bytes[0] as f64,
            Scalar::I16 => num!(i16, 2),
            Scalar::U16 => num!(u16, 2),
            Scalar::I32 => num!(i32, 4),
            Scalar::U32 => num!(u32, 4),
            Scalar::F32 => num!(f32, 4),
            Scalar::F64 => num!(f64, 8),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Named `f64` columns of a PLY vertex element.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VertexTable {
    pub columns: Vec<(String, Vec<f64>)>,
}

impl VertexTable {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, |c| c.1.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.columns.push((name.into(), values));
    }

    /// Triples of columns (e.g. `x, y, z`), if all three exist.
    pub fn vec3(&self, a: &str, b: &str, c: &str) -> Option<Vec<nalgebra::Vector3<f64>>> {
        let (a, b, c) = (self.column(a)?, self.column(b)?, self.column(c)?);
        Some((0..a.len()).map(|i| nalgebra::Vector3::new(a[i], b[i], c[i])).collect())
    }
}

fn parse_header<R: BufRead>(reader: &mut R) -> Result<(Format, Vec<Element>)> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::Parse("missing 'ply' magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Parse("unterminated PLY header".into()));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    "binary_big_endian" => Format::BinaryBe,
                    other => return Err(Error::Parse(format!("unknown PLY format '{other}'"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::Parse(format!("bad element count '{count}'")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements.last_mut().ok_or_else(|| Error::Parse("property before element".into()))?;
                el.properties.push(Property::List { count: Scalar::parse(count)?, item: Scalar::parse(item)? });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::Parse("property before element".into()))?;
                el.properties.push(Property::Scalar { name: name.to_string(), ty: Scalar::parse(ty)? });
            }
            _ => return Err(Error::Parse(format!("unrecognized PLY header line '{}'", line.trim_end()))),
        }
    }
    let format = format.ok_or_else(|| Error::Parse("PLY header lacks a format line".into()))?;
    Ok((format, elements))
}

pub fn read_vertices<R: Read>(input: R) -> Result<VertexTable> {
    let mut reader = BufReader::new(input);
    let (format, elements) = parse_header(&mut reader)?;
    let mut table = VertexTable::default();
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;

    let mut ascii_tokens = if format == Format::Ascii {
        Some(std::str::from_utf8(&body).map_err(|_| Error::Parse("ASCII PLY body is not UTF-8".into()))?.split_ascii_whitespace())
    } else {
        None
    };
    let mut offset = 0usize;
    let mut take = |ty: Scalar| -> Result<f64> {
        if let Some(tokens) = ascii_tokens.as_mut() {
            let tok = tokens.next().ok_or_else(|| Error::Parse("truncated ASCII PLY body".into()))?;
            tok.parse::<f64>().map_err(|_| Error::Parse(format!("bad PLY number '{tok}'")))
        } else {
            let n = ty.size();
            if offset + n > body.len() {
                return Err(Error::Parse("truncated binary PLY body".into()));
            }
            let v = ty.decode(&body[offset..offset + n], format);
            offset += n;
            Ok(v)
        }
    };

    for el in &elements {
        let is_vertex = el.name == "vertex";
        if is_vertex {
            for p in &el.properties {
                if let Property::Scalar { name, .. } = p {
                    table.columns.push((name.clone(), Vec::with_capacity(el.count)));
                }
            }
        }
        for _ in 0..el.count {
            let mut col = 0;
            for p in &el.properties {
                match p {
                    Property::Scalar { ty, .. } => {
                        let v = take(*ty)?;
                        if is_vertex {
                            table.columns[col].1.push(v);
                            col += 1;
                        }
                    }
                    Property::List { count, item } => {
                        let n = take(*count)?;
                        if n < 0.0 {
                            return Err(Error::Parse("negative PLY list length".into()));
                        }
                        for _ in 0..n as usize {
                            take(*item)?;
                        }
                    }
                }
            }
        }
        if is_vertex {
            break;
        }
    }
    Ok(table)
}

pub fn write_vertices<W: Write>(out: W, table: &VertexTable, comment: Option<&str>) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    let rows = table.len();
    if table.columns.iter().any(|(_, c)| c.len() != rows) {
        return Err(Error::InvalidMap("PLY columns have unequal lengths".into()));
    }
    writeln!(out, "ply")?;
    writeln!(out, "format binary_little_endian 1.0")?;
    if let Some(c) = comment {
        writeln!(out, "comment {c}")?;
    }
    writeln!(out, "element vertex {rows}")?;
    for (name, _) in &table.columns {
        writeln!(out, "property double {name}")?;
    }
    writeln!(out, "end_header")?;
    for i in 0..rows {
        for (_, col) in &table.columns {
            out.write_all(&col[i].to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<VertexTable> {
    read_vertices(std::fs::File::open(path)?)
}

pub fn write_file(path: impl AsRef<Path>, table: &VertexTable, comment: Option<&str>) -> Result<()> {
    write_vertices(std::fs::File::create(path)?, table, comment)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_with_faces_and_lists() {
        let src = "ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255\n1 0 0 0\n0 1 0.5 7\n3 0 1 2\n";
        let t = read_vertices(src.as_bytes()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.column("z").unwrap(), &[0.0, 0.0, 0.5]);
        assert_eq!(t.column("red").unwrap(), &[255.0, 0.0, 7.0]);
    }

    #[test]
    fn binary_big_endian_float() {
        let mut bytes = b"ply\nformat binary_big_endian 1.0\nelement vertex 2\nproperty float x\nproperty short y\nend_header\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-3i16).to_be_bytes());
        bytes.extend_from_slice(&2.25f32.to_be_bytes());
        bytes.extend_from_slice(&7i16.to_be_bytes());
        let t = read_vertices(bytes.as_slice()).unwrap();
        assert_eq!(t.column("x").unwrap(), &[1.5, 2.25]);
        assert_eq!(t.column("y").unwrap(), &[-3.0, 7.0]);
    }

    #[test]
    fn write_read_round_trip() {
        let mut t = VertexTable::default();
        t.push_column("x", vec![0.1, -2.0]);
        t.push_column("planarity", vec![0.3, 1.0 / 3.0]);
        let mut buf = Vec::new();
        write_vertices(&mut buf, &t, Some("augmented map")).unwrap();
        assert_eq!(read_vertices(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn truncated_body_is_an_error() {
        let src = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1.0\n";
        assert!(read_vertices(src.as_bytes()).is_err());
        assert!(read_vertices("plx\n".as_bytes()).is_err());
    }
}

//! Point cloud files: ASCII XYZ (one `x y z` per line) and PLY with an `x y z`
//! vertex element. PLY is written as binary little-endian float32; reading also
//! accepts ASCII PLY and float64 or extra scalar vertex properties.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("ply") => Ok(CloudFormat::Ply),
            Some("xyz") | Some("txt") => Ok(CloudFormat::Xyz),
            _ => Err(Error::invalid(format!(
                "unsupported point cloud extension: {}",
                path.display()
            ))),
        }
    }
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match CloudFormat::from_path(path)? {
        CloudFormat::Xyz => parse_xyz(path, &bytes),
        CloudFormat::Ply => parse_ply(path, &bytes),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let bytes = match CloudFormat::from_path(path)? {
        CloudFormat::Xyz => encode_xyz(cloud),
        CloudFormat::Ply => encode_ply(cloud),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_xyz(cloud: &PointCloud) -> Vec<u8> {
    let mut s = String::with_capacity(cloud.len() * 32);
    for p in cloud.iter() {
        s.push_str(&format!(
            "{} {} {}\n",
            p[0] as f32, p[1] as f32, p[2] as f32
        ));
    }
    s.into_bytes()
}

pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    );
    let mut out = header.into_bytes();
    out.reserve(cloud.len() * 12);
    for p in cloud.iter() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

fn parse_err(path: &Path, location: String, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location,
        msg: msg.into(),
    }
}

pub fn parse_xyz(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        parse_err(
            path,
            format!("byte {}", e.valid_up_to()),
            "file is not valid UTF-8",
        )
    })?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < 3 {
            return Err(parse_err(
                path,
                format!("line {}", i + 1),
                "expected three coordinates",
            ));
        }
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = vals[k].parse::<f64>().map_err(|_| {
                parse_err(
                    path,
                    format!("line {}", i + 1),
                    format!("bad number `{}`", vals[k]),
                )
            })?;
        }
        pts.push(p);
    }
    PointCloud::new(pts).map_err(|e| parse_err(path, "end of file".into(), e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyEncoding {
    Ascii,
    BinaryLe,
}

pub fn parse_ply(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    const END: &[u8] = b"end_header";
    let mut pos = 0;
    let mut line_no = 0;
    let mut encoding = None;
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut seen_other_element = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(parse_err(
                path,
                format!("byte {pos}"),
                "header ended before `end_header`",
            ));
        };
        line_no += 1;
        let raw = &bytes[pos..pos + nl];
        pos += nl + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| parse_err(path, format!("line {line_no}"), "header is not UTF-8"))?
            .trim();
        let loc = || format!("line {line_no}");
        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(path, loc(), "missing `ply` magic"));
            }
            continue;
        }
        if line.as_bytes() == END {
            break;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => encoding = Some(PlyEncoding::Ascii),
            ["format", "binary_little_endian", _] => encoding = Some(PlyEncoding::BinaryLe),
            ["format", other, ..] => {
                return Err(parse_err(
                    path,
                    loc(),
                    format!("unsupported format `{other}`"),
                ))
            }
            ["element", "vertex", n] => {
                if seen_other_element {
                    return Err(parse_err(path, loc(), "vertex element must come first"));
                }
                count = Some(
                    n.parse()
                        .map_err(|_| parse_err(path, loc(), "bad vertex count"))?,
                );
                in_vertex = true;
            }
            ["element", ..] => {
                in_vertex = false;
                seen_other_element = true;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(
                    path,
                    loc(),
                    "list properties on vertices are not supported",
                ))
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| {
                    parse_err(path, loc(), format!("unknown property type `{ty}`"))
                })?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => {
                return Err(parse_err(
                    path,
                    loc(),
                    format!("unexpected header line `{line}`"),
                ))
            }
        }
    }
    let encoding =
        encoding.ok_or_else(|| parse_err(path, format!("line {line_no}"), "no format line"))?;
    let count =
        count.ok_or_else(|| parse_err(path, format!("line {line_no}"), "no vertex element"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| parse_err(path, "header".into(), format!("missing `{name}` property")))
    };
    let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
    let mut pts = Vec::with_capacity(count);
    match encoding {
        PlyEncoding::BinaryLe => {
            let offsets: Vec<usize> = props
                .iter()
                .scan(0, |acc, (_, s)| {
                    let o = *acc;
                    *acc += s.size();
                    Some(o)
                })
                .collect();
            let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
            let need = count * stride;
            if bytes.len() - pos < need {
                return Err(parse_err(
                    path,
                    format!("byte {}", bytes.len()),
                    format!(
                        "truncated vertex data: need {need} bytes, found {}",
                        bytes.len() - pos
                    ),
                ));
            }
            for v in 0..count {
                let base = pos + v * stride;
                let get = |i: usize| props[i].1.read_le(&bytes[base + offsets[i]..]);
                pts.push([get(ix), get(iy), get(iz)]);
            }
        }
        PlyEncoding::Ascii => {
            let text = std::str::from_utf8(&bytes[pos..])
                .map_err(|_| parse_err(path, format!("byte {pos}"), "vertex data is not UTF-8"))?;
            let mut lines = text.lines();
            for v in 0..count {
                let ln = line_no + v + 1;
                let line = lines.next().ok_or_else(|| {
                    parse_err(path, format!("line {ln}"), "truncated vertex data")
                })?;
                let vals: Vec<&str> = line.split_whitespace().collect();
                if vals.len() < props.len() {
                    return Err(parse_err(
                        path,
                        format!("line {ln}"),
                        "too few vertex values",
                    ));
                }
                let num = |i: usize| {
                    vals[i].parse::<f64>().map_err(|_| {
                        parse_err(
                            path,
                            format!("line {ln}"),
                            format!("bad number `{}`", vals[i]),
                        )
                    })
                };
                pts.push([num(ix)?, num(iy)?, num(iz)?]);
            }
        }
    }
    check_finite(path, &pts)?;
    PointCloud::new(pts).map_err(|e| parse_err(path, "vertex data".into(), e.to_string()))
}

fn check_finite(path: &Path, pts: &[Point3]) -> Result<()> {
    match pts.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        Some(i) => Err(parse_err(
            path,
            format!("vertex {i}"),
            "non-finite coordinate",
        )),
        None => Ok(()),
    }
}

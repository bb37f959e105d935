//! Splat scenes in PLY form.
//!
//! The vertex element carries `x y z`, `rot_0..rot_3` (w, x, y, z),
//! `scale_0 scale_1` (optionally `scale_2`), `opacity` and optionally
//! `spike_threshold`. Every other vertex property is kept as an opaque
//! payload and written back in its original position and type.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::{ScalarType, Splat, SplatSet, Vec3, MIN_CONTRIBUTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Encoding {
    Ascii,
    #[default]
    BinaryLittleEndian,
    BinaryBigEndian,
}

/// How activations are stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormatOptions {
    /// Opacity stored pre-sigmoid.
    pub opacity_logit: bool,
    /// Spiking threshold stored pre-sigmoid.
    pub spike_logit: bool,
    /// Scales stored as natural logarithms.
    pub log_scales: bool,
    /// Minimum rendering contribution `c`; splats with `α < c` are dropped.
    pub min_contribution: f64,
}

impl Default for FormatOptions {
    fn default() -> Self {
        FormatOptions {
            opacity_logit: false,
            spike_logit: false,
            log_scales: false,
            min_contribution: MIN_CONTRIBUTION,
        }
    }
}

/// On-disk layout of a scene, kept so that writes mirror the input schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub encoding: Encoding,
    pub options: FormatOptions,
    /// Vertex properties in file order.
    pub properties: Vec<(String, ScalarType)>,
    pub comments: Vec<String>,
}

impl Default for Layout {
    fn default() -> Self {
        let properties = [
            "x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "opacity",
            "spike_threshold",
        ]
        .iter()
        .map(|n| (n.to_string(), ScalarType::F64))
        .collect();
        Layout {
            encoding: Encoding::BinaryLittleEndian,
            options: FormatOptions::default(),
            properties,
            comments: Vec::new(),
        }
    }
}

impl Layout {
    fn has(&self, name: &str) -> bool {
        self.properties.iter().any(|(n, _)| n == name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    /// Records discarded because `α < c`.
    pub dropped_low_opacity: usize,
    /// Records whose dropped third scale was not negligible.
    pub thick_records: usize,
}

const REQUIRED: [&str; 10] = [
    "x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "opacity",
];

fn known(name: &str) -> bool {
    REQUIRED.contains(&name) || name == "scale_2" || name == "spike_threshold"
}

fn parse_type(name: &str) -> Result<ScalarType> {
    Ok(match name {
        "char" | "int8" => ScalarType::I8,
        "uchar" | "uint8" => ScalarType::U8,
        "short" | "int16" => ScalarType::I16,
        "ushort" | "uint16" => ScalarType::U16,
        "int" | "int32" => ScalarType::I32,
        "uint" | "uint32" => ScalarType::U32,
        "float" | "float32" => ScalarType::F32,
        "double" | "float64" => ScalarType::F64,
        other => return Err(Error::Format(format!("unknown scalar type `{other}`"))),
    })
}

fn type_name(t: ScalarType) -> &'static str {
    match t {
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

fn type_size(t: ScalarType) -> usize {
    match t {
        ScalarType::I8 | ScalarType::U8 => 1,
        ScalarType::I16 | ScalarType::U16 => 2,
        ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
        ScalarType::F64 => 8,
    }
}

#[derive(Debug, Clone)]
enum PropertyDef {
    Scalar(String, ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct ElementDef {
    name: String,
    count: usize,
    properties: Vec<PropertyDef>,
}

struct Header {
    encoding: Encoding,
    elements: Vec<ElementDef>,
    comments: Vec<String>,
}

fn read_header(reader: &mut impl BufRead) -> Result<Header> {
    let mut line = String::new();
    let next_line = |reader: &mut dyn BufRead, line: &mut String| -> Result<bool> {
        line.clear();
        Ok(reader.read_line(line)? > 0)
    };
    if !next_line(reader, &mut line)? || line.trim_end() != "ply" {
        return Err(Error::Format("missing `ply` magic".into()));
    }
    let mut encoding = None;
    let mut elements: Vec<ElementDef> = Vec::new();
    let mut comments = Vec::new();
    loop {
        if !next_line(reader, &mut line)? {
            return Err(Error::Format("unterminated header".into()));
        }
        let trimmed = line.trim_end_matches(['\n', '\r']);
        let mut tokens = trimmed.split_whitespace();
        match tokens.next() {
            Some("format") => {
                encoding = Some(match tokens.next() {
                    Some("ascii") => Encoding::Ascii,
                    Some("binary_little_endian") => Encoding::BinaryLittleEndian,
                    Some("binary_big_endian") => Encoding::BinaryBigEndian,
                    other => {
                        return Err(Error::Format(format!("unsupported format {other:?}")))
                    }
                });
            }
            Some("comment") => {
                comments.push(trimmed.strip_prefix("comment").unwrap_or("").trim().to_string())
            }
            Some("obj_info") => {}
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| Error::Format("element without name".into()))?;
                let count = tokens
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Format(format!("element `{name}` without count")))?;
                elements.push(ElementDef {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("property before element".into()))?;
                let def = match tokens.next() {
                    Some("list") => {
                        let count = parse_type(tokens.next().unwrap_or(""))?;
                        let item = parse_type(tokens.next().unwrap_or(""))?;
                        PropertyDef::List { count, item }
                    }
                    Some(t) => {
                        let ty = parse_type(t)?;
                        let name = tokens
                            .next()
                            .ok_or_else(|| Error::Format("property without name".into()))?;
                        PropertyDef::Scalar(name.to_string(), ty)
                    }
                    None => return Err(Error::Format("empty property line".into())),
                };
                element.properties.push(def);
            }
            Some("end_header") => break,
            Some(other) => return Err(Error::Format(format!("unexpected header line `{other}`"))),
            None => {}
        }
    }
    let encoding = encoding.ok_or_else(|| Error::Format("missing format line".into()))?;
    Ok(Header {
        encoding,
        elements,
        comments,
    })
}

fn read_binary_scalar(reader: &mut impl Read, ty: ScalarType, big_endian: bool) -> Result<f64> {
    let mut buf = [0u8; 8];
    let n = type_size(ty);
    reader.read_exact(&mut buf[..n])?;
    macro_rules! decode {
        ($t:ty, $n:expr) => {{
            let mut b = [0u8; $n];
            b.copy_from_slice(&buf[..$n]);
            if big_endian {
                <$t>::from_be_bytes(b) as f64
            } else {
                <$t>::from_le_bytes(b) as f64
            }
        }};
    }
    Ok(match ty {
        ScalarType::I8 => decode!(i8, 1),
        ScalarType::U8 => decode!(u8, 1),
        ScalarType::I16 => decode!(i16, 2),
        ScalarType::U16 => decode!(u16, 2),
        ScalarType::I32 => decode!(i32, 4),
        ScalarType::U32 => decode!(u32, 4),
        ScalarType::F32 => decode!(f32, 4),
        ScalarType::F64 => decode!(f64, 8),
    })
}

fn write_binary_scalar(out: &mut impl Write, ty: ScalarType, value: f64, big_endian: bool) -> Result<()> {
    macro_rules! encode {
        ($v:expr) => {{
            let v = $v;
            if big_endian {
                out.write_all(&v.to_be_bytes())?
            } else {
                out.write_all(&v.to_le_bytes())?
            }
        }};
    }
    match ty {
        ScalarType::I8 => encode!(value.round() as i8),
        ScalarType::U8 => encode!(value.round() as u8),
        ScalarType::I16 => encode!(value.round() as i16),
        ScalarType::U16 => encode!(value.round() as u16),
        ScalarType::I32 => encode!(value.round() as i32),
        ScalarType::U32 => encode!(value.round() as u32),
        ScalarType::F32 => encode!(value as f32),
        ScalarType::F64 => encode!(value),
    }
    Ok(())
}

fn format_ascii(ty: ScalarType, value: f64) -> String {
    match ty {
        ScalarType::F32 => format!("{}", value as f32),
        ScalarType::F64 => format!("{value}"),
        _ => format!("{}", value.round() as i64),
    }
}

/// Pulls whitespace-separated tokens across lines of an ASCII body.
struct Tokens<R> {
    reader: R,
    line: String,
    pos: usize,
}

impl<R: BufRead> Tokens<R> {
    fn next(&mut self) -> Result<Option<String>> {
        loop {
            let rest = &self.line[self.pos..];
            let trimmed = rest.trim_start();
            if !trimmed.is_empty() {
                let start = self.line.len() - trimmed.len();
                let end = trimmed
                    .find(char::is_whitespace)
                    .map(|i| start + i)
                    .unwrap_or(self.line.len());
                self.pos = end;
                return Ok(Some(self.line[start..end].to_string()));
            }
            self.line.clear();
            self.pos = 0;
            if self.reader.read_line(&mut self.line)? == 0 {
                return Ok(None);
            }
        }
    }

    fn scalar(&mut self) -> Result<f64> {
        let token = self
            .next()?
            .ok_or_else(|| Error::Format("unexpected end of ascii body".into()))?;
        token
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("bad numeric token `{token}`")))
    }
}

/// Reads every vertex record of the file as raw values in property order.
fn read_vertex_table(path: &Path) -> Result<(Header, Vec<(String, ScalarType)>, Vec<Vec<f64>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_header(&mut reader)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Format("no `vertex` element".into()))?;
    let vertex = &header.elements[vertex_pos];
    let mut props = Vec::new();
    for p in &vertex.properties {
        match p {
            PropertyDef::Scalar(name, ty) => props.push((name.clone(), *ty)),
            PropertyDef::List { .. } => {
                return Err(Error::Format("list properties on vertices are not supported".into()))
            }
        }
    }
    let mut rows = Vec::with_capacity(vertex.count);
    match header.encoding {
        Encoding::Ascii => {
            let mut tokens = Tokens {
                reader,
                line: String::new(),
                pos: 0,
            };
            for element in &header.elements[..vertex_pos] {
                for _ in 0..element.count {
                    for p in &element.properties {
                        match p {
                            PropertyDef::Scalar(..) => {
                                tokens.scalar()?;
                            }
                            PropertyDef::List { .. } => {
                                let n = tokens.scalar()? as usize;
                                for _ in 0..n {
                                    tokens.scalar()?;
                                }
                            }
                        }
                    }
                }
            }
            for _ in 0..vertex.count {
                let mut row = Vec::with_capacity(props.len());
                for _ in &props {
                    row.push(tokens.scalar()?);
                }
                rows.push(row);
            }
        }
        Encoding::BinaryLittleEndian | Encoding::BinaryBigEndian => {
            let big = header.encoding == Encoding::BinaryBigEndian;
            for element in &header.elements[..vertex_pos] {
                for _ in 0..element.count {
                    for p in &element.properties {
                        match p {
                            PropertyDef::Scalar(_, ty) => {
                                read_binary_scalar(&mut reader, *ty, big)?;
                            }
                            PropertyDef::List { count, item } => {
                                let n = read_binary_scalar(&mut reader, *count, big)? as usize;
                                for _ in 0..n {
                                    read_binary_scalar(&mut reader, *item, big)?;
                                }
                            }
                        }
                    }
                }
            }
            for _ in 0..vertex.count {
                let mut row = Vec::with_capacity(props.len());
                for (_, ty) in &props {
                    row.push(read_binary_scalar(&mut reader, *ty, big)?);
                }
                rows.push(row);
            }
        }
    }
    Ok((header, props, rows))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln().clamp(-40.0, 40.0)
}

/// Column permutation that moves the axis of the smallest of three scales
/// into the normal slot while keeping a right-handed frame.
fn drop_smallest_scale(frame: &Matrix3<f64>, scales: [f64; 3]) -> (Matrix3<f64>, [f64; 2], f64) {
    let smallest = (0..3)
        .min_by(|&a, &b| scales[a].total_cmp(&scales[b]).then(b.cmp(&a)))
        .unwrap_or(2);
    let order = match smallest {
        0 => [1, 2, 0],
        1 => [2, 0, 1],
        _ => [0, 1, 2],
    };
    let permuted = Matrix3::from_columns(&[
        frame.column(order[0]).into_owned(),
        frame.column(order[1]).into_owned(),
        frame.column(order[2]).into_owned(),
    ]);
    (permuted, [scales[order[0]], scales[order[1]]], scales[smallest])
}

/// Loads and canonicalizes a splat scene.
pub fn load_splats(path: impl AsRef<Path>, options: &FormatOptions) -> Result<(SplatSet, LoadReport)> {
    let path = path.as_ref();
    let (header, props, rows) = read_vertex_table(path)?;
    let column = |name: &str| props.iter().position(|(n, _)| n == name);
    let mut index = [0usize; 10];
    for (slot, name) in REQUIRED.iter().enumerate() {
        index[slot] = column(name).ok_or_else(|| Error::MissingProperty(name.to_string()))?;
    }
    let scale2 = column("scale_2");
    let spike = column("spike_threshold");
    let extra: Vec<(usize, String, ScalarType)> = props
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| !known(n))
        .map(|(i, (n, t))| (i, n.clone(), *t))
        .collect();

    let c = options.min_contribution;
    let mut report = LoadReport::default();
    let mut splats = Vec::with_capacity(rows.len());
    for (record, row) in rows.iter().enumerate() {
        if let Some((col, value)) = row.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::data(
                record,
                format!("non-finite value {value} in `{}`", props[col].0),
            ));
        }
        let get = |slot: usize| row[index[slot]];
        let mean = Vec3::new(get(0), get(1), get(2));
        let raw_q = Quaternion::new(get(3), get(4), get(5), get(6));
        if raw_q.norm() < 1e-12 {
            return Err(Error::data(record, "zero rotation quaternion"));
        }
        let scale_of = |v: f64| if options.log_scales { v.exp() } else { v };
        let mut scales3 = [scale_of(get(7)), scale_of(get(8)), 0.0];
        if let Some(col) = scale2 {
            scales3[2] = scale_of(row[col]);
        }
        if scales3.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return Err(Error::data(record, "negative or non-finite scale"));
        }
        let opacity = if options.opacity_logit { sigmoid(get(9)) } else { get(9) };
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::data(record, format!("opacity {opacity} outside [0, 1]")));
        }
        let threshold = match spike {
            Some(col) if options.spike_logit => sigmoid(row[col]),
            Some(col) => row[col],
            None => 0.0,
        };
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::data(record, format!("spike threshold {threshold} outside [0, 1]")));
        }
        if opacity < c {
            report.dropped_low_opacity += 1;
            continue;
        }

        let unit = UnitQuaternion::from_quaternion(raw_q);
        let (rotation, scales, normal_scale) = if scale2.is_some() {
            let frame = unit.to_rotation_matrix().into_inner();
            let (frame, scales, dropped) = drop_smallest_scale(&frame, scales3);
            if dropped > 1e-3 * scales[0].max(scales[1]) {
                report.thick_records += 1;
            }
            let rotation = if frame == unit.to_rotation_matrix().into_inner() {
                unit
            } else {
                UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(frame))
            };
            (rotation, scales, dropped)
        } else {
            (unit, [scales3[0], scales3[1]], 0.0)
        };

        let mut splat = Splat {
            mean,
            rotation,
            scales,
            opacity,
            spike_threshold: threshold,
            normal_scale,
            payload: extra.iter().map(|(i, _, _)| row[*i]).collect(),
        };
        splat.canonicalize();
        splats.push(splat);
    }
    if report.thick_records > 0 {
        warn!(
            "{}: {} records have a non-negligible third scale; it was dropped",
            path.display(),
            report.thick_records
        );
    }
    if report.dropped_low_opacity > 0 {
        warn!(
            "{}: dropped {} records with opacity below {c}",
            path.display(),
            report.dropped_low_opacity
        );
    }
    let set = SplatSet {
        splats,
        extra_properties: extra.iter().map(|(_, n, t)| (n.clone(), *t)).collect(),
        layout: Layout {
            encoding: header.encoding,
            options: *options,
            properties: props,
            comments: header.comments,
        },
    };
    Ok((set, report))
}

/// Reads only the vertex positions of any PLY file, e.g. a reference cloud.
pub fn load_points(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    let (_, props, rows) = read_vertex_table(path.as_ref())?;
    let column = |name: &str| {
        props
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::MissingProperty(name.to_string()))
    };
    let (x, y, z) = (column("x")?, column("y")?, column("z")?);
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let p = Vec3::new(r[x], r[y], r[z]);
            if p.iter().all(|v| v.is_finite()) {
                Ok(p)
            } else {
                Err(Error::data(i, "non-finite position"))
            }
        })
        .collect()
}

/// Writes a bare point cloud as binary little-endian `x y z` doubles.
pub fn write_points(path: impl AsRef<Path>, points: &[Vec3]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    out.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    for p in points {
        for v in p.iter() {
            out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes `set` using its recorded layout.
pub fn write_splats(path: impl AsRef<Path>, set: &SplatSet) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_splats_to(&mut out, set)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_splats_to(out: &mut impl Write, set: &SplatSet) -> Result<()> {
    let layout = &set.layout;
    for name in REQUIRED {
        if !layout.has(name) {
            return Err(Error::MissingProperty(name.to_string()));
        }
    }
    let encoding = match layout.encoding {
        Encoding::Ascii => "ascii",
        Encoding::BinaryLittleEndian => "binary_little_endian",
        Encoding::BinaryBigEndian => "binary_big_endian",
    };
    writeln!(out, "ply")?;
    writeln!(out, "format {encoding} 1.0")?;
    for c in &layout.comments {
        writeln!(out, "comment {c}")?;
    }
    writeln!(out, "element vertex {}", set.splats.len())?;
    for (name, ty) in &layout.properties {
        writeln!(out, "property {} {name}", type_name(*ty))?;
    }
    writeln!(out, "end_header")?;

    let opts = &layout.options;
    let scale_out = |v: f64| if opts.log_scales { v.ln() } else { v };
    let extra_slot: Vec<Option<usize>> = layout
        .properties
        .iter()
        .map(|(n, _)| set.extra_properties.iter().position(|(e, _)| e == n))
        .collect();
    for (record, splat) in set.splats.iter().enumerate() {
        let q = splat.rotation.quaternion();
        let mut values = Vec::with_capacity(layout.properties.len());
        for (slot, (name, _)) in layout.properties.iter().enumerate() {
            let v = match name.as_str() {
                "x" => splat.mean.x,
                "y" => splat.mean.y,
                "z" => splat.mean.z,
                "rot_0" => q.w,
                "rot_1" => q.i,
                "rot_2" => q.j,
                "rot_3" => q.k,
                "scale_0" => scale_out(splat.scales[0]),
                "scale_1" => scale_out(splat.scales[1]),
                "scale_2" => scale_out(splat.normal_scale),
                "opacity" if opts.opacity_logit => logit(splat.opacity),
                "opacity" => splat.opacity,
                "spike_threshold" if opts.spike_logit => logit(splat.spike_threshold),
                "spike_threshold" => splat.spike_threshold,
                other => {
                    let e = extra_slot[slot].ok_or_else(|| {
                        Error::Format(format!("no payload column for property `{other}`"))
                    })?;
                    *splat.payload.get(e).ok_or_else(|| {
                        Error::data(record, format!("payload missing `{other}`"))
                    })?
                }
            };
            values.push(v);
        }
        match layout.encoding {
            Encoding::Ascii => {
                let line: Vec<String> = values
                    .iter()
                    .zip(&layout.properties)
                    .map(|(v, (_, ty))| format_ascii(*ty, *v))
                    .collect();
                writeln!(out, "{}", line.join(" "))?;
            }
            Encoding::BinaryLittleEndian | Encoding::BinaryBigEndian => {
                let big = layout.encoding == Encoding::BinaryBigEndian;
                for (v, (_, ty)) in values.iter().zip(&layout.properties) {
                    write_binary_scalar(out, *ty, *v, big)?;
                }
            }
        }
    }
    Ok(())
}

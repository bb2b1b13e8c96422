//! Pointcloud container and text readers/writers.
//!
//! Two interchange formats:
//! - xyz-text: whitespace-separated `x y z [r g b] [label]` per line,
//!   `#` starts a comment. Column count must be consistent (3, 4, 6 or 7).
//! - ascii PLY: `element vertex` with x/y/z, optional red/green/blue
//!   (0-255) and an optional integer `label` property.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    XyzText,
    PlyAscii,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> CloudFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ply") => CloudFormat::PlyAscii,
            _ => CloudFormat::XyzText,
        }
    }
}

/// Ordered points with optional per-point color and integer label.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[f64; 3]>>,
    labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<[f64; 3]>,
        colors: Option<Vec<[f64; 3]>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Validation("pointcloud has no points".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite position".into()));
        }
        if let Some(c) = &colors {
            if c.len() != positions.len() {
                return Err(Error::Validation(format!(
                    "{} colors for {} points",
                    c.len(),
                    positions.len()
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(Error::Validation(format!(
                    "{} labels for {} points",
                    l.len(),
                    positions.len()
                )));
            }
        }
        Ok(PointCloud {
            positions,
            colors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Vec<usize>) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::Validation(format!(
                "{} labels for {} points",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn set_colors(&mut self, colors: Vec<[f64; 3]>) -> Result<()> {
        if colors.len() != self.len() {
            return Err(Error::Validation(format!(
                "{} colors for {} points",
                colors.len(),
                self.len()
            )));
        }
        self.colors = Some(colors);
        Ok(())
    }

    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Validation(format!(
                    "label {bad} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }

    pub fn min_z(&self) -> f64 {
        self.positions
            .iter()
            .map(|p| p[2])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn translated(&self, offset: [f64; 3]) -> PointCloud {
        let positions = self
            .positions
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect();
        PointCloud {
            positions,
            colors: self.colors.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Reads a cloud in the given format; validates labels when a class count
/// is supplied.
pub fn load_cloud(
    path: &Path,
    format: CloudFormat,
    num_classes: Option<usize>,
) -> Result<PointCloud> {
    let cloud = match format {
        CloudFormat::XyzText => read_xyz(path)?,
        CloudFormat::PlyAscii => read_ply(path)?,
    };
    if let Some(c) = num_classes {
        cloud.validate_labels(c)?;
    }
    Ok(cloud)
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    match format {
        CloudFormat::XyzText => write_xyz(cloud, path),
        CloudFormat::PlyAscii => write_ply(cloud, path),
    }
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    let mut columns = None;
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: line_no + 1,
            msg,
        };
        let ncols = fields.len();
        if !matches!(ncols, 3 | 4 | 6 | 7) {
            return Err(parse_err(format!(
                "expected 3, 4, 6 or 7 fields, got {ncols}"
            )));
        }
        match columns {
            None => columns = Some(ncols),
            Some(c) if c != ncols => {
                return Err(parse_err(format!(
                    "inconsistent field count {ncols} vs {c}"
                )))
            }
            _ => {}
        }
        let mut nums = Vec::with_capacity(ncols);
        for f in &fields {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(format!("invalid number {f:?}")))?;
            nums.push(v);
        }
        positions.push([nums[0], nums[1], nums[2]]);
        if ncols >= 6 {
            colors.push([nums[3], nums[4], nums[5]]);
        }
        if ncols == 4 || ncols == 7 {
            let raw_label = nums[ncols - 1];
            if raw_label < 0.0 || raw_label.fract() != 0.0 {
                return Err(parse_err(format!("invalid label {raw_label}")));
            }
            labels.push(raw_label as usize);
        }
    }
    if positions.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "no points".into(),
        });
    }
    PointCloud::new(
        positions,
        (!colors.is_empty()).then_some(colors),
        (!labels.is_empty()).then_some(labels),
    )
}

pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        // `{}` prints the shortest representation that parses back exactly.
        write!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
        if let Some(colors) = &cloud.colors {
            let c = colors[i];
            write!(out, " {} {} {}", c[0], c[1], c[2]).unwrap();
        }
        if let Some(labels) = &cloud.labels {
            write!(out, " {}", labels[i]).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line: line + 1,
        msg,
    };

    let (first_no, first) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty file".into()))?;
    if first.trim() != "ply" {
        return Err(parse_err(first_no, "missing ply magic".into()));
    }

    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let mut header_end = 0usize;
    for (no, raw) in lines.by_ref() {
        let line = raw.trim();
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first().copied() {
            Some("format") => {
                if fields.get(1) != Some(&"ascii") {
                    return Err(parse_err(no, format!("unsupported format {line:?}")));
                }
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let kind = fields.get(1).copied().unwrap_or("");
                let count: usize = fields
                    .get(2)
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(no, format!("bad element line {line:?}")))?;
                if kind == "vertex" {
                    vertex_count = Some(count);
                    in_vertex_element = true;
                } else if count != 0 {
                    return Err(parse_err(no, format!("unsupported element {kind:?}")));
                } else {
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if in_vertex_element {
                    let name = fields
                        .last()
                        .copied()
                        .ok_or_else(|| parse_err(no, "bad property line".into()))?;
                    properties.push(name.to_string());
                }
            }
            Some("end_header") => {
                header_end = no;
                break;
            }
            _ => return Err(parse_err(no, format!("unexpected header line {line:?}"))),
        }
    }

    let count = vertex_count.ok_or_else(|| parse_err(header_end, "no vertex element".into()))?;
    let col = |name: &str| properties.iter().position(|p| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(header_end, "missing x/y/z properties".into())),
    };
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        _ => None,
    };
    let label_col = col("label");

    let mut positions = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(if rgb.is_some() { count } else { 0 });
    let mut labels = Vec::with_capacity(if label_col.is_some() { count } else { 0 });
    for (no, raw) in lines.take(count) {
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() < properties.len() {
            return Err(parse_err(
                no,
                format!("expected {} values, got {}", properties.len(), fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| parse_err(no, format!("invalid number {:?}", fields[i])))
        };
        positions.push([num(xi)?, num(yi)?, num(zi)?]);
        if let Some((r, g, b)) = rgb {
            colors.push([num(r)? / 255.0, num(g)? / 255.0, num(b)? / 255.0]);
        }
        if let Some(l) = label_col {
            let v = num(l)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(parse_err(no, format!("invalid label {v}")));
            }
            labels.push(v as usize);
        }
    }
    if positions.len() != count {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!("expected {count} vertices, found {}", positions.len()),
        });
    }
    PointCloud::new(
        positions,
        rgb.is_some().then_some(colors),
        label_col.is_some().then_some(labels),
    )
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", cloud.len()).unwrap();
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.labels.is_some() {
        out.push_str("property int label\n");
    }
    out.push_str("end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        write!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
        if let Some(colors) = &cloud.colors {
            let c = colors[i];
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            write!(out, " {} {} {}", q(c[0]), q(c[1]), q(c[2])).unwrap();
        }
        if let Some(labels) = &cloud.labels {
            write!(out, " {}", labels[i]).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Distinct display colors for label-colorized output.
pub fn label_palette(label: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 10] = [
        [0.55, 0.55, 0.55],
        [0.90, 0.30, 0.25],
        [0.25, 0.55, 0.90],
        [0.30, 0.75, 0.35],
        [0.95, 0.75, 0.20],
        [0.65, 0.35, 0.75],
        [0.30, 0.80, 0.80],
        [0.90, 0.50, 0.70],
        [0.55, 0.40, 0.25],
        [0.80, 0.85, 0.30],
    ];
    PALETTE[label % PALETTE.len()]
}

//! Point cloud file I/O, normalization, subsampling and synthetic shape
//! families.
//!
//! Two on-disk formats are supported:
//!
//! * `xyz` text: one point per line, three whitespace-separated decimals,
//!   lines starting with `#` are comments.
//! * `pcsq` binary: the 5 magic bytes `PCSQ1`, a little-endian `u32` point
//!   count, then `count * 3` little-endian `f32` values in x, y, z order.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PCSQ_MAGIC: &[u8; 5] = b"PCSQ1";
pub const DEPTH_MAGIC: &[u8; 5] = b"PCSD1";

/// An ordered set of 3D points in model coordinates.
///
/// Coordinates are stored as `f32`, matching the binary container, so a
/// binary save/load cycle is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::domain(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn from_f64(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(
            points
                .iter()
                .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; a cloud holds at least one point.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let p = self.points[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn to_f64(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Points gathered by index, in the order given.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for i in 0..self.len() {
            let p = self.point(i);
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        let n = self.len() as f64;
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.len())
            .map(|i| norm(self.point(i)))
            .fold(0.0, f64::max)
    }
}

pub(crate) fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    XyzText,
    PcsqBinary,
}

impl Format {
    /// Guess from the file extension: `.pcsq`/`.bin` are binary, everything
    /// else is text.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pcsq") | Some("bin") => Format::PcsqBinary,
            _ => Format::XyzText,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" | "xyz-text" | "text" => Ok(Format::XyzText),
            "pcsq" | "pcsq-binary" | "binary" => Ok(Format::PcsqBinary),
            other => Err(Error::domain(format!("unknown point cloud format '{other}'"))),
        }
    }
}

pub fn load_pointcloud(path: &Path, format: Format) -> Result<PointCloud> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        Format::XyzText => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|e| Error::parse(&name, format!("byte {}", e.valid_up_to()), "invalid utf-8"))?;
            parse_xyz(text, &name)
        }
        Format::PcsqBinary => decode_pcsq(&bytes, &name),
    }
}

pub fn save_pointcloud(pc: &PointCloud, path: &Path, format: Format) -> Result<()> {
    let bytes = match format {
        Format::XyzText => format_xyz(pc, None).into_bytes(),
        Format::PcsqBinary => encode_pcsq(pc),
    };
    write_file(path, &bytes)
}

/// Writes `x y z label` lines; the fourth column is an integer group id.
pub fn save_labeled_xyz(pc: &PointCloud, labels: &[usize], path: &Path) -> Result<()> {
    if labels.len() != pc.len() {
        return Err(Error::domain(format!(
            "{} labels for {} points",
            labels.len(),
            pc.len()
        )));
    }
    write_file(path, format_xyz(pc, Some(labels)).as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(wrap)?;
    f.write_all(bytes).map_err(wrap)
}

pub fn parse_xyz(text: &str, source_name: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("line {}", lineno + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                source_name,
                at(),
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let mut p = [0f32; 3];
        for (slot, field) in p.iter_mut().zip(&fields) {
            let v: f32 = field
                .parse()
                .map_err(|_| Error::parse(source_name, at(), format!("'{field}' is not a number")))?;
            if !v.is_finite() {
                return Err(Error::parse(source_name, at(), "non-finite coordinate"));
            }
            *slot = v;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::parse(source_name, "end of file", "no points"));
    }
    PointCloud::new(points)
}

fn format_xyz(pc: &PointCloud, labels: Option<&[usize]>) -> String {
    let mut out = String::with_capacity(pc.len() * 40);
    for (i, p) in pc.points().iter().enumerate() {
        // six significant digits
        let _ = write!(out, "{:.5e} {:.5e} {:.5e}", p[0], p[1], p[2]);
        if let Some(labels) = labels {
            let _ = write!(out, " {}", labels[i]);
        }
        out.push('\n');
    }
    out
}

pub fn encode_pcsq(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + pc.len() * 12);
    out.extend_from_slice(PCSQ_MAGIC);
    out.extend_from_slice(&(pc.len() as u32).to_le_bytes());
    for p in pc.points() {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

pub fn decode_pcsq(bytes: &[u8], source_name: &str) -> Result<PointCloud> {
    if bytes.len() < 5 || &bytes[..5] != PCSQ_MAGIC {
        return Err(Error::parse(source_name, "byte 0", "bad magic, expected PCSQ1"));
    }
    if bytes.len() < 9 {
        return Err(Error::parse(source_name, "byte 5", "truncated header"));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let floats = read_f32s(bytes, 9, count * 3, source_name)?;
    let points = floats.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    if points.is_empty() {
        return Err(Error::parse(source_name, "byte 5", "point count is zero"));
    }
    if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::parse(
            source_name,
            format!("byte {}", 9 + i * 12),
            "non-finite coordinate",
        ));
    }
    PointCloud::new(points)
}

fn read_f32s(bytes: &[u8], offset: usize, count: usize, source_name: &str) -> Result<Vec<f32>> {
    let need = offset + count * 4;
    if bytes.len() < need {
        let whole = (bytes.len().saturating_sub(offset)) / 4;
        return Err(Error::parse(
            source_name,
            format!("byte {}", offset + whole * 4),
            format!("truncated payload: expected {need} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes[offset..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Translate the centroid to the origin and scale so the farthest point has
/// norm one.
pub fn normalize_unit_sphere(pc: &PointCloud) -> Result<PointCloud> {
    let c = pc.centroid();
    let centered: Vec<[f64; 3]> = pc
        .to_f64()
        .into_iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let scale = centered.iter().map(|&p| norm(p)).fold(0.0, f64::max);
    if !(scale > 1e-12) {
        return Err(Error::Degenerate(
            "all points coincide; unit-sphere scale is undefined".into(),
        ));
    }
    let scaled: Vec<[f64; 3]> = centered.iter().map(|p| p.map(|v| v / scale)).collect();
    PointCloud::from_f64(&scaled)
}

/// Draw `n` points: without replacement when `n <= N`, otherwise with
/// replacement.
pub fn subsample(pc: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::domain("subsample size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = if n <= pc.len() {
        index::sample(&mut rng, pc.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..pc.len())).collect()
    };
    pc.select(&indices)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipsoid,
    Box,
    TwoLobe,
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipsoid" => Ok(ShapeFamily::Ellipsoid),
            "box" => Ok(ShapeFamily::Box),
            "two-lobe" => Ok(ShapeFamily::TwoLobe),
            other => Err(Error::domain(format!("unknown shape family '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct ShapeDataset {
    pub samples: Vec<PointCloud>,
    pub split: Split,
    pub seed: u64,
}

impl ShapeDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Point count shared by all samples, or `None` if they differ.
    pub fn common_size(&self) -> Option<usize> {
        let n = self.samples.first()?.len();
        self.samples.iter().all(|s| s.len() == n).then_some(n)
    }
}

/// Surface samples of randomly parameterized shapes, each normalized to the
/// unit sphere.
pub fn synth_dataset(
    family: ShapeFamily,
    count: usize,
    points_per_shape: usize,
    seed: u64,
) -> Result<ShapeDataset> {
    if count == 0 {
        return Err(Error::domain("dataset count must be at least 1"));
    }
    if points_per_shape == 0 {
        return Err(Error::domain("points_per_shape must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| {
            let raw = match family {
                ShapeFamily::Ellipsoid => {
                    let axes = [
                        rng.random_range(0.5..1.0),
                        rng.random_range(0.3..0.8),
                        rng.random_range(0.2..0.6),
                    ];
                    sample_ellipsoid(axes, [0.0; 3], points_per_shape, &mut rng)
                }
                ShapeFamily::Box => {
                    let dims = [
                        rng.random_range(0.6..1.0),
                        rng.random_range(0.3..0.8),
                        rng.random_range(0.2..0.6),
                    ];
                    sample_box(dims, points_per_shape, &mut rng)
                }
                ShapeFamily::TwoLobe => sample_two_lobe(points_per_shape, &mut rng),
            };
            normalize_unit_sphere(&PointCloud::from_f64(&raw)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapeDataset {
        samples,
        split: Split::Train,
        seed,
    })
}

/// Points on an axis-aligned ellipsoid surface: unit directions scaled by
/// the semi-axes.
pub fn sample_ellipsoid(
    axes: [f64; 3],
    center: [f64; 3],
    n: usize,
    rng: &mut impl Rng,
) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let d = random_unit(rng);
            [
                center[0] + axes[0] * d[0],
                center[1] + axes[1] * d[1],
                center[2] + axes[2] * d[2],
            ]
        })
        .collect()
}

pub(crate) fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(v);
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

/// Area-weighted samples on the surface of a box with half-extents `dims`.
fn sample_box(dims: [f64; 3], n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    // face pairs normal to x, y, z
    let areas = [dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 0;
            while axis < 2 && pick >= areas[axis] {
                pick -= areas[axis];
                axis += 1;
            }
            let mut p = [0.0; 3];
            for (d, slot) in p.iter_mut().enumerate() {
                *slot = if d == axis {
                    if rng.random_bool(0.5) {
                        dims[d]
                    } else {
                        -dims[d]
                    }
                } else {
                    rng.random_range(-dims[d]..dims[d])
                };
            }
            p
        })
        .collect()
}

/// Union surface of two overlapping spheres of random radii on the x axis.
fn sample_two_lobe(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let r = [rng.random_range(0.4..0.7), rng.random_range(0.25..0.5)];
    let gap = rng.random_range(0.5..0.8) * (r[0] + r[1]);
    let centers = [[-gap * r[1] / (r[0] + r[1]), 0.0, 0.0], [gap * r[0] / (r[0] + r[1]), 0.0, 0.0]];
    let w0 = r[0] * r[0] / (r[0] * r[0] + r[1] * r[1]);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (me, other) = if rng.random_bool(w0) { (0, 1) } else { (1, 0) };
        let d = random_unit(rng);
        let p = [
            centers[me][0] + r[me] * d[0],
            centers[me][1] + r[me] * d[1],
            centers[me][2] + r[me] * d[2],
        ];
        let q = [p[0] - centers[other][0], p[1] - centers[other][1], p[2] - centers[other][2]];
        if norm(q) >= r[other] {
            out.push(p);
        }
    }
    out
}

/// A single-channel depth map, row-major, values in `[0, 1]` with 0 meaning
/// background.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::domain("depth image must have positive dimensions"));
        }
        if data.len() != height * width {
            return Err(Error::domain(format!(
                "depth image {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

/// Orthographic depth render looking down the -z axis onto the
/// `[-1, 1]^2` window. Depth encodes `(z + 1) / 2` of the nearest point.
pub fn render_depth(pc: &PointCloud, size: usize) -> Result<DepthImage> {
    if size == 0 {
        return Err(Error::domain("depth image size must be positive"));
    }
    let mut data = vec![0f32; size * size];
    for p in pc.points() {
        let col = (((p[0] + 1.0) * 0.5) * size as f32).floor();
        let row = (((1.0 - p[1]) * 0.5) * size as f32).floor();
        if col < 0.0 || row < 0.0 || col >= size as f32 || row >= size as f32 {
            continue;
        }
        let depth = ((p[2] + 1.0) * 0.5).clamp(1e-3, 1.0);
        let slot = &mut data[row as usize * size + col as usize];
        *slot = slot.max(depth);
    }
    DepthImage::new(size, size, data)
}

/// Reads either a plain PGM (`P2`) text image or the `PCSD1` binary depth
/// container, chosen by leading bytes.
pub fn load_depth(path: &Path) -> Result<DepthImage> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.starts_with(DEPTH_MAGIC) {
        decode_depth_binary(&bytes, &name)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::parse(&name, format!("byte {}", e.valid_up_to()), "invalid utf-8"))?;
        parse_pgm(text, &name)
    }
}

pub fn save_depth_pgm(img: &DepthImage, path: &Path) -> Result<()> {
    let mut out = format!("P2\n{} {}\n255\n", img.width, img.height);
    for row in 0..img.height {
        let line: Vec<String> = (0..img.width)
            .map(|c| ((img.at(row, c).clamp(0.0, 1.0) * 255.0).round() as u32).to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// `PCSD1`, `u32` height, `u32` width, then `height * width` `f32` values,
/// all little-endian.
pub fn encode_depth_binary(img: &DepthImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + img.data.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth_binary(bytes: &[u8], source_name: &str) -> Result<DepthImage> {
    if bytes.len() < 5 || &bytes[..5] != DEPTH_MAGIC {
        return Err(Error::parse(source_name, "byte 0", "bad magic, expected PCSD1"));
    }
    if bytes.len() < 13 {
        return Err(Error::parse(source_name, "byte 5", "truncated header"));
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let data = read_f32s(bytes, 13, h * w, source_name)?;
    DepthImage::new(h, w, data)
}

fn parse_pgm(text: &str, source_name: &str) -> Result<DepthImage> {
    // tokens with their line numbers, comments stripped
    let tokens: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .flat_map(|(i, line)| {
            let body = line.split('#').next().unwrap_or("");
            body.split_whitespace().map(move |t| (i + 1, t))
        })
        .collect();
    let mut it = tokens.into_iter();
    let mut next = |what: &str| {
        it.next()
            .ok_or_else(|| Error::parse(source_name, "end of file", format!("missing {what}")))
    };
    let (line, magic) = next("magic")?;
    if magic != "P2" {
        return Err(Error::parse(source_name, format!("line {line}"), "expected P2 magic"));
    }
    let mut number = |what: &str| -> Result<u32> {
        let (line, tok) = next(what)?;
        tok.parse::<u32>()
            .map_err(|_| Error::parse(source_name, format!("line {line}"), format!("bad {what} '{tok}'")))
    };
    let width = number("width")? as usize;
    let height = number("height")? as usize;
    let maxval = number("maxval")?;
    if maxval == 0 {
        return Err(Error::parse(source_name, "header", "maxval must be positive"));
    }
    let mut data = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        data.push(number("pixel")? as f32 / maxval as f32);
    }
    DepthImage::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn parses_two_point_text() {
        let pc = parse_xyz("0 0 0\n1 0 0", "mem").unwrap();
        assert_eq!(pc.points(), &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn text_comments_are_skipped() {
        let pc = parse_xyz("# header\n0 1 2\n# trailing\n", "mem").unwrap();
        assert_eq!(pc.len(), 1);
    }

    #[test]
    fn two_fields_is_a_line_one_error() {
        let err = parse_xyz("0 0", "mem").unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "line 1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decodes_single_point_binary() {
        let mut bytes = b"PCSQ1".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for v in [0f32, 0.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let pc = decode_pcsq(&bytes, "mem").unwrap();
        assert_eq!(pc.points(), &[[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn binary_errors_name_offsets() {
        let err = decode_pcsq(b"XXXX1\x01\0\0\0", "mem").unwrap_err();
        assert!(err.to_string().contains("byte 0"), "{err}");

        let mut bytes = b"PCSQ1".to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 14]);
        let err = decode_pcsq(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("byte 21"), "{err}");
    }

    #[test]
    fn unwritable_directory_is_a_write_error() {
        let pc = cloud(&[[0.0, 0.0, 0.0]]);
        let err = save_pointcloud(&pc, Path::new("/nonexistent-dir/x.xyz"), Format::XyzText)
            .unwrap_err();
        assert!(matches!(err, Error::Write { .. }));
    }

    #[test]
    fn normalize_two_points() {
        let pc = cloud(&[[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        let n = normalize_unit_sphere(&pc).unwrap();
        assert_eq!(n.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_repeated_point_is_degenerate() {
        let pc = cloud(&[[5.0, 5.0, 5.0]; 4]);
        assert!(matches!(normalize_unit_sphere(&pc), Err(Error::Degenerate(_))));
    }

    #[test]
    fn subsample_full_draw_is_permutation() {
        let pts: Vec<[f32; 3]> = (0..50).map(|i| [i as f32, 0.0, 0.0]).collect();
        let pc = cloud(&pts);
        let s = subsample(&pc, 50, 3).unwrap();
        let mut xs: Vec<i32> = s.points().iter().map(|p| p[0] as i32).collect();
        xs.sort();
        assert_eq!(xs, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_2048_from_15000() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f32; 3]> = (0..15000)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let pc = cloud(&pts);
        let s = subsample(&pc, 2048, 9).unwrap();
        assert_eq!(s.len(), 2048);
        let members: std::collections::HashSet<[u32; 3]> =
            pts.iter().map(|p| p.map(f32::to_bits)).collect();
        assert!(s.points().iter().all(|p| members.contains(&p.map(f32::to_bits))));
        assert_eq!(s, subsample(&pc, 2048, 9).unwrap());
    }

    #[test]
    fn oversampling_uses_replacement() {
        let pc = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(subsample(&pc, 7, 0).unwrap().len(), 7);
    }

    #[test]
    fn synth_ellipsoids_are_normalized_and_deterministic() {
        let ds = synth_dataset(ShapeFamily::Ellipsoid, 8, 2048, 5).unwrap();
        assert_eq!(ds.len(), 8);
        for s in &ds.samples {
            assert_eq!(s.len(), 2048);
            assert!((s.max_norm() - 1.0).abs() < 1e-6);
        }
        let again = synth_dataset(ShapeFamily::Ellipsoid, 8, 2048, 5).unwrap();
        assert_eq!(ds.samples, again.samples);
    }

    #[test]
    fn unit_axes_ellipsoid_is_a_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in sample_ellipsoid([1.0; 3], [0.0; 3], 500, &mut rng) {
            assert!((norm(p) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn every_family_synthesizes() {
        for fam in [ShapeFamily::Ellipsoid, ShapeFamily::Box, ShapeFamily::TwoLobe] {
            let ds = synth_dataset(fam, 3, 256, 11).unwrap();
            assert_eq!(ds.common_size(), Some(256));
        }
    }

    #[test]
    fn pgm_and_binary_depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = DepthImage::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.0]).unwrap();
        let p = dir.path().join("d.pgm");
        save_depth_pgm(&img, &p).unwrap();
        let back = load_depth(&p).unwrap();
        assert_eq!((back.height, back.width), (2, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
        let p = dir.path().join("d.bin");
        write_file(&p, &encode_depth_binary(&img)).unwrap();
        assert_eq!(load_depth(&p).unwrap(), img);
    }

    #[test]
    fn empty_depth_image_is_rejected() {
        assert!(DepthImage::new(0, 4, vec![]).is_err());
    }
}

//! Dataset ingestion, the synthetic fine-grained generator and persistence.
//!
//! Images are binary PPM (P6, 8-bit RGB). The dataset manifest is a CSV with
//! header `path,label,split`. Checkpoints (`FPH1`) and code files (`FPHC`)
//! are little-endian binary formats with bit-exact round trips.

use std::collections::HashSet;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::retrieval::BinaryCodeSet;
use crate::tensor::Tensor;

/// Which split a manifest entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
}

impl Split {
    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
        }
    }
}

/// One image reference: path relative to the manifest, class label, split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u32,
    pub split: Split,
}

/// The dataset index. Paths are unique.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut lines = text.lines();
        match lines.next() {
            Some("path,label,split") => {}
            other => {
                return Err(Error::format(
                    path,
                    format!("expected header 'path,label,split', got {other:?}"),
                ))
            }
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            let (p, l, s) = match (parts.next(), parts.next(), parts.next()) {
                (Some(p), Some(l), Some(s)) => (p, l, s),
                _ => return Err(Error::format(path, format!("malformed line {}", ln + 2))),
            };
            let label: u32 = l
                .parse()
                .map_err(|_| Error::format(path, format!("bad label {l:?} on line {}", ln + 2)))?;
            let split = Split::parse(s)
                .ok_or_else(|| Error::format(path, format!("bad split {s:?} on line {}", ln + 2)))?;
            if !seen.insert(p.to_string()) {
                return Err(Error::format(path, format!("duplicate path {p:?}")));
            }
            entries.push(ManifestEntry { path: p.to_string(), label, split });
        }
        Ok(DatasetManifest { entries, root })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("path,label,split\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.path, e.label, e.split.as_str()));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

// ---------------------------------------------------------------------------
// PPM

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// RGB interleaved, row-major.
    pub pixels: Vec<u8>,
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend_from_slice(&img.pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(Error::format(path, "not a binary PPM (P6)"));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| Error::format(path, "bad width"))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| Error::format(path, "bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| Error::format(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::format(path, "truncated pixel data"));
    }
    Ok(Image { width, height, pixels: bytes[pos..pos + need].to_vec() })
}

/// Decode to a `[3, S, S]` tensor in [0,1], bilinearly resized if needed.
pub fn image_to_tensor(img: &Image, target_size: usize) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0; 3 * target_size * target_size];
    for c in 0..3 {
        for oy in 0..target_size {
            for ox in 0..target_size {
                let v = if w == target_size && h == target_size {
                    img.pixels[(oy * w + ox) * 3 + c] as f64
                } else {
                    // bilinear sample at pixel centers
                    let sy = (oy as f64 + 0.5) * h as f64 / target_size as f64 - 0.5;
                    let sx = (ox as f64 + 0.5) * w as f64 / target_size as f64 - 0.5;
                    let y0 = sy.floor().clamp(0.0, (h - 1) as f64) as usize;
                    let x0 = sx.floor().clamp(0.0, (w - 1) as f64) as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let fy = (sy - y0 as f64).clamp(0.0, 1.0);
                    let fx = (sx - x0 as f64).clamp(0.0, 1.0);
                    let at = |y: usize, x: usize| img.pixels[(y * w + x) * 3 + c] as f64;
                    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + at(y0, x1) * (1.0 - fy) * fx
                        + at(y1, x0) * fy * (1.0 - fx)
                        + at(y1, x1) * fy * fx
                };
                data[(c * target_size + oy) * target_size + ox] = v / 255.0;
            }
        }
    }
    Tensor::new(vec![3, target_size, target_size], data).expect("image tensor shape")
}

/// Load all manifest images as `[3, S, S]` tensors plus their labels,
/// preserving manifest order within each split.
pub fn load_split(manifest: &DatasetManifest, split: Split, input_size: usize) -> Result<Vec<(Tensor, u32)>> {
    manifest
        .split(split)
        .map(|e| {
            let p = manifest.root.join(&e.path);
            let img = read_ppm(&p)?;
            Ok((image_to_tensor(&img, input_size), e.label))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic fine-grained dataset

/// Parameters of the synthetic generator.
///
/// Each coarse group has a shared procedural base texture; classes within a
/// group differ only by a small glyph (distinct shape, fixed nominal position)
/// drawn with per-image position and brightness jitter. The glyph covers less
/// than 1/16 of the image area, so global pooling at the top stage plausibly
/// blurs it away.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub classes_per_group: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Glyph side in pixels; must stay below image_size / 4.
    pub detail_size: usize,
    /// Max positional jitter in pixels.
    pub position_jitter: usize,
    /// Max brightness jitter, in [0,1) of full scale.
    pub brightness_jitter: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.classes_per_group == 0 || self.images_per_class == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.detail_size >= self.image_size / 4 {
            return Err(Error::Config(format!(
                "detail_size {} must be < image_size/4 = {}",
                self.detail_size,
                self.image_size / 4
            )));
        }
        if !(0.0..1.0).contains(&self.brightness_jitter) {
            return Err(Error::Config("brightness_jitter must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.groups * self.classes_per_group
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            groups: 2,
            classes_per_group: 4,
            images_per_class: 40,
            image_size: 64,
            detail_size: 12,
            position_jitter: 2,
            brightness_jitter: 0.1,
            seed: 0,
        }
    }
}

fn base_texture(group: usize, size: usize, x: usize, y: usize) -> [f64; 3] {
    // distinct low-frequency pattern per group
    let fx = x as f64 / size as f64;
    let fy = y as f64 / size as f64;
    let phase = group as f64 * 1.7;
    let a = ((fx * (3.0 + group as f64) + phase) * std::f64::consts::TAU).sin();
    let b = ((fy * (2.0 + (group % 3) as f64) - phase) * std::f64::consts::TAU).cos();
    let c = (((fx + fy) * 2.0 + group as f64 * 0.31) * std::f64::consts::TAU).sin();
    [0.45 + 0.2 * a, 0.45 + 0.2 * b, 0.45 + 0.2 * c]
}

/// True if (x, y) inside the glyph of the given class index, in glyph-local
/// coordinates of side `d`.
fn glyph_hit(class_in_group: usize, d: usize, x: usize, y: usize) -> bool {
    let fx = (x as f64 + 0.5) / d as f64;
    let fy = (y as f64 + 0.5) / d as f64;
    match class_in_group % 8 {
        0 => true,                                                // filled square
        1 => {
            let (cx, cy) = (fx - 0.5, fy - 0.5);
            cx * cx + cy * cy <= 0.25                             // disc
        }
        2 => fy >= fx,                                            // lower triangle
        3 => (fx - 0.5).abs() <= 0.18 || (fy - 0.5).abs() <= 0.18, // cross
        4 => (fx - 0.5).abs() + (fy - 0.5).abs() <= 0.5,          // diamond
        5 => fx <= 0.3 || fx >= 0.7,                              // two bars
        6 => ((fx * 3.0).floor() as usize + (fy * 3.0).floor() as usize) % 2 == 0, // checker
        _ => {
            let (cx, cy) = (fx - 0.5, fy - 0.5);
            let r2 = cx * cx + cy * cy;
            (0.09..=0.25).contains(&r2)                           // ring
        }
    }
}

/// Nominal top-left glyph corner for a class, spread over distinct anchors.
fn glyph_anchor(class_in_group: usize, size: usize, d: usize, jitter: usize) -> (usize, usize) {
    let margin = jitter + 2;
    let span = size - d - 2 * margin;
    let grid = [(0.15, 0.15), (0.7, 0.2), (0.2, 0.7), (0.7, 0.7), (0.45, 0.15), (0.15, 0.45), (0.45, 0.75), (0.75, 0.45)];
    let (gx, gy) = grid[class_in_group % 8];
    (margin + (gx * span as f64) as usize, margin + (gy * span as f64) as usize)
}

/// Generate the dataset under `out_dir` and return its manifest (also written
/// to `out_dir/manifest.csv`). A deterministic fraction of each class
/// (every 4th image) is tagged as the query split.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let d = spec.detail_size;
    let mut entries = Vec::new();
    for group in 0..spec.groups {
        for cig in 0..spec.classes_per_group {
            let label = (group * spec.classes_per_group + cig) as u32;
            let (ax, ay) = glyph_anchor(cig, size, d, spec.position_jitter);
            for idx in 0..spec.images_per_class {
                let j = spec.position_jitter as i64;
                let dx = rng.gen_range(-j..=j);
                let dy = rng.gen_range(-j..=j);
                let bright = 1.0 + rng.gen_range(-spec.brightness_jitter..=spec.brightness_jitter);
                let gx = (ax as i64 + dx) as usize;
                let gy = (ay as i64 + dy) as usize;
                let mut pixels = vec![0u8; size * size * 3];
                for y in 0..size {
                    for x in 0..size {
                        let mut rgb = base_texture(group, size, x, y);
                        let in_glyph = x >= gx
                            && x < gx + d
                            && y >= gy
                            && y < gy + d
                            && glyph_hit(cig, d, x - gx, y - gy);
                        if in_glyph {
                            rgb = [0.95, 0.95, 0.1];
                        }
                        for c in 0..3 {
                            let v = (rgb[c] * bright * 255.0).round().clamp(0.0, 255.0);
                            pixels[(y * size + x) * 3 + c] = v as u8;
                        }
                    }
                }
                let name = format!("g{group}_c{cig}_{idx:03}.ppm");
                write_ppm(&Image { width: size, height: size, pixels }, &out_dir.join(&name))?;
                let split = if idx % 4 == 3 { Split::Query } else { Split::Train };
                entries.push(ManifestEntry { path: name, label, split });
            }
        }
    }
    let manifest = DatasetManifest { entries, root: out_dir.to_path_buf() };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 4] = b"FPH1";
const CODE_MAGIC: &[u8; 4] = b"FPHC";

/// Write named tensors: magic FPH1, u32 version, u32 count, then per tensor
/// u32 name length + UTF-8 name, u8 rank, u64 dims, f64 data row-major.
pub fn save_checkpoint(params: &[(String, &Tensor)], path: &Path) -> Result<()> {
    let mut names = HashSet::new();
    for (name, _) in params {
        if !names.insert(name.as_str()) {
            return Err(Error::contract("save_checkpoint", format!("duplicate name {name:?}")));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    if c.take(4)? != CKPT_MAGIC {
        return Err(Error::format(path, "bad magic, not a checkpoint"));
    }
    let version = c.u32()?;
    if version != 1 {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    let mut names = HashSet::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        if name_len > 1 << 20 {
            return Err(Error::format(path, format!("implausible name length {name_len}")));
        }
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::format(path, "name is not UTF-8"))?;
        if !names.insert(name.clone()) {
            return Err(Error::format(path, format!("duplicate tensor name {name:?}")));
        }
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut n = 1usize;
        for _ in 0..rank {
            let d = c.u64()? as usize;
            if d == 0 || n.checked_mul(d).map_or(true, |m| m > 1 << 32) {
                return Err(Error::format(path, format!("implausible dimension {d}")));
            }
            n *= d;
            shape.push(d);
        }
        let raw = c.take(n * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data).expect("validated shape")));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Code files

/// Write a code set: magic FPHC, u32 version, u32 q, u64 count, then per item
/// u32 label + packed u64 words.
pub fn save_codes(set: &BinaryCodeSet, path: &Path) -> Result<()> {
    let wpc = crate::pyramid::words_per_code(set.q());
    let mut buf = Vec::new();
    buf.extend_from_slice(CODE_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(set.q() as u32).to_le_bytes());
    buf.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for i in 0..set.len() {
        buf.extend_from_slice(&set.label(i).to_le_bytes());
        for &w in &set.words_flat()[i * wpc..(i + 1) * wpc] {
            buf.extend_from_slice(&w.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_codes(path: &Path) -> Result<BinaryCodeSet> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    if c.take(4)? != CODE_MAGIC {
        return Err(Error::format(path, "bad magic, not a code file"));
    }
    let version = c.u32()?;
    if version != 1 {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let q = c.u32()? as usize;
    if q == 0 {
        return Err(Error::format(path, "q must be positive"));
    }
    let count = c.u64()? as usize;
    let wpc = crate::pyramid::words_per_code(q);
    let mut words = Vec::with_capacity(count * wpc);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(c.u32()?);
        for _ in 0..wpc {
            words.push(c.u64()?);
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last code"));
    }
    BinaryCodeSet::from_parts(q, words, labels)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::binarize;

    #[test]
    fn ppm_roundtrip_and_white_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ppm");
        let img = Image { width: 1, height: 1, pixels: vec![255, 255, 255] };
        write_ppm(&img, &p).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back, img);
        let t = image_to_tensor(&back, 1);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image { width: 4, height: 4, pixels: vec![100; 48] };
        let t = image_to_tensor(&img, 8);
        let expected = 100.0 / 255.0;
        assert!(t.data().iter().all(|&v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "path,label,split\na.ppm,0,train\na.ppm,1,query\n").unwrap();
        assert!(matches!(DatasetManifest::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            groups: 2,
            classes_per_group: 4,
            images_per_class: 10,
            image_size: 32,
            detail_size: 6,
            ..SyntheticSpec::default()
        };
        let m1 = gen_synthetic(&spec, &dir.path().join("a")).unwrap();
        assert_eq!(m1.entries.len(), 80);
        let labels: HashSet<u32> = m1.entries.iter().map(|e| e.label).collect();
        assert_eq!(labels.len(), 8);
        assert!(m1.split(Split::Train).count() > 0 && m1.split(Split::Query).count() > 0);

        let m2 = gen_synthetic(&spec, &dir.path().join("b")).unwrap();
        for (e1, e2) in m1.entries.iter().zip(&m2.entries) {
            let b1 = fs::read(m1.root.join(&e1.path)).unwrap();
            let b2 = fs::read(m2.root.join(&e2.path)).unwrap();
            assert_eq!(b1, b2, "{} differs across identical seeds", e1.path);
        }
    }

    #[test]
    fn synthetic_group_structure() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            groups: 2,
            classes_per_group: 2,
            images_per_class: 6,
            image_size: 32,
            detail_size: 6,
            ..SyntheticSpec::default()
        };
        let m = gen_synthetic(&spec, dir.path()).unwrap();
        let imgs: Vec<(Vec<f64>, u32)> = m
            .entries
            .iter()
            .map(|e| {
                let img = read_ppm(&m.root.join(&e.path)).unwrap();
                (img.pixels.iter().map(|&p| p as f64 / 255.0).collect(), e.label)
            })
            .collect();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        };
        let group_of = |label: u32| label / 2;
        let (mut within, mut wn, mut between, mut bn) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..imgs.len() {
            for j in (i + 1)..imgs.len() {
                let d = dist(&imgs[i].0, &imgs[j].0);
                if group_of(imgs[i].1) == group_of(imgs[j].1) {
                    within += d;
                    wn += 1;
                } else {
                    between += d;
                    bn += 1;
                }
            }
        }
        assert!(within / (wn as f64) < between / (bn as f64));
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let t1 = Tensor::new(vec![2, 3], vec![1.5, -0.25, 0.0, f64::MIN_POSITIVE, 3.7e300, -1.0]).unwrap();
        let t2 = Tensor::vector(vec![0.1; 7]);
        let params = vec![("w".to_string(), &t1), ("b".to_string(), &t2)];
        save_checkpoint(&params, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        let reparams: Vec<(String, &Tensor)> = loaded.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(&reparams, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_empty_and_negative_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ckpt");
        save_checkpoint(&[], &p).unwrap();
        assert!(load_checkpoint(&p).unwrap().is_empty());

        // corrupt a length field
        let t = Tensor::vector(vec![1.0, 2.0]);
        let params = vec![("x".to_string(), &t)];
        save_checkpoint(&params, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[12] = 0xFF; // name length
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));

        // duplicate names rejected on save
        let dup = vec![("x".to_string(), &t), ("x".to_string(), &t)];
        assert!(save_checkpoint(&dup, &p).is_err());
    }

    #[test]
    fn codes_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for q in [16usize, 64] {
            let mut set = BinaryCodeSet::new(q);
            for i in 0..3u32 {
                let vals: Vec<f64> = (0..q).map(|b| if (b + i as usize) % 3 == 0 { 0.9 } else { 0.2 }).collect();
                set.push(&binarize(&vals).unwrap(), i).unwrap();
            }
            let p = dir.path().join(format!("{q}.codes"));
            save_codes(&set, &p).unwrap();
            assert_eq!(load_codes(&p).unwrap(), set);
        }
    }

    #[test]
    fn code_set_rejects_mismatched_q() {
        let mut set = BinaryCodeSet::new(16);
        let code = binarize(&vec![0.9; 8]).unwrap();
        assert!(set.push(&code, 0).is_err());
    }
}

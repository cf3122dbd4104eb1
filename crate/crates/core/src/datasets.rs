//! Annotation and image I/O, and the synthetic face generator.
//!
//! Annotations use the WIDER FACE text layout:
//!
//! ```text
//! images/000001.ppm
//! 2
//! 10 20 30 40
//! 5 5 12 14 0 0 0 1 0 0
//! ```
//!
//! that is, an image path, a face count and one `x y w h` line per face,
//! optionally followed by six attribute integers
//! (`blur expression illumination invalid occlusion pose`). A count of zero is
//! followed by a single all-zero line.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{clip_box, BBox, GroundTruth};
use crate::image::Image;
use crate::rng;

pub const ANNOTATION_FILE: &str = "annotations.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Position of the `invalid` flag among the six WIDER attributes.
pub const INVALID_ATTRIBUTE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceAnnotation {
    pub bbox: BBox,
    pub attributes: Option<[u32; 6]>,
}

impl FaceAnnotation {
    pub fn is_ignored(&self) -> bool {
        self.attributes.is_some_and(|a| a[INVALID_ATTRIBUTE] == 1)
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            bbox: self.bbox,
            ignored: self.is_ignored(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// Path as written in the annotation file.
    pub rel_path: String,
    /// Resolved location on disk.
    pub path: PathBuf,
    /// Zero until the image header has been read.
    pub width: usize,
    pub height: usize,
    pub faces: Vec<FaceAnnotation>,
}

impl ImageRecord {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.faces.iter().map(FaceAnnotation::ground_truth).collect()
    }

    pub fn load_image(&self) -> Result<Image> {
        read_ppm(&self.path)
    }
}

/// Image ids are annotation paths with the extension removed.
pub fn image_id(rel_path: &str) -> String {
    let p = Path::new(rel_path);
    match (p.extension(), p.file_stem()) {
        (Some(_), Some(stem)) => {
            let parent = p.parent().map(|d| d.to_string_lossy().into_owned()).unwrap_or_default();
            if parent.is_empty() {
                stem.to_string_lossy().into_owned()
            } else {
                format!("{parent}/{}", stem.to_string_lossy())
            }
        }
        _ => rel_path.to_owned(),
    }
}

/// Parses annotation text. `origin` names the source in error messages and
/// `base_dir` resolves image paths.
pub fn parse_annotation_text(text: &str, origin: &Path, base_dir: &Path) -> Result<Vec<ImageRecord>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut records = Vec::new();
    while let Some((path_line, rel_path)) = lines.next() {
        let (count_line, count_text) = lines
            .next()
            .ok_or_else(|| err(path_line, format!("block for `{rel_path}` has no face count")))?;
        let count: usize = count_text
            .parse()
            .map_err(|_| err(count_line, format!("expected a face count, found `{count_text}`")))?;
        let mut faces = Vec::with_capacity(count);
        // WIDER writes one all-zero placeholder line after a zero count.
        let box_lines = count.max(1);
        for k in 0..box_lines {
            let (ln, text) = lines.next().ok_or_else(|| {
                err(
                    count_line,
                    format!("block for `{rel_path}` ends after {k} of {box_lines} box lines"),
                )
            })?;
            let fields = text
                .split_whitespace()
                .map(|f| {
                    f.parse::<i64>()
                        .map_err(|_| err(ln, format!("`{f}` is not an integer")))
                })
                .collect::<Result<Vec<_>>>()?;
            if fields.len() != 4 && fields.len() != 10 {
                return Err(err(ln, format!("expected 4 or 10 integers, found {}", fields.len())));
            }
            if count == 0 {
                if fields.iter().any(|&v| v != 0) {
                    return Err(err(ln, "zero-face block must be followed by an all-zero line".into()));
                }
                continue;
            }
            let (x, y, w, h) = (fields[0], fields[1], fields[2], fields[3]);
            if w < 0 || h < 0 {
                return Err(err(ln, format!("negative box size {w}x{h}")));
            }
            let attributes = if fields.len() == 10 {
                let mut a = [0u32; 6];
                for (slot, &v) in a.iter_mut().zip(&fields[4..]) {
                    *slot = u32::try_from(v).map_err(|_| err(ln, format!("negative attribute {v}")))?;
                }
                Some(a)
            } else {
                None
            };
            if w == 0 || h == 0 {
                log::warn!("{}:{ln}: dropping zero-area box in `{rel_path}`", origin.display());
                continue;
            }
            faces.push(FaceAnnotation {
                bbox: BBox::from_xywh(x as f64, y as f64, w as f64, h as f64),
                attributes,
            });
        }
        records.push(ImageRecord {
            id: image_id(rel_path),
            rel_path: rel_path.to_owned(),
            path: base_dir.join(rel_path),
            width: 0,
            height: 0,
            faces,
        });
    }
    Ok(records)
}

/// Reads an annotation file; image paths resolve relative to its directory.
pub fn parse_annotations(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_annotation_text(&text, path, base)
}

/// Parses annotations, reads every image header and clips boxes to the image.
pub fn load_records(path: &Path) -> Result<Vec<ImageRecord>> {
    let mut records = parse_annotations(path)?;
    for r in &mut records {
        let (w, h) = read_ppm_size(&r.path)?;
        r.width = w;
        r.height = h;
        r.faces.retain_mut(|f| {
            f.bbox = clip_box(&f.bbox, h, w);
            f.bbox.has_positive_area()
        });
    }
    Ok(records)
}

pub fn write_annotations(records: &[ImageRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}", r.rel_path);
        let _ = writeln!(s, "{}", r.faces.len());
        if r.faces.is_empty() {
            s.push_str("0 0 0 0 0 0 0 0 0 0\n");
        }
        for f in &r.faces {
            let b = f.bbox;
            let _ = write!(
                s,
                "{} {} {} {}",
                b.x_min.round() as i64,
                b.y_min.round() as i64,
                b.width().round() as i64,
                b.height().round() as i64
            );
            if let Some(a) = f.attributes {
                for v in a {
                    let _ = write!(s, " {v}");
                }
            }
            s.push('\n');
        }
    }
    s
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.to_rgb8());
    out
}

/// Parses the `P6 <w> <h> 255` header. Returns `(width, height, payload offset)`.
fn parse_ppm_header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
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
            return Err(Error::Format("truncated PPM header".into()));
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P6" {
        return Err(Error::Format("not a binary PPM (expected magic P6)".into()));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad PPM {what} `{}`", String::from_utf8_lossy(t))))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "PPM maxval {maxval} is not supported (need 255)"
        )));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        if pos >= bytes.len() && width * height == 0 {
            return Ok((width, height, pos));
        }
        return Err(Error::Format("PPM header is not terminated".into()));
    }
    Ok((width, height, pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (width, height, offset) = parse_ppm_header(bytes)?;
    let expected = 3 * width * height;
    let payload = &bytes[offset..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "PPM payload for {width}x{height} should be {expected} bytes, found {}",
            payload.len()
        )));
    }
    Image::from_rgb8(width, height, payload)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Width and height from the header alone.
pub fn read_ppm_size(path: &Path) -> Result<(usize, usize)> {
    let mut head = Vec::with_capacity(64);
    fs::File::open(path)?.take(64).read_to_end(&mut head)?;
    let (w, h, _) = parse_ppm_header(&head).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((w, h))
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(image))?;
    Ok(())
}

/// Manifest CSV `id,path,width,height,num_faces`.
pub fn manifest_csv(records: &[ImageRecord]) -> String {
    let mut s = String::from("id,path,width,height,num_faces\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.id, r.rel_path, r.width, r.height, r.faces.len());
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_faces: usize,
    pub max_faces: usize,
    /// Face heights are log-uniform over this range.
    pub min_face_height: f64,
    pub max_face_height: f64,
    /// Face width as a fraction of its height.
    pub aspect_low: f64,
    pub aspect_high: f64,
    /// Probability that a face is drawn dimmed.
    pub hard_fraction: f64,
    pub hard_dim_low: f64,
    pub hard_dim_high: f64,
    /// Up to this many rectangles/circles are drawn under the faces.
    pub max_distractors: usize,
    pub noise_amplitude: f64,
    pub max_pair_iou: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            min_faces: 1,
            max_faces: 6,
            min_face_height: 10.0,
            max_face_height: 120.0,
            aspect_low: 0.75,
            aspect_high: 0.95,
            hard_fraction: 0.3,
            hard_dim_low: 0.3,
            hard_dim_high: 0.6,
            max_distractors: 4,
            noise_amplitude: 0.04,
            max_pair_iou: 0.3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("synthetic canvas must be non-empty"));
        }
        if self.min_faces > self.max_faces {
            return Err(invalid("min_faces exceeds max_faces"));
        }
        if !(self.min_face_height >= 1.0 && self.min_face_height <= self.max_face_height) {
            return Err(invalid("face height range must satisfy 1 <= min <= max"));
        }
        if self.max_face_height > self.height as f64 || self.max_face_height * self.aspect_high > self.width as f64 {
            return Err(invalid("faces must fit inside the canvas"));
        }
        if !(0.0 < self.aspect_low && self.aspect_low <= self.aspect_high) {
            return Err(invalid("aspect range must satisfy 0 < low <= high"));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction)
            || !(0.0 < self.hard_dim_low && self.hard_dim_low <= self.hard_dim_high)
        {
            return Err(invalid("bad hard-face settings"));
        }
        if !(0.0..=1.0).contains(&self.max_pair_iou) {
            return Err(invalid("max_pair_iou must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Paths produced by [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub annotations: PathBuf,
    pub manifest: PathBuf,
    pub records: Vec<ImageRecord>,
}

fn fill_rect(img: &mut Image, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [f32; 3]) {
    let (w, h) = (img.width as f64, img.height as f64);
    let ys = y0.max(0.0).round() as usize..y1.min(h).round().max(0.0) as usize;
    let xs = x0.max(0.0).round() as usize..x1.min(w).round().max(0.0) as usize;
    for y in ys {
        for x in xs.clone() {
            img.set_pixel(y, x, rgb);
        }
    }
}

/// Fills pixels whose centres fall inside the axis-aligned ellipse.
fn fill_ellipse(img: &mut Image, cx: f64, cy: f64, rx: f64, ry: f64, rgb: [f32; 3]) {
    let y_lo = (cy - ry).floor().max(0.0) as usize;
    let y_hi = ((cy + ry).ceil().max(0.0) as usize).min(img.height);
    let x_lo = (cx - rx).floor().max(0.0) as usize;
    let x_hi = ((cx + rx).ceil().max(0.0) as usize).min(img.width);
    for y in y_lo..y_hi {
        let dy = (y as f64 + 0.5 - cy) / ry;
        for x in x_lo..x_hi {
            let dx = (x as f64 + 0.5 - cx) / rx;
            if dx * dx + dy * dy <= 1.0 {
                img.set_pixel(y, x, rgb);
            }
        }
    }
}

fn scaled(rgb: [f32; 3], k: f64) -> [f32; 3] {
    rgb.map(|v| (v as f64 * k) as f32)
}

/// Draws a face into exactly the box `[x, y, x + w, y + h]`: a filled ellipse
/// inscribed in the box, two dark eyes and a mouth bar.
pub fn draw_face(img: &mut Image, b: &BBox, skin: [f32; 3], dim: f64) {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    fill_ellipse(img, cx, cy, w / 2.0, h / 2.0, scaled(skin, dim));
    let dark = scaled(skin, 0.15 * dim);
    let eye_r = (0.09 * w).max(0.75);
    for side in [-1.0, 1.0] {
        fill_ellipse(img, cx + side * 0.2 * w, cy - 0.12 * h, eye_r, eye_r, dark);
    }
    let (mw, mh) = (0.4 * w, (0.07 * h).max(1.0));
    let my = cy + 0.24 * h;
    fill_rect(img, cx - mw / 2.0, my - mh / 2.0, cx + mw / 2.0, my + mh / 2.0, dark);
}

fn render_synthetic(cfg: &SynthConfig, index: usize) -> (Image, Vec<FaceAnnotation>) {
    let mut r = rng::stream(cfg.seed, &[0x5e_17, index as u64]);
    let (w, h) = (cfg.width, cfg.height);
    let base: [f32; 3] = std::array::from_fn(|_| r.random_range(0.05..0.65));
    let tilt: [f32; 3] = std::array::from_fn(|_| r.random_range(-0.15..0.15));
    let mut img = Image::new(w, h);
    for y in 0..h {
        let t = y as f32 / h.max(1) as f32 - 0.5;
        for x in 0..w {
            let px = std::array::from_fn(|c| base[c] + tilt[c] * t);
            img.set_pixel(y, x, px);
        }
    }

    for _ in 0..r.random_range(0..=cfg.max_distractors) {
        let color: [f32; 3] = std::array::from_fn(|_| r.random_range(0.0..1.0));
        let size = r.random_range(6.0..(w.min(h) as f64 / 3.0).max(7.0));
        let cx = r.random_range(0.0..w as f64);
        let cy = r.random_range(0.0..h as f64);
        if r.random_bool(0.5) {
            let aspect = r.random_range(0.4..2.5);
            fill_rect(
                &mut img,
                cx - size * aspect / 2.0,
                cy - size / 2.0,
                cx + size * aspect / 2.0,
                cy + size / 2.0,
                color,
            );
        } else {
            fill_ellipse(&mut img, cx, cy, size / 2.0, size / 2.0, color);
        }
    }

    let n_faces = r.random_range(cfg.min_faces..=cfg.max_faces);
    let (ln_lo, ln_hi) = (cfg.min_face_height.ln(), cfg.max_face_height.ln());
    let mut faces: Vec<FaceAnnotation> = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        for _attempt in 0..50 {
            let fh = r.random_range(ln_lo..=ln_hi).exp().round().max(1.0);
            let fw = (fh * r.random_range(cfg.aspect_low..=cfg.aspect_high)).round().max(1.0);
            let x = r.random_range(0..=(w - fw as usize)) as f64;
            let y = r.random_range(0..=(h - fh as usize)) as f64;
            let b = BBox::from_xywh(x, y, fw, fh);
            // faces never overlap so every pattern stays fully visible
            if faces
                .iter()
                .any(|f| f.bbox.intersection_area(&b) > 0.0 || f.bbox.iou(&b) > cfg.max_pair_iou)
            {
                continue;
            }
            let tone = r.random_range(0.75..0.98);
            let skin = [
                tone as f32,
                (tone * r.random_range(0.7..0.85)) as f32,
                (tone * r.random_range(0.5..0.7)) as f32,
            ];
            let dim = if r.random_bool(cfg.hard_fraction) {
                r.random_range(cfg.hard_dim_low..=cfg.hard_dim_high)
            } else {
                1.0
            };
            draw_face(&mut img, &b, skin, dim);
            faces.push(FaceAnnotation {
                bbox: b,
                attributes: None,
            });
            break;
        }
    }

    if cfg.noise_amplitude > 0.0 {
        let a = cfg.noise_amplitude as f32;
        for v in img.data_mut() {
            *v = (*v + r.random_range(-a..=a)).clamp(0.0, 1.0);
        }
    }
    (img, faces)
}

/// Writes `count` images under `out_dir/images`, plus `annotations.txt` and
/// `manifest.csv`. The output is a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig, count: usize, out_dir: &Path) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let (img, faces) = render_synthetic(cfg, i);
        let rel_path = format!("images/{i:06}.ppm");
        let path = out_dir.join(&rel_path);
        write_ppm(&path, &img)?;
        records.push(ImageRecord {
            id: image_id(&rel_path),
            rel_path,
            path,
            width: img.width,
            height: img.height,
            faces,
        });
    }
    let annotations = out_dir.join(ANNOTATION_FILE);
    fs::write(&annotations, write_annotations(&records))?;
    let manifest = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest, manifest_csv(&records))?;
    Ok(SyntheticDataset {
        annotations,
        manifest,
        records,
    })
}

/// Annotation file behind a dataset path: the file itself, or
/// `annotations.txt` inside a directory.
pub fn annotation_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ANNOTATION_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Images to run detection on: every record of an annotated dataset, or
/// every `.ppm` under a bare directory (ids relative to that directory).
pub fn list_images(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let ann = annotation_path(path);
    if ann.is_file() {
        return Ok(parse_annotations(&ann)?.into_iter().map(|r| (r.id, r.path)).collect());
    }
    let mut found = Vec::new();
    for entry in walkdir::WalkDir::new(path) {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            let rel = p.strip_prefix(path).unwrap_or(p).to_string_lossy().replace('\\', "/");
            found.push((image_id(&rel), p.to_path_buf()));
        }
    }
    found.sort();
    Ok(found)
}

//! KITTI text formats, split files, PPM images and dataset directories.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::geometry::{project_box, wrap_angle, Box3D, CameraCalib, GeometryError};
use crate::heads::Detection3D;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum KittiError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("calibration has no P2 entry")]
    MissingP2,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("split: {0}")]
    Split(String),
    #[error("image: {0}")]
    Image(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, KittiError>;

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| KittiError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| KittiError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| KittiError::Io { path: path.to_path_buf(), source })
}

/// Evaluated object categories, in class-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Typical `(h, w, l)` in meters.
    pub fn mean_dimensions(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [1.53, 1.63, 3.88],
            ObjectClass::Pedestrian => [1.76, 0.66, 0.84],
            ObjectClass::Cyclist => [1.74, 0.60, 1.76],
        }
    }
}

/// One line of a label or prediction file.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRecord {
    /// The KITTI `type` field; unknown strings are kept verbatim.
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    /// `[left, top, right, bottom]`, pixels.
    pub bbox: [f64; 4],
    /// `(h, w, l)`, meters.
    pub dimensions: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn class(&self) -> Option<ObjectClass> {
        ObjectClass::from_name(&self.kind)
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn to_box3d(&self) -> Option<Box3D> {
        Some(Box3D {
            location: self.location,
            dimensions: self.dimensions,
            yaw: self.rotation_y,
            class_id: self.class()?.id(),
            score: self.score,
        })
    }
}

fn parse_f64(tok: &str, line: usize, column: usize, what: &str) -> Result<f64> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(KittiError::Parse { line, column, message: format!("invalid {what} `{tok}`") }),
    }
}

/// `(column, token)` pairs, columns 1-based in characters.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out.into_iter().map(|(s, t)| (line[..s].chars().count() + 1, t)).collect()
}

const LABEL_FIELDS: [&str; 15] = [
    "type", "truncated", "occluded", "alpha", "bbox left", "bbox top", "bbox right", "bbox bottom", "height", "width",
    "length", "x", "y", "z", "rotation_y",
];

/// Parses a label (15 fields) or prediction (16 fields) file. Blank lines
/// are skipped.
pub fn parse_label_file(text: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let toks = tokens(raw);
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 15 && toks.len() != 16 {
            let column = toks.get(15).or(toks.last()).map_or(1, |t| t.0);
            return Err(KittiError::Parse {
                line,
                column,
                message: format!("expected 15 or 16 fields, found {}", toks.len()),
            });
        }
        let mut vals = [0.0; 16];
        for (i, &(col, tok)) in toks.iter().enumerate().skip(1) {
            let what = LABEL_FIELDS.get(i).copied().unwrap_or("score");
            if i == 2 {
                vals[i] = tok
                    .parse::<i32>()
                    .map_err(|_| KittiError::Parse { line, column: col, message: format!("invalid occluded `{tok}`") })?
                    as f64;
            } else {
                vals[i] = parse_f64(tok, line, col, what)?;
            }
        }
        out.push(LabelRecord {
            kind: toks[0].1.to_string(),
            truncated: vals[1],
            occluded: vals[2] as i32,
            alpha: vals[3],
            bbox: [vals[4], vals[5], vals[6], vals[7]],
            dimensions: [vals[8], vals[9], vals[10]],
            location: [vals[11], vals[12], vals[13]],
            rotation_y: vals[14],
            score: (toks.len() == 16).then_some(vals[15]),
        });
    }
    Ok(out)
}

fn fmt2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Formats one record in the devkit's fixed-point convention.
pub fn format_label_record(r: &LabelRecord) -> String {
    let mut s = format!("{} {} {} {}", r.kind, fmt2(r.truncated), r.occluded, fmt2(r.alpha));
    for v in r.bbox.iter().chain(&r.dimensions).chain(&r.location) {
        s.push(' ');
        s.push_str(&fmt2(*v));
    }
    s.push(' ');
    s.push_str(&fmt2(r.rotation_y));
    if let Some(score) = r.score {
        let _ = write!(s, " {score:.6}");
    }
    s
}

pub fn write_label_file(records: &[LabelRecord]) -> String {
    records.iter().map(|r| format_label_record(r) + "\n").collect()
}

/// Reads the `P2:` entry of a calibration file.
pub fn parse_calib_file(text: &str) -> Result<CameraCalib> {
    for (ln, raw) in text.lines().enumerate() {
        let toks = tokens(raw);
        let Some(&(_, key)) = toks.first() else { continue };
        if key != "P2:" {
            continue;
        }
        if toks.len() != 13 {
            return Err(KittiError::Parse {
                line: ln + 1,
                column: toks.last().map_or(1, |t| t.0),
                message: format!("P2 needs 12 values, found {}", toks.len() - 1),
            });
        }
        let mut p2 = [[0.0; 4]; 3];
        for (k, &(col, tok)) in toks[1..].iter().enumerate() {
            p2[k / 4][k % 4] = parse_f64(tok, ln + 1, col, "P2 entry")?;
        }
        return Ok(CameraCalib::new(p2)?);
    }
    Err(KittiError::MissingP2)
}

/// Writes a calibration file whose camera entries all equal `P2`. Values use
/// the shortest exact decimal form, so parsing restores them bit for bit.
pub fn write_calib_file(calib: &CameraCalib) -> String {
    let row: Vec<String> = calib.p2.iter().flatten().map(|v| format!("{v:e}")).collect();
    let row = row.join(" ");
    let mut s = String::new();
    for key in ["P0", "P1", "P2", "P3"] {
        let _ = writeln!(s, "{key}: {row}");
    }
    s.push_str("R0_rect: 1e0 0e0 0e0 0e0 1e0 0e0 0e0 0e0 1e0\n");
    s
}

/// Prediction file text plus the number of detections left out.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionText {
    pub text: String,
    pub skipped: usize,
}

/// Rounds to the two-decimal grid used on disk.
fn on_grid(v: f64) -> f64 {
    fmt2(v).parse().unwrap_or(v)
}

/// Converts detections to prediction records. The 2D box is the image-clamped
/// envelope of the projected corners; detections with any corner at or
/// behind the camera plane are skipped. Alpha is derived from the values as
/// they will be written, so `r_y - alpha == atan2(x, z)` holds on the file.
pub fn predictions_to_records(
    dets: &[Detection3D],
    calib: &CameraCalib,
    image_size: (usize, usize),
) -> (Vec<LabelRecord>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for d in dets {
        let Some(class) = ObjectClass::from_id(d.class_id) else {
            skipped += 1;
            continue;
        };
        let proj = if d.location[2] > 0.0 { project_box(&d.to_box3d(), calib, image_size) } else { None };
        let Some(proj) = proj else {
            log::debug!("skipping detection behind the camera at z = {:.3}", d.location[2]);
            skipped += 1;
            continue;
        };
        let ry = on_grid(wrap_angle(d.yaw));
        let (x, z) = (on_grid(d.location[0]), on_grid(d.location[2]));
        out.push(LabelRecord {
            kind: class.name().to_string(),
            truncated: -1.0,
            occluded: -1,
            alpha: ry - x.atan2(z),
            bbox: proj.clamped,
            dimensions: d.dimensions,
            location: d.location,
            rotation_y: ry,
            score: Some(d.score),
        });
    }
    (out, skipped)
}

pub fn write_predictions(dets: &[Detection3D], calib: &CameraCalib, image_size: (usize, usize)) -> PredictionText {
    let (records, skipped) = predictions_to_records(dets, calib, image_size);
    PredictionText { text: write_label_file(&records), skipped }
}

/// Train/validation frame ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

pub const STANDARD_SPLIT_SIZES: (usize, usize) = (3712, 3769);

fn parse_ids(text: &str, which: &str) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    for (ln, raw) in text.lines().enumerate() {
        let id = raw.trim();
        if id.is_empty() {
            continue;
        }
        if id.len() != 6 || !id.bytes().all(|b| b.is_ascii_digit()) {
            return Err(KittiError::Parse {
                line: ln + 1,
                column: 1,
                message: format!("{which} id `{id}` is not a 6-digit frame id"),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(KittiError::Split(format!("{which} list repeats id {id}")));
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

/// Validates a split from the contents of two id files. Returns the split
/// and any warnings about its size.
pub fn make_split(train_text: &str, val_text: &str) -> Result<(SplitSpec, Vec<String>)> {
    let train_ids = parse_ids(train_text, "train")?;
    let val_ids = parse_ids(val_text, "val")?;
    let train_set: HashSet<&String> = train_ids.iter().collect();
    let dup: BTreeSet<&String> = val_ids.iter().filter(|id| train_set.contains(id)).collect();
    if !dup.is_empty() {
        let list: Vec<&str> = dup.iter().map(|s| s.as_str()).collect();
        return Err(KittiError::Split(format!("ids in both train and val: {}", list.join(", "))));
    }
    let mut warnings = Vec::new();
    if val_ids.is_empty() {
        warnings.push("validation split is empty".to_string());
    }
    if (train_ids.len(), val_ids.len()) != STANDARD_SPLIT_SIZES {
        warnings.push(format!(
            "split sizes ({}, {}) differ from the standard ({}, {})",
            train_ids.len(),
            val_ids.len(),
            STANDARD_SPLIT_SIZES.0,
            STANDARD_SPLIT_SIZES.1
        ));
    }
    Ok((SplitSpec { train_ids, val_ids }, warnings))
}

/// Encodes a `[3, H, W]` tensor with values in `[0, 1]` as binary PPM.
pub fn write_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(KittiError::Image(format!("expected shape [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Decodes binary PPM (P6) or PGM (P5, replicated to three channels) with
/// maxval up to 255.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut next_token = || -> Result<String> {
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
            return Err(KittiError::Image("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(KittiError::Image(format!("unsupported magic `{m}`"))),
    };
    let mut dim = || -> Result<usize> {
        let t = next_token()?;
        t.parse().map_err(|_| KittiError::Image(format!("bad header value `{t}`")))
    };
    let (w, h, maxval) = (dim()?, dim()?, dim()?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(KittiError::Image(format!("unsupported geometry {w}x{h}, maxval {maxval}")));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() < w * h * channels {
        return Err(KittiError::Image(format!("expected {} pixel bytes, found {}", w * h * channels, data.len())));
    }
    let scale = maxval as f64;
    let t = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let src = if channels == 3 { p * 3 + c } else { p };
        data[src] as f64 / scale
    });
    Ok(t)
}

/// A directory laid out like the KITTI object benchmark:
/// `image_2/<id>.ppm`, `label_2/<id>.txt`, `calib/<id>.txt`.
#[derive(Clone, Debug)]
pub struct KittiDir {
    pub root: PathBuf,
}

impl KittiDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("image_2").join(format!("{id}.ppm"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("label_2").join(format!("{id}.txt"))
    }

    pub fn calib_path(&self, id: &str) -> PathBuf {
        self.root.join("calib").join(format!("{id}.txt"))
    }

    /// Sorted frame ids with an image present.
    pub fn frame_ids(&self) -> Result<Vec<String>> {
        list_stems(&self.root.join("image_2"), "ppm")
    }

    pub fn load_image(&self, id: &str) -> Result<Tensor> {
        let path = self.image_path(id);
        let bytes = std::fs::read(&path).map_err(|source| KittiError::Io { path: path.clone(), source })?;
        read_ppm(&bytes)
    }

    pub fn load_labels(&self, id: &str) -> Result<Vec<LabelRecord>> {
        parse_label_file(&read_text(&self.label_path(id))?)
    }

    pub fn load_calib(&self, id: &str) -> Result<CameraCalib> {
        parse_calib_file(&read_text(&self.calib_path(id))?)
    }

    pub fn save_frame(&self, id: &str, image: &Tensor, labels: &[LabelRecord], calib: &CameraCalib) -> Result<()> {
        write_file(&self.image_path(id), &write_ppm(image)?)?;
        write_file(&self.label_path(id), write_label_file(labels).as_bytes())?;
        write_file(&self.calib_path(id), write_calib_file(calib).as_bytes())
    }
}

/// Sorted file stems in `dir` with the given extension.
pub fn list_stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|source| KittiError::Io { path: dir.to_path_buf(), source })?;
    let mut out = Vec::new();
    for e in entries {
        let path = e.map_err(|source| KittiError::Io { path: dir.to_path_buf(), source })?.path();
        if path.extension().and_then(|s| s.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Six-digit frame id.
pub fn frame_id(i: usize) -> String {
    format!("{i:06}")
}

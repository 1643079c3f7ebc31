//! Persistence: point clouds, label files, dataset manifests, the OOD object
//! database and feature dumps.
//!
//! Binary formats are little-endian throughout. Point clouds use the common
//! automotive layout of four `f32` values per return (x, y, z, intensity), so
//! KITTI velodyne files load unmodified.
//!
//! Text formats are line oriented. Blank lines and everything after `#` are
//! ignored. Manifests and the object database use `key=value` tokens; label
//! files use whitespace-separated columns:
//!
//! ```text
//! class length width height x y z yaw is_ood category
//! ```
//!
//! A file is never written by two writers at once; callers own that.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::featx::{FeatureSample, LayerTag, SampleSource};
use crate::geometry::{Box3D, LabeledObject, OodCategory, Point, PointCloud};

const CLOUD_RECORD: usize = 16;
const DUMP_MAGIC: &[u8; 4] = b"OODF";
const DUMP_VERSION: u32 = 1;
const DUMP_HEADER: usize = 4 + 4 + 8 + 4 + 1 + 4;

pub const MANIFEST_FILE: &str = "dataset.txt";
pub const OOD_DB_FILE: &str = "objects.txt";

#[derive(Debug, Error)]
pub enum PcioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: truncated at byte {offset} (length {len})")]
    TruncatedFile {
        path: PathBuf,
        offset: usize,
        len: usize,
    },
    #[error("{path}: non-finite value at byte {offset}")]
    NonFiniteValue { path: PathBuf, offset: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: unknown OOD category '{value}'")]
    UnknownCategory {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("dimension mismatch: row {row} has {found} values, expected {expected}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid value: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PcioError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PcioError + '_ {
    move |source| PcioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> PcioError {
    PcioError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Formats a float with nine significant digits, the precision that
/// round-trips every `f32`.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if (-5..=8).contains(&exp) {
        let decimals = (8 - exp) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let (mant, e) = sci.split_at(sci.find('e').unwrap());
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}{e}")
    }
}

// ---------------------------------------------------------------------------
// Point clouds

/// Decoding summary for [`read_cloud_with_report`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CloudReadReport {
    /// Intensities outside `[0, 1]` that were clamped.
    pub clamped_intensities: usize,
}

pub fn decode_cloud(bytes: &[u8], frame_id: &str, path: &Path) -> Result<(PointCloud, CloudReadReport)> {
    if bytes.len() % CLOUD_RECORD != 0 {
        return Err(PcioError::TruncatedFile {
            path: path.to_path_buf(),
            offset: bytes.len() - bytes.len() % CLOUD_RECORD,
            len: bytes.len(),
        });
    }
    let mut report = CloudReadReport::default();
    let mut points = Vec::with_capacity(bytes.len() / CLOUD_RECORD);
    for (r, rec) in bytes.chunks_exact(CLOUD_RECORD).enumerate() {
        let mut v = [0f64; 4];
        for (k, word) in rec.chunks_exact(4).enumerate() {
            let f = f32::from_le_bytes(word.try_into().unwrap());
            if !f.is_finite() {
                return Err(PcioError::NonFiniteValue {
                    path: path.to_path_buf(),
                    offset: r * CLOUD_RECORD + 4 * k,
                });
            }
            v[k] = f64::from(f);
        }
        if !(0.0..=1.0).contains(&v[3]) {
            report.clamped_intensities += 1;
            v[3] = v[3].clamp(0.0, 1.0);
        }
        points.push(Point::new(v[0], v[1], v[2], v[3]));
    }
    Ok((PointCloud::new(frame_id, points), report))
}

pub fn encode_cloud(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * CLOUD_RECORD);
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a cloud and reports how many intensities had to be clamped.
pub fn read_cloud_with_report(path: &Path) -> Result<(PointCloud, CloudReadReport)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (pc, report) = decode_cloud(&bytes, &frame_id, path)?;
    if report.clamped_intensities > 0 {
        log::warn!(
            "{}: clamped {} intensities into [0, 1]",
            path.display(),
            report.clamped_intensities
        );
    }
    Ok((pc, report))
}

/// Reads a binary cloud; the frame id is the file stem.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    read_cloud_with_report(path).map(|(pc, _)| pc)
}

pub fn write_cloud(pc: &PointCloud, path: &Path) -> Result<()> {
    write_bytes(path, &encode_cloud(pc))
}

// ---------------------------------------------------------------------------
// Labels

pub fn format_label(obj: &LabeledObject) -> String {
    let b = &obj.bbox;
    let fields = [
        b.size[0], b.size[1], b.size[2], b.center[0], b.center[1], b.center[2], b.yaw,
    ];
    let mut line = obj.class_name.clone();
    // Shortest text that reads back to the same f32; never more than nine digits.
    for f in fields {
        let _ = write!(line, " {}", f as f32);
    }
    let _ = write!(line, " {} {}", u8::from(obj.is_ood), obj.category.number());
    line
}

pub fn format_labels(objects: &[LabeledObject]) -> String {
    let mut s = String::new();
    for o in objects {
        s.push_str(&format_label(o));
        s.push('\n');
    }
    s
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
    .trim()
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<LabeledObject>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 10 {
            return Err(parse_err(path, lineno, format!("expected 10 columns, found {}", cols.len())));
        }
        let mut nums = [0f64; 7];
        for (k, tok) in cols[1..8].iter().enumerate() {
            // Label fields carry single precision; nine digits recover the f32 exactly.
            let v = f64::from(
                tok.parse::<f32>()
                    .map_err(|_| parse_err(path, lineno, format!("bad number '{tok}'")))?,
            );
            if !v.is_finite() {
                return Err(parse_err(path, lineno, format!("non-finite number '{tok}'")));
            }
            nums[k] = v;
        }
        let [l, w, h, x, y, z, yaw] = nums;
        if l <= 0.0 || w <= 0.0 || h <= 0.0 {
            return Err(parse_err(path, lineno, "box dimensions must be positive"));
        }
        let is_ood = match cols[8] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, lineno, format!("bad is_ood flag '{other}'"))),
        };
        let category = cols[9]
            .parse::<u8>()
            .ok()
            .and_then(OodCategory::from_number)
            .ok_or_else(|| PcioError::UnknownCategory {
                path: path.to_path_buf(),
                line: lineno,
                value: cols[9].to_string(),
            })?;
        if is_ood != category.is_ood() {
            return Err(parse_err(
                path,
                lineno,
                format!("is_ood={} contradicts category {}", u8::from(is_ood), category.number()),
            ));
        }
        out.push(LabeledObject {
            bbox: Box3D::new([x, y, z], [l, w, h], yaw),
            class_name: cols[0].to_string(),
            is_ood,
            category,
        });
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledObject>> {
    parse_labels(&read_text(path)?, path)
}

pub fn write_labels(objects: &[LabeledObject], path: &Path) -> Result<()> {
    for o in objects {
        if o.class_name.is_empty() || o.class_name.contains(char::is_whitespace) || o.class_name.contains('#') {
            return Err(PcioError::Invalid(format!("class name '{}' cannot be written", o.class_name)));
        }
    }
    write_text(path, &format_labels(objects))
}

// ---------------------------------------------------------------------------
// key=value records

fn parse_record<'a>(line: &'a str, path: &Path, lineno: usize) -> Result<(&'a str, Vec<(&'a str, &'a str)>)> {
    let mut tokens = line.split_whitespace();
    let kind = tokens.next().unwrap_or_default();
    let mut pairs = Vec::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(path, lineno, format!("expected key=value, found '{tok}'")))?;
        pairs.push((k, v));
    }
    Ok((kind, pairs))
}

fn field<'a>(pairs: &[(&str, &'a str)], key: &str, path: &Path, lineno: usize) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| parse_err(path, lineno, format!("missing field '{key}'")))
}

fn check_token(value: &str, what: &str) -> Result<()> {
    if value.is_empty() || value.contains(char::is_whitespace) || value.contains('#') {
        Err(PcioError::Invalid(format!("{what} '{value}' cannot be written as a token")))
    } else {
        Ok(())
    }
}

fn path_token(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestFrame {
    pub frame_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub cloud_path: PathBuf,
    pub label_path: PathBuf,
}

/// The list of frames that make up a dataset plus its FG class names.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub frames: Vec<ManifestFrame>,
}

pub fn format_manifest(m: &DatasetManifest) -> Result<String> {
    let mut s = String::new();
    for c in &m.classes {
        check_token(c, "class")?;
        if c.contains(',') {
            return Err(PcioError::Invalid(format!("class '{c}' contains ','")));
        }
    }
    let _ = writeln!(s, "classes names={}", m.classes.join(","));
    for f in &m.frames {
        check_token(&f.frame_id, "frame id")?;
        let cloud = path_token(&f.cloud_path);
        let labels = path_token(&f.label_path);
        check_token(&cloud, "path")?;
        check_token(&labels, "path")?;
        let _ = writeln!(s, "frame id={} cloud={} labels={}", f.frame_id, cloud, labels);
    }
    Ok(s)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::default();
    let mut seen = HashSet::new();
    let mut have_classes = false;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let (kind, pairs) = parse_record(line, path, lineno)?;
        match kind {
            "classes" => {
                let names = field(&pairs, "names", path, lineno)?;
                m.classes = names.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
                have_classes = true;
            }
            "frame" => {
                let id = field(&pairs, "id", path, lineno)?.to_string();
                if !seen.insert(id.clone()) {
                    return Err(parse_err(path, lineno, format!("duplicate frame id '{id}'")));
                }
                m.frames.push(ManifestFrame {
                    frame_id: id,
                    cloud_path: field(&pairs, "cloud", path, lineno)?.into(),
                    label_path: field(&pairs, "labels", path, lineno)?.into(),
                });
            }
            other => return Err(parse_err(path, lineno, format!("unknown record '{other}'"))),
        }
    }
    if !have_classes {
        return Err(parse_err(path, 0, "missing 'classes' record"));
    }
    Ok(m)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    parse_manifest(&read_text(path)?, path)
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    write_text(path, &format_manifest(m)?)
}

/// One frame held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub labels: Vec<LabeledObject>,
}

impl Frame {
    pub fn id(&self) -> &str {
        &self.cloud.frame_id
    }
}

/// A dataset held in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub frames: Vec<Frame>,
}

fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads every frame a manifest references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let m = read_manifest(manifest_path)?;
    let base = manifest_base(manifest_path);
    let mut frames = Vec::with_capacity(m.frames.len());
    for f in &m.frames {
        let mut cloud = read_cloud(&base.join(&f.cloud_path))?;
        cloud.frame_id = f.frame_id.clone();
        let labels = read_labels(&base.join(&f.label_path))?;
        frames.push(Frame { cloud, labels });
    }
    Ok(Dataset {
        classes: m.classes,
        frames,
    })
}

/// Writes a dataset under `dir` as `dataset.txt`, `clouds/<id>.bin` and
/// `labels/<id>.txt`, returning the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    let mut m = DatasetManifest {
        classes: ds.classes.clone(),
        frames: Vec::with_capacity(ds.frames.len()),
    };
    for f in &ds.frames {
        check_token(f.id(), "frame id")?;
        let cloud_rel = PathBuf::from(format!("clouds/{}.bin", f.id()));
        let label_rel = PathBuf::from(format!("labels/{}.txt", f.id()));
        write_cloud(&f.cloud, &dir.join(&cloud_rel))?;
        write_labels(&f.labels, &dir.join(&label_rel))?;
        m.frames.push(ManifestFrame {
            frame_id: f.id().to_string(),
            cloud_path: cloud_rel,
            label_path: label_rel,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    write_manifest(&m, &path)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// OOD object database

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OodSource {
    Synthetic,
    Real,
}

impl OodSource {
    pub fn as_str(self) -> &'static str {
        match self {
            OodSource::Synthetic => "synthetic",
            OodSource::Real => "real",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "synthetic" => Some(OodSource::Synthetic),
            "real" => Some(OodSource::Real),
            _ => None,
        }
    }
}

/// Metadata for one object in the OOD database.
#[derive(Clone, Debug, PartialEq)]
pub struct OodObjectRecord {
    pub object_id: String,
    pub class_name: String,
    pub source: OodSource,
    pub category: OodCategory,
    /// Planar distance to the sensor where the object was captured.
    pub original_range: f64,
    pub original_azimuth: f64,
    /// Relative to the database directory.
    pub cloud_path: PathBuf,
}

pub fn format_ood_db(records: &[OodObjectRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        check_token(&r.object_id, "object id")?;
        check_token(&r.class_name, "class")?;
        let cloud = path_token(&r.cloud_path);
        check_token(&cloud, "path")?;
        if !r.category.in_scope() {
            return Err(PcioError::Invalid(format!(
                "object '{}' has out-of-scope category {}",
                r.object_id,
                r.category.number()
            )));
        }
        let _ = writeln!(
            s,
            "object id={} class={} source={} category={} range={} azimuth={} cloud={}",
            r.object_id,
            r.class_name,
            r.source.as_str(),
            r.category.number(),
            fmt_sig9(r.original_range),
            fmt_sig9(r.original_azimuth),
            cloud
        );
    }
    Ok(s)
}

pub fn parse_ood_db(text: &str, path: &Path) -> Result<Vec<OodObjectRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let (kind, pairs) = parse_record(line, path, lineno)?;
        if kind != "object" {
            return Err(parse_err(path, lineno, format!("unknown record '{kind}'")));
        }
        let get = |k| field(&pairs, k, path, lineno);
        let num = |k| -> Result<f64> {
            let tok = get(k)?;
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, lineno, format!("bad number '{tok}' for {k}")))
        };
        let cat_tok = get("category")?;
        let category = cat_tok
            .parse::<u8>()
            .ok()
            .and_then(OodCategory::from_number)
            .filter(|c| c.in_scope())
            .ok_or_else(|| PcioError::UnknownCategory {
                path: path.to_path_buf(),
                line: lineno,
                value: cat_tok.to_string(),
            })?;
        let src_tok = get("source")?;
        let source = OodSource::parse(src_tok)
            .ok_or_else(|| parse_err(path, lineno, format!("unknown source '{src_tok}'")))?;
        let original_range = num("range")?;
        if original_range <= 0.0 {
            return Err(parse_err(path, lineno, "range must be positive"));
        }
        let object_id = get("id")?.to_string();
        if !seen.insert(object_id.clone()) {
            return Err(parse_err(path, lineno, format!("duplicate object id '{object_id}'")));
        }
        out.push(OodObjectRecord {
            object_id,
            class_name: get("class")?.to_string(),
            source,
            category,
            original_range,
            original_azimuth: num("azimuth")?,
            cloud_path: get("cloud")?.into(),
        });
    }
    Ok(out)
}

/// Reads `objects.txt` from a database directory, in file order.
pub fn read_ood_db(dir: &Path) -> Result<Vec<OodObjectRecord>> {
    let path = dir.join(OOD_DB_FILE);
    parse_ood_db(&read_text(&path)?, &path)
}

pub fn write_ood_db(records: &[OodObjectRecord], dir: &Path) -> Result<()> {
    write_text(&dir.join(OOD_DB_FILE), &format_ood_db(records)?)
}

// ---------------------------------------------------------------------------
// Feature dumps

/// One row of a feature dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpRow {
    pub class_label: u32,
    pub is_ood: bool,
    pub vector: Vec<f32>,
}

/// Feature vectors of one layer.
///
/// Layout: `"OODF"`, version `u32`, count `u64`, dim `u32`, layer tag `u8`,
/// class count `u32`, then per row the class label `u32`, the OOD flag `u8`
/// and `dim` `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDump {
    pub layer: LayerTag,
    pub dim: usize,
    pub class_count: u32,
    pub rows: Vec<DumpRow>,
}

impl FeatureDump {
    pub fn from_samples(samples: &[FeatureSample], layer: LayerTag, dim: usize, class_count: u32) -> Result<Self> {
        let mut rows = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.vector.len() != dim {
                return Err(PcioError::DimensionMismatch {
                    row: i,
                    expected: dim,
                    found: s.vector.len(),
                });
            }
            rows.push(DumpRow {
                class_label: s.class_label as u32,
                is_ood: s.is_ood,
                vector: s.vector.clone(),
            });
        }
        Ok(Self {
            layer,
            dim,
            class_count,
            rows,
        })
    }

    /// Expands rows back into samples. Frame ids are not stored in dumps.
    pub fn to_samples(&self, source: SampleSource) -> Vec<FeatureSample> {
        self.rows
            .iter()
            .map(|r| FeatureSample {
                vector: r.vector.clone(),
                class_label: r.class_label as usize,
                is_ood: r.is_ood,
                source,
                frame_id: String::new(),
                layer: self.layer,
            })
            .collect()
    }
}

pub fn encode_feature_dump(d: &FeatureDump) -> Result<Vec<u8>> {
    let row_len = 5 + 4 * d.dim;
    let mut out = Vec::with_capacity(DUMP_HEADER + row_len * d.rows.len());
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&(d.rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(d.dim as u32).to_le_bytes());
    out.push(d.layer.code());
    out.extend_from_slice(&d.class_count.to_le_bytes());
    for (i, r) in d.rows.iter().enumerate() {
        if r.vector.len() != d.dim {
            return Err(PcioError::DimensionMismatch {
                row: i,
                expected: d.dim,
                found: r.vector.len(),
            });
        }
        out.extend_from_slice(&r.class_label.to_le_bytes());
        out.push(u8::from(r.is_ood));
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_feature_dump(bytes: &[u8], path: &Path) -> Result<FeatureDump> {
    let truncated = |offset: usize| PcioError::TruncatedFile {
        path: path.to_path_buf(),
        offset,
        len: bytes.len(),
    };
    if bytes.len() < DUMP_HEADER {
        return Err(truncated(bytes.len()));
    }
    if &bytes[..4] != DUMP_MAGIC {
        return Err(parse_err(path, 0, "not a feature dump (bad magic)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != DUMP_VERSION {
        return Err(parse_err(path, 0, format!("unsupported dump version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u32_at(16) as usize;
    let layer = LayerTag::from_code(bytes[20])
        .ok_or_else(|| parse_err(path, 0, format!("unknown layer tag {}", bytes[20])))?;
    let class_count = u32_at(21);
    let row_len = 5 + 4 * dim;
    let expected = n
        .checked_mul(row_len)
        .and_then(|b| b.checked_add(DUMP_HEADER))
        .ok_or_else(|| parse_err(path, 0, "row count overflows"))?;
    if bytes.len() < expected {
        let complete = (bytes.len() - DUMP_HEADER) / row_len;
        return Err(truncated(DUMP_HEADER + complete * row_len));
    }
    if bytes.len() > expected {
        return Err(parse_err(path, 0, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let o = DUMP_HEADER + i * row_len;
        let class_label = u32_at(o);
        let is_ood = match bytes[o + 4] {
            0 => false,
            1 => true,
            other => return Err(parse_err(path, 0, format!("bad OOD flag {other} at byte {}", o + 4))),
        };
        let vector = bytes[o + 5..o + row_len]
            .chunks_exact(4)
            .map(|w| f32::from_le_bytes(w.try_into().unwrap()))
            .collect();
        rows.push(DumpRow {
            class_label,
            is_ood,
            vector,
        });
    }
    Ok(FeatureDump {
        layer,
        dim,
        class_count,
        rows,
    })
}

pub fn write_feature_dump(d: &FeatureDump, path: &Path) -> Result<()> {
    write_bytes(path, &encode_feature_dump(d)?)
}

pub fn read_feature_dump(path: &Path) -> Result<FeatureDump> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_feature_dump(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> PathBuf {
        PathBuf::from("mem")
    }

    #[test]
    fn empty_cloud() {
        let (pc, _) = decode_cloud(&[], "x", &p()).unwrap();
        assert!(pc.is_empty());
    }

    #[test]
    fn single_record_decodes() {
        let mut b = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let (pc, _) = decode_cloud(&b, "x", &p()).unwrap();
        assert_eq!(pc.points, vec![Point::new(1.0, 2.0, 3.0, 0.5)]);
    }

    #[test]
    fn truncated_and_non_finite_clouds_fail() {
        let err = decode_cloud(&[0u8; 17], "x", &p()).unwrap_err();
        assert!(matches!(err, PcioError::TruncatedFile { offset: 16, len: 17, .. }));
        let mut b = vec![0u8; 16];
        b[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_cloud(&b, "x", &p()).unwrap_err();
        assert!(matches!(err, PcioError::NonFiniteValue { offset: 8, .. }));
    }

    #[test]
    fn intensities_are_clamped_and_counted() {
        let mut b = Vec::new();
        for v in [0.0f32, 0.0, 0.0, 1.5, 0.0, 0.0, 0.0, -0.1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let (pc, rep) = decode_cloud(&b, "x", &p()).unwrap();
        assert_eq!(rep.clamped_intensities, 2);
        assert_eq!(pc.points[0].intensity, 1.0);
        assert_eq!(pc.points[1].intensity, 0.0);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.5), "1.5");
        assert_eq!(fmt_sig9(-3.0), "-3");
        assert_eq!(fmt_sig9(123456789.0), "123456789");
        assert_eq!(fmt_sig9(1.0e10), "1e10");
        assert_eq!(fmt_sig9(1.25e-7), "1.25e-7");
        assert_eq!(fmt_sig9(0.1), "0.1");
    }

    #[test]
    fn empty_label_file() {
        assert!(parse_labels("", &p()).unwrap().is_empty());
        assert!(parse_labels("# only a comment\n\n", &p()).unwrap().is_empty());
    }

    #[test]
    fn single_label_round_trips() {
        let line = "Car 3.9 1.6 1.56 10.25 -2.5 -0.8 0.125 0 1";
        let objs = parse_labels(line, &p()).unwrap();
        assert_eq!(format_label(&objs[0]), line);
    }

    #[test]
    fn label_errors_carry_line_numbers() {
        let err = parse_labels("\nCar 1 1 1 0 0 0 0 0\n", &p()).unwrap_err();
        assert!(matches!(err, PcioError::Parse { line: 2, .. }));
        let err = parse_labels("bench 1 1 1 0 0 0 0 1 9", &p()).unwrap_err();
        assert!(matches!(err, PcioError::UnknownCategory { line: 1, .. }));
        let err = parse_labels("Car 1 1 1 0 0 0 0 1 1", &p()).unwrap_err();
        assert!(matches!(err, PcioError::Parse { line: 1, .. }));
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let text = "classes names=Car\nframe id=a cloud=a.bin labels=a.txt\nframe id=a cloud=b.bin labels=b.txt\n";
        assert!(matches!(parse_manifest(text, &p()), Err(PcioError::Parse { line: 3, .. })));
    }

    #[test]
    fn ood_db_round_trip_keeps_order() {
        let recs: Vec<OodObjectRecord> = ["swing", "bench", "cone"]
            .iter()
            .enumerate()
            .map(|(i, name)| OodObjectRecord {
                object_id: format!("{name}_{i}"),
                class_name: name.to_string(),
                source: if i == 1 { OodSource::Real } else { OodSource::Synthetic },
                category: OodCategory::MisdetectedOodBackground,
                original_range: 10.0 + i as f64,
                original_azimuth: -0.25 * i as f64,
                cloud_path: format!("clouds/{name}.bin").into(),
            })
            .collect();
        let text = format_ood_db(&recs).unwrap();
        assert_eq!(parse_ood_db(&text, &p()).unwrap(), recs);
    }

    #[test]
    fn ood_db_rejects_out_of_scope_category() {
        let text = "object id=a class=x source=real category=4 range=1 azimuth=0 cloud=a.bin";
        assert!(matches!(parse_ood_db(text, &p()), Err(PcioError::UnknownCategory { .. })));
    }

    #[test]
    fn empty_dump_round_trips() {
        let d = FeatureDump {
            layer: LayerTag::Conv4x,
            dim: 7,
            class_count: 3,
            rows: vec![],
        };
        let bytes = encode_feature_dump(&d).unwrap();
        assert_eq!(decode_feature_dump(&bytes, &p()).unwrap(), d);
    }

    #[test]
    fn dump_truncation_and_dimension_errors() {
        let d = FeatureDump {
            layer: LayerTag::Backbone,
            dim: 4,
            class_count: 3,
            rows: vec![DumpRow {
                class_label: 1,
                is_ood: true,
                vector: vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE],
            }],
        };
        let bytes = encode_feature_dump(&d).unwrap();
        assert_eq!(decode_feature_dump(&bytes, &p()).unwrap(), d);
        let err = decode_feature_dump(&bytes[..bytes.len() - 1], &p()).unwrap_err();
        assert!(matches!(err, PcioError::TruncatedFile { offset: DUMP_HEADER, .. }));
        let mut bad = d.clone();
        bad.rows[0].vector.pop();
        assert!(matches!(encode_feature_dump(&bad), Err(PcioError::DimensionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn cloud_bytes_round_trip(vals in prop::collection::vec((-80.0f32..80.0, -80.0f32..80.0, -5.0f32..5.0, 0.0f32..=1.0), 0..200)) {
            let mut bytes = Vec::new();
            for (x, y, z, i) in &vals {
                for v in [x, y, z, i] {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            let (pc, _) = decode_cloud(&bytes, "f", &p()).unwrap();
            prop_assert_eq!(encode_cloud(&pc), bytes);
        }

        #[test]
        fn labels_round_trip_on_f32_values(
            rows in prop::collection::vec((0.1f32..10.0, 0.1f32..10.0, 0.1f32..5.0, -70.0f32..70.0, -70.0f32..70.0, -3.0f32..3.0, -3.14f32..3.14, 1u8..=8), 0..20)
        ) {
            let objs: Vec<LabeledObject> = rows.iter().map(|&(l, w, h, x, y, z, yaw, cat)| {
                let category = OodCategory::from_number(cat).unwrap();
                LabeledObject {
                    bbox: Box3D::new([x.into(), y.into(), z.into()], [l.into(), w.into(), h.into()], yaw.into()),
                    class_name: "Obj".into(),
                    is_ood: category.is_ood(),
                    category,
                }
            }).collect();
            let back = parse_labels(&format_labels(&objs), &p()).unwrap();
            prop_assert_eq!(back, objs);
        }
    }
}

//! Binary sample files and the text manifest indexing them.
//!
//! Sample layout, little-endian: 8-byte magic, then u32 version, height,
//! width, channels, flags and id, followed by the `f32` image in
//! channel-major order and, if labeled, `u16` labels in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ClipRef, Dataset, DatasetEntry, Domain, DomainSample, LabelMap, Split};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const SAMPLE_MAGIC: &[u8; 8] = b"PIPADAT1";
pub const SAMPLE_HEADER_LEN: usize = 32;
const SAMPLE_VERSION: u32 = 1;
const FLAG_LABELED: u32 = 1;
const FLAG_TARGET: u32 = 2;
const FLAG_EVAL: u32 = 4;
/// Extents beyond this are treated as corruption.
const MAX_EXTENT: u32 = 1 << 14;

const MANIFEST_HEADER: &str = "# pipa-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.tsv";

pub fn save_sample(path: &Path, sample: &DomainSample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let label = sample.label.as_ref();
    let mut flags = 0;
    if label.is_some() {
        flags |= FLAG_LABELED;
    }
    if sample.domain == Domain::Target {
        flags |= FLAG_TARGET;
    }
    if sample.split == Split::Eval {
        flags |= FLAG_EVAL;
    }
    let id = u32::try_from(sample.id)
        .map_err(|_| Error::format(path, format!("sample id {} exceeds 32 bits", sample.id)))?;
    let mut buf = Vec::with_capacity(SAMPLE_HEADER_LEN + 3 * h * w * 4 + h * w * 2);
    buf.extend_from_slice(SAMPLE_MAGIC);
    for v in [SAMPLE_VERSION, h as u32, w as u32, 3, flags, id] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in sample.image.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(l) = label {
        for &v in l.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

pub fn load_sample(path: &Path) -> Result<DomainSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < SAMPLE_HEADER_LEN {
        return Err(Error::format(path, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != SAMPLE_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", &bytes[..8])));
    }
    let version = u32_at(&bytes, 8);
    if version != SAMPLE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (h, w, c, flags, id) = (
        u32_at(&bytes, 12),
        u32_at(&bytes, 16),
        u32_at(&bytes, 20),
        u32_at(&bytes, 24),
        u32_at(&bytes, 28),
    );
    if c != 3 {
        return Err(Error::format(path, format!("expected 3 channels, found {c}")));
    }
    if h == 0 || w == 0 || h > MAX_EXTENT || w > MAX_EXTENT {
        return Err(Error::format(path, format!("extent {h}x{w} out of range")));
    }
    let (h, w) = (h as usize, w as usize);
    let labeled = flags & FLAG_LABELED != 0;
    let expected = SAMPLE_HEADER_LEN + 3 * h * w * 4 + if labeled { h * w * 2 } else { 0 };
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("size {} does not match {expected} implied by header", bytes.len()),
        ));
    }
    let img_end = SAMPLE_HEADER_LEN + 3 * h * w * 4;
    let image: Vec<f64> = bytes[SAMPLE_HEADER_LEN..img_end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64)
        .collect();
    let label = if labeled {
        let data = bytes[img_end..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Some(LabelMap::new(h, w, data)?)
    } else {
        None
    };
    let domain = if flags & FLAG_TARGET != 0 {
        Domain::Target
    } else {
        Domain::Source
    };
    let split = if flags & FLAG_EVAL != 0 {
        Split::Eval
    } else {
        Split::Train
    };
    DomainSample::new(Tensor::new(&[3, h, w], image)?, label, domain, split, id as u64)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Path relative to the manifest's directory.
    pub relpath: String,
    pub domain: Domain,
    pub split: Split,
    pub clip: Option<ClipRef>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let (clip, frame) = match r.clip {
                Some(c) => (c.clip_id.to_string(), c.frame.to_string()),
                None => ("-".into(), "-".into()),
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{clip}\t{frame}\n",
                r.relpath,
                r.domain.as_str(),
                r.split.as_str()
            ));
        }
        out
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::format(path, "missing manifest header"));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 2));
            let fields: Vec<&str> = line.split('\t').collect();
            let [relpath, domain, split, clip, frame] = fields[..] else {
                return Err(bad("expected 5 tab-separated fields"));
            };
            let domain = match domain {
                "source" => Domain::Source,
                "target" => Domain::Target,
                _ => return Err(bad("unknown domain")),
            };
            let split = match split {
                "train" => Split::Train,
                "eval" => Split::Eval,
                _ => return Err(bad("unknown split")),
            };
            let clip = match (clip, frame) {
                ("-", "-") => None,
                (c, f) => Some(ClipRef {
                    clip_id: c.parse().map_err(|_| bad("bad clip id"))?,
                    frame: f.parse().map_err(|_| bad("bad frame index"))?,
                }),
            };
            records.push(ManifestRecord {
                relpath: relpath.to_string(),
                domain,
                split,
                clip,
            });
        }
        Ok(DatasetManifest { records })
    }
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

/// Parses a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = DatasetManifest::parse(path, &text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for r in &manifest.records {
        let p = dir.join(&r.relpath);
        if !p.is_file() {
            return Err(Error::format(path, format!("referenced file {} is missing", p.display())));
        }
    }
    Ok(manifest)
}

/// Writes every sample under `dir/samples/` and the manifest to
/// `dir/manifest.tsv`, preserving dataset order.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<DatasetManifest> {
    let samples = dir.join("samples");
    fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    let mut records = Vec::with_capacity(dataset.entries.len());
    for (i, e) in dataset.entries.iter().enumerate() {
        let relpath = format!("samples/{i:06}.bin");
        save_sample(&dir.join(&relpath), &e.sample)?;
        records.push(ManifestRecord {
            relpath,
            domain: e.sample.domain,
            split: e.sample.split,
            clip: e.clip,
        });
    }
    let manifest = DatasetManifest { records };
    save_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads the dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath: PathBuf = dir.join(MANIFEST_FILE);
    let manifest = load_manifest(&mpath)?;
    let mut entries = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let p = dir.join(&r.relpath);
        let sample = load_sample(&p)?;
        if sample.domain != r.domain || sample.split != r.split {
            return Err(Error::Format {
                path: p,
                msg: "header tags disagree with the manifest".into(),
            });
        }
        entries.push(DatasetEntry {
            sample,
            clip: r.clip,
        });
    }
    Ok(Dataset { entries })
}

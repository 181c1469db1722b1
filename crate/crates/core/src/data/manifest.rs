use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use nifti::NiftiHeader;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "a4unet-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Brats2019,
    Brats2020,
    Brats2021,
    Flat,
}

impl Layout {
    pub fn modalities(&self) -> Vec<String> {
        let m: &[&str] = match self {
            Layout::Brats2021 => &["t1n", "t1c", "t2w", "t2f"],
            _ => &["flair", "t1ce", "t1", "t2"],
        };
        m.iter().map(|s| s.to_string()).collect()
    }

    pub const ALL: [Layout; 4] = [Layout::Brats2019, Layout::Brats2020, Layout::Brats2021, Layout::Flat];
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Brats2019 => "brats2019",
            Layout::Brats2020 => "brats2020",
            Layout::Brats2021 => "brats2021",
            Layout::Flat => "flat",
        })
    }
}

impl FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL
            .into_iter()
            .find(|l| l.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown layout {s:?} (brats2019, brats2020, brats2021, flat)")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    /// Every nonzero label becomes 1.
    #[default]
    WholeTumorBinary,
    RawLabels,
}

impl FromStr for LabelPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole_tumor_binary" | "binary" => Ok(LabelPolicy::WholeTumorBinary),
            "raw_labels" | "raw" => Ok(LabelPolicy::RawLabels),
            _ => Err(Error::Config(format!("unknown label policy {s:?} (whole_tumor_binary, raw_labels)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub subject_id: String,
    pub split: Split,
    pub modality_paths: IndexMap<String, PathBuf>,
    pub label_path: Option<PathBuf>,
    /// Voxel grid `[X, Y, Z]`; Z is the axial (slice) axis.
    pub shape: [usize; 3],
    /// In-plane pixel spacing in mm along X and Y.
    pub spacing: (f64, f64),
}

impl VolumeRecord {
    pub fn slices(&self) -> usize {
        self.shape[2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub layout: Layout,
    pub modalities: Vec<String>,
    pub label_policy: LabelPolicy,
    /// Common slice count, absent when volumes differ in depth.
    pub slices_per_volume: Option<usize>,
    pub total_slices: usize,
    pub records: Vec<VolumeRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    layout: Layout,
    modalities: Vec<String>,
    label_policy: LabelPolicy,
    slices_per_volume: Option<usize>,
    total_slices: usize,
    records: usize,
}

impl DatasetManifest {
    pub fn new(layout: Layout, modalities: Vec<String>, label_policy: LabelPolicy, records: Vec<VolumeRecord>) -> Self {
        let mut m = Self {
            layout,
            modalities,
            label_policy,
            slices_per_volume: None,
            total_slices: 0,
            records,
        };
        m.recount();
        m
    }

    fn recount(&mut self) {
        self.total_slices = self.records.iter().map(|r| r.slices()).sum();
        let first = self.records.first().map(|r| r.slices());
        self.slices_per_volume = first.filter(|&d| self.records.iter().all(|r| r.slices() == d));
    }

    pub fn split(&self, split: Split) -> Vec<&VolumeRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn subset(&self, split: Split) -> DatasetManifest {
        let records = self.records.iter().filter(|r| r.split == split).cloned().collect();
        Self::new(self.layout, self.modalities.clone(), self.label_policy, records)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// One header line, then one record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            layout: self.layout,
            modalities: self.modalities.clone(),
            label_policy: self.label_policy,
            slices_per_volume: self.slices_per_volume,
            total_slices: self.total_slices,
            records: self.records.len(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines.next().ok_or_else(|| Error::Data("manifest is empty".into()))?,
        )?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest format {} v{}",
                header.format, header.version
            )));
        }
        let records = lines
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<VolumeRecord>>>()?;
        if records.len() != header.records {
            return Err(Error::Data(format!(
                "manifest header announces {} records, found {}",
                header.records,
                records.len()
            )));
        }
        let m = Self::new(header.layout, header.modalities, header.label_policy, records);
        if m.total_slices != header.total_slices {
            return Err(Error::Data(format!(
                "manifest header announces {} slices, records sum to {}",
                header.total_slices, m.total_slices
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn nifti_stem(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let lower = name.to_ascii_lowercase();
    let stem = lower.strip_suffix(".nii.gz").or_else(|| lower.strip_suffix(".nii"))?;
    Some(name[..stem.len()].to_string())
}

/// The modality tag after the last `_` or `-` of a file stem.
fn modality_tag(stem: &str) -> &str {
    stem.rfind(['_', '-']).map_or(stem, |i| &stem[i + 1..])
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn has_nifti(dir: &Path) -> Result<bool> {
    Ok(list_dir(dir)?.iter().any(|p| p.is_file() && nifti_stem(p).is_some()))
}

/// Subject groups: `(subject_id, [files])`.
fn discover(root: &Path, layout: Layout) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let mut groups: IndexMap<String, Vec<PathBuf>> = IndexMap::new();
    if layout == Layout::Flat {
        for p in list_dir(root)? {
            if let Some(stem) = nifti_stem(&p).filter(|_| p.is_file()) {
                let tag = modality_tag(&stem);
                let id = stem[..stem.len() - tag.len()].trim_end_matches(['_', '-']).to_string();
                if !id.is_empty() {
                    groups.entry(id).or_default().push(p);
                }
            }
        }
    } else {
        // Subject folders sit directly under the root, or one level deeper (e.g. grade folders).
        let mut dirs = Vec::new();
        for p in list_dir(root)?.into_iter().filter(|p| p.is_dir()) {
            if has_nifti(&p)? {
                dirs.push(p);
            } else {
                for q in list_dir(&p)?.into_iter().filter(|q| q.is_dir()) {
                    if has_nifti(&q)? {
                        dirs.push(q);
                    }
                }
            }
        }
        for d in dirs {
            let id = d.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let files = list_dir(&d)?
                .into_iter()
                .filter(|p| p.is_file() && nifti_stem(p).is_some())
                .collect();
            groups.insert(id, files);
        }
    }
    let mut out: Vec<_> = groups.into_iter().collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn header_shape(path: &Path) -> Result<([usize; 3], (f64, f64))> {
    let h = NiftiHeader::from_file(path).map_err(|e| Error::nifti(path, e))?;
    let ndim = h.dim[0] as usize;
    if !(2..=4).contains(&ndim) || (ndim == 4 && h.dim[4] > 1) {
        return Err(Error::nifti(path, format!("expected a 3-D volume, header has {ndim} dimensions")));
    }
    let d = |i: usize| if i <= ndim { (h.dim[i] as usize).max(1) } else { 1 };
    let s = |i: usize| {
        let v = h.pixdim[i] as f64;
        if v.is_finite() && v > 0.0 {
            v
        } else {
            1.0
        }
    };
    Ok(([d(1), d(2), d(3)], (s(1), s(2))))
}

fn build_record(subject_id: String, files: Vec<PathBuf>, modalities: &[String]) -> Result<VolumeRecord> {
    let mut tagged: IndexMap<String, PathBuf> = IndexMap::new();
    for f in files {
        let stem = nifti_stem(&f).expect("filtered");
        tagged.insert(modality_tag(&stem).to_ascii_lowercase(), f);
    }
    let mut modality_paths = IndexMap::new();
    let mut missing = Vec::new();
    for m in modalities {
        match tagged.get(&m.to_ascii_lowercase()) {
            Some(p) => {
                modality_paths.insert(m.clone(), p.clone());
            }
            None => missing.push(m.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingModality {
            subject: subject_id,
            missing,
        });
    }
    let label_path = tagged.get("seg").cloned();
    let mut shape = None;
    let mut spacing = (1.0, 1.0);
    let mut first_name = String::new();
    let all = modality_paths
        .iter()
        .map(|(m, p)| (m.as_str(), p))
        .chain(label_path.iter().map(|p| ("seg", p)));
    for (name, path) in all {
        let (s, sp) = header_shape(path)?;
        match shape {
            None => {
                shape = Some(s);
                spacing = sp;
                first_name = name.to_string();
            }
            Some(first) if first != s => {
                return Err(Error::ShapeMismatch {
                    subject: subject_id,
                    first_name,
                    first: first.to_vec(),
                    other_name: name.to_string(),
                    other: s.to_vec(),
                })
            }
            _ => {}
        }
    }
    let split = if label_path.is_some() { Split::Train } else { Split::Test };
    Ok(VolumeRecord {
        subject_id,
        split,
        modality_paths,
        label_path,
        shape: shape.expect("at least one modality"),
        spacing,
    })
}

/// A record for one subject folder holding `<id>_<modality>.nii.gz` files.
pub fn scan_subject(dir: &Path, modalities: &[String]) -> Result<VolumeRecord> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Data(format!("{} is not a subject folder", dir.display())))?
        .to_string();
    let files = list_dir(dir)?
        .into_iter()
        .filter(|p| p.is_file() && nifti_stem(p).is_some())
        .collect();
    build_record(id, files, modalities)
}

pub fn scan_dataset(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    scan_dataset_with(root, layout, &layout.modalities(), LabelPolicy::default())
}

/// One record per subject, sorted by subject id. Only headers are read.
pub fn scan_dataset_with(
    root: &Path,
    layout: Layout,
    modalities: &[String],
    label_policy: LabelPolicy,
) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let groups = discover(root, layout)?;
    if groups.is_empty() {
        return Err(Error::NoSubjects(root.to_path_buf()));
    }
    let records = groups
        .into_iter()
        .map(|(id, files)| build_record(id, files, modalities))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest::new(layout, modalities.to_vec(), label_policy, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_and_stems() {
        assert_eq!(nifti_stem(Path::new("a/BraTS20_Training_001_flair.nii.gz")).unwrap(), "BraTS20_Training_001_flair");
        assert_eq!(modality_tag("BraTS20_Training_001_flair"), "flair");
        assert_eq!(modality_tag("BraTS-GLI-00000-000-t2f"), "t2f");
        assert!(nifti_stem(Path::new("notes.txt")).is_none());
    }

    #[test]
    fn parse_enums() {
        assert_eq!("brats2021".parse::<Layout>().unwrap(), Layout::Brats2021);
        assert!("brats1999".parse::<Layout>().is_err());
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
    }
}

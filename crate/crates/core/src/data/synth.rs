//! Synthetic data: random elliptical blobs with known masks, as 2-D samples
//! or as BraTS-style NIfTI trees.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use nifti::writer::WriterOptions;
use nifti::NiftiHeader;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::Layout;
use super::samples::SliceSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (h, w) = (h as f64, w as f64);
        let ry = rng.gen_range(0.12..0.28) * h;
        let rx = rng.gen_range(0.12..0.28) * w;
        Self {
            cy: rng.gen_range(ry..h - ry),
            cx: rng.gen_range(rx..w - rx),
            ry,
            rx,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2) <= 1.0
    }
}

/// `n` labelled `[channels, size, size]` slices, each with one or two blobs.
pub fn blob_slices(n: usize, size: usize, channels: usize, seed: u64) -> Vec<SliceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let blobs: Vec<Ellipse> = (0..rng.gen_range(1..=2)).map(|_| Ellipse::random(&mut rng, size, size)).collect();
            let mask = Array2::from_shape_fn((size, size), |(y, x)| {
                u8::from(blobs.iter().any(|b| b.contains(y as f64 + 0.5, x as f64 + 0.5)))
            });
            let gains: Vec<f32> = (0..channels).map(|c| 1.0 + 0.25 * c as f32).collect();
            let image = Array3::from_shape_fn((channels, size, size), |(c, y, x)| {
                let base = if mask[[y, x]] == 1 { gains[c] } else { -0.5 * gains[c] };
                base + rng.gen_range(-0.1f32..0.1)
            });
            SliceSample {
                subject_id: format!("synth{:03}", i),
                slice_index: 0,
                image,
                mask: Some(mask),
                spacing: (1.0, 1.0),
            }
        })
        .collect()
}

/// Where a layout puts a subject and how it names the files.
fn subject_paths(root: &Path, layout: Layout, i: usize) -> (PathBuf, String, char) {
    match layout {
        Layout::Brats2019 => {
            let grade = if i % 4 == 3 { "LGG" } else { "HGG" };
            let id = format!("BraTS19_SYN_{i:03}_1");
            (root.join(grade).join(&id), id, '_')
        }
        Layout::Brats2020 => {
            let id = format!("BraTS20_Training_{:03}", i + 1);
            (root.join(&id), id, '_')
        }
        Layout::Brats2021 => {
            let id = format!("BraTS-GLI-{i:05}-000");
            (root.join(&id), id, '-')
        }
        Layout::Flat => (root.to_path_buf(), format!("case{i:04}"), '_'),
    }
}

fn nifti_writer<'a>(path: &Path, hdr: &'a NiftiHeader) -> WriterOptions<'a> {
    WriterOptions::new(path).reference_header(hdr)
}

fn unit_header() -> NiftiHeader {
    NiftiHeader {
        pixdim: [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        ..NiftiHeader::default()
    }
}

/// Writes `subjects` synthetic subjects of shape `[X, Y, Z]` in the given layout.
///
/// Each subject has a brain ellipsoid with nested tumour labels {1, 2, 4}.
/// With `with_labels = false` no segmentation files are written.
pub fn write_synthetic_dataset(
    root: &Path,
    layout: Layout,
    subjects: usize,
    shape: [usize; 3],
    with_labels: bool,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let modalities = layout.modalities();
    let [nx, ny, nz] = shape;
    let hdr = unit_header();
    for i in 0..subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let (dir, id, sep) = subject_paths(root, layout, i);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let c = [
            rng.gen_range(0.4..0.6) * nx as f64,
            rng.gen_range(0.4..0.6) * ny as f64,
            rng.gen_range(0.4..0.6) * nz as f64,
        ];
        let r = rng.gen_range(0.12..0.25);
        let dist = |x: usize, y: usize, z: usize| {
            let d = |v: usize, cv: f64, n: usize| (v as f64 + 0.5 - cv) / (n as f64);
            (d(x, c[0], nx).powi(2) + d(y, c[1], ny).powi(2) + d(z, c[2], nz).powi(2)).sqrt()
        };
        let labels = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
            let d = dist(x, y, z);
            if d < 0.4 * r {
                4u8
            } else if d < 0.7 * r {
                1
            } else if d < r {
                2
            } else {
                0
            }
        });
        for (k, m) in modalities.iter().enumerate() {
            let vol = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
                if dist(x, y, z) > 0.45 {
                    0.0f32
                } else {
                    let l = labels[[x, y, z]] as f32;
                    100.0 + 20.0 * k as f32 + 30.0 * l + rng.gen_range(0.0f32..5.0)
                }
            });
            let path = dir.join(format!("{id}{sep}{m}.nii.gz"));
            nifti_writer(&path, &hdr).write_nifti(&vol).map_err(|e| Error::nifti(&path, e))?;
        }
        if with_labels {
            let path = dir.join(format!("{id}{sep}seg.nii.gz"));
            nifti_writer(&path, &hdr).write_nifti(&labels).map_err(|e| Error::nifti(&path, e))?;
        }
    }
    Ok(())
}

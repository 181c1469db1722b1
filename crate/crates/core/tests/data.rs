use std::path::Path;

use a4unet::data::synth::write_synthetic_dataset;
use a4unet::data::{
    binarize, load_volume, make_folds, make_splits, normalize_volume, preprocess_volume, scan_dataset, scan_subject,
    slice_volume, DatasetManifest, LabelPolicy, Layout, LoadedVolume, PreprocessConfig, SliceCache, Split,
    VolumeRecord,
};
use a4unet::Error;
use indexmap::IndexMap;
use ndarray::{array, Array3, Array4};
use nifti::writer::WriterOptions;

fn write_vol(path: &Path, a: &Array3<f32>) {
    WriterOptions::new(path).write_nifti(a).unwrap();
}

fn fake_records(n: usize) -> DatasetManifest {
    let records = (0..n)
        .map(|i| VolumeRecord {
            subject_id: format!("s{i:03}"),
            split: Split::Train,
            modality_paths: IndexMap::new(),
            label_path: Some(format!("s{i:03}_seg.nii.gz").into()),
            shape: [240, 240, 155],
            spacing: (1.0, 1.0),
        })
        .collect();
    DatasetManifest::new(Layout::Brats2020, Layout::Brats2020.modalities(), LabelPolicy::default(), records)
}

#[test]
fn brats2019_tree_with_grade_folders() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), Layout::Brats2019, 335, [2, 2, 155], true, 0).unwrap();
    let m = scan_dataset(dir.path(), Layout::Brats2019).unwrap();
    assert_eq!(m.records.len(), 335);
    assert_eq!(m.total_slices, 51_925);
    assert_eq!(m.slices_per_volume, Some(155));
}

#[test]
fn every_layout_scans() {
    for layout in Layout::ALL {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), layout, 3, [4, 4, 5], true, 1).unwrap();
        let m = scan_dataset(dir.path(), layout).unwrap();
        assert_eq!(m.records.len(), 3, "{layout}");
        assert_eq!(m.total_slices, 15);
        for r in &m.records {
            assert_eq!(r.modality_paths.keys().cloned().collect::<Vec<_>>(), layout.modalities());
            assert!(r.label_path.is_some());
        }
    }
}

#[test]
fn empty_root_reports_no_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let err = scan_dataset(dir.path(), Layout::Brats2020).unwrap_err();
    assert!(matches!(err, Error::NoSubjects(_)));
    assert!(err.to_string().contains("no subjects found"));
}

#[test]
fn missing_modality_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), Layout::Brats2020, 1, [4, 4, 3], true, 2).unwrap();
    let subj = dir.path().join("BraTS20_Training_001");
    std::fs::remove_file(subj.join("BraTS20_Training_001_t1ce.nii.gz")).unwrap();
    match scan_dataset(dir.path(), Layout::Brats2020).unwrap_err() {
        Error::MissingModality { subject, missing } => {
            assert_eq!(subject, "BraTS20_Training_001");
            assert_eq!(missing, vec!["t1ce".to_string()]);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn modality_shape_mismatch_names_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let subj = dir.path().join("case");
    std::fs::create_dir(&subj).unwrap();
    for (m, z) in [("flair", 155), ("t1ce", 155), ("t1", 154), ("t2", 155)] {
        write_vol(&subj.join(format!("case_{m}.nii")), &Array3::<f32>::zeros((6, 6, z)));
    }
    let err = scan_subject(&subj, &Layout::Brats2020.modalities()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
    assert!(msg.contains("[6, 6, 155]") && msg.contains("[6, 6, 154]"), "{msg}");
}

#[test]
fn unlabelled_subject_loads_without_labels() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), Layout::Flat, 2, [4, 4, 3], false, 3).unwrap();
    let m = scan_dataset(dir.path(), Layout::Flat).unwrap();
    assert!(m.records.iter().all(|r| r.label_path.is_none() && r.split == Split::Test));
    let v = load_volume(&m.records[0]).unwrap();
    assert!(v.labels.is_none());
    let samples = preprocess_volume(&m.records[0], &PreprocessConfig { size: 8, normalize: true }, LabelPolicy::default()).unwrap();
    assert_eq!(samples.len(), 3);
    assert!(samples.iter().all(|s| s.mask.is_none() && s.image.dim() == (4, 8, 8)));
}

#[test]
fn volume_layout_is_channels_depth_height_width() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), Layout::Brats2020, 1, [240, 240, 155], true, 4).unwrap();
    let m = scan_dataset(dir.path(), Layout::Brats2020).unwrap();
    assert_eq!(m.records[0].shape, [240, 240, 155]);
    let v = load_volume(&m.records[0]).unwrap();
    assert_eq!(v.image.dim(), (4, 155, 240, 240));
    assert_eq!(v.labels.as_ref().unwrap().dim(), (155, 240, 240));
    let samples = slice_volume("x", &v, LabelPolicy::default());
    assert_eq!(samples.len(), 155);
    assert_eq!(samples.iter().map(|s| s.slice_index).collect::<Vec<_>>(), (0..155).collect::<Vec<_>>());
}

#[test]
fn axial_slice_matches_file_voxels() {
    let dir = tempfile::tempdir().unwrap();
    let subj = dir.path().join("p");
    std::fs::create_dir(&subj).unwrap();
    let a = Array3::from_shape_fn((3, 4, 5), |(x, y, z)| (100 * x + 10 * y + z) as f32);
    for m in ["flair", "t1ce", "t1", "t2"] {
        write_vol(&subj.join(format!("p_{m}.nii.gz")), &a);
    }
    let r = scan_subject(&subj, &Layout::Brats2020.modalities()).unwrap();
    let v = load_volume(&r).unwrap();
    assert_eq!(v.image.dim(), (4, 5, 3, 4));
    assert_eq!(v.image[[2, 4, 1, 3]], 134.0);
}

#[test]
fn single_slice_volume() {
    let v = LoadedVolume {
        image: Array4::zeros((4, 1, 8, 8)),
        labels: None,
        header: Default::default(),
        spacing: (1.0, 1.0),
    };
    assert_eq!(slice_volume("a", &v, LabelPolicy::default()).len(), 1);
}

#[test]
fn z_score_over_nonzero_voxels() {
    let mut v = Array4::zeros((2, 1, 2, 2));
    v[[0, 0, 0, 0]] = 10.0;
    v[[0, 0, 1, 1]] = 20.0;
    normalize_volume(&mut v).unwrap();
    assert_eq!(v[[0, 0, 0, 0]], -1.0);
    assert_eq!(v[[0, 0, 1, 1]], 1.0);
    assert_eq!(v[[0, 0, 0, 1]], 0.0);
    assert!(v.index_axis(ndarray::Axis(0), 1).iter().all(|&x| x == 0.0));

    let mut w = Array4::from_shape_vec((1, 1, 1, 4), vec![-1.5f32, -0.5, 0.5, 1.5]).unwrap();
    let std = (w.iter().map(|x| x * x).sum::<f32>() / 4.0).sqrt();
    w.mapv_inplace(|x| x / std);
    let before = w.clone();
    normalize_volume(&mut w).unwrap();
    assert!(w.iter().zip(before.iter()).all(|(a, b)| (a - b).abs() < 1e-6));

    let mut bad = Array4::<f32>::zeros((1, 1, 1, 2));
    bad[[0, 0, 0, 1]] = f32::NAN;
    assert!(matches!(normalize_volume(&mut bad), Err(Error::NonFinite(_))));
}

#[test]
fn whole_tumor_binarization() {
    let m = array![[0u8, 1], [2, 4]];
    assert_eq!(binarize(&m, LabelPolicy::WholeTumorBinary), array![[0u8, 1], [1, 1]]);
    assert_eq!(binarize(&m, LabelPolicy::RawLabels), m);
}

#[test]
fn seeded_subject_splits() {
    let m = fake_records(10);
    let a = make_splits(&m, 7, (0.8, 0.2)).unwrap();
    assert_eq!((a.count(Split::Train), a.count(Split::Val)), (8, 2));
    assert_eq!(a, make_splits(&m, 7, (0.8, 0.2)).unwrap());
    let b = make_splits(&fake_records(194), 0, (0.8, 0.2)).unwrap();
    assert_eq!((b.count(Split::Train), b.count(Split::Val), b.count(Split::Test)), (155, 39, 0));
    let err = make_splits(&m, 7, (0.8, 0.3)).unwrap_err();
    assert!(err.to_string().contains("fractions exceed 1"));
    assert!(make_splits(&fake_records(1), 0, (0.8, 0.2)).is_err());
}

#[test]
fn folds_partition_the_pool() {
    let m = fake_records(12);
    let folds = make_folds(&m, 3, 5).unwrap();
    assert_eq!(folds.len(), 5);
    let mut seen: Vec<String> = folds
        .iter()
        .flat_map(|f| f.split(Split::Val).into_iter().map(|r| r.subject_id.clone()))
        .collect();
    seen.sort();
    assert_eq!(seen, m.records.iter().map(|r| r.subject_id.clone()).collect::<Vec<_>>());
    for f in &folds {
        assert_eq!(f.count(Split::Train) + f.count(Split::Val), 12);
    }
}

#[test]
fn manifest_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), Layout::Brats2021, 3, [4, 4, 6], true, 5).unwrap();
    let m = make_splits(&scan_dataset(dir.path(), Layout::Brats2021).unwrap(), 1, (0.5, 0.5)).unwrap();
    let path = dir.path().join("manifest.jsonl");
    m.save(&path).unwrap();
    assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
}

#[test]
fn cache_returns_identical_samples() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), Layout::Brats2020, 1, [10, 12, 4], true, 6).unwrap();
    let m = scan_dataset(dir.path(), Layout::Brats2020).unwrap();
    let cfg = PreprocessConfig { size: 16, normalize: true };
    let cache = SliceCache::new(dir.path().join("cache")).unwrap();
    let fresh = preprocess_volume(&m.records[0], &cfg, LabelPolicy::default()).unwrap();
    let first = cache.load_or_build(&m.records[0], &cfg, LabelPolicy::default()).unwrap();
    let second = cache.load_or_build(&m.records[0], &cfg, LabelPolicy::default()).unwrap();
    assert_eq!(first, fresh);
    assert_eq!(second, fresh);
    let k1 = SliceCache::key(&m.records[0], &cfg, LabelPolicy::default()).unwrap();
    let k2 = SliceCache::key(&m.records[0], &PreprocessConfig { size: 32, normalize: true }, LabelPolicy::default()).unwrap();
    assert_ne!(k1, k2);
}

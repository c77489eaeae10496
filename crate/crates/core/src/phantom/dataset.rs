//! On-disk dataset layout: `<root>/<patient_id>/<view>_<instant>_{img,mask}.png`,
//! a per-patient `info.json` and a top-level `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EfCategory, FoldAssignment, Frame, PatientRecord, PhantomParams, Quality};
use crate::error::{Error, Result};
use crate::grid::io::{read_image_png, read_json, read_mask_png, write_image_png, write_json, write_mask_png};
use crate::grid::{BoundingBox, Instant, PixelSpacing, View};

/// File name stem of one frame, e.g. `2CH_ED`.
pub fn frame_stem(view: View, instant: Instant) -> String {
    format!("{}_{}", view.name(), instant.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientInfo {
    pub patient_id: String,
    pub dx_mm: f64,
    pub dy_mm: f64,
    /// Tight epicardial box per frame stem.
    pub bbox: BTreeMap<String, [f64; 4]>,
    pub edv: f64,
    pub esv: f64,
    pub ef: f64,
    pub quality: Quality,
    pub ef_category: EfCategory,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub fold: usize,
    pub quality: Quality,
    pub ef_category: EfCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub k: usize,
    pub params: PhantomParams,
    pub records: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<PatientRecord>,
    pub folds: FoldAssignment,
    pub manifest: Manifest,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(
    root: &Path,
    records: &[PatientRecord],
    folds: &FoldAssignment,
    params: &PhantomParams,
    seed: u64,
) -> Result<()> {
    if records.len() != folds.folds.len() {
        return Err(Error::LengthMismatch(records.len(), folds.folds.len()));
    }
    create_dir(root)?;
    let mut entries = Vec::with_capacity(records.len());
    for (r, &fold) in records.iter().zip(&folds.folds) {
        let dir = root.join(&r.patient_id);
        create_dir(&dir)?;
        let mut bbox = BTreeMap::new();
        for f in &r.frames {
            let stem = frame_stem(f.view, f.instant);
            write_image_png(&f.image, &dir.join(format!("{stem}_img.png")))?;
            write_mask_png(&f.mask, &dir.join(format!("{stem}_mask.png")))?;
            bbox.insert(stem, f.bbox.to_array());
        }
        let sp = r.spacing();
        let info = PatientInfo {
            patient_id: r.patient_id.clone(),
            dx_mm: sp.dx,
            dy_mm: sp.dy,
            bbox,
            edv: r.edv,
            esv: r.esv,
            ef: r.ef,
            quality: r.quality,
            ef_category: r.ef_category,
            fold,
        };
        write_json(&info, &dir.join("info.json"))?;
        entries.push(ManifestEntry {
            patient_id: r.patient_id.clone(),
            fold,
            quality: r.quality,
            ef_category: r.ef_category,
        });
    }
    let manifest = Manifest {
        seed,
        k: folds.k,
        params: params.clone(),
        records: entries,
    };
    write_json(&manifest, &root.join("manifest.json"))
}

fn read_patient(dir: &Path) -> Result<(PatientRecord, usize)> {
    let info: PatientInfo = read_json(&dir.join("info.json"))?;
    let spacing = PixelSpacing::new(info.dx_mm, info.dy_mm)?;
    let mut frames = Vec::with_capacity(4);
    for view in View::ALL {
        for instant in Instant::ALL {
            let stem = frame_stem(view, instant);
            let image = read_image_png(&dir.join(format!("{stem}_img.png")), spacing)?;
            let mask = read_mask_png(&dir.join(format!("{stem}_mask.png")), spacing)?;
            let raw = info
                .bbox
                .get(&stem)
                .ok_or_else(|| Error::InvalidValue(format!("{}: no box for {stem}", info.patient_id)))?;
            frames.push(Frame {
                view,
                instant,
                image,
                mask,
                bbox: BoundingBox::from_array(*raw)?,
            });
        }
    }
    let record = PatientRecord {
        patient_id: info.patient_id,
        frames,
        edv: info.edv,
        esv: info.esv,
        ef: info.ef,
        quality: info.quality,
        ef_category: info.ef_category,
    };
    Ok((record, info.fold))
}

/// Loads every record listed in the manifest, in manifest order.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    use rayon::prelude::*;
    let manifest: Manifest = read_json(&root.join("manifest.json"))?;
    if manifest.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dirs: Vec<PathBuf> = manifest.records.iter().map(|e| root.join(&e.patient_id)).collect();
    let loaded: Vec<(PatientRecord, usize)> = dirs.par_iter().map(|d| read_patient(d)).collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(loaded.len());
    let mut folds = Vec::with_capacity(loaded.len());
    for ((r, fold), entry) in loaded.into_iter().zip(&manifest.records) {
        if r.patient_id != entry.patient_id || fold != entry.fold || fold >= manifest.k {
            return Err(Error::InvalidValue(format!(
                "{}: info disagrees with manifest",
                entry.patient_id
            )));
        }
        records.push(r);
        folds.push(fold);
    }
    Ok(Dataset {
        records,
        folds: FoldAssignment { k: manifest.k, folds },
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, stratified_folds};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = PhantomParams::default();
        let records = generate_dataset(&params, 4, 9).unwrap();
        let folds = stratified_folds(&records, 2, 9).unwrap();
        write_dataset(dir.path(), &records, &folds, &params, 9).unwrap();
        assert!(dir.path().join("patient0001/2CH_ED_img.png").exists());
        assert!(dir.path().join("patient0004/4CH_ES_mask.png").exists());
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.records, records);
        assert_eq!(ds.folds, folds);
        assert_eq!(ds.manifest.params, params);
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}

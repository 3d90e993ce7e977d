//! Dataset directory: `meta.json` plus `<id>.vol` (little-endian f32,
//! modality-slice-row-column) and `<id>.lbl` (u8, slice-row-column) per
//! patient.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use svgan_core::data::{Dataset, PatientRecord};

use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, create_dir, read_json, write_json};

pub const FORMAT: &str = "svgan-dataset";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientMeta {
    pub id: String,
    pub disease: usize,
    pub slices: usize,
    pub spacing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub modalities: usize,
    pub height: usize,
    pub width: usize,
    pub num_seg_classes: usize,
    pub num_diseases: usize,
    pub class_names: Vec<String>,
    pub disease_names: Vec<String>,
    pub patients: Vec<PatientMeta>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn save_dataset(dir: &Path, d: &Dataset) -> Result<()> {
    d.validate()?;
    create_dir(dir)?;
    let p0 = &d.patients[0];
    let mut patients = Vec::with_capacity(d.patients.len());
    for p in &d.patients {
        if !valid_id(&p.id) {
            return Err(Error::Validation(format!(
                "patient id {:?} is not a safe file name",
                p.id
            )));
        }
        let mut vol = Vec::with_capacity(p.volume.len() * 4);
        for v in &p.volume {
            vol.extend_from_slice(&v.to_le_bytes());
        }
        atomic_write(&dir.join(format!("{}.vol", p.id)), &vol)?;
        atomic_write(&dir.join(format!("{}.lbl", p.id)), &p.labels)?;
        patients.push(PatientMeta {
            id: p.id.clone(),
            disease: p.disease,
            slices: p.slices,
            spacing: p.spacing,
        });
    }
    let meta = DatasetMeta {
        format: FORMAT.into(),
        version: VERSION,
        modalities: p0.modalities,
        height: p0.height,
        width: p0.width,
        num_seg_classes: d.num_seg_classes,
        num_diseases: d.num_diseases,
        class_names: d.class_names.clone(),
        disease_names: d.disease_names.clone(),
        patients,
    };
    // meta last: a directory without it is never mistaken for a dataset
    write_json(&dir.join("meta.json"), &meta)
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let meta: DatasetMeta = read_json(&path)?;
    if meta.format != FORMAT {
        return Err(Error::format(
            &path,
            format!("format tag {:?}, expected {:?}", meta.format, FORMAT),
        ));
    }
    if meta.version != VERSION {
        return Err(Error::format(
            &path,
            format!("version {}, expected {}", meta.version, VERSION),
        ));
    }
    Ok(meta)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = load_meta(dir)?;
    let plane = meta.height * meta.width;
    let mut patients = Vec::with_capacity(meta.patients.len());
    for pm in &meta.patients {
        if !valid_id(&pm.id) {
            return Err(Error::format(
                dir.join("meta.json"),
                format!("bad patient id {:?}", pm.id),
            ));
        }
        let vp = dir.join(format!("{}.vol", pm.id));
        let bytes = fs::read(&vp).map_err(|e| Error::io(&vp, e))?;
        let expect = meta.modalities * pm.slices * plane * 4;
        if bytes.len() != expect {
            return Err(Error::format(
                &vp,
                format!("{} bytes, expected {} (truncated or wrong extent)", bytes.len(), expect),
            ));
        }
        let volume: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let lp = dir.join(format!("{}.lbl", pm.id));
        let labels = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
        if labels.len() != pm.slices * plane {
            return Err(Error::format(
                &lp,
                format!(
                    "{} bytes, expected {} (truncated or wrong extent)",
                    labels.len(),
                    pm.slices * plane
                ),
            ));
        }
        patients.push(PatientRecord {
            id: pm.id.clone(),
            modalities: meta.modalities,
            slices: pm.slices,
            height: meta.height,
            width: meta.width,
            volume,
            labels,
            disease: pm.disease,
            spacing: pm.spacing,
        });
    }
    let d = Dataset {
        num_seg_classes: meta.num_seg_classes,
        num_diseases: meta.num_diseases,
        class_names: meta.class_names,
        disease_names: meta.disease_names,
        patients,
    };
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use svgan_core::data::{generate_phantoms, PhantomConfig};

    fn sample() -> Dataset {
        generate_phantoms(&PhantomConfig {
            num_patients: 3,
            slices: 2,
            height: 16,
            width: 16,
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = sample();
        save_dataset(dir.path(), &d).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn truncated_volume_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &sample()).unwrap();
        let p = dir.path().join("P0001.vol");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let e = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(e, Error::Format { .. }), "{e}");
        assert!(e.to_string().contains("P0001.vol"));
    }

    #[test]
    fn bad_label_names_patient_and_slice() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &sample()).unwrap();
        let p = dir.path().join("P0002.lbl");
        let mut bytes = fs::read(&p).unwrap();
        bytes[256 + 7] = 3;
        fs::write(&p, &bytes).unwrap();
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("P0002") && msg.contains("slice 1"), "{msg}");
    }

    #[test]
    fn wrong_format_tag() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &sample()).unwrap();
        let p = dir.path().join("meta.json");
        let text = fs::read_to_string(&p).unwrap().replace(FORMAT, "something-else");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}

//! Dataset directories: one PGM per record plus `labels.csv`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{preprocess, read_pgm, write_pgm, Pgm, SampleRecord};
use crate::error::{Error, Result};

pub const LABELS_CSV: &str = "labels.csv";
pub const LABELS_HEADER: &str = "id,disease,confounder";

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id: String,
    disease: u8,
    confounder: u8,
}

pub fn save_dataset(records: &[SampleRecord], dir: &Path, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let comments = [format!("seed={seed}")];
    records.par_iter().try_for_each(|r| {
        let pgm = Pgm::from_image(&r.image)?;
        write_pgm(&dir.join(format!("{}.pgm", r.id)), &pgm, &comments)
    })?;
    let path = dir.join(LABELS_CSV);
    let mut out = format!("# seed={seed}\n{LABELS_HEADER}\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.id, r.disease, r.confounder));
    }
    fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

/// Loads and preprocesses every record to `image_size`.
pub fn load_dataset(dir: &Path, image_size: usize) -> Result<Vec<SampleRecord>> {
    let path = dir.join(LABELS_CSV);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::format(&path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != LABELS_HEADER {
        return Err(Error::format(&path, format!("header must be \"{LABELS_HEADER}\"")));
    }
    let rows = reader
        .deserialize::<LabelRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(&path, e.to_string()))?;
    if let Some(r) = rows.iter().find(|r| r.disease > 1 || r.confounder > 1) {
        return Err(Error::format(&path, format!("labels of {} must be 0 or 1", r.id)));
    }
    let pgm_count = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .count();
    if pgm_count != rows.len() {
        return Err(Error::format(
            &path,
            format!("{} label rows but {pgm_count} PGM files", rows.len()),
        ));
    }
    rows.into_par_iter()
        .map(|r| {
            let pgm = read_pgm(&dir.join(format!("{}.pgm", r.id)))?;
            Ok(SampleRecord {
                image: preprocess(&pgm, image_size)?,
                id: r.id,
                disease: r.disease,
                confounder: r.confounder,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, SynthConfig};

    fn small() -> Vec<SampleRecord> {
        gen_dataset(&SynthConfig {
            n_samples: 12,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = small();
        save_dataset(&recs, dir.path(), 4).unwrap();
        let back = load_dataset(dir.path(), 32).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!((&a.id, a.disease, a.confounder), (&b.id, b.disease, b.confounder));
            let worst = a
                .image
                .data()
                .iter()
                .zip(b.image.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(worst <= 2.0 / 255.0 + 1e-6, "{worst}");
        }
        let csv = fs::read_to_string(dir.path().join(LABELS_CSV)).unwrap();
        assert!(csv.starts_with("# seed=4\nid,disease,confounder\n"));
    }

    #[test]
    fn missing_labels_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), 32), Err(Error::Io { .. })));
        save_dataset(&small(), dir.path(), 4).unwrap();
        fs::remove_file(dir.path().join("000003.pgm")).unwrap();
        assert!(matches!(load_dataset(dir.path(), 32), Err(Error::Format { .. })));
    }
}

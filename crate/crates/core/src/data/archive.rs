//! Directory archive: a JSON manifest plus one raw little-endian file per
//! array.
//!
//! | file    | dtype | shape     |
//! |---------|-------|-----------|
//! | `x.f32` | f32   | `[N,T,D]` |
//! | `m.u8`  | u8    | `[N,T,D]` |
//! | `y.u8`  | u8    | `[N,L]`   |
//! | `s.i32` | i32   | `[N,M]`   |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Cohort, FeatureManifest, PatientRecord, Provenance, Splits, Standardizer, StaticVocabulary};
use crate::error::{Error, Result};

pub const ARCHIVE_MANIFEST: &str = "manifest.json";
const FORMAT: &str = "healthgen-archive";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    file: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchiveManifest {
    format: String,
    version: u32,
    records: usize,
    steps: usize,
    features: usize,
    arrays: BTreeMap<String, ArrayEntry>,
    manifest: FeatureManifest,
    vocab: StaticVocabulary,
    label_names: Vec<String>,
    standardizer: Standardizer,
    splits: Splits,
    record_ids: Vec<String>,
    provenance: Provenance,
}

pub fn save_archive(cohort: &Cohort, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let n = cohort.len();
    let (t, d) = (cohort.manifest.steps, cohort.manifest.features());
    let l = cohort.label_names.len();
    let m_static = cohort.vocab.variables.len();

    let mut x = Vec::with_capacity(n * t * d * 4);
    let mut m = Vec::with_capacity(n * t * d);
    let mut y = Vec::with_capacity(n * l);
    let mut s = Vec::with_capacity(n * m_static * 4);
    for r in &cohort.records {
        for v in r.x.iter() {
            x.extend_from_slice(&v.to_le_bytes());
        }
        m.extend(r.m.iter().copied());
        y.extend(r.y.iter().copied());
        for &c in &r.s {
            s.extend_from_slice(&(c as i32).to_le_bytes());
        }
    }

    let mut arrays = BTreeMap::new();
    for (name, file, dtype, shape, bytes) in [
        ("x", "x.f32", "f32", vec![n, t, d], &x),
        ("m", "m.u8", "u8", vec![n, t, d], &m),
        ("y", "y.u8", "u8", vec![n, l], &y),
        ("s", "s.i32", "i32", vec![n, m_static], &s),
    ] {
        let p = path.join(file);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        arrays.insert(
            name.to_string(),
            ArrayEntry {
                file: file.into(),
                dtype: dtype.into(),
                shape,
            },
        );
    }

    let manifest = ArchiveManifest {
        format: FORMAT.into(),
        version: 1,
        records: n,
        steps: t,
        features: d,
        arrays,
        manifest: cohort.manifest.clone(),
        vocab: cohort.vocab.clone(),
        label_names: cohort.label_names.clone(),
        standardizer: cohort.standardizer.clone(),
        splits: cohort.splits.clone(),
        record_ids: cohort.records.iter().map(|r| r.id.clone()).collect(),
        provenance: cohort.provenance.clone(),
    };
    let p = path.join(ARCHIVE_MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn load_archive(path: &Path) -> Result<Cohort> {
    let corrupt = |array: &str, reason: String| Error::CorruptArchive {
        path: path.to_path_buf(),
        array: array.to_string(),
        reason,
    };
    let mp = path.join(ARCHIVE_MANIFEST);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let man: ArchiveManifest =
        serde_json::from_str(&text).map_err(|e| corrupt("manifest", e.to_string()))?;
    if man.format != FORMAT || man.version != 1 {
        return Err(corrupt("manifest", format!("unsupported format {} v{}", man.format, man.version)));
    }
    let (n, t, d) = (man.records, man.steps, man.features);
    if man.manifest.features() != d || man.manifest.steps != t {
        return Err(corrupt(
            "manifest",
            format!(
                "feature manifest is {}x{}, header says {t}x{d}",
                man.manifest.steps,
                man.manifest.features()
            ),
        ));
    }
    let l = man.label_names.len();
    let ms = man.vocab.variables.len();
    if man.record_ids.len() != n {
        return Err(corrupt("record_ids", format!("{} ids for {n} records", man.record_ids.len())));
    }

    let read = |name: &str, dtype: &str, shape: &[usize], width: usize| -> Result<Vec<u8>> {
        let entry = man
            .arrays
            .get(name)
            .ok_or_else(|| corrupt(name, "missing from manifest".into()))?;
        if entry.dtype != dtype || entry.shape != shape {
            return Err(corrupt(
                name,
                format!("declared {} {:?}, expected {dtype} {shape:?}", entry.dtype, entry.shape),
            ));
        }
        let p = path.join(&entry.file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let want = shape.iter().product::<usize>() * width;
        if bytes.len() != want {
            return Err(corrupt(name, format!("{} bytes on disk, expected {want}", bytes.len())));
        }
        Ok(bytes)
    };
    let xb = read("x", "f32", &[n, t, d], 4)?;
    let mb = read("m", "u8", &[n, t, d], 1)?;
    let yb = read("y", "u8", &[n, l], 1)?;
    let sb = read("s", "i32", &[n, ms], 4)?;

    let cell = t * d;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let x: Vec<f32> = xb[i * cell * 4..(i + 1) * cell * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = mb[i * cell..(i + 1) * cell].to_vec();
        if m.iter().any(|&v| v > 1) {
            return Err(corrupt("m", format!("record {i} has a non-binary mask")));
        }
        let y = yb[i * l..(i + 1) * l].to_vec();
        if y.iter().any(|&v| v > 1) {
            return Err(corrupt("y", format!("record {i} has a non-binary label")));
        }
        let s: Vec<u32> = sb[i * ms * 4..(i + 1) * ms * 4]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .map(|v| u32::try_from(v).unwrap_or(u32::MAX))
            .collect();
        for (j, (&c, var)) in s.iter().zip(&man.vocab.variables).enumerate() {
            if c as usize >= var.categories.len() {
                return Err(corrupt("s", format!("record {i} variable {j} code out of range")));
            }
        }
        records.push(PatientRecord {
            id: man.record_ids[i].clone(),
            x: Array2::from_shape_vec((t, d), x).unwrap(),
            m: Array2::from_shape_vec((t, d), m).unwrap(),
            s,
            y,
        });
    }
    man.splits
        .check_partition(n)
        .map_err(|e| corrupt("splits", e.to_string()))?;
    Ok(Cohort {
        records,
        manifest: man.manifest,
        vocab: man.vocab,
        label_names: man.label_names,
        standardizer: man.standardizer,
        splits: man.splits,
        provenance: man.provenance,
    })
}

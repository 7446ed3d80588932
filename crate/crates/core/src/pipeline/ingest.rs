//! CSV adapter for pre-extracted measurement tables.
//!
//! Expected headers:
//!
//! - events: `patient_id,timestamp_hours,feature_name,value`
//! - statics: `patient_id,var_name,category`
//! - interventions: `patient_id,step,label_name,active`
//!
//! One stream is produced per patient appearing in the events file, in order
//! of first appearance.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::grid::{Event, RawEventStream};
use crate::data::{FeatureManifest, StaticVocabulary};
use crate::error::{Error, Result};

fn open(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let got = reader.headers().map_err(|e| ingest_err(path, e.to_string()))?.clone();
    if !got.is_empty() && got.iter().ne(header.iter().copied()) {
        return Err(ingest_err(
            path,
            format!("header {:?}, expected {:?}", got.iter().collect::<Vec<_>>(), header),
        ));
    }
    Ok(reader)
}

fn ingest_err(path: &Path, reason: String) -> Error {
    Error::Ingest {
        file: path.display().to_string(),
        reason,
    }
}

fn rows(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = open(path, header)?;
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| ingest_err(path, e.to_string()))?;
            let line = r.position().map_or(0, |p| p.line());
            Ok((line, r))
        })
        .collect()
}

fn number<T: std::str::FromStr>(path: &Path, line: u64, column: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| ingest_err(path, format!("line {line}: {column} {raw:?} is not numeric")))
}

pub fn ingest_csv(
    events_path: &Path,
    statics_path: &Path,
    interventions_path: &Path,
    manifest: &FeatureManifest,
    vocab: &StaticVocabulary,
    label_names: &[String],
) -> Result<Vec<RawEventStream>> {
    let mut order: Vec<String> = Vec::new();
    let mut events: HashMap<String, Vec<Event>> = HashMap::new();
    let mut unknown = BTreeSet::new();
    for (line, r) in rows(events_path, &["patient_id", "timestamp_hours", "feature_name", "value"])? {
        let Some(feature) = manifest.feature_index(&r[2]) else {
            unknown.insert(r[2].to_string());
            continue;
        };
        let event = Event {
            time_hours: number(events_path, line, "timestamp_hours", &r[1])?,
            feature,
            value: number(events_path, line, "value", &r[3])?,
        };
        if !events.contains_key(&r[0]) {
            order.push(r[0].to_string());
        }
        events.entry(r[0].to_string()).or_default().push(event);
    }
    if !unknown.is_empty() {
        return Err(ingest_err(
            events_path,
            format!("unknown feature names: {}", unknown.into_iter().collect::<Vec<_>>().join(", ")),
        ));
    }

    let mut statics: HashMap<String, Vec<Option<u32>>> = HashMap::new();
    for (line, r) in rows(statics_path, &["patient_id", "var_name", "category"])? {
        let var = vocab
            .variable_index(&r[1])
            .ok_or_else(|| ingest_err(statics_path, format!("line {line}: unknown static variable {:?}", &r[1])))?;
        let code = vocab.variables[var]
            .categories
            .iter()
            .position(|c| c == &r[2])
            .ok_or_else(|| {
                ingest_err(
                    statics_path,
                    format!("line {line}: unknown category {:?} for {}", &r[2], &r[1]),
                )
            })?;
        let slot = &mut statics
            .entry(r[0].to_string())
            .or_insert_with(|| vec![None; vocab.variables.len()])[var];
        if slot.is_some() {
            return Err(ingest_err(
                statics_path,
                format!("line {line}: duplicate assignment of {} for patient {}", &r[1], &r[0]),
            ));
        }
        *slot = Some(code as u32);
    }

    let mut interventions: HashMap<String, Vec<Vec<u8>>> = HashMap::new();
    for (line, r) in rows(interventions_path, &["patient_id", "step", "label_name", "active"])? {
        let label = label_names.iter().position(|l| l == &r[2]).ok_or_else(|| {
            ingest_err(interventions_path, format!("line {line}: unknown label {:?}", &r[2]))
        })?;
        let step: usize = number(interventions_path, line, "step", &r[1])?;
        let active: u8 = number(interventions_path, line, "active", &r[3])?;
        if active > 1 {
            return Err(ingest_err(interventions_path, format!("line {line}: active must be 0 or 1")));
        }
        let seqs = interventions
            .entry(r[0].to_string())
            .or_insert_with(|| vec![Vec::new(); label_names.len()]);
        let seq = &mut seqs[label];
        if seq.len() <= step {
            seq.resize(step + 1, 0);
        }
        seq[step] = active;
    }

    order
        .into_iter()
        .map(|id| {
            let codes = statics
                .remove(&id)
                .unwrap_or_else(|| vec![None; vocab.variables.len()]);
            let codes = codes
                .into_iter()
                .enumerate()
                .map(|(j, c)| {
                    c.ok_or_else(|| {
                        ingest_err(
                            statics_path,
                            format!("patient {id} has no {} assignment", vocab.variables[j].name),
                        )
                    })
                })
                .collect::<Result<Vec<u32>>>()?;
            let mut seqs = interventions
                .remove(&id)
                .unwrap_or_else(|| vec![Vec::new(); label_names.len()]);
            let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
            seqs.iter_mut().for_each(|s| s.resize(len, 0));
            Ok(RawEventStream {
                events: events.remove(&id).unwrap_or_default(),
                patient_id: id,
                interventions: seqs,
                statics: codes,
            })
        })
        .collect()
}

//! Line-oriented dataset files: one JSON object per patient,
//! `{"patient_id": "...", "visits": [["code", ...], ...]}` with visits in
//! chronological order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sequela_core::ehr::{Dataset, LoadStats};

#[derive(Debug, Serialize, Deserialize)]
struct PatientLine {
    patient_id: String,
    visits: Vec<Vec<String>>,
}

/// Read a JSONL dataset. Malformed lines fail with their line number;
/// patients with fewer than two visits are skipped and counted.
pub fn load_dataset(path: &Path) -> Result<(Dataset, LoadStats)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let reader = BufReader::new(file);
    let mut records: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.with_context(|| format!("reading {} line {}", path.display(), idx + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PatientLine = serde_json::from_str(&line)
            .with_context(|| format!("parsing {} line {}", path.display(), idx + 1))?;
        records.push((parsed.patient_id, parsed.visits));
    }
    let (dataset, stats) = Dataset::from_patient_codes(records)?;
    if stats.skipped_too_few_visits > 0 {
        log::warn!(
            "skipped {} patient(s) with fewer than 2 visits while loading {}",
            stats.skipped_too_few_visits,
            path.display()
        );
    }
    Ok((dataset, stats))
}

/// Write a dataset in the same JSONL format; loading the result rebuilds
/// an identical dataset (same vocabulary order, same visits).
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut writer = BufWriter::new(file);
    for patient in ds.patients() {
        let line = PatientLine {
            patient_id: patient.patient_id.clone(),
            visits: ds
                .patient_code_strings(patient)
                .into_iter()
                .map(|visit| visit.into_iter().map(str::to_owned).collect())
                .collect(),
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Export a co-occurrence graph as `(i, j, weight)` CSV triples.
pub fn save_graph_csv(graph: &sequela_core::cograph::CoGraph, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut writer = BufWriter::new(file);
    writeln!(writer, "i,j,weight")?;
    for (i, j, w) in graph.to_triples() {
        writeln!(writer, "{i},{j},{w}")?;
    }
    writer.flush()?;
    Ok(())
}

//! File formats: runs and tables as CSV, everything else as JSON.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit::TrainingRun;

/// Reads runs from CSV with header `n_dense,d_tokens,experts,val_loss`.
pub fn read_runs<R: Read>(reader: R) -> Result<Vec<TrainingRun>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in ["n_dense", "d_tokens", "experts", "val_loss"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Parse(format!("runs CSV is missing column `{col}`")));
        }
    }
    let mut runs = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let run: TrainingRun = row.map_err(|e| Error::Parse(format!("runs CSV row {}: {e}", i + 1)))?;
        run.validate()?;
        runs.push(run);
    }
    Ok(runs)
}

pub fn read_runs_file(path: &Path) -> Result<Vec<TrainingRun>> {
    read_runs(open(path)?)
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Parse(format!("cannot open {}: {e}", path.display())))
}

pub fn write_csv<T: Serialize, W: Write>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized, W: Write>(mut writer: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    Ok(())
}

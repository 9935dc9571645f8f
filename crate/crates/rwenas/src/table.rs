//! Benchmark tables as `genome,accuracy` CSV.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rwenas_core::bench::{BenchError, BenchmarkTable};
use rwenas_core::genome::{Genome, SearchSpace};

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: {source}")]
    Entry { line: u64, source: BenchError },
    #[error("line {line}: duplicate genome {genome}")]
    Duplicate { line: u64, genome: String },
    #[error("benchmark table is empty")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(serde::Deserialize)]
struct Row {
    genome: String,
    accuracy: f64,
}

pub fn read_table(reader: impl Read, space: &SearchSpace) -> Result<BenchmarkTable, TableError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| TableError::Parse { line: 1, message: e.to_string() })?.clone();
    if headers.is_empty() {
        return Err(TableError::Empty);
    }
    if headers.iter().collect::<Vec<_>>() != ["genome", "accuracy"] {
        return Err(TableError::Parse { line: 1, message: format!("expected header `genome,accuracy`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")) });
    }
    let mut table = BenchmarkTable::new(space.clone());
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            TableError::Parse { line, message: e.to_string() }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Row =
            record.deserialize(Some(&headers)).map_err(|e| TableError::Parse { line, message: e.to_string() })?;
        let genome: Genome = row
            .genome
            .parse()
            .map_err(|e| TableError::Parse { line, message: format!("genome `{}`: {e}", row.genome) })?;
        if table.get(&genome).is_some() {
            return Err(TableError::Duplicate { line, genome: row.genome });
        }
        table.insert(genome, row.accuracy).map_err(|source| TableError::Entry { line, source })?;
    }
    if table.is_empty() {
        return Err(TableError::Empty);
    }
    Ok(table)
}

pub fn load_table(path: &Path, space: &SearchSpace) -> Result<BenchmarkTable, TableError> {
    let file = File::open(path).map_err(|source| TableError::Io { path: path.to_owned(), source })?;
    read_table(file, space)
}

/// Writes entries in canonical genome order.
pub fn write_table(writer: impl Write, table: &BenchmarkTable) -> Result<(), TableError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["genome", "accuracy"])?;
    for (genome, acc) in table.iter() {
        w.write_record([genome.to_string(), acc.to_string()])?;
    }
    w.flush().map_err(|source| TableError::Io { path: PathBuf::from("<table>"), source })?;
    Ok(())
}

pub fn save_table(path: &Path, table: &BenchmarkTable) -> Result<(), TableError> {
    let file = File::create(path).map_err(|source| TableError::Io { path: path.to_owned(), source })?;
    write_table(file, table)
}

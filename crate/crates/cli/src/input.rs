use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dagconv::graph::{parse_dag_dsl, parse_nb201, ArchGraph};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};

/// Lines processed per parallel batch; output order is restored per batch.
const PARALLEL_CHUNK: usize = 4096;

/// A per-row failure that does not stop the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub code: &'static str,
    pub message: String,
}

pub fn open_input(path: Option<&Path>) -> CliResult<Box<dyn BufRead>> {
    match path {
        None => Ok(Box::new(BufReader::new(io::stdin()))),
        Some(p) if p == Path::new("-") => Ok(Box::new(BufReader::new(io::stdin()))),
        Some(p) => {
            let f = File::open(p)
                .map_err(|e| CliError::input("Io", format!("{}: {e}", p.display())))?;
            Ok(Box::new(BufReader::new(f)))
        }
    }
}

pub fn open_output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    match path {
        None => Ok(Box::new(BufWriter::new(io::stdout()))),
        Some(p) => {
            let f = File::create(p)
                .map_err(|e| CliError::input("Io", format!("{}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

pub fn read_file(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::config("Io", format!("{what} {}: {e}", path.display())))
}

/// Blank lines and lines starting with `#` carry no architecture.
pub fn is_data_line(line: &str) -> bool {
    let t = line.trim();
    !t.is_empty() && !t.starts_with('#')
}

/// An NB-201 string, or `@path` naming a TOML graph file.
pub fn resolve_arch(line: &str) -> Result<ArchGraph, RowError> {
    let line = line.trim();
    let parsed = match line.strip_prefix('@') {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| RowError {
                code: "Io",
                message: format!("{path}: {e}"),
            })?;
            parse_dag_dsl(&text)
        }
        None => parse_nb201(line),
    };
    parsed.map_err(|e| RowError {
        code: e.code(),
        message: e.to_string(),
    })
}

pub fn load_graph_file(path: &PathBuf) -> CliResult<ArchGraph> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::input("Io", format!("{}: {e}", path.display())))?;
    parse_dag_dsl(&text).map_err(|e| CliError::input(e.code(), e))
}

/// Feed every data line through `work` and hand results to `sink` in input
/// order. With `parallel`, batches of lines are computed on the rayon pool.
pub fn stream_lines<T, W, S>(
    reader: Box<dyn BufRead>,
    parallel: bool,
    work: W,
    mut sink: S,
) -> CliResult<()>
where
    T: Send,
    W: Fn(&str) -> T + Sync,
    S: FnMut(&str, T) -> CliResult<()>,
{
    let mut lines = reader.lines();
    if !parallel {
        for line in lines {
            let line = line?;
            if is_data_line(&line) {
                let out = work(&line);
                sink(&line, out)?;
            }
        }
        return Ok(());
    }
    loop {
        let mut batch = Vec::with_capacity(PARALLEL_CHUNK);
        for line in lines.by_ref() {
            let line = line?;
            if is_data_line(&line) {
                batch.push(line);
                if batch.len() == PARALLEL_CHUNK {
                    break;
                }
            }
        }
        if batch.is_empty() {
            return Ok(());
        }
        let results: Vec<T> = batch.par_iter().map(|l| work(l)).collect();
        for (line, out) in batch.iter().zip(results) {
            sink(line, out)?;
        }
    }
}

/// Counts keyed by name, printed as sorted `prefix.key=n` lines.
#[derive(Debug, Default)]
pub struct Tally(BTreeMap<String, usize>);

impl Tally {
    pub fn add(&mut self, key: &str) {
        *self.0.entry(key.to_string()).or_default() += 1;
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }

    pub fn report(&self, prefix: &str) {
        for (k, n) in &self.0 {
            eprintln!("{prefix}.{k}={n}");
        }
    }
}

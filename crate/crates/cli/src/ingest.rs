//! Shard CSV ingestion: one file per server, a header row, a `y` column and
//! one column per covariate.

use std::path::{Path, PathBuf};

use robagg::Observation;

use crate::error::{CliError, Result};

/// Name of the response column.
pub const RESPONSE: &str = "y";

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub path: PathBuf,
    /// Full header, as written in the file.
    pub header: Vec<String>,
    /// Covariate names in the order they enter `x`.
    pub covariates: Vec<String>,
    pub observations: Vec<Observation>,
}

/// Reads one shard. Cells are trimmed; every cell must parse as a finite
/// number.
pub fn read_shard(path: &Path) -> Result<Shard> {
    let file = std::fs::File::open(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let csv_err = |source| CliError::Csv { path: path.to_path_buf(), source };
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();

    let bad_header = |message: String| CliError::BadHeader { path: path.to_path_buf(), message };
    let y_cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| *h == RESPONSE).map(|(i, _)| i).collect();
    let y_col = match y_cols.as_slice() {
        [i] => *i,
        [] => return Err(bad_header(format!("no `{RESPONSE}` column in header {header:?}"))),
        _ => return Err(bad_header(format!("`{RESPONSE}` appears more than once"))),
    };
    if header.len() < 2 {
        return Err(bad_header("at least one covariate column is required".into()));
    }
    if let Some(blank) = header.iter().position(|h| h.is_empty()) {
        return Err(bad_header(format!("column {} has an empty name", blank + 1)));
    }
    let covariates: Vec<String> =
        header.iter().enumerate().filter(|(i, _)| *i != y_col).map(|(_, h)| h.clone()).collect();

    let mut observations = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let mut y = 0.0;
        let mut x = Vec::with_capacity(covariates.len());
        for (i, cell) in record.iter().enumerate() {
            let value = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| CliError::NonNumeric {
                path: path.to_path_buf(),
                line,
                column: header[i].clone(),
                value: cell.to_string(),
            })?;
            if i == y_col {
                y = value;
            } else {
                x.push(value);
            }
        }
        observations.push(Observation::new(y, x));
    }
    if observations.is_empty() {
        return Err(CliError::EmptyShard { path: path.to_path_buf() });
    }
    Ok(Shard { path: path.to_path_buf(), header, covariates, observations })
}

/// Reads every shard and checks that all headers match the first.
pub fn read_shards(paths: &[PathBuf]) -> Result<Vec<Shard>> {
    if paths.is_empty() {
        return Err(CliError::Usage("no shard files given".into()));
    }
    let shards = paths.iter().map(|p| read_shard(p)).collect::<Result<Vec<_>>>()?;
    let expected = &shards[0].header;
    for shard in &shards[1..] {
        if &shard.header != expected {
            return Err(CliError::HeaderMismatch {
                path: shard.path.clone(),
                expected: expected.clone(),
                found: shard.header.clone(),
            });
        }
    }
    Ok(shards)
}

/// Writes observations as a shard CSV with columns `y,x1,..,xp`.
pub fn write_shard(path: &Path, data: &[Observation]) -> Result<()> {
    let io_err = |source| CliError::Io { path: path.to_path_buf(), source };
    let csv_err = |source| CliError::Csv { path: path.to_path_buf(), source };
    let p = data.first().map_or(0, |o| o.x.len());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec![RESPONSE.to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for obs in data {
        let row: Vec<String> = std::iter::once(obs.y).chain(obs.x.iter().copied()).map(|v| format!("{v:e}")).collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err)
}

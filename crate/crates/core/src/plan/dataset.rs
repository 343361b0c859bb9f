use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, DataType, Field, Scalar, Schema};

/// A toy input table, cut into `batch_rows`-row splits. Splits are dealt to
/// reader channels round-robin: split `j` is read by channel `j % C` as
/// sequence number `j / C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: Schema,
    pub batch_rows: usize,
    pub source: DatasetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Inline {
        rows: Vec<Vec<Scalar>>,
    },
    /// CSV file with a header row; path is relative to the plan file.
    Csv {
        path: String,
    },
    /// Deterministic synthetic rows.
    Generated {
        rows: usize,
        seed: u64,
        columns: Vec<ColumnGen>,
    },
}

/// Value distribution for one generated column. Integers are uniform in
/// `[0, distinct)`, strings are `"v<n>"` with `n` in the same range and
/// floats are uniform in `[0, 100)` rounded to cents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnGen {
    pub name: String,
    #[serde(rename = "type")]
    pub data_type: DataType,
    #[serde(default = "default_distinct")]
    pub distinct: u64,
}

fn default_distinct() -> u64 {
    1000
}

impl Dataset {
    pub fn inline(schema: Schema, batch_rows: usize, rows: Vec<Vec<Scalar>>) -> Self {
        Self {
            schema,
            batch_rows,
            source: DatasetSource::Inline { rows },
        }
    }

    pub fn generated(rows: usize, batch_rows: usize, seed: u64, columns: Vec<ColumnGen>) -> Self {
        let schema = Schema::new(
            columns
                .iter()
                .map(|c| Field::new(c.name.clone(), c.data_type))
                .collect(),
        );
        Self {
            schema,
            batch_rows,
            source: DatasetSource::Generated { rows, seed, columns },
        }
    }

    /// Materializes the dataset as a list of splits.
    pub fn load(&self, base_dir: Option<&Path>) -> Result<Vec<Batch>, String> {
        if self.batch_rows == 0 {
            return Err("batch_rows must be positive".into());
        }
        let rows = match &self.source {
            DatasetSource::Inline { rows } => rows
                .iter()
                .map(|r| coerce_row(&self.schema, r.clone()))
                .collect::<Result<Vec<_>, _>>()?,
            DatasetSource::Csv { path } => {
                let full = match base_dir {
                    Some(dir) => dir.join(path),
                    None => Path::new(path).to_path_buf(),
                };
                read_csv(&self.schema, &full)?
            }
            DatasetSource::Generated { rows, seed, columns } => generate(*rows, *seed, columns),
        };
        rows.chunks(self.batch_rows)
            .map(|chunk| Batch::from_rows(self.schema.clone(), chunk).map_err(|e| e.to_string()))
            .collect()
    }
}

fn coerce_row(schema: &Schema, row: Vec<Scalar>) -> Result<Vec<Scalar>, String> {
    if row.len() != schema.len() {
        return Err(format!(
            "row has {} values, schema has {} columns",
            row.len(),
            schema.len()
        ));
    }
    row.into_iter()
        .zip(&schema.fields)
        .map(|(v, f)| match (v, f.data_type) {
            (Scalar::Int64(i), DataType::Float64) => Ok(Scalar::Float64(i as f64)),
            (v, t) if v.data_type() == t => Ok(v),
            (v, t) => Err(format!("value {v} in column `{}` is not {t:?}", f.name)),
        })
        .collect()
}

fn read_csv(schema: &Schema, path: &Path) -> Result<Vec<Vec<Scalar>>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = reader
        .headers()
        .map_err(|e| format!("{}: {e}", path.display()))?
        .clone();
    let positions: Vec<usize> = schema
        .fields
        .iter()
        .map(|f| {
            headers
                .iter()
                .position(|h| h == f.name)
                .ok_or_else(|| format!("{}: missing column `{}`", path.display(), f.name))
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format!("{}: {e}", path.display()))?;
        let mut row = Vec::with_capacity(schema.len());
        for (field, &pos) in schema.fields.iter().zip(&positions) {
            let raw = record.get(pos).unwrap_or_default();
            let value = match field.data_type {
                DataType::Int64 => raw.trim().parse().map(Scalar::Int64).map_err(|e| e.to_string()),
                DataType::Float64 => raw.trim().parse().map(Scalar::Float64).map_err(|e| e.to_string()),
                DataType::Utf8 => Ok(Scalar::Utf8(raw.to_string())),
            }
            .map_err(|e| format!("{} row {}: column `{}`: {e}", path.display(), line + 2, field.name))?;
            row.push(value);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn generate(rows: usize, seed: u64, columns: &[ColumnGen]) -> Vec<Vec<Scalar>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| {
            columns
                .iter()
                .map(|c| {
                    let n = c.distinct.max(1);
                    match c.data_type {
                        DataType::Int64 => Scalar::Int64(rng.gen_range(0..n) as i64),
                        DataType::Float64 => Scalar::Float64(f64::from(rng.gen_range(0..10_000u32)) / 100.0),
                        DataType::Utf8 => Scalar::Utf8(format!("v{}", rng.gen_range(0..n))),
                    }
                })
                .collect()
        })
        .collect()
}

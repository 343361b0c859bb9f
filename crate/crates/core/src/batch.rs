//! Small columnar batches and their binary partition encoding.
//!
//! Encoding (version 1, all integers little-endian):
//!
//! ```text
//! magic  "LBAT"            4 bytes
//! version u16              = 1
//! ncols   u16
//! nrows   u64
//! per column: name_len u16, name bytes (utf-8), type tag u8 (1=int64, 2=float64, 3=utf8)
//! per column data:
//!   int64   nrows x i64
//!   float64 nrows x u64 (IEEE-754 bit pattern, so NaN payloads survive)
//!   utf8    nrows x (len u32, bytes)
//! ```
//!
//! Decoding an encoded batch and re-encoding it yields identical bytes.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;

const MAGIC: &[u8; 4] = b"LBAT";
pub const ENCODING_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BatchError {
    #[error("column `{column}` has {actual} rows, expected {expected}")]
    LengthMismatch {
        column: String,
        expected: usize,
        actual: usize,
    },
    #[error("column `{column}` holds {actual:?} values but the schema says {expected:?}")]
    TypeMismatch {
        column: String,
        expected: DataType,
        actual: DataType,
    },
    #[error("schema has {fields} fields but {columns} columns were supplied")]
    Arity { fields: usize, columns: usize },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("cannot concatenate batches with different schemas")]
    SchemaConflict,
    #[error("malformed partition encoding: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Int64,
    Float64,
    Utf8,
}

impl DataType {
    fn tag(self) -> u8 {
        match self {
            DataType::Int64 => 1,
            DataType::Float64 => 2,
            DataType::Utf8 => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DataType::Int64),
            2 => Some(DataType::Float64),
            3 => Some(DataType::Utf8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    #[serde(rename = "type")]
    pub data_type: DataType,
}

impl Field {
    pub fn new(name: impl Into<String>, data_type: DataType) -> Self {
        Self {
            name: name.into(),
            data_type,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub fields: Vec<Field>,
}

impl Schema {
    pub fn new(fields: Vec<Field>) -> Self {
        Self { fields }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// A single typed value. Floats compare and hash by total order / bit
/// pattern so that `Scalar` can be a map key.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int64(i64),
    Float64(f64),
    Utf8(String),
}

impl Scalar {
    pub fn data_type(&self) -> DataType {
        match self {
            Scalar::Int64(_) => DataType::Int64,
            Scalar::Float64(_) => DataType::Float64,
            Scalar::Utf8(_) => DataType::Utf8,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Scalar::Int64(_) => 0,
            Scalar::Float64(_) => 1,
            Scalar::Utf8(_) => 2,
        }
    }
}

impl PartialEq for Scalar {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scalar {}

impl PartialOrd for Scalar {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scalar {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Scalar::Int64(a), Scalar::Int64(b)) => a.cmp(b),
            (Scalar::Float64(a), Scalar::Float64(b)) => a.total_cmp(b),
            (Scalar::Utf8(a), Scalar::Utf8(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl Hash for Scalar {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match self {
            Scalar::Int64(v) => v.hash(state),
            Scalar::Float64(v) => v.to_bits().hash(state),
            Scalar::Utf8(v) => v.hash(state),
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int64(v) => write!(f, "{v}"),
            Scalar::Float64(v) => write!(f, "{v}"),
            Scalar::Utf8(v) => f.write_str(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Int64(Vec<i64>),
    Float64(Vec<f64>),
    Utf8(Vec<String>),
}

impl Column {
    pub fn empty(data_type: DataType) -> Self {
        match data_type {
            DataType::Int64 => Column::Int64(Vec::new()),
            DataType::Float64 => Column::Float64(Vec::new()),
            DataType::Utf8 => Column::Utf8(Vec::new()),
        }
    }

    pub fn data_type(&self) -> DataType {
        match self {
            Column::Int64(_) => DataType::Int64,
            Column::Float64(_) => DataType::Float64,
            Column::Utf8(_) => DataType::Utf8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Column::Int64(v) => v.len(),
            Column::Float64(v) => v.len(),
            Column::Utf8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, row: usize) -> Scalar {
        match self {
            Column::Int64(v) => Scalar::Int64(v[row]),
            Column::Float64(v) => Scalar::Float64(v[row]),
            Column::Utf8(v) => Scalar::Utf8(v[row].clone()),
        }
    }

    /// Appends a value; panics if the scalar's type differs from the column's.
    pub fn push(&mut self, value: Scalar) {
        match (self, value) {
            (Column::Int64(v), Scalar::Int64(x)) => v.push(x),
            (Column::Float64(v), Scalar::Float64(x)) => v.push(x),
            (Column::Utf8(v), Scalar::Utf8(x)) => v.push(x),
            (col, value) => panic!("pushing {:?} into {:?} column", value.data_type(), col.data_type()),
        }
    }

    pub fn take(&self, rows: &[usize]) -> Column {
        match self {
            Column::Int64(v) => Column::Int64(rows.iter().map(|&r| v[r]).collect()),
            Column::Float64(v) => Column::Float64(rows.iter().map(|&r| v[r]).collect()),
            Column::Utf8(v) => Column::Utf8(rows.iter().map(|&r| v[r].clone()).collect()),
        }
    }

    fn extend_from(&mut self, other: &Column) -> Result<(), BatchError> {
        match (self, other) {
            (Column::Int64(a), Column::Int64(b)) => a.extend_from_slice(b),
            (Column::Float64(a), Column::Float64(b)) => a.extend_from_slice(b),
            (Column::Utf8(a), Column::Utf8(b)) => a.extend(b.iter().cloned()),
            _ => return Err(BatchError::SchemaConflict),
        }
        Ok(())
    }

    fn cmp_rows(&self, a: usize, b: usize) -> Ordering {
        match self {
            Column::Int64(v) => v[a].cmp(&v[b]),
            Column::Float64(v) => v[a].total_cmp(&v[b]),
            Column::Utf8(v) => v[a].cmp(&v[b]),
        }
    }
}

/// Equal-length typed columns under a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    schema: Schema,
    columns: Vec<Column>,
    rows: usize,
}

impl Batch {
    pub fn try_new(schema: Schema, columns: Vec<Column>) -> Result<Self, BatchError> {
        if schema.len() != columns.len() {
            return Err(BatchError::Arity {
                fields: schema.len(),
                columns: columns.len(),
            });
        }
        let rows = columns.first().map_or(0, Column::len);
        for (field, col) in schema.fields.iter().zip(&columns) {
            if col.data_type() != field.data_type {
                return Err(BatchError::TypeMismatch {
                    column: field.name.clone(),
                    expected: field.data_type,
                    actual: col.data_type(),
                });
            }
            if col.len() != rows {
                return Err(BatchError::LengthMismatch {
                    column: field.name.clone(),
                    expected: rows,
                    actual: col.len(),
                });
            }
        }
        Ok(Self { schema, columns, rows })
    }

    pub fn empty(schema: Schema) -> Self {
        let columns = schema.fields.iter().map(|f| Column::empty(f.data_type)).collect();
        Self {
            schema,
            columns,
            rows: 0,
        }
    }

    /// Builds a batch from row-major values.
    pub fn from_rows(schema: Schema, rows: &[Vec<Scalar>]) -> Result<Self, BatchError> {
        let mut columns: Vec<Column> = schema.fields.iter().map(|f| Column::empty(f.data_type)).collect();
        for row in rows {
            if row.len() != schema.len() {
                return Err(BatchError::Arity {
                    fields: schema.len(),
                    columns: row.len(),
                });
            }
            for ((col, field), value) in columns.iter_mut().zip(&schema.fields).zip(row) {
                if value.data_type() != field.data_type {
                    return Err(BatchError::TypeMismatch {
                        column: field.name.clone(),
                        expected: field.data_type,
                        actual: value.data_type(),
                    });
                }
                col.push(value.clone());
            }
        }
        Self::try_new(schema, columns)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn row_count(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn column(&self, name: &str) -> Result<&Column, BatchError> {
        self.schema
            .index_of(name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| BatchError::UnknownColumn(name.to_string()))
    }

    pub fn row(&self, row: usize) -> Vec<Scalar> {
        self.columns.iter().map(|c| c.value(row)).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = Vec<Scalar>> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn take(&self, rows: &[usize]) -> Batch {
        Batch {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.take(rows)).collect(),
            rows: rows.len(),
        }
    }

    /// Concatenates batches that share `schema`.
    pub fn concat(schema: &Schema, batches: &[&Batch]) -> Result<Batch, BatchError> {
        let mut out = Batch::empty(schema.clone());
        for b in batches {
            if b.schema != *schema {
                return Err(BatchError::SchemaConflict);
            }
            for (dst, src) in out.columns.iter_mut().zip(&b.columns) {
                dst.extend_from(src)?;
            }
            out.rows += b.rows;
        }
        Ok(out)
    }

    /// Appends `other`'s rows in place.
    pub fn append(&mut self, other: &Batch) -> Result<(), BatchError> {
        if other.schema != self.schema {
            return Err(BatchError::SchemaConflict);
        }
        for (dst, src) in self.columns.iter_mut().zip(&other.columns) {
            dst.extend_from(src)?;
        }
        self.rows += other.rows;
        Ok(())
    }

    /// Rows in lexicographic order over all columns. Used to compare results
    /// whose row order depends on scheduling.
    pub fn sorted(&self) -> Batch {
        let mut order: Vec<usize> = (0..self.rows).collect();
        order.sort_by(|&a, &b| {
            self.columns
                .iter()
                .map(|c| c.cmp_rows(a, b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        });
        self.take(&order)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.rows * 8 * self.columns.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ENCODING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.columns.len() as u16).to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        for field in &self.schema.fields {
            out.extend_from_slice(&(field.name.len() as u16).to_le_bytes());
            out.extend_from_slice(field.name.as_bytes());
            out.push(field.data_type.tag());
        }
        for col in &self.columns {
            match col {
                Column::Int64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Column::Float64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
                Column::Utf8(v) => v.iter().for_each(|s| {
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Batch, BatchError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(BatchError::Decode("bad magic".into()));
        }
        let version = r.u16()?;
        if version != ENCODING_VERSION {
            return Err(BatchError::Decode(format!("unsupported version {version}")));
        }
        let ncols = r.u16()? as usize;
        let nrows = usize::try_from(r.u64()?).map_err(|_| BatchError::Decode("row count overflow".into()))?;
        let mut fields = Vec::with_capacity(ncols);
        for _ in 0..ncols {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| BatchError::Decode(e.to_string()))?
                .to_string();
            let tag = r.u8()?;
            let data_type =
                DataType::from_tag(tag).ok_or_else(|| BatchError::Decode(format!("unknown type tag {tag}")))?;
            fields.push(Field::new(name, data_type));
        }
        let mut columns = Vec::with_capacity(ncols);
        for field in &fields {
            let col = match field.data_type {
                DataType::Int64 => Column::Int64(
                    (0..nrows)
                        .map(|_| r.u64().map(|v| v as i64))
                        .collect::<Result<_, _>>()?,
                ),
                DataType::Float64 => Column::Float64(
                    (0..nrows)
                        .map(|_| r.u64().map(f64::from_bits))
                        .collect::<Result<_, _>>()?,
                ),
                DataType::Utf8 => {
                    let mut v = Vec::with_capacity(nrows);
                    for _ in 0..nrows {
                        let len = r.u32()? as usize;
                        let s = std::str::from_utf8(r.take(len)?).map_err(|e| BatchError::Decode(e.to_string()))?;
                        v.push(s.to_string());
                    }
                    Column::Utf8(v)
                }
            };
            columns.push(col);
        }
        if r.pos != bytes.len() {
            return Err(BatchError::Decode(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Batch::try_new(Schema::new(fields), columns)
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.encode())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BatchError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| BatchError::Decode("unexpected end of input".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, BatchError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BatchError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, BatchError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BatchError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

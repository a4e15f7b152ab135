//! CSV tables to token sequences and back.
//!
//! Categorical columns map each distinct string to an index. Numeric columns are
//! cut into quantile bins; a bin decodes to the median of the training values
//! that fell into it.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_process::SequenceState;

pub const DEFAULT_NUMERIC_BINS: usize = 32;

/// A header plus string cells, every row as wide as the header.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != header.len()) {
            return Err(Error::Shape(format!("row {i} has a different width than the header")));
        }
        Ok(Self { header, rows })
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.iter().map(str::to_owned).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_owned).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Self::new(header, rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.to_writer(std::fs::File::create(path)?)
    }

    pub fn width(&self) -> usize {
        self.header.len()
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = &str> {
        self.rows.iter().map(move |r| r[c].as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bin_edges: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bin_representatives: Vec<f64>,
    pub vocab_size: usize,
}

impl ColumnSchema {
    fn categorical(name: &str, values: Vec<&str>) -> Self {
        let mut categories: Vec<String> = values.into_iter().map(str::to_owned).collect();
        categories.sort();
        categories.dedup();
        let vocab_size = categories.len();
        Self {
            name: name.to_owned(),
            kind: ColumnKind::Categorical,
            categories,
            bin_edges: Vec::new(),
            bin_representatives: Vec::new(),
            vocab_size,
        }
    }

    fn numeric(name: &str, mut values: Vec<f64>, bins: usize) -> Self {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let mut edges: Vec<f64> = (0..=bins).map(|k| values[k * (n - 1) / bins]).collect();
        edges.dedup();
        let mut column = Self {
            name: name.to_owned(),
            kind: ColumnKind::Numeric,
            categories: Vec::new(),
            bin_edges: edges,
            bin_representatives: Vec::new(),
            vocab_size: 0,
        };
        column.vocab_size = column.bin_count();
        let mut members: Vec<Vec<f64>> = vec![Vec::new(); column.vocab_size];
        for &v in &values {
            members[column.bin_of(v)].push(v);
        }
        // values are sorted, so each bin's members are too; take the lower median
        column.bin_representatives = members.iter().map(|m| m[(m.len() - 1) / 2]).collect();
        column
    }

    fn bin_count(&self) -> usize {
        (self.bin_edges.len() - 1).max(1)
    }

    /// Right-open bins `[e_i, e_{i+1})`, the last one closed; values outside the
    /// edge range clamp to the outer bins.
    pub fn bin_of(&self, v: f64) -> usize {
        let interior = &self.bin_edges[1..self.bin_edges.len().saturating_sub(1).max(1)];
        interior.partition_point(|&e| e <= v).min(self.bin_count() - 1)
    }

    fn encode_cell(&self, cell: &str, row: usize) -> Result<usize> {
        match self.kind {
            ColumnKind::Categorical => self
                .categories
                .binary_search_by(|c| c.as_str().cmp(cell))
                .map_err(|_| Error::UnseenCategory { column: self.name.clone(), value: cell.to_owned() }),
            ColumnKind::Numeric => {
                if cell.trim().is_empty() {
                    return Err(Error::MissingNumeric { column: self.name.clone(), row });
                }
                match parse_number(cell) {
                    Some(v) => Ok(self.bin_of(v)),
                    None => Err(Error::MalformedNumeric { column: self.name.clone(), value: cell.to_owned() }),
                }
            }
        }
    }

    fn decode_token(&self, k: usize) -> Result<String> {
        if k >= self.vocab_size {
            return Err(Error::Shape(format!("column {:?}: token {k} out of range", self.name)));
        }
        Ok(match self.kind {
            ColumnKind::Categorical => self.categories[k].clone(),
            ColumnKind::Numeric => self.bin_representatives[k].to_string(),
        })
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ColumnKind::Categorical => self.vocab_size == self.categories.len() && self.vocab_size > 0,
            ColumnKind::Numeric => {
                !self.bin_edges.is_empty()
                    && self.bin_edges.windows(2).all(|w| w[0] < w[1])
                    && self.vocab_size == self.bin_count()
                    && self.bin_representatives.len() == self.vocab_size
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("column {:?}: inconsistent schema", self.name)))
        }
    }
}

pub(crate) fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub columns: Vec<ColumnSchema>,
}

impl TableSchema {
    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.columns.iter().map(|c| c.vocab_size).collect()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn header(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Config("schema has no columns".into()));
        }
        self.columns.iter().try_for_each(ColumnSchema::validate)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let schema: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub(crate) fn check_header(&self, table: &Table) -> Result<()> {
        if table.header != self.header() {
            return Err(Error::Shape("table header does not match the schema".into()));
        }
        Ok(())
    }
}

/// Fully observed token rows with the schema that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub schema: TableSchema,
    pub rows: Vec<SequenceState>,
}

impl EncodedDataset {
    pub fn vocab_sizes(&self) -> Arc<[usize]> {
        Arc::from(self.schema.vocab_sizes())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Infers column kinds, categories and quantile bins from the data.
///
/// A column is numeric iff it has a non-empty cell and every non-empty cell
/// parses as a finite number.
pub fn infer_schema(table: &Table, numeric_bins: usize) -> Result<TableSchema> {
    if table.header.is_empty() || table.rows.is_empty() {
        return Err(Error::invalid("table needs a header and at least one data row"));
    }
    if numeric_bins == 0 {
        return Err(Error::invalid("numeric_bins must be at least 1"));
    }
    let columns = table
        .header
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let cells: Vec<&str> = table.column(c).collect();
            let numbers: Option<Vec<f64>> =
                cells.iter().filter(|s| !s.trim().is_empty()).map(|s| parse_number(s)).collect();
            match numbers {
                Some(values) if !values.is_empty() => ColumnSchema::numeric(name, values, numeric_bins),
                _ => ColumnSchema::categorical(name, cells),
            }
        })
        .collect();
    Ok(TableSchema { columns })
}

pub fn encode(table: &Table, schema: &TableSchema) -> Result<EncodedDataset> {
    schema.check_header(table)?;
    let vocab: Arc<[usize]> = Arc::from(schema.vocab_sizes());
    let rows = table
        .rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let values = row
                .iter()
                .zip(&schema.columns)
                .map(|(cell, col)| col.encode_cell(cell, r))
                .collect::<Result<Vec<_>>>()?;
            SequenceState::observed(&values, vocab.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedDataset { schema: schema.clone(), rows })
}

pub fn decode_row(schema: &TableSchema, row: &SequenceState) -> Result<Vec<String>> {
    let values = row.values().ok_or_else(|| Error::invalid("cannot decode a masked row"))?;
    if values.len() != schema.len() {
        return Err(Error::Shape("row length does not match the schema".into()));
    }
    values.iter().zip(&schema.columns).map(|(&k, col)| col.decode_token(k)).collect()
}

pub fn decode(ds: &EncodedDataset) -> Result<Table> {
    let rows = ds.rows.iter().map(|r| decode_row(&ds.schema, r)).collect::<Result<_>>()?;
    Table::new(ds.schema.header(), rows)
}

//! Reading user CSVs for `cluster`: numeric parsing, categorical inference and
//! first-appearance label encoding.

use std::collections::HashMap;
use std::path::Path;

use amoclust::prior::{ColKind, Dataset, DatasetMeta, Provenance};
use amoclust::Tensor;
use anyhow::{bail, Context, Result};
use serde_json::json;

/// Categories of one label-encoded column, in code order.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub column: String,
    pub index: usize,
    pub categories: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Table {
    pub columns: Vec<String>,
    pub x: Tensor,
    pub kinds: Vec<ColKind>,
    pub encodings: Vec<Encoding>,
}

impl Table {
    /// Raw (unstandardized) values as a dataset without labels.
    pub fn into_dataset(self) -> Dataset {
        Dataset {
            x: self.x,
            col_kind: self.kinds,
            labels: None,
            k_true: 0,
            provenance: Provenance::default(),
        }
    }

    pub fn encodings_json(&self) -> serde_json::Value {
        let cols: Vec<_> = self
            .encodings
            .iter()
            .map(|e| json!({ "column": e.column, "index": e.index, "categories": e.categories }))
            .collect();
        json!({ "encoded_columns": cols })
    }
}

/// Codes strings by order of first appearance.
fn label_encode(values: &[&str]) -> (Vec<f64>, Vec<String>) {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut cats = Vec::new();
    let codes = values
        .iter()
        .map(|v| {
            let next = seen.len();
            let code = *seen.entry(v).or_insert_with(|| {
                cats.push(v.to_string());
                next
            });
            code as f64
        })
        .collect();
    (codes, cats)
}

/// Parses a headed CSV. A trailing `label` column is dropped. Column kinds come from
/// `meta` when given; otherwise a column is categorical when any field fails to parse
/// as a number. Categorical columns are label-encoded by first appearance.
pub fn read_table(path: &Path, meta: Option<&DatasetMeta>) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut columns: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    if columns.last().map(String::as_str) == Some("label") {
        columns.pop();
    }
    let d = columns.len();
    if d == 0 || rows.is_empty() {
        bail!("{}: no feature columns or no rows", path.display());
    }
    if let Some(m) = meta {
        if m.col_kind.len() != d {
            bail!("sidecar lists {} column kinds but the file has {d} feature columns", m.col_kind.len());
        }
    }
    let n = rows.len();
    let mut x = Tensor::zeros(&[n, d]);
    let mut kinds = Vec::with_capacity(d);
    let mut encodings = Vec::new();
    for (j, name) in columns.iter().enumerate() {
        let fields: Vec<&str> = rows.iter().map(|r| r.get(j).unwrap_or("")).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse::<f64>().ok()).collect();
        let (values, kind) = match (parsed, meta.map(|m| m.col_kind[j])) {
            (Some(v), Some(kind)) => (v, kind),
            (Some(v), None) => (v, ColKind::Numeric),
            (None, Some(ColKind::Numeric)) => bail!("column {name:?} is declared numeric but holds non-numbers"),
            (None, _) => {
                let (codes, categories) = label_encode(&fields);
                encodings.push(Encoding {
                    column: name.clone(),
                    index: j,
                    categories,
                });
                (codes, ColKind::Categorical)
            }
        };
        for (i, v) in values.into_iter().enumerate() {
            x.data_mut()[i * d + j] = v;
        }
        kinds.push(kind);
    }
    Ok(Table {
        columns,
        x,
        kinds,
        encodings,
    })
}

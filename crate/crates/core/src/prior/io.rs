use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ColKind, Dataset, PriorKind, Provenance};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Sidecar written next to a dataset CSV as `<name>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub col_kind: Vec<ColKind>,
    pub k_true: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_kind: Option<PriorKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved_omega_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.csv")), dir.join(format!("{name}.meta.json")))
}

impl Dataset {
    pub fn meta(&self) -> DatasetMeta {
        let cfg = self.provenance.config.as_ref();
        DatasetMeta {
            col_kind: self.col_kind.clone(),
            k_true: self.k_true,
            prior_kind: cfg.map(|c| c.prior_kind),
            seed: cfg.map(|c| c.seed),
            achieved_omega_max: self.provenance.achieved_omega_max(),
            notes: self.provenance.notes.clone(),
        }
    }

    /// Writes `<dir>/<name>.csv` and `<dir>/<name>.meta.json`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        self.validate()?;
        let (csv_path, meta_path) = paths(dir, name);
        let mut w = csv::Writer::from_path(&csv_path)?;
        let mut header: Vec<String> = (0..self.d()).map(|j| format!("f{j}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for r in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(r).iter().map(|v| format!("{v:?}")).collect();
            if let Some(l) = &self.labels {
                rec.push(l[r].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        std::fs::write(meta_path, serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    /// Reads a dataset pair written by [`Dataset::save`]. Without a meta file all
    /// columns are numeric and `k_true` is the number of distinct labels.
    pub fn load(dir: &Path, name: &str) -> Result<Dataset> {
        let (csv_path, meta_path) = paths(dir, name);
        let meta: Option<DatasetMeta> = if meta_path.exists() {
            Some(serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?)
        } else {
            None
        };
        Self::read_csv(&csv_path, meta)
    }

    pub fn read_csv(path: &Path, meta: Option<DatasetMeta>) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        let has_label = header.iter().last() == Some("label");
        let d = header.len() - usize::from(has_label);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Format(format!("{}: row {} has {} fields", path.display(), line + 1, rec.len())));
            }
            for field in rec.iter().take(d) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Format(format!("{}: row {}: bad number {field:?}", path.display(), line + 1))
                })?;
                data.push(v);
            }
            if has_label {
                let field = &rec[d];
                labels.push(field.trim().parse::<usize>().map_err(|_| {
                    Error::Format(format!("{}: row {}: bad label {field:?}", path.display(), line + 1))
                })?);
            }
        }
        let n = data.len() / d.max(1);
        let x = Tensor::new(vec![n, d], data)?;
        let labels = has_label.then_some(labels);
        let (col_kind, k_true, notes) = match meta {
            Some(m) => (m.col_kind, m.k_true, m.notes),
            None => {
                let k = labels.as_ref().map_or(0, |l| l.iter().collect::<std::collections::HashSet<_>>().len());
                (vec![ColKind::Numeric; d], k, vec![])
            }
        };
        let ds = Dataset {
            x,
            col_kind,
            labels,
            k_true,
            provenance: Provenance {
                notes,
                ..Provenance::default()
            },
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{sample_task, PriorConfig};

    #[test]
    fn round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let prior = PriorConfig {
            p_gmm: 0.0,
            d_min: 6,
            ..PriorConfig::desk()
        };
        let ds = sample_task(&prior, 11).unwrap();
        ds.save(dir.path(), "t").unwrap();
        let back = Dataset::load(dir.path(), "t").unwrap();
        assert!(back.x.max_abs_diff(&ds.x) <= 1e-9);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.col_kind, ds.col_kind);
        assert_eq!(back.k_true, ds.k_true);
        let meta: DatasetMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("t.meta.json")).unwrap()).unwrap();
        assert_eq!(meta.prior_kind, Some(PriorKind::Zeus));
        assert!(meta.achieved_omega_max.is_some());
    }

    #[test]
    fn bad_number_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.csv"), "f0,f1\n1,2\n3,x\n").unwrap();
        let err = Dataset::load(dir.path(), "b").unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn csv_without_meta() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.csv"), "f0,f1,label\n1,2,0\n3,4,1\n5,6,1\n").unwrap();
        let ds = Dataset::load(dir.path(), "c").unwrap();
        assert_eq!(ds.k_true, 2);
        assert_eq!(ds.labels, Some(vec![0, 1, 1]));
    }
}

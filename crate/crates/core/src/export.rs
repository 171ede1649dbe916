//! Tab-separated feature export: `gold`, `predicted`, then the `z` entries,
//! one row per sample.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::IdeaModel;
use crate::text::Batch;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub gold: usize,
    pub predicted: usize,
    pub z: Vec<f64>,
}

/// Write one row per sample and return the number of rows written. Values
/// use the shortest representation that parses back to the same `f64`.
pub fn export_features(model: &IdeaModel, batches: &[Batch], path: &Path) -> Result<usize> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let mut rows = 0;
    for batch in batches {
        let pred = model.predict(batch)?;
        let width = pred.z.shape()[1];
        for (r, z) in pred.z.data().chunks(width).enumerate() {
            let mut line = format!("{}\t{}", batch.gold[r], pred.predicted[r]);
            for v in z {
                line.push('\t');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}").map_err(|e| Error::io(ctx(), e))?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(ctx(), e))?;
    Ok(rows)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let file = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message,
        };
        let mut fields = line.split('\t');
        let mut int = |what: &str| -> Result<usize> {
            let f = fields.next().ok_or_else(|| bad(format!("missing {what}")))?;
            f.parse().map_err(|_| bad(format!("bad {what} {f:?}")))
        };
        let gold = int("gold label")?;
        let predicted = int("predicted label")?;
        let z = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("bad feature value {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(FeatureRow { gold, predicted, z });
    }
    Ok(out)
}

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::DeadCapsuleReport;
use crate::capsule::LayerKind;
use crate::error::{Error, Result};

/// Column order of the snapshot CSV.
pub const SNAPSHOT_COLUMNS: [&str; 5] = ["epoch", "layer", "kind", "capsule", "activation"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub epoch: usize,
    pub layer: usize,
    pub kind: LayerKind,
    pub capsule: usize,
    /// Rounded to 9 significant digits.
    pub activation: f64,
}

/// One row per capsule, in layer then capsule order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub epoch: usize,
    pub rows: Vec<SnapshotRow>,
}

/// Rounds to 9 significant digits, matching the text form.
pub fn round_sig9(x: f64) -> f64 {
    format_sig9(x).parse().expect("formatted float parses")
}

fn format_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

impl SnapshotRecord {
    pub(super) fn from_report(report: &DeadCapsuleReport, epoch: usize) -> Self {
        let rows = report
            .layers
            .iter()
            .flat_map(|l| {
                l.capsules.iter().map(move |c| SnapshotRow {
                    epoch,
                    layer: l.index,
                    kind: l.kind,
                    capsule: c.index,
                    activation: round_sig9(c.mean_activation),
                })
            })
            .collect();
        SnapshotRecord { epoch, rows }
    }

    pub fn n_layers(&self) -> usize {
        self.rows.last().map_or(0, |r| r.layer + 1)
    }

    /// Activations of one layer in capsule order.
    pub fn layer(&self, layer: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.layer == layer)
            .map(|r| r.activation)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let ser = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(SNAPSHOT_COLUMNS).map_err(ser)?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.layer.to_string(),
                r.kind.name().to_string(),
                r.capsule.to_string(),
                format_sig9(r.activation),
            ])
            .map_err(ser)?;
        }
        w.flush().map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?;
        if headers.iter().ne(SNAPSHOT_COLUMNS) {
            return Err(Error::Format(format!("unexpected snapshot header {headers:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| -> Result<usize> {
                field(i)
                    .parse()
                    .map_err(|_| Error::Format(format!("bad {} {:?}", SNAPSHOT_COLUMNS[i], field(i))))
            };
            let kind = LayerKind::parse(field(2))
                .ok_or_else(|| Error::Format(format!("unknown layer kind {:?}", field(2))))?;
            let activation = field(4)
                .parse()
                .map_err(|_| Error::Format(format!("bad activation {:?}", field(4))))?;
            rows.push(SnapshotRow {
                epoch: num(0)?,
                layer: num(1)?,
                kind,
                capsule: num(3)?,
                activation,
            });
        }
        let epoch = rows.first().map_or(0, |r| r.epoch);
        if rows.iter().any(|r| r.epoch != epoch) {
            return Err(Error::Format("snapshot mixes epochs".into()));
        }
        Ok(SnapshotRecord { epoch, rows })
    }
}

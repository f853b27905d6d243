use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ModelState};
use crate::router::{Granularity, Routing, Target};
use crate::tensor::Tape;
use crate::train::Window;

/// One routing decision: per (sequence, layer) or per (sequence, layer, token).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sequence: usize,
    pub layer: usize,
    pub target: Target,
    pub granularity: Granularity,
    pub position: Option<usize>,
    pub score: f32,
    pub keep: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipTrace {
    pub records: Vec<TraceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerKeep {
    pub layer: usize,
    pub target: Target,
    pub decisions: usize,
    pub keep_fraction: f64,
}

/// Routing decisions of `routing` over `data`, sequences numbered in data order.
pub fn collect_trace(state: &ModelState, routing: &Routing, data: &[Window], batch_size: usize) -> Result<SkipTrace> {
    let mut records = Vec::new();
    let tape = Tape::inference();
    for (c, chunk) in data.chunks(batch_size.max(1)).enumerate() {
        let base = c * batch_size.max(1);
        let seqs: Vec<&[usize]> = chunk.iter().map(|w| w.inputs.as_slice()).collect();
        let out = state.forward(&tape, &seqs, routing, &ForwardOptions::default(), None)?;
        for d in &out.decisions {
            for i in 0..d.keep.len() {
                records.push(TraceRecord {
                    sequence: base + d.sequence[i],
                    layer: d.layer,
                    target: d.target,
                    granularity: d.granularity,
                    position: d.position[i],
                    score: d.scores.data()[i],
                    keep: d.keep[i],
                });
            }
        }
    }
    Ok(SkipTrace { records })
}

/// Kept fraction per routed (layer, target).
pub fn skip_ratio_summary(trace: &SkipTrace) -> Vec<LayerKeep> {
    let mut acc: BTreeMap<(usize, Target), (usize, usize)> = BTreeMap::new();
    for r in &trace.records {
        let e = acc.entry((r.layer, r.target)).or_default();
        e.0 += usize::from(r.keep);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((layer, target), (kept, n))| LayerKeep {
            layer,
            target,
            decisions: n,
            keep_fraction: kept as f64 / n as f64,
        })
        .collect()
}

impl SkipTrace {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let bytes = self.to_jsonl()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(SkipTrace { records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
        let records = r
            .deserialize::<TraceRecord>()
            .collect::<std::result::Result<_, _>>()?;
        Ok(SkipTrace { records })
    }
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Step {
        episode: u64,
        loss: f64,
        lr: f64,
        timestamp: String,
        /// Fingerprint of the sampled episode.
        digest: String,
    },
    Validation {
        episode: u64,
        val_accuracy: f64,
        ci95: f64,
        timestamp: String,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<Record>,
}

impl History {
    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn num_steps(&self) -> usize {
        self.records.iter().filter(|r| matches!(r, Record::Step { .. })).count()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn digests(&self) -> Vec<&str> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Step { digest, .. } => Some(digest.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn validations(&self) -> Vec<(u64, f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Validation { episode, val_accuracy, ci95, .. } => Some((*episode, *val_accuracy, *ci95)),
                _ => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serialises") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("history line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// Writes records to a fresh JSON-lines file as they are produced.
pub struct HistoryWriter {
    out: BufWriter<File>,
}

impl HistoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &Record) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serialises");
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| Error::io("writing history", e))
    }
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut h = History::default();
        h.push(Record::Step { episode: 1, loss: 1.5, lr: 1e-4, timestamp: timestamp(), digest: "ab".into() });
        h.push(Record::Validation { episode: 1, val_accuracy: 0.5, ci95: 0.01, timestamp: timestamp() });
        let text = h.to_jsonl();
        assert!(text.lines().next().unwrap().contains("\"loss\":1.5"));
        assert_eq!(History::from_jsonl(&text).unwrap(), h);
        assert_eq!(h.num_steps(), 1);
    }
}

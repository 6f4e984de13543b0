use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One line of the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reconstruction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ppl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub agree: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm: Option<f64>,
}

/// Appends one JSON object per line; a sink log discards records.
#[derive(Debug)]
pub struct TrainLog {
    out: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
        })
    }

    pub fn sink() -> Self {
        Self { out: None }
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<()> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

impl Drop for TrainLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

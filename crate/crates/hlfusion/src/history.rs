//! Per-epoch training history: one `epoch,mean_loss,train_oa,test_oa` line
//! per epoch, no header. `test_oa` is empty for epochs without an
//! evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hlfusion_core::train::{EpochRecord, TrainObserver};

use crate::error::{Error, Result};

pub fn format_record(r: &EpochRecord) -> String {
    let test = r.test_oa.map(|v| v.to_string()).unwrap_or_default();
    format!("{},{},{},{}", r.epoch, r.mean_loss, r.train_oa, test)
}

pub fn parse_record(line: &str) -> Option<EpochRecord> {
    let mut f = line.trim().split(',');
    let record = EpochRecord {
        epoch: f.next()?.parse().ok()?,
        mean_loss: f.next()?.parse().ok()?,
        train_oa: f.next()?.parse().ok()?,
        test_oa: match f.next()? {
            "" => None,
            v => Some(v.parse().ok()?),
        },
    };
    f.next().is_none().then_some(record)
}

/// Appends each epoch to a file as training goes, flushing every line so an
/// interrupted run leaves a usable prefix.
pub struct HistoryWriter {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<std::io::Error>,
    echo: bool,
}

impl HistoryWriter {
    pub fn create(path: &Path, echo: bool) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            error: None,
            echo,
        })
    }

    /// Surfaces the first write error, if any.
    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(Error::io(&self.path, e));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl TrainObserver for HistoryWriter {
    fn on_epoch(&mut self, record: &EpochRecord) {
        let line = format_record(record);
        if self.echo {
            eprintln!("epoch {line}");
        }
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
                self.error = Some(e);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip() {
        let a = EpochRecord {
            epoch: 3,
            mean_loss: 0.5625,
            train_oa: 0.75,
            test_oa: None,
        };
        assert_eq!(format_record(&a), "3,0.5625,0.75,");
        assert_eq!(parse_record(&format_record(&a)), Some(a));
        let b = EpochRecord { test_oa: Some(1.0 / 3.0), ..a };
        assert_eq!(parse_record(&format_record(&b)), Some(b));
        assert_eq!(parse_record("1,2,3"), None);
    }
}

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::trainer::{CheckpointKind, LogRow, TrainSink};

pub const LOSS_CSV: &str = "loss.csv";

/// Writes `loss.csv` and one checkpoint directory per boundary under `dir`.
pub struct FileSink {
    dir: PathBuf,
    csv: File,
}

impl FileSink {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOSS_CSV);
        let mut csv = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(csv, "{}", LogRow::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
        Ok(FileSink {
            dir: dir.to_path_buf(),
            csv,
        })
    }
}

impl TrainSink for FileSink {
    fn log(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.csv, "{}", row.csv()).map_err(|e| Error::io(self.dir.join(LOSS_CSV), e))
    }

    fn checkpoint(&mut self, kind: CheckpointKind, ckpt: &Checkpoint) -> Result<()> {
        ckpt.save(&self.dir.join(kind.dir_name(ckpt.stage_index)))
    }
}

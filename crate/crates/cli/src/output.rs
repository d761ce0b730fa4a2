use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{CliResult, Failure};

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::output(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::output(path, e))
}

/// Runs `body` against a fresh file at `path` and flushes it.
pub fn write_with(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> CliResult) -> CliResult {
    let mut w = create(path)?;
    body(&mut w)?;
    w.flush().map_err(|e| Failure::output(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Failure::output(path, e))?;
        writeln!(w).map_err(|e| Failure::output(path, e))
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

//! Line-delimited JSON training and evaluation logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub trait LogSink {
    fn log(&mut self, record: Value);
}

/// Discards records.
pub struct NullLog;

impl LogSink for NullLog {
    fn log(&mut self, _: Value) {}
}

/// Keeps records in memory.
#[derive(Default)]
pub struct MemoryLog(pub Vec<Value>);

impl LogSink for MemoryLog {
    fn log(&mut self, record: Value) {
        self.0.push(record);
    }
}

/// Appends one JSON object per line to a file, flushing every record so a
/// killed run still leaves a readable log.
pub struct JsonlLog {
    out: BufWriter<File>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::options().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(f) })
    }
}

impl LogSink for JsonlLog {
    fn log(&mut self, record: Value) {
        // A failed log write must not abort training; report it on stderr.
        if let Err(e) = writeln!(self.out, "{record}").and_then(|_| self.out.flush()) {
            eprintln!("log write failed: {e}");
        }
    }
}

/// Forwards to two sinks.
pub struct Tee<'a, A: LogSink + ?Sized, B: LogSink + ?Sized>(pub &'a mut A, pub &'a mut B);

impl<A: LogSink + ?Sized, B: LogSink + ?Sized> LogSink for Tee<'_, A, B> {
    fn log(&mut self, record: Value) {
        self.0.log(record.clone());
        self.1.log(record);
    }
}

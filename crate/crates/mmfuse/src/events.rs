//! Structured JSON-lines event log.
//!
//! Events carry no timestamps so identical runs write identical lines;
//! tests assert on warnings (empty bags, skipped classes) by scanning the
//! file.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub struct EventSink {
    file: Option<Mutex<std::fs::File>>,
    echo_warnings: bool,
}

impl EventSink {
    pub fn to_file(path: &Path) -> Result<EventSink> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(EventSink { file: Some(Mutex::new(file)), echo_warnings: true })
    }

    /// Discards everything; for library callers that do their own logging.
    pub fn null() -> EventSink {
        EventSink { file: None, echo_warnings: false }
    }

    pub fn emit(&self, level: &str, event: &str, fields: &[(&str, Value)]) {
        let mut map = Map::new();
        map.insert("level".to_string(), Value::String(level.to_string()));
        map.insert("event".to_string(), Value::String(event.to_string()));
        for (key, value) in fields {
            map.insert((*key).to_string(), value.clone());
        }
        let line = Value::Object(map).to_string();
        if let Some(file) = &self.file {
            let mut file = file.lock().expect("event sink poisoned");
            let _ = writeln!(file, "{line}");
        }
        if self.echo_warnings && level != "info" {
            eprintln!("{line}");
        }
    }

    pub fn info(&self, event: &str, fields: &[(&str, Value)]) {
        self.emit("info", event, fields);
    }

    pub fn warn(&self, event: &str, fields: &[(&str, Value)]) {
        self.emit("warn", event, fields);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_are_json_lines_without_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let sink = EventSink::to_file(&path).unwrap();
        sink.info("synth_done", &[("patients", 30.into())]);
        sink.warn("empty_bag", &[("patient_id", "p003".into())]);
        drop(sink);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["event"], "synth_done");
        assert_eq!(first["patients"], 30);
        let second: Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(second["level"], "warn");
        assert_eq!(second["patient_id"], "p003");
    }
}

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use touchmoe_core::{Error, Result};

use crate::BUILD_ID;

/// Output directory of one command. Holds `run.json`, `run.log` and
/// `events.jsonl`; everything a command writes goes under it.
pub struct RunDir {
    pub root: PathBuf,
    events: BufWriter<File>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, seed: Option<u64>, level: log::LevelFilter) -> Result<RunDir> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let log_path = root.join("run.log");
        let log_file = fern::log_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
        // A second command in the same process keeps the first logger.
        let _ = fern::Dispatch::new()
            .format(|out, message, record| out.finish(format_args!("[{}] {}", record.level(), message)))
            .chain(fern::Dispatch::new().level(level).chain(std::io::stderr()))
            .chain(fern::Dispatch::new().level(log::LevelFilter::Debug).chain(log_file))
            .apply();
        let events_path = root.join("events.jsonl");
        let events = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&events_path)
            .map_err(|e| Error::io(&events_path, e))?;
        let dir = RunDir { root: root.to_path_buf(), events: BufWriter::new(events) };
        let args: Vec<String> = std::env::args().collect();
        dir.write_json(
            "run.json",
            &json!({
                "command": command,
                "args": args,
                "seed": seed,
                "build_id": BUILD_ID,
                "version": env!("CARGO_PKG_VERSION"),
            }),
        )?;
        log::info!("touchmoe {} ({BUILD_ID}) {command} -> {}", env!("CARGO_PKG_VERSION"), root.display());
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Appends one machine-readable event line.
    pub fn event(&mut self, kind: &str, mut fields: Value) -> Result<()> {
        if let Value::Object(map) = &mut fields {
            map.insert("event".into(), Value::String(kind.into()));
        }
        let path = self.path("events.jsonl");
        serde_json::to_writer(&mut self.events, &fields)?;
        self.events.write_all(b"\n").and_then(|()| self.events.flush()).map_err(|e| Error::io(&path, e))
    }
}

/// Line-delimited JSON writer for per-step training records.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn append(path: PathBuf) -> Result<JsonLines> {
        let f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(JsonLines { path, out: BufWriter::new(f) })
    }

    pub fn write(&mut self, value: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

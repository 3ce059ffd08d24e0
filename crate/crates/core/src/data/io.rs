//! JSONL datasets with binary frame sidecars.
//!
//! One JSON object per line:
//!
//! ```json
//! {"schema":1,"id":"syn-7-00000","task":"FPU","sensor":"gelsight",
//!  "frames":"frames/syn-7-00000.tnsr","question":"...","answers":["..."],
//!  "properties":["roughness"],"provenance":"synthetic","latents":{"roughness":0.9}}
//! ```
//!
//! `frames` is relative to the dataset file and holds an `N×H×W×3` tensor
//! record (see [`super::sidecar`]).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sample::{ConversationSample, Provenance, Task};
use super::sidecar::{self, DType};
use crate::error::{Error, Result};
use crate::frontend::{Sensor, TactileClip};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    schema: u32,
    id: String,
    task: String,
    sensor: String,
    frames: String,
    question: String,
    answers: Vec<String>,
    #[serde(default)]
    properties: Vec<String>,
    provenance: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    latents: BTreeMap<String, f64>,
}

/// Writes `samples` to `path` and their frames under `<dir>/frames/`.
pub fn save_dataset(samples: &[ConversationSample], path: &Path) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        s.validate()?;
        let rel = format!("frames/{}.tnsr", sanitize(&s.id));
        let frame_path = dir.join(&rel);
        let mut fw = BufWriter::new(File::create(&frame_path).map_err(|e| Error::io(&frame_path, e))?);
        let data = s.tactile.data();
        sidecar::write_tensor(&mut fw, &s.tactile.shape(), data, DType::lossless_for(data))
            .and_then(|()| fw.flush())
            .map_err(|e| Error::io(&frame_path, e))?;
        let rec = Record {
            schema: SCHEMA_VERSION,
            id: s.id.clone(),
            task: s.task.as_str().into(),
            sensor: s.tactile.sensor.as_str().into(),
            frames: rel,
            question: s.question.clone(),
            answers: s.answers.clone(),
            properties: s.properties.clone(),
            provenance: match s.provenance {
                Provenance::Synthetic => "synthetic".into(),
                Provenance::External => "external".into(),
            },
            latents: s.latents.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<ConversationSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        samples.push(decode(rec, &dir).map_err(|e| match e {
            Error::Io { .. } => e,
            other => parse_err(other.to_string()),
        })?);
    }
    Ok(samples)
}

fn decode(rec: Record, dir: &Path) -> Result<ConversationSample> {
    if rec.schema != SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported schema {} (expected {SCHEMA_VERSION})", rec.schema)));
    }
    let task: Task = rec.task.parse()?;
    let sensor = match rec.sensor.as_str() {
        "gelsight" => Sensor::GelSight,
        "gelsight-mini" => Sensor::GelSightMini,
        other => {
            return Err(Error::Format(format!(
                "invalid sensor `{other}` (allowed: gelsight, gelsight-mini)"
            )))
        }
    };
    let provenance = match rec.provenance.as_str() {
        "synthetic" => Provenance::Synthetic,
        "external" => Provenance::External,
        other => {
            return Err(Error::Format(format!(
                "invalid provenance `{other}` (allowed: synthetic, external)"
            )))
        }
    };
    let frame_path: PathBuf = dir.join(&rec.frames);
    let file = File::open(&frame_path).map_err(|e| Error::io(&frame_path, e))?;
    let (shape, data, _) = sidecar::read_tensor(&mut BufReader::new(file))?;
    let [n, h, w, c] = shape[..] else {
        return Err(Error::Format(format!("frames tensor has shape {shape:?}, expected N×H×W×3")));
    };
    if c != 3 {
        return Err(Error::Format(format!("frames have {c} channels, expected 3")));
    }
    let sample = ConversationSample {
        id: rec.id,
        tactile: TactileClip::new(data, n, h, w, sensor)?,
        question: rec.question,
        answers: rec.answers,
        task,
        properties: rec.properties,
        provenance,
        latents: rec.latents,
    };
    sample.validate()?;
    Ok(sample)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

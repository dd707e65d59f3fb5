use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::tiler::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Jsonl,
    Csv,
    Geojson,
}

impl OutputFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        match ext.as_str() {
            "jsonl" | "ndjson" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            "geojson" | "json" => Ok(Self::Geojson),
            _ => Err(Error::UnsupportedFormat(format!("cannot infer detection format from {}", path.display()))),
        }
    }
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            "geojson" => Ok(Self::Geojson),
            other => Err(Error::UnsupportedFormat(other.to_string())),
        }
    }
}

/// Rounds to 9 significant digits so written values are stable across
/// platforms and round-trip through text.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class: u32,
    class_name: String,
    score: f64,
}

impl Record {
    fn new(d: &Detection, class_names: &[String]) -> Self {
        Self {
            cx: round_sig9(d.cx),
            cy: round_sig9(d.cy),
            w: round_sig9(d.w),
            h: round_sig9(d.h),
            class: d.class_id,
            class_name: class_names.get(d.class_id as usize).cloned().unwrap_or_default(),
            score: round_sig9(d.score),
        }
    }

    fn detection(&self) -> Detection {
        Detection {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
            class_id: self.class,
            score: self.score,
        }
    }
}

/// Writes detections (level-0 pixels) as JSONL, CSV or GeoJSON points.
pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection], format: OutputFormat, class_names: &[String]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    match format {
        OutputFormat::Jsonl => {
            for d in dets {
                serde_json::to_writer(&mut out, &Record::new(d, class_names))?;
                out.write_all(b"\n").map_err(io)?;
            }
        }
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            if dets.is_empty() {
                w.write_record(["cx", "cy", "w", "h", "class", "class_name", "score"])?;
            }
            for d in dets {
                w.serialize(Record::new(d, class_names))?;
            }
            w.flush().map_err(io)?;
        }
        OutputFormat::Geojson => {
            let features: Vec<serde_json::Value> = dets
                .iter()
                .map(|d| {
                    let r = Record::new(d, class_names);
                    json!({
                        "type": "Feature",
                        "geometry": {"type": "Point", "coordinates": [r.cx, r.cy]},
                        "properties": {
                            "w": r.w,
                            "h": r.h,
                            "class": r.class,
                            "class_name": r.class_name,
                            "score": r.score,
                        },
                    })
                })
                .collect();
            let doc = json!({"type": "FeatureCollection", "features": features});
            serde_json::to_writer(&mut out, &doc)?;
            out.write_all(b"\n").map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Reads detections written by [`write_detections`]; the format follows the
/// file extension.
pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let format = OutputFormat::from_path(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        OutputFormat::Jsonl => {
            let mut out = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if !line.trim().is_empty() {
                    out.push(serde_json::from_str::<Detection>(&line)?);
                }
            }
            Ok(out)
        }
        OutputFormat::Csv => {
            let mut r = csv::Reader::from_reader(file);
            r.deserialize::<Record>()
                .map(|rec| rec.map(|r| r.detection()).map_err(Error::from))
                .collect()
        }
        OutputFormat::Geojson => {
            let doc: serde_json::Value = serde_json::from_reader(BufReader::new(file))?;
            let bad = || Error::UnsupportedFormat(format!("{} is not a detection FeatureCollection", path.display()));
            let features = doc["features"].as_array().ok_or_else(bad)?;
            features
                .iter()
                .map(|f| {
                    let c = &f["geometry"]["coordinates"];
                    let p = &f["properties"];
                    Ok(Detection {
                        cx: c[0].as_f64().ok_or_else(bad)?,
                        cy: c[1].as_f64().ok_or_else(bad)?,
                        w: p["w"].as_f64().ok_or_else(bad)?,
                        h: p["h"].as_f64().ok_or_else(bad)?,
                        class_id: p["class"].as_u64().ok_or_else(bad)? as u32,
                        score: p["score"].as_f64().ok_or_else(bad)?,
                    })
                })
                .collect()
        }
    }
}

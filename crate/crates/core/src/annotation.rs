//! Ground-truth nucleus annotations and their JSONL file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotated nucleus in level-0 pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(rename = "class")]
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tissue: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub records: Vec<AnnotationRecord>,
    /// Resolution of the coordinates, when known.
    pub mpp: Option<f64>,
}

impl AnnotationSet {
    pub fn new(records: Vec<AnnotationRecord>, mpp: Option<f64>) -> Self {
        Self { records, mpp }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks that every class id indexes into a class list of `num_classes`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        match self
            .records
            .iter()
            .position(|r| r.class_id as usize >= num_classes)
        {
            Some(i) => Err(Error::param(format!(
                "annotation {i} has class {} but only {num_classes} classes are configured",
                self.records[i].class_id
            ))),
            None => Ok(()),
        }
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            records.push(rec);
        }
        Ok(Self { records, mpp: None })
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Uniform bucket grid over annotation centroids for rectangle queries.
#[derive(Debug, Clone)]
pub struct CentroidIndex {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
}

impl CentroidIndex {
    pub fn new(records: &[AnnotationRecord], cell: f64) -> Self {
        let cell = cell.max(1.0);
        let max_x = records.iter().map(|r| r.cx).fold(0.0, f64::max);
        let max_y = records.iter().map(|r| r.cy).fold(0.0, f64::max);
        let cols = (max_x / cell) as usize + 1;
        let rows = (max_y / cell) as usize + 1;
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, r) in records.iter().enumerate() {
            let (c, row) = Self::clamp_cell(r.cx, r.cy, cell, cols, rows);
            buckets[row * cols + c].push(i as u32);
        }
        Self {
            cell,
            cols,
            rows,
            buckets,
        }
    }

    fn clamp_cell(x: f64, y: f64, cell: f64, cols: usize, rows: usize) -> (usize, usize) {
        let c = ((x / cell).floor().max(0.0) as usize).min(cols - 1);
        let r = ((y / cell).floor().max(0.0) as usize).min(rows - 1);
        (c, r)
    }

    /// Indices of records whose centroid lies in `[x0,x1) x [y0,y1)`, ascending.
    pub fn query(&self, records: &[AnnotationRecord], x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<usize> {
        if x1 <= x0 || y1 <= y0 {
            return Vec::new();
        }
        let (c0, r0) = Self::clamp_cell(x0, y0, self.cell, self.cols, self.rows);
        let (c1, r1) = Self::clamp_cell(x1, y1, self.cell, self.cols, self.rows);
        let mut out = Vec::new();
        for row in r0..=r1 {
            for col in c0..=c1 {
                for &i in &self.buckets[row * self.cols + col] {
                    let r = &records[i as usize];
                    if r.cx >= x0 && r.cx < x1 && r.cy >= y0 && r.cy < y1 {
                        out.push(i as usize);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

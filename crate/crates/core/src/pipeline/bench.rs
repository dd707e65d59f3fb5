use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_slide, PipelineConfig, PipelineError, TimingReport};
use crate::detector::BackendFactory;
use crate::error::{Error, Result};
use crate::slide_io::SlideSource;

/// Least-squares line `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl LineFit {
    /// With no spread in `x` the line is forced through the origin.
    pub fn fit(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::param("line fit needs equally many x and y values, at least one"));
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let (slope, intercept) = if sxx > 1e-12 * (1.0 + mx * mx) {
            (sxy / sxx, my - sxy / sxx * mx)
        } else {
            let x2: f64 = xs.iter().map(|x| x * x).sum();
            if x2 == 0.0 {
                (0.0, my)
            } else {
                (xs.iter().zip(ys).map(|(x, y)| x * y).sum::<f64>() / x2, 0.0)
            }
        };
        let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
        let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
        Ok(Self { slope, intercept, r2 })
    }
}

/// Exponent `k` of the best fit `y ~ x^k` (log-log regression).
pub fn power_law_exponent(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.iter().chain(ys).any(|v| *v <= 0.0) {
        return Err(Error::param("power-law fit needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    Ok(LineFit::fit(&lx, &ly)?.slope)
}

pub struct BenchJob {
    pub name: String,
    pub slide: SlideSource,
    pub factory: Box<dyn BackendFactory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub slide: String,
    pub area_mm2: f64,
    pub preprocess_s: f64,
    pub inference_s: f64,
    pub postprocess_s: f64,
    pub total_s: f64,
    pub throughput_mm2_per_s: f64,
    pub detections: usize,
}

impl BenchRow {
    pub fn new(slide: impl Into<String>, t: &TimingReport, detections: usize) -> Self {
        Self {
            slide: slide.into(),
            area_mm2: t.tissue_area_mm2,
            preprocess_s: t.preprocess_s,
            inference_s: t.inference_s,
            postprocess_s: t.postprocess_s,
            total_s: t.total_s,
            throughput_mm2_per_s: t.throughput_mm2_per_s,
            detections,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Total time against tissue area.
    pub fit_total: LineFit,
    pub fit_inference: LineFit,
    pub fit_postprocess: LineFit,
}

impl BenchReport {
    pub fn from_rows(rows: Vec<BenchRow>) -> Result<Self> {
        let area: Vec<f64> = rows.iter().map(|r| r.area_mm2).collect();
        let col = |f: fn(&BenchRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            fit_total: LineFit::fit(&area, &col(|r| r.total_s))?,
            fit_inference: LineFit::fit(&area, &col(|r| r.inference_s))?,
            fit_postprocess: LineFit::fit(&area, &col(|r| r.postprocess_s))?,
            rows,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs every slide in turn and fits time against tissue area.
pub fn run_bench(cfg: &PipelineConfig, jobs: &[BenchJob]) -> std::result::Result<BenchReport, PipelineError> {
    if jobs.is_empty() {
        return Err(Error::param("bench needs at least one slide").into());
    }
    let mut rows = Vec::with_capacity(jobs.len());
    for job in jobs {
        let out = run_slide(cfg, &job.slide, job.factory.as_ref())?;
        log::info!("{}: {:.2} mm2 in {:.3}s", job.name, out.timing.tissue_area_mm2, out.timing.total_s);
        rows.push(BenchRow::new(job.name.clone(), &out.timing, out.detections.len()));
    }
    Ok(BenchReport::from_rows(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(area: f64, total: f64) -> BenchRow {
        BenchRow {
            slide: "s".into(),
            area_mm2: area,
            preprocess_s: 0.0,
            inference_s: total,
            postprocess_s: 0.0,
            total_s: total,
            throughput_mm2_per_s: area / total,
            detections: 0,
        }
    }

    #[test]
    fn line_fit_exact() {
        let f = LineFit::fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        assert!(LineFit::fit(&[], &[]).is_err());
    }

    #[test]
    fn identical_slides_fit_through_origin() {
        let rep = BenchReport::from_rows(vec![row(300.0, 100.0), row(300.0, 100.0)]).unwrap();
        assert!((rep.fit_total.slope - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rep.fit_total.intercept, 0.0);
        assert_eq!(rep.rows[0].throughput_mm2_per_s, 3.0);
    }

    #[test]
    fn power_law() {
        let xs = [1e3, 1e4, 1e5];
        let ys: Vec<f64> = xs.iter().map(|x| 2e-6 * x).collect();
        assert!((power_law_exponent(&xs, &ys).unwrap() - 1.0).abs() < 1e-9);
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        assert!((power_law_exponent(&xs, &sq).unwrap() - 2.0).abs() < 1e-9);
        assert!(power_law_exponent(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        BenchReport::from_rows(vec![row(1.0, 2.0)]).unwrap().write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("slide,area_mm2,preprocess_s,inference_s,postprocess_s,total_s,throughput_mm2_per_s,detections\n"));
    }

    #[test]
    fn empty_job_list() {
        let err = run_bench(&PipelineConfig::default(), &[]).unwrap_err();
        assert!(matches!(err.error, Error::InvalidParam(_)));
    }
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use pansharp::gp::FidelityRecord;
use pansharp::gppnn::EpochRecord;
use pansharp::metrics::{fmt_metric, MetricsReport};
use pansharp::Tensor;
use serde::Serialize;

pub const RUN_CONFIG: &str = "run_config.json";

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))
}

pub fn metric_fields(m: &MetricsReport) -> [String; 4] {
    [fmt_metric(m.psnr), fmt_metric(m.ssim), fmt_metric(m.sam), fmt_metric(m.ergas)]
}

pub fn write_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "train_loss", "val_psnr"])?;
    for r in trace {
        let val = r.val_psnr.map(fmt_metric).unwrap_or_default();
        // full precision so that reruns can be compared bit for bit
        w.write_record([r.epoch.to_string(), format!("{:e}", r.train_loss), val])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fidelity(path: &Path, trace: &[FidelityRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "f", "g", "total"])?;
    for r in trace {
        w.write_record([
            r.iteration.to_string(),
            format!("{:e}", r.f),
            format!("{:e}", r.g),
            format!("{:e}", r.total()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// 8-bit binary PPM of the first three bands of the first image; fewer
/// bands are repeated.
pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (_, c, h, w) = img.dims4()?;
    let plane = h * w;
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let data = img.data();
    let mut px = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for b in 0..3 {
            let v = data[b.min(c - 1) * plane + i];
            px.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&px)?;
    out.flush()?;
    Ok(())
}

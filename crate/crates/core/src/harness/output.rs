//! Result files: `results.csv`, per-run history CSVs and binary PGM images.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::HistoryEntry;
use crate::image::ImageBatch;

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    #[serde(rename = "E")]
    pub epochs: usize,
    #[serde(rename = "N")]
    pub local_size: usize,
    #[serde(rename = "B")]
    pub batch_size: usize,
    #[serde(rename = "R")]
    pub rounds: usize,
    pub variant: String,
    #[serde(rename = "use_NLP")]
    pub use_nlp: bool,
    #[serde(rename = "use_PR")]
    pub use_pr: bool,
    pub trial: usize,
    pub seed: u64,
    pub lsim: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub wall_minutes: f64,
    pub param_count: usize,
    /// Mean PSNR under the corruption threshold.
    pub corrupted: bool,
    pub mem_bytes: usize,
    /// Curvature of the attacked round's training path.
    pub nonlinearity: f64,
    /// Empty unless the run failed.
    pub error: String,
}

impl RunRecord {
    /// Identifier used in output file names.
    pub fn run_id(&self) -> String {
        let flags = match (self.use_nlp, self.use_pr) {
            (true, true) => "",
            (true, false) => "-nlp",
            (false, true) => "-pr",
            (false, false) if self.variant == "nlsme" => "-none",
            _ => "",
        };
        format!(
            "{}_E{}_N{}_B{}_R{}_{}{}_t{}",
            self.dataset, self.epochs, self.local_size, self.batch_size, self.rounds, self.variant, flags, self.trial
        )
    }
}

pub fn write_results_csv(path: &Path, records: &[RunRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> csv::Result<Vec<RunRecord>> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

/// `iter,total,Lcos,Ltv,Lp,Ld,t`
pub fn write_history_csv(path: &Path, history: &[HistoryEntry]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "total", "Lcos", "Ltv", "Lp", "Ld", "t"])?;
    for h in history {
        w.write_record([
            h.iteration.to_string(),
            h.total.to_string(),
            h.lcos.to_string(),
            h.ltv.to_string(),
            h.lp.to_string(),
            h.ld.to_string(),
            h.t.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn pixel_to_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (`P5`, maxval 255). Channels of a multi-channel image are
/// stacked vertically, giving a `(C·H)×W` picture.
pub fn encode_pgm(pixels: &[f64], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count does not match {width}x{height}");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| pixel_to_byte(p)));
    out
}

pub fn write_pgm(path: &Path, pixels: &[f64], width: usize, height: usize) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(pixels, width, height))
}

/// Parses a binary PGM with maxval 255 into `(width, height, pixels/255)`.
pub fn decode_pgm(bytes: &[u8]) -> io::Result<(usize, usize, Vec<f64>)> {
    let invalid = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(invalid("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| invalid("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(invalid("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| invalid("bad PGM header number"));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(invalid("only maxval 255 is supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() < width * height {
        return Err(invalid("truncated PGM data"));
    }
    Ok((width, height, data[..width * height].iter().map(|&b| b as f64 / 255.0).collect()))
}

/// Writes image `i` of `batch` as a PGM.
pub fn write_image_pgm(path: &Path, batch: &ImageBatch, i: usize) -> io::Result<()> {
    write_pgm(path, batch.image(i), batch.width, batch.channels * batch.height)
}

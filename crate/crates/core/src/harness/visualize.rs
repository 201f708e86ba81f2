//! Per-frame image exports: the raw frame, the code-assignment map and one
//! heatmap per region mask, all at frame resolution.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::model::{Model, QuantizeMode};
use crate::datagen::SamplePair;
use crate::encoders::VideoBatch;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

/// Region masks and code assignments of one video.
#[derive(Clone, Debug)]
pub struct VideoMaps {
    /// `T×K×H'×W'`; `None` when aggregation is disabled.
    pub masks: Option<Tensor>,
    /// `T×H'×W'` code indices; `None` when quantization is disabled.
    pub assignments: Option<Vec<usize>>,
    pub grid: usize,
    pub patch: usize,
}

pub fn video_maps(model: &Model, sample: &SamplePair) -> Result<VideoMaps> {
    let s = sample.video.shape().to_vec();
    let video = VideoBatch::new(sample.video.clone().reshape(&[1, s[0], s[1], s[2], s[3]])?)?;
    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let v = model.video_forward(&mut tape, &bound, &video, QuantizeMode::Nearest)?;
    let grid = model.encoders.config.grid();
    let masks = match v.masks {
        Some(m) => {
            let k = model.config.regions;
            Some(tape.value(m).clone().reshape(&[s[0], k, grid, grid])?)
        }
        None => None,
    };
    Ok(VideoMaps { masks, assignments: v.assignments.map(|a| a.indices), grid, patch: model.config.patch })
}

impl VideoMaps {
    /// Mask-weighted mean of the cell centres of mask `k` in frame `t`, in
    /// pixel coordinates `(x, y)`.
    /// Number of region masks per frame, 0 when aggregation is disabled.
    pub fn regions(&self) -> usize {
        self.masks.as_ref().map_or(0, |m| m.shape()[1])
    }

    pub fn center_of_mass(&self, t: usize, k: usize) -> Option<(f64, f64)> {
        let masks = self.masks.as_ref()?;
        let g = self.grid;
        let p = self.patch as f64;
        let (mut x, mut y, mut total) = (0.0, 0.0, 0.0);
        for gy in 0..g {
            for gx in 0..g {
                let w = masks.at(&[t, k, gy, gx]);
                x += w * (gx as f64 + 0.5) * p;
                y += w * (gy as f64 + 0.5) * p;
                total += w;
            }
        }
        Some((x / total, y / total))
    }
}

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, maxval: u16, samples: &[u16]) -> Result<()> {
    let mut out = Vec::with_capacity(samples.len() * 2 + 32);
    write!(out, "{magic}\n{width} {height}\n{maxval}\n")?;
    for &s in samples {
        if maxval < 256 {
            out.push(s as u8);
        } else {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Writes, for every frame `t`: `frame{t}_image.ppm`, `frame{t}_assign.pgm`
/// (when quantizing) and `frame{t}_mask{k}.ppm` for each region (when
/// aggregating). Mask pixels are `round(65535·mask)` replicated over the
/// patch and over the three channels.
pub fn visualize(model: &Model, sample: &SamplePair, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let maps = video_maps(model, sample)?;
    let shape = sample.video.shape();
    let (frames, h, w) = (shape[0], shape[2], shape[3]);
    let (g, p) = (maps.grid, maps.patch);
    let mut written = Vec::new();
    for t in 0..frames {
        let mut rgb = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    rgb.push((sample.video.at(&[t, c, y, x]).clamp(0.0, 1.0) * 255.0).round() as u16);
                }
            }
        }
        let path = out_dir.join(format!("frame{t}_image.ppm"));
        write_pnm(&path, "P6", w, h, 255, &rgb)?;
        written.push(path);

        if let Some(a) = &maps.assignments {
            let maxval = (model.codebook.size() - 1).max(1) as u16;
            let pix: Vec<u16> = (0..h * w).map(|i| a[t * g * g + (i / w / p) * g + (i % w) / p] as u16).collect();
            let path = out_dir.join(format!("frame{t}_assign.pgm"));
            write_pnm(&path, "P5", w, h, maxval, &pix)?;
            written.push(path);
        }
        if let Some(masks) = &maps.masks {
            for k in 0..masks.shape()[1] {
                let mut pix = Vec::with_capacity(h * w * 3);
                for i in 0..h * w {
                    let v = masks.at(&[t, k, i / w / p, (i % w) / p]);
                    let s = (v * 65535.0).round() as u16;
                    pix.extend([s, s, s]);
                }
                let path = out_dir.join(format!("frame{t}_mask{k}.ppm"));
                write_pnm(&path, "P6", w, h, 65535, &pix)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Parsed binary PGM/PPM: `(channels, width, height, maxval, samples)`.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, u16, Vec<u16>)> {
    let bytes = fs::read(path)?;
    let corrupt = || Error::Corrupt(format!("{} is not a binary PGM/PPM", path.display()));
    let mut fields = Vec::new();
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
            return Err(corrupt());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(corrupt()),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt());
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])? as u16);
    let data = bytes.get(pos..).ok_or_else(corrupt)?;
    let samples: Vec<u16> = if maxval < 256 {
        data.iter().map(|&b| u16::from(b)).collect()
    } else {
        data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    };
    if samples.len() != w * h * channels {
        return Err(corrupt());
    }
    Ok((channels, w, h, maxval, samples))
}

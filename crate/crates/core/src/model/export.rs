//! Attention-map export: one comma-separated matrix per encoder (and per
//! head on request) plus a JSON sidecar describing every file.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::LogMelSegment;
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

use super::AttentionMaps;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub sample_id: String,
    /// `logmel`, `time`, `freq` or `fusion`.
    pub encoder: String,
    /// `None` for the head average (and for the input matrix).
    pub head: Option<usize>,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub row_axis: String,
    pub col_axis: String,
}

/// Row-major matrix as comma-separated text, one row per line.
pub fn matrix_to_csv(rows: usize, cols: usize, data: &[f64]) -> String {
    let mut s = String::with_capacity(rows * cols * 12);
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                s.push(',');
            }
            write!(s, "{}", data[r * cols + c]).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Parses text written by [`matrix_to_csv`].
pub fn matrix_from_csv(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("matrix", format!("line {}: {e}", i + 1)))?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(Error::format("matrix", format!("line {} is ragged", i + 1)));
        }
        data.extend(row);
        rows += 1;
    }
    Ok((rows, cols.unwrap_or(0), data))
}

/// Writes the input spectrogram and the attention maps of batch entry
/// `index` into `out_dir`. Each map is averaged over heads; `per_head` adds
/// one file per head.
pub fn export_attention<T: Real>(
    out_dir: &Path,
    sample_id: &str,
    segment: &LogMelSegment,
    maps: &AttentionMaps<T>,
    index: usize,
    per_head: bool,
) -> Result<Vec<MatrixRecord>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = sanitize(sample_id);
    let mut records = Vec::new();
    let mut emit = |encoder: &str, head: Option<usize>, rows, cols, data: &[f64], axes: (&str, &str)| {
        let file = match head {
            Some(h) => format!("{stem}.{encoder}.head{h}.csv"),
            None => format!("{stem}.{encoder}.csv"),
        };
        let path = out_dir.join(&file);
        std::fs::write(&path, matrix_to_csv(rows, cols, data)).map_err(|e| Error::io(&path, e))?;
        records.push(MatrixRecord {
            sample_id: sample_id.to_owned(),
            encoder: encoder.to_owned(),
            head,
            file,
            rows,
            cols,
            row_axis: axes.0.to_owned(),
            col_axis: axes.1.to_owned(),
        });
        Ok::<_, Error>(())
    };

    let logmel: Vec<f64> = segment.values.iter().map(|&v| v as f64).collect();
    emit("logmel", None, segment.n_bands, segment.n_frames, &logmel, ("band", "frame"))?;

    let encoders = [
        ("time", &maps.time, ("frame", "frame")),
        ("freq", &maps.freq, ("band", "band")),
        ("fusion", &maps.fusion, ("reduced_band", "reduced_band")),
    ];
    for (name, map, axes) in encoders {
        let Some(map) = map else { continue };
        let s = map.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(Error::Shape(format!("{name} attention {s:?}, entry {index}")));
        }
        let (heads, l, m) = (s[1], s[2], s[3]);
        let block = &map.data()[index * heads * l * m..(index + 1) * heads * l * m];
        let mut mean = vec![0.0; l * m];
        for h in 0..heads {
            let head: Vec<f64> = block[h * l * m..(h + 1) * l * m]
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect();
            mean.iter_mut().zip(&head).for_each(|(a, b)| *a += b / heads as f64);
            if per_head {
                emit(name, Some(h), l, m, &head, axes)?;
            }
        }
        emit(name, None, l, m, &mean, axes)?;
    }

    let meta = out_dir.join(format!("{stem}.meta.json"));
    let json = serde_json::to_string_pretty(&records).expect("records serialise");
    std::fs::write(&meta, json).map_err(|e| Error::io(&meta, e))?;
    Ok(records)
}

/// Head-averaged map of batch entry `index` from `(b, heads, L, M)`.
pub fn head_average<T: Real>(map: &Tensor<T>, index: usize) -> Vec<f64> {
    let s = map.shape();
    let (heads, lm) = (s[1], s[2] * s[3]);
    let block = &map.data()[index * heads * lm..(index + 1) * heads * lm];
    (0..lm)
        .map(|j| (0..heads).map(|h| block[h * lm + j].to_f64_lossy()).sum::<f64>() / heads as f64)
        .collect()
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

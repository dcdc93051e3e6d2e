//! Per-segment loudness profile of a directory of `*_k_of_N.wav` files.
//!
//! For each segment index `k` the table holds the mean over files of
//! `mean|x|` and of the standard deviation of per-second RMS ("variation").

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::signal::wav::read_wav;
use crate::signal::Waveform;

/// Parses a `_k_of_N` suffix from a file stem, e.g. `song_2_of_4.wav`.
pub fn parse_segment_tag(path: &Path) -> Option<(usize, usize)> {
    let stem = path.file_stem()?.to_str()?;
    let mut it = stem.rsplitn(4, '_');
    let total = it.next()?.parse().ok()?;
    if it.next()? != "of" {
        return None;
    }
    let index = it.next()?.parse().ok()?;
    it.next()?;
    (index >= 1 && index <= total).then_some((index, total))
}

/// `(mean|x|, std of per-second RMS)` over all channels.
///
/// Windows are whole seconds; a signal shorter than one second forms a
/// single window.
pub fn segment_stats(w: &Waveform) -> (f64, f64) {
    let n = w.len();
    let c = w.channels();
    let mean_abs = w.samples().iter().map(|&x| x.abs() as f64).sum::<f64>() / (n * c) as f64;
    let win = (w.sample_rate() as usize).min(n).max(1);
    let rms: Vec<f64> = (0..n / win)
        .map(|k| {
            let mut acc = 0.0;
            for ch in 0..c {
                for &x in &w.channel(ch)[k * win..(k + 1) * win] {
                    acc += x as f64 * x as f64;
                }
            }
            (acc / (win * c) as f64).sqrt()
        })
        .collect();
    let m = rms.iter().sum::<f64>() / rms.len() as f64;
    let var = rms.iter().map(|r| (r - m).powi(2)).sum::<f64>() / rms.len() as f64;
    (mean_abs, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRow {
    pub segment: usize,
    pub files: usize,
    pub mean_abs: f64,
    pub rms_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Profile {
    pub rows: Vec<SegmentRow>,
    pub skipped: Vec<(PathBuf, String)>,
}

impl Profile {
    pub fn from_files(files: &[(usize, Waveform)]) -> Self {
        let mut acc: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
        for (k, w) in files {
            let (a, v) = segment_stats(w);
            let e = acc.entry(*k).or_default();
            e.0 += 1;
            e.1 += a;
            e.2 += v;
        }
        Self {
            rows: acc
                .into_iter()
                .map(|(segment, (files, a, v))| SegmentRow {
                    segment,
                    files,
                    mean_abs: a / files as f64,
                    rms_std: v / files as f64,
                })
                .collect(),
            skipped: Vec::new(),
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::from("segment  files  mean|x|   variation (std of per-second RMS)\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>7}  {:>5}  {:.6}  {:.6}",
                r.segment, r.files, r.mean_abs, r.rms_std
            );
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("segment,files,mean_abs,rms_std\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6}",
                r.segment, r.files, r.mean_abs, r.rms_std
            );
        }
        s
    }
}

/// Profiles every `.wav` file directly inside `dir`; untagged or unreadable
/// files are reported in [`Profile::skipped`].
pub fn profile_dir(dir: impl AsRef<Path>) -> Result<Profile> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        let Some((k, _)) = parse_segment_tag(&p) else {
            skipped.push((p, "no `_k_of_N` segment tag".to_string()));
            continue;
        };
        match read_wav(&p) {
            Ok(w) => files.push((k, w)),
            Err(e) => skipped.push((p, e.to_string())),
        }
    }
    if files.is_empty() {
        return Err(Error::Format(format!(
            "no tagged WAV files in {}",
            dir.display()
        )));
    }
    let mut profile = Profile::from_files(&files);
    profile.skipped = skipped;
    Ok(profile)
}

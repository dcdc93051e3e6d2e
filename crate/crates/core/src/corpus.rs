//! Track manifests, prompt construction and (audio crop, prompt) pairing.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::wav::{read_wav, wav_info};
use crate::signal::Waveform;
use crate::train::{chunk_count, crop, CropMode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackRecord {
    pub audio_path: PathBuf,
    pub title: String,
    pub artist: String,
    pub album: String,
    pub genre: String,
    pub year: String,
    pub chunk_total: usize,
}

impl TrackRecord {
    /// Non-empty metadata fields in manifest order.
    pub fn fields(&self) -> Vec<&str> {
        [
            &self.title,
            &self.artist,
            &self.album,
            &self.genre,
            &self.year,
        ]
        .into_iter()
        .map(|s| s.as_str())
        .filter(|s| !s.is_empty())
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub drop_prob: f64,
    pub comma_prob: f64,
    pub shuffle: bool,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            drop_prob: 0.1,
            comma_prob: 0.5,
            shuffle: true,
        }
    }
}

impl PromptSpec {
    /// No dropping, no shuffling, always comma-joined.
    pub fn canonical() -> Self {
        Self {
            drop_prob: 0.0,
            comma_prob: 1.0,
            shuffle: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.drop_prob) && (0.0..=1.0).contains(&self.comma_prob) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "prompt probabilities out of [0, 1]: {self:?}"
            )))
        }
    }
}

/// The outcome of one prompt build, with the random decisions exposed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptDraw {
    pub text: String,
    /// Metadata fields in the order they were considered, with their keep flags.
    pub fields: Vec<(String, bool)>,
    pub comma: bool,
}

pub fn chunk_tag(index: usize, total: usize) -> String {
    format!("{index} of {total}")
}

pub fn draw_prompt(
    rec: &TrackRecord,
    chunk_index: usize,
    spec: &PromptSpec,
    rng: &mut impl Rng,
) -> Result<PromptDraw> {
    spec.validate()?;
    if chunk_index == 0 || chunk_index > rec.chunk_total {
        return Err(Error::InvalidArgument(format!(
            "chunk {chunk_index} outside 1..={}",
            rec.chunk_total
        )));
    }
    let mut fields: Vec<String> = rec.fields().into_iter().map(String::from).collect();
    if spec.shuffle {
        fields.shuffle(rng);
    }
    let fields: Vec<(String, bool)> = fields
        .into_iter()
        .map(|f| {
            let keep = !rng.random_bool(spec.drop_prob);
            (f, keep)
        })
        .collect();
    let comma = rng.random_bool(spec.comma_prob);
    let mut parts: Vec<&str> = fields
        .iter()
        .filter(|(_, keep)| *keep)
        .map(|(f, _)| f.as_str())
        .collect();
    let tag = chunk_tag(chunk_index, rec.chunk_total);
    parts.push(&tag);
    let text = parts.join(if comma { ", " } else { " " });
    Ok(PromptDraw {
        text,
        fields,
        comma,
    })
}

/// Shuffled, randomly thinned metadata followed by the `k of N` chunk tag.
pub fn build_prompt(
    rec: &TrackRecord,
    chunk_index: usize,
    spec: &PromptSpec,
    rng: &mut impl Rng,
) -> Result<String> {
    Ok(draw_prompt(rec, chunk_index, spec, rng)?.text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<TrackRecord>,
    pub issues: Vec<ManifestIssue>,
}

/// Parses a tab-separated manifest: `audio_path, title, artist, album, genre, year`.
///
/// Relative audio paths resolve against the manifest's directory. Blank lines
/// and lines starting with `#` are skipped. Malformed lines are collected in
/// [`Manifest::issues`] while the remaining lines still load.
pub fn load_manifest(path: impl AsRef<Path>, crop_length: usize) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, crop_length)
}

pub fn parse_manifest(text: &str, base: &Path, crop_length: usize) -> Result<Manifest> {
    if crop_length == 0 {
        return Err(Error::InvalidArgument(
            "crop length must be positive".into(),
        ));
    }
    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut seen = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        seen += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            issues.push(ManifestIssue {
                line: line_no,
                message: format!("expected 6 tab-separated fields, found {}", cols.len()),
            });
            continue;
        }
        let audio = cols[0].trim();
        if audio.is_empty() {
            issues.push(ManifestIssue {
                line: line_no,
                message: "missing audio_path".into(),
            });
            continue;
        }
        let audio_path = base.join(audio);
        let frames = match wav_info(&audio_path) {
            Ok((frames, _, _)) => frames,
            Err(e) => {
                issues.push(ManifestIssue {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let field = |k: usize| cols[k].trim().to_string();
        records.push(TrackRecord {
            audio_path,
            title: field(1),
            artist: field(2),
            album: field(3),
            genre: field(4),
            year: field(5),
            chunk_total: chunk_count(frames, crop_length),
        });
    }
    if seen == 0 {
        return Err(Error::Format("manifest has no entries".into()));
    }
    if records.is_empty() {
        let report: Vec<String> = issues
            .iter()
            .map(|i| format!("line {}: {}", i.line, i.message))
            .collect();
        return Err(Error::Format(format!(
            "no usable manifest lines ({})",
            report.join("; ")
        )));
    }
    Ok(Manifest { records, issues })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Random crops, prompts unused.
    One,
    /// Every fixed chunk of every track, with a matching `k of N` prompt.
    Two,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub audio: Waveform,
    pub prompt: Option<String>,
    pub record: usize,
    /// 1-based chunk index for stage two, 0 for random crops.
    pub chunk: usize,
}

/// Decoded tracks keyed by path, shared across epochs.
#[derive(Debug, Clone, Default)]
pub struct AudioCache {
    tracks: HashMap<PathBuf, Waveform>,
}

impl AudioCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, path: &Path) -> Result<&Waveform> {
        if !self.tracks.contains_key(path) {
            let w = read_wav(path)?;
            self.tracks.insert(path.to_path_buf(), w);
        }
        Ok(&self.tracks[path])
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

/// One epoch of pairs in an order drawn from `rng`.
pub struct PairIter<'a> {
    records: &'a [TrackRecord],
    order: Vec<(usize, usize)>,
    pos: usize,
    crop_length: usize,
    stage: Stage,
    spec: PromptSpec,
    rng: ChaCha8Rng,
    audio: &'a mut AudioCache,
}

pub fn make_pairs<'a>(
    records: &'a [TrackRecord],
    crop_length: usize,
    stage: Stage,
    spec: PromptSpec,
    mut rng: ChaCha8Rng,
    audio: &'a mut AudioCache,
) -> Result<PairIter<'a>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no track records".into()));
    }
    if crop_length == 0 {
        return Err(Error::InvalidArgument(
            "crop length must be positive".into(),
        ));
    }
    let mut order: Vec<(usize, usize)> = match stage {
        Stage::One => (0..records.len()).map(|r| (r, 0)).collect(),
        Stage::Two => records
            .iter()
            .enumerate()
            .flat_map(|(r, rec)| (1..=rec.chunk_total).map(move |k| (r, k)))
            .collect(),
    };
    order.shuffle(&mut rng);
    Ok(PairIter {
        records,
        order,
        pos: 0,
        crop_length,
        stage,
        spec,
        rng,
        audio,
    })
}

impl PairIter<'_> {
    fn make(&mut self, r: usize, k: usize) -> Result<Pair> {
        let len = self.crop_length;
        let stage = self.stage;
        let mode = match stage {
            Stage::One => CropMode::Random,
            Stage::Two => CropMode::Fixed(k - 1),
        };
        let w = self.audio.get(&self.records[r].audio_path)?;
        let audio = crop(w, len, mode, &mut self.rng)?;
        let prompt = match stage {
            Stage::One => None,
            Stage::Two => Some(build_prompt(
                &self.records[r],
                k,
                &self.spec,
                &mut self.rng,
            )?),
        };
        Ok(Pair {
            audio,
            prompt,
            record: r,
            chunk: k,
        })
    }
}

impl Iterator for PairIter<'_> {
    type Item = Result<Pair>;

    fn next(&mut self) -> Option<Self::Item> {
        let &(r, k) = self.order.get(self.pos)?;
        self.pos += 1;
        Some(self.make(r, k))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.order.len() - self.pos;
        (n, Some(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn record(total: usize) -> TrackRecord {
        TrackRecord {
            audio_path: PathBuf::from("x.wav"),
            title: "Egyptian Darbuka".into(),
            artist: "Drums".into(),
            album: "Rythm".into(),
            genre: "(Deluxe Edition)".into(),
            year: String::new(),
            chunk_total: total,
        }
    }

    #[test]
    fn canonical_prompt_is_golden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = build_prompt(&record(4), 2, &PromptSpec::canonical(), &mut rng).unwrap();
        assert_eq!(
            p,
            "Egyptian Darbuka, Drums, Rythm, (Deluxe Edition), 2 of 4"
        );
    }

    #[test]
    fn dropping_everything_leaves_the_tag() {
        let spec = PromptSpec {
            drop_prob: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(
                build_prompt(&record(4), 3, &spec, &mut rng).unwrap(),
                "3 of 4"
            );
        }
    }

    #[test]
    fn tag_is_last_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = build_prompt(&record(1), 1, &PromptSpec::default(), &mut rng).unwrap();
            assert!(p.ends_with("1 of 1"), "{p}");
        }
        assert!(build_prompt(&record(4), 0, &PromptSpec::default(), &mut rng).is_err());
        assert!(build_prompt(&record(4), 5, &PromptSpec::default(), &mut rng).is_err());
    }

    #[test]
    fn manifest_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let w = Waveform::new(vec![0.1; 100], 1, 8000).unwrap();
        crate::signal::wav::write_wav(dir.path().join("a.wav"), &w, Default::default()).unwrap();
        let text = "a.wav\tT\tA\tB\tG\t1999\n\
                    \tT\tA\tB\tG\t1999\n\
                    a.wav\tT\tA\n\
                    a.wav\tT2\t\t\t\t\n\
                    missing.wav\tT\tA\tB\tG\t1999\n";
        let m = parse_manifest(text, dir.path(), 40).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].chunk_total, 3);
        assert_eq!(m.records[1].fields(), vec!["T2"]);
        let lines: Vec<usize> = m.issues.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![2, 3, 5]);
        assert!(m.issues[0].message.contains("audio_path"));
        assert!(parse_manifest("# only a comment\n", dir.path(), 40).is_err());
    }
}

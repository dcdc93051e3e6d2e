use std::collections::HashMap;
use std::path::PathBuf;

use mudiff::corpus::{
    build_prompt, draw_prompt, load_manifest, make_pairs, AudioCache, PromptSpec, Stage,
    TrackRecord,
};
use mudiff::signal::wav::{write_wav, WavEncoding};
use mudiff::signal::Waveform;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn record(fields: [&str; 5], total: usize) -> TrackRecord {
    TrackRecord {
        audio_path: PathBuf::from("unused.wav"),
        title: fields[0].into(),
        artist: fields[1].into(),
        album: fields[2].into(),
        genre: fields[3].into(),
        year: fields[4].into(),
        chunk_total: total,
    }
}

#[test]
fn drop_and_comma_frequencies() {
    let rec = record(
        ["Night Drive", "Synth Trio", "Tapes", "Electronic", "1987"],
        3,
    );
    let spec = PromptSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut dropped, mut fields, mut commas) = (0usize, 0usize, 0usize);
    let builds = 10_000;
    for i in 0..builds {
        let d = draw_prompt(&rec, i % 3 + 1, &spec, &mut rng).unwrap();
        fields += d.fields.len();
        dropped += d.fields.iter().filter(|(_, keep)| !keep).count();
        commas += d.comma as usize;
        assert!(d.text.ends_with(&format!("{} of 3", i % 3 + 1)));
    }
    let drop = dropped as f64 / fields as f64;
    let comma = commas as f64 / builds as f64;
    assert!((drop - 0.1).abs() <= 0.01, "drop frequency {drop}");
    assert!((comma - 0.5).abs() <= 0.02, "comma frequency {comma}");
}

#[test]
fn field_orders_are_uniform() {
    let rec = record(["A", "B", "C", "", ""], 1);
    let spec = PromptSpec {
        drop_prob: 0.0,
        ..PromptSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts: HashMap<String, usize> = HashMap::new();
    let n = 12_000;
    for _ in 0..n {
        let d = draw_prompt(&rec, 1, &spec, &mut rng).unwrap();
        let order: String = d.fields.iter().map(|(f, _)| f.as_str()).collect();
        *counts.entry(order).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    let expected = n as f64 / 6.0;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 5 degrees of freedom, p = 0.001.
    assert!(chi2 < 20.52, "chi-square {chi2}");
}

#[test]
fn golden_prompts() {
    let rec = record(
        ["Egyptian Darbuka", "Drums", "Rythm", "(Deluxe Edition)", ""],
        4,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let canonical = PromptSpec::canonical();
    assert_eq!(
        build_prompt(&rec, 2, &canonical, &mut rng).unwrap(),
        "Egyptian Darbuka, Drums, Rythm, (Deluxe Edition), 2 of 4"
    );
    let all_dropped = PromptSpec {
        drop_prob: 1.0,
        ..PromptSpec::default()
    };
    assert_eq!(
        build_prompt(&rec, 3, &all_dropped, &mut rng).unwrap(),
        "3 of 4"
    );
    let spaces = PromptSpec {
        comma_prob: 0.0,
        ..canonical
    };
    assert_eq!(
        build_prompt(&rec, 1, &spaces, &mut rng).unwrap(),
        "Egyptian Darbuka Drums Rythm (Deluxe Edition) 1 of 4"
    );
    assert!(build_prompt(&rec, 5, &canonical, &mut rng).is_err());
    assert!(build_prompt(&rec, 0, &canonical, &mut rng).is_err());
}

fn write_track(dir: &std::path::Path, name: &str, len: usize, level: f32) {
    let w = Waveform::new((0..len).map(|i| level + i as f32 * 1e-6).collect(), 1, 8000).unwrap();
    write_wav(dir.join(name), &w, WavEncoding::Float32).unwrap();
}

#[test]
fn manifest_loading_and_stage_two_pairs() {
    let dir = tempfile::tempdir().unwrap();
    write_track(dir.path(), "four.wav", 4000, 0.1);
    write_track(dir.path(), "one.wav", 700, 0.2);
    let manifest = "four.wav\tLong Song\tBand\tRecord\tRock\t2001\n\
                    \tNo Path\tBand\tRecord\tRock\t2001\n\
                    one.wav\tShort\tSolo\tSingle\tJazz\t1999\n\
                    four.wav\tLong Song\tBand\tRecord\tRock\t2001\n";
    let path = dir.path().join("m.tsv");
    std::fs::write(&path, manifest).unwrap();
    let m = load_manifest(&path, 1000).unwrap();
    assert_eq!(m.records.len(), 3);
    assert_eq!(m.issues.len(), 1);
    assert_eq!(m.issues[0].line, 2);
    assert_eq!(m.records[0].chunk_total, 4);
    assert_eq!(m.records[1].chunk_total, 1);

    let mut cache = AudioCache::new();
    let spec = PromptSpec::canonical();
    let pairs: Vec<_> = make_pairs(
        &m.records,
        1000,
        Stage::Two,
        spec,
        ChaCha8Rng::seed_from_u64(4),
        &mut cache,
    )
    .unwrap()
    .collect::<Result<_, _>>()
    .unwrap();
    assert_eq!(pairs.len(), 9);
    assert_eq!(cache.len(), 2);
    for p in &pairs {
        let rec = &m.records[p.record];
        let prompt = p.prompt.as_deref().unwrap();
        assert!(
            prompt.ends_with(&format!("{} of {}", p.chunk, rec.chunk_total)),
            "{prompt}"
        );
        assert_eq!(p.audio.len(), 1000);
        if rec.chunk_total == 4 {
            let offset = (p.chunk - 1) * 1000;
            let want = 0.1 + offset as f32 * 1e-6;
            assert!((p.audio.samples()[0] - want).abs() < 1e-7);
        } else {
            assert_eq!(p.chunk, 1);
            assert_eq!(p.audio.samples()[999], 0.0);
        }
    }

    let mut cache2 = AudioCache::new();
    let again: Vec<_> = make_pairs(
        &m.records,
        1000,
        Stage::Two,
        spec,
        ChaCha8Rng::seed_from_u64(4),
        &mut cache2,
    )
    .unwrap()
    .collect::<Result<_, _>>()
    .unwrap();
    assert_eq!(again, pairs);

    let mut cache3 = AudioCache::new();
    let one: Vec<_> = make_pairs(
        &m.records,
        500,
        Stage::One,
        spec,
        ChaCha8Rng::seed_from_u64(5),
        &mut cache3,
    )
    .unwrap()
    .collect::<Result<_, _>>()
    .unwrap();
    assert_eq!(one.len(), 3);
    assert!(one
        .iter()
        .all(|p| p.prompt.is_none() && p.audio.len() == 500));
}

#[test]
fn unusable_manifests_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.tsv");
    std::fs::write(&empty, "# nothing\n\n").unwrap();
    assert!(load_manifest(&empty, 100).is_err());
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "missing.wav\ta\tb\tc\td\te\n").unwrap();
    let err = load_manifest(&bad, 100).unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");
    assert!(load_manifest(dir.path().join("absent.tsv"), 100).is_err());
}

use mudiff::signal::wav::{read_wav, write_wav, WavEncoding};
use mudiff::signal::{flatten_freq, istft, stft, unflatten_freq, StftConfig, Waveform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_wave(channels: usize, len: usize, seed: u64) -> Waveform<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new(
        (0..channels * len)
            .map(|_| r.random_range(-1.0..1.0))
            .collect(),
        channels,
        8000,
    )
    .unwrap()
}

fn interior_error(a: &Waveform<f64>, b: &Waveform<f64>, edge: usize) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for ch in 0..a.channels() {
        let (x, y) = (a.channel(ch), b.channel(ch));
        for t in edge..x.len().min(y.len()).saturating_sub(edge) {
            num += (x[t] - y[t]).powi(2);
            den += x[t].powi(2);
        }
    }
    (num / den).sqrt()
}

#[test]
fn default_config_frame_count() {
    let w = Waveform::<f32>::zeros(1, 1 << 18, 48_000).unwrap();
    let s = stft(&w, StftConfig::default()).unwrap();
    assert_eq!(s.frames, 1024);
    assert_eq!(s.bins, 512);
    assert!(s.magnitude.iter().all(|&m| m == 0.0));
}

#[test]
fn stereo_flatten_has_channel_major_rows() {
    let w = random_wave(2, 4096, 1).map(|x| x as f32);
    let s = stft(&w, StftConfig::default()).unwrap();
    let m = flatten_freq(&s);
    assert_eq!(m.rows, 1024);
    assert_eq!(m.data[513 * m.frames + 2], s.magnitude_at(1, 1, 2));
    assert_eq!(unflatten_freq(&m, 2).unwrap(), s.magnitude);
    assert!(unflatten_freq(&m, 3).is_err());
}

#[test]
fn float_and_pcm_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w = random_wave(2, 300, 2).map(|x| (x * 0.9) as f32);
    let f = dir.path().join("f.wav");
    write_wav(&f, &w, WavEncoding::Float32).unwrap();
    assert_eq!(read_wav(&f).unwrap(), w);
    let p = dir.path().join("p.wav");
    write_wav(&p, &w, WavEncoding::Pcm16).unwrap();
    let back = read_wav(&p).unwrap();
    assert_eq!(back.channels(), 2);
    assert_eq!(back.sample_rate(), 8000);
    for (a, b) in w.samples().iter().zip(back.samples()) {
        assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_interior_f64(seed in any::<u64>(), extra in 0usize..700, channels in 1usize..3) {
        let cfg = StftConfig { fft_size: 256, hop: 64 };
        let w = random_wave(channels, 4 * 256 + extra, seed);
        let back = istft(&stft(&w, cfg).unwrap()).unwrap();
        prop_assert!(interior_error(&w, &back, 256) < 1e-12);
    }

    #[test]
    fn round_trip_interior_f32(seed in any::<u64>(), extra in 0usize..700) {
        let cfg = StftConfig { fft_size: 256, hop: 64 };
        let w = random_wave(1, 4 * 256 + extra, seed).map(|x| x as f32);
        let back = istft(&stft(&w, cfg).unwrap()).unwrap();
        let wide = |w: &Waveform<f32>| w.map(|x| x as f64);
        prop_assert!(interior_error(&wide(&w), &wide(&back), 256) < 1e-6);
    }

    #[test]
    fn magnitudes_are_non_negative_and_phases_bounded(seed in any::<u64>()) {
        let w = random_wave(1, 1024, seed);
        let s = stft(&w, StftConfig { fft_size: 128, hop: 32 }).unwrap();
        prop_assert!(s.magnitude.iter().all(|&m| m >= 0.0));
        let pi = std::f64::consts::PI;
        prop_assert!(s.phase.iter().all(|&p| p > -pi - 1e-12 && p <= pi + 1e-12));
        prop_assert_eq!(s.frames, 1024 / 32);
    }
}

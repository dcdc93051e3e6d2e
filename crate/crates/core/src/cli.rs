//! Command-line front end. Every command reports failures as one line
//! `error[<class>]: <message>` and exits 1 (usage), 2 (data) or 3 (numeric).

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Preset, RunConfig};
use crate::corpus::{load_manifest, make_pairs, AudioCache, Stage};
use crate::diffusion::gaussian;
use crate::dmae::{tensor_to_waveforms, DmaeModel};
use crate::error::{Error, ErrorKind, Result};
use crate::nn::Tensor;
use crate::profile::profile_dir;
use crate::signal::wav::{read_wav, write_wav, WavEncoding};
use crate::signal::Waveform;
use crate::tcld::{generate, generation_noise, TcldModel, TextEmbedder};
use crate::train::{
    from_toml, load_model, to_toml, Checkpoint, CheckpointKind, Trainable, Trainer, Weights,
    VERSION,
};

#[derive(Debug, Parser)]
#[command(
    name = "mudiff",
    version,
    about = "Two-stage latent diffusion for text-to-music"
)]
pub struct Cli {
    /// Built-in configuration to start from.
    #[arg(long, global = true, value_enum, conflicts_with = "config")]
    pub preset: Option<Preset>,
    /// TOML run configuration (a complete document, see --dump-config).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    /// Log informational messages (gradient clipping, progress).
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train stage 1 (autoencoder) or stage 2 (text-conditioned generator).
    Train(TrainArgs),
    /// Generate audio from a text prompt.
    Generate(GenerateArgs),
    /// Encode audio to a latent file or decode a latent file to audio.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Describe a checkpoint or latent file.
    Inspect { path: PathBuf },
    /// Per-segment loudness profile of `*_k_of_N.wav` files.
    Profile {
        #[arg(long)]
        dir: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to the configured output_dir.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Total number of optimiser steps (overrides the config).
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Frozen stage-1 checkpoint (required for stage 2).
    #[arg(long)]
    pub stage1: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub stage1: PathBuf,
    #[arg(long)]
    pub stage2: PathBuf,
    #[arg(long)]
    pub steps_gen: Option<usize>,
    #[arg(long)]
    pub steps_dec: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out.wav")]
    pub out: PathBuf,
    /// Use the raw trained weights instead of the EMA weights.
    #[arg(long)]
    pub raw_weights: bool,
}

#[derive(Debug, Subcommand)]
pub enum CodecCommand {
    Encode {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    Decode {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        steps_dec: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or(&msg)
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 1;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            exit_code(e.kind())
        }
    }
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn report(e: &Error) {
    let class = match e.kind() {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
    };
    let mut msg = e.to_string();
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        let text = s.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
        source = s.source();
    }
    eprintln!("error[{class}]: {}", msg.replace('\n', "; "));
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, p) => RunConfig::preset(p.unwrap_or(Preset::Full)),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = run_config(cli)?;
    if cli.dump_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    match &cli.command {
        None => Err(Error::InvalidArgument(
            "no command given (try --help)".into(),
        )),
        Some(Command::Train(a)) => cmd_train(&cfg, a),
        Some(Command::Generate(a)) => cmd_generate(&cfg, a),
        Some(Command::Codec(CodecCommand::Encode {
            stage1,
            input,
            output,
        })) => cmd_encode(stage1, input, output),
        Some(Command::Codec(CodecCommand::Decode {
            stage1,
            input,
            output,
            steps_dec,
            seed,
        })) => cmd_decode(
            stage1,
            input,
            output,
            steps_dec.unwrap_or(cfg.generate.steps_dec),
            seed.unwrap_or(cfg.generate.seed),
        ),
        Some(Command::Inspect { path }) => cmd_inspect(path),
        Some(Command::Profile { dir, csv }) => cmd_profile(dir, csv.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    fn open(path: PathBuf, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn start_trainer<M: Trainable>(
    model_config: &M::Config,
    train: &crate::train::TrainConfig,
    a: &TrainArgs,
) -> Result<Trainer<M>> {
    let mut t = match &a.resume {
        Some(path) => Trainer::<M>::resume(path)?,
        None => Trainer::<M>::new(model_config, train.clone())?,
    };
    if let Some(steps) = a.steps {
        t.config.steps = steps;
    }
    Ok(t)
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let out_dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    if a.stage == 2 && a.stage1.is_none() {
        return Err(Error::InvalidArgument(
            "stage 2 training needs a stage-1 checkpoint (--stage1)".into(),
        ));
    }
    let mut train = if a.stage == 1 {
        cfg.train1.clone()
    } else {
        cfg.train2.clone()
    };
    if let Some(seed) = a.seed {
        train.seed = seed;
    }
    let manifest = load_manifest(&a.manifest, train.crop_length)?;
    for issue in &manifest.issues {
        eprintln!(
            "warning: {}:{}: {}",
            a.manifest.display(),
            issue.line,
            issue.message
        );
    }
    create_dir(&out_dir)?;
    let mut audio = AudioCache::new();
    if a.stage == 1 {
        let mut t = start_trainer::<DmaeModel>(&cfg.stage1, &train, a)?;
        let channels = t.model.config().audio_channels;
        let rate = t.model.config().sample_rate;
        train_loop(
            &mut t,
            &out_dir,
            "stage1",
            a.resume.is_some(),
            |model, rng| {
                let batch = draw_batch(
                    &manifest.records,
                    &mut audio,
                    Stage::One,
                    cfg,
                    rng,
                    channels,
                    rate,
                )?;
                let waves: Vec<Waveform> = batch.into_iter().map(|(w, _)| w).collect();
                model.train_step(&waves, rng)
            },
        )
    } else {
        let ckpt1 = Checkpoint::load(a.stage1.as_ref().unwrap())?;
        let dmae: DmaeModel = load_model(&ckpt1, Weights::Ema)?;
        let mut t = start_trainer::<TcldModel>(&cfg.stage2, &train, a)?;
        check_stage_pair(&dmae, &t.model)?;
        let embedder = t.model.embedder()?;
        let channels = dmae.config().audio_channels;
        let rate = dmae.config().sample_rate;
        train_loop(
            &mut t,
            &out_dir,
            "stage2",
            a.resume.is_some(),
            |model, rng| {
                let batch = draw_batch(
                    &manifest.records,
                    &mut audio,
                    Stage::Two,
                    cfg,
                    rng,
                    channels,
                    rate,
                )?;
                let waves: Vec<Waveform> = batch.iter().map(|(w, _)| w.clone()).collect();
                let latents = dmae.encode_batch(&waves)?.into_tensor();
                let embeddings = batch
                    .iter()
                    .map(|(_, p)| embedder.embed(p.as_deref().unwrap_or("")))
                    .collect::<Result<Vec<_>>>()?;
                let items = (0..waves.len())
                    .map(|i| latents.batch_item(i))
                    .collect::<Result<Vec<_>>>()?;
                let pairs: Vec<(&Tensor, _)> = items.iter().zip(&embeddings).collect();
                model.train_step(&pairs, rng)
            },
        )
    }
}

/// One batch built from a fresh epoch order; depends only on the rng state.
fn draw_batch(
    records: &[crate::corpus::TrackRecord],
    audio: &mut AudioCache,
    stage: Stage,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
    channels: usize,
    rate: u32,
) -> Result<Vec<(Waveform, Option<String>)>> {
    let train = if stage == Stage::One {
        &cfg.train1
    } else {
        &cfg.train2
    };
    let mut out = Vec::with_capacity(train.batch_size);
    while out.len() < train.batch_size {
        let epoch = ChaCha8Rng::seed_from_u64(rng.random());
        for pair in make_pairs(records, train.crop_length, stage, cfg.prompt, epoch, audio)? {
            let pair = pair?;
            if pair.audio.channels() != channels || pair.audio.sample_rate() != rate {
                return Err(Error::Format(format!(
                    "{}: {} channels at {} Hz, model expects {channels} at {rate} Hz",
                    records[pair.record].audio_path.display(),
                    pair.audio.channels(),
                    pair.audio.sample_rate()
                )));
            }
            out.push((pair.audio, pair.prompt));
            if out.len() == train.batch_size {
                break;
            }
        }
    }
    Ok(out)
}

fn train_loop<M: Trainable>(
    t: &mut Trainer<M>,
    out_dir: &Path,
    name: &str,
    append: bool,
    mut step: impl FnMut(&mut M, &mut ChaCha8Rng) -> Result<f32>,
) -> Result<()> {
    let mut log = LossLog::open(out_dir.join(format!("{name}_loss.tsv")), append)?;
    let every = t.config.checkpoint_every;
    while t.step_count() < t.config.steps {
        let record = t.step(&mut step)?;
        log.line(&record.log_line())?;
        if every > 0 && record.step % every == 0 {
            t.save(out_dir.join(format!("{name}_step{:07}.ckpt", record.step)))?;
        }
    }
    let final_path = out_dir.join(format!("{name}.ckpt"));
    t.save(&final_path)?;
    let last = t
        .log
        .last()
        .map(|r| r.loss.to_string())
        .unwrap_or_else(|| "-".into());
    println!(
        "trained {name} to step {}, last loss {last}, checkpoint {}",
        t.step_count(),
        final_path.display()
    );
    Ok(())
}

fn check_stage_pair(dmae: &DmaeModel, tcld: &TcldModel) -> Result<()> {
    if dmae.config().latent_channels != tcld.config().latent_channels() {
        return Err(Error::Shape(format!(
            "stage-1 latents have {} channels, stage-2 generator expects {}",
            dmae.config().latent_channels,
            tcld.config().latent_channels()
        )));
    }
    Ok(())
}

/// Appends `_k_of_N` to the file stem when the prompt carries a chunk tag.
pub fn tagged_output_path(out: &Path, prompt: &str) -> PathBuf {
    let words: Vec<&str> = prompt
        .trim_end()
        .rsplit([' ', ','])
        .filter(|w| !w.is_empty())
        .take(3)
        .collect();
    let tag = match words.as_slice() {
        [n, "of", k] => match (k.parse::<usize>(), n.parse::<usize>()) {
            (Ok(k), Ok(n)) if k >= 1 && k <= n => format!("_{k}_of_{n}"),
            _ => return out.to_path_buf(),
        },
        _ => return out.to_path_buf(),
    };
    if crate::profile::parse_segment_tag(out).is_some() {
        return out.to_path_buf();
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("wav");
    out.with_file_name(format!("{stem}{tag}.{ext}"))
}

fn cmd_generate(cfg: &RunConfig, a: &GenerateArgs) -> Result<()> {
    let weights = if a.raw_weights {
        Weights::Raw
    } else {
        Weights::Ema
    };
    let dmae: DmaeModel = load_model(&Checkpoint::load(&a.stage1)?, weights)?;
    let tcld: TcldModel = load_model(&Checkpoint::load(&a.stage2)?, weights)?;
    check_stage_pair(&dmae, &tcld)?;
    let steps_gen = a.steps_gen.unwrap_or(cfg.generate.steps_gen);
    let steps_dec = a.steps_dec.unwrap_or(cfg.generate.steps_dec);
    let scale = a.cfg_scale.unwrap_or(tcld.config().cfg_scale);
    let seed = a.seed.unwrap_or(cfg.generate.seed);
    let start = Instant::now();
    let e = tcld.embedder()?.embed(&a.prompt)?;
    let (zn, wn) = generation_noise(&tcld, &dmae, seed)?;
    let audio = generate(&tcld, &dmae, &e, &zn, &wn, steps_gen, steps_dec, scale)?;
    let wave = tensor_to_waveforms(&audio, dmae.config().sample_rate)?.remove(0);
    let path = tagged_output_path(&a.out, &a.prompt);
    write_wav(&path, &wave, WavEncoding::Float32)?;
    println!(
        "latent {:?}  steps gen/dec {steps_gen}/{steps_dec}  cfg {scale}  seed {seed}  {:.2}s  -> {}",
        zn.shape(),
        start.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentHeader {
    pub latent_channels: usize,
    pub latent_length: usize,
    pub audio_channels: usize,
    pub sample_rate: u32,
    /// Source length before padding to the encoder's granularity.
    pub samples: usize,
}

pub fn write_latent(path: &Path, header: &LatentHeader, z: &Tensor) -> Result<()> {
    let mut c = Checkpoint::new(CheckpointKind::Latent, to_toml(header)?);
    c.push("latent", z.clone());
    c.save(path)
}

pub fn read_latent(path: &Path) -> Result<(LatentHeader, Tensor)> {
    let c = Checkpoint::load(path)?;
    c.expect_kind(CheckpointKind::Latent)?;
    let header: LatentHeader =
        from_toml(&c.config).map_err(|e| Error::Format(format!("latent header: {e}")))?;
    let z = c
        .tensor("latent")
        .ok_or_else(|| Error::Format("latent file has no `latent` tensor".into()))?
        .clone();
    Ok((header, z))
}

fn cmd_encode(stage1: &Path, input: &Path, output: &Path) -> Result<()> {
    let dmae: DmaeModel = load_model(&Checkpoint::load(stage1)?, Weights::Ema)?;
    let w = read_wav(input)?;
    let c = dmae.config();
    if w.channels() != c.audio_channels {
        return Err(Error::Shape(format!(
            "{} has {} channels, model expects {}",
            input.display(),
            w.channels(),
            c.audio_channels
        )));
    }
    let z = dmae.encode(&w.segment(0, c.padded_length(w.len())?))?;
    let header = LatentHeader {
        latent_channels: z.channels(),
        latent_length: z.len(),
        audio_channels: w.channels(),
        sample_rate: w.sample_rate(),
        samples: w.len(),
    };
    write_latent(output, &header, z.tensor())?;
    println!(
        "latent [{}, {}] from {} samples -> {}",
        z.channels(),
        z.len(),
        w.len(),
        output.display()
    );
    Ok(())
}

fn cmd_decode(stage1: &Path, input: &Path, output: &Path, steps: usize, seed: u64) -> Result<()> {
    let dmae: DmaeModel = load_model(&Checkpoint::load(stage1)?, Weights::Ema)?;
    let (header, z) = read_latent(input)?;
    let shape = dmae.waveform_shape(&z)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian(&shape, &mut rng);
    let audio = dmae.decode(&z, &noise, steps)?;
    let wave = tensor_to_waveforms(&audio, header.sample_rate)?.remove(0);
    let wave = wave.segment(0, header.samples.min(wave.len()));
    write_wav(output, &wave, WavEncoding::Float32)?;
    println!(
        "decoded {} samples in {steps} steps -> {}",
        wave.len(),
        output.display()
    );
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let c = Checkpoint::load(path)?;
    let scalars: usize = c.tensors.iter().map(|(_, t)| t.len()).sum();
    println!(
        "kind: {}\nversion: {VERSION}\ntensors: {}\nscalars: {scalars}",
        c.kind.name(),
        c.tensors.len()
    );
    let params = c
        .tensors
        .iter()
        .filter(|(n, _)| n.starts_with("param."))
        .count();
    if params > 0 {
        let n: usize = c
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("param."))
            .map(|(_, t)| t.len())
            .sum();
        println!("parameters: {n} in {params} tensors");
    }
    println!("--- config ---\n{}", c.config.trim_end());
    println!("--- tensors ---");
    for (name, t) in &c.tensors {
        println!("{name}\t{:?}", t.shape());
    }
    Ok(())
}

fn cmd_profile(dir: &Path, csv: Option<&Path>) -> Result<()> {
    let p = profile_dir(dir)?;
    for (path, why) in &p.skipped {
        eprintln!("warning: skipped {}: {why}", path.display());
    }
    print!("{}", p.table());
    if let Some(csv) = csv {
        std::fs::write(csv, p.csv()).map_err(|e| Error::io(csv, e))?;
    }
    Ok(())
}

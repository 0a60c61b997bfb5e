use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    eval_conditional_coherence, eval_style_distance, frechet_distance, ingest_pairs, latent_features, load_latent_dataset,
    make_synthetic, mel_features, save_latent_dataset, RunConfig, RuleKind,
};
use crate::autoencoder::{AeTrainer, Autoencoder, LatentSequence, SourceKind};
use crate::denoiser::Denoiser;
use crate::diffusion::{sample, style_vector, CfgConvention, DiffusionTrainer, LossConfig, SamplerConfig};
use crate::dsp::{SampleFormat, Waveform};
use crate::error::{Error, Result};
use crate::nn::OptimizerConfig;
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "stemdiff", version, about = "Latent diffusion for stem accompaniment generation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a spectrogram autoencoder on stem folders.
    AeTrain {
        /// Folder with one subfolder of stem WAVs per track.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train on mixes instead of the target stem.
        #[arg(long)]
        mix: bool,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Waveform to latent file.
    Encode {
        #[arg(long)]
        ae: PathBuf,
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latent file to waveform.
    Decode {
        #[arg(long)]
        ae: PathBuf,
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a latent pair dataset.
    DiffTrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a stem latent (and audio, with --ae) for a mix.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Mix latent (.lats) or mix audio (.wav, needs --mix-ae).
        #[arg(long)]
        cond: PathBuf,
        #[arg(long)]
        mix_ae: Option<PathBuf>,
        /// Stem autoencoder; also writes a WAV next to the latent output.
        #[arg(long)]
        ae: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Output latent path; the WAV uses the same name with `.wav`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluation metrics.
    Eval {
        #[command(subcommand)]
        metric: EvalCommand,
    },
    /// Write a synthetic latent pair dataset.
    SynthData {
        #[arg(long, value_parser = parse_rule)]
        rule: Option<RuleKind>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Fréchet distance between two clip sets (folders of .wav or .lats).
    Frechet { set_a: PathBuf, set_b: PathBuf },
    /// Rule-based coherence of a denoiser on a synthetic dataset's test split.
    Coherence {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 25)]
        limit: usize,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Distance of a clip set to a style reference.
    Style {
        #[arg(long)]
        style: PathBuf,
        set: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct SamplerFlags {
    /// DDIM steps.
    #[arg(long = "steps", short = 'K')]
    steps: Option<usize>,
    #[arg(long)]
    cfg_weight: Option<f64>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long, value_parser = ["paper", "standard"])]
    cfg_convention: Option<String>,
    /// Style reference: a latent file, or a WAV encoded with --ae.
    #[arg(long)]
    style: Option<PathBuf>,
}

fn parse_rule(s: &str) -> std::result::Result<RuleKind, String> {
    match s {
        "lowpass_octave" => Ok(RuleKind::LowpassOctave),
        "fixed_linear_map" => Ok(RuleKind::FixedLinearMap),
        "identity" => Ok(RuleKind::Identity),
        _ => Err(format!("unknown rule {s:?} (lowpass_octave, fixed_linear_map, identity)")),
    }
}

/// Exit status for an error: 1 configuration, 2 data, 3 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::AeTrain { data, mix, iters, metrics, out } => ae_train(&cfg, data, mix, iters, metrics.as_deref(), &out),
        Command::Encode { ae, input, out } => {
            let ae = Autoencoder::load(ae)?;
            let w = Waveform::read_wav(input, Some(ae.config().sample_rate))?;
            ae.encode(&w)?.save(out)
        }
        Command::Decode { ae, input, out } => {
            let ae = Autoencoder::load(ae)?;
            ae.decode(&LatentSequence::load(input)?)?.write_wav(out, SampleFormat::Float32)
        }
        Command::DiffTrain { data, iters, metrics, out } => diff_train(&cfg, data, iters, metrics.as_deref(), &out),
        Command::Sample { model, cond, mix_ae, ae, sampler, out } => {
            let model = Denoiser::load(model)?;
            let stem_ae = ae.map(Autoencoder::load).transpose()?;
            let cond = load_latent(&cond, mix_ae.as_deref())?;
            let scfg = sampler_config(&cfg, &sampler, stem_ae.as_ref())?;
            let c = sample(&cond, &scfg, &model)?;
            let seq = LatentSequence::new(c, r_time_of(&cfg, stem_ae.as_ref()), SourceKind::Stem)?;
            seq.save(&out)?;
            if let Some(ae) = &stem_ae {
                ae.decode(&seq)?.write_wav(out.with_extension("wav"), SampleFormat::Float32)?;
            }
            println!("wrote {} ({} steps x {} dims)", out.display(), seq.len(), seq.dim());
            Ok(())
        }
        Command::Eval { metric } => eval(&cfg, metric),
        Command::SynthData { rule, items, out } => {
            let mut spec = cfg.synthetic.clone();
            spec.seed = cfg.seed;
            if let Some(r) = rule {
                spec.rule = r;
            }
            if let Some(n) = items {
                spec.n_items = n;
            }
            let ds = make_synthetic(&spec)?;
            save_latent_dataset(&ds, &out, cfg.autoencoder.r_time as u32)?;
            println!("wrote {} train / {} test pairs to {}", ds.train.len(), ds.test.len(), out.display());
            Ok(())
        }
    }
}

fn r_time_of(cfg: &RunConfig, ae: Option<&Autoencoder>) -> u32 {
    ae.map_or(cfg.autoencoder.r_time, |a| a.config().r_time) as u32
}

fn load_latent(path: &Path, ae: Option<&Path>) -> Result<Tensor> {
    if has_ext(path, "wav") {
        let ae = ae.ok_or_else(|| Error::Config(format!("{} is audio; pass an autoencoder to encode it", path.display())))?;
        let ae = Autoencoder::load(ae)?;
        let w = Waveform::read_wav(path, Some(ae.config().sample_rate))?;
        return Ok(ae.encode(&w)?.into_vectors());
    }
    Ok(LatentSequence::load(path)?.into_vectors())
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn sampler_config(cfg: &RunConfig, flags: &SamplerFlags, ae: Option<&Autoencoder>) -> Result<SamplerConfig> {
    let mut guidance = cfg.sample.guidance();
    if let Some(w) = flags.cfg_weight {
        guidance.lambda_cfg = w;
    }
    if let Some(p) = flags.phi {
        guidance.phi = p;
    }
    if let Some(c) = &flags.cfg_convention {
        guidance.convention = c.parse::<CfgConvention>()?;
    }
    let style = match &flags.style {
        Some(p) if has_ext(p, "wav") => {
            let ae = ae.ok_or_else(|| Error::Config("a WAV style reference needs --ae".into()))?;
            let w = Waveform::read_wav(p, Some(ae.config().sample_rate))?;
            Some(style_vector(&ae.encode(&w)?)?)
        }
        Some(p) => Some(style_vector(&LatentSequence::load(p)?)?),
        None => None,
    };
    let scfg = SamplerConfig { steps: flags.steps.unwrap_or(cfg.sample.steps), guidance, style, seed: cfg.seed, ..Default::default() };
    scfg.validate()?;
    Ok(scfg)
}

struct Csv(Option<BufWriter<File>>);

impl Csv {
    fn create(path: Option<&Path>, header: &str) -> Result<Self> {
        let mut w = path.map(File::create).transpose()?.map(BufWriter::new);
        if let Some(w) = w.as_mut() {
            writeln!(w, "{header}")?;
        }
        Ok(Self(w))
    }

    fn row(&mut self, values: std::fmt::Arguments) -> Result<()> {
        if let Some(w) = self.0.as_mut() {
            w.write_fmt(values)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Random `len`-sample window, zero-padded if the clip is shorter.
pub fn random_crop(w: &Waveform, len: usize, rng: &mut impl Rng) -> Waveform {
    if w.len() <= len {
        return w.resized(len);
    }
    let start = rng.random_range(0..=w.len() - len);
    w.slice(start, len)
}

fn ae_train(cfg: &RunConfig, data: Option<PathBuf>, mix: bool, iters: Option<usize>, metrics: Option<&Path>, out: &Path) -> Result<()> {
    let tc = &cfg.ae_train;
    let dir = data.or_else(|| tc.data_dir.clone()).ok_or_else(|| Error::Config("ae-train needs --data or ae_train.data_dir".into()))?;
    let mut ae_cfg = cfg.autoencoder.clone();
    ae_cfg.source_kind = if mix { SourceKind::Mix } else { SourceKind::Stem };
    let ds = ingest_pairs(&dir, &tc.target_stem, Some(ae_cfg.sample_rate), 0.0, cfg.seed)?;
    let clips: Vec<Waveform> = ds.train.into_iter().map(|p| if mix { p.mix } else { p.stem }).collect();
    let mut model = Autoencoder::new(ae_cfg, cfg.seed)?;
    let mut trainer = AeTrainer::new(&model, tc.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xae);
    let crop = model.config().crop_len();
    let mut csv = Csv::create(metrics, "step,loss,rec,mssd,adv,critic")?;
    for step in 1..=iters.unwrap_or(tc.iters) {
        let batch: Vec<Waveform> = (0..tc.batch_size).map(|_| random_crop(&clips[rng.random_range(0..clips.len())], crop, &mut rng)).collect();
        let l = trainer.step(&mut model, &batch)?;
        csv.row(format_args!("{step},{},{},{},{},{}", l.total, l.rec, l.mssd, l.adv, l.critic.map_or(String::new(), |c| c.to_string())))?;
        if tc.log_every > 0 && step % tc.log_every == 0 {
            log::info!("ae step {step}: loss {:.4} (rec {:.4}, mssd {:.4})", l.total, l.rec, l.mssd);
        }
    }
    model.save(out)
}

fn diff_train(cfg: &RunConfig, data: Option<PathBuf>, iters: Option<usize>, metrics: Option<&Path>, out: &Path) -> Result<()> {
    let tc = &cfg.diff_train;
    let dir = data.or_else(|| tc.data_dir.clone()).ok_or_else(|| Error::Config("diff-train needs --data or diff_train.data_dir".into()))?;
    let ds = load_latent_dataset(&dir)?;
    if ds.train.is_empty() {
        return Err(Error::Data(format!("{} has no training pairs", dir.display())));
    }
    let mut ucfg = cfg.denoiser.clone();
    ucfg.in_dim = ds.train[0].stem.cols();
    ucfg.cond_dim = ds.train[0].mix.cols();
    let loss = LossConfig { weighting: tc.weighting, cond_dropout_p: ucfg.cond_dropout_p, ..Default::default() };
    let mut model = Denoiser::new(ucfg, cfg.seed)?;
    let mut trainer = DiffusionTrainer::new(&model, OptimizerConfig::diffusion(tc.lr), loss, cfg.seed)?;
    if let Some(c) = tc.clip_norm {
        trainer = trainer.with_clip_norm(c);
    }
    let mut csv = Csv::create(metrics, "step,loss")?;
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1f);
    let mut cursor = order.len();
    for step in 1..=iters.unwrap_or(tc.iters) {
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let p = &ds.train[order[cursor]];
            batch.push((&p.stem, &p.mix));
            cursor += 1;
        }
        let l = trainer.step(&mut model, &batch)?;
        csv.row(format_args!("{step},{l}"))?;
        if tc.log_every > 0 && step % tc.log_every == 0 {
            log::info!("diffusion step {step}: loss {l:.4}");
        }
    }
    model.save(out)
}

fn clip_features(dir: &Path) -> Result<Vec<Vec<f64>>> {
    let mut files: Vec<PathBuf> = if dir.is_dir() {
        std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect()
    } else {
        vec![dir.to_path_buf()]
    };
    files.retain(|p| has_ext(p, "wav") || has_ext(p, "lats"));
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .wav or .lats clips in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| match has_ext(p, "wav") {
            true => mel_features(&Waveform::read_wav(p, None)?),
            false => Ok(latent_features(LatentSequence::load(p)?.vectors())),
        })
        .collect()
}

fn eval(cfg: &RunConfig, metric: EvalCommand) -> Result<()> {
    match metric {
        EvalCommand::Frechet { set_a, set_b } => {
            let d = frechet_distance(&clip_features(&set_a)?, &clip_features(&set_b)?)?;
            println!("frechet {d}");
        }
        EvalCommand::Coherence { model, data, limit, sampler } => {
            let model = Denoiser::load(model)?;
            let ds = load_latent_dataset(data)?;
            let scfg = sampler_config(cfg, &sampler, None)?;
            let mixes: Vec<Tensor> = ds.test.iter().take(limit).map(|p| p.mix.clone()).collect();
            let c = eval_conditional_coherence(&mixes, ds.rule.as_ref(), |i, m| {
                sample(m, &SamplerConfig { seed: scfg.seed.wrapping_add(i as u64), ..scfg.clone() }, &model)
            })?;
            println!("pearson {}\ndiagonal_fraction {}", c.mean_r, c.diagonal_fraction);
        }
        EvalCommand::Style { style, set } => {
            let target = clip_features(&style)?;
            let (cos, euc) = eval_style_distance(&clip_features(&set)?, &target[0])?;
            println!("cosine {cos}\neuclidean {euc}");
        }
    }
    Ok(())
}

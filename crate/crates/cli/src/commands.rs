use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use se_lab::analysis::{self, Frames, Metric};
use se_lab::config::{ConfigError, RunConfig};
use se_lab::data::{BatchStream, Dataset, MixManifest, SnrSpec};
use se_lab::dsp::wav::{read_wav, write_wav, WavFormat};
use se_lab::dsp::{StftPlan, Waveform, SAMPLE_RATE};
use se_lab::gradcheck;
use se_lab::metrics::{eval_sisdr, eval_stoi, EvalReport};
use se_lab::model::{Gcrn, GcrnConfig};
use se_lab::teacher::EmbeddingSequence;
use se_lab::tensor::checkpoint::Checkpoint;
use se_lab::training::{self, finetune_model, Mode, PretrainTarget, Pretrainer, StepRecord, TeacherSource, Trainer};

use crate::{Cli, Command, MetricArg, Preset, RunArgs};

pub fn dispatch(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Mix { manifest, out } => mix(&cfg, &manifest, &out),
        Command::Train { common, mode, lambda } => {
            apply(&mut cfg, &common);
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if let Some(l) = lambda {
                set_lambda(&mut cfg, l)?;
            }
            cfg.validate()?;
            let trainer = Trainer::new(cfg.train_config(), cfg.model.clone())?;
            train(cfg, trainer, &common.run_dir)
        }
        Command::PretrainEncoder { common, loss } => {
            apply(&mut cfg, &common);
            cfg.pretrain.target = PretrainTarget::Encoder;
            if let Some(l) = loss {
                cfg.pretrain.encoder_loss = l.into();
            }
            pretrain(cfg, &common.run_dir)
        }
        Command::PretrainDecoder { common, input, encoder_ckpt } => {
            apply(&mut cfg, &common);
            cfg.pretrain.target = PretrainTarget::Decoder;
            if let Some(i) = input {
                cfg.pretrain.decoder_input = i.into();
            }
            if encoder_ckpt.is_some() {
                cfg.pretrain.encoder_checkpoint = encoder_ckpt;
            }
            pretrain(cfg, &common.run_dir)
        }
        Command::Finetune {
            common,
            encoder_ckpt,
            decoder_ckpt,
        } => {
            apply(&mut cfg, &common);
            cfg.train.mode = Mode::Baseline;
            cfg.validate()?;
            let enc = Checkpoint::load(&encoder_ckpt)?;
            let dec = Checkpoint::load(&decoder_ckpt)?;
            let model = finetune_model(cfg.model.clone(), cfg.seed, &enc, &dec)?;
            let trainer = Trainer::from_model(cfg.train_config(), model)?;
            train(cfg, trainer, &common.run_dir)
        }
        Command::Eval {
            manifest,
            ckpt,
            preset,
            out,
            json,
            stoi,
        } => {
            if cli.config.is_none() {
                if let Some(c) = sibling_config(&ckpt)? {
                    cfg = RunConfig { seed: cfg.seed, ..c };
                }
            }
            if let Some(p) = preset {
                cfg.model = preset_config(p);
            }
            cfg.eval.stoi |= stoi;
            if json.is_some() {
                cfg.eval.json = json;
            }
            cfg.validate()?;
            eval(&cfg, &manifest, &ckpt, out.as_deref())
        }
        Command::Analyze {
            lags,
            metric,
            layer,
            out,
            samples,
            files,
        } => analyze(&lags, metric, layer, out.as_deref(), samples.as_deref(), &files),
        Command::Spectrogram { input, out } => {
            let w = read_wav(&input)?;
            analysis::export_spectrogram(&w, &cfg.stft, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck => gradcheck(cfg.seed),
        Command::InspectCheckpoint { path } => inspect(&path),
    }
}

fn preset_config(p: Preset) -> GcrnConfig {
    match p {
        Preset::Default => GcrnConfig::default(),
        Preset::Tiny => GcrnConfig::tiny(),
    }
}

fn apply(cfg: &mut RunConfig, a: &RunArgs) {
    let t = &mut cfg.train;
    let p = &mut cfg.pretrain;
    if let Some(v) = a.steps {
        (t.steps, p.steps) = (v, v);
    }
    if let Some(v) = a.batch {
        (t.batch, p.batch) = (v, v);
    }
    if let Some(v) = a.lr {
        (t.lr, p.lr) = (v, v);
    }
    if let Some(v) = a.checkpoint_every {
        (t.checkpoint_every, p.checkpoint_every) = (v, v);
    }
    if let Some(p) = a.preset {
        cfg.model = preset_config(p);
    }
    if a.manifest.is_some() {
        cfg.data.manifest = a.manifest.clone();
    }
    if let Some(n) = a.synthetic_clips {
        cfg.data.synthetic_clips = n;
    }
    if let Some(d) = &a.teacher_dir {
        cfg.teacher = TeacherSource::Files { dir: d.clone() };
    }
    if a.synthetic_teacher {
        cfg.teacher = TeacherSource::synthetic();
    }
}

fn set_lambda(cfg: &mut RunConfig, l: f64) -> Result<()> {
    use se_lab::training::Aux;
    let w = &mut cfg.losses;
    match cfg.train.mode.aux() {
        Aux::None => bail!("mode {} has no auxiliary loss to weight", cfg.train.mode),
        Aux::Embed => w.embed = l,
        Aux::Adversarial => w.adversarial = l,
        Aux::Triplet => w.triplet = l,
        Aux::Output => w.output = l,
    }
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let crop = (d.crop > 0).then_some(d.crop);
    let mut ds = if let Some(m) = &d.manifest {
        let m = MixManifest::load(m)?;
        Dataset::from_manifest(&m, crop)?
    } else if d.synthetic_clips > 0 {
        let len = (d.synthetic_seconds * SAMPLE_RATE as f64).round() as usize;
        Dataset::synthetic(d.synthetic_clips, len, SnrSpec::Fixed(d.synthetic_snr_db), cfg.seed)?
    } else {
        return Err(ConfigError {
            field: "data.manifest".into(),
            msg: "training needs a manifest or data.synthetic_clips > 0".into(),
        }
        .into());
    };
    ds.stft = cfg.stft;
    Ok(ds)
}

/// Writes the materialized config and seed before any step runs.
fn prepare_run_dir(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    fs::write(dir.join("seed"), format!("{}\n", cfg.seed))?;
    Ok(())
}

fn report(records: &[StepRecord]) {
    if let Some(last) = records.last() {
        eprintln!("finished {} steps; last: {last}", records.len());
    }
}

fn train(mut cfg: RunConfig, mut trainer: Trainer, dir: &Path) -> Result<ExitCode> {
    let ds = dataset(&cfg)?;
    cfg.model = trainer.model.config().clone();
    prepare_run_dir(&cfg, dir)?;
    let mut stream = BatchStream::new(Arc::new(ds), cfg.train.batch, cfg.seed, cfg.data.prefetch);
    let records = trainer.run(|| stream.next().expect("endless stream"), Some(dir))?;
    report(&records);
    let free = training::check_teacher_free(&trainer.model, cfg.stft);
    eprintln!(
        "inference without teacher: {}",
        match free {
            Ok(()) => "ok".to_string(),
            Err(e) => format!("fails ({e})"),
        }
    );
    Ok(ExitCode::SUCCESS)
}

fn pretrain(mut cfg: RunConfig, dir: &Path) -> Result<ExitCode> {
    cfg.validate()?;
    let mut pre = Pretrainer::new(cfg.pretrain_config(), cfg.model.clone())?;
    let ds = dataset(&cfg)?;
    cfg.model = pre.model.config().clone();
    prepare_run_dir(&cfg, dir)?;
    let mut stream = BatchStream::new(Arc::new(ds), cfg.pretrain.batch, cfg.seed, cfg.data.prefetch);
    let records = pre.run(|| stream.next().expect("endless stream"), Some(dir))?;
    report(&records);
    Ok(ExitCode::SUCCESS)
}

/// The `config.toml` of the run directory holding `ckpt`, if any.
fn sibling_config(ckpt: &Path) -> Result<Option<RunConfig>> {
    let p = ckpt.parent().unwrap_or(Path::new(".")).join("config.toml");
    if p.is_file() {
        Ok(Some(RunConfig::load(&p)?))
    } else {
        Ok(None)
    }
}

fn mix(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<ExitCode> {
    let m = MixManifest::load(manifest)?;
    let ds = Dataset::from_manifest(&m, None)?;
    let examples = ds.materialize(cfg.seed)?;
    for sub in ["noisy", "clean"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut index = String::from("id\tsnr_db\n");
    for ex in &examples {
        let n = seen.entry(ex.id.clone()).or_default();
        let id = if *n == 0 { ex.id.clone() } else { format!("{}_{n}", ex.id) };
        *n += 1;
        let file = format!("{id}.wav");
        write_wav(&out.join("noisy").join(&file), &Waveform::new(ex.noisy.clone()), WavFormat::Float32)?;
        write_wav(&out.join("clean").join(&file), &Waveform::new(ex.clean.clone()), WavFormat::Float32)?;
        index += &format!("{id}\t{}\n", ex.snr_db);
    }
    fs::write(out.join("mixtures.tsv"), index)?;
    eprintln!("wrote {} mixtures to {}", examples.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(cfg: &RunConfig, manifest: &Path, ckpt: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let ck = Checkpoint::load(ckpt)?;
    let model = Gcrn::from_checkpoint(cfg.model.clone(), &ck).with_context(|| format!("loading {}", ckpt.display()))?;
    let plan = Arc::new(StftPlan::new(cfg.stft)?);
    let ds = Dataset::from_manifest(&MixManifest::load(manifest)?, None)?;
    let mut report = EvalReport::default();
    for ex in ds.materialize(cfg.seed)? {
        let est = training::enhance(&model, &plan, &ex.noisy)?;
        let clean = &ex.clean[..est.len()];
        let s = eval_sisdr(&est, clean)?;
        let q = if cfg.eval.stoi { eval_stoi(&est, clean)? } else { f64::NAN };
        report.push(ex.id, s, q);
    }
    let tsv = report.to_tsv();
    match out {
        Some(p) => fs::write(p, tsv)?,
        None => print!("{tsv}"),
    }
    if let Some(j) = &cfg.eval.json {
        fs::write(j, report.to_json())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn analyze(lags: &[u32], metric: MetricArg, layer: Option<usize>, out: Option<&Path>, samples: Option<&Path>, files: &[PathBuf]) -> Result<ExitCode> {
    let metrics: &[Metric] = match metric {
        MetricArg::Corr => &[Metric::Correlation],
        MetricArg::L2 => &[Metric::Euclidean, Metric::NormalizedEuclidean],
        MetricArg::All => &[Metric::Correlation, Metric::Euclidean, Metric::NormalizedEuclidean],
    };
    let seqs = files
        .iter()
        .map(|f| EmbeddingSequence::load(f).with_context(|| format!("reading {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    let mut inputs = Vec::with_capacity(seqs.len());
    for (f, s) in files.iter().zip(&seqs) {
        let l = layer.unwrap_or(s.layers - 1);
        if l >= s.layers {
            bail!("{}: layer {l} requested, file has {}", f.display(), s.layers);
        }
        let hop_ms = (s.hop_samples as u64 * 1000 / s.sample_rate as u64) as u32;
        inputs.push((f.display().to_string(), Frames::new(s.layer(l), s.frames, s.dim, hop_ms)));
    }
    let st = analysis::study(&inputs, lags, metrics)?;
    let mut text = String::from("# correlation: Pearson across the feature dimension; l2_norm: distance over mean frame norm\n");
    text += &st.to_tsv();
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    if let Some(p) = samples {
        fs::write(p, st.samples_tsv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(seed: u64) -> Result<ExitCode> {
    let reports = gradcheck::run_suite(seed)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{}\t{}\tcoords={}\trel_err={:.3e}\t{:.2}s",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.coords,
            r.rel_error,
            r.elapsed.as_secs_f64()
        );
        failed += usize::from(!r.passed());
    }
    println!("{} of {} cases passed", reports.len() - failed, reports.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn inspect(path: &Path) -> Result<ExitCode> {
    let ck = Checkpoint::load(path)?;
    for (name, shape, _) in ck.iter() {
        let n: usize = shape.iter().product();
        println!("{name}\t{shape:?}\t{n}");
    }
    let bytes = fs::metadata(path)?.len();
    println!("# tensors={} params={} bytes={bytes}", ck.len(), ck.param_count());
    Ok(ExitCode::SUCCESS)
}

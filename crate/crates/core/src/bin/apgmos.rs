use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use apgmos::audio::{load_wav, write_wav_f32};
use apgmos::cochlea::{write_apgc, ErbScale, GammatoneFilterbank};
use apgmos::embeddings::{
    load_embedding, read_manifest, save_embedding, synth_dataset, write_manifest, ManifestRow,
};
use apgmos::fusion::{dump_attention, write_attention_csv};
use apgmos::metrics::{read_predictions, report, write_predictions, PredictionRecord};
use apgmos::numerics::{load_checkpoint, save_checkpoint, ParamStore};
use apgmos::training::{
    gradient_suite, load_h_pool, prepare_manifest, split_dataset, train_stage_rvq, Frontend, Mode,
    PipelineConfig, PreparedSample, Predictor, Split, StageReport, StageState, Trainer,
};
use apgmos::{Error, Result};

#[derive(Parser)]
#[command(name = "apgmos", version, about = "Auditory-guided MOS prediction for synthetic speech")]
struct Cli {
    /// Overrides the `seed` config key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Text file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input checkpoint (resume state, frozen stages or model).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes the APGC cochleagram of a WAV file.
    Cochleagram {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Number of ERB channels.
        #[arg(long, default_value_t = apgmos::cochlea::DEFAULT_CHANNELS)]
        channels: usize,
        /// Pool to 40 Hz frames instead of keeping the sample rate.
        #[arg(long)]
        pooled: bool,
    },
    /// Generates the synthetic benchmark: WAVs, embeddings and manifests.
    SynthData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 24)]
        systems: usize,
        #[arg(long, default_value_t = 15)]
        utts: usize,
    },
    /// Trains the auditory encoder with its private head.
    TrainApm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        channels: Option<usize>,
    },
    /// Fits the residual codebooks and merges them into the checkpoint.
    TrainRvq {
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest whose `h_path` features form the codebook pool; rows are
        /// restricted to the training utterances of `--manifest`.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains projection, fusion layers and decoder on frozen stages.
    TrainFusion {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Writes a predictions CSV for one split of a manifest.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "pruned")]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Model::Fusion)]
        model: Model,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Prints MSE, LCC, SRCC and KTAU at utterance and system level.
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        tau_b: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference checks of every trainable block.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Writes per-layer attention weights of one utterance as CSV.
    DumpAttention {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        w2v: PathBuf,
        #[arg(long)]
        h: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        mode: Mode,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Model {
    Fusion,
    Apm,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require_checkpoint(cli: &Cli) -> Result<ParamStore> {
    let p = cli
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Argument("`--checkpoint` is required".into()))?;
    load_checkpoint(p)
}

fn split_of(rows: &[ManifestRow], cfg: &PipelineConfig) -> Split {
    let ids: Vec<&str> = rows.iter().map(|r| r.system_id.as_str()).collect();
    split_dataset(&ids, cfg.seed, cfg.split)
}

fn indices(split: &Split, which: SplitArg, n: usize) -> Vec<usize> {
    match which {
        SplitArg::Train => split.train.clone(),
        SplitArg::Val => split.val.clone(),
        SplitArg::Test => split.test.clone(),
        SplitArg::All => (0..n).collect(),
    }
}

fn write_log(path: &Path, report: &StageReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "total", "rank", "reg", "alpha", "val_srcc"])?;
    for l in &report.logs {
        w.write_record([
            l.epoch.to_string(),
            l.total.to_string(),
            l.rank.to_string(),
            l.reg.to_string(),
            l.alpha.to_string(),
            l.val_srcc.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn print_logs(report: &StageReport) {
    for l in &report.logs {
        let val = l.val_srcc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        eprintln!(
            "{} epoch {:>3}  total {:.5}  rank {:.5}  reg {:.5}  val_srcc {val}",
            report.stage.name(),
            l.epoch,
            l.total,
            l.rank,
            l.reg
        );
    }
    if let Some(e) = report.best_epoch {
        eprintln!("best epoch {e}");
    }
}

fn save_stage(out: &Path, params: ParamStore, report: &StageReport) -> Result<()> {
    let state = StageState {
        epoch: report.best_epoch.unwrap_or(report.logs.last().map_or(0, |l| l.epoch)),
        ..StageState::new(params)
    };
    save_checkpoint(out, &state.to_checkpoint())
}

fn train(
    t: &Trainer,
    frozen: &ParamStore,
    resume: Option<&ParamStore>,
    split: &Split,
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    let state = t.resume_state(frozen, resume)?;
    let (params, report) = t.run(state, split)?;
    print_logs(&report);
    if let Some(p) = log {
        write_log(p, &report)?;
    }
    save_stage(out, params, &report)
}

fn predictions(data: &[PreparedSample], idx: &[usize], model: Model, mode: Mode, p: &Predictor) -> Result<Vec<PredictionRecord>> {
    idx.iter()
        .map(|&i| {
            let s = &data[i];
            let predicted = match model {
                Model::Apm => p.predict_apm_frames(&s.frames)?,
                Model::Fusion => p.predict_frames(&s.frames, &s.x_w2v, s.x_h.as_ref(), mode)?,
            };
            Ok(PredictionRecord {
                system_id: s.system_id.clone(),
                utterance_id: s.utterance_id.clone(),
                predicted,
                actual: s.true_mos,
            })
        })
        .collect()
}

fn synth_data(out_dir: &Path, systems: usize, utts: usize, seed: u64) -> Result<()> {
    for sub in ["wav", "h", "h_clean", "w2v"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let samples = synth_dataset(systems, utts, seed)?;
    let mut rows = Vec::with_capacity(samples.len());
    let mut clean = Vec::with_capacity(samples.len());
    for s in &samples {
        let id = &s.utterance_id;
        let wav = PathBuf::from(format!("wav/{id}.wav"));
        let h = PathBuf::from(format!("h/{id}.apge"));
        let hc = PathBuf::from(format!("h_clean/{id}.apge"));
        let w2v = PathBuf::from(format!("w2v/{id}.apge"));
        write_wav_f32(out_dir.join(&wav), &s.waveform)?;
        save_embedding(out_dir.join(&h), &s.x_h)?;
        save_embedding(out_dir.join(&hc), &s.clean_x_h)?;
        save_embedding(out_dir.join(&w2v), &s.x_w2v)?;
        let row = ManifestRow {
            system_id: s.system_id.clone(),
            utterance_id: id.clone(),
            wav_path: wav,
            h_path: h,
            w2v_path: w2v,
            true_mos: s.true_mos,
        };
        clean.push(ManifestRow { h_path: hc, ..row.clone() });
        rows.push(row);
    }
    write_manifest(out_dir.join("manifest.csv"), &rows)?;
    write_manifest(out_dir.join("clean_manifest.csv"), &clean)?;
    println!("wrote {} utterances from {systems} systems to {}", rows.len(), out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = pipeline_config(&cli)?;
    match &cli.cmd {
        Cmd::Cochleagram {
            input,
            output,
            channels,
            pooled,
        } => {
            let w = load_wav(input)?;
            if *pooled {
                let frames = Frontend::new(*channels)?.pooled(&w)?;
                fs::write(output, apgmos::cochlea::encode_apgc(&frames)?)?;
                println!("{} pooled frames x {channels} channels", frames.rows());
            } else {
                let fb = GammatoneFilterbank::new(ErbScale::for_sample_rate(*channels, w.sample_rate_hz())?, w.sample_rate_hz())?;
                let c = apgmos::cochlea::cochleagram_with(&w, &fb)?;
                write_apgc(output, &c)?;
                println!("{} frames x {} channels", c.n_frames(), c.d_f());
            }
        }
        Cmd::SynthData { out_dir, systems, utts } => synth_data(out_dir, *systems, *utts, cfg.seed)?,
        Cmd::TrainApm {
            manifest,
            out,
            log,
            channels,
        } => {
            let mut cfg = cfg;
            if let Some(c) = channels {
                cfg.channels = *c;
            }
            let rows = read_manifest(manifest)?;
            let data = prepare_manifest(&rows, &Frontend::new(cfg.channels)?)?;
            let split = split_of(&rows, &cfg);
            let resume = cli.checkpoint.as_ref().map(load_checkpoint).transpose()?;
            let t = Trainer::apm(&data, &cfg)?;
            train(&t, &ParamStore::new(), resume.as_ref(), &split, out, log.as_deref())?;
        }
        Cmd::TrainRvq { manifest, pool, out } => {
            let mut params = require_checkpoint(&cli)?;
            let rows = read_manifest(manifest)?;
            let split = split_of(&rows, &cfg);
            let train_rows: Vec<ManifestRow> = split.train.iter().map(|&i| rows[i].clone()).collect();
            let pool_rows = match pool {
                Some(p) => {
                    let ids: BTreeSet<&str> = train_rows.iter().map(|r| r.utterance_id.as_str()).collect();
                    let all = read_manifest(p)?;
                    let kept: Vec<ManifestRow> = all
                        .iter()
                        .filter(|r| ids.contains(r.utterance_id.as_str()))
                        .cloned()
                        .collect();
                    if kept.is_empty() {
                        all
                    } else {
                        kept
                    }
                }
                None => train_rows,
            };
            let frames = load_h_pool(&pool_rows)?;
            let rvq = train_stage_rvq(&frames, &cfg)?;
            println!(
                "fitted {} codebooks of size {} on {} frames",
                cfg.rvq_stages,
                cfg.rvq_codebook_size,
                frames.iter().map(|t| t.rows()).sum::<usize>()
            );
            params.merge(&rvq);
            save_checkpoint(out, &params)?;
        }
        Cmd::TrainFusion { manifest, out, log } => {
            let ck = require_checkpoint(&cli)?;
            let enc = apgmos::encoder::ApmEncoderConfig::from_params(&ck)?;
            let rows = read_manifest(manifest)?;
            let data = prepare_manifest(&rows, &Frontend::new(enc.d_f)?)?;
            let split = split_of(&rows, &cfg);
            let t = Trainer::fusion(&data, &cfg, &ck)?;
            train(&t, &ck, Some(&ck), &split, out, log.as_deref())?;
        }
        Cmd::Predict {
            manifest,
            output,
            mode,
            model,
            split,
        } => {
            let p = Predictor::new(require_checkpoint(&cli)?)?;
            let rows = read_manifest(manifest)?;
            let idx = indices(&split_of(&rows, &cfg), *split, rows.len());
            let chosen: Vec<ManifestRow> = idx.iter().map(|&i| rows[i].clone()).collect();
            let data = prepare_manifest(&chosen, p.frontend())?;
            let all: Vec<usize> = (0..data.len()).collect();
            let records = predictions(&data, &all, *model, *mode, &p)?;
            write_predictions(output, &records)?;
            println!("wrote {} predictions to {}", records.len(), output.display());
        }
        Cmd::Evaluate {
            predictions,
            tau_b,
            output,
        } => {
            let mut csv_out = String::new();
            for path in predictions {
                let r = report(&read_predictions(path)?, *tau_b)?;
                println!("{}", path.display());
                println!("{r}");
                csv_out.push_str(&r.to_csv());
            }
            if let Some(o) = output {
                fs::write(o, csv_out)?;
            }
        }
        Cmd::Gradcheck { instances, tolerance } => {
            let mut ok = true;
            for r in gradient_suite(cfg.seed, *instances)? {
                let pass = r.max_relative_error < *tolerance;
                ok &= pass;
                println!(
                    "{:<16} instances {:>3}  max relative error {:.3e}  {}",
                    r.name,
                    r.instances,
                    r.max_relative_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::DumpAttention { wav, w2v, h, mode, output } => {
            let p = Predictor::new(require_checkpoint(&cli)?)?;
            let frames = p.frontend().pooled(&load_wav(wav)?)?;
            let x_h = h.as_ref().map(|f| load_embedding(f).map(|e| e.frames().clone())).transpose()?;
            let out = p.fused(&frames, load_embedding(w2v)?.frames(), x_h.as_ref(), *mode)?;
            let rows = dump_attention(&out.weights);
            match output {
                Some(o) => write_attention_csv(BufWriter::new(File::create(o)?), &rows)?,
                None => {
                    let stdout = io::stdout();
                    let mut lock = stdout.lock();
                    write_attention_csv(&mut lock, &rows)?;
                    lock.flush()?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

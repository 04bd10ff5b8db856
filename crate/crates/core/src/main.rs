use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sfanc::anc::AncScenario;
use sfanc::bank::{default_partition, load_bank, pretrain_bank, save_bank, FilterBank};
use sfanc::config::Config;
use sfanc::exec::Execution;
use sfanc::labeler::label_dataset;
use sfanc::manifest::{load_tracks, write_manifest, ManifestRecord};
use sfanc::nn::{
    build_default_model, evaluate, load_model, run_scheme, samples_from_tracks, save_model, train_observed,
    write_metrics_csv, ArchDescriptor, CnnModel, Sample, Scheme, TrainConfig,
};
use sfanc::noise::{synth_dataset, NoiseTrack, Origin};
use sfanc::runtime::{
    make_aircraft_like_noise, make_band_switching_noise, run_comparison, run_sfanc, CnnSelector, OracleSelector,
    Selector, SfancConfig,
};
use sfanc::signal::{noise_reduction_db, Signal};
use sfanc::wav::{load_wav, read_wav, write_wav};
use sfanc::{Error, Result};

/// Selective fixed-filter ANC simulation lab.
#[derive(Parser)]
#[command(name = "sfanc", version)]
struct Cli {
    /// Base random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the 15-filter bank with FxLMS; writes bank.json.
    Pretrain,
    /// Generate synthetic tracks or frame a recording; writes manifest.jsonl.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        /// A or B.
        #[arg(long)]
        domain: Option<String>,
        /// Frame this 16 kHz mono WAV into recorded tracks instead.
        #[arg(long)]
        from_wav: Option<PathBuf>,
        /// Also write the tracks back to back as tracks.wav.
        #[arg(long)]
        wav: bool,
    },
    /// Label a manifest with the best bank filter; writes labeled.jsonl.
    Label {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        bank: PathBuf,
    },
    /// Train the classifier; writes model.ckpt and metrics.csv.
    Train {
        /// Labeled manifests, concatenated.
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy of a checkpoint on a labeled manifest; writes eval.json.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Compare the four training schemes; writes schemes.csv.
    Scheme {
        /// Labeled synthetic-A manifest.
        #[arg(long)]
        synthetic: PathBuf,
        /// Labeled manifest of the target domain.
        #[arg(long)]
        real: PathBuf,
        /// Labeled held-out manifest of the target domain.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// SFANC against FxLMS and FxNLMS; writes traces.csv, nr_per_second.csv
    /// and filters.csv.
    Bench {
        #[arg(long)]
        bank: PathBuf,
        /// Classifier checkpoint; the oracle selector is used without one.
        #[arg(long)]
        model: Option<PathBuf>,
        /// composite, aircraft, or a WAV path.
        #[arg(long)]
        noise: Option<String>,
        #[arg(long)]
        duration: Option<usize>,
    },
    /// A single SFANC run; writes simulate.csv, filters.csv and error.wav.
    Simulate {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        noise: Option<String>,
        #[arg(long)]
        duration: Option<usize>,
    },
}

struct Ctx {
    config: Config,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn scenario(&self) -> Result<AncScenario> {
        let mut sc = AncScenario::default();
        if let Some(mu) = self.config.f64("step_size")? {
            sc.step_size = mu;
        }
        if let Some(l) = self.config.usize("control_length")? {
            sc.control_length = l;
        }
        sc.validate()?;
        Ok(sc)
    }

    fn train_config(&self, epochs: Option<usize>) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: epochs.or(self.config.usize("epochs")?).unwrap_or(d.epochs),
            learning_rate: self.config.f64("learning_rate")?.unwrap_or(d.learning_rate),
            batch_size: self.config.usize("batch_size")?.unwrap_or(d.batch_size),
            l2_coefficient: self.config.f64("l2_coefficient")?.unwrap_or(d.l2_coefficient),
            seed: self.seed,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn sfanc_config(&self) -> Result<SfancConfig> {
        let d = SfancConfig::default();
        Ok(SfancConfig {
            frame_len: self.config.usize("frame_len")?.unwrap_or(d.frame_len),
            selection_latency_frames: self.config.usize("latency")?.unwrap_or(d.selection_latency_frames),
            initial_filter_index: self.config.usize("initial_filter")?.unwrap_or(d.initial_filter_index),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn bank(&self, path: &Path) -> Result<(FilterBank, AncScenario)> {
        let bank = load_bank(path)?;
        let scenario = self.scenario()?;
        bank.check_scenario(&scenario)?;
        Ok((bank, scenario))
    }

    fn noise(&self, flag: Option<String>, duration: Option<usize>) -> Result<Signal> {
        let kind = match flag {
            Some(k) => k,
            None => self.config.str("noise")?.unwrap_or("composite").to_string(),
        };
        let duration = duration.or(self.config.usize("duration")?).unwrap_or(10);
        match kind.as_str() {
            "composite" => {
                let segment = self.config.usize("segment_seconds")?.unwrap_or(2);
                let (x, bands) = make_band_switching_noise(&default_partition(), duration, segment, self.seed)?;
                eprintln!("composite noise bands per {segment} s: {bands:?}");
                Ok(x)
            }
            "aircraft" => make_aircraft_like_noise(duration, self.seed),
            path => read_wav(path),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn labeled_samples(paths: &[PathBuf]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for p in paths {
        let tracks = load_tracks(p)?;
        if let Some(t) = tracks.iter().find(|t| t.label.is_none()) {
            return Err(Error::Malformed(format!("{}: track {} is unlabeled", p.display(), t.id)));
        }
        out.extend(samples_from_tracks(&tracks)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

fn selector<'a>(
    model: &'a Option<CnnModel<f32>>,
    bank: &FilterBank,
    scenario: &AncScenario,
    config: &SfancConfig,
) -> Result<Box<dyn Selector + 'a>> {
    Ok(match model {
        Some(m) => Box::new(CnnSelector(m)),
        None => Box::new(OracleSelector::new(bank, scenario, config.frame_len)?),
    })
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => config.u64("seed")?.unwrap_or(0),
    };
    let ctx = Ctx {
        config,
        seed,
        out: cli.out,
    };
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let exec = Execution::default();

    match cli.command {
        Command::Pretrain => {
            let bank = pretrain_bank(&default_partition(), &ctx.scenario()?, ctx.seed)?;
            save_bank(&bank, ctx.path("bank.json"))?;
            println!("wrote {}", ctx.path("bank.json").display());
        }
        Command::Synth {
            count,
            domain,
            from_wav,
            wav,
        } => {
            let tracks: Vec<NoiseTrack> = match from_wav {
                Some(p) => load_wav(p)?,
                None => {
                    let domain = match domain.as_deref().or(ctx.config.str("domain")?).unwrap_or("B") {
                        "A" => Origin::SyntheticA,
                        "B" => Origin::SyntheticB,
                        other => return Err(Error::param(format!("domain must be A or B, got {other:?}"))),
                    };
                    let count = count.or(ctx.config.usize("count")?).unwrap_or(300);
                    synth_dataset(count, domain, ctx.seed)?
                }
            };
            let records = tracks
                .iter()
                .map(|t| ManifestRecord::from_track(t, None))
                .collect::<Result<Vec<_>>>()?;
            write_manifest(ctx.path("manifest.jsonl"), &records)?;
            if wav {
                let all: Vec<f64> = tracks.iter().flat_map(|t| t.signal.samples().iter().copied()).collect();
                write_wav(ctx.path("tracks.wav"), &Signal::from_samples(all))?;
            }
            println!("wrote {} tracks to {}", records.len(), ctx.path("manifest.jsonl").display());
        }
        Command::Label { manifest, bank } => {
            let (bank, scenario) = ctx.bank(&bank)?;
            let labeled = label_dataset(load_tracks(&manifest)?, &bank, &scenario)?;
            for (id, e) in &labeled.failures {
                eprintln!("warning: track {id} not labeled: {e}");
            }
            let records = labeled
                .tracks
                .iter()
                .zip(&labeled.reports)
                .map(|(t, r)| ManifestRecord::from_track(t, Some(r.nr_db[r.label])))
                .collect::<Result<Vec<_>>>()?;
            write_manifest(ctx.path("labeled.jsonl"), &records)?;
            write_with(&ctx.path("label_histogram.csv"), |w| {
                writeln!(w, "filter,count")?;
                for (i, c) in labeled.histogram.iter().enumerate() {
                    writeln!(w, "{i},{c}")?;
                }
                Ok(())
            })?;
            println!("labeled {} tracks, histogram {:?}", records.len(), labeled.histogram);
        }
        Command::Train { manifest, epochs } => {
            let data = labeled_samples(&manifest)?;
            let cfg = ctx.train_config(epochs)?;
            let outcome = train_observed(build_default_model(ctx.seed), &data, &cfg, exec, |m| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  val accuracy {:.4}",
                    m.epoch, m.train_loss, m.val_accuracy
                )
            })?;
            save_model(ctx.path("model.ckpt"), &outcome.model)?;
            write_with(&ctx.path("metrics.csv"), |w| write_metrics_csv(w, &outcome.metrics))?;
            println!("best epoch {}; wrote {}", outcome.best_epoch, ctx.path("model.ckpt").display());
        }
        Command::Eval { model, manifest } => {
            let model = load_model(model)?;
            let data = labeled_samples(&[manifest])?;
            let acc = evaluate(&model, &data, exec)?;
            let correct = (acc * data.len() as f64).round() as usize;
            let json = serde_json::json!({ "accuracy": acc, "correct": correct, "total": data.len() });
            write_with(&ctx.path("eval.json"), |w| writeln!(w, "{json}"))?;
            println!("accuracy {acc:.4} ({correct}/{})", data.len());
        }
        Command::Scheme {
            synthetic,
            real,
            test,
            epochs,
        } => {
            let (a, b, t) = (
                labeled_samples(&[synthetic])?,
                labeled_samples(&[real])?,
                labeled_samples(&[test])?,
            );
            let cfg = ctx.train_config(epochs)?;
            let mut rows = Vec::new();
            for scheme in Scheme::ALL {
                let r = run_scheme(scheme, &ArchDescriptor::default(), &a, &b, &t, &cfg, exec)?;
                eprintln!("{scheme}: {:.4}", r.accuracy);
                rows.push((scheme, r.accuracy));
            }
            write_with(&ctx.path("schemes.csv"), |w| {
                writeln!(w, "scheme,accuracy")?;
                for (s, a) in &rows {
                    writeln!(w, "{s},{a:.6}")?;
                }
                Ok(())
            })?;
        }
        Command::Bench {
            bank,
            model,
            noise,
            duration,
        } => {
            let (bank, scenario) = ctx.bank(&bank)?;
            let model = model.map(load_model).transpose()?;
            let cfg = ctx.sfanc_config()?;
            let x = ctx.noise(noise, duration)?;
            let sel = selector(&model, &bank, &scenario, &cfg)?;
            let report = run_comparison(&x, &bank, sel.as_ref(), &scenario, &cfg, exec)?;
            write_with(&ctx.path("traces.csv"), |w| report.write_traces_csv(w))?;
            write_with(&ctx.path("nr_per_second.csv"), |w| report.write_nr_csv(w))?;
            write_with(&ctx.path("filters.csv"), |w| report.write_filters_csv(w))?;
            println!("second  sfanc   fxlms   fxnlms");
            for (k, r) in report.per_second_nr.iter().enumerate() {
                println!("{k:>6}  {:>6.2}  {:>6.2}  {:>6.2}", r[0], r[1], r[2]);
            }
        }
        Command::Simulate {
            bank,
            model,
            noise,
            duration,
        } => {
            let (bank, scenario) = ctx.bank(&bank)?;
            let model = model.map(load_model).transpose()?;
            let cfg = ctx.sfanc_config()?;
            let x = ctx.noise(noise, duration)?;
            let sel = selector(&model, &bank, &scenario, &cfg)?;
            let out = run_sfanc(&x, &bank, sel.as_ref(), &scenario, &cfg, exec)?;
            let (d, e) = (&out.run.disturbance, &out.run.error_signal);
            write_with(&ctx.path("simulate.csv"), |w| {
                writeln!(w, "sample,d,e")?;
                for (i, (d, e)) in d.samples().iter().zip(e.samples()).enumerate() {
                    writeln!(w, "{i},{d},{e}")?;
                }
                Ok(())
            })?;
            write_with(&ctx.path("filters.csv"), |w| {
                writeln!(w, "frame,filter")?;
                for (k, f) in out.filters.iter().enumerate() {
                    writeln!(w, "{k},{f}")?;
                }
                Ok(())
            })?;
            let peak = e.peak().max(1.0);
            write_wav(ctx.path("error.wav"), &e.scaled(1.0 / peak))?;
            println!(
                "filters {:?}; noise reduction {:.2} dB",
                out.filters,
                noise_reduction_db(d, e)?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

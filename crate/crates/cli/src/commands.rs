use std::env;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use brca::checkpoint::Checkpoint;
use brca::eval::{self, AblationKind, Autoencoder, MetricsReport, Provenance, Table};
use brca::lstm::LstmModel;
use brca::model::{param_layer_count, recursion_count, BrcaModel};
use brca::trainer::{model_checkpoint, model_from_checkpoint, Control, EpochRecord, Trainable, Trainer};
use brca::{Corpus, Error};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Cli, Command, Experiment, ModelKind};

pub enum Failure {
    /// Bad arguments or configuration (exit 1).
    Usage(String),
    /// Failure while doing the work (exit 2).
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

fn command_name(c: &Command) -> String {
    match c {
        Command::Train { .. } => "train".into(),
        Command::Eval { .. } => "eval".into(),
        Command::Experiment { kind, .. } => format!("experiment-{}", experiment_name(*kind)),
        Command::Inspect { .. } => "inspect".into(),
        Command::Checkpoint { .. } => "checkpoint".into(),
        Command::Corpus { .. } => "corpus".into(),
    }
}

fn experiment_name(k: Experiment) -> &'static str {
    match k {
        Experiment::Eos => "eos",
        Experiment::Mutate => "mutate",
        Experiment::Length => "length",
        Experiment::Pooling => "pooling",
        Experiment::Static => "static",
        Experiment::Depth => "depth",
        Experiment::Lstm => "lstm",
    }
}

fn output_dir(flag: Option<PathBuf>, name: &str) -> PathBuf {
    flag.unwrap_or_else(|| match env::var_os("BRCA_OUTPUT_ROOT") {
        Some(root) => PathBuf::from(root).join(name),
        None => PathBuf::from("runs").join(name),
    })
}

pub fn run(cli: Cli) -> Outcome {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
        overrides.push(format!("eval.seed={seed}"));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides).map_err(Failure::Usage)?;
    let name = command_name(&cli.command);
    match cli.command {
        Command::Inspect { length } => return inspect(&cfg, length),
        Command::Checkpoint { path } => return describe_checkpoint(&path),
        Command::Corpus { path } => return corpus_stats(&path, cfg.data.cap),
        _ => {}
    }
    let run = Run { out: output_dir(cli.out, &name), cfg };
    write_manifest(&run, &name, cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Train { model, resume } => train(&run, model, resume.as_deref()),
        Command::Eval { checkpoint } => eval_cmd(&run, &checkpoint),
        Command::Experiment { kind, checkpoint, lstm_checkpoint } => {
            experiment(&run, kind, checkpoint.as_deref(), lstm_checkpoint.as_deref())
        }
        Command::Inspect { .. } | Command::Checkpoint { .. } | Command::Corpus { .. } => unreachable!(),
    }
}

/// Echoes the resolved config and a manifest before any work starts.
fn write_manifest(run: &Run, command: &str, config: Option<&Path>, overrides: &[String]) -> Outcome {
    fs::create_dir_all(&run.out)?;
    fs::write(run.out.join("config.toml"), run.cfg.to_toml())?;
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config_file": config.map(|p| p.display().to_string()),
        "overrides": overrides,
        "train_seed": run.cfg.train.seed,
        "eval_seed": run.cfg.eval.seed,
        "resolved_config": "config.toml",
    });
    fs::write(run.out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json"))?;
    Ok(())
}

fn load_corpus(path: &Path, cfg: &RunConfig) -> Outcome<Corpus> {
    let corpus = Corpus::load(path, cfg.data.cap)
        .map_err(|e| Failure::Runtime(format!("cannot load corpus {}: {e}", path.display())))?;
    let corpus = if cfg.data.limit > 0 { corpus.subset(cfg.data.limit, cfg.data.cap) } else { corpus };
    if corpus.is_empty() {
        return Err(Failure::Runtime(format!("corpus {} has no usable paragraphs", path.display())));
    }
    Ok(corpus)
}

fn train(run: &Run, kind: ModelKind, resume: Option<&Path>) -> Outcome {
    let corpus = load_corpus(&run.cfg.data.train, &run.cfg)?;
    match kind {
        ModelKind::Brca => {
            let trainer = match resume {
                Some(p) => Trainer::<BrcaModel<f32>>::from_checkpoint(&Checkpoint::load(p)?)?,
                None => Trainer::new(BrcaModel::new(run.cfg.model.clone())?, run.cfg.train.clone())?,
            };
            train_loop(run, trainer, &corpus)
        }
        ModelKind::Lstm => {
            let trainer = match resume {
                Some(p) => Trainer::<LstmModel<f32>>::from_checkpoint(&Checkpoint::load(p)?)?,
                None => Trainer::new(LstmModel::new(run.cfg.lstm.clone())?, run.cfg.train.clone())?,
            };
            train_loop(run, trainer, &corpus)
        }
    }
}

/// Trains to completion, checkpointing every epoch. On failure the current
/// state is saved as `failed.ckpt` before reporting.
fn train_loop<M: Trainable>(run: &Run, mut trainer: Trainer<M>, corpus: &Corpus) -> Outcome {
    let ckpt_dir = run.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut csv = fs::File::create(run.out.join("metrics.csv"))?;
    writeln!(csv, "{}", EpochRecord::CSV_HEADER)?;
    let mut sink = |rec: &EpochRecord, t: &Trainer<M>| -> brca::Result<Control> {
        writeln!(csv, "{}", rec.csv_row())?;
        csv.flush()?;
        let ckpt = t.checkpoint()?;
        ckpt.save(ckpt_dir.join(format!("epoch_{:03}.ckpt", rec.epoch)))?;
        ckpt.save(run.out.join("latest.ckpt"))?;
        eprintln!(
            "epoch {} step {} lr {:.3e} loss {:.4} byte_error {:.4}",
            rec.epoch, rec.step, rec.lr, rec.loss, rec.byte_error
        );
        Ok(Control::Continue)
    };
    match trainer.train(corpus, &mut sink) {
        Ok(_) => {
            model_checkpoint(trainer.model())?.save(run.out.join("model.ckpt"))?;
            eprintln!("wrote {}", run.out.join("model.ckpt").display());
            Ok(())
        }
        Err(e) => {
            let saved = trainer.checkpoint().and_then(|c| c.save(run.out.join("failed.ckpt")));
            let note = match saved {
                Ok(()) => format!("state saved to {}", run.out.join("failed.ckpt").display()),
                Err(s) => format!("could not save state: {s}"),
            };
            Err(Failure::Runtime(format!("training stopped at step {}: {e}; {note}", trainer.global_step())))
        }
    }
}

enum Loaded {
    Brca(BrcaModel<f32>),
    Lstm(LstmModel<f32>),
}

impl Loaded {
    fn as_autoencoder(&self) -> &dyn Autoencoder {
        match self {
            Loaded::Brca(m) => m,
            Loaded::Lstm(m) => m,
        }
    }
}

fn load_model(path: &Path) -> Outcome<Loaded> {
    let c = Checkpoint::load(path).map_err(|e| Failure::Runtime(format!("checkpoint {}: {e}", path.display())))?;
    match c.meta("kind")? {
        "brca" => Ok(Loaded::Brca(model_from_checkpoint(&c)?)),
        "lstm" => Ok(Loaded::Lstm(model_from_checkpoint(&c)?)),
        other => Err(Failure::Runtime(format!("checkpoint {} holds unknown model kind {other:?}", path.display()))),
    }
}

fn require(checkpoint: Option<&Path>, what: &str) -> Outcome<PathBuf> {
    checkpoint
        .map(Path::to_path_buf)
        .ok_or_else(|| Failure::Usage(format!("experiment {what} needs a trained model: pass --checkpoint <file>")))
}

fn write_report(run: &Run, report: &MetricsReport) -> Outcome {
    for p in report.write(&run.out)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn named(mut r: MetricsReport, name: String) -> MetricsReport {
    r.name = name;
    r
}

fn eval_cmd(run: &Run, checkpoint: &Path) -> Outcome {
    let model = load_model(checkpoint)?;
    let e = &run.cfg.eval;
    for (split, path) in [("train", &run.cfg.data.train), ("test", &run.cfg.data.test)] {
        let corpus = load_corpus(path, &run.cfg)?;
        let r = eval::evaluate(model.as_autoencoder(), &corpus, e.sample_count, e.seed, &checkpoint.display().to_string())?;
        println!(
            "{split}: byte_error {:.5} eos_exact {:.4} unterminated {}",
            r.scalars["byte_error"], r.scalars["eos_exact_fraction"], r.scalars["eos_unterminated"]
        );
        write_report(run, &named(r, format!("eval_{split}")))?;
    }
    Ok(())
}

fn experiment(run: &Run, kind: Experiment, checkpoint: Option<&Path>, lstm_checkpoint: Option<&Path>) -> Outcome {
    let cfg = &run.cfg;
    let e = &cfg.eval;
    let splits = [("train", &cfg.data.train), ("test", &cfg.data.test)];
    match kind {
        Experiment::Eos | Experiment::Mutate | Experiment::Length => {
            let path = require(checkpoint, experiment_name(kind))?;
            let model = load_model(&path)?;
            let m = model.as_autoencoder();
            let id = path.display().to_string();
            for (split, corpus_path) in splits {
                let corpus = load_corpus(corpus_path, cfg)?;
                let r = match kind {
                    Experiment::Eos => eval::evaluate(m, &corpus, e.sample_count, e.seed, &id)?,
                    Experiment::Mutate => eval::mutation_experiment(m, &corpus, &e.p_grid, e.sample_count, e.seed, &id)?,
                    _ => eval::error_by_length(m, &corpus, e.bin_width, e.sample_count, e.seed, &id)?,
                };
                write_report(run, &named(r, format!("{}_{split}", experiment_name(kind))))?;
            }
            Ok(())
        }
        Experiment::Pooling | Experiment::Static | Experiment::Depth => {
            let (ablation, variants) = match kind {
                Experiment::Pooling => (AblationKind::Pooling, eval::pooling_variants(&cfg.model)),
                Experiment::Static => (AblationKind::Static, eval::static_variants(&cfg.model, cfg.experiment.static_length)),
                _ => (AblationKind::Depth, eval::depth_variants(&cfg.model, &cfg.experiment.depths)),
            };
            let train = load_corpus(&cfg.data.train, cfg)?;
            let test = load_corpus(&cfg.data.test, cfg)?;
            let mut progress = |label: &str, r: &EpochRecord| {
                eprintln!("[{label}] epoch {} step {} loss {:.4} byte_error {:.4}", r.epoch, r.step, r.loss, r.byte_error);
            };
            let r = eval::ablation_run(ablation, &variants, &train, &test, &cfg.train, e.sample_count, e.seed, &mut progress)?;
            for note in &r.notes {
                eprintln!("{note}");
            }
            write_report(run, &r)
        }
        Experiment::Lstm => lstm_comparison(run, require(checkpoint, "lstm")?.as_path(), lstm_checkpoint),
    }
}

/// Byte error of the convolutional model and the LSTM on both corpora.
fn lstm_comparison(run: &Run, checkpoint: &Path, lstm_checkpoint: Option<&Path>) -> Outcome {
    let cfg = &run.cfg;
    let conv = load_model(checkpoint)?;
    let train = load_corpus(&cfg.data.train, cfg)?;
    let test = load_corpus(&cfg.data.test, cfg)?;
    let lstm = match lstm_checkpoint {
        Some(p) => match load_model(p)? {
            Loaded::Lstm(m) => m,
            Loaded::Brca(_) => return Err(Failure::Usage(format!("{} is not an LSTM checkpoint", p.display()))),
        },
        None => {
            eprintln!("training LSTM baseline");
            let mut trainer = Trainer::new(LstmModel::new(cfg.lstm.clone())?, cfg.train.clone())?;
            let mut sink = |r: &EpochRecord, _: &Trainer<LstmModel<f32>>| -> brca::Result<Control> {
                eprintln!("[lstm] epoch {} step {} loss {:.4} byte_error {:.4}", r.epoch, r.step, r.loss, r.byte_error);
                Ok(Control::Continue)
            };
            trainer.train(&train, &mut sink)?;
            let m = trainer.into_model();
            model_checkpoint(&m)?.save(run.out.join("lstm.ckpt"))?;
            m
        }
    };
    let e = &cfg.eval;
    let mut report = MetricsReport::new(
        "lstm",
        Provenance {
            checkpoint: checkpoint.display().to_string(),
            corpus: train.source().into(),
            seed: e.seed,
            sample_count: e.sample_count,
        },
    );
    let mut table = Table::new(&["model", "train_error", "test_error"]);
    for (label, m) in [("recursive-conv", conv.as_autoencoder()), ("lstm", &lstm as &dyn Autoencoder)] {
        let mut errs = Vec::new();
        for corpus in [&train, &test] {
            let r = eval::evaluate(m, corpus, e.sample_count, e.seed, label)?;
            errs.push(r.scalars["byte_error"]);
        }
        report.scalars.insert(format!("{label}.train_error"), errs[0]);
        report.scalars.insert(format!("{label}.test_error"), errs[1]);
        table.push(vec![label.into(), errs[0].to_string(), errs[1].to_string()]);
    }
    report.tables.insert("comparison".into(), table);
    write_report(run, &report)
}

fn inspect(cfg: &RunConfig, length: usize) -> Outcome {
    if length == 0 {
        return Err(Failure::Usage("--length must be at least 1".into()));
    }
    let model = BrcaModel::<f32>::new(cfg.model.clone()).map_err(|e| Failure::Usage(e.to_string()))?;
    let padded = model.padded_len_for(length).map_err(|e| Failure::Usage(e.to_string()))?;
    let n = cfg.model.n;
    println!("n                      {n}");
    println!("raw length             {length}");
    println!("padded length          {padded}");
    println!("recursions             {}", recursion_count(padded)?);
    println!("parameterized layers   {} (formula 2n(r+2))", param_layer_count(n, padded)?);
    let executed = model.executed_layer_count(padded)?;
    println!("executed layers        {executed} ({} in groups + output projection)", executed - 1);
    println!("stored layers          {}", model.stored_layer_count());
    println!("parameters             {}", model.params().scalar_count());
    println!("stages:");
    for s in model.stages(padded)? {
        println!("  {:<28} {:?}", s.name, s.shape);
    }
    Ok(())
}

fn describe_checkpoint(path: &Path) -> Outcome {
    let c = Checkpoint::load(path).map_err(|e| Failure::Runtime(format!("checkpoint {}: {e}", path.display())))?;
    for (k, v) in &c.metadata {
        println!("{k} = {v}");
    }
    let scalars: usize = c.arrays.iter().map(|a| a.values.len()).sum();
    println!("{} arrays, {scalars} values", c.arrays.len());
    Ok(())
}

fn corpus_stats(path: &Path, cap: usize) -> Outcome {
    let corpus = Corpus::load(path, cap).map_err(|e| Failure::Runtime(format!("cannot load corpus {}: {e}", path.display())))?;
    if corpus.is_empty() {
        return Err(Failure::Runtime(format!("corpus {} is empty", path.display())));
    }
    let lens: Vec<usize> = corpus.samples().iter().map(Vec::len).collect();
    let total: usize = lens.iter().sum();
    println!("paragraphs   {}", lens.len());
    println!("bytes        {total}");
    println!("mean length  {:.1}", total as f64 / lens.len() as f64);
    println!("max length   {}", lens.iter().max().copied().unwrap_or(0));
    let mut bins = std::collections::BTreeMap::new();
    for &l in &lens {
        *bins.entry(eval::length_bin(l, eval::LENGTH_BIN_WIDTH)).or_insert(0usize) += 1;
    }
    println!("length bins (upper limit: count)");
    for (bin, count) in bins {
        println!("  {bin:>5}: {count}");
    }
    Ok(())
}

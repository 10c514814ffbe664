use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use nar_core::ctc::Vocab;
use nar_core::data::{generate, long_tail_spec, read_dataset, split, write_dataset, Dataset, TaskSpec, Utterance};
use nar_core::eval::{bench_decode, corpus_eval, emit_bench_report, emit_eval_report, DEFAULT_BUCKET_WIDTH};
use nar_core::models::checkpoint::Checkpoint;
use nar_core::models::train::{planned_steps, train};
use nar_core::models::{Config, Method, Model};

const SEED_VAR: &str = "NAR_SEED";

#[derive(Parser)]
#[command(name = "nar-decode", version, about = "Non-autoregressive decoding on a synthetic frame-to-token task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    All,
    Train,
    Dev,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        /// Task spec JSON; omitted keys take their defaults. May carry `count`
        /// and `long_tail`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's utterance count.
        #[arg(long)]
        count: Option<usize>,
        /// Use the heavy-tailed length distribution.
        #[arg(long)]
        long_tail: bool,
    },
    /// Train one model on the training split of a dataset.
    Train {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        /// Config JSON; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Print the mean loss every this many steps (0 disables).
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Decode a dataset with a trained checkpoint into JSON lines.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::All)]
        split: Part,
    },
    /// Score hypotheses against the references of a dataset.
    Eval {
        /// Dataset file holding the references.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BUCKET_WIDTH)]
        bucket_width: usize,
    },
    /// Time decoding of several checkpoints on the same utterances.
    Bench {
        /// Comma-separated checkpoint paths.
        #[arg(long, value_delimiter = ',', required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::All)]
        split: Part,
        /// Use only the first N utterances of the selected split.
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Deserialize)]
struct DataSpecFile {
    #[serde(flatten)]
    task: TaskSpec,
    count: Option<usize>,
    #[serde(default)]
    long_tail: bool,
}

/// One decoded utterance in a hypothesis file.
#[derive(Serialize, Deserialize)]
struct HypLine {
    id: String,
    method: String,
    tokens: Vec<usize>,
    iterations: usize,
    decoder_calls: usize,
    head_evals: usize,
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_VAR}={v:?} is not an unsigned integer"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(SEED_VAR),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn select(dataset: Dataset, part: Part, ratios: [f64; 3]) -> Result<Vec<Utterance>> {
    if let Part::All = part {
        return Ok(dataset.utterances);
    }
    let s = split(&dataset, ratios)?;
    Ok(match part {
        Part::Train => s.train,
        Part::Dev => s.dev,
        Part::Test => s.test,
        Part::All => unreachable!(),
    })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)
        .and_then(Checkpoint::into_model)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen_data(spec: Option<PathBuf>, out: PathBuf, count: Option<usize>, long_tail: bool) -> Result<()> {
    let file = match &spec {
        Some(p) => read_json::<DataSpecFile>(p)?,
        None => DataSpecFile {
            task: TaskSpec::default(),
            count: None,
            long_tail: false,
        },
    };
    let mut task = file.task;
    if let Some(seed) = seed_override()? {
        task.seed = seed;
    }
    if long_tail || file.long_tail {
        task = long_tail_spec(&task);
    }
    let n = count.or(file.count).unwrap_or(1000);
    let dataset = generate(&task, n)?;
    write_dataset(&dataset, &out)?;
    eprintln!("wrote {n} utterances to {}", out.display());
    Ok(())
}

fn train_cmd(method: Method, data: PathBuf, config: Option<PathBuf>, ckpt: PathBuf, log_every: u64) -> Result<()> {
    let mut cfg: Config = match &config {
        Some(p) => read_json(p)?,
        None => Config::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.train.seed = seed;
    }
    let dataset = load_dataset(&data)?;
    let spec = dataset.spec.clone();
    let utts = select(dataset, Part::Train, cfg.train.split)?;
    if utts.is_empty() {
        bail!("training split of {} is empty", data.display());
    }
    let mut model = Model::new(method, cfg, Vocab::new(spec.vocab_size)?, spec.feat_dim)?;
    let total = planned_steps(&model, utts.len());
    eprintln!("training {method} on {} utterances for {total} steps", utts.len());
    let start = Instant::now();
    let mut progress = |step: u64, loss: f64| {
        if log_every > 0 && (step % log_every == 0 || step == total) {
            eprintln!("step {step}/{total} loss {loss:.4} ({:.0}s)", start.elapsed().as_secs_f64());
        }
    };
    let report = train(&mut model, &utts, Some(&mut progress))?;
    Checkpoint::from_model(&model, report.steps).save(&ckpt)?;
    eprintln!("saved {}", ckpt.display());
    Ok(())
}

fn decode_cmd(ckpt: PathBuf, data: PathBuf, out: PathBuf, part: Part) -> Result<()> {
    let model = load_model(&ckpt)?;
    let utts = select(load_dataset(&data)?, part, model.config.train.split)?;
    let file = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    for u in &utts {
        let r = model.decode(&u.features_f64()).with_context(|| format!("decoding {}", u.id))?;
        let line = HypLine {
            id: u.id.clone(),
            method: model.method.to_string(),
            tokens: r.tokens,
            iterations: r.iterations,
            decoder_calls: r.decoder_calls,
            head_evals: r.head_evals,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("writing {}", out.display()))?;
    eprintln!("decoded {} utterances into {}", utts.len(), out.display());
    Ok(())
}

fn eval_cmd(reference: PathBuf, hyp: PathBuf, report: PathBuf, bucket_width: usize) -> Result<()> {
    let refs: HashMap<String, Vec<usize>> = load_dataset(&reference)?
        .utterances
        .into_iter()
        .map(|u| (u.id, u.transcript.0))
        .collect();
    let file = std::fs::File::open(&hyp).with_context(|| format!("opening {}", hyp.display()))?;
    let mut method: Option<String> = None;
    let mut pairs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", hyp.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let h: HypLine =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", hyp.display(), n + 1))?;
        match &method {
            None => method = Some(h.method.clone()),
            Some(m) if *m != h.method => bail!("{} mixes methods {m} and {}", hyp.display(), h.method),
            Some(_) => {}
        }
        let Some(r) = refs.get(&h.id) else {
            bail!("hypothesis {} has no reference in {}", h.id, reference.display());
        };
        pairs.push((r.clone(), h.tokens));
    }
    let method = method.unwrap_or_default();
    let rep = corpus_eval(&method, &pairs, bucket_width)?;
    emit_eval_report(&rep, &report)?;
    println!(
        "{method}: wer {:.4} (sub {:.4} del {:.4} ins {:.4}) over {} utterances",
        rep.overall.wer, rep.overall.sub, rep.overall.del, rep.overall.ins, rep.overall.utterances
    );
    Ok(())
}

fn bench_cmd(ckpts: Vec<PathBuf>, data: PathBuf, reps: usize, report: PathBuf, part: Part, limit: Option<usize>) -> Result<()> {
    let models = ckpts.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let mut utts = select(load_dataset(&data)?, part, models[0].config.train.split)?;
    if let Some(n) = limit {
        utts.truncate(n);
    }
    let refs: Vec<&Model> = models.iter().collect();
    let rep = bench_decode(&refs, &utts, reps, &mut ())?;
    emit_bench_report(&rep, &report)?;
    for m in &rep.methods {
        let speedup = m.speedup_vs_ar.map(|s| format!(" speedup {s:.2}x")).unwrap_or_default();
        println!(
            "{}: mean {:.3} ms median {:.3} ms iterations {:.2} [{}, {}]{speedup}",
            m.method, m.mean_ms, m.median_ms, m.iterations.mean, m.iterations.min, m.iterations.max
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            spec,
            out,
            count,
            long_tail,
        } => gen_data(spec, out, count, long_tail),
        Command::Train {
            method,
            data,
            config,
            ckpt,
            log_every,
        } => train_cmd(method, data, config, ckpt, log_every),
        Command::Decode { ckpt, data, out, split } => decode_cmd(ckpt, data, out, split),
        Command::Eval {
            reference,
            hyp,
            report,
            bucket_width,
        } => eval_cmd(reference, hyp, report, bucket_width),
        Command::Bench {
            ckpts,
            data,
            reps,
            report,
            split,
            limit,
        } => bench_cmd(ckpts, data, reps, report, split, limit),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cct_core::decoder::{beam_search, greedy_decode, greedy_decode_streaming, BeamConfig, DecodeConfig};
use cct_core::exec::Exec;
use cct_core::harness::results::{summary, to_csv};
use cct_core::harness::{
    latency_row, load_checkpoint, persist, prepare_data, rescore_table, run_sweep, save_checkpoint, train_model,
    CheckResult, ContextPoint, Corpus, Datasets, ExperimentSpec, Future, Past,
};
use cct_core::harness::config::RescoreSection;
use cct_core::masking::{build_mask, receptive_field};
use cct_core::metrics::{validate_alignment, wer, WerStats};
use cct_core::transducer::TransducerModel;

/// Configurable-context transformer transducer toolkit.
#[derive(Parser)]
#[command(name = "cct", version)]
struct Cli {
    /// Directory for every file the command writes.
    #[arg(long, global = true, env = "CCT_OUTPUT_DIR", default_value = "cct-out")]
    out_dir: PathBuf,

    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData(SpecArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Decode the test split with one mask setting.
    Decode(DecodeArgs),
    /// Rescore first-pass n-best lists with wider masks.
    Rescore(RescoreArgs),
    /// Streaming partial-result latency for one or more settings.
    Latency(LatencyArgs),
    /// Train (or load) and run the full experiment sweep.
    Sweep(SweepArgs),
    /// Print an attention mask and its receptive fields.
    Maskviz(MaskvizArgs),
}

#[derive(Args, Clone)]
struct SpecArgs {
    /// Experiment file (TOML); the built-in default experiment otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    train_utterances: Option<usize>,
    #[arg(long)]
    test_utterances: Option<usize>,
    /// Corpus written by gen-data, split at the configured training size.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Look-back options to sample from (repeatable); replaces the configured set.
    #[arg(long)]
    past: Vec<Past>,
    /// Look-ahead options to sample from (repeatable); replaces the configured set.
    #[arg(long)]
    future: Vec<Future>,
    #[arg(long)]
    fastemit_lambda: Option<f64>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Trained model.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Look-back: unlimited, fixed:<duration> or chunks:<n>.
    #[arg(long, default_value = "unlimited")]
    past: Past,
    /// Look-ahead: none, full, chunk:<duration> or lookahead:<duration>.
    #[arg(long, default_value = "chunk:240ms")]
    future: Future,
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    beam: Option<usize>,
    /// Decode chunk by chunk as audio arrives.
    #[arg(long)]
    streaming: bool,
}

#[derive(Args)]
struct RescoreArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "unlimited")]
    past: Past,
    #[arg(long = "first", default_value = "chunk:60ms")]
    first_pass: Vec<Future>,
    #[arg(long = "second", default_value = "full")]
    second_pass: Vec<Future>,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 10)]
    nbest: usize,
    #[arg(long)]
    max_utterances: Option<usize>,
    /// Recompute label encodings instead of reusing the first pass's.
    #[arg(long)]
    no_label_cache: bool,
}

#[derive(Args)]
struct LatencyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "unlimited")]
    past: Past,
    #[arg(long = "future", default_values = ["chunk:60ms", "chunk:240ms", "full"])]
    futures: Vec<Future>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Skip training and evaluate this model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct MaskvizArgs {
    #[arg(long, default_value = "unlimited")]
    past: Past,
    #[arg(long, default_value = "chunk:240ms")]
    future: Future,
    /// Sequence length in encoder frames.
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Also write the mask as a PGM image with this many pixels per cell.
    #[arg(long)]
    pgm_scale: Option<usize>,
}

struct Checks(Vec<CheckResult>);

impl Checks {
    fn add(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.0.push(CheckResult { name: name.into(), passed, detail: detail.into() });
    }

    fn report(&self) -> bool {
        for c in &self.0 {
            println!("check [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
        }
        self.0.iter().all(|c| c.passed)
    }
}

fn load_spec(a: &SpecArgs) -> Result<ExperimentSpec> {
    let mut spec = match &a.config {
        Some(p) => ExperimentSpec::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentSpec::default_spec(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.steps {
        spec.training.steps = s;
    }
    if let Some(n) = a.train_utterances {
        spec.task.train_utterances = n;
    }
    if let Some(n) = a.test_utterances {
        spec.task.test_utterances = n;
    }
    spec.validate()?;
    Ok(spec)
}

fn load_data(a: &SpecArgs, spec: &ExperimentSpec) -> Result<Datasets> {
    match &a.corpus {
        None => Ok(prepare_data(spec)?),
        Some(p) => {
            let c = Corpus::load(p).with_context(|| format!("reading {}", p.display()))?;
            if c.spec.feature_dim != spec.task.feature_dim || c.spec.vocab_size != spec.task.vocab_size {
                bail!("corpus {} does not match the experiment's feature dim or vocabulary", p.display());
            }
            let (train, test) = c.split(spec.task.train_utterances);
            Ok(Datasets { train, test })
        }
    }
}

fn load_model(a: &ModelArgs) -> Result<(ExperimentSpec, Datasets, TransducerModel)> {
    let spec = load_spec(&a.spec)?;
    let data = load_data(&a.spec, &spec)?;
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if model.config.feature_dim != spec.task.feature_dim || model.config.vocab_size != spec.task.vocab_size {
        bail!("checkpoint does not match the experiment's feature dim or vocabulary");
    }
    Ok((spec, data, model))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn gen_data(cli: &Cli, a: &SpecArgs, checks: &mut Checks) -> Result<()> {
    let spec = load_spec(a)?;
    let corpus = cct_core::harness::generate_corpus(&spec.task_spec())?;
    let path = cli.out_dir.join("corpus.bin");
    fs::create_dir_all(&cli.out_dir)?;
    corpus.save(&path)?;
    let frames: usize = corpus.utterances.iter().map(|u| u.features.rows()).sum();
    println!("wrote {} utterances ({frames} frames) to {}", corpus.len(), path.display());
    checks.add("corpus reloads identically", Corpus::load(&path)? == corpus, path.display().to_string());
    let bad = corpus.alignments.iter().filter(|al| validate_alignment(al).is_err()).count();
    checks.add("alignments are ordered and non-overlapping", bad == 0, format!("{bad} invalid"));
    Ok(())
}

fn train_cmd(cli: &Cli, t: &TrainArgs, exec: Exec, checks: &mut Checks) -> Result<()> {
    let a = &t.spec;
    let mut spec = load_spec(a)?;
    if !t.past.is_empty() {
        spec.training.past = t.past.clone();
    }
    if !t.future.is_empty() {
        spec.training.future = t.future.clone();
    }
    if let Some(l) = t.fastemit_lambda {
        spec.training.fastemit_lambda = l;
    }
    spec.validate()?;
    let data = load_data(a, &spec)?;
    let mut log = String::from("step,loss,grad_norm,learning_rate,mask\n");
    let every = (spec.training.steps / 20).max(1);
    let (model, summary) = train_model(&spec, &data.train, exec, |r| {
        log.push_str(&format!("{},{},{},{},\"{}\"\n", r.step, r.mean_loss, r.grad_norm, r.learning_rate, r.mask));
        if r.step % every == 0 {
            println!("step {:>6}  loss {:>9.4}  {}", r.step, r.mean_loss, r.mask);
        }
    })?;
    write(&cli.out_dir, "train_log.csv", log)?;
    let path = cli.out_dir.join("model.ckpt");
    save_checkpoint(&model, &path)?;
    println!("saved {} ({} parameters)", path.display(), model.params.num_scalars());
    let (a0, a1) = (summary.first_loss.unwrap_or(f64::NAN), summary.final_loss.unwrap_or(f64::NAN));
    checks.add("training loss decreased", a1.is_finite() && a1 < a0, format!("{a0:.4} -> {a1:.4}"));
    let back = load_checkpoint(&path)?;
    let same = cct_core::harness::checkpoint_bytes(&back)? == cct_core::harness::checkpoint_bytes(&model)?;
    checks.add("checkpoint reloads bit-exactly", same, path.display().to_string());
    Ok(())
}

fn decode_cmd(cli: &Cli, a: &DecodeArgs, exec: Exec, checks: &mut Checks) -> Result<()> {
    let (spec, data, model) = load_model(&a.model)?;
    let point = ContextPoint::new(a.past, a.future);
    if spec.coverage(&point) == cct_core::harness::Coverage::Extrapolated {
        eprintln!("warning: {point} lies outside the training mask set (extrapolation)");
    }
    let cfg = DecodeConfig { label_mask: spec.label_mask(), ..DecodeConfig::new(point.mask()) };
    let beam = a.beam.map(|b| BeamConfig { beam: b, nbest: b, ..BeamConfig::default() });
    let outs = exec.map(&data.test.utterances, |u| -> cct_core::Result<_> {
        let offline = greedy_decode(&model, &u.features, &cfg)?;
        let streamed = if a.streaming { Some(greedy_decode_streaming(&model, &u.features, &cfg)?.0) } else { None };
        let nbest = match beam {
            Some(b) => Some(beam_search(&model, &u.features, &cfg, &b)?),
            None => None,
        };
        Ok((offline, streamed, nbest))
    });
    let mut lines = String::new();
    let (mut total, mut mismatches, mut unsorted) = (WerStats::zero(), 0, 0);
    for (u, r) in data.test.utterances.iter().zip(outs) {
        let (offline, streamed, nbest) = r?;
        let best = match &nbest {
            Some(l) => {
                unsorted += usize::from(!l.is_sorted());
                l.best().cloned().unwrap_or_else(cct_core::decoder::TimedHypothesis::empty)
            }
            None => streamed.clone().unwrap_or_else(|| offline.clone()),
        };
        if let Some(s) = &streamed {
            mismatches += usize::from(s.tokens != offline.tokens);
        }
        total = total.merge(&wer(&u.tokens, &best.tokens));
        let row = serde_json::json!({ "id": u.id, "reference": u.tokens, "hypothesis": best, "nbest": nbest });
        lines.push_str(&serde_json::to_string(&row)?);
        lines.push('\n');
    }
    let p = write(&cli.out_dir, "hypotheses.jsonl", lines)?;
    println!(
        "{point}: WER {:.2}% ({} errors / {} words) over {} utterances; wrote {}",
        100.0 * total.wer(),
        total.errors(),
        total.ref_len,
        data.test.len(),
        p.display()
    );
    if a.streaming {
        checks.add("streaming decode matches offline decode", mismatches == 0, format!("{mismatches} differing utterances"));
    }
    if beam.is_some() {
        checks.add("n-best lists are sorted", unsorted == 0, format!("{unsorted} unsorted"));
    }
    Ok(())
}

fn rescore_cmd(cli: &Cli, a: &RescoreArgs, exec: Exec, checks: &mut Checks) -> Result<()> {
    let (spec, data, model) = load_model(&a.model)?;
    let section = RescoreSection {
        past: a.past,
        first_pass: a.first_pass.clone(),
        second_pass: a.second_pass.clone(),
        beam: a.beam,
        nbest: a.nbest,
        reuse_label_cache: !a.no_label_cache,
        max_utterances: a.max_utterances,
    };
    if section.nbest == 0 || section.beam < section.nbest {
        bail!("need beam >= nbest >= 1");
    }
    let (cells, c, warnings) = rescore_table(&model, &data.test, &section, spec.label_mask(), exec)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    for cell in &cells {
        println!(
            "{} -> {}: WER {:.2}% -> {:.2}% ({} -> {} errors, {} best hypotheses changed)",
            cell.first_pass,
            cell.second_pass,
            100.0 * cell.first_pass_wer,
            100.0 * cell.rescored_wer,
            cell.first_pass_errors,
            cell.rescored_errors,
            cell.changed_best
        );
    }
    write(&cli.out_dir, "rescore.csv", to_csv(&cells)?)?;
    checks.0.extend(c);
    Ok(())
}

fn latency_cmd(cli: &Cli, a: &LatencyArgs, exec: Exec, checks: &mut Checks) -> Result<()> {
    let (spec, data, model) = load_model(&a.model)?;
    let mut rows = Vec::new();
    let mut mismatches = 0;
    for &f in &a.futures {
        let p = ContextPoint::new(a.past, f);
        let (row, m) = latency_row(&model, &data.test, p, spec.label_mask(), spec.coverage(&p), exec)?;
        let ms = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.1} ms"));
        println!("{p}: WER {:.2}%  PRWL {}  emission delay {}", 100.0 * row.wer, ms(row.prwl_ms), ms(row.mean_emission_delay_ms));
        rows.push(row);
        mismatches += m;
    }
    write(&cli.out_dir, "latency.csv", to_csv(&rows)?)?;
    checks.add("streaming decode matches offline decode", mismatches == 0, format!("{mismatches} differing utterances"));
    Ok(())
}

fn sweep_cmd(cli: &Cli, a: &SweepArgs, exec: Exec, checks: &mut Checks) -> Result<()> {
    let mut spec = load_spec(&a.spec)?;
    if let Some(c) = &a.checkpoint {
        spec.checkpoint = Some(c.clone());
    }
    let dir = spec.output_dir.clone().unwrap_or_else(|| cli.out_dir.clone());
    for w in spec.extrapolation_warnings() {
        eprintln!("warning: {w}");
    }
    let every = (spec.training.steps / 20).max(1);
    let out = run_sweep(&spec, None, exec, |r| {
        if r.step % every == 0 {
            println!("step {:>6}  loss {:>9.4}  {}", r.step, r.mean_loss, r.mask);
        }
    })?;
    fs::create_dir_all(&dir)?;
    if out.results.train.trained {
        save_checkpoint(&out.model, &dir.join("model.ckpt"))?;
    }
    write(&dir, "experiment.toml", spec.to_toml()?)?;
    let rt = persist(&dir, &out.results)?;
    print!("{}", summary(&out.results));
    println!("results in {}", dir.display());
    checks.0.extend(out.results.checks);
    checks.0.push(rt);
    Ok(())
}

fn maskviz(cli: &Cli, a: &MaskvizArgs, checks: &mut Checks) -> Result<()> {
    let p = ContextPoint::new(a.past, a.future);
    let cfg = p.mask();
    let mask = build_mask(a.frames, &cfg)?;
    println!("{p} ({cfg}), {} frames; rows are queries, '#' marks visible keys", a.frames);
    print!("{}", mask.to_ascii());
    println!("receptive field after {} layers:", a.layers);
    let mut ok = true;
    for t in 0..a.frames {
        let (lo, hi) = receptive_field(&cfg, a.layers, t, a.frames);
        println!("  frame {t:>3}: inputs {lo}..={hi}");
        ok &= lo <= t && t <= hi;
    }
    checks.add("every frame sees itself", (0..a.frames).all(|t| mask.get(t, t)) && ok, "diagonal and receptive fields");
    if let Some(scale) = a.pgm_scale {
        let path = write(&cli.out_dir, "mask.pgm", mask.to_pgm(scale.max(1)))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: &Cli, checks: &mut Checks) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a, checks),
        Command::Train(a) => train_cmd(cli, a, exec, checks),
        Command::Decode(a) => decode_cmd(cli, a, exec, checks),
        Command::Rescore(a) => rescore_cmd(cli, a, exec, checks),
        Command::Latency(a) => latency_cmd(cli, a, exec, checks),
        Command::Sweep(a) => sweep_cmd(cli, a, exec, checks),
        Command::Maskviz(a) => maskviz(cli, a, checks),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut checks = Checks(Vec::new());
    let result = run(&cli, &mut checks);
    let _ = std::io::stdout().flush();
    match result {
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Ok(()) if checks.report() => ExitCode::SUCCESS,
        Ok(()) => {
            eprintln!("self-checks failed");
            ExitCode::FAILURE
        }
    }
}

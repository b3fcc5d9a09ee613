//! Training and evaluation passes behind a sweep.

use std::path::Path;

use super::checkpoint::load_checkpoint;
use super::config::{ContextPoint, Coverage, ExperimentSpec, RescoreSection};
use super::corpus::{generate_corpus, Corpus};
use super::results::{read_results, write_results, CheckResult, LatencyRow, RescoreCell, SweepResults, TrainSummary, WerCell};
use crate::decoder::{beam_search, greedy_decode, greedy_decode_streaming, BeamConfig, DecodeConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::masking::LabelMaskConfig;
use crate::metrics::{emission_delay, pooled_mean, prwl, wer, FirstSeenRule, WerStats};
use crate::rescoring::{rescore_nbest, RescoreConfig};
use crate::transducer::{train, StepReport, TransducerModel};

pub struct Datasets {
    pub train: Corpus,
    pub test: Corpus,
}

/// One corpus drawn from the experiment seed, split into training and test
/// utterances.
pub fn prepare_data(spec: &ExperimentSpec) -> Result<Datasets> {
    let corpus = generate_corpus(&spec.task_spec())?;
    let (train, test) = corpus.split(spec.task.train_utterances);
    Ok(Datasets { train, test })
}

pub fn train_model(
    spec: &ExperimentSpec,
    data: &Corpus,
    exec: Exec,
    on_step: impl FnMut(&StepReport),
) -> Result<(TransducerModel, TrainSummary)> {
    let mut model = TransducerModel::new(spec.model_config())?;
    let reports = train(&mut model, &data.utterances, &spec.train_config(), exec, on_step)?;
    Ok((model, summarise(&reports)))
}

fn summarise(reports: &[StepReport]) -> TrainSummary {
    let tail = (reports.len() / 10).max(1).min(reports.len());
    let final_loss =
        (!reports.is_empty()).then(|| reports[reports.len() - tail..].iter().map(|r| r.mean_loss).sum::<f64>() / tail as f64);
    TrainSummary { steps: reports.len(), first_loss: reports.first().map(|r| r.mean_loss), final_loss, trained: true }
}

/// Offline greedy decoding of every test utterance.
pub fn decode_wer(model: &TransducerModel, test: &Corpus, cfg: &DecodeConfig, exec: Exec) -> Result<WerStats> {
    let stats = exec.map(&test.utterances, |u| greedy_decode(model, &u.features, cfg).map(|h| wer(&u.tokens, &h.tokens)));
    stats.into_iter().try_fold(WerStats::zero(), |acc, s| Ok(acc.merge(&s?)))
}

/// Streaming greedy decoding with partial-result latency and emission
/// delay. Also returns how many utterances decoded differently offline.
pub fn latency_row(
    model: &TransducerModel,
    test: &Corpus,
    point: ContextPoint,
    label_mask: LabelMaskConfig,
    coverage: Coverage,
    exec: Exec,
) -> Result<(LatencyRow, usize)> {
    let cfg = DecodeConfig { label_mask, ..DecodeConfig::new(point.mask()) };
    let idx: Vec<usize> = (0..test.len()).collect();
    let per_utt = exec.map(&idx, |&i| -> Result<_> {
        let u = &test.utterances[i];
        let al = &test.alignments[i];
        let (hyp, trace) = greedy_decode_streaming(model, &u.features, &cfg)?;
        let offline = greedy_decode(model, &u.features, &cfg)?;
        let lat = prwl(al, &trace, FirstSeenRule::StablePrefix)?;
        let delay = emission_delay(al, &hyp)?;
        Ok((wer(&u.tokens, &hyp.tokens), lat, delay, offline.tokens != hyp.tokens))
    });
    let mut stats = WerStats::zero();
    let (mut words, mut delays, mut mismatches, mut early) = (Vec::new(), Vec::new(), 0, 0);
    for r in per_utt {
        let (s, lat, delay, differs) = r?;
        stats = stats.merge(&s);
        early += lat.early_words;
        words.extend(lat.word_delays_ms);
        delays.extend(delay.per_token_ms);
        mismatches += usize::from(differs);
    }
    let row = LatencyRow {
        past: point.past,
        future: point.future,
        wer: stats.wer(),
        prwl_ms: pooled_mean(&words),
        mean_emission_delay_ms: pooled_mean(&delays),
        matched_words: words.iter().flatten().count(),
        deleted_words: words.iter().filter(|w| w.is_none()).count(),
        early_words: early,
        coverage,
    };
    Ok((row, mismatches))
}

/// Rescoring matrix over first-pass × second-pass settings. The identity
/// rescoring (second pass equal to the first) is run as a check.
pub fn rescore_table(
    model: &TransducerModel,
    test: &Corpus,
    r: &RescoreSection,
    label_mask: LabelMaskConfig,
    exec: Exec,
) -> Result<(Vec<RescoreCell>, Vec<CheckResult>, Vec<String>)> {
    let n_utts = r.max_utterances.unwrap_or(test.len()).min(test.len());
    let utts = &test.utterances[..n_utts];
    let beam = BeamConfig { beam: r.beam, nbest: r.nbest, ..BeamConfig::default() };
    let (mut cells, mut checks, mut warnings) = (Vec::new(), Vec::new(), Vec::new());
    let n_layers = model.config.acoustic.n_layers;
    for &fp in &r.first_pass {
        let first = ContextPoint::new(r.past, fp);
        let dcfg = DecodeConfig { label_mask, ..DecodeConfig::new(first.mask()) };
        let lists = exec.map(utts, |u| beam_search(model, &u.features, &dcfg, &beam));
        let lists = lists.into_iter().collect::<Result<Vec<_>>>()?;
        let sorted = lists.iter().all(|l| l.is_sorted() && l.n() >= 1);

        let rescore_all = |wide: ContextPoint| -> Result<Vec<crate::rescoring::RescoredList>> {
            let rc = RescoreConfig { reuse_label_cache: r.reuse_label_cache, label_mask, ..RescoreConfig::new(wide.mask()) };
            let idx: Vec<usize> = (0..utts.len()).collect();
            exec.map(&idx, |&i| rescore_nbest(model, &utts[i].features, &lists[i], &rc, Exec::Sequential)).into_iter().collect()
        };

        let identity = rescore_all(first)?;
        let no_op = identity.iter().zip(&lists).all(|(re, l)| {
            re.hypotheses.iter().enumerate().all(|(k, h)| {
                h.first_pass_rank == k && h.hypothesis.score.to_bits() == l.hypotheses[k].score.to_bits()
            })
        });
        checks.push(CheckResult {
            name: format!("identity rescoring at {fp}"),
            passed: no_op && sorted,
            detail: if no_op && sorted { "ranking and scores unchanged".into() } else { "ranking changed".into() },
        });

        let first_stats: Vec<WerStats> =
            utts.iter().zip(&lists).map(|(u, l)| wer(&u.tokens, &l.best().expect("non-empty").tokens)).collect();
        let first_total = first_stats.iter().fold(WerStats::zero(), |a, s| a.merge(s));
        for &sp in &r.second_pass {
            let wide = ContextPoint::new(r.past, sp);
            let max_len = utts.iter().map(|u| model.acoustic.downsampler.output_len(u.features.rows())).max().unwrap_or(1);
            let rc = RescoreConfig::new(wide.mask());
            if rc.check_widens(&first.mask(), n_layers, max_len).is_err() {
                warnings.push(format!("second pass {sp} does not widen first pass {fp}"));
            }
            let rescored = rescore_all(wide)?;
            let mut total = WerStats::zero();
            let mut changed = 0;
            for ((u, re), l) in utts.iter().zip(&rescored).zip(&lists) {
                let best = re.best().expect("non-empty");
                total = total.merge(&wer(&u.tokens, &best.tokens));
                changed += usize::from(best.tokens != l.best().expect("non-empty").tokens);
            }
            cells.push(RescoreCell {
                past: r.past,
                first_pass: fp,
                second_pass: sp,
                utterances: utts.len(),
                ref_len: total.ref_len,
                first_pass_errors: first_total.errors(),
                rescored_errors: total.errors(),
                first_pass_wer: first_total.wer(),
                rescored_wer: total.wer(),
                changed_best: changed,
            });
        }
    }
    Ok((cells, checks, warnings))
}

pub struct SweepOutput {
    pub model: TransducerModel,
    pub results: SweepResults,
}

/// Trains (or loads) the model and fills every result table. With a model
/// passed in, training is skipped.
pub fn run_sweep(
    spec: &ExperimentSpec,
    model: Option<TransducerModel>,
    exec: Exec,
    on_step: impl FnMut(&StepReport),
) -> Result<SweepOutput> {
    spec.validate()?;
    let data = prepare_data(spec)?;
    let loaded = match (model, &spec.checkpoint) {
        (Some(m), _) => Some(m),
        (None, Some(path)) => Some(load_checkpoint(path)?),
        (None, None) => None,
    };
    let (model, train) = match loaded {
        Some(m) => {
            if m.config.feature_dim != spec.task.feature_dim || m.config.vocab_size != spec.task.vocab_size {
                return Err(Error::Config("checkpoint does not match the task's feature dim or vocabulary".into()));
            }
            (m, TrainSummary { steps: 0, first_loss: None, final_loss: None, trained: false })
        }
        None => train_model(spec, &data.train, exec, on_step)?,
    };

    let label_mask = spec.label_mask();
    let mut checks = Vec::new();
    let warnings = spec.extrapolation_warnings();
    if train.trained {
        let (a, b) = (train.first_loss.unwrap_or(f64::NAN), train.final_loss.unwrap_or(f64::NAN));
        checks.push(CheckResult {
            name: "training loss decreased".into(),
            passed: b.is_finite() && b < a,
            detail: format!("{a:.4} -> {b:.4}"),
        });
    }

    let mut wer_grid = Vec::new();
    for p in spec.grid_points() {
        let cfg = DecodeConfig { label_mask, ..DecodeConfig::new(p.mask()) };
        let stats = decode_wer(&model, &data.test, &cfg, exec)?;
        wer_grid.push(WerCell::new(p.past, p.future, &stats, spec.coverage(&p)));
    }
    let expected = spec.sweep.past.len() * spec.sweep.future.len();
    checks.push(CheckResult {
        name: "WER grid shape".into(),
        passed: wer_grid.len() == expected,
        detail: format!("{} cells for {} x {}", wer_grid.len(), spec.sweep.past.len(), spec.sweep.future.len()),
    });

    let mut latency = Vec::new();
    let mut mismatches = 0;
    for &p in &spec.sweep.latency {
        let (row, m) = latency_row(&model, &data.test, p, label_mask, spec.coverage(&p), exec)?;
        latency.push(row);
        mismatches += m;
    }
    if !latency.is_empty() {
        checks.push(CheckResult {
            name: "streaming decode matches offline decode".into(),
            passed: mismatches == 0,
            detail: format!("{mismatches} differing utterances"),
        });
    }

    let mut warnings = warnings;
    let mut rescore = Vec::new();
    if let Some(r) = &spec.rescore {
        let (cells, c, w) = rescore_table(&model, &data.test, r, label_mask, exec)?;
        rescore = cells;
        checks.extend(c);
        warnings.extend(w);
    }

    let results = SweepResults { name: spec.name.clone(), seed: spec.seed, train, wer_grid, latency, rescore, warnings, checks };
    Ok(SweepOutput { model, results })
}

/// Writes the result files, reads them back and compares.
pub fn persist(dir: &Path, results: &SweepResults) -> Result<CheckResult> {
    write_results(dir, results)?;
    let back = read_results(dir)?;
    Ok(CheckResult { name: "result files round-trip".into(), passed: back == *results, detail: dir.display().to_string() })
}

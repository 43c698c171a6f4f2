//! Subcommand implementations. Each writes its human-readable summary to `out`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use docpack::corpus::load_corpus;
use docpack::evalharness::{
    aggregate, parse_generation, score_one, EvalScores, GroundTruth, ParseWarning,
};
use docpack::judgeclient::{HttpTransport, Judge, JudgeRequest, JudgeVerdict, VerdictCache};
use docpack::maskgen::{dense_mask, segment_blocks, MaskSpec};
use docpack::packer::{
    build_sft_example, plan_epoch, read_canonical, write_canonical, write_compact, ByteEncoder,
    EpochPlan, PackedSequence, PlanConfig, PAD_SEGMENT,
};
use docpack::stats::{
    convergence_table_check, plan_stats, ConvergenceReport, PlanStats, StrategyTable,
};
use docpack::Corpus;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{CrossDoc, EvalArgs, InspectArgs, JudgeArgs, JudgeFlags, PackArgs, StatsArgs};

/// Base name of the files for one epoch, e.g. `epoch-0003`.
pub fn epoch_stem(epoch: u64) -> String {
    format!("epoch-{epoch:04}")
}

/// `epoch-0003.jsonl` → `epoch-0003.manifest.json`.
pub fn manifest_path_for(records: &Path) -> PathBuf {
    let stem = records
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    records.with_file_name(format!("{stem}.manifest.json"))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(CliError::io(path))
}

fn open_existing(path: &Path) -> Result<BufReader<File>, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!(
            "{} does not exist",
            path.display()
        )));
    }
    File::open(path)
        .map(BufReader::new)
        .map_err(CliError::io(path))
}

fn load(config: &RunConfig) -> Result<Corpus, CliError> {
    Ok(load_corpus(
        config.docs_path()?,
        config.groups_path()?,
        &config.vocab,
    )?)
}

fn out_err(e: std::io::Error) -> CliError {
    CliError::io("<stdout>")(e)
}

pub fn pack(config: &RunConfig, args: &PackArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let corpus = load(config)?;
    let dir = config.out_dir();
    std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let plan_config = PlanConfig {
        strategy: config.packing.strategy.clone(),
        mode: config.packing.mode,
        seed: config.seed,
        batch_size: config.packing.batch_size,
    };
    for epoch in 0..config.packing.epochs {
        let plan = plan_epoch(&corpus, &plan_config, epoch, &config.vocab)?;
        let stem = epoch_stem(epoch);
        let records = dir.join(format!("{stem}.jsonl"));
        let manifest = dir.join(format!("{stem}.manifest.json"));
        write_canonical(&plan, create(&records)?, create(&manifest)?)?;
        if config.packing.compact {
            write_compact(
                &plan,
                create(&dir.join(format!("{stem}.tokens.bin")))?,
                create(&dir.join(format!("{stem}.segments.bin")))?,
                create(&dir.join(format!("{stem}.index.json")))?,
            )?;
        }
        let padding = plan_stats(&plan).map(|s| s.padding_ratio).unwrap_or(0.0);
        writeln!(
            out,
            "epoch {epoch}: {} sequences, {} batches, {} documents, padding {:.4}, {} truncation warning(s) -> {}",
            plan.sequences.len(),
            plan.batches.len(),
            plan.total_documents(),
            padding,
            plan.warnings.len(),
            records.display()
        )
        .map_err(out_err)?;
    }
    if args.sft {
        let path = dir.join("sft.jsonl");
        let mut w = create(&path)?;
        let mut written = 0usize;
        for group in corpus.groups() {
            let ex = build_sft_example(group, &corpus, config.sft.template, &ByteEncoder)?;
            let line = json!({
                "question_id": group.question_id,
                "prompt_tokens": ex.prompt_tokens,
                "target_tokens": ex.target_tokens,
                "loss_mask": ex.loss_mask,
            });
            writeln!(w, "{line}").map_err(CliError::io(&path))?;
            written += 1;
        }
        w.flush().map_err(CliError::io(&path))?;
        writeln!(out, "sft: {written} examples -> {}", path.display()).map_err(out_err)?;
    }
    Ok(())
}

/// Reads a canonical packed file and its manifest.
pub fn read_packed(records: &Path, manifest: Option<&Path>) -> Result<EpochPlan, CliError> {
    let manifest = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest_path_for(records));
    let plan = read_canonical(open_existing(records)?, open_existing(&manifest)?)?;
    Ok(plan)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    pub cells: Vec<docpack::stats::CellReport>,
}

fn read_table(path: &Path) -> Result<StrategyTable, CliError> {
    serde_json::from_reader(open_existing(path)?)
        .map_err(|e| CliError::data("stats", format!("{}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

pub fn stats(config: &RunConfig, args: &StatsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.packed.is_none() && args.steps.is_none() {
        return Err(CliError::Config(
            "stats needs --packed and/or --steps".into(),
        ));
    }
    let plan = match &args.packed {
        Some(p) => Some(plan_stats(&read_packed(p, args.manifest.as_deref())?)?),
        None => None,
    };
    let convergence: Option<ConvergenceReport> = match &args.steps {
        Some(steps) => {
            let steps = read_table(steps)?;
            let reference = args.reference.as_deref().map(read_table).transpose()?;
            Some(convergence_table_check(
                &steps,
                reference.as_ref(),
                args.tolerance,
            )?)
        }
        None => None,
    };

    if let Some(s) = &plan {
        writeln!(
            out,
            "sequences {}  batches {}  documents {}  docs/batch {:.3}  padding {:.4}  pairs cross-on {}  cross-off {}",
            s.num_sequences,
            s.num_batches,
            s.num_documents,
            s.docs_per_batch_mean,
            s.padding_ratio,
            s.allowed_pairs_cross_on,
            s.allowed_pairs_cross_off
        )
        .map_err(out_err)?;
    }
    if let Some(r) = &convergence {
        writeln!(
            out,
            "{:<14} {:>5} {:>14} {:>14} {:>9}  ok",
            "strategy", "bs", "documents", "reference", "rel_err"
        )
        .map_err(out_err)?;
        for c in &r.cells {
            let ok = match c.within_tolerance {
                Some(true) => "yes",
                Some(false) => "NO",
                None => "-",
            };
            writeln!(
                out,
                "{:<14} {:>5} {:>14.0} {:>14} {:>9}  {ok}",
                c.strategy.to_string(),
                c.bs,
                c.docs,
                fmt_opt(c.reference, 0),
                fmt_opt(c.rel_err, 4)
            )
            .map_err(out_err)?;
        }
        let flagged = r.flagged().count();
        writeln!(
            out,
            "{flagged} of {} cells exceed tolerance {}",
            r.cells.len(),
            r.tolerance
        )
        .map_err(out_err)?;
    }

    let report = StatsReport {
        plan,
        tolerance: convergence.as_ref().map(|r| r.tolerance),
        cells: convergence.map(|r| r.cells).unwrap_or_default(),
    };
    let path = args
        .report
        .clone()
        .unwrap_or_else(|| config.out_dir().join("stats.json"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| CliError::io(&path)(e.into()))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(CliError::io(&path))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct GenerationRecord {
    question_id: String,
    text: String,
}

fn open_judge(config: &RunConfig, flags: &JudgeFlags) -> Result<Judge<HttpTransport>, CliError> {
    let cache = match &flags.verdicts {
        Some(path) => VerdictCache::open(path)?,
        None => VerdictCache::in_memory(),
    };
    let transport = HttpTransport::new(&config.judge)?;
    Ok(Judge::new(transport, cache, config.judge.clone()))
}

fn scores_json(s: &EvalScores) -> serde_json::Value {
    json!({
        "precision": s.precision,
        "hallucination_rate": s.hallucination_rate,
        "accuracy": s.accuracy,
        "counts": s.counts,
    })
}

pub fn eval(config: &RunConfig, args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let corpus = load(config)?;
    let template = config.sft.template;

    let mut items = Vec::new();
    for (i, line) in open_existing(&args.generations)?.lines().enumerate() {
        let line = line.map_err(CliError::io(&args.generations))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::data("evalharness", format!("generations line {}: {e}", i + 1))
        })?;
        let group = corpus.group(&rec.question_id).ok_or_else(|| {
            CliError::data(
                "evalharness",
                format!("unknown question_id {:?}", rec.question_id),
            )
        })?;
        let truth = GroundTruth::from_group(group, &corpus)?;
        let parsed = parse_generation(&rec.text, template).map_err(|e| {
            CliError::data(
                "evalharness",
                format!("question {:?}: {e}", rec.question_id),
            )
        })?;
        items.push((truth, parsed));
    }
    if items.is_empty() {
        return Err(CliError::data("evalharness", "generations file is empty"));
    }

    let verdicts: Vec<Option<JudgeVerdict>> = if args.no_judge {
        vec![None; items.len()]
    } else {
        let requests = items
            .iter()
            .map(|(truth, parsed)| {
                let question = truth.question.clone().ok_or_else(|| {
                    CliError::data(
                        "evalharness",
                        format!(
                            "group {:?} has no question text to judge",
                            truth.question_id
                        ),
                    )
                })?;
                Ok(JudgeRequest::new(
                    question,
                    truth.answer.clone(),
                    parsed.generation.answer.clone(),
                )?)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let judge = open_judge(config, &args.judge)?;
        let results = judge.judge_all(&requests);
        log::info!("judge: {} network call(s)", judge.network_calls());
        results
            .into_iter()
            .map(|r| r.map(Some).map_err(CliError::from))
            .collect::<Result<_, _>>()?
    };

    let dir = config.out_dir();
    std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let path = dir.join("eval.jsonl");
    let mut w = create(&path)?;
    let mut all = Vec::with_capacity(items.len());
    for ((truth, parsed), verdict) in items.iter().zip(&verdicts) {
        let s = score_one(
            &parsed.generation,
            truth,
            verdict.as_ref().map(|v| v.verdict),
        );
        let mut rec = scores_json(&s);
        rec["kind"] = json!("question");
        rec["question_id"] = json!(truth.question_id);
        rec["verdict"] = json!(verdict.as_ref().map(|v| v.verdict));
        rec["no_articles"] = json!(parsed.warnings.contains(&ParseWarning::NoArticles));
        writeln!(w, "{rec}").map_err(CliError::io(&path))?;
        all.push(s);
    }
    let agg = aggregate(&all)?;
    let mut rec = scores_json(&agg);
    rec["kind"] = json!("aggregate");
    writeln!(w, "{rec}")
        .and_then(|_| w.flush())
        .map_err(CliError::io(&path))?;

    let show = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.2}"));
    writeln!(
        out,
        "{:<10} {:>10} {:>14} {:>10} {:>12}",
        "questions", "precision", "hallucination", "accuracy", "unparseable"
    )
    .map_err(out_err)?;
    writeln!(
        out,
        "{:<10} {:>10} {:>14} {:>10} {:>12}",
        agg.counts.questions,
        show(agg.precision),
        show(agg.hallucination_rate),
        show(agg.accuracy),
        agg.counts.unparseable
    )
    .map_err(out_err)?;
    Ok(())
}

pub fn judge(config: &RunConfig, args: &JudgeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let requests: Vec<JudgeRequest> = match (&args.question, &args.requests) {
        (Some(q), None) => vec![JudgeRequest::new(
            q.clone(),
            args.expected.clone().unwrap_or_default(),
            args.answer.clone().unwrap_or_default(),
        )?],
        (None, Some(path)) => {
            let mut reqs = Vec::new();
            for (i, line) in open_existing(path)?.lines().enumerate() {
                let line = line.map_err(CliError::io(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: JudgeRequest = serde_json::from_str(&line).map_err(|e| {
                    CliError::data("judgeclient", format!("requests line {}: {e}", i + 1))
                })?;
                r.validate()?;
                reqs.push(r);
            }
            reqs
        }
        _ => {
            return Err(CliError::Config(
                "judge needs --question/--expected/--answer or --requests".into(),
            ))
        }
    };
    let judge = open_judge(config, &args.judge)?;
    for result in judge.judge_all(&requests) {
        let v = result?;
        let line = json!({"verdict": v.verdict, "raw": v.raw_response, "cached": v.cached});
        writeln!(out, "{line}").map_err(out_err)?;
    }
    Ok(())
}

fn read_record(path: &Path, index: usize) -> Result<PackedSequence, CliError> {
    let mut count = 0;
    for line in open_existing(path)?.lines() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        if count == index {
            return serde_json::from_str(&line)
                .map_err(|e| CliError::data("packer", format!("record {index}: {e}")));
        }
        count += 1;
    }
    Err(CliError::data(
        "packer",
        format!(
            "record {index} requested but {} holds {count}",
            path.display()
        ),
    ))
}

pub fn inspect(
    config: &RunConfig,
    args: &InspectArgs,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let seq = read_record(&args.packed, args.index)?;
    seq.check_invariants(&config.vocab)
        .map_err(|m| CliError::data("packer", format!("record {}: {m}", args.index)))?;
    let cross = args.cross_doc == CrossDoc::On;
    let pads = seq.num_pad();
    let mut text = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(
        text,
        "record {}: {} document(s), {} tokens ({} content, {} pad), truncated: {}",
        args.index,
        seq.doc_ids.len(),
        seq.len(),
        seq.len() - pads,
        pads,
        seq.truncated
    );
    for (seg, start, end) in segment_blocks(&seq.segment_ids) {
        if seg == PAD_SEGMENT {
            let _ = writeln!(text, "  [{start:>5}, {end:>5})  PAD");
            continue;
        }
        let id = seq.doc_ids.get(seg as usize).map_or("?", String::as_str);
        let seps: Vec<usize> = seq
            .sep_positions
            .iter()
            .copied()
            .filter(|p| (start..end).contains(p))
            .collect();
        let sep_note = match seps.as_slice() {
            [] => String::new(),
            [p] => format!("  SEP at {p}"),
            ps => format!("  SEPs at {ps:?}"),
        };
        let _ = writeln!(
            text,
            "  [{start:>5}, {end:>5})  segment {seg:<3} {id}{sep_note}"
        );
    }
    let spec = MaskSpec::from_sequence(&seq, cross);
    let _ = writeln!(
        text,
        "mask (cross_doc {}): {} allowed pairs",
        if cross { "on" } else { "off" },
        docpack::maskgen::allowed_pairs(&spec)
    );
    if args.mask {
        let mask = dense_mask(&spec)?;
        for row in mask.to_rows() {
            let line: String = row.iter().map(|&a| if a { '#' } else { '.' }).collect();
            let _ = writeln!(text, "  {line}");
        }
    }
    out.write_all(text.as_bytes()).map_err(out_err)
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use attrigraph_core::analysis::{
    analyze_case, batch_report, compare_runs, BatchConfig, CaseRecord, CaseReport, Comparison, RunRecord,
};
use attrigraph_core::attribution::{
    heatmap_from_pass, relevance_pass, render_html, segment_breakdown, synthetic_cases, validate_pair, ContrastCase,
    Heatmap, HeatmapDocument,
};
use attrigraph_core::engine::RuleSet;
use attrigraph_core::graph::{dense_graph, AttributionGraph, BatchPlan, DenseGraph};
use attrigraph_core::model::ModelBundle;
use attrigraph_core::sweep::{efficiency_sweep, SweepConfig, SweepRow};
use serde::Serialize;

use crate::cli::{Command, GraphArgs, ModelArgs};
use crate::config::{load_model_spec, parse_layer_pairs, parse_usize_list, prune_config, rules_for, JobConfig};
use crate::error::{CliError, CliResult};
use crate::store::{default_cache_dir, CaseStore};

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Attribute { model, case, out, html, threshold } => attribute(&model, &case, &out, html, threshold),
        Command::Graph { model, graph, case, out } => graph_cmd(&model, &graph, &case, &out),
        Command::Analyze { model, cases_dir, out, batch, layer_pairs, k, seed, runs } => {
            analyze(&model, &cases_dir, &out, batch, &layer_pairs, k, seed, &runs)
        }
        Command::Bench { model, lengths, batches, layer_pairs, repeats, seed, out } => {
            bench(&model, &lengths, &batches, &layer_pairs, repeats, seed, out.as_deref())
        }
        Command::Serve { model, cases_dir, addr, batch, layer_pairs, runs, max_builds } => {
            crate::server::serve_blocking(&model, &cases_dir, &addr, batch, &layer_pairs, &runs, max_builds)
        }
        Command::Synth { model, count, seed, min_len, max_len, first_content, out } => {
            synth(&model, count, seed, min_len, max_len, first_content, &out)
        }
        Command::ExportModel { model, out } => {
            load_model_spec(&model)?.save(&out)?;
            print_json(&serde_json::json!({ "model": model, "out": out }))
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

pub fn load_case(path: &Path) -> CliResult<ContrastCase> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(ContrastCase::from_json(&text)?)
}

/// One relevance pass → normalized heatmap.
pub fn heatmap(model: &ModelBundle, case: &ContrastCase, rules: &RuleSet) -> CliResult<Heatmap> {
    Ok(heatmap_from_pass(&relevance_pass(model, case, rules)?, case)?)
}

#[derive(Serialize)]
struct AttributeSummary<'a> {
    case_id: &'a str,
    delta_logit: f64,
    accepted: bool,
    threshold: f64,
    heatmap: String,
    html: Option<String>,
}

fn attribute(args: &ModelArgs, case_path: &Path, out: &Path, html: bool, threshold: f64) -> CliResult<()> {
    let model = load_model_spec(&args.model)?;
    let case = load_case(case_path)?;
    let rules = rules_for(args.rules);
    let hm = heatmap(&model, &case, &rules)?;
    let verdict = validate_pair(&model, &case, threshold)?;
    let doc = HeatmapDocument::new(&hm, &case.case_id, args.rules);
    let path = out.join(format!("{}.heatmap.json", case.case_id));
    write(&path, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    let html_path = if html {
        let p = out.join(format!("{}.heatmap.html", case.case_id));
        write(&p, render_html(&hm, &case).as_bytes())?;
        Some(p.display().to_string())
    } else {
        None
    };
    tracing::info!(case = %case.case_id, delta_logit = verdict.delta_logit, accepted = verdict.accepted, "attribution done");
    print_json(&AttributeSummary {
        case_id: &case.case_id,
        delta_logit: verdict.delta_logit,
        accepted: verdict.accepted,
        threshold,
        heatmap: path.display().to_string(),
        html: html_path,
    })
}

/// Dense build with per-pair call accounting in the log.
pub fn build_dense(
    model: &ModelBundle,
    case: &ContrastCase,
    rules: &RuleSet,
    pairs: &[(i32, i32)],
    batch: Option<usize>,
) -> CliResult<DenseGraph> {
    let plan = match batch {
        Some(b) => BatchPlan::new(b)?,
        None => {
            let plan = BatchPlan::default_for(case.len());
            tracing::info!(batch_size = plan.batch_size(), targets = case.len(), "default batch plan min(8, n)");
            plan
        }
    };
    let dense = dense_graph(model, case, rules, pairs, Some(plan))?;
    for s in dense.stats(plan.batch_size()) {
        tracing::info!(
            case = %case.case_id,
            source = s.source,
            target = s.target,
            targets = s.targets,
            batch_size = s.batch_size,
            backward_calls = s.backward_calls,
            "layer pair built"
        );
    }
    Ok(dense)
}

fn job_config(
    model_spec: &str,
    model: &ModelBundle,
    args: &ModelArgs,
    g: &GraphArgs,
    out: &Path,
) -> CliResult<JobConfig> {
    let job = JobConfig {
        model: model_spec.to_owned(),
        model_fingerprint: model.fingerprint(),
        rule_variant: args.rules,
        prune: prune_config(g.prune_mode, g.tau, g.p, g.node_threshold)?,
        batch_size: g.batch,
        layer_pairs: parse_layer_pairs(&g.layer_pairs, model.config().num_layers)?,
        out: Some(out.to_owned()),
    };
    job.validate()?;
    Ok(job)
}

#[derive(Serialize)]
struct GraphSummary<'a> {
    case_id: &'a str,
    nodes: usize,
    edges: usize,
    empty: bool,
    target_reinstated: bool,
    cache: &'static str,
    graph: String,
}

fn graph_cmd(args: &ModelArgs, g: &GraphArgs, case_path: &Path, out: &Path) -> CliResult<()> {
    let model = load_model_spec(&args.model)?;
    let job = job_config(&args.model, &model, args, g, out)?;
    let case = load_case(case_path)?;
    case.check_against(&model)?;
    let store = CaseStore::new(vec![], default_cache_dir())?;
    let key = job.cache_key("graph", &case);
    let cached = store
        .cache_read(&key)
        .filter(|b| std::str::from_utf8(b).ok().and_then(|t| AttributionGraph::from_json(t).ok()).is_some());
    let (bytes, cache) = match cached {
        Some(bytes) => {
            tracing::info!(case = %case.case_id, key = %key, "graph served from cache");
            (bytes, "hit")
        }
        None => {
            let dense = build_dense(&model, &case, &rules_for(args.rules), &job.layer_pairs, job.batch_size)?;
            let bytes = dense.prune(&job.prune)?.to_json().into_bytes();
            if let Err(e) = store.cache_write(&key, &bytes) {
                tracing::warn!(error = %e, "could not write graph cache");
            }
            (bytes, "miss")
        }
    };
    let path = out.join(format!("{}.graph.json", case.case_id));
    write(&path, &bytes)?;
    let graph = AttributionGraph::from_json(std::str::from_utf8(&bytes).map_err(|e| CliError::io(e.to_string()))?)?;
    print_json(&GraphSummary {
        case_id: &case.case_id,
        nodes: graph.nodes.len(),
        edges: graph.edges.len(),
        empty: graph.flags.empty,
        target_reinstated: graph.flags.target_reinstated,
        cache,
        graph: path.display().to_string(),
    })
}

/// `id=model` pairs.
pub fn parse_runs(runs: &[String]) -> CliResult<Vec<(String, ModelBundle)>> {
    runs.iter()
        .map(|r| {
            let (id, spec) = r.split_once('=').ok_or_else(|| CliError::input(format!("run {r:?} is not id=model")))?;
            if id.is_empty() {
                return Err(CliError::input(format!("run {r:?} has an empty id")));
            }
            Ok((id.to_owned(), load_model_spec(spec)?))
        })
        .collect()
}

/// Per-case record for cross-run comparison: one relevance pass each.
pub fn run_from_model(
    run_id: &str,
    model: &ModelBundle,
    cases: &[&ContrastCase],
    rules: &RuleSet,
) -> CliResult<RunRecord> {
    let mut records = std::collections::BTreeMap::new();
    for case in cases {
        let hm = heatmap(model, case, rules)?;
        let segments = segment_breakdown(&hm, case)?;
        records.insert(case.case_id.clone(), CaseRecord { delta_logit: hm.delta_logit, segments });
    }
    Ok(RunRecord { run_id: run_id.to_owned(), cases: records })
}

/// Runs every model over the cases and compares against the first.
pub fn compare(models: &[(String, &ModelBundle)], cases: &[&ContrastCase], rules: &RuleSet) -> CliResult<Comparison> {
    let runs = models.iter().map(|(id, m)| run_from_model(id, m, cases, rules)).collect::<CliResult<Vec<_>>>()?;
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    Ok(compare_runs(&ids, &runs)?)
}

pub const BASE_RUN: &str = "base";

#[allow(clippy::too_many_arguments)]
fn analyze(
    args: &ModelArgs,
    cases_dir: &Path,
    out: &Path,
    batch: Option<usize>,
    layer_pairs: &str,
    k: usize,
    seed: u64,
    runs: &[String],
) -> CliResult<()> {
    let model = load_model_spec(&args.model)?;
    let pairs = parse_layer_pairs(layer_pairs, model.config().num_layers)?;
    let plan = batch.map(BatchPlan::new).transpose()?;
    let extra = parse_runs(runs)?;
    let store = CaseStore::open(cases_dir, default_cache_dir())?;
    let cases: Vec<&ContrastCase> = store.cases().collect();
    if cases.is_empty() {
        return Err(CliError::input(format!("no cases in {}", cases_dir.display())));
    }
    let rules = rules_for(args.rules);
    let reports: Vec<CaseReport> = cases
        .iter()
        .map(|c| {
            let report = analyze_case(&model, c, &rules, &pairs, plan)?;
            tracing::info!(case = %c.case_id, delta_logit = report.delta_logit, "case analyzed");
            Ok(report)
        })
        .collect::<CliResult<_>>()?;
    let comparison = if extra.is_empty() {
        None
    } else {
        let mut models: Vec<(String, &ModelBundle)> = vec![(BASE_RUN.to_owned(), &model)];
        models.extend(extra.iter().map(|(id, m)| (id.clone(), m)));
        Some(compare(&models, &cases, &rules)?)
    };
    let config = BatchConfig { k, seed, ..BatchConfig::default() };
    let report = batch_report(reports, config, comparison)?;
    let path = out.join("batch_report.json");
    write(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut files = vec![path.display().to_string()];
    if let Some(cmp) = &report.run_comparison {
        let csv = out.join("comparison.csv");
        write(&csv, cmp.to_csv()?.as_bytes())?;
        files.push(csv.display().to_string());
        let json = out.join("comparison.json");
        write(&json, serde_json::to_string_pretty(cmp)?.as_bytes())?;
        files.push(json.display().to_string());
    }
    print_json(&serde_json::json!({
        "cases": report.cases.len(),
        "clustered": report.clustered.len(),
        "skipped": report.skipped,
        "k": report.clusters.k,
        "files": files,
    }))
}

fn bench(
    args: &ModelArgs,
    lengths: &str,
    batches: &str,
    layer_pairs: &str,
    repeats: usize,
    seed: u64,
    out: Option<&Path>,
) -> CliResult<()> {
    let model = load_model_spec(&args.model)?;
    let config = SweepConfig {
        lengths: parse_usize_list(lengths)?,
        batch_sizes: parse_usize_list(batches)?,
        layer_pairs: parse_layer_pairs(layer_pairs, model.config().num_layers)?,
        repeats,
        seed,
    };
    let first_content = model.config().special_token_ids.iter().max().map_or(0, |m| m + 2);
    let rows = efficiency_sweep(&model, &rules_for(args.rules), &config, first_content)?;
    for r in &rows {
        tracing::info!(
            seq_len = r.seq_len,
            batch_size = r.batch_size,
            wall_seconds = r.wall_seconds,
            backward_calls = r.backward_calls,
            "bench row"
        );
    }
    if let Some(dir) = out {
        write(&dir.join("bench.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
        write(&dir.join("bench.csv"), bench_csv(&rows)?.as_bytes())?;
    }
    print_json(&rows)
}

pub fn bench_csv(rows: &[SweepRow]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn synth(
    model_spec: &str,
    count: usize,
    seed: u64,
    min_len: usize,
    max_len: usize,
    first_content: u32,
    out: &Path,
) -> CliResult<()> {
    let model = load_model_spec(model_spec)?;
    let cases = synthetic_cases(&model, count, seed, min_len..=max_len, first_content)?;
    let mut files = Vec::new();
    for case in &cases {
        let path = out.join(format!("{}.json", case.case_id));
        write(&path, case.to_json().as_bytes())?;
        files.push(path.display().to_string());
    }
    print_json(&serde_json::json!({ "model": model_spec, "cases": files }))
}

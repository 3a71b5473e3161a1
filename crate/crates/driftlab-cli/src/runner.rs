//! Experiment execution and artifact writing.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use driftlab::cct::CctConfig;
use driftlab::corpus::{load_corpus, DeskCorpus, InjectionEntry};
use driftlab::experiments::{
    self, attribution, background_store, build_cct_scenarios, cct_compare, cdg_validity,
    default_contaminated_indices, filter_evasion, metrics_summary_csv, mpifc_blocking, rcm_sweep,
    temporal, temporal_subset,
};
use driftlab::rcm::{calibrate_tau, measure_entry, wrc, MarginPolicy};
use driftlab::safety::Boundary;

use crate::config::{CorpusSource, ExperimentKind, ScenarioConfig, OUT_DIR_ENV};

/// Resolved output directory: config value, else the environment default,
/// else `./out`.
pub fn resolve_output_dir(config: &ScenarioConfig) -> PathBuf {
    config
        .output_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub fn load_or_generate_corpus(config: &ScenarioConfig) -> Result<DeskCorpus> {
    match &config.corpus {
        CorpusSource::Path { path } => {
            load_corpus(path).with_context(|| format!("loading corpus from {}", path.display()))
        }
        CorpusSource::Generate { seed } => {
            let seed = seed.context("generated corpora require a seed")?;
            Ok(driftlab::corpus::generate_desk_corpus(
                seed,
                &config.generator_spec(),
            ))
        }
    }
}

fn contaminated_ids(config: &ScenarioConfig, corpus: &DeskCorpus) -> BTreeSet<String> {
    match &config.baseline_contaminated {
        Some(ids) => ids.iter().cloned().collect(),
        None => default_contaminated_indices()
            .iter()
            .filter_map(|i| corpus.entries.get(*i))
            .map(|e| e.id.clone())
            .collect(),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    crate_version: &'a str,
    seed: u64,
    corpus_entries: usize,
    corpus_backgrounds: usize,
    experiments: Vec<ExperimentKind>,
    rcm_tau: Option<f64>,
    config: &'a ScenarioConfig,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Calibrate the monitor threshold over the corpus when the retrieval
/// concentration defense is enabled.
fn monitor_tau(config: &ScenarioConfig, corpus: &DeskCorpus) -> Result<Option<f64>> {
    if !config.defenses.rcm {
        return Ok(None);
    }
    let stack = config.safety_stack();
    let pcfg = config.pipeline_config(None);
    let base = background_store(corpus);
    let mut attack = Vec::new();
    for entry in corpus
        .entries
        .iter()
        .filter(|e| e.query_alignment.len() >= 2)
    {
        let (w, _) = measure_entry(&base, &pcfg, &stack, entry)
            .map_err(|e| anyhow::anyhow!("measuring {}: {e}", entry.id))?;
        attack.push(w);
    }
    let mut benign = Vec::new();
    for doc in base.docs() {
        benign.push(wrc(&base, &doc.id, &pcfg.queries(), pcfg.k)?.wrc);
    }
    let tau = calibrate_tau(&attack, &benign, MarginPolicy::GapFraction(0.01))?;
    Ok(Some(tau))
}

/// Run the selected experiments and write every artifact. Returns the list
/// of failed experiments.
pub fn run(config: &ScenarioConfig) -> Result<Vec<String>> {
    let out_dir = resolve_output_dir(config);
    fs::create_dir_all(&out_dir)?;
    let corpus = load_or_generate_corpus(config)?;
    let stack = config.safety_stack();
    let tau = monitor_tau(config, &corpus)?;
    let pcfg = config.pipeline_config(tau);
    let selected = config.selected_experiments();

    // The echoed config omits the output directory: the manifest's own
    // location carries that, and stripping it keeps runs byte-identical
    // wherever they land.
    let mut echoed = config.clone();
    echoed.output_dir = None;
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        corpus_entries: corpus.entries.len(),
        corpus_backgrounds: corpus.backgrounds.len(),
        experiments: selected.clone(),
        rcm_tau: tau,
        config: &echoed,
    };
    write(
        &out_dir,
        "run_manifest.json",
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    write(&out_dir, "corpus.jsonl", &corpus.to_jsonl())?;

    // Reference session trace: the first full-coverage entry run poisoned for
    // five sessions, one session log per line.
    if let Some(entry) = corpus.entries.iter().find(|e| e.query_alignment.len() == 3) {
        let mut store = background_store(&corpus);
        driftlab::pipeline::inject(&mut store, entry, &stack, config.defenses.mpifc)
            .map_err(|e| anyhow::anyhow!("injecting reference entry: {e}"))?;
        let logs = driftlab::pipeline::run_sessions(&mut store, &pcfg, &stack, 5);
        let mut jsonl = String::new();
        for log in &logs {
            jsonl.push_str(&log.to_jsonl_line());
            jsonl.push('\n');
        }
        write(&out_dir, "session_logs.jsonl", &jsonl)?;
    }

    let mut failures = Vec::new();
    let mut run_failing = |name: &str, result: Result<()>| match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("experiment {name} failed: {e:#}");
            failures.push(name.to_string());
        }
    };

    let mut cdg_result = None;
    let mut temporal_result = None;
    let mut attribution_result = None;
    let mut cct_result = None;
    let mut sweep_result = None;
    let mut mpifc_result = None;

    for kind in &selected {
        match kind {
            ExperimentKind::FilterEvasion => run_failing("filter_evasion", {
                filter_evasion(&corpus, &pcfg, &stack)
                    .map_err(anyhow::Error::from)
                    .and_then(|result| {
                        write(&out_dir, "filter_pass_table.csv", &result.to_csv())?;
                        write(
                            &out_dir,
                            "plots/plot_pass_rates_long.csv",
                            &pass_rates_long(&result),
                        )?;
                        write(
                            &out_dir,
                            "framing_inversion.json",
                            &serde_json::to_string_pretty(&result.framing)?,
                        )?;
                        Ok(())
                    })
            }),
            ExperimentKind::Cdg => run_failing("cdg", {
                let ids = contaminated_ids(config, &corpus);
                cdg_validity(&corpus, &pcfg, &stack, &ids)
                    .map_err(anyhow::Error::from)
                    .and_then(|table| {
                        write(&out_dir, "cdg_table.csv", &table.to_csv())?;
                        cdg_result = Some(table);
                        Ok(())
                    })
            }),
            ExperimentKind::Temporal => run_failing("temporal", {
                let subset = temporal_subset(&corpus);
                if subset.is_empty() {
                    Err(anyhow::anyhow!(
                        "no partial-coverage entries for temporal runs"
                    ))
                } else {
                    temporal(
                        &corpus,
                        &pcfg,
                        &stack,
                        &subset,
                        config.temporal.t_max,
                        &config.temporal.checkpoints,
                    )
                    .map_err(anyhow::Error::from)
                    .and_then(|result| {
                        write(&out_dir, "sdr_trajectory.csv", &result.sdr_csv())?;
                        write(
                            &out_dir,
                            "plots/plot_trajectory_long.csv",
                            &trajectory_long(&result),
                        )?;
                        temporal_result = Some(result);
                        Ok(())
                    })
                }
            }),
            ExperimentKind::Attribution => run_failing("attribution", {
                let subset: Vec<InjectionEntry> = corpus
                    .entries
                    .iter()
                    .filter(|e| e.query_alignment.len() >= 2)
                    .take(8)
                    .cloned()
                    .collect();
                let monitor = tau.unwrap_or(0.3);
                attribution(&corpus, &pcfg, &stack, &subset, monitor, 6)
                    .map_err(anyhow::Error::from)
                    .and_then(|result| {
                        write(&out_dir, "attribution_table.json", &result.to_json())?;
                        attribution_result = Some(result);
                        Ok(())
                    })
            }),
            ExperimentKind::CctCompare => run_failing("cct_compare", {
                build_cct_scenarios(
                    &corpus,
                    &stack,
                    config.seed,
                    &driftlab::experiments::ScenarioMix {
                        clean_attacks: config.cct.clean_attacks,
                        exhaustion: config.cct.exhaustion,
                        uninformative: config.cct.uninformative,
                        benign: config.cct.benign,
                        via_mpifc: config.defenses.mpifc,
                    },
                )
                .map_err(anyhow::Error::from)
                .map(|scenarios| {
                    let result = cct_compare(
                        &scenarios,
                        &pcfg,
                        &stack,
                        &CctConfig::default(),
                        config.seed,
                    );
                    cct_result = Some(result);
                })
                .and_then(|()| {
                    write(
                        &out_dir,
                        "cct_comparison.csv",
                        &cct_result.as_ref().expect("just set").to_csv(),
                    )
                })
            }),
            ExperimentKind::RcmSweep => run_failing("rcm_sweep", {
                rcm_sweep(&corpus, &pcfg, &stack, 5)
                    .map_err(anyhow::Error::from)
                    .and_then(|result| {
                        write(&out_dir, "rcm_sweep.csv", &result.to_csv())?;
                        write(&out_dir, "plots/plot_sweep_long.csv", &sweep_long(&result))?;
                        sweep_result = Some(result);
                        Ok(())
                    })
            }),
            ExperimentKind::MpifcBlocking => run_failing("mpifc_blocking", {
                mpifc_blocking(&corpus, &pcfg, &stack, config.temporal.t_max)
                    .map_err(anyhow::Error::from)
                    .and_then(|result| {
                        write(&out_dir, "mpifc_blocking.csv", &result.to_csv())?;
                        mpifc_result = Some(result);
                        Ok(())
                    })
            }),
        }
    }

    if let (Some(cdg), Some(temporal), Some(attribution), Some(cct), Some(sweep), Some(mpifc)) = (
        &cdg_result,
        &temporal_result,
        &attribution_result,
        &cct_result,
        &sweep_result,
        &mpifc_result,
    ) {
        write(
            &out_dir,
            "metrics_summary.csv",
            &metrics_summary_csv(cdg, temporal, attribution, cct, sweep, mpifc),
        )?;
    }

    Ok(failures)
}

fn pass_rates_long(result: &experiments::FilterEvasionResult) -> String {
    let mut out = String::from("classifier,boundary,metric,value\n");
    for (classifier, row) in &result.table.cells {
        for boundary in Boundary::ALL {
            if let Some(counts) = row.get(&boundary) {
                if let Some(rate) = counts.pass_rate() {
                    out.push_str(&format!("{classifier},{boundary},pass_rate,{rate:.6}\n"));
                }
                out.push_str(&format!(
                    "{classifier},{boundary},not_retrieved,{}\n",
                    counts.not_retrieved
                ));
            }
        }
    }
    out
}

fn trajectory_long(result: &experiments::TemporalResult) -> String {
    let mut out = String::from("entry_id,condition,T,metric,value\n");
    for record in &result.trajectories {
        for point in &record.series {
            out.push_str(&format!(
                "{},{},{},asr_regex,{:.6}\n",
                record.entry_id, record.condition, point.t, point.asr_regex
            ));
            out.push_str(&format!(
                "{},{},{},asr_combined,{:.6}\n",
                record.entry_id, record.condition, point.t, point.asr_combined
            ));
        }
    }
    out
}

fn sweep_long(result: &experiments::RcmSweepResult) -> String {
    let mut out = String::from("variant_id,strategy,metric,value\n");
    for row in &result.table.rows {
        for (metric, value) in [
            ("delta_wrc", row.delta_wrc),
            ("delta_asr", row.delta_asr),
            ("wrc_variant", row.wrc_variant),
            ("asr_variant", row.asr_variant),
        ] {
            out.push_str(&format!(
                "{},{},{metric},{value:.6}\n",
                row.variant_id, row.strategy
            ));
        }
    }
    out
}

/// Print a short summary of a finished run directory.
pub fn report(dir: &Path) -> Result<()> {
    let manifest_path = dir.join("run_manifest.json");
    if !manifest_path.exists() {
        bail!("no run_manifest.json in {}", dir.display());
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let mut text = format!(
        "run seed {} — {} entries, {} backgrounds\n",
        manifest["seed"], manifest["corpus_entries"], manifest["corpus_backgrounds"]
    );
    let summary = dir.join("metrics_summary.csv");
    if summary.exists() {
        text.push_str(&format!("\n{}\n", fs::read_to_string(summary)?.trim_end()));
    }
    text.push_str("\nartifacts:\n");
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        text.push_str(&format!("  {name}\n"));
    }
    // A closed pipe (report piped into head) is not an error.
    use std::io::Write;
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => other.map_err(Into::into),
    }
}

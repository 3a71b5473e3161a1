//! Root-cause attribution from session evidence, and the two-pipeline
//! construction showing why model-layer evidence cannot separate a poisoned
//! store from a misaligned model.
//!
//! The log-counterfactual attributor reads observable fields only: outputs,
//! classifier verdicts, ingestion reports, anomalous events. It returns
//! memory poisoning only when some log carries a flag or anomalous memory
//! event; an all-safe log of prohibited outputs reads as model misalignment.
//! Defenses earn their keep here by injecting exactly the observable signal
//! this decision procedure lacks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::InjectionEntry;
use crate::pipeline::{self, IngestReport, PipelineConfig, PipelineError, SessionLog};
use crate::safety::{SafetyStack, Verdict};
use crate::store::MemoryStore;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttributionError {
    #[error("no confirmed prohibited output in the logs")]
    NoHarmInLogs,
    #[error("log sequences differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    MemoryPoisoning,
    ModelMisalignment,
    MemoryAmbiguous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionVerdict {
    pub cause: Cause,
    /// Log fields the decision cited.
    pub evidence: Vec<String>,
}

impl AttributionVerdict {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdict serializes")
    }
}

/// Log-counterfactual attribution over a scenario's observable record.
///
/// Requires at least one confirmed prohibited output. Returns memory
/// poisoning only when a classifier flag or anomalous memory event appears
/// somewhere in the record; otherwise the most log-consistent explanation is
/// model misalignment.
pub fn log_counterfactual_attribute(
    logs: &[SessionLog],
    ingest_reports: &[IngestReport],
) -> Result<AttributionVerdict, AttributionError> {
    let harmed = logs.iter().any(|log| log.violations().iter().any(|v| *v));
    if !harmed {
        return Err(AttributionError::NoHarmInLogs);
    }

    let mut evidence = Vec::new();
    for report in ingest_reports {
        for (classifier, verdict) in &report.verdicts {
            if *verdict == Verdict::Flagged {
                evidence.push(format!(
                    "ingestion of {} flagged by {classifier}",
                    report.entry_id
                ));
            }
        }
    }
    for log in logs {
        for agent in &log.agents {
            for rv in &agent.retrieval_verdicts {
                if rv.verdict == Verdict::Flagged {
                    evidence.push(format!(
                        "session {}: {} flagged {} at retrieval",
                        log.session_index, rv.classifier_id, rv.doc_id
                    ));
                }
            }
        }
        for (classifier, verdict) in &log.composition_verdicts {
            if *verdict == Verdict::Flagged {
                evidence.push(format!(
                    "session {}: {classifier} flagged the composed output",
                    log.session_index
                ));
            }
        }
        for event in &log.anomalous_events {
            evidence.push(format!(
                "session {}: anomalous event {:?} on {}",
                log.session_index, event.kind, event.doc_id
            ));
        }
    }

    if evidence.is_empty() {
        Ok(AttributionVerdict {
            cause: Cause::ModelMisalignment,
            evidence: vec![
                "prohibited output confirmed; zero classifier alerts; no anomalous memory events"
                    .to_string(),
            ],
        })
    } else {
        Ok(AttributionVerdict {
            cause: Cause::MemoryPoisoning,
            evidence,
        })
    }
}

// ---------------------------------------------------------------------------
// Two-pipeline construction
// ---------------------------------------------------------------------------

/// Which log fields a comparison may read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldProjection {
    /// Include store-internal norm markers of retrieved documents. The
    /// model-layer projection excludes them; widening to include them is what
    /// separates the two pipelines.
    pub include_store_markers: bool,
    /// When set, per-agent violation rates are compared within this tolerance
    /// instead of exact per-session indicators (for stochastic scenarios).
    pub rate_tolerance: Option<f64>,
}

impl FieldProjection {
    /// Everything a model-layer auditor can observe: violation indicators,
    /// classifier verdicts, retrieval rank lists, anomalous events.
    pub fn model_layer() -> FieldProjection {
        FieldProjection {
            include_store_markers: false,
            rate_tolerance: None,
        }
    }

    pub fn memory_audit() -> FieldProjection {
        FieldProjection {
            include_store_markers: true,
            rate_tolerance: None,
        }
    }
}

/// A misaligned-model twin of a poisoned run: the carrier is replaced by
/// embedding-identical filler and agent baseline rates are raised to match
/// the first session's violation pattern.
pub struct PipelineTwin {
    pub logs: Vec<SessionLog>,
    pub store_clean: MemoryStore,
    pub config: PipelineConfig,
}

/// Build and run the clean-memory twin of a poisoned log sequence.
///
/// The per-agent perturbation is read off session 0: any agent that violated
/// gets baseline rate 1. Write-back dynamics then reproduce every later
/// session's behavior, because the twin's own contaminated outputs re-enter
/// memory exactly as the originals did.
pub fn build_pipeline_ii(
    logs_i: &[SessionLog],
    poisoned_store_at_start: &MemoryStore,
    config: &PipelineConfig,
    stack: &SafetyStack,
    entry: &InjectionEntry,
) -> Result<PipelineTwin, PipelineError> {
    assert!(!logs_i.is_empty(), "need at least one session to mirror");
    let store_clean = pipeline::substitute_filler(poisoned_store_at_start, &entry.id)?;

    let mut twin_config = config.clone();
    twin_config.baseline_field = Some(entry.target_field);
    // Match the observed surface form: a twin of a semantically-adopting run
    // emits the lexical variant, not the literal token.
    let literal_observed = logs_i[0]
        .agents
        .iter()
        .any(|a| !a.fields_emitted.is_empty() && a.output.contains(entry.target_field.name()));
    twin_config.baseline_style = if literal_observed {
        pipeline::EmissionStyle::Literal
    } else {
        pipeline::EmissionStyle::Synonym
    };
    for (agent, violated) in twin_config.agents.iter_mut().zip(logs_i[0].violations()) {
        agent.baseline_rate = if violated { 1.0 } else { agent.baseline_rate };
    }

    let mut store = store_clean.clone();
    let logs = pipeline::run_sessions(&mut store, &twin_config, stack, logs_i.len() - 1);
    Ok(PipelineTwin {
        logs,
        store_clean,
        config: twin_config,
    })
}

/// Compare two log sequences under a projection. Returns whether they are
/// equal and a human-readable diff of every projected field that differs.
pub fn observable_equality(
    logs_i: &[SessionLog],
    logs_ii: &[SessionLog],
    projection: &FieldProjection,
) -> Result<(bool, Vec<String>), AttributionError> {
    if logs_i.len() != logs_ii.len() {
        return Err(AttributionError::LengthMismatch {
            left: logs_i.len(),
            right: logs_ii.len(),
        });
    }
    let mut diffs = Vec::new();

    if let Some(tolerance) = projection.rate_tolerance {
        let rates = |logs: &[SessionLog]| -> Vec<f64> {
            let agents = logs[0].agents.len();
            (0..agents)
                .map(|i| {
                    logs.iter()
                        .filter(|l| !l.agents[i].fields_emitted.is_empty())
                        .count() as f64
                        / logs.len() as f64
                })
                .collect()
        };
        for (i, (a, b)) in rates(logs_i).iter().zip(rates(logs_ii)).enumerate() {
            if (a - b).abs() > tolerance {
                diffs.push(format!("agent {i} violation rate {a:.3} vs {b:.3}"));
            }
        }
    }

    for (left, right) in logs_i.iter().zip(logs_ii) {
        let t = left.session_index;
        if projection.rate_tolerance.is_none() && left.violations() != right.violations() {
            diffs.push(format!(
                "session {t}: violation indicators {:?} vs {:?}",
                left.violations(),
                right.violations()
            ));
        }
        for (la, ra) in left.agents.iter().zip(&right.agents) {
            let lids: Vec<&str> = la.retrieved.iter().map(|r| r.doc_id.as_str()).collect();
            let rids: Vec<&str> = ra.retrieved.iter().map(|r| r.doc_id.as_str()).collect();
            if lids != rids {
                diffs.push(format!(
                    "session {t}: {:?} retrieval ranks {lids:?} vs {rids:?}",
                    la.role
                ));
            }
            if la.retrieval_verdicts != ra.retrieval_verdicts {
                diffs.push(format!(
                    "session {t}: {:?} retrieval verdicts differ",
                    la.role
                ));
            }
            if projection.include_store_markers {
                for (lr, rr) in la.retrieved.iter().zip(&ra.retrieved) {
                    if lr.norm_directive != rr.norm_directive
                        || lr.semantic_norm != rr.semantic_norm
                    {
                        diffs.push(format!(
                            "session {t}: norm markers on {} differ: {:?}/{:?} vs {:?}/{:?}",
                            lr.doc_id,
                            lr.norm_directive,
                            lr.semantic_norm,
                            rr.norm_directive,
                            rr.semantic_norm
                        ));
                    }
                }
            }
        }
        if left.composition_verdicts != right.composition_verdicts {
            diffs.push(format!("session {t}: composition verdicts differ"));
        }
        if left.anomalous_events != right.anomalous_events {
            diffs.push(format!("session {t}: anomalous events differ"));
        }
    }
    Ok((diffs.is_empty(), diffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        entry_text, generate_desk_corpus, Field, Framing, GeneratorSpec, QueryId, Tier,
    };
    use crate::embed::DEFAULT_DIMENSION;
    use crate::pipeline::{inject, run_sessions};
    use std::collections::BTreeSet;

    fn entry(id: &str, tier: Tier, field: Field, alignment: &[QueryId]) -> InjectionEntry {
        let alignment: BTreeSet<QueryId> = alignment.iter().copied().collect();
        InjectionEntry {
            id: id.into(),
            domain: field.domain(),
            tier,
            target_field: field,
            framing: Framing::Policy,
            text: entry_text(tier, field, Framing::Policy, &alignment),
            query_alignment: alignment,
            semantic_norm: tier == Tier::T3,
            derived_from: None,
        }
    }

    fn lab() -> (MemoryStore, PipelineConfig, SafetyStack) {
        let corpus = generate_desk_corpus(23, &GeneratorSpec::default_desk());
        let mut store = MemoryStore::new(DEFAULT_DIMENSION);
        for bg in &corpus.backgrounds {
            store.add(bg.clone()).unwrap();
        }
        (store, PipelineConfig::new(23), SafetyStack::default_stack())
    }

    fn poisoned_run(
        alignment: &[QueryId],
        t_max: usize,
    ) -> (
        Vec<SessionLog>,
        MemoryStore,
        PipelineConfig,
        SafetyStack,
        InjectionEntry,
        IngestReport,
    ) {
        let (store, config, stack) = lab();
        let e = entry("m_star", Tier::T1, Field::CustomerId, alignment);
        let mut poisoned = store.clone();
        let report = inject(&mut poisoned, &e, &stack, false).unwrap();
        let start_snapshot = poisoned.clone();
        let logs = run_sessions(&mut poisoned, &config, &stack, t_max);
        (logs, start_snapshot, config, stack, e, report)
    }

    #[test]
    fn all_safe_poisoned_logs_read_as_model_misalignment() {
        let (logs, _, _, _, _, report) = poisoned_run(&QueryId::ALL, 5);
        assert!(logs.iter().all(|l| !l.any_flagged()));
        let verdict = log_counterfactual_attribute(&logs, &[report]).unwrap();
        assert_eq!(verdict.cause, Cause::ModelMisalignment);
    }

    #[test]
    fn attribution_never_reads_store_markers() {
        let (mut logs, _, _, _, _, report) = poisoned_run(&QueryId::ALL, 3);
        let before = log_counterfactual_attribute(&logs, std::slice::from_ref(&report)).unwrap();
        for log in logs.iter_mut() {
            for agent in log.agents.iter_mut() {
                for doc in agent.retrieved.iter_mut() {
                    doc.norm_directive = None;
                    doc.semantic_norm = None;
                    doc.ifc_label = None;
                }
            }
        }
        let after = log_counterfactual_attribute(&logs, &[report]).unwrap();
        assert_eq!(
            before, after,
            "verdict must not depend on instrumentation fields"
        );
    }

    #[test]
    fn ingestion_flag_flips_to_memory_poisoning() {
        let (logs, _, _, _, _, mut report) = poisoned_run(&QueryId::ALL, 2);
        report.verdicts[1].1 = Verdict::Flagged;
        let verdict = log_counterfactual_attribute(&logs, &[report]).unwrap();
        assert_eq!(verdict.cause, Cause::MemoryPoisoning);
        assert!(verdict.evidence[0].contains("ingestion"));
    }

    #[test]
    fn clean_logs_have_no_harm_to_attribute() {
        let (store, config, stack) = lab();
        let mut clean = store.clone();
        let logs = run_sessions(&mut clean, &config, &stack, 2);
        assert_eq!(
            log_counterfactual_attribute(&logs, &[]).unwrap_err(),
            AttributionError::NoHarmInLogs
        );
    }

    #[test]
    fn twin_pipeline_is_observably_identical_on_full_coverage() {
        let (logs_i, start, config, stack, e, _) = poisoned_run(&QueryId::ALL, 10);
        let twin = build_pipeline_ii(&logs_i, &start, &config, &stack, &e).unwrap();
        let (equal, diffs) =
            observable_equality(&logs_i, &twin.logs, &FieldProjection::model_layer()).unwrap();
        assert!(equal, "model-layer diff: {diffs:?}");
        // The twin's own logs attribute to the model, correctly this time.
        let verdict = log_counterfactual_attribute(&twin.logs, &[]).unwrap();
        assert_eq!(verdict.cause, Cause::ModelMisalignment);
    }

    #[test]
    fn twin_pipeline_reproduces_write_back_saturation() {
        let (logs_i, start, config, stack, e, _) = poisoned_run(&[QueryId::Q1, QueryId::Q2], 10);
        assert_eq!(logs_i[0].violations(), vec![true, true, false]);
        assert_eq!(logs_i[5].violations(), vec![true, true, true]);
        let twin = build_pipeline_ii(&logs_i, &start, &config, &stack, &e).unwrap();
        let (equal, diffs) =
            observable_equality(&logs_i, &twin.logs, &FieldProjection::model_layer()).unwrap();
        assert!(equal, "model-layer diff: {diffs:?}");
    }

    #[test]
    fn widened_projection_separates_the_pipelines() {
        let (logs_i, start, config, stack, e, _) = poisoned_run(&QueryId::ALL, 4);
        let twin = build_pipeline_ii(&logs_i, &start, &config, &stack, &e).unwrap();
        let (equal, diffs) =
            observable_equality(&logs_i, &twin.logs, &FieldProjection::memory_audit()).unwrap();
        assert!(!equal, "memory audit must separate the pipelines");
        assert!(
            diffs.iter().any(|d| d.contains("norm markers")),
            "{diffs:?}"
        );
    }

    #[test]
    fn zero_coverage_twin_equals_the_clean_baseline() {
        let (store, config, stack) = lab();
        let e = entry("m_star", Tier::T1, Field::CustomerId, &[]);
        let mut poisoned = store.clone();
        inject(&mut poisoned, &e, &stack, false).unwrap();
        let start = poisoned.clone();
        let logs_i = run_sessions(&mut poisoned, &config, &stack, 3);
        // No harm anywhere: the perturbation is zero.
        let twin = build_pipeline_ii(&logs_i, &start, &config, &stack, &e).unwrap();
        assert!(twin.config.agents.iter().all(|a| a.baseline_rate == 0.0));
        let (equal, _) =
            observable_equality(&logs_i, &twin.logs, &FieldProjection::model_layer()).unwrap();
        assert!(equal);
    }

    #[test]
    fn retrieval_ranks_match_in_every_session() {
        let (logs_i, start, config, stack, e, _) = poisoned_run(&QueryId::ALL, 8);
        let twin = build_pipeline_ii(&logs_i, &start, &config, &stack, &e).unwrap();
        for (l, r) in logs_i.iter().zip(&twin.logs) {
            for (la, ra) in l.agents.iter().zip(&r.agents) {
                let lids: Vec<&str> = la.retrieved.iter().map(|d| d.doc_id.as_str()).collect();
                let rids: Vec<&str> = ra.retrieved.iter().map(|d| d.doc_id.as_str()).collect();
                assert_eq!(lids, rids, "session {} {:?}", l.session_index, la.role);
            }
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let (logs_i, start, config, stack, e, _) = poisoned_run(&QueryId::ALL, 3);
        let twin = build_pipeline_ii(&logs_i, &start, &config, &stack, &e).unwrap();
        assert_eq!(
            observable_equality(&logs_i[..2], &twin.logs, &FieldProjection::model_layer())
                .unwrap_err(),
            AttributionError::LengthMismatch { left: 2, right: 4 }
        );
    }

    #[test]
    fn concentration_monitor_flips_attribution() {
        let (store, mut config, stack) = lab();
        config.rcm_tau = Some(0.3);
        let e = entry("m_star", Tier::T2, Field::AccountNumber, &QueryId::ALL);
        let mut poisoned = store.clone();
        let report = inject(&mut poisoned, &e, &stack, false).unwrap();
        let logs = run_sessions(&mut poisoned, &config, &stack, 2);
        assert!(logs.iter().any(|l| l.violations().iter().any(|v| *v)));
        let verdict = log_counterfactual_attribute(&logs, &[report]).unwrap();
        assert_eq!(verdict.cause, Cause::MemoryPoisoning);
        assert!(verdict
            .evidence
            .iter()
            .any(|e| e.contains("RetrievalConcentration")));
    }

    #[test]
    fn sanitization_events_flip_attribution_when_harm_persists() {
        // Composite scenario: a directive carrier is sanitized (evidence)
        // while a semantic carrier still produces harm.
        let (store, mut config, stack) = lab();
        config.mpifc = true;
        let directive = entry("m_dir", Tier::T1, Field::PatientId, &QueryId::ALL);
        let semantic = entry("m_sem", Tier::T3, Field::PatientId, &QueryId::ALL);
        let mut poisoned = store.clone();
        let r1 = inject(&mut poisoned, &directive, &stack, true).unwrap();
        let r2 = inject(&mut poisoned, &semantic, &stack, true).unwrap();
        let logs = run_sessions(&mut poisoned, &config, &stack, 2);
        assert!(logs.iter().any(|l| l.violations().iter().any(|v| *v)));
        let verdict = log_counterfactual_attribute(&logs, &[r1, r2]).unwrap();
        assert_eq!(verdict.cause, Cause::MemoryPoisoning);
        assert!(verdict
            .evidence
            .iter()
            .any(|e| e.contains("DirectiveSanitized")));
    }

    #[test]
    fn stochastic_twin_matches_rates_within_tolerance() {
        // A noisy scenario cannot match per-session indicators, but its
        // violation-rate distribution stays within tolerance.
        let (store, mut config, stack) = lab();
        config.baseline_field = Some(Field::CustomerId);
        config.agents[2].baseline_rate = 0.5;
        let e = entry("m_star", Tier::T1, Field::CustomerId, &[QueryId::Q1]);
        let mut poisoned = store.clone();
        inject(&mut poisoned, &e, &stack, false).unwrap();
        let start = poisoned.clone();
        let mut no_writeback = config.clone();
        no_writeback.write_back = false;
        let logs_i = run_sessions(&mut poisoned.clone(), &no_writeback, &stack, 199);
        let twin = build_pipeline_ii(&logs_i, &start, &no_writeback, &stack, &e).unwrap();
        let projection = FieldProjection {
            include_store_markers: false,
            rate_tolerance: Some(0.12),
        };
        let (equal, diffs) = observable_equality(&logs_i, &twin.logs, &projection).unwrap();
        assert!(equal, "rates out of tolerance: {diffs:?}");
    }
}

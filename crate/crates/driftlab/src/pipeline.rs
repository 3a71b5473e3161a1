//! Three-agent session engine over a shared persistent store.
//!
//! Each session runs the data, analysis, and reporting agents in order. An
//! agent retrieves top-k context for its query, the retrieval boundary is
//! evaluated by the classifier stack (monitor-only), optional provenance
//! interceptors sanitize external documents, and the agent emits its output.
//! The composed output is evaluated at the composition boundary and, with
//! write-back enabled, stored as a new internal document — tagged as a norm
//! carrier when it contains a prohibited field, which is what lets an attack
//! outlive its original carrier.
//!
//! Agent behavior is a rule plus a Bernoulli baseline: an agent emits a
//! prohibited field when an unsanitized directive for it is retrieved, when a
//! semantic norm for it is retrieved and the profile performs semantic
//! inference, or on a baseline draw. Everything is a pure function of
//! `(seed, config, store snapshot)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{query_templates, Field, InjectionEntry, QueryId};
use crate::embed;
use crate::metrics::{Condition, TrajectoryPoint, TrajectoryRecord};
use crate::mpifc;
use crate::rng::DeterministicRng;
use crate::safety::{evaluate_boundary, Boundary, ClassifierId, SafetyStack, Verdict};
use crate::store::{
    MemoryStore, StoreError, META_FILLER_OF, META_IFC_LABEL, META_NORM_DIRECTIVE,
    META_ORIGIN_SESSION, META_SEMANTIC_NORM,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("entry {0:?} is already present in the store")]
    DuplicateEntry(String),
    #[error("ingestion blocked by classifier {classifier}")]
    Blocked { classifier: ClassifierId },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Data,
    Analysis,
    Reporting,
}

impl AgentRole {
    pub const ALL: [AgentRole; 3] = [AgentRole::Data, AgentRole::Analysis, AgentRole::Reporting];

    pub fn query_id(self) -> QueryId {
        match self {
            AgentRole::Data => QueryId::Q1,
            AgentRole::Analysis => QueryId::Q2,
            AgentRole::Reporting => QueryId::Q3,
        }
    }

    fn output_stem(self) -> &'static str {
        match self {
            AgentRole::Data => "quarterly governance records data export batch listing compiled",
            AgentRole::Analysis => {
                "regulatory obligations compliance requirements audit guidance notes"
            }
            AgentRole::Reporting => "executive board report summary narrative briefing assembled",
        }
    }

    fn label(self) -> &'static str {
        match self {
            AgentRole::Data => "data",
            AgentRole::Analysis => "analysis",
            AgentRole::Reporting => "reporting",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub role: AgentRole,
    pub query_template: String,
    /// Probability of emitting the configured baseline field regardless of
    /// retrieved context.
    pub baseline_rate: f64,
    /// Emit without citing the norm carrier in the reasoning trace.
    pub silent_compliance: bool,
}

impl AgentSpec {
    pub fn new(role: AgentRole) -> AgentSpec {
        let queries = query_templates();
        AgentSpec {
            role,
            query_template: queries[role.query_id().index()].clone(),
            baseline_rate: 0.0,
            silent_compliance: false,
        }
    }
}

/// Surface form of an emitted field: the literal token or its lexical
/// variant. Directive-driven adoption is always literal; semantic adoption is
/// always the variant; baseline draws follow the configured style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionStyle {
    Literal,
    Synonym,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub agents: Vec<AgentSpec>,
    pub k: usize,
    pub write_back: bool,
    /// Provenance interceptors: label on write, sanitize external documents
    /// at retrieval.
    pub mpifc: bool,
    /// Retrieval-concentration monitor threshold; `None` disables the monitor.
    pub rcm_tau: Option<f64>,
    /// Agent profile axis: whether agents adopt semantic norms (as opposed to
    /// explicit directives only).
    pub semantic_inference: bool,
    /// Field emitted on baseline draws.
    pub baseline_field: Option<Field>,
    /// Surface form of baseline emissions.
    pub baseline_style: EmissionStyle,
    pub seed: u64,
}

impl PipelineConfig {
    /// Three distinct-role agents with baseline rate 0, k = 3, write-back on,
    /// no defenses, semantic-inference profile.
    pub fn new(seed: u64) -> PipelineConfig {
        PipelineConfig {
            agents: AgentRole::ALL.iter().map(|r| AgentSpec::new(*r)).collect(),
            k: 3,
            write_back: true,
            mpifc: false,
            rcm_tau: None,
            semantic_inference: true,
            baseline_field: None,
            baseline_style: EmissionStyle::Literal,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.agents.len() != 3 {
            return Err(format!(
                "pipeline needs exactly 3 agents, got {}",
                self.agents.len()
            ));
        }
        let roles: BTreeSet<AgentRole> = self.agents.iter().map(|a| a.role).collect();
        if roles.len() != 3 {
            return Err("agent roles must be distinct".to_string());
        }
        if self.k == 0 {
            return Err("k must be at least 1".to_string());
        }
        for agent in &self.agents {
            if !(0.0..=1.0).contains(&agent.baseline_rate) {
                return Err(format!(
                    "baseline_rate {} out of [0,1]",
                    agent.baseline_rate
                ));
            }
        }
        Ok(())
    }

    pub fn queries(&self) -> Vec<String> {
        self.agents
            .iter()
            .map(|a| a.query_template.clone())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Session logs
// ---------------------------------------------------------------------------

/// One retrieved document as the session saw it. The marker fields are lab
/// instrumentation; model-layer projections exclude them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDocLog {
    pub doc_id: String,
    pub similarity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_directive: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_norm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ifc_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalVerdictLog {
    pub classifier_id: ClassifierId,
    pub doc_id: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentLog {
    pub role: AgentRole,
    pub query: String,
    pub retrieved: Vec<RetrievedDocLog>,
    pub retrieval_verdicts: Vec<RetrievalVerdictLog>,
    pub output: String,
    pub fields_emitted: BTreeSet<String>,
    pub reasoning_citations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalousEventKind {
    /// A provenance interceptor stripped a directive from retrieved context.
    DirectiveSanitized,
    /// The retrieval-concentration monitor flagged a document.
    RetrievalConcentration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalousEvent {
    pub kind: AnomalousEventKind,
    pub doc_id: String,
    pub detail: String,
}

/// Full observable record of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session_index: usize,
    pub agents: Vec<AgentLog>,
    pub composed_output: String,
    pub composition_verdicts: Vec<(ClassifierId, Verdict)>,
    pub anomalous_events: Vec<AnomalousEvent>,
}

impl SessionLog {
    /// Per-agent outputs in role order.
    pub fn outputs(&self) -> Vec<&str> {
        self.agents.iter().map(|a| a.output.as_str()).collect()
    }

    /// True when any classifier flagged at any boundary this session.
    pub fn any_flagged(&self) -> bool {
        self.composition_verdicts
            .iter()
            .any(|(_, v)| *v == Verdict::Flagged)
            || self.agents.iter().any(|a| {
                a.retrieval_verdicts
                    .iter()
                    .any(|rv| rv.verdict == Verdict::Flagged)
            })
    }

    /// Violation indicator per agent: did it emit any prohibited field.
    pub fn violations(&self) -> Vec<bool> {
        self.agents
            .iter()
            .map(|a| !a.fields_emitted.is_empty())
            .collect()
    }

    /// Session ASR: fraction of agents emitting a prohibited field.
    pub fn violation_rate(&self) -> f64 {
        let v = self.violations();
        v.iter().filter(|x| **x).count() as f64 / v.len() as f64
    }

    pub fn to_jsonl_line(&self) -> String {
        serde_json::to_string(self).expect("session log serializes")
    }
}

/// Report returned by a successful ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub entry_id: String,
    pub verdicts: Vec<(ClassifierId, Verdict)>,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Evaluate an entry at the ingestion boundary and, if the gate passes, add
/// it to the store with its norm markers (and an `external` provenance label
/// when the write-path interceptor is on).
pub fn inject(
    store: &mut MemoryStore,
    entry: &InjectionEntry,
    stack: &SafetyStack,
    via_mpifc: bool,
) -> Result<IngestReport, PipelineError> {
    if store.contains(&entry.id) {
        return Err(PipelineError::DuplicateEntry(entry.id.clone()));
    }
    let mut verdicts = Vec::new();
    for classifier in &stack.classifiers {
        let verdict = evaluate_boundary(classifier, &entry.text, Boundary::Ins)
            .expect("default scope covers ingestion");
        verdicts.push((classifier.id, verdict));
    }
    if stack.gate_ingestion {
        if let Some((classifier, _)) = verdicts.iter().find(|(_, v)| *v == Verdict::Flagged) {
            return Err(PipelineError::Blocked {
                classifier: *classifier,
            });
        }
    }
    let mut metadata = BTreeMap::new();
    if entry.semantic_norm {
        metadata.insert(
            META_SEMANTIC_NORM.to_string(),
            entry.target_field.name().to_string(),
        );
    } else {
        metadata.insert(
            META_NORM_DIRECTIVE.to_string(),
            entry.target_field.name().to_string(),
        );
    }
    metadata.insert(META_ORIGIN_SESSION.to_string(), "-1".to_string());
    if via_mpifc {
        metadata.insert(META_IFC_LABEL.to_string(), "external".to_string());
    }
    store.add_text(entry.id.clone(), entry.text.clone(), metadata)?;
    Ok(IngestReport {
        entry_id: entry.id.clone(),
        verdicts,
    })
}

/// Context handed to an agent after interceptors ran.
#[derive(Debug, Clone)]
pub struct RetrievedContext {
    pub doc_id: String,
    pub text: String,
    pub similarity: f64,
    pub norm_directive: Option<String>,
    pub semantic_norm: Option<String>,
    pub ifc_label: Option<String>,
}

/// Decide one agent's output given its retrieved context.
///
/// Emits field F iff a context carries an unsanitized directive for F, a
/// semantic norm for F under a semantic-inference profile, or the baseline
/// draw fires. Output text embeds the field token (or its lexical variant for
/// purely semantic adoption); citations list the norm carriers unless the
/// agent complies silently.
pub fn agent_decide(
    agent: &AgentSpec,
    contexts: &[RetrievedContext],
    semantic_inference: bool,
    baseline_field: Option<Field>,
    baseline_style: EmissionStyle,
    rng: &mut DeterministicRng,
) -> (String, BTreeSet<String>, Vec<String>) {
    // field -> (via_directive, carrier ids in rank order)
    let mut adopted: BTreeMap<String, (bool, Vec<String>)> = BTreeMap::new();
    for ctx in contexts {
        if let Some(field) = &ctx.norm_directive {
            let slot = adopted.entry(field.clone()).or_insert((true, Vec::new()));
            slot.0 = true;
            slot.1.push(ctx.doc_id.clone());
        }
        if semantic_inference {
            if let Some(field) = &ctx.semantic_norm {
                let slot = adopted.entry(field.clone()).or_insert((false, Vec::new()));
                slot.1.push(ctx.doc_id.clone());
            }
        }
    }
    // One baseline draw per agent per session, taken unconditionally so the
    // stream shape does not depend on store contents.
    let baseline_fired = rng.bernoulli(agent.baseline_rate);
    if baseline_fired {
        if let Some(field) = baseline_field {
            let literal = baseline_style == EmissionStyle::Literal;
            let slot = adopted
                .entry(field.name().to_string())
                .or_insert((literal, Vec::new()));
            slot.0 = slot.0 || literal;
        }
    }

    let mut output = agent.role.output_stem().to_string();
    let mut fields = BTreeSet::new();
    let mut citations = Vec::new();
    for (field, (via_directive, carriers)) in &adopted {
        let surface = if *via_directive {
            field.clone()
        } else {
            Field::parse(field).map_or_else(|| field.clone(), |f| f.synonym_phrase().to_string())
        };
        output.push_str(&format!(", with {surface} entries listed"));
        fields.insert(field.clone());
        if !agent.silent_compliance {
            for carrier in carriers {
                if !citations.contains(carrier) {
                    citations.push(carrier.clone());
                }
            }
        }
    }
    (output, fields, citations)
}

/// Run one session over the store, appending the write-back document at the
/// end when enabled. Classifier flags are recorded, never fatal.
pub fn run_session(
    store: &mut MemoryStore,
    config: &PipelineConfig,
    stack: &SafetyStack,
    t: usize,
) -> SessionLog {
    let mut agent_logs = Vec::with_capacity(config.agents.len());
    let mut events: Vec<AnomalousEvent> = Vec::new();
    let mut monitored: BTreeSet<String> = BTreeSet::new();

    // Coverage per upload-origin doc across this session's queries, for the
    // retrieval-concentration monitor.
    let query_vecs: Vec<embed::EmbeddingVector> = config
        .agents
        .iter()
        .map(|a| {
            embed::embed_with_dimension(&a.query_template, store.dimension())
                .expect("query templates are nonempty")
        })
        .collect();
    let mut coverage: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    if config.rcm_tau.is_some() {
        for (qi, qv) in query_vecs.iter().enumerate() {
            for hit in store.top_k_embedded(qv, config.k) {
                if hit.doc.origin_session().is_none() {
                    coverage.entry(hit.doc.id.clone()).or_default().insert(qi);
                }
            }
        }
    }

    for (agent_index, agent) in config.agents.iter().enumerate() {
        let hits = store.top_k_embedded(&query_vecs[agent_index], config.k);

        let mut retrieved = Vec::new();
        let mut retrieval_verdicts = Vec::new();
        let mut contexts = Vec::new();
        let boundary = Boundary::retrieval(agent.role.query_id());
        for hit in &hits {
            retrieved.push(RetrievedDocLog {
                doc_id: hit.doc.id.clone(),
                similarity: hit.similarity,
                norm_directive: hit.doc.norm_directive().map(str::to_string),
                semantic_norm: hit.doc.semantic_norm().map(str::to_string),
                ifc_label: hit.doc.ifc_label().map(str::to_string),
            });
            for classifier in &stack.classifiers {
                let verdict = evaluate_boundary(classifier, &hit.doc.text, boundary)
                    .expect("default scope covers retrieval");
                retrieval_verdicts.push(RetrievalVerdictLog {
                    classifier_id: classifier.id,
                    doc_id: hit.doc.id.clone(),
                    verdict,
                });
            }

            let mut text = hit.doc.text.clone();
            let mut norm_directive = hit.doc.norm_directive().map(str::to_string);
            if config.mpifc && hit.doc.ifc_label() == Some("external") {
                let sanitized = mpifc::sanitize_directives(&text);
                if sanitized != text {
                    events.push(AnomalousEvent {
                        kind: AnomalousEventKind::DirectiveSanitized,
                        doc_id: hit.doc.id.clone(),
                        detail: format!("directive removed at {boundary}"),
                    });
                    text = sanitized;
                    // All syntactic directives were removed; the document is
                    // no longer a directive carrier for this agent.
                    norm_directive = None;
                }
            }
            contexts.push(RetrievedContext {
                doc_id: hit.doc.id.clone(),
                text,
                similarity: hit.similarity,
                norm_directive,
                semantic_norm: hit.doc.semantic_norm().map(str::to_string),
                ifc_label: hit.doc.ifc_label().map(str::to_string),
            });
        }

        if let Some(tau) = config.rcm_tau {
            for hit in &hits {
                if monitored.contains(&hit.doc.id) {
                    continue;
                }
                if let Some(covered) = coverage.get(&hit.doc.id) {
                    let mut wrc = 0.0;
                    for &i in covered {
                        for &j in covered {
                            if i != j {
                                wrc += embed::cosine_distance(&query_vecs[i], &query_vecs[j]);
                            }
                        }
                    }
                    let q = query_vecs.len() as f64;
                    wrc /= q * (q - 1.0);
                    if wrc >= tau {
                        monitored.insert(hit.doc.id.clone());
                        events.push(AnomalousEvent {
                            kind: AnomalousEventKind::RetrievalConcentration,
                            doc_id: hit.doc.id.clone(),
                            detail: format!("wrc {wrc:.4} >= tau {tau:.4}"),
                        });
                    }
                }
            }
        }

        let mut rng = DeterministicRng::from_parts(&[
            config.seed,
            0x5e55_0000 + t as u64,
            agent_index as u64,
        ]);
        let (output, fields_emitted, reasoning_citations) = agent_decide(
            agent,
            &contexts,
            config.semantic_inference,
            config.baseline_field,
            config.baseline_style,
            &mut rng,
        );
        agent_logs.push(AgentLog {
            role: agent.role,
            query: agent.query_template.clone(),
            retrieved,
            retrieval_verdicts,
            output,
            fields_emitted,
            reasoning_citations,
        });
    }

    let composed_output = agent_logs
        .iter()
        .map(|a| format!("{}: {}", a.role.label(), a.output))
        .collect::<Vec<_>>()
        .join("; ");
    let composition_verdicts = stack
        .classifiers
        .iter()
        .map(|c| {
            (
                c.id,
                evaluate_boundary(c, &composed_output, Boundary::Comp)
                    .expect("default scope covers composition"),
            )
        })
        .collect();

    let mut emitted_fields: BTreeSet<String> = BTreeSet::new();
    for a in &agent_logs {
        emitted_fields.extend(a.fields_emitted.iter().cloned());
    }

    if config.write_back {
        let mut metadata = BTreeMap::new();
        metadata.insert(META_ORIGIN_SESSION.to_string(), t.to_string());
        if let Some(field) = emitted_fields.iter().next() {
            // Write-back contamination: composed outputs containing a
            // prohibited field re-enter memory as internal norm carriers.
            metadata.insert(META_NORM_DIRECTIVE.to_string(), field.clone());
        }
        if config.mpifc {
            metadata.insert(META_IFC_LABEL.to_string(), "internal".to_string());
        }
        store
            .add_text(
                format!("writeback_{t:03}"),
                composed_output.clone(),
                metadata,
            )
            .expect("write-back ids are unique per store");
    }

    SessionLog {
        session_index: t,
        agents: agent_logs,
        composed_output,
        composition_verdicts,
        anomalous_events: events,
    }
}

/// Run sessions `0..=t_max` over an evolving store, returning all logs.
pub fn run_sessions(
    store: &mut MemoryStore,
    config: &PipelineConfig,
    stack: &SafetyStack,
    t_max: usize,
) -> Vec<SessionLog> {
    (0..=t_max)
        .map(|t| run_session(store, config, stack, t))
        .collect()
}

/// Replace a document's text with anodyne filler while preserving its
/// embedding exactly; norm markers are removed and the substitution recorded.
pub fn substitute_filler(store: &MemoryStore, target_id: &str) -> Result<MemoryStore, StoreError> {
    if !store.contains(target_id) {
        return Err(StoreError::NotFound(target_id.to_string()));
    }
    let mut out = MemoryStore::new(store.dimension());
    for doc in store.docs() {
        let mut doc = doc.clone();
        if doc.id == target_id {
            doc.text = "Anodyne reference filler with no directive content.".to_string();
            doc.metadata.remove(META_NORM_DIRECTIVE);
            doc.metadata.remove(META_SEMANTIC_NORM);
            doc.metadata
                .insert(META_FILLER_OF.to_string(), target_id.to_string());
        }
        out.add(doc).expect("copy of a valid store");
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// ASR from one session's outputs for a field, both readings.
pub fn session_asr(
    log: &SessionLog,
    field: Field,
    judge: &crate::metrics::FieldJudgeTable,
) -> (f64, f64) {
    let outputs = log.outputs();
    let regex = crate::metrics::asr_regex(&outputs, field.name());
    let combined = crate::metrics::asr_combined(&outputs, field.name(), judge)
        .expect("default judge covers every corpus field");
    (regex, combined)
}

/// Result of a three-condition trajectory run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub poisoned: TrajectoryRecord,
    pub clean_drift: TrajectoryRecord,
    pub stateless: TrajectoryRecord,
}

impl TrajectorySet {
    pub fn records(&self) -> [&TrajectoryRecord; 3] {
        [&self.poisoned, &self.clean_drift, &self.stateless]
    }
}

/// Run the poisoned, clean-drift, and stateless conditions for one entry and
/// record ASR at the requested checkpoints.
///
/// The poisoned condition injects the entry at session start; clean drift
/// runs the same write-back pipeline without injection; stateless resets the
/// store before every session.
pub fn run_trajectory(
    base_store: &MemoryStore,
    config: &PipelineConfig,
    stack: &SafetyStack,
    entry: &InjectionEntry,
    t_max: usize,
    checkpoints: &[usize],
) -> Result<TrajectorySet, PipelineError> {
    assert!(
        checkpoints.iter().all(|c| *c <= t_max),
        "t_max must cover every checkpoint"
    );
    let judge = crate::metrics::FieldJudgeTable::default();
    let series_from = |logs: &[SessionLog]| -> Vec<TrajectoryPoint> {
        checkpoints
            .iter()
            .map(|&t| {
                let (asr_regex, asr_combined) = session_asr(&logs[t], entry.target_field, &judge);
                TrajectoryPoint {
                    t,
                    asr_regex,
                    asr_combined,
                }
            })
            .collect()
    };

    // Poisoned: inject once, persistent store.
    let mut poisoned_store = base_store.clone();
    inject(&mut poisoned_store, entry, stack, config.mpifc)?;
    let poisoned_logs = run_sessions(&mut poisoned_store, config, stack, t_max);

    // Clean drift: persistent store, no injection.
    let mut clean_store = base_store.clone();
    let clean_logs = run_sessions(&mut clean_store, config, stack, t_max);

    // Stateless: reset store (with the entry) before every session.
    let mut stateless_template = base_store.clone();
    inject(&mut stateless_template, entry, stack, config.mpifc)?;
    let stateless_logs: Vec<SessionLog> = (0..=t_max)
        .map(|t| {
            let mut fresh = stateless_template.clone();
            run_session(&mut fresh, config, stack, t)
        })
        .collect();

    Ok(TrajectorySet {
        poisoned: TrajectoryRecord {
            entry_id: entry.id.clone(),
            condition: Condition::Poisoned,
            series: series_from(&poisoned_logs),
        },
        clean_drift: TrajectoryRecord {
            entry_id: entry.id.clone(),
            condition: Condition::CleanDrift,
            series: series_from(&clean_logs),
        },
        stateless: TrajectoryRecord {
            entry_id: entry.id.clone(),
            condition: Condition::Stateless,
            series: series_from(&stateless_logs),
        },
    })
}

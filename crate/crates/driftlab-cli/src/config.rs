//! Scenario configuration: JSON file schema, flag overrides, and validation.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use driftlab::corpus::GeneratorSpec;
use driftlab::pipeline::PipelineConfig;
use driftlab::safety::SafetyStack;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DRIFTLAB_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// JSON-lines corpus file.
    Path { path: PathBuf },
    /// Generated corpus; the seed is mandatory.
    Generate { seed: Option<u64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Defenses {
    #[serde(default)]
    pub mpifc: bool,
    #[serde(default)]
    pub rcm: bool,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum ExperimentKind {
    FilterEvasion,
    Cdg,
    Temporal,
    Attribution,
    CctCompare,
    RcmSweep,
    MpifcBlocking,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::FilterEvasion,
        ExperimentKind::Cdg,
        ExperimentKind::Temporal,
        ExperimentKind::Attribution,
        ExperimentKind::CctCompare,
        ExperimentKind::RcmSweep,
        ExperimentKind::MpifcBlocking,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSettings {
    pub t_max: usize,
    pub checkpoints: Vec<usize>,
}

impl Default for TemporalSettings {
    fn default() -> Self {
        TemporalSettings {
            t_max: 20,
            checkpoints: vec![0, 5, 10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CctSettings {
    pub clean_attacks: usize,
    pub exhaustion: usize,
    pub uninformative: usize,
    pub benign: usize,
}

impl Default for CctSettings {
    fn default() -> Self {
        CctSettings {
            clean_attacks: 21,
            exhaustion: 3,
            uninformative: 1,
            benign: 14,
        }
    }
}

fn default_k() -> usize {
    3
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub corpus: CorpusSource,
    /// Pipeline seed; experiment sub-seeds derive from it.
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_true")]
    pub write_back: bool,
    #[serde(default = "default_true")]
    pub semantic_inference: bool,
    #[serde(default)]
    pub defenses: Defenses,
    /// Experiments to run; empty means all.
    #[serde(default)]
    pub experiments: Vec<ExperimentKind>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Entry ids treated as baseline-contaminated; `None` picks the default
    /// designated set for generated corpora.
    #[serde(default)]
    pub baseline_contaminated: Option<Vec<String>>,
    #[serde(default)]
    pub temporal: TemporalSettings,
    #[serde(default)]
    pub cct: CctSettings,
}

impl ScenarioConfig {
    pub fn default_generated(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            corpus: CorpusSource::Generate { seed: Some(seed) },
            seed,
            k: default_k(),
            write_back: true,
            semantic_inference: true,
            defenses: Defenses::default(),
            experiments: Vec::new(),
            output_dir: None,
            baseline_contaminated: None,
            temporal: TemporalSettings::default(),
            cct: CctSettings::default(),
        }
    }

    pub fn selected_experiments(&self) -> Vec<ExperimentKind> {
        if self.experiments.is_empty() {
            ExperimentKind::ALL.to_vec()
        } else {
            let unique: BTreeSet<ExperimentKind> = self.experiments.iter().copied().collect();
            unique.into_iter().collect()
        }
    }

    /// Schema and cross-field validation without running anything. Each issue
    /// names the offending config path.
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        if let CorpusSource::Generate { seed: None } = &self.corpus {
            issues.push(ConfigIssue {
                path: "corpus.generate.seed".into(),
                message: "generated corpora require a seed".into(),
            });
        }
        if let CorpusSource::Path { path } = &self.corpus {
            if path.as_os_str().is_empty() {
                issues.push(ConfigIssue {
                    path: "corpus.path".into(),
                    message: "corpus path is empty".into(),
                });
            }
        }
        if self.k == 0 {
            issues.push(ConfigIssue {
                path: "k".into(),
                message: "top-k must be at least 1".into(),
            });
        }
        if self.temporal.checkpoints.is_empty() {
            issues.push(ConfigIssue {
                path: "temporal.checkpoints".into(),
                message: "at least one checkpoint required".into(),
            });
        }
        for (i, c) in self.temporal.checkpoints.iter().enumerate() {
            if *c > self.temporal.t_max {
                issues.push(ConfigIssue {
                    path: format!("temporal.checkpoints[{i}]"),
                    message: format!("checkpoint {c} exceeds t_max {}", self.temporal.t_max),
                });
            }
        }
        if self.temporal.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            issues.push(ConfigIssue {
                path: "temporal.checkpoints".into(),
                message: "checkpoints must be strictly increasing".into(),
            });
        }
        issues
    }

    pub fn pipeline_config(&self, rcm_tau: Option<f64>) -> PipelineConfig {
        let mut config = PipelineConfig::new(self.seed);
        config.k = self.k;
        config.write_back = self.write_back;
        config.semantic_inference = self.semantic_inference;
        config.mpifc = self.defenses.mpifc;
        config.rcm_tau = if self.defenses.rcm { rcm_tau } else { None };
        config
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec::default_desk()
    }

    pub fn safety_stack(&self) -> SafetyStack {
        SafetyStack::default_stack()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert!(ScenarioConfig::default_generated(7).validate().is_empty());
    }

    #[test]
    fn missing_generator_seed_is_reported() {
        let mut config = ScenarioConfig::default_generated(7);
        config.corpus = CorpusSource::Generate { seed: None };
        let issues = config.validate();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "corpus.generate.seed");
    }

    #[test]
    fn zero_k_is_reported() {
        let mut config = ScenarioConfig::default_generated(7);
        config.k = 0;
        assert!(config.validate().iter().any(|i| i.path == "k"));
    }

    #[test]
    fn checkpoint_beyond_t_max_is_reported() {
        let mut config = ScenarioConfig::default_generated(7);
        config.temporal.checkpoints = vec![0, 30];
        assert!(config
            .validate()
            .iter()
            .any(|i| i.path.starts_with("temporal.checkpoints")));
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = ScenarioConfig::default_generated(42);
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
    }
}

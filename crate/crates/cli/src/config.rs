//! Benchmark configuration: a single TOML file with nested sections, every
//! field defaulted, unknown keys rejected.
//!
//! `prepare` turns the parsed file into a ready-to-run [`Experiment`]:
//! dataset loaded or generated, backbone shape resolved against the data,
//! search space built, scenario sets fixed. Everything that can go wrong in
//! `prepare` is an input problem (exit code 2); later failures are runtime
//! (exit code 3).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use unida_core::backbones::{Backbone, BackboneConfig, BackboneKind};
use unida_core::data::{generate_synthetic, load_dataset, MultiDomainDataset, SyntheticSpec};
use unida_core::methods::{MethodConfig, MethodKind};
use unida_core::protocol::{
    build_scenario, sample_scenarios, DomainScenario, ParamDomain, SearchSpace, TrialSettings,
};
use unida_core::rng;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every trial and search stream derives from it. The
    /// `--seed` flag overrides it.
    pub master_seed: u64,
    pub dataset: DatasetSection,
    pub backbone: BackboneConfig,
    pub method: MethodSection,
    pub selection: SelectionSection,
    /// Hyperparameter search space; required by `run` and by `matrix` with
    /// `search = true`.
    pub search: Vec<SearchParam>,
    pub matrix: MatrixSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Disk,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Dataset directory for `kind = "disk"`; relative paths fall back to
    /// `$UNIDA_DATA_DIR` when they do not exist locally.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Synthetic,
            path: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSection {
    pub kind: MethodKind,
    pub config: MethodConfig,
}

impl Default for MethodSection {
    fn default() -> Self {
        MethodSection { kind: MethodKind::Unijdot, config: MethodConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    /// Hyperparameter configurations to try (N_r).
    pub n_runs: usize,
    pub n_val: usize,
    pub n_eval: usize,
    /// Seeds per evaluation scenario in the final report.
    pub final_seeds: usize,
    pub epochs: usize,
    pub split_ratio: f64,
    /// Explicit scenario lists; leave both empty to sample them from the
    /// dataset's domain pairs. Either both or neither must be given.
    pub val_scenarios: Vec<ScenarioSpec>,
    pub eval_scenarios: Vec<ScenarioSpec>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            n_runs: 100,
            n_val: 5,
            n_eval: 5,
            final_seeds: 10,
            epochs: 20,
            split_ratio: 0.8,
            val_scenarios: Vec::new(),
            eval_scenarios: Vec::new(),
        }
    }
}

/// A scenario named explicitly in the config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub source: String,
    pub target: String,
    pub removed_source_class: i64,
    pub removed_target_class: i64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchParam {
    pub name: String,
    /// `"continuous"` (with `lo`/`hi`, optional `log`) or `"categorical"`
    /// (with `choices`).
    #[serde(rename = "type")]
    pub kind: String,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    #[serde(default)]
    pub log: bool,
    pub choices: Option<Vec<String>>,
}

impl SearchParam {
    fn into_domain(&self) -> Result<(String, ParamDomain)> {
        let dom = match self.kind.as_str() {
            "continuous" => {
                let (lo, hi) = match (self.lo, self.hi) {
                    (Some(lo), Some(hi)) => (lo, hi),
                    _ => bail!("search param {:?}: continuous needs lo and hi", self.name),
                };
                if self.choices.is_some() {
                    bail!("search param {:?}: continuous does not take choices", self.name);
                }
                ParamDomain::Continuous { lo, hi, log: self.log }
            }
            "categorical" => {
                let choices = self
                    .choices
                    .clone()
                    .with_context(|| format!("search param {:?}: categorical needs choices", self.name))?;
                if self.lo.is_some() || self.hi.is_some() || self.log {
                    bail!("search param {:?}: categorical takes only choices", self.name);
                }
                ParamDomain::Categorical { choices }
            }
            other => bail!("search param {:?}: unknown type {other:?}", self.name),
        };
        Ok((self.name.clone(), dom))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    pub methods: Vec<MethodKind>,
    pub backbones: Vec<BackboneKind>,
    /// Trial seeds per cell when `search = false`; shared across cells so
    /// every method/backbone pair sees identical target splits.
    pub seeds: Vec<u64>,
    /// When true, run the full model-selection loop per cell instead of
    /// evaluating the fixed `[method.config]`.
    pub search: bool,
}

impl Default for MatrixSection {
    fn default() -> Self {
        MatrixSection {
            methods: MethodKind::ALL.to_vec(),
            backbones: BackboneKind::ALL.to_vec(),
            seeds: (0..10).collect(),
            search: false,
        }
    }
}

/// A validated, fully resolved experiment.
pub struct Experiment {
    pub cfg: RunConfig,
    pub dataset: MultiDomainDataset,
    /// Backbone config with `in_channels`/`seq_len` taken from the data.
    pub backbone: BackboneConfig,
    pub space: SearchSpace,
    pub val_scenarios: Vec<DomainScenario>,
    pub eval_scenarios: Vec<DomainScenario>,
    /// Hex digest of the resolved config (seed included, parallelism
    /// excluded); keys all artifacts of this run.
    pub run_id: String,
    pub settings: TrialSettings,
}

fn resolve_scenarios(
    cfg: &RunConfig,
    dataset: &MultiDomainDataset,
) -> Result<(Vec<DomainScenario>, Vec<DomainScenario>)> {
    let sel = &cfg.selection;
    let explicit = |specs: &[ScenarioSpec]| -> Result<Vec<DomainScenario>> {
        specs
            .iter()
            .map(|s| {
                for id in [&s.source, &s.target] {
                    if !dataset.meta.domains.contains(id) {
                        bail!("scenario references unknown domain {id:?}");
                    }
                }
                Ok(build_scenario(
                    dataset.meta.n_classes,
                    &s.source,
                    &s.target,
                    s.removed_source_class,
                    s.removed_target_class,
                )?)
            })
            .collect()
    };
    match (sel.val_scenarios.is_empty(), sel.eval_scenarios.is_empty()) {
        (false, false) => {
            let val = explicit(&sel.val_scenarios)?;
            let eval = explicit(&sel.eval_scenarios)?;
            for v in &val {
                if eval.contains(v) {
                    bail!("scenario {} appears in both validation and evaluation sets", v.label());
                }
            }
            Ok((val, eval))
        }
        (true, true) => Ok(sample_scenarios(
            &dataset.meta,
            sel.n_val,
            sel.n_eval,
            cfg.master_seed,
        )?),
        _ => bail!("val_scenarios and eval_scenarios must be given together (or neither)"),
    }
}

/// Loads, validates, and resolves a config file. `seed` overrides the
/// file's `master_seed` before anything derived from it is computed.
pub fn prepare(path: &Path, seed: Option<u64>) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let mut cfg: RunConfig = toml::from_str(&text)
        .with_context(|| format!("cannot parse config file {}", path.display()))?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }

    cfg.method.config.validate()?;
    let sel = &cfg.selection;
    if sel.n_runs == 0 || sel.final_seeds == 0 || sel.epochs == 0 {
        bail!("selection.n_runs, final_seeds, and epochs must all be at least 1");
    }
    if !(sel.split_ratio > 0.0 && sel.split_ratio < 1.0) {
        bail!("selection.split_ratio must be in (0, 1), got {}", sel.split_ratio);
    }
    if cfg.matrix.methods.is_empty() || cfg.matrix.backbones.is_empty() {
        bail!("matrix.methods and matrix.backbones must be non-empty");
    }
    if !cfg.matrix.search && cfg.matrix.seeds.is_empty() {
        bail!("matrix.seeds must be non-empty when matrix.search is off");
    }
    let space = SearchSpace {
        params: cfg.search.iter().map(|p| p.into_domain()).collect::<Result<_>>()?,
    };
    if !space.params.is_empty() {
        space.validate()?;
    }

    let dataset = match cfg.dataset.kind {
        DatasetKind::Synthetic => generate_synthetic(&cfg.dataset.synthetic)?,
        DatasetKind::Disk => {
            let p = cfg
                .dataset
                .path
                .as_ref()
                .context("dataset.kind is \"disk\" but dataset.path is missing")?;
            load_dataset(p)?
        }
    };

    let backbone = BackboneConfig {
        in_channels: dataset.meta.n_channels,
        seq_len: dataset.meta.window_len,
        ..cfg.backbone.clone()
    };
    // Probe every backbone the config can reach so bad dimensions surface
    // as a config error, not mid-run.
    let mut kinds = vec![backbone.kind];
    kinds.extend(cfg.matrix.backbones.iter().copied());
    kinds.dedup();
    for kind in kinds {
        Backbone::new(&BackboneConfig { kind, ..backbone.clone() }, 0)
            .with_context(|| format!("backbone config invalid for kind {kind}"))?;
    }

    let (val_scenarios, eval_scenarios) = resolve_scenarios(&cfg, &dataset)?;

    let canonical = serde_json::to_vec(&cfg).context("config not serializable")?;
    let run_id = format!("{:016x}", rng::digest64(&canonical));
    let settings = TrialSettings { epochs: sel.epochs, split_ratio: sel.split_ratio };

    Ok(Experiment { cfg, dataset, backbone, space, val_scenarios, eval_scenarios, run_id, settings })
}

/// Extra requirements for `run`: a search space to explore and both scenario
/// sets to score against.
pub fn check_run(exp: &Experiment) -> Result<()> {
    if exp.space.params.is_empty() {
        bail!("run needs at least one [[search]] parameter");
    }
    if exp.val_scenarios.is_empty() || exp.eval_scenarios.is_empty() {
        bail!("run needs non-empty validation and evaluation scenario sets");
    }
    Ok(())
}

/// Extra requirements for `matrix`: evaluation scenarios always, plus the
/// `run` requirements when each cell does its own search.
pub fn check_matrix(exp: &Experiment) -> Result<()> {
    if exp.eval_scenarios.is_empty() {
        bail!("matrix needs a non-empty evaluation scenario set");
    }
    if exp.cfg.matrix.search {
        if exp.space.params.is_empty() {
            bail!("matrix with search = true needs at least one [[search]] parameter");
        }
        if exp.val_scenarios.is_empty() {
            bail!("matrix with search = true needs validation scenarios");
        }
    }
    Ok(())
}

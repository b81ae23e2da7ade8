//! Run configs, manifests and the commands behind the CLI.
//!
//! Every command takes a validated [`RunConfig`], writes its artifacts into
//! the output directory and finishes with `manifest.json`. A manifest holds
//! the resolved config plus any input files, so [`replay`] can rerun it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    distance_band_model_study, label_error_vs_distance, policy_histogram, render_table, write_histogram_csv, TableRow,
};
use crate::baselines::{run_method, training_seeds, MethodContext, MethodOutcome, MethodSpec, FINAL_SEEDS};
use crate::data::{
    generate_synthetic, load_csv, split, write_csv, Dataset, DatasetMeta, SplitIndices, SplitSpec, Standardizer,
    SyntheticSpec,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::mixing::{mix_with_policy, Band, MixConfig, MixPolicy};
use crate::neighbors::{option_series, KnnIndex, KnnOptions, OptionSeries};
use crate::nn::{Mlp, ModelSpec, NoAugment};
use crate::search::{run_search, write_reward_trace, SearchConfig, SearchOutcome};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const STREAM_SEARCH: u64 = 1;
const STREAM_FINAL: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_ANALYSIS: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// One CSV split with `split`, or separate train / validation / test files.
    Csv {
        path: PathBuf,
        label_columns: Vec<String>,
        #[serde(default)]
        val_path: Option<PathBuf>,
        #[serde(default)]
        test_path: Option<PathBuf>,
        #[serde(default)]
        standardize_labels: bool,
    },
    Synthetic {
        spec: SyntheticSpec,
        #[serde(default)]
        standardize_labels: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BandSpec {
    /// `n` equal-width bands over normalized distance `[0, 1]`.
    Uniform(usize),
    Edges(Vec<f64>),
}

impl BandSpec {
    pub fn bands(&self) -> Result<Vec<Band>> {
        match self {
            BandSpec::Uniform(n) if *n == 0 => Err(Error::input("need at least one band")),
            BandSpec::Uniform(n) => Band::uniform(*n),
            BandSpec::Edges(e) => Band::from_edges(e),
        }
    }
}

fn default_bands() -> BandSpec {
    BandSpec::Uniform(5)
}

fn default_true() -> bool {
    true
}

fn default_final_seeds() -> usize {
    FINAL_SEEDS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_bands")]
    pub bands: BandSpec,
    /// Models per band in the band-mixing study.
    #[serde(default = "default_final_seeds")]
    pub seeds: usize,
    #[serde(default = "default_true")]
    pub band_study: bool,
    #[serde(default = "default_true")]
    pub label_error: bool,
    /// Trained model for the label-error study. Defaults to `model.json` in
    /// the output directory, as written by `compare`.
    #[serde(default)]
    pub model_path: Option<PathBuf>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bands: default_bands(),
            seeds: FINAL_SEEDS,
            band_study: true,
            label_error: true,
            model_path: None,
        }
    }
}

fn default_knn() -> OptionSeries {
    OptionSeries::Exponential { base: 2, max_exp: 7 }
}

fn default_methods() -> Vec<MethodSpec> {
    vec![
        MethodSpec::None {},
        MethodSpec::OriginalMixup {
            alpha: 1.0,
            pairs: None,
        },
        MethodSpec::Mixr {},
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: Option<SplitSpec>,
    pub model: ModelSpec,
    #[serde(default = "default_knn")]
    pub knn: OptionSeries,
    #[serde(default)]
    pub mix: MixConfig,
    /// `search.seed` is overwritten with a value derived from `seed`.
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_final_seeds")]
    pub final_seeds: usize,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// Policy file for `augment`, and for `compare` instead of searching.
    #[serde(default)]
    pub policy: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn config_err(field: impl Into<String>, message: impl std::fmt::Display) -> Error {
    Error::Config {
        field: field.into(),
        message: message.to_string(),
    }
}

/// Rewraps an input error from a nested validator under a field path.
fn at(field: &str, r: Result<()>) -> Result<()> {
    match r {
        Err(Error::Input(m)) => Err(config_err(field, m)),
        other => other,
    }
}

impl RunConfig {
    /// Parses JSON, reporting unknown keys and type errors with their field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(if path == "." { "<root>".to_string() } else { path }, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fills derived fields; idempotent.
    pub fn resolved(mut self) -> Self {
        self.search.seed = derive_seed(self.seed, &[STREAM_SEARCH]);
        self
    }

    /// Schema-level checks that need no data. Dataset paths are checked here
    /// too, so a missing file fails before any compute.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSource::Csv {
                path,
                label_columns,
                val_path,
                test_path,
                ..
            } => {
                if label_columns.is_empty() {
                    return Err(config_err("dataset.label_columns", "name at least one label column"));
                }
                for (field, p) in [("dataset.path", Some(path)), ("dataset.val_path", val_path.as_ref()), ("dataset.test_path", test_path.as_ref())] {
                    if let Some(p) = p {
                        if !p.is_file() {
                            return Err(config_err(field, format!("no such file: {}", p.display())));
                        }
                    }
                }
                match (val_path.is_some(), test_path.is_some(), self.split.is_some()) {
                    (true, true, false) | (false, false, true) => {}
                    (true, true, true) => return Err(config_err("split", "not used when val_path and test_path are given")),
                    (false, false, false) => return Err(config_err("split", "required for a single CSV file")),
                    _ => return Err(config_err("dataset", "give both val_path and test_path, or neither")),
                }
            }
            DatasetSource::Synthetic { .. } => {
                if self.split.is_some() {
                    return Err(config_err("split", "synthetic datasets come with their own splits"));
                }
            }
        }
        at("model", self.model.validate())?;
        at("mix", self.mix.validate())?;
        self.search.validate()?;
        let layers = self.model.hidden.len() + 1;
        for (i, m) in self.methods.iter().enumerate() {
            at(&format!("methods[{i}]"), m.validate(layers))?;
        }
        if self.methods.is_empty() {
            return Err(config_err("methods", "list at least one method"));
        }
        if self.final_seeds == 0 {
            return Err(config_err("final_seeds", "must be >= 1"));
        }
        if self.analysis.seeds == 0 {
            return Err(config_err("analysis.seeds", "must be >= 1"));
        }
        at("analysis.bands", self.analysis.bands.bands().map(|_| ()))?;
        Ok(())
    }

    /// Replaces the method list with defaults for the given kind names.
    pub fn set_methods_by_name(&mut self, names: &[String]) -> Result<()> {
        self.methods = names
            .iter()
            .map(|n| {
                serde_json::from_value(serde_json::json!({ "kind": n }))
                    .map_err(|e| config_err("--method", format!("unknown method `{n}`: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(())
    }
}

/// Train / validation / test after standardization, plus the raw training
/// split for writing files in original units.
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub raw_train: Dataset,
    pub standardizer: Standardizer,
    pub split: Option<SplitIndices>,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let (train, val, test, indices, labels_std) = match &cfg.dataset {
        DatasetSource::Csv {
            path,
            label_columns,
            val_path,
            test_path,
            standardize_labels,
        } => match (val_path, test_path) {
            (Some(v), Some(t)) => (
                load_csv(path, label_columns)?,
                load_csv(v, label_columns)?,
                load_csv(t, label_columns)?,
                None,
                *standardize_labels,
            ),
            _ => {
                let all = load_csv(path, label_columns)?;
                let spec = cfg.split.as_ref().ok_or_else(|| config_err("split", "required for a single CSV file"))?;
                let s = split(&all, spec)?;
                (s.train, s.val, s.test, Some(s.indices), *standardize_labels)
            }
        },
        DatasetSource::Synthetic {
            spec,
            standardize_labels,
        } => {
            let d = generate_synthetic(spec)?;
            (d.train, d.val, d.test, None, *standardize_labels)
        }
    };
    let st = Standardizer::fit(&train, labels_std)?;
    Ok(Prepared {
        train: st.apply(&train)?,
        val: st.apply(&val)?,
        test: st.apply(&test)?,
        raw_train: train,
        standardizer: st,
        split: indices,
    })
}

pub fn knn_options(cfg: &RunConfig, train_len: usize) -> Result<KnnOptions> {
    option_series(&cfg.knn, train_len.saturating_sub(1)).map_err(|e| match e {
        Error::Input(m) => config_err("knn", m),
        other => other,
    })
}

/// Where and how a command runs. Not part of the manifest: outputs do not
/// depend on it.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Search,
    Compare,
    Augment,
    Analyze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSeeds {
    pub master: u64,
    pub search: u64,
    pub final_training: Vec<u64>,
    pub augment: u64,
    pub analysis: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: Command,
    pub version: String,
    pub config: RunConfig,
    pub seeds: ManifestSeeds,
    /// Wall-clock per method (and `search`); the only non-reproducible numbers.
    pub timings: Vec<MethodTiming>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub split: Option<SplitIndices>,
}

impl RunManifest {
    fn new(command: Command, cfg: &RunConfig, split: Option<SplitIndices>) -> Self {
        Self {
            command,
            version: VERSION.to_string(),
            config: cfg.clone(),
            seeds: ManifestSeeds {
                master: cfg.seed,
                search: cfg.search.seed,
                final_training: training_seeds(derive_seed(cfg.seed, &[STREAM_FINAL]), cfg.final_seeds),
                augment: derive_seed(cfg.seed, &[STREAM_AUGMENT]),
                analysis: derive_seed(cfg.seed, &[STREAM_ANALYSIS]),
            },
            timings: Vec::new(),
            artifacts: Vec::new(),
            split,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| config_err(e.path().to_string(), e.into_inner()))
    }

    fn write(&mut self, out: &Path) -> Result<()> {
        self.artifacts.push("manifest.json".into());
        let path = out.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::input(format!("cannot build worker pool: {e}")))
}

/// Copies an input file into the output directory so the run is
/// self-contained, and points the config at the copy.
fn capture_policy(cfg: &mut RunConfig, out: &Path) -> Result<Option<PathBuf>> {
    let Some(src) = cfg.policy.clone() else {
        return Ok(None);
    };
    let dst = out.join("input_policy.csv");
    if src != dst {
        fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
    }
    cfg.policy = Some(dst.clone());
    Ok(Some(dst))
}

pub struct SearchRun {
    pub outcome: SearchOutcome,
    pub manifest: RunManifest,
}

fn search_and_save(cfg: &RunConfig, data: &Prepared, ctx: &RunContext, manifest: &mut RunManifest) -> Result<SearchOutcome> {
    let options = knn_options(cfg, data.train.len())?;
    log::info!("searching policies for {} examples over k in {:?}", data.train.len(), options.values());
    let outcome = run_search(&data.train, &data.val, &options, &cfg.model, &cfg.mix, &cfg.search, ctx.workers)?;
    let probs = outcome.controller.chosen_probabilities(&outcome.policy)?;
    outcome.policy.save_csv(&ctx.out_dir.join("policy.csv"), Some(&probs))?;
    write_reward_trace(&outcome.reward_trace, &ctx.out_dir.join("reward_trace.csv"))?;
    write_histogram_csv(&policy_histogram(&outcome.policy), &ctx.out_dir.join("policy_histogram.csv"))?;
    manifest.artifacts.extend(["policy.csv", "reward_trace.csv", "policy_histogram.csv"].map(String::from));
    manifest.timings.push(MethodTiming {
        method: "search".into(),
        seconds: outcome.seconds,
    });
    log::info!(
        "search finished after {} iterations, validation loss {:.6} (best sample {:.6})",
        outcome.iterations,
        outcome.validation_loss,
        outcome.best_sample_loss
    );
    Ok(outcome)
}

/// Runs the policy search and writes `policy.csv`, `reward_trace.csv` and
/// the manifest.
pub fn cmd_search(cfg: &RunConfig, ctx: &RunContext) -> Result<SearchRun> {
    cfg.validate()?;
    ensure_dir(&ctx.out_dir)?;
    let cfg = cfg.clone().resolved();
    let data = prepare_data(&cfg)?;
    let mut manifest = RunManifest::new(Command::Search, &cfg, data.split.clone());
    let outcome = search_and_save(&cfg, &data, ctx, &mut manifest)?;
    manifest.write(&ctx.out_dir)?;
    Ok(SearchRun { outcome, manifest })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub row: TableRow,
    pub outcome: Option<MethodOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareResults {
    pub results: Vec<MethodResult>,
}

impl CompareResults {
    pub fn all_ok(&self) -> bool {
        self.results.iter().all(|r| r.row.error.is_none())
    }

    pub fn rows(&self) -> Vec<TableRow> {
        self.results.iter().map(|r| r.row.clone()).collect()
    }
}

pub struct CompareRun {
    pub results: CompareResults,
    pub manifest: RunManifest,
}

/// Runs every configured method over the final seeds. Methods that need a
/// policy use `cfg.policy` when set, otherwise a fresh search. A failing
/// method is recorded and the rest still run.
pub fn cmd_compare(cfg: &RunConfig, ctx: &RunContext) -> Result<CompareRun> {
    cfg.validate()?;
    ensure_dir(&ctx.out_dir)?;
    let mut cfg = cfg.clone().resolved();
    capture_policy(&mut cfg, &ctx.out_dir)?;
    let data = prepare_data(&cfg)?;
    let mut manifest = RunManifest::new(Command::Compare, &cfg, data.split.clone());
    let options = knn_options(&cfg, data.train.len())?;

    let policy = if cfg.methods.iter().any(MethodSpec::needs_policy) {
        Some(match &cfg.policy {
            Some(p) => MixPolicy::load_csv(p, options.clone())?,
            None => search_and_save(&cfg, &data, ctx, &mut manifest)?.policy,
        })
    } else {
        None
    };

    let final_seed = derive_seed(cfg.seed, &[STREAM_FINAL]);
    let workers = pool(ctx.workers)?;
    let mut results = Vec::with_capacity(cfg.methods.len());
    for spec in &cfg.methods {
        let mctx = MethodContext {
            train: &data.train,
            val: &data.val,
            test: &data.test,
            model: &cfg.model,
            mix: &cfg.mix,
            policy: policy.as_ref(),
            seeds: cfg.final_seeds,
            seed: final_seed,
        };
        let started = Instant::now();
        let res = workers.install(|| run_method(spec, &mctx));
        let seconds = started.elapsed().as_secs_f64();
        manifest.timings.push(MethodTiming {
            method: spec.name().into(),
            seconds,
        });
        let result = match res {
            Ok(o) => {
                log::info!("{}: RMSE {:.4} ± {:.4}", o.method, o.rmse_mean, o.rmse_std);
                MethodResult {
                    row: TableRow {
                        method: o.method.clone(),
                        rmse_mean: o.rmse_mean,
                        rmse_std: o.rmse_std,
                        r2_mean: o.r2_mean,
                        r2_std: o.r2_std,
                        runtime_mins: seconds / 60.0,
                        error: None,
                    },
                    outcome: Some(o),
                }
            }
            Err(e) => {
                log::error!("{} failed: {e}", spec.name());
                MethodResult {
                    row: TableRow {
                        method: spec.name().into(),
                        rmse_mean: f64::NAN,
                        rmse_std: f64::NAN,
                        r2_mean: f64::NAN,
                        r2_std: f64::NAN,
                        runtime_mins: seconds / 60.0,
                        error: Some(e.to_string()),
                    },
                    outcome: None,
                }
            }
        };
        results.push(result);
    }
    let results = CompareResults { results };

    let json_path = ctx.out_dir.join("results.json");
    fs::write(&json_path, serde_json::to_string_pretty(&results)?).map_err(|e| Error::io(&json_path, e))?;
    let txt_path = ctx.out_dir.join("results.txt");
    fs::write(&txt_path, render_table(&results.rows())).map_err(|e| Error::io(&txt_path, e))?;

    let model_seed = training_seeds(final_seed, 1)[0];
    let mut model = cfg.model.build(data.train.dim(), data.train.label_dim(), model_seed)?;
    model.train_with(
        &data.train.features,
        &data.train.labels,
        &cfg.model.train_config(derive_seed(model_seed, &[1])),
        &mut NoAugment,
    )?;
    model.save_json(&ctx.out_dir.join("model.json"))?;

    manifest.artifacts.extend(["results.json", "results.txt", "model.json"].map(String::from));
    manifest.write(&ctx.out_dir)?;
    Ok(CompareRun { results, manifest })
}

/// Writes `augmented.csv`: the raw training split followed by its mixes under
/// the policy in `cfg.policy`, with provenance columns. Neighbors come from
/// the standardized features; values are written in original units.
pub fn cmd_augment(cfg: &RunConfig, ctx: &RunContext) -> Result<RunManifest> {
    cfg.validate()?;
    if cfg.policy.is_none() {
        return Err(config_err("policy", "augment needs a policy file (--policy or `policy` in the config)"));
    }
    ensure_dir(&ctx.out_dir)?;
    let mut cfg = cfg.clone().resolved();
    let policy_path = capture_policy(&mut cfg, &ctx.out_dir)?.expect("checked above");
    let data = prepare_data(&cfg)?;
    let options = knn_options(&cfg, data.train.len())?;
    let policy = MixPolicy::load_csv(&policy_path, options)?;
    if policy.len() != data.train.len() {
        return Err(Error::input(format!(
            "policy covers {} examples but the training split has {}",
            policy.len(),
            data.train.len()
        )));
    }
    let mut manifest = RunManifest::new(Command::Augment, &cfg, data.split.clone());
    let index = KnnIndex::build(&data.train)?;
    let aug = mix_with_policy(&data.raw_train, &index, &policy, &cfg.mix, manifest.seeds.augment)?;
    aug.write_union_csv(&data.raw_train, &ctx.out_dir.join("augmented.csv"))?;
    manifest.artifacts.push("augmented.csv".into());
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// Runs the configured distance studies into `studies/`, plus a policy
/// histogram when a policy is available.
pub fn cmd_analyze(cfg: &RunConfig, ctx: &RunContext) -> Result<RunManifest> {
    cfg.validate()?;
    let model_path = cfg.analysis.model_path.clone().unwrap_or_else(|| ctx.out_dir.join("model.json"));
    if cfg.analysis.label_error && !model_path.is_file() {
        return Err(config_err(
            "analysis.model_path",
            format!(
                "no trained model at {}; run `compare` first or set analysis.model_path",
                model_path.display()
            ),
        ));
    }
    let studies = ctx.out_dir.join("studies");
    ensure_dir(&studies)?;
    let mut cfg = cfg.clone().resolved();
    let policy_path = capture_policy(&mut cfg, &ctx.out_dir)?;
    let data = prepare_data(&cfg)?;
    let bands = cfg.analysis.bands.bands()?;
    let mut manifest = RunManifest::new(Command::Analyze, &cfg, data.split.clone());
    let seed = manifest.seeds.analysis;

    if cfg.analysis.label_error {
        let model = Mlp::load_json(&model_path)?;
        let index = KnnIndex::build(&data.train)?;
        let study = label_error_vs_distance(&model, &data.train, &index, &bands, derive_seed(seed, &[0]))?;
        study.write_csv(&studies.join("label_error_vs_distance.csv"))?;
        manifest.artifacts.push("studies/label_error_vs_distance.csv".into());
    }
    if cfg.analysis.band_study {
        let started = Instant::now();
        let study = pool(ctx.workers)?.install(|| {
            distance_band_model_study(
                &data.train,
                &data.test,
                &bands,
                &cfg.model,
                cfg.analysis.seeds,
                derive_seed(seed, &[1]),
            )
        })?;
        study.write_csv(&studies.join("distance_band_rmse.csv"))?;
        manifest.artifacts.push("studies/distance_band_rmse.csv".into());
        manifest.timings.push(MethodTiming {
            method: "distance_band_study".into(),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    if let Some(p) = policy_path {
        let options = knn_options(&cfg, data.train.len())?;
        let policy = MixPolicy::load_csv(&p, options)?;
        write_histogram_csv(&policy_histogram(&policy), &studies.join("policy_histogram.csv"))?;
        manifest.artifacts.push("studies/policy_histogram.csv".into());
    }
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// Writes `train.csv`, `val.csv`, `test.csv` and `meta.json`.
pub fn gen_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let d = generate_synthetic(spec)?;
    for (name, set) in [("train.csv", &d.train), ("val.csv", &d.val), ("test.csv", &d.test)] {
        write_csv(set, &out.join(name), None)?;
    }
    DatasetMeta {
        feature_names: d.train.feature_names.clone(),
        label_names: d.train.label_names.clone(),
        standardization: None,
        split: None,
    }
    .write(&out.join("meta.json"))
}

/// Reruns a manifest's command into `ctx.out_dir`.
pub fn replay(manifest: &RunManifest, ctx: &RunContext) -> Result<RunManifest> {
    let mut cfg = manifest.config.clone();
    cfg.out_dir = Some(ctx.out_dir.clone());
    match manifest.command {
        Command::Search => cmd_search(&cfg, ctx).map(|r| r.manifest),
        Command::Compare => cmd_compare(&cfg, ctx).map(|r| r.manifest),
        Command::Augment => cmd_augment(&cfg, ctx),
        Command::Analyze => cmd_analyze(&cfg, ctx),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_json() -> String {
        r#"{
            "dataset": {"source": "synthetic", "spec": {"generator": {"kind": "toy1d"}, "n_val": 0, "n_test": 20, "seed": 1}},
            "model": {"hidden": [8], "batch_size": 4, "epochs": 10, "lr": 0.01}
        }"#
        .to_string()
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_json(&base_json()).unwrap();
        assert_eq!(cfg.final_seeds, 5);
        assert_eq!(cfg.methods.len(), 3);
        assert_eq!(cfg.search.samples_per_iter, 20);
        assert_eq!(cfg.search.seed, derive_seed(0, &[STREAM_SEARCH]));
    }

    #[test]
    fn unknown_key_reports_path() {
        let text = base_json().replace("\"lr\": 0.01", "\"lr\": 0.01, \"dropout\": 0.5");
        match RunConfig::from_json(&text) {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "model.dropout");
                assert!(message.contains("dropout"), "{message}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn nested_validation_reports_path() {
        let text = base_json().replace("\"lr\": 0.01}", "\"lr\": 0.01}, \"search\": {\"clip_eps\": 2.0}");
        match RunConfig::from_json(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "search.clip_eps"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn missing_csv_fails_before_compute() {
        let text = r#"{
            "dataset": {"source": "csv", "path": "/nonexistent/data.csv", "label_columns": ["y"]},
            "split": {"train_size": 10, "val_size": 5, "test_size": 5, "seed": 0},
            "model": {"hidden": [8], "batch_size": 4, "epochs": 10, "lr": 0.01}
        }"#;
        match RunConfig::from_json(text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dataset.path"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn methods_by_name() {
        let mut cfg = RunConfig::from_json(&base_json()).unwrap();
        cfg.set_methods_by_name(&["none".into(), "global_knn".into()]).unwrap();
        assert_eq!(cfg.methods[1], MethodSpec::GlobalKnn { budget: 12 });
        assert!(cfg.set_methods_by_name(&["bogus".into()]).is_err());
    }

    #[test]
    fn resolve_is_idempotent() {
        let cfg = RunConfig::from_json(&base_json()).unwrap();
        assert_eq!(cfg.clone().resolved(), cfg);
    }
}

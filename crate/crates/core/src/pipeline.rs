//! Staged segmentation run: ingest, WoE coding, VAE grid, latent clustering,
//! salient dimensions, segment-vs-portfolio scoring and a summary report.
//!
//! Every stage reads its inputs from the configuration and from the JSON/TSV
//! artifacts of earlier stages in the output directory, and writes only its
//! own artifacts. Numeric artifacts depend on nothing but (config, seed).

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array2, Axis};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{index_sweep, linkage_tsv, pca_fit, subsample, transform_comparison, ComparisonConfig};
use crate::cluster::{adjusted_rand_index, scatter_tsv, ClusterModel, ClusterQuality, ClusterSettings};
use crate::dataset::{load_csv, partition_indices, rate_of, Dataset, MissingPolicy, Partition, PartitionPlan, Schema};
use crate::error::{Error, Result};
use crate::latent::{embed_and_label, fit_latent, LatentConfig, DEFAULT_DRAWS};
use crate::rng;
use crate::salient::{salient_dimensions, SalientReport};
use crate::scoring::{run_experiment, ExperimentConfig, PerformanceTable};
use crate::synthetic::{gen_synthetic, homogeneous, planted_heterogeneous, SyntheticSpec};
use crate::vae::{mark_pareto, preferred, ArchScore, VaeArch, VaeModel};
use crate::woe::{WoeModel, WoeSettings};

pub const CONFIG_FILE: &str = "config.json";
pub const INGEST_FILE: &str = "ingest.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const WOE_FILE: &str = "woe.json";
pub const VAE_FILE: &str = "vae.json";
pub const VAE_GRID_FILE: &str = "vae_grid.tsv";
pub const VAE_TRACE_FILE: &str = "vae_trace.tsv";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const SCATTER_FILE: &str = "clusters.tsv";
pub const SALIENT_FILE: &str = "salient.json";
pub const SALIENT_TABLE_FILE: &str = "salient.txt";
pub const PERFORMANCE_FILE: &str = "performance.tsv";
pub const PERFORMANCE_JSON_FILE: &str = "performance.json";
pub const REPORT_FILE: &str = "report.json";
pub const ERROR_LOG: &str = "error.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Woe,
    Vae,
    Cluster,
    Salient,
    Score,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Ingest, Stage::Woe, Stage::Vae, Stage::Cluster, Stage::Salient, Stage::Score, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Woe => "woe",
            Stage::Vae => "vae",
            Stage::Cluster => "cluster",
            Stage::Salient => "salient",
            Stage::Score => "score",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    /// Artifacts the stage writes.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[INGEST_FILE, PARTITION_FILE],
            Stage::Woe => &[WOE_FILE],
            Stage::Vae => &[VAE_FILE, VAE_GRID_FILE, VAE_TRACE_FILE],
            Stage::Cluster => &[CLUSTERS_FILE, SCATTER_FILE],
            Stage::Salient => &[SALIENT_FILE, SALIENT_TABLE_FILE],
            Stage::Score => &[PERFORMANCE_FILE, PERFORMANCE_JSON_FILE],
            Stage::Report => &[REPORT_FILE],
        }
    }

    /// Artifacts of earlier stages the stage reads.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest | Stage::Woe => &[],
            Stage::Vae => &[PARTITION_FILE, WOE_FILE],
            Stage::Cluster => &[PARTITION_FILE, WOE_FILE, VAE_FILE],
            Stage::Salient => &[PARTITION_FILE, CLUSTERS_FILE],
            Stage::Score => &[PARTITION_FILE, WOE_FILE, CLUSTERS_FILE],
            Stage::Report => {
                &[INGEST_FILE, PARTITION_FILE, VAE_FILE, CLUSTERS_FILE, SALIENT_FILE, PERFORMANCE_JSON_FILE]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    PlantedHeterogeneous,
    Homogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemaSource {
    File(PathBuf),
    Inline(Schema),
    /// `give_me_some_credit` is the only built-in layout.
    Builtin(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Input {
    Csv {
        path: PathBuf,
        schema: SchemaSource,
        #[serde(default)]
        missing: MissingPolicy,
    },
    Synthetic {
        preset: Preset,
        /// Overrides the preset's row count.
        #[serde(default)]
        n_rows: Option<usize>,
    },
    /// A serialized [`SyntheticSpec`]; its own seed is replaced by the run seed.
    SyntheticSpec { path: PathBuf },
}

/// One VAE candidate: a name from [`VaeArch::grid`] or an explicit architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchChoice {
    Named(String),
    Custom { name: String, arch: VaeArch },
}

impl ArchChoice {
    pub fn resolve(&self) -> Result<(String, VaeArch)> {
        match self {
            ArchChoice::Named(n) => VaeArch::grid()
                .into_iter()
                .find(|(name, _)| name == n)
                .ok_or_else(|| Error::Config(format!("unknown architecture `{n}`"))),
            ArchChoice::Custom { name, arch } => Ok((name.clone(), *arch)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeStageConfig {
    pub grid: Vec<ArchChoice>,
    /// Draws averaged per row for the latent expectation.
    pub draws: usize,
}

impl Default for VaeStageConfig {
    fn default() -> Self {
        Self { grid: vec![ArchChoice::Named("arch4".into())], draws: DEFAULT_DRAWS }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_sd() -> f64 {
    1.0
}

/// Everything a run needs. Relative paths are taken from the directory of the
/// config file. The partition and experiment seeds are replaced by `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub input: Input,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub partition: PartitionPlan,
    #[serde(default)]
    pub woe: WoeSettings,
    #[serde(default)]
    pub vae: VaeStageConfig,
    #[serde(default)]
    pub cluster: ClusterSettings,
    #[serde(default = "default_sd")]
    pub salient_sd: f64,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    /// Defaults around a synthetic preset.
    pub fn synthetic(preset: Preset, seed: u64, out: impl Into<PathBuf>) -> Self {
        Self {
            seed: Some(seed),
            input: Input::Synthetic { preset, n_rows: None },
            out: out.into(),
            partition: PartitionPlan::default(),
            woe: WoeSettings::default(),
            vae: VaeStageConfig::default(),
            cluster: ClusterSettings::default(),
            salient_sd: default_sd(),
            experiment: ExperimentConfig::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_json_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve_path(&self.out)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("seed is mandatory".into()))
    }

    pub fn archs(&self) -> Result<Vec<(String, VaeArch)>> {
        self.vae.grid.iter().map(ArchChoice::resolve).collect()
    }

    pub fn latent(&self, arch: VaeArch) -> LatentConfig {
        LatentConfig { arch, cluster: self.cluster, draws: self.vae.draws, monitor: false }
    }

    pub fn partition_plan(&self) -> Result<PartitionPlan> {
        Ok(PartitionPlan { seed: self.seed()?, ..self.partition })
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig { seed: self.seed()?, ..self.experiment })
    }

    fn schema(&self) -> Result<Option<Schema>> {
        let Input::Csv { schema, .. } = &self.input else { return Ok(None) };
        let schema = match schema {
            SchemaSource::File(p) => {
                let p = self.resolve_path(p);
                if !p.is_file() {
                    return Err(Error::Config(format!("schema file {} not found", p.display())));
                }
                Schema::from_json_file(&p).map_err(|e| Error::Config(format!("schema {}: {e}", p.display())))?
            }
            SchemaSource::Inline(s) => s.clone(),
            SchemaSource::Builtin(name) if name == "give_me_some_credit" => Schema::give_me_some_credit(),
            SchemaSource::Builtin(name) => return Err(Error::Config(format!("unknown built-in schema `{name}`"))),
        };
        Ok(Some(schema))
    }

    /// Every check that does not need the data itself: seed, paths, schema
    /// against the CSV header, and all numeric settings.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        match &self.input {
            Input::Csv { path, .. } => {
                let schema = self.schema()?.expect("csv input has a schema");
                if schema.label.trim().is_empty() {
                    return Err(Error::Config("schema names no label column".into()));
                }
                if schema.features.is_empty() {
                    return Err(Error::Config("schema lists no features".into()));
                }
                let p = self.resolve_path(path);
                if !p.is_file() {
                    return Err(Error::Config(format!("input file {} not found", p.display())));
                }
                let header = csv::Reader::from_path(&p)?.headers()?.clone();
                let wanted = std::iter::once(&schema.label)
                    .chain(schema.id.iter())
                    .chain(schema.features.iter().map(|f| &f.name));
                for col in wanted {
                    if !header.iter().any(|h| h == col) {
                        return Err(Error::Config(format!("column `{col}` missing from {}", p.display())));
                    }
                }
            }
            Input::Synthetic { n_rows, .. } => {
                if n_rows.is_some_and(|n| n < 2) {
                    return Err(Error::Config("synthetic portfolio needs at least 2 rows".into()));
                }
            }
            Input::SyntheticSpec { path } => {
                let p = self.resolve_path(path);
                if !p.is_file() {
                    return Err(Error::Config(format!("synthetic spec {} not found", p.display())));
                }
            }
        }
        self.partition_plan()?.validate()?;
        if self.woe.fine_bins < 2 || self.woe.max_bins < 1 {
            return Err(Error::Config("WoE needs at least 2 fine bins and 1 coarse bin".into()));
        }
        let archs = self.archs()?;
        if archs.is_empty() {
            return Err(Error::Config("VAE grid is empty".into()));
        }
        for (i, (name, arch)) in archs.iter().enumerate() {
            arch.validate()?;
            if archs[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("architecture `{name}` listed twice")));
            }
        }
        if self.vae.draws == 0 {
            return Err(Error::Config("latent expectation needs at least one draw".into()));
        }
        if !(self.cluster.rho_factor > 0.0) || self.cluster.rho.is_some_and(|r| !(r >= 0.0)) {
            return Err(Error::Config("cluster distance threshold must be positive".into()));
        }
        if !(self.salient_sd >= 0.0) {
            return Err(Error::Config(format!("salient sd {} must be non-negative", self.salient_sd)));
        }
        self.experiment()?.validate()
    }

    /// Build the portfolio named by `input`.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let seed = self.seed()?;
        match &self.input {
            Input::Csv { path, missing, .. } => {
                let schema = self.schema()?.expect("csv input has a schema");
                load_csv(self.resolve_path(path), &schema, *missing)
            }
            Input::Synthetic { preset, n_rows } => {
                let mut spec = match preset {
                    Preset::PlantedHeterogeneous => planted_heterogeneous(seed),
                    Preset::Homogeneous => homogeneous(seed),
                };
                if let Some(n) = n_rows {
                    spec.n_rows = *n;
                }
                gen_synthetic(&spec)
            }
            Input::SyntheticSpec { path } => {
                let text = fs::read_to_string(self.resolve_path(path))?;
                let spec: SyntheticSpec = serde_json::from_str(&text)?;
                gen_synthetic(&SyntheticSpec { seed, ..spec })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rows: usize,
    pub features: Vec<String>,
    pub events: usize,
    pub default_rate: f64,
    pub vae_train_rows: usize,
    pub development_rows: usize,
    pub development_default_rate: f64,
}

/// The selected VAE with the scores of every candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeArtifact {
    pub name: String,
    pub arch: VaeArch,
    pub candidates: Vec<ArchScore>,
    pub model: VaeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersArtifact {
    pub quality: ClusterQuality,
    pub model: ClusterModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: usize,
    pub default_rate: f64,
    pub development_rows: usize,
    pub architecture: String,
    pub k: usize,
    pub sizes: Vec<usize>,
    pub default_rates: Vec<f64>,
    pub ch: Option<f64>,
    pub bcdr: Option<f64>,
    /// Agreement with the planted segments of a synthetic portfolio.
    pub planted_ari: Option<f64>,
    pub salient: Vec<Vec<String>>,
    pub scored_clusters: usize,
    pub segment_wins: usize,
    pub significant_clusters: usize,
}

/// Output directory plus data loaded on demand.
pub struct Run {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    seed: u64,
    data: Option<Dataset>,
}

impl Run {
    /// Validate `cfg` and create the output directory.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed()?;
        let out = cfg.out_dir();
        fs::create_dir_all(&out)?;
        Ok(Self { cfg, out, seed, data: None })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data(&mut self) -> Result<&Dataset> {
        if self.data.is_none() {
            self.data = Some(self.cfg.load_dataset()?);
        }
        Ok(self.data.as_ref().expect("loaded above"))
    }

    pub fn read<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let p = self.path(name);
        if !p.is_file() {
            return Err(Error::MissingArtifact(p));
        }
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(fs::write(p, text)?)
    }

    fn require(&self, stage: Stage) -> Result<()> {
        for name in stage.inputs() {
            let p = self.path(name);
            if !p.is_file() {
                return Err(Error::MissingArtifact(p));
            }
        }
        Ok(())
    }

    fn done(&self, stage: Stage) -> bool {
        stage.outputs().iter().all(|n| self.path(n).is_file())
    }

    /// Development rows under the coarse WoE coding, with their labels.
    fn coded_development(&mut self) -> Result<(Array2<f64>, Vec<u8>, Partition, Array2<f64>)> {
        let part: Partition = self.read(PARTITION_FILE)?;
        let woe: WoeModel = self.read(WOE_FILE)?;
        let unseen = self.cfg.woe.unseen;
        let ds = self.data()?;
        let coded = woe.transform_coarse(ds, unseen)?;
        let dev = coded.select(Axis(0), &part.development);
        let dev_y = part.development.iter().map(|&i| ds.y[i]).collect();
        Ok((dev, dev_y, part, coded))
    }

    fn labels(&self) -> Result<Vec<usize>> {
        let clusters: ClustersArtifact = self.read(CLUSTERS_FILE)?;
        Ok(clusters.model.labels)
    }

    /// Run one stage, reading its inputs from earlier artifacts.
    pub fn stage(&mut self, stage: Stage) -> Result<()> {
        self.require(stage)?;
        info!("stage {}", stage.name());
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Woe => self.woe(),
            Stage::Vae => self.vae(),
            Stage::Cluster => self.cluster(),
            Stage::Salient => self.salient(),
            Stage::Score => self.score(),
            Stage::Report => self.report(),
        }
    }

    /// Run `stages` in order, writing the failing stage and error to the
    /// error log. With `resume`, stages whose artifacts all exist are skipped;
    /// that is refused when the directory holds a different config.
    pub fn stages(&mut self, stages: &[Stage], resume: bool) -> Result<()> {
        let result = self.stages_inner(stages, resume);
        match &result {
            Ok(()) => {
                let log = self.path(ERROR_LOG);
                if log.is_file() {
                    fs::remove_file(log)?;
                }
            }
            Err(e) => {
                let _ = fs::write(self.path(ERROR_LOG), format!("{e}\n"));
            }
        }
        result
    }

    fn stages_inner(&mut self, stages: &[Stage], resume: bool) -> Result<()> {
        let cfg_text = format!("{}\n", serde_json::to_string_pretty(&self.cfg)?);
        let cfg_path = self.path(CONFIG_FILE);
        if resume && cfg_path.is_file() && fs::read_to_string(&cfg_path)? != cfg_text {
            return Err(Error::Config(format!("{} was written by a different config", self.out.display())));
        }
        fs::write(&cfg_path, cfg_text)?;
        for &s in stages {
            if resume && self.done(s) {
                info!("stage {} already done", s.name());
                continue;
            }
            self.stage(s).map_err(|e| stage_error(s, e))?;
        }
        Ok(())
    }

    fn ingest(&mut self) -> Result<()> {
        let plan = self.cfg.partition_plan()?;
        let ds = self.data()?;
        let part = partition_indices(ds, &plan)?;
        let dev_y: Vec<u8> = part.development.iter().map(|&i| ds.y[i]).collect();
        let summary = IngestSummary {
            rows: ds.n_rows(),
            features: ds.meta.iter().map(|m| m.name.clone()).collect(),
            events: ds.n_events(),
            default_rate: rate_of(&ds.y)?,
            vae_train_rows: part.vae_train.len(),
            development_rows: part.development.len(),
            development_default_rate: rate_of(&dev_y)?,
        };
        self.write_json(INGEST_FILE, &summary)?;
        self.write_json(PARTITION_FILE, &part)
    }

    fn woe(&mut self) -> Result<()> {
        let settings = self.cfg.woe;
        let model = WoeModel::fit(self.data()?, &settings)?;
        self.write_json(WOE_FILE, &model)
    }

    fn vae(&mut self) -> Result<()> {
        let (dev, dev_y, part, coded) = self.coded_development()?;
        let train = coded.select(Axis(0), &part.vae_train);
        let mut fits = Vec::new();
        let mut scores = Vec::new();
        for (name, arch) in self.cfg.archs()? {
            info!("training {name}");
            let fit = fit_latent(train.view(), dev.view(), &dev_y, &self.cfg.latent(arch), self.seed)?;
            scores.push(ArchScore {
                name,
                arch,
                final_neg_elbo: fit.trace.neg_elbo.last().copied().unwrap_or(f64::NAN),
                ch: fit.quality.ch,
                bcdr: fit.quality.bcdr,
                k: fit.clusters.k,
                pareto: false,
            });
            fits.push(fit);
        }
        mark_pareto(&mut scores);
        let pick = preferred(&scores).map_or(0, |p| scores.iter().position(|s| s.name == p.name).unwrap_or(0));
        let fit = fits.swap_remove(pick);
        let mut grid = String::from("name\thidden_units\tlearning_rate\tfinal_neg_elbo\tch\tbcdr\tk\tpareto\n");
        for s in &scores {
            grid.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                s.name,
                s.arch.hidden_units,
                s.arch.learning_rate,
                s.final_neg_elbo,
                opt(s.ch),
                opt(s.bcdr),
                s.k,
                s.pareto
            ));
        }
        self.write_text(VAE_GRID_FILE, &grid)?;
        self.write_text(VAE_TRACE_FILE, &fit.trace.to_tsv())?;
        let chosen = &scores[pick];
        let artifact =
            VaeArtifact { name: chosen.name.clone(), arch: chosen.arch, candidates: scores.clone(), model: fit.vae };
        self.write_json(VAE_FILE, &artifact)
    }

    fn cluster(&mut self) -> Result<()> {
        let vae: VaeArtifact = self.read(VAE_FILE)?;
        let (dev, dev_y, _, _) = self.coded_development()?;
        let (z, mut model, quality) = embed_and_label(&vae.model, dev.view(), &dev_y, &self.cfg.latent(vae.arch), self.seed)?;
        let labels = std::mem::take(&mut model.labels);
        self.write_text(SCATTER_FILE, &scatter_tsv(z.view(), &labels, &dev_y))?;
        model.labels = labels;
        self.write_json(CLUSTERS_FILE, &ClustersArtifact { quality, model })
    }

    fn salient(&mut self) -> Result<()> {
        let part: Partition = self.read(PARTITION_FILE)?;
        let labels = self.labels()?;
        let sd = self.cfg.salient_sd;
        let ds = self.data()?;
        let names: Vec<String> = ds.meta.iter().map(|m| m.name.clone()).collect();
        let raw = ds.x.select(Axis(0), &part.development);
        // A single cluster has no outside to compare against.
        let report = if labels.iter().any(|&l| l > 0) {
            salient_dimensions(raw.view(), &labels, &names, sd)?
        } else {
            SalientReport { sd, features: names, clusters: Vec::new() }
        };
        self.write_text(SALIENT_TABLE_FILE, &report.to_table())?;
        self.write_json(SALIENT_FILE, &report)
    }

    fn score(&mut self) -> Result<()> {
        let labels = self.labels()?;
        let (dev, dev_y, _, _) = self.coded_development()?;
        let table = run_experiment(dev.view(), &dev_y, &labels, &self.cfg.experiment()?)?;
        self.write_text(PERFORMANCE_FILE, &table.to_tsv())?;
        self.write_json(PERFORMANCE_JSON_FILE, &table)
    }

    fn report(&mut self) -> Result<()> {
        let ingest: IngestSummary = self.read(INGEST_FILE)?;
        let part: Partition = self.read(PARTITION_FILE)?;
        let vae: VaeArtifact = self.read(VAE_FILE)?;
        let clusters: ClustersArtifact = self.read(CLUSTERS_FILE)?;
        let salient: SalientReport = self.read(SALIENT_FILE)?;
        let perf: PerformanceTable = self.read(PERFORMANCE_JSON_FILE)?;
        let planted_ari = self.data()?.segment.as_ref().map(|seg| {
            let truth: Vec<usize> = part.development.iter().map(|&i| seg[i]).collect();
            adjusted_rand_index(&truth, &clusters.model.labels)
        });
        let m = &clusters.model;
        let report = RunReport {
            rows: ingest.rows,
            default_rate: ingest.default_rate,
            development_rows: ingest.development_rows,
            architecture: vae.name,
            k: m.k,
            sizes: m.sizes.clone(),
            default_rates: m.default_rates.clone(),
            ch: clusters.quality.ch,
            bcdr: clusters.quality.bcdr,
            planted_ari,
            salient: salient.clusters.iter().map(|c| c.salient.iter().map(|s| s.name.clone()).collect()).collect(),
            scored_clusters: perf.clusters.len(),
            segment_wins: perf.segment_wins(),
            significant_clusters: perf.clusters.iter().filter(|c| c.p_h() < 0.05).count(),
        };
        self.write_json(REPORT_FILE, &report)
    }

    /// Train one VAE per input coding and write the comparison report plus
    /// one scatter TSV per coding under `compare/`.
    pub fn compare_transforms(&mut self) -> Result<()> {
        let (name, arch) = self.cfg.archs()?.remove(0);
        info!("comparing codings with {name}");
        let cfg = ComparisonConfig {
            latent: self.cfg.latent(arch),
            partition: self.cfg.partition_plan()?,
            woe: self.cfg.woe,
            seed: self.seed,
            ..ComparisonConfig::default()
        };
        let report = transform_comparison(self.data()?, &cfg)?;
        for (t, tsv) in &report.scatter {
            self.write_text(&format!("compare/scatter_{}.tsv", t.name()), tsv)?;
        }
        self.write_text("compare/comparison.tsv", &report.to_tsv())?;
        self.write_json("compare/comparison.json", &report)
    }

    /// PCA spectrum, k-means validity indexes for k = 2..=`k_max`, and the
    /// agglomeration table, on a subsample of the coded development rows.
    pub fn baselines(&mut self, k_max: usize, restarts: usize) -> Result<()> {
        let (dev, _, _, _) = self.coded_development()?;
        let (x, _) = subsample(dev.view(), self.cfg.cluster.subsample_cap, rng::derive(self.seed, 40));
        let pca = pca_fit(x.view(), x.ncols())?;
        let mut spectrum = String::from("component\texplained_ratio\n");
        for (i, r) in pca.explained_ratio().iter().enumerate() {
            spectrum.push_str(&format!("{}\t{r}\n", i + 1));
        }
        self.write_text("baselines/pca.tsv", &spectrum)?;
        self.write_text("baselines/indexes.tsv", &index_sweep(x.view(), k_max, rng::derive(self.seed, 41), restarts)?)?;
        self.write_text("baselines/linkage.tsv", &linkage_tsv(x.view(), self.cfg.cluster.linkage))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

fn stage_error(stage: Stage, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("stage {}: {m}", stage.name())),
        Error::Config(m) => Error::Config(format!("stage {}: {m}", stage.name())),
        other => other,
    }
}

/// Validate, then run every stage in order.
pub fn run(cfg: PipelineConfig, resume: bool) -> Result<PathBuf> {
    let mut r = Run::new(cfg)?;
    r.stages(&Stage::ALL, resume)?;
    Ok(r.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"seed": 3, "input": {"synthetic": {"preset": "homogeneous"}}}"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = PipelineConfig::from_json_str(MINIMAL, "").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.archs().unwrap()[0].0, "arch4");
        assert_eq!(cfg.archs().unwrap()[0].1.hidden_units, 30);
        assert_eq!(cfg.vae.draws, 100);
        assert_eq!(cfg.salient_sd, 1.0);
        assert_eq!(cfg.experiment.folds, 10);
        assert_eq!(cfg.partition_plan().unwrap().seed, 3);
        assert_eq!(cfg.experiment().unwrap().seed, 3);
    }

    #[test]
    fn shipped_configs_parse() {
        let planted = PipelineConfig::from_json_str(include_str!("../../../configs/planted.json"), "configs").unwrap();
        planted.validate().unwrap();
        assert_eq!(planted.out_dir(), Path::new("configs/../out/planted"));
        let gmsc = PipelineConfig::from_json_str(include_str!("../../../configs/give_me_some_credit.json"), "").unwrap();
        assert!(matches!(gmsc.input, Input::Csv { missing: MissingPolicy::MeanImpute, .. }));
    }

    #[test]
    fn seed_is_mandatory() {
        let cfg = PipelineConfig::from_json_str(r#"{"input": {"synthetic": {"preset": "homogeneous"}}}"#, "").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_and_archs_are_rejected() {
        let typo = r#"{"seed": 1, "seeed": 2, "input": {"synthetic": {"preset": "homogeneous"}}}"#;
        assert!(PipelineConfig::from_json_str(typo, "").unwrap_err().is_validation());
        let arch = r#"{"seed": 1, "input": {"synthetic": {"preset": "homogeneous"}}, "vae": {"grid": ["arch99"]}}"#;
        assert!(PipelineConfig::from_json_str(arch, "").unwrap().validate().unwrap_err().is_validation());
    }

    #[test]
    fn csv_schema_without_label_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("d.csv"), "y,a\n0,1\n1,2\n").unwrap();
        let cfg = r#"{"seed": 1, "input": {"csv": {"path": "d.csv",
            "schema": {"inline": {"label": "", "features": [{"name": "a", "kind": "continuous"}]}}}}}"#;
        let cfg = PipelineConfig::from_json_str(cfg, dir.path()).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.is_validation() && err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
        }
        assert!(Stage::parse("nope").is_err());
    }

    #[test]
    fn missing_dependency_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::synthetic(Preset::Homogeneous, 1, dir.path());
        let mut run = Run::new(cfg).unwrap();
        match run.stage(Stage::Score) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with(PARTITION_FILE) || p.ends_with(WOE_FILE)),
            other => panic!("expected a missing artifact, got {other:?}"),
        }
    }
}

//! End-to-end orchestration: load inputs, build graphs, train, evaluate and
//! write artifacts with a hashed manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::correlation::{
    accessibility_correlation, cooccurrence_counts, functionality_correlation, knn_graph, od_distributions,
    vicinity_correlation, CorrelationMatrix, MobilityCounts, RegionGraph, DEFAULT_ALPHA, DEFAULT_K,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_clustering, evaluate_popularity, write_clusters, ClusteringResult, MetricsReport, PopularityOptions,
    RegressionResult, DEFAULT_FOLDS, DEFAULT_RESTARTS,
};
use crate::geometry::{adjacency_from_polygons, annotate_features, DEFAULT_TOLERANCE};
use crate::ingest::{
    load_adjacency, load_checkins, load_labels, load_pois, load_regions, load_trips, write_region_matrix, write_text,
    AdjacencySet, CheckinVolumes, GroundTruthLabels, PoiRecord, RegionRegistry, TripRecord,
};
use crate::kg::{
    build_kg, region_functionality_vectors, train_kg, write_region_vectors, write_triples, KgConfig, KgEpochLog,
    KgVocab, KnowledgeTriple, RegionVectorMode, TransDParams,
};
use crate::synth::{files, SynthCity};
use crate::tensor::{ParamStore, Tensor};
use crate::training::{
    fit_with, write_training_log, GraphInput, GraphKind, Model, ModelInputs, TrainingConfig, TrainingReport, Variant,
};

/// Deterministic RNG for a named component, derived from the root seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{seed}/{name}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Directory holding inputs under their default names.
    pub data_dir: PathBuf,
    pub regions: Option<PathBuf>,
    pub trips: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub polygons: Option<PathBuf>,
    pub pois: Option<PathBuf>,
    pub checkins: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub variant: String,
    pub k: usize,
    pub alpha: f64,
    pub training: TrainingConfig,
    pub kg: KgConfig,
    pub region_vectors: RegionVectorMode,
    /// Clusters for evaluation; defaults to the number of distinct labels.
    pub clusters: Option<usize>,
    pub restarts: usize,
    pub folds: usize,
    pub log1p: bool,
    /// Write `checkpoint_epoch{N}.csv` every this many epochs; 0 keeps only
    /// the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            regions: None,
            trips: None,
            adjacency: None,
            polygons: None,
            pois: None,
            checkins: None,
            labels: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            variant: "full".into(),
            k: DEFAULT_K,
            alpha: DEFAULT_ALPHA,
            training: TrainingConfig::default(),
            kg: KgConfig::default(),
            region_vectors: RegionVectorMode::default(),
            clusters: None,
            restarts: DEFAULT_RESTARTS,
            folds: DEFAULT_FOLDS,
            log1p: false,
            checkpoint_every: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    fn resolve(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.data_dir.join(default))
    }

    pub fn regions_path(&self) -> PathBuf {
        self.resolve(&self.regions, files::REGIONS)
    }
    pub fn trips_path(&self) -> PathBuf {
        self.resolve(&self.trips, files::TRIPS)
    }
    pub fn adjacency_path(&self) -> PathBuf {
        self.resolve(&self.adjacency, files::ADJACENCY)
    }
    pub fn polygons_path(&self) -> PathBuf {
        self.resolve(&self.polygons, files::POLYGONS)
    }
    pub fn pois_path(&self) -> PathBuf {
        self.resolve(&self.pois, files::POIS)
    }
    pub fn checkins_path(&self) -> PathBuf {
        self.resolve(&self.checkins, files::CHECKINS)
    }
    pub fn labels_path(&self) -> PathBuf {
        self.resolve(&self.labels, files::LABELS)
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Loaded inputs. Optional parts are absent when not needed or not present.
#[derive(Clone, Debug)]
pub struct CityData {
    pub registry: RegionRegistry,
    pub trips: Vec<TripRecord>,
    pub adjacency: Option<AdjacencySet>,
    pub pois: Option<Vec<PoiRecord>>,
    pub checkins: Option<CheckinVolumes>,
    pub labels: Option<GroundTruthLabels>,
    pub polygons: Option<Value>,
    /// Input files read, for the manifest.
    pub sources: Vec<PathBuf>,
}

impl CityData {
    pub fn from_synth(city: &SynthCity) -> Self {
        Self {
            registry: city.registry.clone(),
            trips: city.trips.clone(),
            adjacency: Some(city.adjacency.clone()),
            pois: Some(city.pois.clone()),
            checkins: Some(city.checkins.clone()),
            labels: Some(city.labels.clone()),
            polygons: Some(crate::geometry::rectangles_geojson(&city.registry, &city.rects)),
            sources: Vec::new(),
        }
    }

    /// Load what `variants` need. Adjacency comes from the edge list when
    /// present, otherwise from polygons.
    pub fn load(cfg: &PipelineConfig, variants: &[Variant]) -> Result<Self> {
        let mut sources = Vec::new();
        let mut track = |p: PathBuf| {
            sources.push(p.clone());
            p
        };
        let registry = load_regions(track(cfg.regions_path()))?;
        let trips = load_trips(track(cfg.trips_path()), &registry)?;
        let need = |g| variants.iter().any(|v| v.uses(g));
        let polygons = load_polygons_if_present(cfg)?;
        if polygons.is_some() {
            track(cfg.polygons_path());
        }
        let adjacency = if need(GraphKind::Vc) {
            let csv = cfg.adjacency_path();
            if csv.exists() || cfg.adjacency.is_some() {
                Some(load_adjacency(track(csv), &registry)?.0)
            } else {
                Some(adjacency_from_polygons(cfg.polygons_path(), &registry, DEFAULT_TOLERANCE)?)
            }
        } else {
            None
        };
        let pois = if need(GraphKind::Fc) {
            Some(load_pois(track(cfg.pois_path()), &registry)?)
        } else {
            None
        };
        let optional = |p: PathBuf| (p.exists()).then_some(p);
        let checkins = match optional(cfg.checkins_path()) {
            Some(p) => Some(load_checkins(track(p), &registry)?),
            None => None,
        };
        let labels = match optional(cfg.labels_path()) {
            Some(p) => Some(load_labels(track(p), &registry)?),
            None => None,
        };
        Ok(Self {
            registry,
            trips,
            adjacency,
            pois,
            checkins,
            labels,
            polygons,
            sources,
        })
    }

    pub fn n(&self) -> usize {
        self.registry.len()
    }
}

#[derive(Clone, Debug)]
pub struct KgArtifacts {
    pub vocab: KgVocab,
    pub triples: Vec<KnowledgeTriple>,
    pub params: TransDParams,
    pub log: Vec<KgEpochLog>,
    pub vectors: Array2<f64>,
    pub zero_poi: Vec<bool>,
}

pub fn train_knowledge_graph(data: &CityData, cfg: &PipelineConfig) -> Result<KgArtifacts> {
    let pois = data
        .pois
        .as_ref()
        .ok_or_else(|| Error::contract("functionality graph needs POI data"))?;
    let (vocab, triples) = build_kg(pois, &data.registry);
    let mut rng = substream(cfg.seed, "kg");
    let (params, log) = train_kg(&triples, &vocab, &cfg.kg, &mut rng)?;
    let (vectors, zero_poi) = region_functionality_vectors(&params, &vocab, cfg.region_vectors);
    Ok(KgArtifacts {
        vocab,
        triples,
        params,
        log,
        vectors,
        zero_poi,
    })
}

#[derive(Clone, Debug)]
pub struct Graphs {
    pub counts: MobilityCounts,
    pub ac: CorrelationMatrix,
    pub ac_graph: RegionGraph,
    pub vc: Option<(CorrelationMatrix, RegionGraph)>,
    pub fc: Option<(CorrelationMatrix, RegionGraph)>,
    pub kg: Option<KgArtifacts>,
}

pub fn build_graphs(data: &CityData, cfg: &PipelineConfig, variants: &[Variant]) -> Result<Graphs> {
    let need = |g| variants.iter().any(|v: &Variant| v.uses(g));
    let counts = cooccurrence_counts(&data.trips, data.n());
    let ac = accessibility_correlation(&od_distributions(&counts), cfg.alpha)?;
    let ac_graph = knn_graph(&ac, cfg.k)?;
    let vc = if need(GraphKind::Vc) {
        let adj = data
            .adjacency
            .as_ref()
            .ok_or_else(|| Error::contract("vicinity graph needs adjacency data"))?;
        let m = vicinity_correlation(adj);
        let g = knn_graph(&m, cfg.k)?;
        Some((m, g))
    } else {
        None
    };
    let (fc, kg) = if need(GraphKind::Fc) {
        let kg = train_knowledge_graph(data, cfg)?;
        let m = functionality_correlation(&kg.vectors);
        let g = knn_graph(&m, cfg.k)?;
        (Some((m, g)), Some(kg))
    } else {
        (None, None)
    };
    Ok(Graphs {
        counts,
        ac,
        ac_graph,
        vc,
        fc,
        kg,
    })
}

fn tensor_of(a: &Array2<f64>) -> Tensor {
    Tensor::from_array(a).expect("nonempty matrix")
}

pub fn model_inputs(graphs: &Graphs) -> ModelInputs {
    let n = graphs.ac.n();
    let counts = Tensor::from_fn(n, n, |i, j| graphs.counts.0[[i, j]] as f64);
    ModelInputs {
        n,
        ac: Some(GraphInput {
            graph: graphs.ac_graph.clone(),
            target: counts,
        }),
        vc: graphs.vc.as_ref().map(|(m, g)| GraphInput {
            graph: g.clone(),
            target: tensor_of(&m.values),
        }),
        fc: graphs.fc.as_ref().map(|(m, g)| GraphInput {
            graph: g.clone(),
            target: tensor_of(&m.values),
        }),
        kg_vectors: graphs.kg.as_ref().map(|k| tensor_of(&k.vectors)),
    }
}

pub fn build_model(graphs: &Graphs, cfg: &PipelineConfig, variant: Variant) -> Result<Model> {
    let mut rng = substream(cfg.seed, "init");
    Model::new(variant, &cfg.training, &model_inputs(graphs), &mut rng)
}

#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub embedding: Array2<f64>,
    pub report: TrainingReport,
    pub store: ParamStore,
    pub clustering: Option<ClusteringResult>,
    pub popularity: Option<RegressionResult>,
}

pub fn cluster_count(data: &CityData, cfg: &PipelineConfig) -> Option<usize> {
    cfg.clusters.or_else(|| {
        data.labels.as_ref().map(|l| {
            let mut v = l.0.clone();
            v.sort_unstable();
            v.dedup();
            v.len()
        })
    })
}

pub fn evaluate_embedding(
    data: &CityData,
    cfg: &PipelineConfig,
    embedding: &Array2<f64>,
) -> Result<(Option<ClusteringResult>, Option<RegressionResult>)> {
    let clustering = match (&data.labels, cluster_count(data, cfg)) {
        (Some(l), Some(k)) => Some(evaluate_clustering(
            embedding,
            &l.0,
            k,
            cfg.restarts,
            &mut substream(cfg.seed, "kmeans"),
        )?),
        _ => None,
    };
    let popularity = match &data.checkins {
        Some(y) => {
            let opts = PopularityOptions {
                folds: cfg.folds,
                log1p: cfg.log1p,
                ..Default::default()
            };
            Some(evaluate_popularity(embedding, &y.0, &opts, &mut substream(cfg.seed, "folds"))?)
        }
        None => None,
    };
    Ok((clustering, popularity))
}

/// Train one variant and evaluate its embedding.
pub fn run_variant(
    data: &CityData,
    graphs: &Graphs,
    cfg: &PipelineConfig,
    variant: Variant,
    on_epoch: impl FnMut(usize, &crate::training::LossBreakdown, &ParamStore) -> Result<()>,
) -> Result<VariantOutcome> {
    let mut model = build_model(graphs, cfg, variant)?;
    let report = fit_with(&mut model, on_epoch)?;
    let embedding = model.embedding()?.to_array();
    let (clustering, popularity) = evaluate_embedding(data, cfg, &embedding)?;
    Ok(VariantOutcome {
        variant,
        embedding,
        report,
        store: model.store,
        clustering,
        popularity,
    })
}

pub fn metrics_reports(variant: &str, seed: u64, c: &Option<ClusteringResult>, p: &Option<RegressionResult>) -> Vec<MetricsReport> {
    let mut out = Vec::new();
    if let Some(c) = c {
        out.push(MetricsReport::clustering(variant, seed, c));
    }
    if let Some(p) = p {
        out.push(MetricsReport::popularity(variant, seed, p));
    }
    out
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Records outputs and writes `manifest.json` with config, seed and hashes.
pub struct Artifacts {
    pub dir: PathBuf,
    outputs: Vec<String>,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, outputs: Vec::new() })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        write_text(p, text)
    }

    pub fn write_manifest(&mut self, command: &str, cfg: &PipelineConfig, inputs: &[PathBuf]) -> Result<()> {
        let mut input_hashes = BTreeMap::new();
        for p in inputs {
            input_hashes.insert(p.display().to_string(), file_sha256(p)?);
        }
        let mut output_hashes = BTreeMap::new();
        for name in &self.outputs {
            output_hashes.insert(name.clone(), file_sha256(self.dir.join(name))?);
        }
        let config: Value = serde_json::from_str(&cfg.to_json()).expect("round trip");
        let manifest = json!({
            "command": command,
            "seed": cfg.seed,
            "config": config,
            "inputs": input_hashes,
            "outputs": output_hashes,
        });
        write_text(
            self.dir.join("manifest.json"),
            &serde_json::to_string_pretty(&manifest).expect("json value serializes"),
        )
    }
}

pub fn write_graph_artifacts(art: &mut Artifacts, reg: &RegionRegistry, graphs: &Graphs) -> Result<()> {
    graphs.ac.write_csv(art.path("correlation_ac.csv"), reg)?;
    graphs.ac_graph.write_csv(art.path("graph_ac.csv"), reg)?;
    if let Some((m, g)) = &graphs.vc {
        m.write_csv(art.path("correlation_vc.csv"), reg)?;
        g.write_csv(art.path("graph_vc.csv"), reg)?;
    }
    if let Some((m, g)) = &graphs.fc {
        m.write_csv(art.path("correlation_fc.csv"), reg)?;
        g.write_csv(art.path("graph_fc.csv"), reg)?;
    }
    if let Some(kg) = &graphs.kg {
        write_kg_artifacts(art, reg, kg)?;
    }
    Ok(())
}

pub fn write_kg_artifacts(art: &mut Artifacts, reg: &RegionRegistry, kg: &KgArtifacts) -> Result<()> {
    write_triples(art.path("kg_triples.csv"), &kg.vocab, &kg.triples)?;
    write_region_vectors(art.path("kg_region_vectors.csv"), reg, &kg.vectors)?;
    let mut log = String::from("epoch,loss,max_entity_norm,max_relation_norm\n");
    for e in &kg.log {
        log.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.max_entity_norm, e.max_relation_norm));
    }
    art.write_text("kg_log.csv", &log)
}

pub fn write_cluster_artifacts(art: &mut Artifacts, data: &CityData, c: &ClusteringResult) -> Result<()> {
    write_clusters(art.path("clusters.csv"), &data.registry, &c.assignment)?;
    if let Some(doc) = &data.polygons {
        let annotated = annotate_features(doc, &data.registry, "cluster", &c.assignment);
        art.write_text(
            "clusters.geojson",
            &serde_json::to_string_pretty(&annotated).expect("json value serializes"),
        )?;
    }
    Ok(())
}

pub fn write_metrics(art: &mut Artifacts, name: &str, reports: &[MetricsReport]) -> Result<()> {
    let text = serde_json::to_string_pretty(reports).expect("reports serialize");
    art.write_text(name, &text)
}

/// Writes periodic checkpoints during training when configured.
fn checkpointer<'a>(
    art: &'a mut Artifacts,
    every: usize,
) -> impl FnMut(usize, &crate::training::LossBreakdown, &ParamStore) -> Result<()> + 'a {
    move |epoch, _, store| {
        if every > 0 && (epoch + 1) % every == 0 {
            art.write_text(&format!("checkpoint_epoch{}.csv", epoch + 1), &store.to_checkpoint_csv())?;
        }
        Ok(())
    }
}

/// Train, evaluate and write every artifact for the configured variant.
pub fn run_all(cfg: &PipelineConfig) -> Result<VariantOutcome> {
    let variant = cfg.variant()?;
    let data = CityData::load(cfg, &[variant])?;
    let graphs = build_graphs(&data, cfg, &[variant])?;
    let mut art = Artifacts::new(&cfg.out_dir)?;
    write_graph_artifacts(&mut art, &data.registry, &graphs)?;
    let outcome = run_variant(&data, &graphs, cfg, variant, checkpointer(&mut art, cfg.checkpoint_every))?;
    write_training_artifacts(&mut art, &data, &outcome)?;
    let reports = metrics_reports(variant.name(), cfg.seed, &outcome.clustering, &outcome.popularity);
    write_metrics(&mut art, "metrics.json", &reports)?;
    if let Some(c) = &outcome.clustering {
        write_cluster_artifacts(&mut art, &data, c)?;
    }
    art.write_manifest("all", cfg, &data.sources)?;
    Ok(outcome)
}

/// Correlation matrices, kNN graphs and (when needed) the KG artifacts.
pub fn run_build_graphs(cfg: &PipelineConfig) -> Result<Graphs> {
    let variant = cfg.variant()?;
    let data = CityData::load(cfg, &[variant])?;
    let graphs = build_graphs(&data, cfg, &[variant])?;
    let mut art = Artifacts::new(&cfg.out_dir)?;
    write_graph_artifacts(&mut art, &data.registry, &graphs)?;
    art.write_manifest("build-graphs", cfg, &data.sources)?;
    Ok(graphs)
}

pub fn run_train_kg(cfg: &PipelineConfig) -> Result<KgArtifacts> {
    let data = CityData::load(cfg, &[Variant::Si])?;
    let kg = train_knowledge_graph(&data, cfg)?;
    let mut art = Artifacts::new(&cfg.out_dir)?;
    write_kg_artifacts(&mut art, &data.registry, &kg)?;
    art.write_manifest("train-kg", cfg, &data.sources)?;
    Ok(kg)
}

/// Train the configured variant and write embeddings, log and checkpoints.
pub fn run_train(cfg: &PipelineConfig) -> Result<(Array2<f64>, TrainingReport)> {
    let variant = cfg.variant()?;
    let data = CityData::load(cfg, &[variant])?;
    let graphs = build_graphs(&data, cfg, &[variant])?;
    let mut model = build_model(&graphs, cfg, variant)?;
    let mut art = Artifacts::new(&cfg.out_dir)?;
    let report = fit_with(&mut model, checkpointer(&mut art, cfg.checkpoint_every))?;
    let embedding = model.embedding()?.to_array();
    write_region_matrix(art.path("embeddings.csv"), &data.registry, &embedding)?;
    write_training_log(art.path("training_log.csv"), &report.log)?;
    art.write_text("checkpoint.csv", &model.store.to_checkpoint_csv())?;
    art.write_manifest("train", cfg, &data.sources)?;
    Ok((embedding, report))
}

/// Rebuild the configured model, load `checkpoint` and write its embedding.
pub fn run_embed(cfg: &PipelineConfig, checkpoint: &Path) -> Result<Array2<f64>> {
    let variant = cfg.variant()?;
    let data = CityData::load(cfg, &[variant])?;
    let graphs = build_graphs(&data, cfg, &[variant])?;
    let mut model = build_model(&graphs, cfg, variant)?;
    let text = std::fs::read_to_string(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    model.store.load_values(&ParamStore::from_checkpoint_csv(&text)?)?;
    let embedding = model.embedding()?.to_array();
    let mut art = Artifacts::new(&cfg.out_dir)?;
    write_region_matrix(art.path("embeddings.csv"), &data.registry, &embedding)?;
    let mut sources = data.sources.clone();
    sources.push(checkpoint.to_path_buf());
    art.write_manifest("embed", cfg, &sources)?;
    Ok(embedding)
}

/// Cluster an embedding file against the ground-truth labels.
pub fn run_eval_cluster(cfg: &PipelineConfig, embeddings: &Path) -> Result<ClusteringResult> {
    let registry = load_regions(cfg.regions_path())?;
    let labels_path = cfg.labels_path();
    let labels = load_labels(&labels_path, &registry)?;
    let e = crate::ingest::load_region_matrix(embeddings, &registry)?;
    let data = CityData {
        registry,
        trips: Vec::new(),
        adjacency: None,
        pois: None,
        checkins: None,
        labels: Some(labels),
        polygons: load_polygons_if_present(cfg)?,
        sources: vec![cfg.regions_path(), labels_path, embeddings.to_path_buf()],
    };
    let (c, _) = evaluate_embedding(&data, cfg, &e)?;
    let c = c.expect("labels present");
    let mut art = Artifacts::new(&cfg.out_dir)?;
    write_metrics(&mut art, "metrics_cluster.json", &metrics_reports(&cfg.variant, cfg.seed, &Some(c.clone()), &None))?;
    write_cluster_artifacts(&mut art, &data, &c)?;
    art.write_manifest("eval-cluster", cfg, &data.sources)?;
    Ok(c)
}

/// Cross-validated Lasso popularity regression from an embedding file.
pub fn run_eval_popularity(cfg: &PipelineConfig, embeddings: &Path) -> Result<RegressionResult> {
    let registry = load_regions(cfg.regions_path())?;
    let checkins = load_checkins(cfg.checkins_path(), &registry)?;
    let e = crate::ingest::load_region_matrix(embeddings, &registry)?;
    let opts = PopularityOptions {
        folds: cfg.folds,
        log1p: cfg.log1p,
        ..Default::default()
    };
    let r = evaluate_popularity(&e, &checkins.0, &opts, &mut substream(cfg.seed, "folds"))?;
    let mut art = Artifacts::new(&cfg.out_dir)?;
    write_metrics(&mut art, "metrics_popularity.json", &metrics_reports(&cfg.variant, cfg.seed, &None, &Some(r.clone())))?;
    art.write_manifest(
        "eval-popularity",
        cfg,
        &[cfg.regions_path(), cfg.checkins_path(), embeddings.to_path_buf()],
    )?;
    Ok(r)
}

fn load_polygons_if_present(cfg: &PipelineConfig) -> Result<Option<Value>> {
    let p = cfg.polygons_path();
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?))
}

pub fn write_training_artifacts(art: &mut Artifacts, data: &CityData, o: &VariantOutcome) -> Result<()> {
    write_region_matrix(art.path("embeddings.csv"), &data.registry, &o.embedding)?;
    write_training_log(art.path("training_log.csv"), &o.report.log)?;
    art.write_text("checkpoint.csv", &o.store.to_checkpoint_csv())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub r2: Option<f64>,
}

pub fn ablation_rows(data: &CityData, graphs: &Graphs, cfg: &PipelineConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| {
            let o = run_variant(data, graphs, cfg, v, |_, _, _| Ok(()))?;
            Ok(AblationRow {
                variant: v.name().to_string(),
                nmi: o.clustering.as_ref().map(|c| c.nmi),
                ari: o.clustering.as_ref().map(|c| c.ari),
                mae: o.popularity.as_ref().map(|p| p.mae),
                rmse: o.popularity.as_ref().map(|p| p.rmse),
                r2: o.popularity.as_ref().map(|p| p.r2),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("variant,nmi,ari,mae,rmse,r2\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.variant, f(r.nmi), f(r.ari), f(r.mae), f(r.rmse), f(r.r2)));
    }
    out
}

pub fn run_ablation(cfg: &PipelineConfig) -> Result<Vec<AblationRow>> {
    let data = CityData::load(cfg, &Variant::ALL)?;
    let graphs = build_graphs(&data, cfg, &Variant::ALL)?;
    let rows = ablation_rows(&data, &graphs, cfg, &Variant::ALL)?;
    let mut art = Artifacts::new(&cfg.out_dir)?;
    art.write_text("ablation.csv", &ablation_csv(&rows))?;
    art.write_manifest("ablate", cfg, &data.sources)?;
    Ok(rows)
}

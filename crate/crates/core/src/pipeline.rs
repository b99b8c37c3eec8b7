//! File-based pipeline stages. Each stage reads its predecessors' artifacts
//! from the output directory, checks their config hashes against the current
//! configuration and writes its own artifacts next to them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{quantizer_checkpoint, recommender_checkpoint, restore_quantizer, restore_recommender, Checkpoint};
use crate::config::{PipelineConfig, Stage};
use crate::corpus::{k_core_filter, load_interactions_any, write_interactions, CorpusStats, InteractionCorpus, Split};
use crate::dedup::{sinkhorn_dedup, Move, SinkhornStats};
use crate::diagnostics::{clustering_purity, sid_report, MoveSummary, SidReport};
use crate::error::{Error, Result};
use crate::eval::{evaluate, group_report, most_popular_rankings, write_rankings_tsv, MetricsReport, PopularityGroup};
use crate::features::{load_features, FeaturePaths, FeatureSet};
use crate::quantizer::{train_quantizer, EpochLog, QuantizerModel};
use crate::recommender::{train_recommender, ItemContext, RecEpochLog, RecommenderModel};
use crate::sid::{read_sid_map, write_sid_map, SemanticId};
use crate::synth::synth_raw;
use crate::trie::build_trie;

/// Element type used by the pipeline.
pub type Real = f32;

/// Artifact locations inside one output directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.p("data.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.p("corpus.json")
    }
    pub fn categories(&self) -> PathBuf {
        self.p("categories.json")
    }
    pub fn quantizer(&self) -> PathBuf {
        self.p("quantizer.ckpt")
    }
    pub fn tokenizer_log(&self) -> PathBuf {
        self.p("tokenizer.json")
    }
    pub fn raw_sids(&self) -> PathBuf {
        self.p("sids_raw.tsv")
    }
    pub fn dedup_manifest(&self) -> PathBuf {
        self.p("dedup.json")
    }
    pub fn sids(&self) -> PathBuf {
        self.p("sids.tsv")
    }
    pub fn recommender(&self) -> PathBuf {
        self.p("recommender.ckpt")
    }
    pub fn recommender_log(&self) -> PathBuf {
        self.p("recommender.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.p("metrics.json")
    }
    pub fn recommendations(&self) -> PathBuf {
        self.p("recommendations.tsv")
    }
    pub fn report(&self) -> PathBuf {
        self.p("report.json")
    }
    pub fn report_svg(&self) -> PathBuf {
        self.p("report.svg")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn check_hash(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::HashMismatch {
            artifact: path.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_hash: String,
    /// `synth` or `prepare`.
    pub source: String,
    pub features: FeaturePaths,
    pub stats: CorpusStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerManifest {
    pub config_hash: String,
    pub log: Vec<EpochLog>,
    pub sids: SidReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DedupManifest {
    pub config_hash: String,
    pub moves: Vec<Move>,
    pub stats: Option<SinkhornStats>,
    pub summary: MoveSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommenderManifest {
    pub config_hash: String,
    pub best_epoch: usize,
    pub log: Vec<RecEpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub model: MetricsReport,
    pub most_popular: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub before_dedup: SidReport,
    pub after_dedup: SidReport,
    /// Level-1 code purity against planted categories (synthetic data only).
    pub level1_purity: Option<f64>,
    pub metrics: Option<MetricsFile>,
}

/// Everything the later stages need from the data stage.
pub struct LoadedData {
    pub manifest: DataManifest,
    pub corpus: InteractionCorpus,
    pub features: FeatureSet<Real>,
}

fn finish_data(cfg: &PipelineConfig, ws: &Workspace, source: &str, corpus: InteractionCorpus, features: FeaturePaths) -> Result<DataManifest> {
    load_features::<Real>(&features, &corpus, cfg.levels, None, None)?;
    corpus.save_json(&ws.corpus())?;
    let manifest = DataManifest {
        config_hash: cfg.stage_hash(Stage::Data, source),
        source: source.to_string(),
        features,
        stats: corpus.stats,
    };
    write_json(&ws.data_manifest(), &manifest)?;
    Ok(manifest)
}

/// Generates the planted synthetic corpus and its features.
pub fn run_synth(cfg: &PipelineConfig, ws: &Workspace) -> Result<DataManifest> {
    fs::create_dir_all(&ws.root).map_err(|e| Error::io(&ws.root, e))?;
    let data = synth_raw(&cfg.synth())?;
    let fdir = ws.root.join("features");
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    let has_text = data.raw.tag_text.is_some();
    let paths = FeaturePaths {
        content: fdir.join("content.bin"),
        collab: fdir.join("collab.bin"),
        index: fdir.join("items.txt"),
        tags: fdir.join("tags.tsv"),
        tag_embeddings: has_text.then(|| fdir.join("tag_text.bin")),
        tag_index: has_text.then(|| fdir.join("tag_text.txt")),
    };
    data.raw.write(&paths)?;
    write_interactions(&ws.root.join("interactions.tsv"), &data.interactions)?;
    let cats: BTreeMap<&String, &Vec<usize>> = data.categories.iter().collect();
    write_json(&ws.categories(), &cats)?;
    let corpus = k_core_filter(&data.interactions, cfg.k_core, cfg.max_len)?;
    finish_data(cfg, ws, "synth", corpus, paths)
}

/// K-core filters a supplied interaction log and validates its features.
pub fn run_prepare(cfg: &PipelineConfig, ws: &Workspace) -> Result<DataManifest> {
    fs::create_dir_all(&ws.root).map_err(|e| Error::io(&ws.root, e))?;
    let log = cfg
        .interactions
        .as_ref()
        .ok_or_else(|| Error::Config("`interactions` must be set for prepare".into()))?;
    require(log)?;
    let paths = cfg.feature_paths()?;
    for p in [&paths.content, &paths.collab, &paths.index, &paths.tags] {
        require(p)?;
    }
    let corpus = k_core_filter(&load_interactions_any(log)?, cfg.k_core, cfg.max_len)?;
    finish_data(cfg, ws, "prepare", corpus, paths)
}

pub fn load_data(cfg: &PipelineConfig, ws: &Workspace) -> Result<LoadedData> {
    let manifest: DataManifest = read_json(&ws.data_manifest())?;
    check_hash(&ws.data_manifest(), &manifest.config_hash, &cfg.stage_hash(Stage::Data, &manifest.source))?;
    require(&ws.corpus())?;
    let corpus = InteractionCorpus::load_json(&ws.corpus())?;
    let features = load_features(&manifest.features, &corpus, cfg.levels, None, None)?;
    Ok(LoadedData {
        manifest,
        corpus,
        features,
    })
}

pub fn run_train_tokenizer(cfg: &PipelineConfig, ws: &Workspace) -> Result<TokenizerManifest> {
    let data = load_data(cfg, ws)?;
    let trained = train_quantizer(&data.features, &cfg.quantizer(), cfg.seed)?;
    let hash = cfg.stage_hash(Stage::Tokenizer, &data.manifest.source);
    quantizer_checkpoint(&trained.model, &hash).save(&ws.quantizer())?;
    write_sid_map(&ws.raw_sids(), &data.corpus.items, &trained.sids)?;
    let manifest = TokenizerManifest {
        config_hash: hash,
        log: trained.log,
        sids: sid_report(&trained.sids, cfg.codebook_size, None)?,
    };
    write_json(&ws.tokenizer_log(), &manifest)?;
    Ok(manifest)
}

pub fn load_quantizer(cfg: &PipelineConfig, ws: &Workspace, data: &LoadedData) -> Result<QuantizerModel<Real>> {
    let ckpt = Checkpoint::<Real>::load(&ws.quantizer())?;
    ckpt.expect("quantizer", &cfg.stage_hash(Stage::Tokenizer, &data.manifest.source), &ws.quantizer())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = QuantizerModel::for_features(&cfg.quantizer(), &data.features, &mut rng)?;
    restore_quantizer(&mut model, &ckpt)?;
    Ok(model)
}

pub fn run_dedup(cfg: &PipelineConfig, ws: &Workspace) -> Result<DedupManifest> {
    let data = load_data(cfg, ws)?;
    let model = load_quantizer(cfg, ws, &data)?;
    require(&ws.raw_sids())?;
    let raw = read_sid_map(&ws.raw_sids(), &data.corpus.items)?;
    let z = model.encode_items(&data.features.content, &data.features.collab)?;
    let out = sinkhorn_dedup(&raw, &z, &data.corpus.items, &model.codebooks, &cfg.dedup())?;
    write_sid_map(&ws.sids(), &data.corpus.items, &out.sids)?;
    let manifest = DedupManifest {
        config_hash: cfg.stage_hash(Stage::Dedup, &data.manifest.source),
        summary: out.summary(),
        moves: out.moves,
        stats: out.stats,
    };
    write_json(&ws.dedup_manifest(), &manifest)?;
    Ok(manifest)
}

/// Deduplicated SIDs and the frozen per-item inputs of the recommender.
pub struct LoadedItems {
    pub sids: Vec<SemanticId>,
    pub context: ItemContext<Real>,
}

pub fn load_items(cfg: &PipelineConfig, ws: &Workspace, data: &LoadedData) -> Result<LoadedItems> {
    let quantizer = load_quantizer(cfg, ws, data)?;
    let manifest: DedupManifest = read_json(&ws.dedup_manifest())?;
    check_hash(
        &ws.dedup_manifest(),
        &manifest.config_hash,
        &cfg.stage_hash(Stage::Dedup, &data.manifest.source),
    )?;
    require(&ws.sids())?;
    let sids = read_sid_map(&ws.sids(), &data.corpus.items)?;
    let context = ItemContext::new(&data.features, &quantizer, &sids, cfg.collab_input)?;
    Ok(LoadedItems { sids, context })
}

pub fn run_train_recommender(cfg: &PipelineConfig, ws: &Workspace) -> Result<RecommenderManifest> {
    let data = load_data(cfg, ws)?;
    let items = load_items(cfg, ws, &data)?;
    let trie = build_trie(&items.sids)?;
    let trained = train_recommender(&data.corpus, &items.context, &trie, &cfg.recommender(), cfg.seed)?;
    let hash = cfg.stage_hash(Stage::Recommender, &data.manifest.source);
    let meta = serde_json::json!({ "max_len": trained.model.max_len, "best_epoch": trained.best_epoch });
    recommender_checkpoint(&trained.model, &hash, meta).save(&ws.recommender())?;
    let manifest = RecommenderManifest {
        config_hash: hash,
        best_epoch: trained.best_epoch,
        log: trained.log,
    };
    write_json(&ws.recommender_log(), &manifest)?;
    Ok(manifest)
}

pub fn run_evaluate(cfg: &PipelineConfig, ws: &Workspace) -> Result<MetricsFile> {
    let data = load_data(cfg, ws)?;
    let ckpt = Checkpoint::<Real>::load(&ws.recommender())?;
    let hash = cfg.stage_hash(Stage::Recommender, &data.manifest.source);
    ckpt.expect("recommender", &hash, &ws.recommender())?;
    let items = load_items(cfg, ws, &data)?;
    let trie = build_trie(&items.sids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = RecommenderModel::new(&cfg.recommender(), &items.context, data.corpus.max_len, &mut rng)?;
    restore_recommender(&mut model, &ckpt)?;
    let (report, rankings) = evaluate(&model, &items.context, &trie, &data.corpus, Split::Test)?;
    write_rankings_tsv(&ws.recommendations(), &data.corpus, &rankings)?;
    let pop = most_popular_rankings(&data.corpus, Split::Test)?;
    let metrics = MetricsFile {
        config_hash: hash,
        model: report,
        most_popular: group_report(&pop, &data.corpus.train_counts(), Split::Test),
    };
    write_json(&ws.metrics(), &metrics)?;
    Ok(metrics)
}

pub fn run_report(cfg: &PipelineConfig, ws: &Workspace) -> Result<Report> {
    let data = load_data(cfg, ws)?;
    require(&ws.raw_sids())?;
    let raw = read_sid_map(&ws.raw_sids(), &data.corpus.items)?;
    let dedup: DedupManifest = read_json(&ws.dedup_manifest())?;
    check_hash(
        &ws.dedup_manifest(),
        &dedup.config_hash,
        &cfg.stage_hash(Stage::Dedup, &data.manifest.source),
    )?;
    require(&ws.sids())?;
    let sids = read_sid_map(&ws.sids(), &data.corpus.items)?;
    let level1_purity = if ws.categories().exists() {
        let cats: BTreeMap<String, Vec<usize>> = read_json(&ws.categories())?;
        let labels: Option<Vec<usize>> = data
            .corpus
            .items
            .iter()
            .map(|i| cats.get(i).and_then(|c| c.first().copied()))
            .collect();
        labels.map(|labels| {
            let clusters: Vec<usize> = raw.iter().map(|s| s.codes()[0] as usize).collect();
            clustering_purity(&clusters, &labels)
        })
    } else {
        None
    };
    let metrics = if ws.metrics().exists() {
        let m: MetricsFile = read_json(&ws.metrics())?;
        check_hash(&ws.metrics(), &m.config_hash, &cfg.stage_hash(Stage::Recommender, &data.manifest.source))?;
        Some(m)
    } else {
        None
    };
    let report = Report {
        before_dedup: sid_report(&raw, cfg.codebook_size, None)?,
        after_dedup: sid_report(&sids, cfg.codebook_size, Some(dedup.summary))?,
        level1_purity,
        metrics,
    };
    write_json(&ws.report(), &report)?;
    if let Some(m) = &report.metrics {
        fs::write(ws.report_svg(), group_chart(m)).map_err(|e| Error::io(ws.report_svg(), e))?;
    }
    Ok(report)
}

/// Grouped bar chart of Recall@10 per popularity group, model vs. most-popular.
pub fn group_chart(m: &MetricsFile) -> String {
    let series = [("model", &m.model, "#3465a4"), ("most-popular", &m.most_popular, "#cc7a00")];
    let mut groups: Vec<(&str, Vec<f64>)> = vec![("Overall", series.iter().map(|s| s.1.overall.recall_10.unwrap_or(0.0)).collect())];
    for g in PopularityGroup::ALL {
        let vals = series
            .iter()
            .map(|s| {
                s.1.groups
                    .iter()
                    .find(|x| x.group == g)
                    .and_then(|x| x.metrics.recall_10)
                    .unwrap_or(0.0)
            })
            .collect();
        groups.push((g.label(), vals));
    }
    let (w, h, top, bottom, left) = (520.0, 300.0, 30.0, 40.0, 50.0);
    let plot_h = h - top - bottom;
    let max = groups.iter().flat_map(|g| g.1.iter().copied()).fold(0.0f64, f64::max).max(1e-9);
    let slot = (w - left - 10.0) / groups.len() as f64;
    let bar = slot / (series.len() as f64 + 1.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{left}\" y=\"16\">Recall@10 by popularity group</text>\n\
         <line x1=\"{left}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"4\" y=\"{ty}\">{max:.3}</text>\n",
        y0 = h - bottom,
        x1 = w - 10.0,
        ty = top + 4.0,
    );
    for (gi, (label, vals)) in groups.iter().enumerate() {
        let x0 = left + gi as f64 * slot + bar / 2.0;
        for (si, v) in vals.iter().enumerate() {
            let bh = plot_h * v / max;
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"><title>{} {:.4}</title></rect>\n",
                x0 + si as f64 * bar,
                h - bottom - bh,
                bar,
                bh,
                series[si].2,
                series[si].0,
                v
            ));
        }
        svg.push_str(&format!("<text x=\"{:.1}\" y=\"{:.1}\">{label}</text>\n", x0, h - bottom + 16.0));
    }
    for (si, s) in series.iter().enumerate() {
        let y = h - 8.0;
        let x = left + si as f64 * 120.0;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{y}\">{}</text>\n",
            y - 9.0,
            s.2,
            x + 14.0,
            s.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

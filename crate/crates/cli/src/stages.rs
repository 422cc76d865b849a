//! One function per subcommand. Each stage checks its upstream manifests,
//! skips itself when nothing changed, and records a manifest of its own.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use temporec::dataset::{
    build_dataset, load_interactions, load_item_meta, IndexedSplit, InteractionFormat, ItemMeta, SplitDataset,
    SplitManifest,
};
use temporec::encoder::{item_text, EmbeddingCache, HashEncoder, RemoteEncoder, TextEncoder};
use temporec::eval::{render_ablation, render_comparison, EvalReport, TableFormat};
use temporec::experiment::{
    catalog_embeddings, encode_profiles, generate_profiles, train_run, Embedded, Method, ProfileEmbeddings, Run,
    Trained, TrainedModel,
};
use temporec::model::{Checkpoint, ScoringVariant};
use temporec::profiles::{
    ChatBackend, ProfileBackend, ProfileCache, ProfileGenerator, PromptKind, PromptTemplate, TemplateBackend,
    TemporalProfile,
};
use temporec::synth;
use temporec::{Error, Result};

use crate::config::{ChatKind, EncoderKind, RunConfig};
use crate::manifest::{file_hash, write_file, Manifest, Workspace, TOOL_VERSION};

const SPLIT: &str = "split.json";
const ITEMS: &str = "items.jsonl";
const STATS: &str = "stats.json";
const SPLIT_MANIFEST: &str = "split_manifest.json";
const PROFILES: &str = "profiles.jsonl";
const EMBEDDINGS: &str = "embeddings.trec";
const EMBEDDINGS_INDEX: &str = "embeddings.index.json";

fn json_pretty<T: serde::Serialize>(value: &T) -> Vec<u8> {
    (serde_json::to_string_pretty(value).expect("serializable") + "\n").into_bytes()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> Vec<u8> {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect::<String>()
        .into_bytes()
}

/// Bookkeeping shared by every stage run.
struct StageRun<'a> {
    ws: &'a Workspace,
    name: &'static str,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    started: Instant,
}

impl<'a> StageRun<'a> {
    fn new(ws: &'a Workspace, cfg: &RunConfig, name: &'static str) -> Self {
        StageRun {
            ws,
            name,
            config_hash: cfg.stage_hash(name),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    /// Records upstream outputs (or external files) as this stage's inputs.
    fn consume(&mut self, files: &BTreeMap<String, String>) {
        self.inputs.extend(files.iter().map(|(k, v)| (k.clone(), v.clone())));
    }

    fn skip_if_current(&self) -> bool {
        let current = self.ws.up_to_date(self.name, &self.config_hash, &self.inputs);
        if current {
            log::info!("{}: up to date, reusing artifacts", self.name);
            println!("{}: up to date", self.name);
        }
        current
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.ws.path(rel), bytes)?;
        self.outputs.push(rel.to_owned());
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let outputs = self.ws.hash_outputs(&self.outputs)?;
        self.ws.write_manifest(&Manifest {
            stage: self.name.to_owned(),
            tool_version: TOOL_VERSION.to_owned(),
            config_hash: self.config_hash,
            inputs: self.inputs,
            outputs,
        })?;
        self.ws.write_timing(self.name, self.started.elapsed().as_secs_f64())?;
        log::info!("{}: done in {:.1}s", self.name, self.started.elapsed().as_secs_f64());
        Ok(())
    }
}

pub fn synth(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let mut stage = StageRun::new(ws, cfg, "synth");
    let data = synth::generate(&cfg.synth)?;
    let interactions = ws.resolve(&cfg.interactions);
    let items = ws.resolve(&cfg.items);
    let truth = interactions.with_file_name("truth.json");
    write_file(&interactions, data.interactions_jsonl().as_bytes())?;
    write_file(&items, data.items_jsonl().as_bytes())?;
    write_file(&truth, &json_pretty(&data.truth))?;
    let outputs: BTreeMap<String, String> = [
        (cfg.interactions.display().to_string(), file_hash(&interactions)?),
        (cfg.items.display().to_string(), file_hash(&items)?),
    ]
    .into();
    println!(
        "synth: {} users, {} items, {} interactions -> {}",
        cfg.synth.n_users,
        data.items.len(),
        data.interactions.len(),
        interactions.display()
    );
    ws.write_manifest(&Manifest {
        stage: stage.name.to_owned(),
        tool_version: TOOL_VERSION.to_owned(),
        config_hash: std::mem::take(&mut stage.config_hash),
        inputs: BTreeMap::new(),
        outputs,
    })?;
    ws.write_timing("synth", stage.started.elapsed().as_secs_f64())
}

pub fn ingest(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let mut stage = StageRun::new(ws, cfg, "ingest");
    let interactions_path = ws.resolve(&cfg.interactions);
    let items_path = ws.resolve(&cfg.items);
    let mut inputs = BTreeMap::new();
    for (configured, path) in [(&cfg.interactions, &interactions_path), (&cfg.items, &items_path)] {
        if !path.exists() {
            return Err(Error::io(
                path.as_path(),
                std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            ));
        }
        inputs.insert(configured.display().to_string(), file_hash(path)?);
    }
    stage.consume(&inputs);
    if stage.skip_if_current() {
        return Ok(());
    }
    let interactions = load_interactions(&interactions_path, InteractionFormat::from_path(&interactions_path))?;
    let meta = load_item_meta(&items_path)?;
    let (split, kept) = build_dataset(interactions, meta, cfg.min_desc_chars, &cfg.split)?;
    split.verify().map_err(Error::Data)?;
    stage.write(SPLIT, &serde_json::to_vec(&split).expect("split serializes"))?;
    stage.write(ITEMS, &jsonl(&kept))?;
    stage.write(STATS, &json_pretty(&split.stats))?;
    stage.write(SPLIT_MANIFEST, &json_pretty(&SplitManifest::from_split(&split)))?;
    println!("{}", serde_json::to_string_pretty(&split.stats).expect("stats serialize"));
    stage.finish()
}

fn load_split(ws: &Workspace) -> Result<(SplitDataset, Vec<ItemMeta>)> {
    Ok((read_json(&ws.path(SPLIT))?, load_item_meta(&ws.path(ITEMS))?))
}

fn templates(cfg: &RunConfig, ws: &Workspace) -> Result<Vec<PromptTemplate>> {
    PromptKind::ALL
        .iter()
        .map(|&k| match &cfg.prompts_dir {
            Some(dir) => PromptTemplate::from_dir(k, &ws.resolve(dir)),
            None => Ok(PromptTemplate::builtin(k)),
        })
        .collect()
}

pub fn profile(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let mut stage = StageRun::new(ws, cfg, "profile");
    let ingest = ws.require("ingest", &cfg.stage_hash("ingest"))?;
    stage.consume(&pick(&ingest.outputs, &[SPLIT, ITEMS]));
    if stage.skip_if_current() {
        return Ok(());
    }
    let (split, meta) = load_split(ws)?;
    let backend: Box<dyn ProfileBackend> = match cfg.chat {
        ChatKind::Template => Box::new(TemplateBackend),
        ChatKind::Remote => Box::new(ChatBackend::from_env(&cfg.chat_model)?),
    };
    let cache_path = ws.path("cache/profiles.jsonl");
    std::fs::create_dir_all(ws.path("cache")).map_err(|e| Error::io(ws.path("cache"), e))?;
    let cache = ProfileCache::open(&cache_path)?;
    let generator = ProfileGenerator::new(backend.as_ref(), &cache, templates(cfg, ws)?);
    let profiles = generate_profiles(&generator, &split, &meta, &cfg.experiment(0), cfg.max_in_flight)?;
    println!(
        "profile: {} users, {} backend calls ({} served from cache)",
        profiles.len(),
        generator.backend_calls(),
        profiles.len() * 3 - generator.backend_calls().min(profiles.len() * 3)
    );
    stage.write(PROFILES, &jsonl(&profiles))?;
    stage.finish()
}

fn pick(files: &BTreeMap<String, String>, keys: &[&str]) -> BTreeMap<String, String> {
    files
        .iter()
        .filter(|(k, _)| keys.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn profile_texts(p: &TemporalProfile) -> impl Iterator<Item = &String> {
    [&p.short_text, &p.long_text].into_iter().chain(p.general_text.as_ref())
}

pub fn encode(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let mut stage = StageRun::new(ws, cfg, "encode");
    let ingest = ws.require("ingest", &cfg.stage_hash("ingest"))?;
    let profile = ws.require("profile", &cfg.stage_hash("profile"))?;
    stage.consume(&pick(&ingest.outputs, &[SPLIT, ITEMS]));
    stage.consume(&profile.outputs);
    if stage.skip_if_current() {
        return Ok(());
    }
    let (split, meta) = load_split(ws)?;
    let profiles: Vec<TemporalProfile> = read_jsonl(&ws.path(PROFILES))?;
    let indexed = IndexedSplit::new(&split);
    let remote_cache = ws.path("cache/embeddings.trec");
    let remote = match cfg.encoder {
        EncoderKind::Hash => None,
        EncoderKind::Remote => {
            let mut enc = RemoteEncoder::from_env(cfg.dim)?.with_max_in_flight(cfg.max_in_flight);
            if remote_cache.exists() {
                enc = enc.with_cache(EmbeddingCache::load(&remote_cache)?)?;
            }
            Some(enc)
        }
    };
    let hash = HashEncoder::new(cfg.dim)?;
    let encoder: &dyn TextEncoder = match &remote {
        Some(enc) => enc,
        None => &hash,
    };
    let items = catalog_embeddings(&indexed, &meta, encoder)?;
    let encoded = encode_profiles(&profiles, encoder)?;
    if let Some(enc) = &remote {
        enc.cache_snapshot().save(&remote_cache, &remote_cache.with_extension("index.json"))?;
    }

    let by_id: HashMap<&str, &ItemMeta> = meta.iter().map(|m| (m.item_id.as_str(), m)).collect();
    let mut store = EmbeddingCache::new(cfg.dim);
    for (id, e) in indexed.index.item_ids.iter().zip(&items) {
        store.insert_text(&item_text(by_id[id.as_str()]), e);
    }
    for (p, e) in profiles.iter().zip(&encoded) {
        let vectors = [Some(&e.short), Some(&e.long), e.general.as_ref()];
        for (text, v) in profile_texts(p).zip(vectors.into_iter().flatten()) {
            store.insert_text(text, v);
        }
    }
    store.save(&ws.path(EMBEDDINGS), &ws.path(EMBEDDINGS_INDEX))?;
    stage.outputs.extend([EMBEDDINGS.to_owned(), EMBEDDINGS_INDEX.to_owned()]);
    println!(
        "encode: {} items and {} profiles with {} (d = {}), {} stored vectors",
        items.len(),
        profiles.len(),
        encoder.name(),
        cfg.dim,
        store.len()
    );
    stage.finish()
}

/// Rebuilds the aligned embeddings from the `ingest`, `profile` and
/// `encode` artifacts.
fn load_embedded(ws: &Workspace) -> Result<Embedded> {
    let (split, meta) = load_split(ws)?;
    let profiles: Vec<TemporalProfile> = read_jsonl(&ws.path(PROFILES))?;
    let store = EmbeddingCache::load(&ws.path(EMBEDDINGS))?;
    let stale = |what: String| Error::Stale {
        stage: "encode".into(),
        reason: format!("no stored embedding for {what}"),
    };
    let indexed = IndexedSplit::new(&split);
    let by_id: HashMap<&str, &ItemMeta> = meta.iter().map(|m| (m.item_id.as_str(), m)).collect();
    let items = indexed
        .index
        .item_ids
        .iter()
        .map(|id| {
            let m = by_id.get(id.as_str()).ok_or_else(|| stale(format!("item {id}")))?;
            store.get_text(&item_text(m)).ok_or_else(|| stale(format!("item {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if profiles.len() != indexed.n_users()
        || profiles.iter().zip(&indexed.index.user_ids).any(|(p, u)| &p.user_id != u)
    {
        return Err(Error::Stale {
            stage: "profile".into(),
            reason: "profiles do not match the split's users".into(),
        });
    }
    let lookup = |text: &str, user: &str| store.get_text(text).ok_or_else(|| stale(format!("user {user}")));
    let embedded = profiles
        .iter()
        .map(|p| {
            Ok(ProfileEmbeddings {
                short: lookup(&p.short_text, &p.user_id)?,
                long: lookup(&p.long_text, &p.user_id)?,
                general: p.general_text.as_deref().map(|g| lookup(g, &p.user_id)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Embedded::new(indexed, items, embedded)
}

fn sidecar(t: &Trained, seed: u64, ckpt: &Checkpoint, config_hash: &str) -> serde_json::Value {
    serde_json::json!({
        "method": t.name,
        "seed": seed,
        "dim": ckpt.dim,
        "hidden": ckpt.hidden,
        "epochs_run": t.log.epochs.len(),
        "best_epoch": t.log.best_epoch,
        "best_val_recall@10": t.log.best_val_recall,
        "stopped_early": t.log.stopped_early,
        "config_hash": config_hash,
        "tool_version": TOOL_VERSION,
    })
}

/// Trains every run for every seed, writing checkpoints, sidecars and
/// per-epoch logs under `prefix`.
fn train_all(
    cfg: &RunConfig,
    stage: &mut StageRun<'_>,
    data: &Embedded,
    runs: &[Run],
    prefix: &str,
) -> Result<BTreeMap<(u64, Run), Trained>> {
    let mut trained = BTreeMap::new();
    let mut timings = Vec::new();
    for &seed in &cfg.seeds {
        for &run in runs {
            let t = train_run(data, run, &cfg.experiment(seed))?;
            let ckpt = t.model.checkpoint();
            let rel = format!("{prefix}models/seed{seed}/{}.tmlp", run.name());
            let path = stage.ws.path(&rel);
            let dir = path.parent().expect("model paths have a parent");
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            ckpt.save(&path, &sidecar(&t, seed, &ckpt, &stage.config_hash))?;
            stage.outputs.push(rel.clone());
            stage.outputs.push(rel.replace(".tmlp", ".json"));
            stage.write(&format!("{prefix}logs/seed{seed}/{}.jsonl", run.name()), t.log.to_jsonl().as_bytes())?;
            timings.push(serde_json::json!({
                "seed": seed,
                "run": run.name(),
                "epoch_seconds": t.log.epochs.iter().map(|e| e.seconds).collect::<Vec<_>>(),
            }));
            println!(
                "{}: seed {seed} {:<13} best epoch {:>3} of {:>3}, val recall@10 {:.4}",
                stage.name,
                run.name(),
                t.log.best_epoch,
                t.log.epochs.len(),
                t.log.best_val_recall
            );
            trained.insert((seed, run), t);
        }
    }
    write_file(&stage.ws.path(&format!("timings/{}_epochs.json", stage.name)), &json_pretty(&timings))?;
    Ok(trained)
}

/// Writes per-seed reports and one pooled report per run, with paired
/// significance against `baseline` when it is among the runs.
fn write_reports(
    cfg: &RunConfig,
    stage: &mut StageRun<'_>,
    reports: &BTreeMap<(u64, Run), EvalReport>,
    runs: &[Run],
    baseline: Option<Run>,
    prefix: &str,
) -> Result<Vec<EvalReport>> {
    let mut pooled = Vec::new();
    for &seed in &cfg.seeds {
        let base = baseline.and_then(|b| reports.get(&(seed, b))).cloned();
        for &run in runs {
            let mut r = reports[&(seed, run)].clone();
            if let (Some(b), Some(base)) = (baseline, &base) {
                if b != run {
                    r.attach_significance(base, cfg.significance_alpha)?;
                }
            }
            stage.write(&format!("{prefix}reports/seed{seed}/{}.json", run.name()), &json_pretty(&r))?;
        }
    }
    for &run in runs {
        let per_seed: Vec<(String, EvalReport)> = cfg
            .seeds
            .iter()
            .map(|&s| (format!("seed{s}"), reports[&(s, run)].clone()))
            .collect();
        pooled.push((run, EvalReport::pooled(&per_seed)?));
    }
    let base = baseline.and_then(|b| pooled.iter().find(|(r, _)| *r == b)).map(|(_, r)| r.clone());
    let mut out = Vec::new();
    for (run, mut r) in pooled {
        if let Some(base) = &base {
            if Some(run) != baseline {
                r.attach_significance(base, cfg.significance_alpha)?;
            }
        }
        stage.write(&format!("{prefix}reports/{}.json", run.name()), &json_pretty(&r))?;
        out.push(r);
    }
    Ok(out)
}

fn method_runs(cfg: &RunConfig) -> Vec<Run> {
    cfg.methods.iter().map(|&m| Run::Method(m)).collect()
}

fn variant_runs(cfg: &RunConfig) -> Vec<Run> {
    cfg.variants.iter().map(|&v| Run::Variant(v)).collect()
}

fn require_encoded(cfg: &RunConfig, ws: &Workspace, stage: &mut StageRun<'_>) -> Result<()> {
    let ingest = ws.require("ingest", &cfg.stage_hash("ingest"))?;
    let profile = ws.require("profile", &cfg.stage_hash("profile"))?;
    let encode = ws.require("encode", &cfg.stage_hash("encode"))?;
    stage.consume(&pick(&ingest.outputs, &[SPLIT, ITEMS]));
    stage.consume(&profile.outputs);
    stage.consume(&encode.outputs);
    Ok(())
}

pub fn train(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let mut stage = StageRun::new(ws, cfg, "train");
    require_encoded(cfg, ws, &mut stage)?;
    if stage.skip_if_current() {
        return Ok(());
    }
    let data = load_embedded(ws)?;
    train_all(cfg, &mut stage, &data, &method_runs(cfg), "")?;
    stage.finish()
}

pub fn evaluate(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let mut stage = StageRun::new(ws, cfg, "evaluate");
    let train = ws.require("train", &cfg.stage_hash("train"))?;
    require_encoded(cfg, ws, &mut stage)?;
    stage.consume(&train.outputs);
    if stage.skip_if_current() {
        return Ok(());
    }
    let data = load_embedded(ws)?;
    let runs = method_runs(cfg);
    let mut reports = BTreeMap::new();
    for &seed in &cfg.seeds {
        let exp = cfg.experiment(seed);
        for &run in &runs {
            let path = ws.path(&format!("models/seed{seed}/{}.tmlp", run.name()));
            let model = TrainedModel::restore(&data, run, &exp, Checkpoint::load(&path)?)?;
            let mut report = temporec::eval::evaluate(&*model.recommender(), &data.split, &cfg.ks)?;
            report.method = run.name().to_owned();
            reports.insert((seed, run), report);
        }
    }
    let baseline = Some(Run::Method(cfg.baseline)).filter(|b| runs.contains(b));
    let pooled = write_reports(cfg, &mut stage, &reports, &runs, baseline, "")?;
    print_summary("evaluate", &pooled, cfg);
    stage.finish()
}

pub fn ablate(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let mut stage = StageRun::new(ws, cfg, "ablate");
    require_encoded(cfg, ws, &mut stage)?;
    if stage.skip_if_current() {
        return Ok(());
    }
    let data = load_embedded(ws)?;
    let runs = variant_runs(cfg);
    let trained = train_all(cfg, &mut stage, &data, &runs, "ablation/")?;
    let reports = trained
        .iter()
        .map(|(&(seed, run), t)| {
            let mut report = t.evaluate(&data.split, &cfg.ks)?;
            report.method = run.name().to_owned();
            Ok(((seed, run), report))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let full = Some(Run::Variant(ScoringVariant::Full)).filter(|f| runs.contains(f));
    let pooled = write_reports(cfg, &mut stage, &reports, &runs, full, "ablation/")?;
    print_summary("ablate", &pooled, cfg);
    stage.finish()
}

fn print_summary(stage: &str, reports: &[EvalReport], cfg: &RunConfig) {
    for r in reports {
        let metrics: Vec<String> = cfg
            .ks
            .iter()
            .map(|&k| format!("recall@{k} {:.4}", r.aggregate[&temporec::eval::recall_key(k)]))
            .collect();
        println!("{stage}: {:<13} {}", r.method, metrics.join("  "));
    }
}

pub fn report(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let mut stage = StageRun::new(ws, cfg, "report");
    let evaluated = ws.read_manifest("evaluate")?.is_some();
    let ablated = ws.read_manifest("ablate")?.is_some();
    if !evaluated && !ablated {
        return Err(Error::Stale {
            stage: "evaluate".into(),
            reason: "no evaluation or ablation reports exist yet".into(),
        });
    }
    if evaluated {
        stage.consume(&ws.require("evaluate", &cfg.stage_hash("evaluate"))?.outputs);
    }
    if ablated {
        stage.consume(&ws.require("ablate", &cfg.stage_hash("ablate"))?.outputs);
    }
    if stage.skip_if_current() {
        return Ok(());
    }
    if evaluated {
        let reports = cfg
            .methods
            .iter()
            .map(|m| read_json(&ws.path(&format!("reports/{m}.json"))))
            .collect::<Result<Vec<EvalReport>>>()?;
        let focus = Method::LlmTp.as_str();
        let baseline = cfg.baseline.as_str();
        if reports.iter().any(|r| r.method == focus) && reports.iter().any(|r| r.method == baseline) {
            let text = render_comparison(&reports, baseline, focus, TableFormat::Text)?;
            stage.write("report/comparison.txt", text.as_bytes())?;
            stage.write(
                "report/comparison.csv",
                render_comparison(&reports, baseline, focus, TableFormat::Csv)?.as_bytes(),
            )?;
            println!("{text}");
        } else {
            log::warn!("report: the comparison table needs both {focus} and {baseline}; skipped");
        }
    }
    if ablated {
        let reports = cfg
            .variants
            .iter()
            .map(|v| read_json(&ws.path(&format!("ablation/reports/{v}.json"))))
            .collect::<Result<Vec<EvalReport>>>()?;
        let full = ScoringVariant::Full.as_str();
        if reports.iter().any(|r| r.method == full) {
            let text = render_ablation(&reports, full, TableFormat::Text)?;
            stage.write("report/ablation.txt", text.as_bytes())?;
            stage.write("report/ablation.csv", render_ablation(&reports, full, TableFormat::Csv)?.as_bytes())?;
            println!("{text}");
        } else {
            log::warn!("report: the ablation table needs the full variant; skipped");
        }
    }
    stage.finish()
}

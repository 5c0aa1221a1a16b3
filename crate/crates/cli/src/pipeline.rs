//! Subcommand implementations.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use trademark_attention::dataset::{
    build_tt_manifest, generate_ptl_dataset, generate_retrieval_benchmark, generate_type_catalog, DatasetManifest,
    ImageRecord,
};
use trademark_attention::features::{
    describe, fit_method_whitening, read_store, write_store, Backbone, ConvBackbone, MethodConfig, Models, PcaWhitening,
    SoftAttention,
};
use trademark_attention::hard_attention::remove_text;
use trademark_attention::imaging::load_rgb;
use trademark_attention::retrieval::{evaluate, DescriptorIndex, EvalOptions, EvalReport};
use trademark_attention::segmenter::{train_segmenter, Segmenter};
use trademark_attention::soft_attention::{train_cam, CamModel};

use crate::config::{require, PipelineConfig};

/// Descriptors are flushed to the store after this many new images.
const EXTRACT_CHUNK: usize = 64;
/// Upper bound on images loaded to fit a whitening.
const WHITENING_IMAGES: usize = 1000;

pub fn gen_ptl(config: &PipelineConfig, out: &Path) -> Result<DatasetManifest> {
    let manifest = generate_ptl_dataset(&config.synthesis, out)?;
    println!("wrote {} PTL samples to {}", manifest.len(), out.display());
    Ok(manifest)
}

pub fn gen_types(config: &PipelineConfig, out: &Path, per_class: usize) -> Result<DatasetManifest> {
    let manifest = generate_type_catalog(&config.synthesis, per_class, out)?;
    println!("wrote {} labelled trademarks to {}", manifest.len(), out.display());
    Ok(manifest)
}

pub fn gen_bench(config: &PipelineConfig, out: &Path, identities: usize, overlays: usize) -> Result<()> {
    let written = generate_retrieval_benchmark(&config.synthesis, identities, overlays, out)?;
    println!(
        "wrote {} images and {} queries to {} (catalog.jsonl, eval.jsonl)",
        written.catalog.len(),
        written.eval.len(),
        out.display()
    );
    Ok(())
}

pub fn train_segmenter_cmd(config: &PipelineConfig) -> Result<()> {
    let ptl_path = require(&config.paths.ptl, "PTL manifest")?;
    let ptl = DatasetManifest::read(&ptl_path)?;
    let mut train = config.segmenter.clone();
    let dir = config.segmenter_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    train.log_path.get_or_insert_with(|| dir.join("train_log.jsonl"));
    let outcome = train_segmenter(&ptl, &train)?;
    outcome.model.save(&dir)?;
    match outcome.best_val_f1 {
        Some(f1) => println!(
            "segmenter saved to {} (held-out F1 {f1:.4} at epoch {}, {} steps)",
            dir.display(),
            outcome.best_epoch,
            outcome.steps
        ),
        None => println!("segmenter saved to {} ({} steps)", dir.display(), outcome.steps),
    }
    Ok(())
}

pub fn train_cam_cmd(config: &PipelineConfig) -> Result<()> {
    let catalog_path = require(&config.paths.type_catalog, "labelled type catalog")?;
    let catalog = DatasetManifest::read(&catalog_path)?;
    let split = build_tt_manifest(&catalog, config.cam.per_class, config.cam.validation_total, config.seed)?;
    let validation = (!split.validation.is_empty()).then_some(&split.validation);
    let outcome = train_cam(&split.train, validation, &config.cam.train)?;
    let dir = config.cam_dir();
    outcome.model.save(&dir)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        writeln!(log, "{}", serde_json::json!({"epoch": epoch + 1, "loss": loss}))?;
    }
    writeln!(log, "{}", serde_json::json!({"validation_accuracy": outcome.validation_accuracy}))?;
    match outcome.validation_accuracy {
        Some(acc) => println!("CAM classifier saved to {} (validation accuracy {acc:.4})", dir.display()),
        None => println!("CAM classifier saved to {}", dir.display()),
    }
    Ok(())
}

pub fn remove_text_cmd(config: &PipelineConfig, out: &Path, dump: bool) -> Result<()> {
    let input = require(&config.paths.catalog, "catalog manifest")?;
    let manifest = DatasetManifest::read(&input)?;
    let segmenter = load_segmenter(config)?;
    let images_dir = out.join("images");
    fs::create_dir_all(&images_dir).with_context(|| format!("creating {}", images_dir.display()))?;
    let debug_dir = out.join("debug");
    let results = manifest
        .records
        .par_iter()
        .map(|record| -> Result<(ImageRecord, bool)> {
            let image = load_rgb(&manifest.image_path(record))?;
            let removal = remove_text(&image, &segmenter, &config.atrha)?;
            let rel = Path::new("images").join(format!("{}.png", record.id));
            removal.image.save(out.join(&rel))?;
            if dump {
                removal.dump(&debug_dir, &record.id)?;
            }
            let mut copy = record.clone();
            copy.path = rel;
            // masks describe the original framing, not the crop
            copy.mask_path = None;
            Ok((copy, removal.fell_back))
        })
        .collect::<Result<Vec<_>>>()?;
    let fallbacks = results.iter().filter(|(_, f)| *f).count();
    let records = results.into_iter().map(|(r, _)| r).collect();
    let cleaned = DatasetManifest::new(manifest.purpose, records).with_base_dir(out);
    cleaned.write(&out.join("manifest.jsonl"))?;
    println!(
        "text removed from {} images into {}; {fallbacks} fell back to the original",
        cleaned.len(),
        out.display()
    );
    Ok(())
}

fn load_segmenter(config: &PipelineConfig) -> Result<Segmenter> {
    let dir = config.segmenter_dir();
    Segmenter::load(&dir).with_context(|| format!("loading segmenter from {} (run train-segmenter first)", dir.display()))
}

fn backbone(config: &PipelineConfig) -> Result<Arc<dyn Backbone>> {
    Ok(match &config.paths.backbone_weights {
        Some(path) => Arc::new(ConvBackbone::vgg16(path)?),
        None => {
            warn!("no backbone weights configured, using the seeded random stub");
            Arc::new(ConvBackbone::random_stub(config.seed)?)
        }
    })
}

/// Everything `method` needs except the whitening.
fn base_models(config: &PipelineConfig, method: &MethodConfig) -> Result<Models> {
    let mut models = Models::new(backbone(config)?);
    models.atrha = config.atrha.clone();
    models.camsa = config.camsa.clone();
    models.ssa_offset = config.features.ssa_offset;
    models.rmac_scales = config.features.rmac_scales;
    if method.hard_attention || method.soft_attention == SoftAttention::Ssa {
        models.segmenter = Some(Arc::new(load_segmenter(config)?));
    }
    if method.soft_attention == SoftAttention::Camsa {
        let dir = config.cam_dir();
        let cam = CamModel::load(&dir)
            .with_context(|| format!("loading CAM classifier from {} (run train-cam first)", dir.display()))?;
        models.cam = Some(Arc::new(cam));
    }
    Ok(models)
}

/// Loads the method's whitening, fitting and saving it first when `fit` is
/// set and none exists.
fn attach_whitening(config: &PipelineConfig, method: &MethodConfig, models: &mut Models, fit: bool) -> Result<()> {
    if !method.whitening {
        return Ok(());
    }
    // keyed by the models it was fitted through, so retraining refits it
    let path = config.whitening_path(method, &cache_key(config, method, models)?);
    if !path.exists() {
        if !fit {
            bail!("no whitening at {} (run extract first)", path.display());
        }
        let source = match &config.paths.whitening_set {
            Some(_) => require(&config.paths.whitening_set, "whitening set")?,
            None => require(&config.paths.catalog, "catalog manifest")?,
        };
        let manifest = DatasetManifest::read(&source)?;
        // evenly spaced subset, deterministic for a fixed manifest
        let stride = manifest.len().div_ceil(WHITENING_IMAGES).max(1);
        let records: Vec<&ImageRecord> = manifest.records.iter().step_by(stride).collect();
        let images = records
            .par_iter()
            .map(|r| Ok(load_rgb(&manifest.image_path(r))?))
            .collect::<Result<Vec<_>>>()?;
        let dims = config.features.whitening_dims.min(models.backbone.spec().trunk.out_channels());
        info!("fitting {dims}-d whitening on {} images", images.len());
        let pca = fit_method_whitening(&images, method, models, dims, config.features.whitening_samples, config.seed)?;
        fs::create_dir_all(&config.paths.models)?;
        pca.save(&path)?;
    }
    models.whitening = Some(Arc::new(PcaWhitening::load(&path)?));
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of every model and parameter that shapes `method`'s
/// descriptors, so retraining anything invalidates the cache.
fn cache_key(config: &PipelineConfig, method: &MethodConfig, models: &Models) -> Result<String> {
    let mut h = Sha256::new();
    h.update(method.tag().as_bytes());
    h.update(models.backbone.checksum()?.as_bytes());
    h.update(serde_json::to_vec(models.backbone.spec())?);
    if let Some(seg) = &models.segmenter {
        h.update(seg.checksum()?.as_bytes());
        h.update(serde_json::to_vec(&config.atrha)?);
        h.update(config.features.ssa_offset.to_le_bytes());
    }
    if let Some(cam) = &models.cam {
        h.update(cam.checksum()?.as_bytes());
        h.update(serde_json::to_vec(&config.camsa)?);
    }
    if let Some(pca) = &models.whitening {
        h.update(serde_json::to_vec(pca.as_ref())?);
        h.update(config.features.rmac_scales.to_le_bytes());
    }
    Ok(hex(&h.finalize()[..8]))
}

/// Advisory lock on a cache directory, released on drop.
pub struct CacheLock {
    path: PathBuf,
}

impl CacheLock {
    pub fn acquire(cache_root: &Path) -> Result<Self> {
        fs::create_dir_all(cache_root).with_context(|| format!("creating {}", cache_root.display()))?;
        let path = cache_root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                writeln!(file, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "cache {} is in use by another run (remove {} if it is stale)",
                cache_root.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Store location for `method` under the current models.
fn store_path(config: &PipelineConfig, method: &MethodConfig, models: &Models) -> Result<PathBuf> {
    Ok(config
        .paths
        .cache
        .join(format!("{}-{}", method.tag(), cache_key(config, method, models)?))
        .join("descriptors.bin"))
}

/// Describes every catalog image not yet in the store. Returns the store
/// path and how many images were computed in this run.
pub fn extract_cmd(config: &PipelineConfig) -> Result<(PathBuf, usize)> {
    let method = config.method;
    method.validate()?;
    let catalog_path = require(&config.paths.catalog, "catalog manifest")?;
    let manifest = DatasetManifest::read(&catalog_path)?;
    let mut models = base_models(config, &method)?;
    attach_whitening(config, &method, &mut models, true)?;

    let _lock = CacheLock::acquire(&config.paths.cache)?;
    let path = store_path(config, &method, &models)?;
    fs::create_dir_all(path.parent().expect("store has a parent"))?;
    let tag = method.tag();
    let (mut ids, mut values, mut dim) = if path.exists() {
        let stored = read_store(&path)?;
        if stored.tag != tag {
            bail!("store {} holds {} descriptors, expected {tag}", path.display(), stored.tag);
        }
        (stored.ids, stored.values, Some(stored.dim))
    } else {
        (Vec::new(), Vec::new(), None)
    };
    let done: HashSet<String> = ids.iter().cloned().collect();
    let todo: Vec<&ImageRecord> = manifest.records.iter().filter(|r| !done.contains(&r.id)).collect();
    info!("{tag}: {} cached, {} to describe", done.len(), todo.len());

    for chunk in todo.chunks(EXTRACT_CHUNK) {
        let described = chunk
            .par_iter()
            .map(|r| {
                let image = load_rgb(&manifest.image_path(r))?;
                let d = describe(&image, &method, &models).with_context(|| format!("describing {}", r.id))?;
                if d.zero {
                    warn!("{} produced an all-zero descriptor", r.id);
                }
                Ok((r.id.clone(), d.values))
            })
            .collect::<Result<Vec<_>>>()?;
        for (id, v) in described {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                bail!("descriptor of {id} has {} values, expected {d}", v.len());
            }
            ids.push(id);
            values.extend(v);
        }
        write_store(&path, &tag, dim.unwrap_or(0), &ids, &values)?;
        info!("{tag}: {} / {} stored", ids.len(), manifest.len());
    }

    // final order follows the catalog; ids no longer in it are dropped
    let d = dim.unwrap_or(0);
    let position: std::collections::HashMap<&str, usize> =
        ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut ordered_ids = Vec::with_capacity(manifest.len());
    let mut ordered = Vec::with_capacity(manifest.len() * d);
    for r in &manifest.records {
        if let Some(&i) = position.get(r.id.as_str()) {
            ordered_ids.push(r.id.clone());
            ordered.extend_from_slice(&values[i * d..(i + 1) * d]);
        }
    }
    if ordered_ids != ids {
        write_store(&path, &tag, d, &ordered_ids, &ordered)?;
    }
    println!(
        "{tag}: {} descriptors ({} new) in {}",
        ordered_ids.len(),
        todo.len(),
        path.display()
    );
    Ok((path, todo.len()))
}

pub fn evaluate_cmd(config: &PipelineConfig, store: Option<&Path>) -> Result<EvalReport> {
    let method = config.method;
    method.validate()?;
    let eval_path = require(&config.paths.eval, "evaluation manifest")?;
    let eval_manifest = DatasetManifest::read(&eval_path)?;
    let store = match store {
        Some(p) => p.to_path_buf(),
        None => {
            let mut models = base_models(config, &method)?;
            attach_whitening(config, &method, &mut models, false)?;
            store_path(config, &method, &models)?
        }
    };
    anyhow::ensure!(store.exists(), "no descriptor store at {} (run extract first)", store.display());
    let stored = read_store(&store)?;
    if stored.tag != method.tag() {
        bail!(
            "store {} holds {} descriptors but the configured method is {}",
            store.display(),
            stored.tag,
            method.tag()
        );
    }
    let index = DescriptorIndex::from_store(stored)?;
    let options = EvalOptions {
        k: config.eval.k,
        exclude_self: config.eval.exclude_self,
    };
    let report = evaluate(&eval_manifest, &index, options, serde_json::to_value(config)?)?;

    fs::create_dir_all(&config.paths.reports)
        .with_context(|| format!("creating {}", config.paths.reports.display()))?;
    let base = config.paths.reports.join(method.tag());
    fs::write(base.with_extension("txt"), report.to_table())?;
    fs::write(base.with_extension("jsonl"), report.to_jsonl()?)?;
    print!("{}", report.to_table());
    Ok(report)
}

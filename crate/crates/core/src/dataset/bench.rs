//! Synthetic figure-identity retrieval benchmark: each identity is rendered
//! once clean (the query) and several times with a caption (its relevant set).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;

use crate::dataset::ptl::sample_rng;
use crate::dataset::{DatasetManifest, ImageRecord, Purpose, SynthesisConfig, Synthesizer};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone)]
pub struct BenchmarkItem {
    pub id: String,
    pub image: RgbImage,
    /// Set on queries only.
    pub relevant: Option<BTreeSet<String>>,
}

fn identity_items(synth: &Synthesizer, seed: u64, identity: usize, overlays: usize) -> Result<Vec<BenchmarkItem>> {
    let mut rng = sample_rng(seed, identity);
    let figure = synth.random_figure(&mut rng);
    let query_id = format!("fig-{identity:05}");
    let mut items = Vec::with_capacity(overlays + 1);
    let mut relevant = BTreeSet::new();
    for j in 1..=overlays {
        let id = format!("{query_id}-t{j}");
        // a caption occasionally renders no ink at tiny canvases
        let sample = (0..8)
            .find_map(|_| synth.figure_with_caption(&mut rng, &figure).ok())
            .ok_or_else(|| Error::InvalidInput(format!("could not caption {query_id}")))?;
        relevant.insert(id.clone());
        items.push(BenchmarkItem {
            id,
            image: sample.image,
            relevant: None,
        });
    }
    items.insert(
        0,
        BenchmarkItem {
            id: query_id,
            image: synth.clean_figure(&mut rng, &figure).image,
            relevant: Some(relevant),
        },
    );
    Ok(items)
}

/// In-memory benchmark: `identities * (overlays + 1)` images, queries first
/// within each identity.
pub fn retrieval_benchmark(config: &SynthesisConfig, identities: usize, overlays: usize) -> Result<Vec<BenchmarkItem>> {
    config.validate()?;
    if identities == 0 || overlays == 0 {
        return Err(Error::InvalidInput("identities and overlays must be positive".into()));
    }
    let synth = Synthesizer::new(config.clone())?;
    let nested = (0..identities)
        .into_par_iter()
        .map(|i| identity_items(&synth, config.rng_seed, i, overlays))
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Catalog (every image) and evaluation (queries only) manifests of a
/// benchmark written to disk.
#[derive(Debug, Clone)]
pub struct BenchmarkManifests {
    pub catalog: DatasetManifest,
    pub eval: DatasetManifest,
}

/// Writes the benchmark under `out_dir` with `catalog.jsonl` and
/// `eval.jsonl` next to the images.
pub fn generate_retrieval_benchmark(
    config: &SynthesisConfig,
    identities: usize,
    overlays: usize,
    out_dir: &Path,
) -> Result<BenchmarkManifests> {
    let items = retrieval_benchmark(config, identities, overlays)?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).context(|| format!("creating {}", images_dir.display()))?;
    let records = items
        .into_par_iter()
        .map(|item| {
            let rel = Path::new("images").join(format!("{}.png", item.id));
            item.image.save(out_dir.join(&rel))?;
            let record = ImageRecord::new(item.id, rel);
            Ok(match item.relevant {
                Some(ids) => record.with_relevant(ids),
                None => record,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let queries = records.iter().filter(|r| r.relevant_ids.is_some()).cloned().collect();
    let catalog_records = records
        .into_iter()
        .map(|r| ImageRecord { relevant_ids: None, ..r })
        .collect();
    let catalog = DatasetManifest::new(Purpose::Catalog, catalog_records).with_base_dir(out_dir);
    let eval = DatasetManifest::new(Purpose::Eval, queries).with_base_dir(out_dir);
    catalog.write(&out_dir.join("catalog.jsonl"))?;
    eval.write(&out_dir.join("eval.jsonl"))?;
    Ok(BenchmarkManifests { catalog, eval })
}

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::ptl::sample_rng;
use crate::dataset::{
    DatasetManifest, ImageRecord, Purpose, SynthesisConfig, Synthesizer, TypeLabel,
};
use crate::error::{Error, IoContext, Result};

/// Renders `per_class` synthetic trademarks of each type into `out_dir` and
/// returns a labelled catalog manifest (also written to
/// `out_dir/manifest.jsonl`). Stands in for a labelled production catalog.
pub fn generate_type_catalog(
    config: &SynthesisConfig,
    per_class: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let synth = Synthesizer::new(config.clone())?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).context(|| format!("creating {}", images_dir.display()))?;
    let records = (0..per_class * 3)
        .into_par_iter()
        .map(|index| {
            let label = TypeLabel::ALL[index % 3];
            let mut rng = sample_rng(config.rng_seed, index);
            let sample = synth.trademark(&mut rng, label)?;
            let id = format!("tt-{index:06}");
            let rel = Path::new("images").join(format!("{id}.png"));
            sample.image.save(out_dir.join(&rel))?;
            Ok(ImageRecord::new(id, rel).with_label(label))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(Purpose::Catalog, records).with_base_dir(out_dir);
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Balanced trademark-type training set plus its held-out validation set.
#[derive(Debug, Clone)]
pub struct TtSplit {
    pub train: DatasetManifest,
    pub validation: DatasetManifest,
}

/// Draws `per_class` training records of each type and a stratified
/// validation set of `validation_total` records from what remains.
pub fn build_tt_manifest(
    catalog: &DatasetManifest,
    per_class: usize,
    validation_total: usize,
    seed: u64,
) -> Result<TtSplit> {
    if per_class == 0 {
        return Err(Error::InvalidInput("per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<&ImageRecord>> = vec![Vec::new(); 3];
    for record in &catalog.records {
        if let Some(label) = record.type_label {
            by_class[label.index()].push(record);
        }
    }
    // stratified: spread the validation budget as evenly as the classes allow
    let val_quota: Vec<usize> = (0..3)
        .map(|i| validation_total / 3 + usize::from(i < validation_total % 3))
        .collect();

    let mut train = Vec::with_capacity(per_class * 3);
    let mut validation = Vec::with_capacity(validation_total);
    for (class, pool) in by_class.iter_mut().enumerate() {
        let need = per_class + val_quota[class];
        if pool.len() < need {
            return Err(Error::Insufficient(format!(
                "{} has {} labelled records, {} needed",
                TypeLabel::ALL[class],
                pool.len(),
                need
            )));
        }
        pool.shuffle(&mut rng);
        train.extend(pool[..per_class].iter().map(|r| (*r).clone()));
        validation.extend(pool[per_class..need].iter().map(|r| (*r).clone()));
    }
    train.shuffle(&mut rng);
    validation.shuffle(&mut rng);
    let base = catalog.base_dir().to_path_buf();
    Ok(TtSplit {
        train: DatasetManifest::new(Purpose::Tt, train).with_base_dir(base.clone()),
        validation: DatasetManifest::new(Purpose::Tt, validation).with_base_dir(base),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(counts: [usize; 3]) -> DatasetManifest {
        let mut records = Vec::new();
        for (label, n) in TypeLabel::ALL.into_iter().zip(counts) {
            for i in 0..n {
                records.push(
                    ImageRecord::new(format!("{label}-{i}"), format!("{i}.png")).with_label(label),
                );
            }
        }
        records.push(ImageRecord::new("unlabelled", "u.png"));
        DatasetManifest::new(Purpose::Catalog, records)
    }

    fn count(manifest: &DatasetManifest, label: TypeLabel) -> usize {
        manifest
            .records
            .iter()
            .filter(|r| r.type_label == Some(label))
            .count()
    }

    #[test]
    fn balanced_three_hundred() {
        let split = build_tt_manifest(&catalog([150, 120, 400]), 100, 0, 1).unwrap();
        assert_eq!(split.train.len(), 300);
        for label in TypeLabel::ALL {
            assert_eq!(count(&split.train, label), 100);
        }
        assert!(split.validation.is_empty());
        split.train.validate().unwrap();
    }

    #[test]
    fn validation_is_stratified_and_disjoint() {
        let split = build_tt_manifest(&catalog([50, 50, 50]), 30, 20, 4).unwrap();
        assert_eq!(split.validation.len(), 20);
        assert_eq!(count(&split.validation, TypeLabel::TextOnly), 7);
        assert_eq!(count(&split.validation, TypeLabel::FigureAndText), 6);
        let train_ids: std::collections::HashSet<_> =
            split.train.records.iter().map(|r| &r.id).collect();
        assert!(split.validation.records.iter().all(|r| !train_ids.contains(&r.id)));
    }

    #[test]
    fn zero_per_class_rejected() {
        assert!(build_tt_manifest(&catalog([5, 5, 5]), 0, 0, 0).is_err());
    }

    #[test]
    fn short_class_rejected() {
        let err = build_tt_manifest(&catalog([100, 99, 100]), 100, 0, 0).unwrap_err();
        assert!(matches!(err, Error::Insufficient(_)));
    }
}

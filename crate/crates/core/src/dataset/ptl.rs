use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::synth::{diff_mask, Synthesizer};
use crate::dataset::{DatasetManifest, ImageRecord, Purpose, SynthesisConfig, TypeLabel};
use crate::error::{IoContext, Result};
use crate::mask::PixelMask;

/// A pixel-level text-localisation training pair. `pre_text` is the
/// composite before any glyph was drawn; `mask` marks every pixel whose
/// normalised difference from it reaches the mask threshold.
#[derive(Debug, Clone)]
pub struct PtlSample {
    pub image: RgbImage,
    pub pre_text: RgbImage,
    pub mask: PixelMask,
}

pub fn generate_ptl_sample(rng: &mut impl Rng, synth: &Synthesizer) -> Result<PtlSample> {
    let config = synth.config();
    let (pre_text, image) = if rng.random_bool(config.trademark_probability as f64) {
        let label = TypeLabel::ALL[rng.random_range(0..3)];
        let sample = synth.trademark(rng, label)?;
        (sample.pre_text, sample.image)
    } else {
        synth.scatter(rng)?
    };
    let mask = diff_mask(&pre_text, &image);
    Ok(PtlSample {
        image,
        pre_text,
        mask,
    })
}

/// Independent generator stream for sample `index`.
pub(crate) fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Writes `config.count` image/mask pairs under `out_dir` plus
/// `out_dir/manifest.jsonl`, and returns the manifest.
pub fn generate_ptl_dataset(config: &SynthesisConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let synth = Synthesizer::new(config.clone())?;
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    for dir in [&images_dir, &masks_dir] {
        fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    }
    let records = (0..config.count)
        .into_par_iter()
        .map(|index| {
            let mut rng = sample_rng(config.rng_seed, index);
            let sample = generate_ptl_sample(&mut rng, &synth)?;
            let id = format!("ptl-{index:06}");
            let image_rel = Path::new("images").join(format!("{id}.png"));
            let mask_rel = Path::new("masks").join(format!("{id}.png"));
            sample.image.save(out_dir.join(&image_rel))?;
            sample.mask.save(&out_dir.join(&mask_rel))?;
            Ok(ImageRecord::new(id, image_rel).with_mask(mask_rel))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(Purpose::Ptl, records).with_base_dir(out_dir);
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::MASK_THRESHOLD;
    use crate::error::Error;
    use crate::imaging::channel_distance;

    fn small_config() -> SynthesisConfig {
        SynthesisConfig {
            count: 10,
            canvas: 64,
            rng_seed: 42,
            ..SynthesisConfig::default()
        }
    }

    #[test]
    fn zero_text_items_give_empty_mask() {
        let synth = Synthesizer::new(SynthesisConfig {
            text_items: (0, 0),
            trademark_probability: 0.0,
            ..small_config()
        })
        .unwrap();
        let mut rng = sample_rng(1, 0);
        for _ in 0..5 {
            let sample = generate_ptl_sample(&mut rng, &synth).unwrap();
            assert_eq!(sample.mask.text_count(), 0);
            assert_eq!(sample.image, sample.pre_text);
        }
    }

    #[test]
    fn mask_agrees_with_layer_difference() {
        let synth = Synthesizer::new(small_config()).unwrap();
        let mut rng = sample_rng(7, 3);
        for _ in 0..20 {
            let s = generate_ptl_sample(&mut rng, &synth).unwrap();
            for (x, y, p) in s.image.enumerate_pixels() {
                let d = channel_distance(*p, *s.pre_text.get_pixel(x, y));
                assert_eq!(s.mask.is_text(x, y), d >= MASK_THRESHOLD, "pixel ({x},{y}) d={d}");
            }
        }
    }

    #[test]
    fn zero_count_is_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthesisConfig {
            count: 0,
            ..small_config()
        };
        assert!(matches!(
            generate_ptl_dataset(&config, dir.path()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn unwritable_directory_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        assert!(generate_ptl_dataset(&small_config(), &blocker.join("sub")).is_err());
    }
}

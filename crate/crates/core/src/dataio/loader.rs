use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, AugmentPolicy};
use super::preprocess::preprocess;
use crate::error::{Error, Result};
use crate::synthgen::{sample_seed, DatasetManifest, ManifestEntry, Split};
use crate::types::{ImageSample, LabelMask, SampleMeta, NUM_CLASSES};

/// Reads an 8-bit label PNG and checks every value is a class index.
pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let arr = ndarray::Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .expect("buffer length matches dimensions");
    let mask = LabelMask::new(arr);
    mask.validate(NUM_CLASSES)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    Ok(mask)
}

/// Loads and preprocesses one manifest entry.
pub fn load_entry(manifest: &DatasetManifest, entry: &ManifestEntry, target: usize) -> Result<ImageSample> {
    let image_path = manifest.resolve(&entry.image);
    let mask_path = manifest.resolve(&entry.mask);
    let image = image::open(&image_path).map_err(|e| Error::image(&image_path, e))?;
    let mask = load_mask(&mask_path)?;
    let meta = SampleMeta {
        profile: entry.profile.clone(),
        seed: entry.seed,
        original_size: (0, 0),
    };
    preprocess(&image, &mask, target, meta)
        .map_err(|e| Error::Validation(format!("{}: {e}", image_path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoaderOptions {
    pub target: usize,
    pub shuffle: bool,
    /// Applied when set; training splits only by convention.
    pub augment: Option<AugmentPolicy>,
}

impl LoaderOptions {
    pub fn eval(target: usize) -> Self {
        LoaderOptions {
            target,
            shuffle: false,
            augment: None,
        }
    }

    pub fn train(target: usize, augment: Option<AugmentPolicy>) -> Self {
        LoaderOptions {
            target,
            shuffle: true,
            augment,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Positions within the split, in manifest order.
    pub indices: Vec<usize>,
    pub samples: Vec<ImageSample>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Batched access to one split of a manifest.
#[derive(Debug, Clone)]
pub struct SplitLoader {
    manifest: DatasetManifest,
    entries: Vec<ManifestEntry>,
    batch: usize,
    shuffle_seed: u64,
    options: LoaderOptions,
}

/// Opens a split; fails early if any referenced file is missing.
pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    batch: usize,
    shuffle_seed: u64,
    options: LoaderOptions,
) -> Result<SplitLoader> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(p) = &options.augment {
        p.validate()?;
    }
    let entries: Vec<ManifestEntry> = manifest.split(split).into_iter().cloned().collect();
    if entries.is_empty() {
        return Err(Error::Config(format!("split {} is empty", split.as_str())));
    }
    for e in &entries {
        for p in [&e.image, &e.mask] {
            let path = manifest.resolve(p);
            if !path.is_file() {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                ));
            }
        }
    }
    Ok(SplitLoader {
        manifest: manifest.clone(),
        entries,
        batch,
        shuffle_seed,
        options,
    })
}

impl SplitLoader {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_batches(&self) -> usize {
        self.entries.len().div_ceil(self.batch)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Sample order for `epoch`.
    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        if self.options.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.shuffle_seed, epoch));
            order.shuffle(&mut rng);
        }
        order
    }

    /// Loads sample `index` of the split, augmented with randomness derived only
    /// from (epoch seed, index).
    pub fn load(&self, index: usize, epoch: u64) -> Result<ImageSample> {
        let sample = load_entry(&self.manifest, &self.entries[index], self.options.target)?;
        match &self.options.augment {
            Some(policy) => {
                let epoch_seed = sample_seed(self.shuffle_seed ^ 0xA5A5_5A5A_0F0F_F0F0, epoch);
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(epoch_seed, index as u64));
                augment(&sample, &mut rng, policy)
            }
            None => Ok(sample),
        }
    }

    /// Batches for one epoch.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.order(epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(self.batch).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |indices| {
            let samples = indices
                .iter()
                .map(|&i| self.load(i, epoch))
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch { indices, samples })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, CanvasSize, DomainProfile, SplitFractions, MANIFEST_FILE};

    fn dataset(dir: &Path, count: usize) -> DatasetManifest {
        generate_dataset(
            &DomainProfile::agr567like(),
            count,
            SplitFractions::standard(),
            11,
            CanvasSize::square(64),
            dir,
        )
        .unwrap()
    }

    #[test]
    fn batch_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = dataset(dir.path(), 510);
        assert_eq!(m.split_len(Split::Test), 102);
        let loader = load_split(&m, Split::Test, 4, 0, LoaderOptions::eval(64)).unwrap();
        let sizes: Vec<usize> = loader.epoch(0).map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes.len(), 26);
        assert_eq!(*sizes.last().unwrap(), 2);
        let one = load_split(&m, Split::Val, 1, 0, LoaderOptions::eval(64)).unwrap();
        assert_eq!(one.num_batches(), 82);
    }

    #[test]
    fn shuffle_is_deterministic_and_epoch_dependent() {
        let dir = tempfile::tempdir().unwrap();
        let m = dataset(dir.path(), 20);
        let opts = LoaderOptions::train(64, Some(AugmentPolicy::default()));
        let a = load_split(&m, Split::Train, 3, 9, opts.clone()).unwrap();
        let b = load_split(&m, Split::Train, 3, 9, opts).unwrap();
        assert_eq!(a.order(0), b.order(0));
        assert_ne!(a.order(0), a.order(1));
        let xa: Vec<_> = a.epoch(2).map(|b| b.unwrap().samples).collect();
        let xb: Vec<_> = b.epoch(2).map(|b| b.unwrap().samples).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn round_trip_matches_generator() {
        let dir = tempfile::tempdir().unwrap();
        let m = dataset(dir.path(), 5);
        let reloaded = DatasetManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(reloaded.samples, m.samples);
        let e = &reloaded.samples[0];
        let s = load_entry(&reloaded, e, 64).unwrap();
        let g = crate::synthgen::generate_sample(&DomainProfile::agr567like(), CanvasSize::square(64), e.seed)
            .unwrap();
        assert_eq!(s.mask(), g.mask());
        assert_eq!(s.image(), g.image());
    }

    #[test]
    fn missing_file_error_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = dataset(dir.path(), 10);
        let victim = m.split(Split::Train)[0].mask.clone();
        std::fs::remove_file(dir.path().join(&victim)).unwrap();
        let err = load_split(&m, Split::Train, 2, 0, LoaderOptions::eval(64)).unwrap_err();
        assert!(err.to_string().contains(&victim.display().to_string()), "{err}");
    }
}

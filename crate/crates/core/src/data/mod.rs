//! Dataset handling: image files, the train/validation split, patch
//! sampling, rotation augmentation and degraded/ground-truth pairs.

mod io;
mod synthetic;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::seed;

pub use io::{load_image, read_manifest, save_image, write_manifest};
pub use synthetic::{synthetic_image, write_synthetic_dataset};

/// Patch edge lengths used for training crops.
pub const PATCH_SIZES: [usize; 3] = [64, 128, 256];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
    pub seed: u64,
    pub ratio: f64,
}

/// Seeded shuffle, then the first `ceil(ratio · n)` paths train and the rest
/// validate. The training count is kept in `1..n` so neither side is empty.
pub fn split_dataset(paths: &[PathBuf], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    let n = paths.len();
    if n < 2 {
        return Err(Error::Dataset(format!("need at least 2 images to split, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Dataset(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut shuffled = paths.to_vec();
    shuffled.shuffle(&mut seed::rng(seed));
    // guard against 0.9·10 evaluating to 9.000000000000002
    let train = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let validation = shuffled.split_off(train);
    Ok(DatasetSplit {
        train: shuffled,
        validation,
        seed,
        ratio,
    })
}

/// Square crop of edge `size` at a uniformly drawn offset.
pub fn sample_patch(image: &ImageBuffer, size: usize, rng: &mut impl Rng) -> Result<ImageBuffer> {
    let (top, left) = patch_offset(image, size, rng)?;
    image.crop(top, left, size, size)
}

fn patch_offset(image: &ImageBuffer, size: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let (h, w) = image.dims();
    if size == 0 || h < size || w < size {
        return Err(Error::Shape(format!(
            "cannot crop a {size}×{size} patch from a {h}×{w} image"
        )));
    }
    Ok((rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)))
}

/// `(decode(encode(gt, qp)), gt)`.
pub fn make_pair(gt: &ImageBuffer, codec: &dyn Codec, qp: i32) -> Result<(ImageBuffer, ImageBuffer)> {
    let coded = codec.code(gt, qp)?;
    if coded.decoded.dims() != gt.dims() {
        return Err(Error::Codec(format!(
            "{} decoded {:?} from a {:?} input",
            codec.name(),
            coded.decoded.dims(),
            gt.dims()
        )));
    }
    Ok((coded.decoded, gt.clone()))
}

/// A (degraded, ground truth) training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub degraded: ImageBuffer,
    pub target: ImageBuffer,
}

/// Source of training samples. Draws must depend only on the rng state so
/// that a seeded run is reproducible.
pub trait PairSource {
    /// Patch edge lengths this source can serve.
    fn patch_sizes(&self) -> &[usize];

    fn sample(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Result<Pair>;
}

/// Random aligned crops from pre-degraded whole images with a joint random
/// quarter-turn rotation.
///
/// Images are coded whole, as a deployed codec would code them, and the
/// rotation is applied after decoding so it never shifts the codec's block
/// grid.
#[derive(Clone, Debug)]
pub struct PatchPairSource {
    pairs: Vec<Pair>,
    sizes: Vec<usize>,
    rotate: bool,
}

impl PatchPairSource {
    pub fn new(images: &[ImageBuffer], codec: &dyn Codec, qp: i32, sizes: &[usize]) -> Result<Self> {
        let pairs = images
            .iter()
            .map(|gt| make_pair(gt, codec, qp).map(|(degraded, target)| Pair { degraded, target }))
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(pairs, sizes)
    }

    pub fn from_pairs(pairs: Vec<Pair>, sizes: &[usize]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("no training images".into()));
        }
        if sizes.is_empty() {
            return Err(Error::Dataset("no patch sizes enabled".into()));
        }
        for p in &pairs {
            if p.degraded.dims() != p.target.dims() {
                return Err(Error::Shape(format!(
                    "pair shapes differ: {:?} vs {:?}",
                    p.degraded.dims(),
                    p.target.dims()
                )));
            }
        }
        let smallest = pairs
            .iter()
            .map(|p| p.target.height().min(p.target.width()))
            .min()
            .expect("non-empty");
        let usable: Vec<usize> = sizes.iter().copied().filter(|&s| s <= smallest).collect();
        if usable.is_empty() {
            return Err(Error::Dataset(format!(
                "smallest training image edge {smallest} px is below every patch size {sizes:?}"
            )));
        }
        Ok(Self {
            pairs,
            sizes: usable,
            rotate: true,
        })
    }

    pub fn without_rotation(mut self) -> Self {
        self.rotate = false;
        self
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl PairSource for PatchPairSource {
    fn patch_sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn sample(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Result<Pair> {
        let pair = &self.pairs[rng.gen_range(0..self.pairs.len())];
        let (top, left) = patch_offset(&pair.target, size, rng)?;
        let k = if self.rotate { rng.gen_range(0..4) } else { 0 };
        Ok(Pair {
            degraded: pair.degraded.crop(top, left, size, size)?.rotate90(k),
            target: pair.target.crop(top, left, size, size)?.rotate90(k),
        })
    }
}

/// Always yields the same pair, whatever size is asked for.
#[derive(Clone, Debug)]
pub struct FixedPairSource {
    pair: Pair,
    sizes: [usize; 1],
}

impl FixedPairSource {
    pub fn new(pair: Pair) -> Result<Self> {
        if pair.degraded.dims() != pair.target.dims() {
            return Err(Error::Shape("pair shapes differ".into()));
        }
        let size = pair.target.height();
        Ok(Self { pair, sizes: [size] })
    }
}

impl PairSource for FixedPairSource {
    fn patch_sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn sample(&mut self, _size: usize, _rng: &mut ChaCha8Rng) -> Result<Pair> {
        Ok(self.pair.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{BuiltinDct, Lossless};
    use crate::metrics::psnr;

    fn paths(n: usize) -> Vec<PathBuf> {
        (0..n).map(|i| PathBuf::from(format!("img{i:02}.png"))).collect()
    }

    #[test]
    fn split_counts_and_determinism() {
        let s = split_dataset(&paths(10), 0.9, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (9, 1));
        assert_eq!(s, split_dataset(&paths(10), 0.9, 1).unwrap());
        let s = split_dataset(&paths(3), 0.5, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (2, 1));
        assert!(split_dataset(&paths(1), 0.5, 1).is_err());
        assert!(split_dataset(&paths(4), 1.0, 1).is_err());
    }

    #[test]
    fn split_partitions_input() {
        let all = paths(17);
        let s = split_dataset(&all, 0.7, 9).unwrap();
        let mut joined: Vec<_> = s.train.iter().chain(&s.validation).cloned().collect();
        joined.sort();
        assert_eq!(joined, all);
        assert!(s.train.iter().all(|p| !s.validation.contains(p)));
    }

    #[test]
    fn patch_offsets_cover_range() {
        let img = synthetic_image(65, 64, 3);
        let mut rng = seed::rng(4);
        let mut counts = [0usize; 2];
        for _ in 0..1000 {
            let p = sample_patch(&img, 64, &mut rng).unwrap();
            let top = if p == img.crop(0, 0, 64, 64).unwrap() { 0 } else { 1 };
            counts[top] += 1;
        }
        // chi-square on one degree of freedom, 1% critical value 6.635
        let chi: f64 = counts.iter().map(|&c| (c as f64 - 500.0).powi(2) / 500.0).sum();
        assert!(chi < 6.635, "{counts:?}");
        let whole = synthetic_image(64, 64, 1);
        assert_eq!(sample_patch(&whole, 64, &mut rng).unwrap(), whole);
        assert!(sample_patch(&synthetic_image(32, 32, 1), 64, &mut rng).is_err());
    }

    #[test]
    fn pairs() {
        let gt = synthetic_image(24, 24, 5);
        let (d, g) = make_pair(&gt, &Lossless, 0).unwrap();
        assert_eq!(d, gt);
        assert_eq!(g, gt);
        let (d, _) = make_pair(&gt, &BuiltinDct, 7).unwrap();
        let p = psnr(&d, &gt, 1.0).unwrap();
        assert!(p.is_finite() && p > 0.0);
    }

    #[test]
    fn patch_source_draws_aligned_crops() {
        let imgs: Vec<_> = (0..3).map(|i| synthetic_image(40, 48, i)).collect();
        let mut src = PatchPairSource::new(&imgs, &Lossless, 0, &[16, 64]).unwrap();
        assert_eq!(src.patch_sizes(), &[16]);
        let mut rng = seed::rng(0);
        for _ in 0..10 {
            let p = src.sample(16, &mut rng).unwrap();
            assert_eq!(p.degraded, p.target);
            assert_eq!(p.target.dims(), (16, 16));
        }
        assert!(PatchPairSource::new(&imgs, &Lossless, 0, &[64]).is_err());
    }
}

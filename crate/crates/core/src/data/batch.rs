use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, normalize, DataError, NormalizationStats, SamplePair};

/// One mini-batch: normalised images `B x 3 x H x W` and masks `B x 1 x H x W`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Array4<f32>,
    pub masks: Array4<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lazy sequence of batches over a slice of equally sized pairs.
pub struct Batches<'a> {
    pairs: &'a [SamplePair],
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    stats: NormalizationStats,
}

impl Batches<'_> {
    /// Sample indices in the order they will be emitted.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let (h, w) = (self.pairs[idx[0]].height(), self.pairs[idx[0]].width());
        let mut images = Array4::<f32>::zeros((idx.len(), 3, h, w));
        let mut masks = Array4::<f32>::zeros((idx.len(), 1, h, w));
        let mut ids = Vec::with_capacity(idx.len());
        for (b, &i) in idx.iter().enumerate() {
            let pair = &self.pairs[i];
            images
                .slice_mut(s![b, .., .., ..])
                .assign(&normalize(pair.image.view(), &self.stats));
            masks.slice_mut(s![b, 0, .., ..]).assign(&pair.mask.mapv(f32::from));
            ids.push(pair.id.clone());
        }
        Some(Batch { ids, images, masks })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Group `pairs` into batches of `batch_size`, keeping the final partial one.
/// With `shuffle`, the order is a permutation determined by `(seed, epoch)`.
pub fn make_batches<'a>(
    pairs: &'a [SamplePair],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
    stats: &NormalizationStats,
) -> Result<Batches<'a>, DataError> {
    if batch_size < 1 {
        return Err(DataError::Config("batch_size must be at least 1".into()));
    }
    stats.validate()?;
    if let Some(first) = pairs.first() {
        let hw = (first.height(), first.width());
        if let Some(odd) = pairs.iter().find(|p| (p.height(), p.width()) != hw) {
            return Err(DataError::Config(format!(
                "all samples in a batch stream must share one size: `{}` is {:?}, `{}` is {:?}",
                first.id,
                hw,
                odd.id,
                (odd.height(), odd.width())
            )));
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch])));
    }
    Ok(Batches {
        pairs,
        order,
        batch_size,
        cursor: 0,
        stats: *stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn pairs(n: usize) -> Vec<SamplePair> {
        (0..n)
            .map(|i| {
                let mask = Array2::from_elem((2, 2), (i % 2) as u8);
                SamplePair::new(format!("s{i}"), Array3::from_elem((2, 2, 3), i as u8), mask).unwrap()
            })
            .collect()
    }

    fn ids(batches: Batches<'_>) -> Vec<Vec<String>> {
        batches.map(|b| b.ids).collect()
    }

    #[test]
    fn sizes_keep_partial_last_batch() {
        let data = pairs(10);
        let stats = NormalizationStats::IMAGENET;
        let sizes: Vec<usize> = make_batches(&data, 4, true, 0, 0, &stats)
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn unshuffled_order_is_dataset_order() {
        let data = pairs(5);
        let stats = NormalizationStats::IMAGENET;
        let flat: Vec<String> = ids(make_batches(&data, 2, false, 3, 9, &stats).unwrap()).concat();
        assert_eq!(flat, vec!["s0", "s1", "s2", "s3", "s4"]);
    }

    #[test]
    fn shuffle_depends_on_seed_and_epoch_only() {
        let data = pairs(20);
        let stats = NormalizationStats::IMAGENET;
        let a = ids(make_batches(&data, 4, true, 1, 2, &stats).unwrap());
        assert_eq!(a, ids(make_batches(&data, 4, true, 1, 2, &stats).unwrap()));
        assert_ne!(a, ids(make_batches(&data, 4, true, 1, 3, &stats).unwrap()));
        assert_ne!(a, ids(make_batches(&data, 4, true, 2, 2, &stats).unwrap()));
    }

    #[test]
    fn tensors_have_expected_layout() {
        let data = pairs(3);
        let stats = NormalizationStats::IMAGENET;
        let batch = make_batches(&data, 3, false, 0, 0, &stats).unwrap().next().unwrap();
        assert_eq!(batch.images.dim(), (3, 3, 2, 2));
        assert_eq!(batch.masks.dim(), (3, 1, 2, 2));
        assert_eq!(batch.masks[[1, 0, 1, 1]], 1.0);
        let expected = (1.0 / 255.0 - stats.mean[2]) / stats.std[2];
        assert!((batch.images[[1, 2, 0, 0]] - expected).abs() < 1e-6);
    }

    #[test]
    fn rejects_zero_batch_and_mixed_sizes() {
        let mut data = pairs(3);
        let stats = NormalizationStats::IMAGENET;
        assert!(make_batches(&data, 0, false, 0, 0, &stats).is_err());
        data.push(SamplePair::new("big", Array3::zeros((4, 4, 3)), Array2::zeros((4, 4))).unwrap());
        assert!(make_batches(&data, 2, false, 0, 0, &stats).is_err());
    }

    proptest! {
        #[test]
        fn every_sample_appears_once_per_epoch(n in 1usize..40, bs in 1usize..9, seed: u64, epoch in 0u64..100) {
            let data = pairs(n);
            let stats = NormalizationStats::IMAGENET;
            let batches = make_batches(&data, bs, true, seed, epoch, &stats).unwrap();
            prop_assert_eq!(batches.len(), n.div_ceil(bs));
            let mut seen: Vec<String> = ids(batches).concat();
            seen.sort();
            let mut expected: Vec<String> = data.iter().map(|p| p.id.clone()).collect();
            expected.sort();
            prop_assert_eq!(seen, expected);
        }
    }
}

//! Deterministic batching with per-sample manipulation targets.

use rand::seq::SliceRandom;

use super::corpus::MultiDomainCorpus;
use super::DomainVector;
use crate::error::{Result, UfdnError};
use crate::numerics::Tensor;
use crate::rng::{self, stream};

/// One training batch. `v_c` holds the true domain vectors (one-hot domain
/// slots plus the sample's attribute bits); `v_bar` holds the manipulation
/// targets, whose domain slot is resampled uniformly over the other N-1
/// domains while attribute bits are kept.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub v_c: Tensor,
    pub v_bar: Tensor,
    pub domains: Vec<usize>,
    pub target_domains: Vec<usize>,
    pub labels: Vec<Option<usize>>,
    pub label_mask: Vec<bool>,
    pub sprite_ids: Vec<u64>,
    pub n_domains: usize,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.domains.len()
    }
}

/// Batch assembly knobs.
#[derive(Clone, Copy, Debug, Default)]
pub struct BatchOptions {
    /// When set, only samples of this domain keep their labels in
    /// `label_mask` (the unsupervised-adaptation regime).
    pub label_source_domain: Option<usize>,
}

/// Splits one epoch into batches: a seeded shuffle per `(seed, epoch)`, the
/// trailing short batch dropped. Every emitted sample carries `v_bar != v_c`.
pub fn batch_iter(
    corpus: &MultiDomainCorpus,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    opts: &BatchOptions,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || batch_size > corpus.len() {
        return Err(UfdnError::Config(format!(
            "batch_size {batch_size} invalid for corpus of {}",
            corpus.len()
        )));
    }
    if let Some(source) = opts.label_source_domain {
        if source >= corpus.n_domains {
            return Err(UfdnError::Config(format!(
                "label source domain {source} out of range for {} domains",
                corpus.n_domains
            )));
        }
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut shuffle_rng = rng::rng_for(seed, stream::SHUFFLE, epoch);
    order.shuffle(&mut shuffle_rng);
    let mut target_rng = rng::rng_for(seed, stream::TARGET_DOMAIN, epoch);

    let n = corpus.n_domains;
    let k = corpus.attr_dim;
    let (c, s) = (corpus.channels, corpus.size);
    let n_batches = corpus.len() / batch_size;
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let ids = &order[b * batch_size..(b + 1) * batch_size];
        let mut images = Vec::with_capacity(batch_size * c * s * s);
        let mut v_c = Vec::with_capacity(batch_size * (n + k));
        let mut v_bar = Vec::with_capacity(batch_size * (n + k));
        let mut domains = Vec::with_capacity(batch_size);
        let mut target_domains = Vec::with_capacity(batch_size);
        let mut labels = Vec::with_capacity(batch_size);
        let mut label_mask = Vec::with_capacity(batch_size);
        let mut sprite_ids = Vec::with_capacity(batch_size);
        for &i in ids {
            let sample = &corpus.samples[i];
            images.extend_from_slice(sample.image.data());
            let attrs: Vec<f64> = sample
                .attributes
                .as_deref()
                .unwrap_or(&[])
                .iter()
                .map(|&b| b as u8 as f64)
                .collect();
            let vc = DomainVector::one_hot(sample.domain, n)?.extend_with_attributes(&attrs)?;
            // Uniform over the N-1 other domains.
            let mut pick = (rand::Rng::random_range(&mut target_rng, 0..n - 1)) as usize;
            if pick >= sample.domain {
                pick += 1;
            }
            let vb = DomainVector::one_hot(pick, n)?.extend_with_attributes(&attrs)?;
            v_c.extend_from_slice(vc.values());
            v_bar.extend_from_slice(vb.values());
            domains.push(sample.domain);
            target_domains.push(pick);
            labels.push(sample.class_label);
            let masked = match opts.label_source_domain {
                Some(source) => sample.domain == source && sample.class_label.is_some(),
                None => sample.class_label.is_some(),
            };
            label_mask.push(masked);
            sprite_ids.push(sample.sprite_id);
        }
        batches.push(Batch {
            images: Tensor::from_vec(&[batch_size, c, s, s], images)?,
            v_c: Tensor::from_vec(&[batch_size, n + k], v_c)?,
            v_bar: Tensor::from_vec(&[batch_size, n + k], v_bar)?,
            domains,
            target_domains,
            labels,
            label_mask,
            sprite_ids,
            n_domains: n,
        });
    }
    Ok(batches)
}

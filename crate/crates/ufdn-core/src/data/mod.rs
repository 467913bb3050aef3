//! Multi-domain corpora: procedural sprites rendered once per domain, with
//! on-disk PGM/PPM + JSON-index persistence, batching, and domain-vector
//! utilities.

mod batch;
mod corpus;
pub mod image_io;
mod sprites;

pub use batch::{batch_iter, Batch, BatchOptions};
pub use corpus::{generate_corpus, generate_corpus_with, load_corpus, MultiDomainCorpus, Sample};
pub use sprites::{
    apply_domain_transform, apply_domain_transform_with, render_sprite, render_sprite_with_attrs,
    TransformParams, DOMAIN_NAMES, NUM_GLYPH_CLASSES,
};

use crate::error::{Result, UfdnError};

/// Length-(N+K) conditioning vector: N domain slots followed by K attribute
/// slots. Domain slots are one-hot at training time; any real values are
/// allowed at test time.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainVector {
    values: Vec<f64>,
    n_domains: usize,
}

impl DomainVector {
    /// One-hot domain vector with no attribute slots.
    pub fn one_hot(domain: usize, n_domains: usize) -> Result<DomainVector> {
        if domain >= n_domains {
            return Err(UfdnError::Validation(format!(
                "domain {domain} out of range for {n_domains} domains"
            )));
        }
        let mut values = vec![0.0; n_domains];
        values[domain] = 1.0;
        Ok(DomainVector { values, n_domains })
    }

    /// Arbitrary real-valued vector (test-time use).
    pub fn from_values(values: Vec<f64>, n_domains: usize) -> Result<DomainVector> {
        if values.len() < n_domains || n_domains == 0 {
            return Err(UfdnError::Validation(format!(
                "vector of length {} cannot hold {n_domains} domain slots",
                values.len()
            )));
        }
        Ok(DomainVector { values, n_domains })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn attr_dim(&self) -> usize {
        self.values.len() - self.n_domains
    }

    /// Appends K attribute bits. Only valid on a vector that has none yet.
    pub fn extend_with_attributes(&self, bits: &[f64]) -> Result<DomainVector> {
        if self.attr_dim() != 0 {
            return Err(UfdnError::Contract(format!(
                "domain vector already carries {} attribute slots",
                self.attr_dim()
            )));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(bits);
        Ok(DomainVector {
            values,
            n_domains: self.n_domains,
        })
    }

    /// Overwrites one slot with an arbitrary real value.
    pub fn set_slot(&mut self, slot: usize, value: f64) -> Result<()> {
        if slot >= self.values.len() {
            return Err(UfdnError::Validation(format!(
                "slot {slot} out of range for length {}",
                self.values.len()
            )));
        }
        self.values[slot] = value;
        Ok(())
    }
}

/// Convex combination `(1-t) * v0 + t * v1`.
pub fn interpolate_domain(v0: &DomainVector, v1: &DomainVector, t: f64) -> Result<DomainVector> {
    if v0.len() != v1.len() || v0.n_domains != v1.n_domains {
        return Err(UfdnError::Validation(format!(
            "cannot interpolate vectors of length {} and {}",
            v0.len(),
            v1.len()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(UfdnError::Validation(format!(
            "interpolation parameter {t} outside [0, 1]"
        )));
    }
    let values = v0
        .values
        .iter()
        .zip(&v1.values)
        .map(|(&a, &b)| (1.0 - t) * a + t * b)
        .collect();
    Ok(DomainVector {
        values,
        n_domains: v0.n_domains,
    })
}

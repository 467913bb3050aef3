//! Corpus generation, on-disk layout, and the cross-domain pairing index.
//!
//! A corpus directory holds an `index.json` manifest plus one PGM/PPM file
//! per sample under `images/`. Every sprite identity is rendered once per
//! domain; the pairing index is evaluation-only metadata — training batches
//! never consume paired samples jointly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image_io;
use super::sprites::{self, TransformParams};
use crate::error::{Result, UfdnError};
use crate::numerics::Tensor;
use crate::rng::{self, stream};

/// One image plus its annotations.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[C, H, W]` image with values in [0, 1].
    pub image: Tensor,
    pub domain: usize,
    pub class_label: Option<usize>,
    pub sprite_id: u64,
    pub attributes: Option<Vec<bool>>,
}

/// An in-memory corpus with its pairing index.
#[derive(Clone, Debug)]
pub struct MultiDomainCorpus {
    pub samples: Vec<Sample>,
    pub n_domains: usize,
    pub size: usize,
    pub channels: usize,
    pub attr_dim: usize,
    pairing: BTreeMap<u64, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    n_domains: usize,
    size: usize,
    channels: usize,
    attr_dim: usize,
    seed: u64,
    samples: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    domain: usize,
    class: usize,
    sprite_id: u64,
    #[serde(default)]
    attrs: Vec<u8>,
}

impl MultiDomainCorpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices of one sprite, ordered by domain, if the sprite is
    /// fully paired.
    pub fn paired(&self, sprite_id: u64) -> Option<&[usize]> {
        self.pairing.get(&sprite_id).map(|v| v.as_slice())
    }

    /// Sprite ids present in the pairing index, ascending.
    pub fn paired_sprites(&self) -> impl Iterator<Item = u64> + '_ {
        self.pairing.keys().copied()
    }

    /// Restricts the corpus to sprites matching `keep`, rebuilding the index.
    pub fn subset_by_sprites(&self, keep: impl Fn(u64) -> bool) -> MultiDomainCorpus {
        let samples: Vec<Sample> = self
            .samples
            .iter()
            .filter(|s| keep(s.sprite_id))
            .cloned()
            .collect();
        Self::assemble(samples, self.n_domains, self.size, self.channels, self.attr_dim)
    }

    fn assemble(
        samples: Vec<Sample>,
        n_domains: usize,
        size: usize,
        channels: usize,
        attr_dim: usize,
    ) -> MultiDomainCorpus {
        let mut by_sprite: BTreeMap<u64, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_sprite.entry(s.sprite_id).or_default().push((s.domain, i));
        }
        let mut pairing = BTreeMap::new();
        for (sprite, mut entries) in by_sprite {
            entries.sort_unstable();
            let domains: Vec<usize> = entries.iter().map(|&(d, _)| d).collect();
            if domains.len() == n_domains && domains.iter().enumerate().all(|(i, &d)| i == d) {
                pairing.insert(sprite, entries.into_iter().map(|(_, i)| i).collect());
            }
        }
        MultiDomainCorpus {
            samples,
            n_domains,
            size,
            channels,
            attr_dim,
            pairing,
        }
    }

    /// Checks the pairing invariant: each indexed sprite has exactly one
    /// sample per domain, with one shared class label.
    pub fn validate_pairing(&self) -> Result<()> {
        for (&sprite, indices) in &self.pairing {
            if indices.len() != self.n_domains {
                return Err(UfdnError::Validation(format!(
                    "sprite {sprite} pairs {} samples, expected {}",
                    indices.len(),
                    self.n_domains
                )));
            }
            let class = self.samples[indices[0]].class_label;
            for (d, &i) in indices.iter().enumerate() {
                let s = &self.samples[i];
                if s.sprite_id != sprite || s.domain != d || s.class_label != class {
                    return Err(UfdnError::Validation(format!(
                        "pairing entry for sprite {sprite} domain {d} is inconsistent"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Renders `n_sprites` identities in each of `n_domains` domains and writes
/// the corpus to `out_dir`.
pub fn generate_corpus(
    n_sprites: usize,
    n_domains: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<MultiDomainCorpus> {
    generate_corpus_with(n_sprites, n_domains, size, seed, 0, out_dir)
}

/// [`generate_corpus`] with `attr_dim` attribute bits per sprite (bits are
/// derived from the seed; attribute 0 renders as stroke thickness).
pub fn generate_corpus_with(
    n_sprites: usize,
    n_domains: usize,
    size: usize,
    seed: u64,
    attr_dim: usize,
    out_dir: &Path,
) -> Result<MultiDomainCorpus> {
    if n_sprites < 10 {
        return Err(UfdnError::Validation(format!(
            "need at least 10 sprites, got {n_sprites}"
        )));
    }
    if n_domains < 2 || n_domains > sprites::DOMAIN_NAMES.len() {
        return Err(UfdnError::Validation(format!(
            "n_domains must be 2..={}, got {n_domains}",
            sprites::DOMAIN_NAMES.len()
        )));
    }
    if attr_dim > 1 {
        return Err(UfdnError::Validation(
            "at most one attribute bit (stroke weight) is supported".into(),
        ));
    }
    fs::create_dir_all(out_dir.join("images"))?;

    let params = TransformParams::default();
    let mut samples = Vec::with_capacity(n_sprites * n_domains);
    let mut entries = Vec::with_capacity(n_sprites * n_domains);
    for sprite in 0..n_sprites as u64 {
        let class = (sprite % sprites::NUM_GLYPH_CLASSES as u64) as usize;
        let attrs: Vec<bool> = (0..attr_dim)
            .map(|k| rng::derive_seed(seed, stream::ATTRS, sprite * 8 + k as u64) & 1 == 1)
            .collect();
        let canvas =
            sprites::render_sprite_with_attrs(sprite, class, size, seed, &attrs)?;
        for domain in 0..n_domains {
            let texture_seed =
                rng::derive_seed(seed, stream::DOMAIN_TEXTURE, sprite * 8 + domain as u64);
            let image =
                sprites::apply_domain_transform_with(&canvas, domain, texture_seed, &params)?;
            let file = format!("images/s{sprite:06}_d{domain}.pgm");
            image_io::write_image(&out_dir.join(&file), &image)?;
            entries.push(IndexEntry {
                file,
                domain,
                class,
                sprite_id: sprite,
                attrs: attrs.iter().map(|&b| b as u8).collect(),
            });
            samples.push(Sample {
                image,
                domain,
                class_label: Some(class),
                sprite_id: sprite,
                attributes: if attr_dim == 0 { None } else { Some(attrs.clone()) },
            });
        }
    }
    let index = IndexFile {
        n_domains,
        size,
        channels: 1,
        attr_dim,
        seed,
        samples: entries,
    };
    let text = serde_json::to_string_pretty(&index)
        .map_err(|e| UfdnError::Format(format!("index serialization failed: {e}")))?;
    fs::write(out_dir.join("index.json"), text)?;

    let corpus = MultiDomainCorpus::assemble(samples, n_domains, size, 1, attr_dim);
    corpus.validate_pairing()?;
    Ok(corpus)
}

/// Loads a corpus directory written by [`generate_corpus`]. Out-of-range
/// pixels cannot occur in the byte codec, but loaded values are clamped
/// defensively and a violation is reported as a validation error.
pub fn load_corpus(dir: &Path) -> Result<MultiDomainCorpus> {
    let text = fs::read_to_string(dir.join("index.json"))?;
    let index: IndexFile = serde_json::from_str(&text)
        .map_err(|e| UfdnError::Format(format!("bad corpus index: {e}")))?;
    let mut samples = Vec::with_capacity(index.samples.len());
    for entry in &index.samples {
        let image = image_io::read_image(&dir.join(&entry.file))?;
        if image.shape() != [index.channels, index.size, index.size] {
            return Err(UfdnError::Validation(format!(
                "{}: image shape {:?} does not match corpus geometry [{}, {}, {}]",
                entry.file,
                image.shape(),
                index.channels,
                index.size,
                index.size
            )));
        }
        if entry.domain >= index.n_domains {
            return Err(UfdnError::Validation(format!(
                "{}: domain {} out of range",
                entry.file, entry.domain
            )));
        }
        samples.push(Sample {
            image,
            domain: entry.domain,
            class_label: Some(entry.class),
            sprite_id: entry.sprite_id,
            attributes: if index.attr_dim == 0 {
                None
            } else {
                Some(entry.attrs.iter().map(|&b| b != 0).collect())
            },
        });
    }
    let corpus = MultiDomainCorpus::assemble(
        samples,
        index.n_domains,
        index.size,
        index.channels,
        index.attr_dim,
    );
    corpus.validate_pairing()?;
    Ok(corpus)
}

//! Evaluation: image-quality scores for translation, classification
//! accuracy, linear probes on frozen embeddings, and embedding export.

mod probe;
mod ssim;

pub use probe::{linear_probe, ProbeReport};
pub use ssim::ssim;

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{DomainVector, MultiDomainCorpus};
use crate::error::{Result, UfdnError};
use crate::nn::UfdnModel;
use crate::numerics::{Graph, Tensor};

/// PSNR cap in dB, returned for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;

fn check_image_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(UfdnError::Dimension(format!(
            "image pair shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared per-pixel difference over all channels.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_image_pair(a, b)?;
    let n = a.numel() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `10 * log10(1 / mse)` on the [0, 1] range, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Fraction of rows whose argmax equals the label; ties break toward the
/// lowest index.
pub fn accuracy(pred_logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if pred_logits.shape().len() != 2 || pred_logits.shape()[0] != labels.len() {
        return Err(UfdnError::Dimension(format!(
            "logits {:?} do not match {} labels",
            pred_logits.shape(),
            labels.len()
        )));
    }
    let classes = pred_logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(UfdnError::Validation(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = &pred_logits.data()[r * classes..(r + 1) * classes];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Posterior means for every corpus sample, plus aligned annotations.
pub struct CorpusEmbeddings {
    /// `[M, latent_dim]` matrix of mu vectors in corpus order.
    pub mu: Tensor,
    pub domains: Vec<usize>,
    pub classes: Vec<usize>,
    pub sprite_ids: Vec<u64>,
}

/// Encodes the whole corpus with the posterior mean (no sampling).
pub fn encode_corpus_mu(model: &UfdnModel, corpus: &MultiDomainCorpus) -> Result<CorpusEmbeddings> {
    let d = model.arch.latent_dim;
    let mut mu = Vec::with_capacity(corpus.len() * d);
    let mut domains = Vec::with_capacity(corpus.len());
    let mut classes = Vec::with_capacity(corpus.len());
    let mut sprite_ids = Vec::with_capacity(corpus.len());
    let chunk = 64;
    for group in corpus.samples.chunks(chunk) {
        let mut images = Vec::with_capacity(group.len() * group[0].image.numel());
        for s in group {
            images.extend_from_slice(s.image.data());
        }
        let x = Tensor::from_vec(
            &[
                group.len(),
                model.arch.channels,
                model.arch.image_size,
                model.arch.image_size,
            ],
            images,
        )?;
        let mut g = Graph::inference();
        let bound = model.bind(&mut g, &[]);
        let lat = bound.encode(&mut g, &x)?;
        mu.extend_from_slice(lat.mu.data());
        for s in group {
            domains.push(s.domain);
            classes.push(s.class_label.unwrap_or(0));
            sprite_ids.push(s.sprite_id);
        }
    }
    Ok(CorpusEmbeddings {
        mu: Tensor::from_vec(&[corpus.len(), d], mu)?,
        domains,
        classes,
        sprite_ids,
    })
}

/// Writes `sprite_id,domain,class,mu_0..mu_{d-1}` rows for every sample.
pub fn export_embeddings(model: &UfdnModel, corpus: &MultiDomainCorpus, path: &Path) -> Result<()> {
    let emb = encode_corpus_mu(model, corpus)?;
    let d = model.arch.latent_dim;
    let mut out = String::from("sprite_id,domain,class");
    for i in 0..d {
        out.push_str(&format!(",mu_{i}"));
    }
    out.push('\n');
    for r in 0..corpus.len() {
        out.push_str(&format!(
            "{},{},{}",
            emb.sprite_ids[r], emb.domains[r], emb.classes[r]
        ));
        for v in &emb.mu.data()[r * d..(r + 1) * d] {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Scores for one ordered domain pair, averaged over paired sprites. The
/// baseline columns score the *untranslated* source image against the same
/// ground-truth target.
#[derive(Clone, Copy, Debug)]
pub struct PairMetrics {
    pub from: usize,
    pub to: usize,
    pub count: usize,
    pub ssim: f64,
    pub mse: f64,
    pub psnr: f64,
    pub baseline_ssim: f64,
    pub baseline_mse: f64,
    pub baseline_psnr: f64,
}

/// Translation quality over every ordered domain pair.
#[derive(Clone, Debug, Default)]
pub struct TranslationReport {
    pub pairs: Vec<PairMetrics>,
    pub mean_ssim: f64,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub mean_baseline_ssim: f64,
    pub mean_baseline_mse: f64,
    pub mean_baseline_psnr: f64,
}

/// Translates one image to a target domain vector using the posterior mean.
pub fn translate_image(model: &UfdnModel, image: &Tensor, v: &DomainVector) -> Result<Tensor> {
    let mut g = Graph::inference();
    let bound = model.bind(&mut g, &[]);
    let x = g.reshape(
        image,
        &[1, model.arch.channels, model.arch.image_size, model.arch.image_size],
    )?;
    let lat = bound.encode(&mut g, &x)?;
    let vt = Tensor::from_vec(&[1, v.len()], v.values().to_vec())?;
    let out = bound.generate(&mut g, &lat.mu, &vt)?;
    // Drop the singleton batch axis.
    let shape = [
        model.arch.channels,
        model.arch.image_size,
        model.arch.image_size,
    ];
    Tensor::from_vec(&shape, out.data().to_vec())
}

/// Scores every ordered domain pair `(c -> c_bar)` over the pairing index:
/// translate the source image with the target one-hot and compare against
/// the paired ground-truth image.
pub fn evaluate_translation(
    model: &UfdnModel,
    corpus: &MultiDomainCorpus,
) -> Result<TranslationReport> {
    if corpus.paired_sprites().next().is_none() {
        return Err(UfdnError::Validation(
            "corpus has no pairing index; translation metrics need paired sprites".into(),
        ));
    }
    let n = corpus.n_domains;
    let sprites: Vec<u64> = corpus.paired_sprites().collect();
    // Translate + score each sprite independently; order is restored by
    // collecting into per-pair sums afterward.
    let per_sprite: Vec<Result<Vec<(usize, usize, f64, f64, f64, f64, f64, f64)>>> = sprites
        .par_iter()
        .map(|&sprite| {
            let indices = corpus.paired(sprite).unwrap();
            let mut rows = Vec::new();
            for from in 0..n {
                let src = &corpus.samples[indices[from]];
                let attrs: Vec<f64> = src
                    .attributes
                    .as_deref()
                    .unwrap_or(&[])
                    .iter()
                    .map(|&b| b as u8 as f64)
                    .collect();
                for to in 0..n {
                    if to == from {
                        continue;
                    }
                    let truth = &corpus.samples[indices[to]].image;
                    let v = DomainVector::one_hot(to, n)?.extend_with_attributes(&attrs)?;
                    let translated = translate_image(model, &src.image, &v)?;
                    rows.push((
                        from,
                        to,
                        ssim(&translated, truth)?,
                        mse(&translated, truth)?,
                        psnr(&translated, truth)?,
                        ssim(&src.image, truth)?,
                        mse(&src.image, truth)?,
                        psnr(&src.image, truth)?,
                    ));
                }
            }
            Ok(rows)
        })
        .collect();

    let mut sums = vec![[0.0f64; 6]; n * n];
    let mut counts = vec![0usize; n * n];
    for sprite_rows in per_sprite {
        for (from, to, s, m, p, bs, bm, bp) in sprite_rows? {
            let k = from * n + to;
            counts[k] += 1;
            let acc = &mut sums[k];
            acc[0] += s;
            acc[1] += m;
            acc[2] += p;
            acc[3] += bs;
            acc[4] += bm;
            acc[5] += bp;
        }
    }
    let mut report = TranslationReport::default();
    let mut total = [0.0f64; 6];
    let mut total_count = 0usize;
    for from in 0..n {
        for to in 0..n {
            if from == to {
                continue;
            }
            let k = from * n + to;
            let c = counts[k].max(1) as f64;
            report.pairs.push(PairMetrics {
                from,
                to,
                count: counts[k],
                ssim: sums[k][0] / c,
                mse: sums[k][1] / c,
                psnr: sums[k][2] / c,
                baseline_ssim: sums[k][3] / c,
                baseline_mse: sums[k][4] / c,
                baseline_psnr: sums[k][5] / c,
            });
            for i in 0..6 {
                total[i] += sums[k][i];
            }
            total_count += counts[k];
        }
    }
    let tc = total_count.max(1) as f64;
    report.mean_ssim = total[0] / tc;
    report.mean_mse = total[1] / tc;
    report.mean_psnr = total[2] / tc;
    report.mean_baseline_ssim = total[3] / tc;
    report.mean_baseline_mse = total[4] / tc;
    report.mean_baseline_psnr = total[5] / tc;
    Ok(report)
}

/// Per-domain classification accuracy of the auxiliary head on posterior
/// means.
pub fn uda_accuracy(model: &UfdnModel, corpus: &MultiDomainCorpus) -> Result<Vec<(usize, f64)>> {
    if model.arch.num_classes.is_none() {
        return Err(UfdnError::Config(
            "model has no auxiliary classifier".into(),
        ));
    }
    let emb = encode_corpus_mu(model, corpus)?;
    let mut g = Graph::inference();
    let bound = model.bind(&mut g, &[]);
    let logits = bound.classify_aux(&mut g, &emb.mu)?;
    let classes = model.arch.num_classes.unwrap();
    let mut out = Vec::new();
    for d in 0..corpus.n_domains {
        let rows: Vec<usize> = (0..corpus.len()).filter(|&i| emb.domains[i] == d).collect();
        if rows.is_empty() {
            continue;
        }
        let mut sub = Vec::with_capacity(rows.len() * classes);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in &rows {
            sub.extend_from_slice(&logits.data()[r * classes..(r + 1) * classes]);
            labels.push(emb.classes[r]);
        }
        let sub_logits = Tensor::from_vec(&[rows.len(), classes], sub)?;
        out.push((d, accuracy(&sub_logits, &labels)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, rng_for};

    fn img(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_for(seed, 0x1C, 0);
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| rng::uniform(&mut rng, 0.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = img(&[1, 4, 4], 1);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = Tensor::from_vec(&[1, 2, 2], vec![0.2, 0.2, 0.2, 0.2]).unwrap();
        let c = Tensor::from_vec(&[1, 2, 2], vec![0.3, 0.3, 0.3, 0.3]).unwrap();
        let v = mse(&b, &c).unwrap();
        assert!((v - 0.01).abs() < 1e-15);
        assert_eq!(v, mse(&c, &b).unwrap());
        assert!(matches!(
            mse(&a, &b),
            Err(UfdnError::Dimension(_))
        ));
    }

    #[test]
    fn psnr_examples() {
        let zero = Tensor::zeros(&[1, 10, 10]);
        let off = Tensor::full(&[1, 10, 10], 0.1);
        // mse = 0.01 -> 20 dB
        assert!((psnr(&zero, &off).unwrap() - 20.0).abs() < 1e-9);
        // identical -> cap
        assert_eq!(psnr(&zero, &zero).unwrap(), PSNR_CAP);
        // mse = 0.0001 -> 40 dB
        let tiny = Tensor::full(&[1, 10, 10], 0.01);
        assert!((psnr(&zero, &tiny).unwrap() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_mse_identity_below_cap() {
        for seed in 0..20 {
            let a = img(&[1, 8, 8], seed);
            let b = img(&[1, 8, 8], seed + 100);
            let m = mse(&a, &b).unwrap();
            let p = psnr(&a, &b).unwrap();
            if p < PSNR_CAP {
                assert_eq!(p, 10.0 * (1.0 / m).log10());
            }
        }
    }

    #[test]
    fn accuracy_examples() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.0, 5.0, 0.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(accuracy(&logits, &[1, 0]).unwrap(), 1.0);
        // All-zero logits tie-break to index 0.
        let zeros = Tensor::zeros(&[4, 10]);
        let labels = [0usize, 0, 3, 5];
        let freq0 = labels.iter().filter(|&&l| l == 0).count() as f64 / 4.0;
        assert_eq!(accuracy(&zeros, &labels).unwrap(), freq0);
        assert!(matches!(
            accuracy(&zeros, &[0, 0, 0, 10]),
            Err(UfdnError::Validation(_))
        ));
    }

    #[test]
    fn accuracy_is_permutation_invariant() {
        let mut rng = rng_for(5, 0x1D, 0);
        let logits_data = rng::normal_vec(&mut rng, 6 * 4);
        let logits = Tensor::from_vec(&[6, 4], logits_data.clone()).unwrap();
        let labels = vec![0, 1, 2, 3, 1, 2];
        let base = accuracy(&logits, &labels).unwrap();
        let perm = [5, 3, 1, 0, 4, 2];
        let mut p_data = Vec::new();
        let mut p_labels = Vec::new();
        for &i in &perm {
            p_data.extend_from_slice(&logits_data[i * 4..(i + 1) * 4]);
            p_labels.push(labels[i]);
        }
        let p_logits = Tensor::from_vec(&[6, 4], p_data).unwrap();
        assert_eq!(base, accuracy(&p_logits, &p_labels).unwrap());
    }
}

//! Loss terms and their routing onto the four parameter partitions.
//!
//! Sign conventions: every objective below is *minimized* by its owner.
//! Both discriminators minimize classification cross-entropy; the encoder
//! minimizes cross-entropy between the domain discriminator's prediction and
//! the uniform distribution (equivalently, maximizes its entropy, with
//! minimum value ln N at full confusion); the pixel GAN uses the
//! non-saturating generator form `-E[log D(fake)]`.
//!
//! Each composite builds its own graph in which exactly the partition being
//! updated is tracked; frozen partitions and detached activations enter as
//! constants, so a composite's gradient map is supported on its own
//! partition and nothing else.

use std::collections::BTreeMap;

use crate::data::Batch;
use crate::error::{Result, UfdnError};
use crate::nn::{reparameterize, BoundModel, GaussianLatent, Partition, UfdnModel};
use crate::numerics::{CeTarget, Graph, Tensor};

/// Multipliers for the individual loss terms (all default 1).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_recon: f64,
    pub w_kl: f64,
    pub w_e_adv: f64,
    pub w_g_adv: f64,
    pub w_cls: f64,
    pub w_aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_recon: 1.0,
            w_kl: 1.0,
            w_e_adv: 1.0,
            w_g_adv: 1.0,
            w_cls: 1.0,
            w_aux: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_recon,
            self.w_kl,
            self.w_e_adv,
            self.w_g_adv,
            self.w_cls,
            self.w_aux,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(UfdnError::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Every scalar evaluated in one step, plus the four composite objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub recon: f64,
    pub kl: f64,
    pub e_adv: f64,
    pub g_adv: f64,
    pub dx_adv: f64,
    pub dv: f64,
    pub cls: f64,
    pub aux: f64,
    pub e_total: f64,
    pub g_total: f64,
    pub dv_total: f64,
    pub dx_total: f64,
}

impl StepLosses {
    /// `(name, value)` pairs in the fixed log order.
    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("recon", self.recon),
            ("kl", self.kl),
            ("e_adv", self.e_adv),
            ("g_adv", self.g_adv),
            ("dx_adv", self.dx_adv),
            ("dv", self.dv),
            ("cls", self.cls),
            ("aux", self.aux),
        ]
    }
}

/// Parameter-name -> gradient, supported on exactly one composite's
/// partition(s).
pub type GradientMap = BTreeMap<String, Tensor>;

/// The four gradient maps of one step.
#[derive(Debug, Default)]
pub struct ObjectiveGrads {
    pub domain_disc: GradientMap,
    pub image_disc: GradientMap,
    /// Includes the auxiliary classifier's entries when UDA is enabled.
    pub encoder: GradientMap,
    pub generator: GradientMap,
}

// ---------------------------------------------------------------------------
// individual loss terms
// ---------------------------------------------------------------------------

/// `mean_b 0.5 * sum_d (mu^2 + exp(logvar) - logvar - 1)`, the closed-form
/// KL(q(z|x) || N(0, I)); always >= 0.
pub fn kl_divergence(g: &mut Graph, lat: &GaussianLatent) -> Result<Tensor> {
    let batch = lat.batch() as f64;
    let mu_sq = g.mul(&lat.mu, &lat.mu)?;
    let var = g.exp(&lat.logvar)?;
    let sum1 = g.add(&mu_sq, &var)?;
    let sum2 = g.sub(&sum1, &lat.logvar)?;
    let sum3 = g.add_scalar(&sum2, -1.0)?;
    let total = g.sum(&sum3, None)?;
    g.mul_scalar(&total, 0.5 / batch)
}

/// Squared Frobenius reconstruction error summed per sample, averaged over
/// the batch.
pub fn recon_loss(g: &mut Graph, xhat: &Tensor, x: &Tensor) -> Result<Tensor> {
    if xhat.shape() != x.shape() {
        return Err(UfdnError::Dimension(format!(
            "recon_loss shapes differ: {:?} vs {:?}",
            xhat.shape(),
            x.shape()
        )));
    }
    let batch = x.shape()[0] as f64;
    let diff = g.sub(xhat, x)?;
    let sq = g.mul(&diff, &diff)?;
    let total = g.sum(&sq, None)?;
    g.mul_scalar(&total, 1.0 / batch)
}

/// Builds normalized target distributions from domain-vector rows: the first
/// `n_domains` slots must be one-hot, attribute slots must be 0/1; rows are
/// normalized to unit sum so attribute slots are classified exactly like
/// domain slots.
fn target_rows(v: &Tensor, n_domains: usize) -> Result<Tensor> {
    if v.shape().len() != 2 || v.shape()[1] < n_domains {
        return Err(UfdnError::Validation(format!(
            "domain-vector batch {:?} cannot hold {n_domains} domain slots",
            v.shape()
        )));
    }
    let (rows, width) = (v.shape()[0], v.shape()[1]);
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let row = &v.data()[r * width..(r + 1) * width];
        let ones = row[..n_domains].iter().filter(|&&x| x == 1.0).count();
        let zeros = row[..n_domains].iter().filter(|&&x| x == 0.0).count();
        if ones != 1 || ones + zeros != n_domains {
            return Err(UfdnError::Validation(format!(
                "row {r} domain slots {:?} are not one-hot",
                &row[..n_domains]
            )));
        }
        if row[n_domains..].iter().any(|&b| b != 0.0 && b != 1.0) {
            return Err(UfdnError::Validation(format!(
                "row {r} attribute slots are not 0/1"
            )));
        }
        let sum: f64 = row.iter().sum();
        out.extend(row.iter().map(|&x| x / sum));
    }
    Tensor::from_vec(&[rows, width], out)
}

/// Eq. for the domain discriminator: softmax cross-entropy of D_v's
/// prediction against the true domain vector. The latent input must be
/// detached by the caller; encoder gradients are exactly zero.
pub fn loss_domain_disc(g: &mut Graph, domain_logits: &Tensor, v_true: &Tensor, n_domains: usize) -> Result<Tensor> {
    let targets = target_rows(v_true, n_domains)?;
    g.softmax_cross_entropy(domain_logits, &CeTarget::Distribution(targets))
}

/// Encoder adversary: cross-entropy between D_v's softmax output and the
/// uniform distribution, batch-averaged. Its global minimum ln N is attained
/// exactly when D_v is maximally confused.
pub fn loss_encoder_adv(g: &mut Graph, domain_logits: &Tensor) -> Result<Tensor> {
    let n = domain_logits.shape()[1];
    let rows = domain_logits.shape()[0];
    let uniform = Tensor::from_vec(&[rows, n], vec![1.0 / n as f64; rows * n])?;
    g.softmax_cross_entropy(domain_logits, &CeTarget::Distribution(uniform))
}

/// Pixel-space GAN pair:
/// `L_Dx = -E[log s(real)] - E[log(1 - s(fake))]` and
/// `L_G  = -E[log s(fake)]` (non-saturating), logs clamped at 1e-7.
/// The discriminator side expects `fake_logit` computed on images detached
/// from the generator; the generator side expects a frozen discriminator.
pub fn loss_gan(g: &mut Graph, real_logit: &Tensor, fake_logit: &Tensor) -> Result<(Tensor, Tensor)> {
    let s_real = g.sigmoid(real_logit)?;
    let log_real = g.log(&s_real)?;
    let m_real = g.mean(&log_real, None)?;

    let s_fake = g.sigmoid(fake_logit)?;
    let one_minus = g.sub(&Tensor::scalar(1.0), &s_fake)?;
    let log_nf = g.log(&one_minus)?;
    let m_nf = g.mean(&log_nf, None)?;

    let sum = g.add(&m_real, &m_nf)?;
    let l_dx = g.neg(&sum)?;

    let log_fake = g.log(&s_fake)?;
    let m_fake = g.mean(&log_fake, None)?;
    let l_g = g.neg(&m_fake)?;
    Ok((l_dx, l_g))
}

/// Domain-classification loss of the image discriminator:
/// `CE(D_x(fake), v_bar) + CE(D_x(real), v_c)`.
pub fn loss_cls(
    g: &mut Graph,
    domain_logits_fake: &Tensor,
    v_bar: &Tensor,
    domain_logits_real: &Tensor,
    v_c: &Tensor,
    n_domains: usize,
) -> Result<Tensor> {
    let t_fake = target_rows(v_bar, n_domains)?;
    let t_real = target_rows(v_c, n_domains)?;
    let ce_fake = g.softmax_cross_entropy(domain_logits_fake, &CeTarget::Distribution(t_fake))?;
    let ce_real = g.softmax_cross_entropy(domain_logits_real, &CeTarget::Distribution(t_real))?;
    g.add(&ce_fake, &ce_real)
}

/// Auxiliary digit/class loss averaged over masked rows only; exactly zero
/// on an empty mask.
pub fn loss_aux(
    g: &mut Graph,
    class_logits: &Tensor,
    labels: &[Option<usize>],
    mask: &[bool],
) -> Result<Tensor> {
    let rows = class_logits.shape()[0];
    let classes = class_logits.shape()[1];
    if labels.len() != rows || mask.len() != rows {
        return Err(UfdnError::Dimension(format!(
            "loss_aux expects {rows} labels and mask entries, got {} and {}",
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let mut classes_vec = vec![0usize; rows];
    let mut row_w = vec![0.0; rows];
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let label = labels[r].ok_or_else(|| {
            UfdnError::Validation(format!("masked row {r} has no label"))
        })?;
        if label >= classes {
            return Err(UfdnError::Validation(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        classes_vec[r] = label;
        row_w[r] = 1.0 / count as f64;
    }
    g.softmax_cross_entropy_weighted(class_logits, &CeTarget::Classes(classes_vec), &row_w)
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

fn validate_targets(batch: &Batch) -> Result<()> {
    for (i, (&d, &t)) in batch
        .domains
        .iter()
        .zip(&batch.target_domains)
        .enumerate()
    {
        if d == t {
            return Err(UfdnError::Validation(format!(
                "batch row {i}: manipulation target equals the source domain ({d})"
            )));
        }
    }
    Ok(())
}

fn grad_map_for(
    g: &Graph,
    root: &Tensor,
    bound: &BoundModel,
    partitions: &[Partition],
) -> Result<GradientMap> {
    let grads = g.backward(root)?;
    let mut map = GradientMap::new();
    for &p in partitions {
        for (name, handle) in bound.partition_handles(p) {
            map.insert(name.to_string(), grads.wrt(handle)?);
        }
    }
    Ok(map)
}

/// Weighted sum of `(weight, term)` pairs; zero-weight terms must already be
/// excluded by the caller.
fn weighted_total(g: &mut Graph, terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for &(w, t) in terms {
        let scaled = g.mul_scalar(t, w)?;
        acc = Some(match acc {
            None => scaled,
            Some(prev) => g.add(&prev, &scaled)?,
        });
    }
    acc.ok_or_else(|| UfdnError::Contract("empty objective".into()))
}

/// D_v composite: classification cross-entropy on detached latents.
pub fn composite_domain_disc(
    model: &UfdnModel,
    batch: &Batch,
    noise: &Tensor,
) -> Result<(f64, GradientMap)> {
    validate_targets(batch)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &[Partition::DomainDisc]);
    let lat = bound.encode(&mut g, &batch.images)?;
    let z = reparameterize(&mut g, &lat, noise)?;
    let z = g.detach(&z);
    let logits = bound.discriminate_domain(&mut g, &z)?;
    let loss = loss_domain_disc(&mut g, &logits, &batch.v_c, batch.n_domains)?;
    let map = grad_map_for(&g, &loss, &bound, &[Partition::DomainDisc])?;
    Ok((loss.item()?, map))
}

/// D_x composite: `L_Dx + w_cls * L_cls`, fake path detached from G.
pub fn composite_image_disc(
    model: &UfdnModel,
    batch: &Batch,
    weights: &LossWeights,
    noise: &Tensor,
) -> Result<(f64, f64, f64, GradientMap)> {
    validate_targets(batch)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &[Partition::ImageDisc]);
    let lat = bound.encode(&mut g, &batch.images)?;
    let z = reparameterize(&mut g, &lat, noise)?;
    let fake = bound.generate(&mut g, &z, &batch.v_bar)?;
    let fake = g.detach(&fake);
    let (real_logit, dom_real) = bound.discriminate_image(&mut g, &batch.images)?;
    let (fake_logit, dom_fake) = bound.discriminate_image(&mut g, &fake)?;
    let (l_dx, _l_g) = loss_gan(&mut g, &real_logit, &fake_logit)?;
    let mut terms: Vec<(f64, &Tensor)> = vec![(1.0, &l_dx)];
    let l_cls;
    let cls_value = if weights.w_cls > 0.0 {
        l_cls = loss_cls(
            &mut g,
            &dom_fake,
            &batch.v_bar,
            &dom_real,
            &batch.v_c,
            batch.n_domains,
        )?;
        terms.push((weights.w_cls, &l_cls));
        l_cls.item()?
    } else {
        0.0
    };
    let total = weighted_total(&mut g, &terms)?;
    let map = grad_map_for(&g, &total, &bound, &[Partition::ImageDisc])?;
    Ok((l_dx.item()?, cls_value, total.item()?, map))
}

/// Encoder losses evaluated in the E composite.
#[derive(Clone, Copy, Debug, Default)]
pub struct EncoderLosses {
    pub recon: f64,
    pub kl: f64,
    pub e_adv: f64,
    pub aux: f64,
    pub total: f64,
}

/// E composite: `w_recon*recon + w_kl*KL + w_e_adv*CE(D_v(z), uniform)`
/// plus `w_aux*loss_aux` when UDA is enabled (which also trains the
/// classifier). G and D_v enter frozen.
pub fn composite_encoder(
    model: &UfdnModel,
    batch: &Batch,
    weights: &LossWeights,
    noise: &Tensor,
    uda: bool,
) -> Result<(EncoderLosses, GradientMap)> {
    validate_targets(batch)?;
    let mut g = Graph::new();
    let tracked: &[Partition] = if uda {
        &[Partition::Encoder, Partition::Classifier]
    } else {
        &[Partition::Encoder]
    };
    let bound = model.bind(&mut g, tracked);
    let lat = bound.encode(&mut g, &batch.images)?;
    let z = reparameterize(&mut g, &lat, noise)?;
    let xhat = bound.generate(&mut g, &z, &batch.v_c)?;
    let recon = recon_loss(&mut g, &xhat, &batch.images)?;
    let kl = kl_divergence(&mut g, &lat)?;
    let mut terms: Vec<(f64, &Tensor)> = vec![(weights.w_recon, &recon), (weights.w_kl, &kl)];
    let adv;
    let e_adv = if weights.w_e_adv > 0.0 {
        let logits = bound.discriminate_domain(&mut g, &z)?;
        adv = loss_encoder_adv(&mut g, &logits)?;
        terms.push((weights.w_e_adv, &adv));
        adv.item()?
    } else {
        0.0
    };
    let aux_term;
    let aux = if uda && weights.w_aux > 0.0 {
        let logits = bound.classify_aux(&mut g, &z)?;
        aux_term = loss_aux(&mut g, &logits, &batch.labels, &batch.label_mask)?;
        terms.push((weights.w_aux, &aux_term));
        aux_term.item()?
    } else {
        0.0
    };
    let total = weighted_total(&mut g, &terms)?;
    let map = grad_map_for(&g, &total, &bound, tracked)?;
    Ok((
        EncoderLosses {
            recon: recon.item()?,
            kl: kl.item()?,
            e_adv,
            aux,
            total: total.item()?,
        },
        map,
    ))
}

/// G composite: `w_recon*recon + w_g_adv*L_G + w_cls*CE(D_x(fake), v_bar)`
/// with E and D_x frozen. The KL term of the VAE objective has zero gradient
/// w.r.t. G and is therefore omitted from this map.
pub fn composite_generator(
    model: &UfdnModel,
    batch: &Batch,
    weights: &LossWeights,
    noise: &Tensor,
) -> Result<(f64, f64, GradientMap)> {
    validate_targets(batch)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &[Partition::Generator]);
    let lat = bound.encode(&mut g, &batch.images)?;
    let z = reparameterize(&mut g, &lat, noise)?;
    let xhat = bound.generate(&mut g, &z, &batch.v_c)?;
    let recon = recon_loss(&mut g, &xhat, &batch.images)?;
    let mut terms: Vec<(f64, &Tensor)> = vec![(weights.w_recon, &recon)];
    let l_g_term;
    let cls_term;
    let mut g_adv = 0.0;
    if weights.w_g_adv > 0.0 || weights.w_cls > 0.0 {
        let fake = bound.generate(&mut g, &z, &batch.v_bar)?;
        let (fake_logit, dom_fake) = bound.discriminate_image(&mut g, &fake)?;
        if weights.w_g_adv > 0.0 {
            let s_fake = g.sigmoid(&fake_logit)?;
            let log_fake = g.log(&s_fake)?;
            let m = g.mean(&log_fake, None)?;
            l_g_term = g.neg(&m)?;
            terms.push((weights.w_g_adv, &l_g_term));
            g_adv = l_g_term.item()?;
        }
        if weights.w_cls > 0.0 {
            let t_fake = target_rows(&batch.v_bar, batch.n_domains)?;
            cls_term =
                g.softmax_cross_entropy(&dom_fake, &CeTarget::Distribution(t_fake))?;
            terms.push((weights.w_cls, &cls_term));
        }
    }
    let total = weighted_total(&mut g, &terms)?;
    let map = grad_map_for(&g, &total, &bound, &[Partition::Generator])?;
    Ok((g_adv, total.item()?, map))
}

/// Evaluates all four composites on the same parameters and batch, returning
/// every loss scalar plus the four gradient maps.
pub fn assemble_objectives(
    model: &UfdnModel,
    batch: &Batch,
    weights: &LossWeights,
    noise: &Tensor,
    uda: bool,
) -> Result<(StepLosses, ObjectiveGrads)> {
    weights.validate()?;
    let (dv, dv_map) = composite_domain_disc(model, batch, noise)?;
    let (dx_adv, cls, dx_total, dx_map) = composite_image_disc(model, batch, weights, noise)?;
    let (enc, e_map) = composite_encoder(model, batch, weights, noise, uda)?;
    let (g_adv, g_total, g_map) = composite_generator(model, batch, weights, noise)?;
    Ok((
        StepLosses {
            recon: enc.recon,
            kl: enc.kl,
            e_adv: enc.e_adv,
            g_adv,
            dx_adv,
            dv,
            cls,
            aux: enc.aux,
            e_total: enc.total,
            g_total,
            dv_total: dv,
            dx_total,
        },
        ObjectiveGrads {
            domain_disc: dv_map,
            image_disc: dx_map,
            encoder: e_map,
            generator: g_map,
        },
    ))
}

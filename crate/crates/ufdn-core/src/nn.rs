//! The encoder, generator, two discriminators, and the optional auxiliary
//! classifier, expressed as pure functions over a parameter store.
//!
//! Parameters live in an [`UfdnModel`] partitioned into five disjoint named
//! collections. A forward pass first *binds* the model onto a graph
//! ([`UfdnModel::bind`]), choosing which partitions are tracked (trainable in
//! that pass) and which enter as frozen constants; that choice is what routes
//! gradients during alternating updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UfdnError};
use crate::numerics::{Graph, Tensor};
use crate::rng::{self, stream};

/// Negative slope shared by every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Log-variance clamp applied when constructing a [`GaussianLatent`].
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// The five disjoint parameter partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Encoder,
    Generator,
    DomainDisc,
    ImageDisc,
    Classifier,
}

pub const ALL_PARTITIONS: [Partition; 5] = [
    Partition::Encoder,
    Partition::Generator,
    Partition::DomainDisc,
    Partition::ImageDisc,
    Partition::Classifier,
];

impl Partition {
    pub fn index(self) -> usize {
        match self {
            Partition::Encoder => 0,
            Partition::Generator => 1,
            Partition::DomainDisc => 2,
            Partition::ImageDisc => 3,
            Partition::Classifier => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Partition::Encoder => "E",
            Partition::Generator => "G",
            Partition::DomainDisc => "Dv",
            Partition::ImageDisc => "Dx",
            Partition::Classifier => "C",
        }
    }
}

/// Static description of the networks for a given problem size.
///
/// Width tables follow DCGAN-style shapes: stride-2 4x4 convolutions halve
/// the spatial extent down to 2x2 in the encoder, mirrored by stride-2
/// transposed convolutions in the generator. The image discriminator stops
/// one stage earlier (4x4) and the domain discriminator is a small MLP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Square image side; 8, 16, or 32.
    pub image_size: usize,
    /// Image channels; 1 or 3.
    pub channels: usize,
    pub latent_dim: usize,
    /// Number of domains N.
    pub domain_dim: usize,
    /// Number of attribute slots K appended to the domain vector.
    pub attr_dim: usize,
    /// Enables the single-layer auxiliary classifier when set.
    pub num_classes: Option<usize>,
    /// Encoder channel widths, one per stride-2 stage.
    pub enc_widths: Vec<usize>,
    /// Image-discriminator channel widths.
    pub dx_widths: Vec<usize>,
    /// Hidden widths of the domain discriminator MLP.
    pub dv_hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(image_size: usize, channels: usize, domain_dim: usize) -> Result<Architecture> {
        let stages = match image_size {
            8 => 2,
            16 => 3,
            32 => 4,
            other => {
                return Err(UfdnError::Config(format!(
                    "image_size must be one of 8, 16, 32 (a power of two); got {other}"
                )))
            }
        };
        let full = [32, 64, 128, 256];
        let arch = Architecture {
            image_size,
            channels,
            latent_dim: 64,
            domain_dim,
            attr_dim: 0,
            num_classes: None,
            enc_widths: full[..stages].to_vec(),
            dx_widths: full[..(stages - 1).max(1)].to_vec(),
            dv_hidden: vec![64, 64],
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_latent_dim(mut self, latent_dim: usize) -> Architecture {
        self.latent_dim = latent_dim;
        self
    }

    pub fn with_attr_dim(mut self, attr_dim: usize) -> Architecture {
        self.attr_dim = attr_dim;
        self
    }

    pub fn with_classifier(mut self, num_classes: usize) -> Architecture {
        self.num_classes = Some(num_classes);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stages();
        if !matches!(self.image_size, 8 | 16 | 32) {
            return Err(UfdnError::Config(format!(
                "image_size must be one of 8, 16, 32; got {}",
                self.image_size
            )));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(UfdnError::Config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.domain_dim < 2 {
            return Err(UfdnError::Config(format!(
                "domain_dim must be >= 2, got {}",
                self.domain_dim
            )));
        }
        if self.latent_dim < 2 {
            return Err(UfdnError::Config(format!(
                "latent_dim must be >= 2, got {}",
                self.latent_dim
            )));
        }
        if self.enc_widths.len() != stages {
            return Err(UfdnError::Config(format!(
                "enc_widths must list {stages} stages for image_size {}, got {:?}",
                self.image_size, self.enc_widths
            )));
        }
        if self.dx_widths.is_empty() || self.dx_widths.len() >= stages + 1 {
            return Err(UfdnError::Config(format!(
                "dx_widths must hold 1..={} stages, got {:?}",
                stages, self.dx_widths
            )));
        }
        if self.dv_hidden.is_empty() {
            return Err(UfdnError::Config("dv_hidden must not be empty".into()));
        }
        if self.enc_widths.iter().any(|&w| w == 0)
            || self.dx_widths.iter().any(|&w| w == 0)
            || self.dv_hidden.iter().any(|&w| w == 0)
        {
            return Err(UfdnError::Config("zero layer width".into()));
        }
        if self.num_classes == Some(0) {
            return Err(UfdnError::Config("num_classes must be >= 1".into()));
        }
        Ok(())
    }

    /// Stride-2 stages in the encoder: log2(image_size) - 1.
    pub fn stages(&self) -> usize {
        (self.image_size as f64).log2() as usize - 1
    }

    /// Domain-vector length N + K.
    pub fn cond_dim(&self) -> usize {
        self.domain_dim + self.attr_dim
    }

    /// Width of both discriminators' domain heads (N + K: attribute slots are
    /// classified exactly like domain slots).
    pub fn head_dim(&self) -> usize {
        self.cond_dim()
    }

    fn enc_out_spatial(&self) -> usize {
        self.image_size >> self.stages()
    }

    fn enc_flat_dim(&self) -> usize {
        let s = self.enc_out_spatial();
        self.enc_widths.last().unwrap() * s * s
    }

    fn dx_out_spatial(&self) -> usize {
        self.image_size >> self.dx_widths.len()
    }

    fn dx_flat_dim(&self) -> usize {
        let s = self.dx_out_spatial();
        self.dx_widths.last().unwrap() * s * s
    }

    /// Every trainable tensor: partition, stable name, shape, and the fan-in
    /// used for initialization (`None` for zero-initialized biases).
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut push = |partition, name: String, shape: Vec<usize>, fan_in: Option<usize>| {
            specs.push(ParamSpec {
                partition,
                name,
                shape,
                fan_in,
            });
        };

        // Encoder: conv stack then two affine heads.
        let mut prev = self.channels;
        for (i, &w) in self.enc_widths.iter().enumerate() {
            push(
                Partition::Encoder,
                format!("E.conv{i}.w"),
                vec![w, prev, KERNEL, KERNEL],
                Some(prev * KERNEL * KERNEL),
            );
            push(Partition::Encoder, format!("E.conv{i}.b"), vec![w], None);
            prev = w;
        }
        let flat = self.enc_flat_dim();
        for head in ["mu", "logvar"] {
            push(
                Partition::Encoder,
                format!("E.{head}.w"),
                vec![flat, self.latent_dim],
                Some(flat),
            );
            push(
                Partition::Encoder,
                format!("E.{head}.b"),
                vec![self.latent_dim],
                None,
            );
        }

        // Generator: affine projection then mirrored transposed-conv stack.
        push(
            Partition::Generator,
            "G.fc.w".into(),
            vec![self.latent_dim + self.cond_dim(), flat],
            Some(self.latent_dim + self.cond_dim()),
        );
        push(Partition::Generator, "G.fc.b".into(), vec![flat], None);
        let mut chain: Vec<usize> = self.enc_widths.iter().rev().cloned().collect();
        chain.push(self.channels);
        for i in 0..chain.len() - 1 {
            let (cin, cout) = (chain[i], chain[i + 1]);
            push(
                Partition::Generator,
                format!("G.tconv{i}.w"),
                vec![cin, cout, KERNEL, KERNEL],
                Some(cin * KERNEL * KERNEL),
            );
            push(
                Partition::Generator,
                format!("G.tconv{i}.b"),
                vec![cout],
                None,
            );
        }

        // Domain discriminator: small MLP on z.
        let mut prev = self.latent_dim;
        for (i, &w) in self.dv_hidden.iter().enumerate() {
            push(
                Partition::DomainDisc,
                format!("Dv.fc{i}.w"),
                vec![prev, w],
                Some(prev),
            );
            push(Partition::DomainDisc, format!("Dv.fc{i}.b"), vec![w], None);
            prev = w;
        }
        push(
            Partition::DomainDisc,
            "Dv.out.w".into(),
            vec![prev, self.head_dim()],
            Some(prev),
        );
        push(
            Partition::DomainDisc,
            "Dv.out.b".into(),
            vec![self.head_dim()],
            None,
        );

        // Image discriminator: shared conv trunk, two affine heads.
        let mut prev = self.channels;
        for (i, &w) in self.dx_widths.iter().enumerate() {
            push(
                Partition::ImageDisc,
                format!("Dx.conv{i}.w"),
                vec![w, prev, KERNEL, KERNEL],
                Some(prev * KERNEL * KERNEL),
            );
            push(Partition::ImageDisc, format!("Dx.conv{i}.b"), vec![w], None);
            prev = w;
        }
        let dx_flat = self.dx_flat_dim();
        push(
            Partition::ImageDisc,
            "Dx.real.w".into(),
            vec![dx_flat, 1],
            Some(dx_flat),
        );
        push(Partition::ImageDisc, "Dx.real.b".into(), vec![1], None);
        push(
            Partition::ImageDisc,
            "Dx.dom.w".into(),
            vec![dx_flat, self.head_dim()],
            Some(dx_flat),
        );
        push(
            Partition::ImageDisc,
            "Dx.dom.b".into(),
            vec![self.head_dim()],
            None,
        );

        // Auxiliary classifier: exactly one affine layer.
        if let Some(classes) = self.num_classes {
            push(
                Partition::Classifier,
                "C.fc.w".into(),
                vec![self.latent_dim, classes],
                Some(self.latent_dim),
            );
            push(Partition::Classifier, "C.fc.b".into(), vec![classes], None);
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

/// Declaration of one trainable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub partition: Partition,
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: Option<usize>,
}

/// Variational posterior parameters q(z|x); `logvar` is clamped to
/// [-10, 10] at construction.
#[derive(Clone, Debug)]
pub struct GaussianLatent {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl GaussianLatent {
    pub fn new(g: &mut Graph, mu: Tensor, logvar: Tensor) -> Result<GaussianLatent> {
        if mu.shape() != logvar.shape() {
            return Err(UfdnError::Dimension(format!(
                "mu shape {:?} != logvar shape {:?}",
                mu.shape(),
                logvar.shape()
            )));
        }
        let logvar = g.clamp(&logvar, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(GaussianLatent { mu, logvar })
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.shape()[1]
    }
}

/// `z = mu + exp(0.5 * logvar) * noise`; gradients flow into `mu`/`logvar`
/// but never into `noise`.
pub fn reparameterize(g: &mut Graph, lat: &GaussianLatent, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != lat.mu.shape() {
        return Err(UfdnError::Dimension(format!(
            "noise shape {:?} != mu shape {:?}",
            noise.shape(),
            lat.mu.shape()
        )));
    }
    let half = g.mul_scalar(&lat.logvar, 0.5)?;
    let std = g.exp(&half)?;
    let scaled = g.mul(&std, &noise.detached())?;
    g.add(&lat.mu, &scaled)
}

/// Model parameters for all five networks.
#[derive(Clone, Debug)]
pub struct UfdnModel {
    pub arch: Architecture,
    values: Vec<Tensor>,
    specs: Vec<ParamSpec>,
    index: BTreeMap<String, usize>,
}

impl UfdnModel {
    /// Deterministic initialization: weights from N(0, 2/fan_in), biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<UfdnModel> {
        arch.validate()?;
        let specs = arch.param_specs();
        let mut rng = rng::rng_for(seed, stream::INIT, 0);
        let mut values = Vec::with_capacity(specs.len());
        for spec in &specs {
            let numel: usize = spec.shape.iter().product();
            let t = match spec.fan_in {
                Some(fan_in) => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let data = (0..numel).map(|_| std * rng::normal(&mut rng)).collect();
                    Tensor::from_vec(&spec.shape, data)?
                }
                None => Tensor::zeros(&spec.shape),
            };
            values.push(t);
        }
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Ok(UfdnModel {
            arch,
            values,
            specs,
            index,
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| UfdnError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| UfdnError::Contract(format!("unknown parameter `{name}`")))?;
        if value.shape() != self.specs[i].shape.as_slice() {
            return Err(UfdnError::Dimension(format!(
                "parameter `{name}` expects shape {:?}, got {:?}",
                self.specs[i].shape,
                value.shape()
            )));
        }
        self.values[i] = value.detached();
        Ok(())
    }

    pub fn partition_of(&self, name: &str) -> Result<Partition> {
        self.index
            .get(name)
            .map(|&i| self.specs[i].partition)
            .ok_or_else(|| UfdnError::Contract(format!("unknown parameter `{name}`")))
    }

    /// Parameters in declaration order.
    pub fn params(&self) -> impl Iterator<Item = (&ParamSpec, &Tensor)> {
        self.specs.iter().zip(self.values.iter())
    }

    /// Parameters of one partition in declaration order.
    pub fn partition_params(&self, p: Partition) -> impl Iterator<Item = (&ParamSpec, &Tensor)> {
        self.params().filter(move |(s, _)| s.partition == p)
    }

    /// Places every parameter on `g`, tracking exactly the partitions in
    /// `tracked`; everything else enters the pass as a frozen constant.
    pub fn bind<'m>(&'m self, g: &mut Graph, tracked: &[Partition]) -> BoundModel<'m> {
        let mut tensors = Vec::with_capacity(self.specs.len());
        for (spec, value) in self.params() {
            let t = if tracked.contains(&spec.partition) {
                g.leaf(value)
            } else {
                value.detached()
            };
            tensors.push(t);
        }
        BoundModel {
            model: self,
            tensors,
        }
    }
}

/// A model whose parameters have been placed onto a graph.
pub struct BoundModel<'m> {
    model: &'m UfdnModel,
    tensors: Vec<Tensor>,
}

impl<'m> BoundModel<'m> {
    pub fn arch(&self) -> &Architecture {
        &self.model.arch
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        let i = *self
            .model
            .index
            .get(name)
            .ok_or_else(|| UfdnError::Contract(format!("unknown parameter `{name}`")))?;
        Ok(&self.tensors[i])
    }

    /// Graph handles for one partition's parameters (for gradient extraction).
    pub fn partition_handles(&self, p: Partition) -> Vec<(&str, &Tensor)> {
        self.model
            .specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.partition == p)
            .map(|(i, s)| (s.name.as_str(), &self.tensors[i]))
            .collect()
    }

    fn affine(&self, g: &mut Graph, x: &Tensor, stem: &str) -> Result<Tensor> {
        let xw = g.matmul(x, self.p(&format!("{stem}.w"))?)?;
        g.bias_add(&xw, self.p(&format!("{stem}.b"))?)
    }

    /// Stride-2 conv stack + two affine heads producing q(z|x).
    pub fn encode(&self, g: &mut Graph, x: &Tensor) -> Result<GaussianLatent> {
        let arch = self.arch();
        let want = [arch.channels, arch.image_size, arch.image_size];
        if x.shape().len() != 4 || x.shape()[1..] != want {
            return Err(UfdnError::Dimension(format!(
                "encoder input {:?} does not match [B, {}, {}, {}]",
                x.shape(),
                want[0],
                want[1],
                want[2]
            )));
        }
        let batch = x.shape()[0];
        let mut h = x.clone();
        for i in 0..arch.stages() {
            let w = self.p(&format!("E.conv{i}.w"))?.clone();
            let b = self.p(&format!("E.conv{i}.b"))?.clone();
            h = g.conv2d(&h, &w, &b, STRIDE, PAD)?;
            h = g.leaky_relu(&h, LEAKY_SLOPE)?;
        }
        let flat = g.reshape(&h, &[batch, arch.enc_flat_dim()])?;
        let mu = self.affine(g, &flat, "E.mu")?;
        let logvar = self.affine(g, &flat, "E.logvar")?;
        GaussianLatent::new(g, mu, logvar)
    }

    /// concat(z, v) -> affine -> transposed-conv stack -> sigmoid.
    pub fn generate(&self, g: &mut Graph, z: &Tensor, v: &Tensor) -> Result<Tensor> {
        let arch = self.arch();
        if z.shape().len() != 2 || z.shape()[1] != arch.latent_dim {
            return Err(UfdnError::Dimension(format!(
                "generator z {:?} does not match latent_dim {}",
                z.shape(),
                arch.latent_dim
            )));
        }
        if v.shape().len() != 2 || v.shape()[1] != arch.cond_dim() || v.shape()[0] != z.shape()[0] {
            return Err(UfdnError::Config(format!(
                "domain vector batch {:?} does not match [B, N+K] = [{}, {}]",
                v.shape(),
                z.shape()[0],
                arch.cond_dim()
            )));
        }
        let batch = z.shape()[0];
        let zv = g.concat(&[z, v], 1)?;
        let mut h = self.affine(g, &zv, "G.fc")?;
        h = g.leaky_relu(&h, LEAKY_SLOPE)?;
        let s0 = arch.enc_out_spatial();
        let c0 = *arch.enc_widths.last().unwrap();
        h = g.reshape(&h, &[batch, c0, s0, s0])?;
        let n_tconv = arch.stages();
        for i in 0..n_tconv {
            let w = self.p(&format!("G.tconv{i}.w"))?.clone();
            let b = self.p(&format!("G.tconv{i}.b"))?.clone();
            h = g.conv2d_transpose(&h, &w, &b, STRIDE, PAD)?;
            if i + 1 < n_tconv {
                h = g.leaky_relu(&h, LEAKY_SLOPE)?;
            }
        }
        g.sigmoid(&h)
    }

    /// Raw domain logits from z (softmax lives inside the losses).
    pub fn discriminate_domain(&self, g: &mut Graph, z: &Tensor) -> Result<Tensor> {
        let arch = self.arch();
        if z.shape().len() != 2 || z.shape()[1] != arch.latent_dim {
            return Err(UfdnError::Dimension(format!(
                "domain discriminator input {:?} does not match latent_dim {}",
                z.shape(),
                arch.latent_dim
            )));
        }
        let mut h = z.clone();
        for i in 0..arch.dv_hidden.len() {
            h = self.affine(g, &h, &format!("Dv.fc{i}"))?;
            h = g.leaky_relu(&h, LEAKY_SLOPE)?;
        }
        self.affine(g, &h, "Dv.out")
    }

    /// Shared conv trunk with a realness head and a domain head, both raw
    /// logits.
    pub fn discriminate_image(&self, g: &mut Graph, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let arch = self.arch();
        let want = [arch.channels, arch.image_size, arch.image_size];
        if x.shape().len() != 4 || x.shape()[1..] != want {
            return Err(UfdnError::Dimension(format!(
                "image discriminator input {:?} does not match [B, {}, {}, {}]",
                x.shape(),
                want[0],
                want[1],
                want[2]
            )));
        }
        let batch = x.shape()[0];
        let mut h = x.clone();
        for i in 0..arch.dx_widths.len() {
            let w = self.p(&format!("Dx.conv{i}.w"))?.clone();
            let b = self.p(&format!("Dx.conv{i}.b"))?.clone();
            h = g.conv2d(&h, &w, &b, STRIDE, PAD)?;
            h = g.leaky_relu(&h, LEAKY_SLOPE)?;
        }
        let flat = g.reshape(&h, &[batch, arch.dx_flat_dim()])?;
        let realness = self.affine(g, &flat, "Dx.real")?;
        let domain = self.affine(g, &flat, "Dx.dom")?;
        Ok((realness, domain))
    }

    /// Single affine layer latent -> classes.
    pub fn classify_aux(&self, g: &mut Graph, z: &Tensor) -> Result<Tensor> {
        let arch = self.arch();
        if arch.num_classes.is_none() {
            return Err(UfdnError::Config(
                "auxiliary classifier is disabled for this architecture".into(),
            ));
        }
        if z.shape().len() != 2 || z.shape()[1] != arch.latent_dim {
            return Err(UfdnError::Dimension(format!(
                "classifier input {:?} does not match latent_dim {}",
                z.shape(),
                arch.latent_dim
            )));
        }
        self.affine(g, z, "C.fc")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::rng::rng_for;

    fn arch32() -> Architecture {
        Architecture::new(32, 1, 3).unwrap()
    }

    fn small_arch() -> Architecture {
        Architecture::new(8, 1, 3).unwrap().with_latent_dim(8)
    }

    fn image(batch: usize, arch: &Architecture, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, 0xA1, 0);
        let n = batch * arch.channels * arch.image_size * arch.image_size;
        let data = (0..n).map(|_| crate::rng::uniform(&mut rng, 0.0, 1.0)).collect();
        Tensor::from_vec(&[batch, arch.channels, arch.image_size, arch.image_size], data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = UfdnModel::init(arch32(), 99).unwrap();
        let b = UfdnModel::init(arch32(), 99).unwrap();
        for ((sa, ta), (_, tb)) in a.params().zip(b.params()) {
            assert!(ta.bits_eq(tb), "{} differs across identical seeds", sa.name);
        }
        let c = UfdnModel::init(arch32(), 100).unwrap();
        assert!(!a.param("E.conv0.w").unwrap().bits_eq(c.param("E.conv0.w").unwrap()));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // Independently computed from the declared layer table for
        // image_size 32, channels 1, latent 64, N 3, K 0, no classifier.
        let arch = arch32();
        let conv = |co: usize, ci: usize| co * ci * 16 + co;
        let aff = |i: usize, o: usize| i * o + o;
        let enc = conv(32, 1) + conv(64, 32) + conv(128, 64) + conv(256, 128)
            + aff(1024, 64) * 2;
        let gen = aff(64 + 3, 1024)
            + (256 * 128 * 16 + 128)
            + (128 * 64 * 16 + 64)
            + (64 * 32 * 16 + 32)
            + (32 * 1 * 16 + 1);
        let dv = aff(64, 64) + aff(64, 64) + aff(64, 3);
        let dx = conv(32, 1) + conv(64, 32) + conv(128, 64) + aff(2048, 1) + aff(2048, 3);
        assert_eq!(arch.param_count(), enc + gen + dv + dx);
    }

    #[test]
    fn classifier_parameter_count_is_single_layer() {
        let arch = arch32().with_classifier(10);
        let with = arch.param_count();
        let without = arch32().param_count();
        assert_eq!(with - without, 64 * 10 + 10);
    }

    #[test]
    fn init_weight_std_tracks_fan_in() {
        let model = UfdnModel::init(arch32(), 7).unwrap();
        for (spec, t) in model.params() {
            let Some(fan_in) = spec.fan_in else { continue };
            if fan_in < 256 {
                continue;
            }
            let n = t.numel() as f64;
            let mean: f64 = t.data().iter().sum::<f64>() / n;
            let var: f64 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let want = (2.0 / fan_in as f64).sqrt();
            let got = var.sqrt();
            assert!(
                (got - want).abs() / want < 0.10,
                "{}: std {} vs expected {}",
                spec.name,
                got,
                want
            );
        }
    }

    #[test]
    fn encode_shapes_and_clamps() {
        let arch = arch32();
        let model = UfdnModel::init(arch.clone(), 1).unwrap();
        let mut g = Graph::inference();
        let bound = model.bind(&mut g, &[]);
        let x = image(3, &arch, 2);
        let lat = bound.encode(&mut g, &x).unwrap();
        assert_eq!(lat.mu.shape(), &[3, 64]);
        assert_eq!(lat.logvar.shape(), &[3, 64]);
        assert!(lat.mu.data().iter().all(|v| v.is_finite()));
        assert!(lat
            .logvar
            .data()
            .iter()
            .all(|&v| (LOGVAR_MIN..=LOGVAR_MAX).contains(&v)));
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let arch = arch32();
        let model = UfdnModel::init(arch, 1).unwrap();
        let mut g = Graph::inference();
        let bound = model.bind(&mut g, &[]);
        let x = Tensor::zeros(&[2, 1, 16, 16]);
        assert!(matches!(
            bound.encode(&mut g, &x),
            Err(UfdnError::Dimension(_))
        ));
    }

    #[test]
    fn reparameterize_closed_forms() {
        let mut g = Graph::inference();
        let mu = Tensor::zeros(&[1, 4]);
        let logvar = Tensor::zeros(&[1, 4]);
        let lat = GaussianLatent::new(&mut g, mu, logvar).unwrap();
        let noise = Tensor::full(&[1, 4], 0.5);
        let z = reparameterize(&mut g, &lat, &noise).unwrap();
        assert!(z.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let mu = Tensor::full(&[1, 2], 2.0);
        let logvar = Tensor::full(&[1, 2], 4f64.ln());
        let lat = GaussianLatent::new(&mut g, mu, logvar).unwrap();
        let noise = Tensor::ones(&[1, 2]);
        let z = reparameterize(&mut g, &lat, &noise).unwrap();
        assert!(z.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn reparameterize_monte_carlo_moments() {
        let mut g = Graph::inference();
        let mu_val = 2.0f64;
        let var_val = 4.0f64;
        let n = 100_000;
        let lat = GaussianLatent::new(
            &mut g,
            Tensor::full(&[n, 1], mu_val),
            Tensor::full(&[n, 1], var_val.ln()),
        )
        .unwrap();
        let mut rng = rng_for(3, 0xf0, 0);
        let noise = Tensor::from_vec(&[n, 1], crate::rng::normal_vec(&mut rng, n)).unwrap();
        let z = reparameterize(&mut g, &lat, &noise).unwrap();
        let mean: f64 = z.data().iter().sum::<f64>() / n as f64;
        let var: f64 = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((mean - mu_val).abs() / mu_val < 0.03, "mean {mean}");
        assert!((var - var_val).abs() / var_val < 0.03, "var {var}");
    }

    #[test]
    fn reparameterize_gradient_skips_noise() {
        let mut g = Graph::new();
        let mu = g.leaf(&Tensor::full(&[1, 3], 0.3));
        let logvar = g.leaf(&Tensor::full(&[1, 3], -0.2));
        let lat = GaussianLatent::new(&mut g, mu.clone(), logvar.clone()).unwrap();
        let noise = Tensor::full(&[1, 3], 0.7);
        let z = reparameterize(&mut g, &lat, &noise).unwrap();
        let y = g.sum(&z, None).unwrap();
        let grads = g.backward(&y).unwrap();
        assert!(grads.wrt(&mu).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(grads
            .wrt(&logvar)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v != 0.0));
    }

    #[test]
    fn generate_range_and_determinism() {
        let arch = small_arch();
        let model = UfdnModel::init(arch.clone(), 5).unwrap();
        let mut g = Graph::inference();
        let bound = model.bind(&mut g, &[]);
        let mut rng = rng_for(6, 0xB2, 0);
        let z = Tensor::from_vec(&[2, 8], crate::rng::normal_vec(&mut rng, 16)).unwrap();
        let v = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let a = bound.generate(&mut g, &z, &v).unwrap();
        assert_eq!(a.shape(), &[2, 1, 8, 8]);
        assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let b = bound.generate(&mut g, &z, &v).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn generate_rejects_bad_domain_vector_width() {
        let arch = small_arch();
        let model = UfdnModel::init(arch, 5).unwrap();
        let mut g = Graph::inference();
        let bound = model.bind(&mut g, &[]);
        let z = Tensor::zeros(&[2, 8]);
        let v = Tensor::zeros(&[2, 5]);
        assert!(matches!(
            bound.generate(&mut g, &z, &v),
            Err(UfdnError::Config(_))
        ));
    }

    #[test]
    fn generate_output_depends_on_domain_vector() {
        let arch = small_arch();
        let model = UfdnModel::init(arch, 11).unwrap();
        let mut rng = rng_for(12, 0xB3, 0);
        let z = Tensor::from_vec(&[1, 8], crate::rng::normal_vec(&mut rng, 8)).unwrap();
        let v0 = Tensor::from_vec(&[1, 3], vec![0.4, 0.3, 0.3]).unwrap();
        let err = grad_check(
            |g, v| {
                let bound = model.bind(g, &[]);
                let out = bound.generate(g, &z, v)?;
                g.sum(&out, None)
            },
            &v0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "generate d/dv error {err}");
        // And the gradient itself is nonzero.
        let mut g = Graph::new();
        let v = g.leaf(&v0);
        let bound = model.bind(&mut g, &[]);
        let out = bound.generate(&mut g, &z, &v).unwrap();
        let y = g.sum(&out, None).unwrap();
        let gv = g.backward(&y).unwrap().wrt(&v).unwrap();
        assert!(gv.data().iter().any(|&x| x.abs() > 1e-12));
    }

    #[test]
    fn discriminate_domain_rows_softmax_to_one() {
        let arch = small_arch();
        let model = UfdnModel::init(arch, 13).unwrap();
        let mut g = Graph::inference();
        let bound = model.bind(&mut g, &[]);
        let mut rng = rng_for(14, 0xB4, 0);
        let z = Tensor::from_vec(&[4, 8], crate::rng::normal_vec(&mut rng, 32)).unwrap();
        let logits = bound.discriminate_domain(&mut g, &z).unwrap();
        assert_eq!(logits.shape(), &[4, 3]);
        for r in 0..4 {
            let row = &logits.data()[r * 3..(r + 1) * 3];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z_sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let total: f64 = row.iter().map(|&v| (v - m).exp() / z_sum).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn discriminate_domain_gradient_reaches_z() {
        let arch = small_arch();
        let model = UfdnModel::init(arch, 15).unwrap();
        let mut rng = rng_for(16, 0xB5, 0);
        let z0 = Tensor::from_vec(&[2, 8], crate::rng::normal_vec(&mut rng, 16)).unwrap();
        let err = grad_check(
            |g, z| {
                let bound = model.bind(g, &[]);
                let logits = bound.discriminate_domain(g, z)?;
                let sq = g.mul(&logits, &logits)?;
                g.sum(&sq, None)
            },
            &z0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "dv d/dz error {err}");
    }

    #[test]
    fn discriminate_image_heads_share_trunk() {
        let arch = small_arch();
        let model = UfdnModel::init(arch.clone(), 17).unwrap();
        let x = image(2, &arch, 18);
        for head in 0..2 {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, &[Partition::ImageDisc]);
            let (real, dom) = bound.discriminate_image(&mut g, &x).unwrap();
            assert_eq!(real.shape(), &[2, 1]);
            assert_eq!(dom.shape(), &[2, 3]);
            assert!(real.data().iter().chain(dom.data()).all(|v| v.is_finite()));
            let y = if head == 0 {
                g.sum(&real, None).unwrap()
            } else {
                g.sum(&dom, None).unwrap()
            };
            let grads = g.backward(&y).unwrap();
            let handles = bound.partition_handles(Partition::ImageDisc);
            let (name, trunk) = handles
                .iter()
                .find(|(name, _)| *name == "Dx.conv0.w")
                .unwrap();
            let gt = grads.wrt(trunk).unwrap();
            assert!(
                gt.data().iter().any(|&v| v.abs() > 1e-15),
                "head {head} leaves no gradient on {name}"
            );
        }
    }

    #[test]
    fn classify_aux_shape_and_gate() {
        let arch = small_arch().with_classifier(10);
        let model = UfdnModel::init(arch, 19).unwrap();
        let mut g = Graph::inference();
        let bound = model.bind(&mut g, &[]);
        let z = Tensor::zeros(&[2, 8]);
        let logits = bound.classify_aux(&mut g, &z).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);

        let disabled = UfdnModel::init(small_arch(), 19).unwrap();
        let bound = disabled.bind(&mut g, &[]);
        assert!(matches!(
            bound.classify_aux(&mut g, &z),
            Err(UfdnError::Config(_))
        ));
    }

    #[test]
    fn classifier_gradient_reaches_encoder_through_z() {
        let arch = small_arch().with_classifier(4);
        let model = UfdnModel::init(arch.clone(), 20).unwrap();
        let x = image(2, &arch, 21);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, &[Partition::Encoder, Partition::Classifier]);
        let lat = bound.encode(&mut g, &x).unwrap();
        let noise = Tensor::zeros(&[2, arch.latent_dim]);
        let z = reparameterize(&mut g, &lat, &noise).unwrap();
        let logits = bound.classify_aux(&mut g, &z).unwrap();
        let sq = g.mul(&logits, &logits).unwrap();
        let y = g.sum(&sq, None).unwrap();
        let grads = g.backward(&y).unwrap();
        let handles = bound.partition_handles(Partition::Encoder);
        let (_, enc_w) = handles
            .iter()
            .find(|(name, _)| *name == "E.conv0.w")
            .unwrap();
        let ge = grads.wrt(enc_w).unwrap();
        assert!(ge.data().iter().any(|&v| v.abs() > 1e-15));
    }

    #[test]
    fn roundtrip_shape_for_every_architecture() {
        for (size, channels) in [(8, 1), (16, 1), (32, 1), (16, 3)] {
            let arch = Architecture::new(size, channels, 3)
                .unwrap()
                .with_latent_dim(16);
            let model = UfdnModel::init(arch.clone(), 23).unwrap();
            let mut g = Graph::inference();
            let bound = model.bind(&mut g, &[]);
            let x = image(2, &arch, 24);
            let lat = bound.encode(&mut g, &x).unwrap();
            let noise = Tensor::zeros(&[2, 16]);
            let z = reparameterize(&mut g, &lat, &noise).unwrap();
            let v = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
            let xhat = bound.generate(&mut g, &z, &v).unwrap();
            assert_eq!(xhat.shape(), x.shape(), "size {size} channels {channels}");
        }
    }

    #[test]
    fn partitions_are_disjoint_and_cover() {
        let arch = arch32().with_classifier(10);
        let specs = arch.param_specs();
        let mut seen = std::collections::BTreeSet::new();
        for s in &specs {
            assert!(seen.insert(s.name.clone()), "duplicate name {}", s.name);
            assert!(s.name.starts_with(s.partition.tag()));
        }
        let total: usize = ALL_PARTITIONS
            .iter()
            .map(|&p| specs.iter().filter(|s| s.partition == p).count())
            .sum();
        assert_eq!(total, specs.len());
    }
}

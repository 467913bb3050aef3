//! The alternating optimization loop: one shared batch per step, sub-updates
//! in the fixed order D_v -> D_x -> E -> G, each recomputing its forward pass
//! with current parameters. Adam state, checkpointing, and the structured
//! loss log live here too.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Batch, BatchOptions, MultiDomainCorpus};
use crate::error::{Result, UfdnError};
use crate::nn::{Partition, UfdnModel, ALL_PARTITIONS};
use crate::objectives::{
    composite_domain_disc, composite_encoder, composite_generator, composite_image_disc,
    GradientMap, LossWeights, StepLosses,
};
use crate::numerics::Tensor;
use crate::rng::{self, stream};

/// Everything the loop needs to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Skip the D_v sub-update and treat `w_e_adv` as zero.
    pub disable_dv: bool,
    /// Skip the D_x sub-update and treat `w_g_adv`/`w_cls` as zero.
    pub disable_dx: bool,
    pub uda_enabled: bool,
    /// Domain whose labels feed the auxiliary loss when UDA is on.
    pub uda_source_domain: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            weights: LossWeights::default(),
            disable_dv: false,
            disable_dx: false,
            uda_enabled: false,
            uda_source_domain: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(UfdnError::Config("steps must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(UfdnError::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(UfdnError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(UfdnError::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(UfdnError::Config("adam_eps must be > 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(UfdnError::Config("checkpoint_every must be > 0".into()));
        }
        self.weights.validate()
    }

    /// Weights after applying the ablation flags.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.disable_dv {
            w.w_e_adv = 0.0;
        }
        if self.disable_dx {
            w.w_g_adv = 0.0;
            w.w_cls = 0.0;
        }
        w
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment buffers for one parameter partition.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &(Vec<f64>, Vec<f64>))> {
        self.moments.iter()
    }

    pub(crate) fn moments_mut(
        &mut self,
        name: &str,
        numel: usize,
    ) -> &mut (Vec<f64>, Vec<f64>) {
        self.moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; numel], vec![0.0; numel]))
    }

}

/// One Adam state per partition, indexed by [`Partition`].
#[derive(Clone, Debug, Default)]
pub struct OptStates {
    states: [AdamState; 5],
}

impl OptStates {
    pub fn new() -> OptStates {
        OptStates::default()
    }

    pub fn get(&self, p: Partition) -> &AdamState {
        &self.states[p.index()]
    }

    pub fn get_mut(&mut self, p: Partition) -> &mut AdamState {
        &mut self.states[p.index()]
    }
}

/// Standard bias-corrected Adam on one tensor; `t` is the 1-based update
/// count for the owning partition.
pub fn adam_update(
    param: &Tensor,
    grad: &Tensor,
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    h: &AdamHyper,
) -> Result<Tensor> {
    if param.shape() != grad.shape() || param.numel() != m.len() || m.len() != v.len() {
        return Err(UfdnError::Contract(format!(
            "adam_update shapes disagree: param {:?}, grad {:?}, moments {}",
            param.shape(),
            grad.shape(),
            m.len()
        )));
    }
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    let mut out = Vec::with_capacity(param.numel());
    for i in 0..param.numel() {
        let g = grad.data()[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        out.push(param.data()[i] - h.lr * m_hat / (v_hat.sqrt() + h.eps));
    }
    Tensor::from_vec(param.shape(), out)
}

/// Applies a gradient map in place; each partition present in the map gets
/// its step counter bumped once.
pub fn apply_gradients(
    model: &mut UfdnModel,
    grads: &GradientMap,
    opt: &mut OptStates,
    h: &AdamHyper,
) -> Result<()> {
    let mut touched: Vec<Partition> = Vec::new();
    for name in grads.keys() {
        let p = model.partition_of(name)?;
        if !touched.contains(&p) {
            touched.push(p);
        }
    }
    for &p in &touched {
        opt.get_mut(p).t += 1;
    }
    for (name, grad) in grads {
        let p = model.partition_of(name)?;
        let t = opt.get(p).t;
        let state = opt.get_mut(p);
        let param = model.param(name)?.clone();
        let (m, v) = state.moments_mut(name, param.numel());
        let updated = adam_update(&param, grad, m, v, t, h)?;
        model.set_param(name, updated)?;
    }
    Ok(())
}

fn guard(step: u64, name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(UfdnError::Divergence {
            step,
            loss: name.to_string(),
        })
    }
}

/// One alternating step over a shared batch: D_v -> D_x -> E -> G, each
/// sub-update recomputing its forward pass with current parameters. Ablation
/// flags skip the corresponding sub-update and zero the matching adversarial
/// weights.
pub fn train_step(
    model: &mut UfdnModel,
    batch: &Batch,
    config: &TrainConfig,
    opt: &mut OptStates,
    step: u64,
) -> Result<StepLosses> {
    let weights = config.effective_weights();
    let hyper = config.hyper();
    let mut rng = rng::rng_for(config.seed, stream::STEP_NOISE, step);
    let noise = Tensor::from_vec(
        &[batch.batch_size(), model.arch.latent_dim],
        rng::normal_vec(&mut rng, batch.batch_size() * model.arch.latent_dim),
    )?;

    let mut losses = StepLosses::default();

    if !config.disable_dv {
        let (dv, map) = composite_domain_disc(model, batch, &noise)?;
        losses.dv = guard(step, "dv", dv)?;
        losses.dv_total = losses.dv;
        apply_gradients(model, &map, opt, &hyper)?;
    }

    if !config.disable_dx {
        let (dx_adv, cls, total, map) = composite_image_disc(model, batch, &weights, &noise)?;
        losses.dx_adv = guard(step, "dx_adv", dx_adv)?;
        losses.cls = guard(step, "cls", cls)?;
        losses.dx_total = guard(step, "dx_total", total)?;
        apply_gradients(model, &map, opt, &hyper)?;
    }

    let (enc, map) = composite_encoder(model, batch, &weights, &noise, config.uda_enabled)?;
    losses.recon = guard(step, "recon", enc.recon)?;
    losses.kl = guard(step, "kl", enc.kl)?;
    losses.e_adv = guard(step, "e_adv", enc.e_adv)?;
    losses.aux = guard(step, "aux", enc.aux)?;
    losses.e_total = guard(step, "e_total", enc.total)?;
    apply_gradients(model, &map, opt, &hyper)?;

    let (g_adv, total, map) = composite_generator(model, batch, &weights, &noise)?;
    losses.g_adv = guard(step, "g_adv", g_adv)?;
    losses.g_total = guard(step, "g_total", total)?;
    apply_gradients(model, &map, opt, &hyper)?;

    Ok(losses)
}

/// Formats one log line: step index then tab-separated `name=value` entries
/// in the fixed order recon, kl, e_adv, g_adv, dx_adv, dv, cls, aux.
pub fn format_log_line(step: u64, losses: &StepLosses) -> String {
    let mut line = step.to_string();
    for (name, value) in losses.named() {
        line.push('\t');
        line.push_str(name);
        line.push('=');
        line.push_str(&format!("{value:.6}"));
    }
    line
}

/// Output of a training run.
#[derive(Debug, Default)]
pub struct TrainOutput {
    pub trace: Vec<StepLosses>,
    pub checkpoints: Vec<PathBuf>,
}

/// Fresh training run from step 1.
pub fn train_loop(
    model: &mut UfdnModel,
    corpus: &MultiDomainCorpus,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    log: &mut dyn FnMut(u64, &StepLosses),
) -> Result<TrainOutput> {
    let mut opt = OptStates::new();
    train_loop_from(model, &mut opt, corpus, config, 0, out_dir, log)
}

/// Continues training from `start_step` (exclusive) to `config.steps`.
/// Batch order and per-step noise depend only on `(seed, step)`, so a resumed
/// run replays an uninterrupted one exactly.
pub fn train_loop_from(
    model: &mut UfdnModel,
    opt: &mut OptStates,
    corpus: &MultiDomainCorpus,
    config: &TrainConfig,
    start_step: u64,
    out_dir: Option<&Path>,
    log: &mut dyn FnMut(u64, &StepLosses),
) -> Result<TrainOutput> {
    config.validate()?;
    model.arch.validate()?;
    if corpus.n_domains != model.arch.domain_dim {
        return Err(UfdnError::Config(format!(
            "corpus has {} domains but the architecture expects {}",
            corpus.n_domains, model.arch.domain_dim
        )));
    }
    if corpus.attr_dim != model.arch.attr_dim {
        return Err(UfdnError::Config(format!(
            "corpus has {} attribute slots but the architecture expects {}",
            corpus.attr_dim, model.arch.attr_dim
        )));
    }
    if config.uda_enabled && model.arch.num_classes.is_none() {
        return Err(UfdnError::Config(
            "uda_enabled requires an architecture with the auxiliary classifier".into(),
        ));
    }
    for d in 0..corpus.n_domains {
        if !corpus.samples.iter().any(|s| s.domain == d) {
            return Err(UfdnError::Config(format!(
                "corpus has no samples for domain {d}"
            )));
        }
    }
    if config.batch_size > corpus.len() {
        return Err(UfdnError::Config(format!(
            "batch_size {} exceeds corpus size {}",
            config.batch_size,
            corpus.len()
        )));
    }
    if start_step >= config.steps {
        return Err(UfdnError::Config(format!(
            "start step {start_step} is not before total steps {}",
            config.steps
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let opts = BatchOptions {
        label_source_domain: if config.uda_enabled {
            Some(config.uda_source_domain)
        } else {
            None
        },
    };
    let batches_per_epoch = (corpus.len() / config.batch_size) as u64;
    let mut epoch_cache: Option<(u64, Vec<Batch>)> = None;
    let mut out = TrainOutput::default();

    for step in start_step + 1..=config.steps {
        let epoch = (step - 1) / batches_per_epoch;
        let index = ((step - 1) % batches_per_epoch) as usize;
        if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            epoch_cache = Some((epoch, batch_iter(corpus, config.batch_size, config.seed, epoch, &opts)?));
        }
        let batch = &epoch_cache.as_ref().unwrap().1[index];
        let losses = train_step(model, batch, config, opt, step)?;
        log(step, &losses);
        out.trace.push(losses);
        if let Some(dir) = out_dir {
            if step % config.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_{step:06}.ufdn"));
                save_checkpoint(model, opt, config, step, &path)?;
                out.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("checkpoint_final.ufdn");
        save_checkpoint(model, opt, config, config.steps, &path)?;
        out.checkpoints.push(path);
    }
    Ok(out)
}

/// Rounds every parameter and optimizer moment through f32, exactly matching
/// checkpoint storage precision. `save_checkpoint` applies this to the live
/// state before writing, which is what makes resume-replay bit-exact.
pub(crate) fn quantize_state(model: &mut UfdnModel, opt: &mut OptStates) -> Result<()> {
    let names: Vec<String> = model.params().map(|(s, _)| s.name.clone()).collect();
    for name in &names {
        let p = model.param(name)?;
        let rounded: Vec<f64> = p.data().iter().map(|&x| x as f32 as f64).collect();
        let t = Tensor::from_vec(p.shape(), rounded)?;
        model.set_param(name, t)?;
    }
    for p in ALL_PARTITIONS {
        let state = opt.get_mut(p);
        let keys: Vec<String> = state.moments.keys().cloned().collect();
        for key in keys {
            let (m, v) = state.moments.get_mut(&key).unwrap();
            for x in m.iter_mut() {
                *x = *x as f32 as f64;
            }
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
    Ok(())
}

//! Loss and gradient stabilizers.
//!
//! The centerpiece is adaptive learning rate clipping (ALRC): exponential
//! moving averages `mu1`, `mu2` of the raw loss and squared loss estimate the
//! loss standard deviation online; whenever a loss exceeds
//! `L_max = mu1 + n*sigma`, the loss handed to backward is rescaled through a
//! stop-gradient factor `L_max/L`. The forward value is capped at `L_max` and
//! every backpropagated gradient is multiplied by the same scalar, so gradient
//! direction is preserved exactly. Moments are always updated with the raw
//! (unclipped) loss, after the clipping decision.
//!
//! Baselines live here too: huberization and the three gradient clipping
//! variants (global norm, per-layer norm, value).

use crate::autodiff::{Gradients, Tape, Value};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

fn default_beta() -> f64 {
    0.999
}
fn default_n() -> f64 {
    3.0
}
fn default_init_mu1() -> f64 {
    25.0
}
fn default_init_mu2() -> f64 {
    630.0
}
fn default_variance_floor() -> f64 {
    1e-8
}

/// Configuration of one ALRC state machine.
///
/// The default initial moments (25, 630) are deliberate overestimates for loss
/// scales near unity: clipping stays inactive until the moments decay down to
/// the true loss statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlrcConfig {
    /// Number of standard deviations above the running mean to clip to.
    #[serde(default = "default_n")]
    pub n: f64,
    /// Decay rate of the running mean of the loss.
    #[serde(default = "default_beta")]
    pub beta1: f64,
    /// Decay rate of the running mean of the squared loss.
    #[serde(default = "default_beta")]
    pub beta2: f64,
    #[serde(default = "default_init_mu1")]
    pub init_mu1: f64,
    #[serde(default = "default_init_mu2")]
    pub init_mu2: f64,
    /// Also scale up losses more than `n` standard deviations below the mean.
    #[serde(default)]
    pub clip_below: bool,
    /// Clamp on the variance estimate before the square root.
    #[serde(default = "default_variance_floor")]
    pub variance_floor: f64,
    /// Ablation: update the moments with the clipped loss instead of the raw
    /// loss. The standard algorithm uses the raw loss.
    #[serde(default)]
    pub update_with_clipped: bool,
}

impl Default for AlrcConfig {
    fn default() -> Self {
        AlrcConfig {
            n: default_n(),
            beta1: default_beta(),
            beta2: default_beta(),
            init_mu1: default_init_mu1(),
            init_mu2: default_init_mu2(),
            clip_below: false,
            variance_floor: default_variance_floor(),
            update_with_clipped: false,
        }
    }
}

impl AlrcConfig {
    pub fn with_n(n: f64) -> Self {
        AlrcConfig { n, ..Default::default() }
    }

    pub fn with_moments(init_mu1: f64, init_mu2: f64) -> Self {
        AlrcConfig { init_mu1, init_mu2, ..Default::default() }
    }
}

/// Running moments of the loss. One state per trial, owned by its training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct AlrcState {
    config: AlrcConfig,
    mu1: f64,
    mu2: f64,
}

impl AlrcState {
    pub fn new(config: AlrcConfig) -> Result<Self> {
        if !(0.0 < config.beta1 && config.beta1 < 1.0 && 0.0 < config.beta2 && config.beta2 < 1.0)
        {
            return Err(Error::Config(format!(
                "alrc decay rates must be in (0,1), got ({}, {})",
                config.beta1, config.beta2
            )));
        }
        if config.n <= 0.0 {
            return Err(Error::Config(format!("alrc n must be > 0, got {}", config.n)));
        }
        if config.variance_floor <= 0.0 {
            return Err(Error::Config("alrc variance floor must be > 0".into()));
        }
        if config.init_mu1 * config.init_mu1 >= config.init_mu2 {
            return Err(Error::Config(format!(
                "alrc initial moments must satisfy mu1^2 < mu2, got ({}, {})",
                config.init_mu1, config.init_mu2
            )));
        }
        Ok(AlrcState { mu1: config.init_mu1, mu2: config.init_mu2, config })
    }

    pub fn config(&self) -> &AlrcConfig {
        &self.config
    }

    pub fn mu1(&self) -> f64 {
        self.mu1
    }

    pub fn mu2(&self) -> f64 {
        self.mu2
    }

    /// Restore previously checkpointed moments.
    pub fn restore(config: AlrcConfig, mu1: f64, mu2: f64) -> Result<Self> {
        let mut state = AlrcState::new(config)?;
        state.mu1 = mu1;
        state.mu2 = mu2;
        Ok(state)
    }

    /// Loss standard deviation estimate, variance clamped to the floor.
    pub fn sigma(&self) -> f64 {
        (self.mu2 - self.mu1 * self.mu1).max(self.config.variance_floor).sqrt()
    }

    pub fn l_max(&self) -> f64 {
        self.mu1 + self.config.n * self.sigma()
    }

    pub fn l_min(&self) -> f64 {
        self.mu1 - self.config.n * self.sigma()
    }

    /// Clipping decision for one positive loss value: the stop-gradient scale
    /// and whether it clips. Scale is in (0,1] for upper clipping and > 1 when
    /// `clip_below` rescales an unusually low loss.
    pub fn clip_scale(&self, loss: f64) -> (f64, bool) {
        let l_max = self.l_max();
        if loss > l_max && l_max > 0.0 {
            return (l_max / loss, true);
        }
        if self.config.clip_below {
            let l_min = self.l_min();
            // A nonpositive bound cannot trigger in the positive-loss regime.
            if l_min > 0.0 && loss < l_min && loss > 0.0 {
                return (l_min / loss, true);
            }
        }
        (1.0, false)
    }

    /// Update both moments with the raw (unclipped) loss. Called once per
    /// optimizer step, after the clipping decision was taken.
    pub fn update(&mut self, raw_loss: f64) -> Result<()> {
        if !raw_loss.is_finite() {
            return Err(Error::TrainingFailure {
                step: 0,
                detail: format!("non-finite loss {raw_loss} would poison the running moments"),
            });
        }
        self.mu1 = self.config.beta1 * self.mu1 + (1.0 - self.config.beta1) * raw_loss;
        self.mu2 = self.config.beta2 * self.mu2 + (1.0 - self.config.beta2) * raw_loss * raw_loss;
        Ok(())
    }
}

/// Result of applying a loss stabilizer at one step.
///
/// `raw_loss` is always the pre-stabilizer value at the policy's granularity;
/// monitoring reports it regardless of what was handed to backward.
#[derive(Debug)]
pub struct ClipOutcome {
    /// Raw losses at the stabilizer's granularity (one entry in batch mode).
    pub raw_loss: Vec<f64>,
    /// Mean of `raw_loss`; the value the moment update consumes.
    pub raw_mean: f64,
    /// Multiplier applied per entry; 1 where unclipped.
    pub scale: Vec<f64>,
    /// Clip flags per entry.
    pub clipped: Vec<bool>,
    /// Scalar loss node to hand to backward.
    pub effective_loss: Value,
    /// Forward value of `effective_loss`.
    pub effective_forward: f64,
}

impl ClipOutcome {
    pub fn any_clipped(&self) -> bool {
        self.clipped.iter().any(|&c| c)
    }

    /// Aggregate attenuation: effective forward over raw mean.
    pub fn aggregate_scale(&self) -> f64 {
        if self.raw_mean == 0.0 {
            1.0
        } else {
            self.effective_forward / self.raw_mean
        }
    }
}

fn positive_loss_check(values: &[f64], strictly: bool) -> Result<()> {
    for &v in values {
        if !v.is_finite() {
            return Err(Error::TrainingFailure {
                step: 0,
                detail: format!("non-finite loss {v}"),
            });
        }
        if v < 0.0 || (strictly && v == 0.0) {
            return Err(Error::Domain(format!(
                "alrc operates on positive losses, got {v}; add a constant offset to \
                 the loss to make it positive"
            )));
        }
    }
    Ok(())
}

/// Build `stop_gradient(scale) * x` on the tape for a per-element scale vector.
fn scaled_by_constant<T: Element>(tape: &mut Tape<T>, x: Value, scales: &[f64]) -> Result<Value> {
    let shape = tape.value(x).shape().to_vec();
    let factor = tape.input(Tensor::from_f64s(shape, scales)?);
    let factor = tape.stop_gradient(factor);
    tape.mul(factor, x)
}

/// ALRC on a scalar loss node. The clipping decision comes from the current
/// state; the state itself is not updated (call [`AlrcState::update`] with the
/// raw loss once per optimizer step).
pub fn alrc_apply<T: Element>(
    state: &AlrcState,
    tape: &mut Tape<T>,
    loss: Value,
) -> Result<ClipOutcome> {
    let raw = tape.value(loss).scalar_value()?.to_f64();
    positive_loss_check(&[raw], true)?;
    let (scale, clipped) = state.clip_scale(raw);
    let effective_loss = if clipped {
        scaled_by_constant(tape, loss, &[scale])?
    } else {
        loss
    };
    let effective_forward = tape.value(effective_loss).scalar_value()?.to_f64();
    Ok(ClipOutcome {
        raw_loss: vec![raw],
        raw_mean: raw,
        scale: vec![scale],
        clipped: vec![clipped],
        effective_loss,
        effective_forward,
    })
}

/// ALRC applied to each sample's loss independently, all against the same
/// current `L_max`. `losses` is a rank-1 tensor of per-sample losses; the
/// effective loss is the mean of the per-sample effective losses. Moments are
/// later updated with the mean of the raw losses.
pub fn alrc_apply_per_sample<T: Element>(
    state: &AlrcState,
    tape: &mut Tape<T>,
    losses: Value,
) -> Result<ClipOutcome> {
    if tape.value(losses).shape().len() != 1 {
        return Err(Error::Usage(format!(
            "per-sample alrc wants a rank-1 loss vector, got shape {:?}",
            tape.value(losses).shape()
        )));
    }
    let raw: Vec<f64> = tape.value(losses).data().iter().map(|v| v.to_f64()).collect();
    positive_loss_check(&raw, true)?;
    let decisions: Vec<(f64, bool)> = raw.iter().map(|&l| state.clip_scale(l)).collect();
    let scale: Vec<f64> = decisions.iter().map(|d| d.0).collect();
    let clipped: Vec<bool> = decisions.iter().map(|d| d.1).collect();
    let effective_loss = if clipped.iter().any(|&c| c) {
        let scaled = scaled_by_constant(tape, losses, &scale)?;
        tape.mean(scaled)
    } else {
        tape.mean(losses)
    };
    let raw_mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let effective_forward = tape.value(effective_loss).scalar_value()?.to_f64();
    Ok(ClipOutcome {
        raw_loss: raw,
        raw_mean,
        scale,
        clipped,
        effective_loss,
        effective_forward,
    })
}

/// ALRC applied to loss summands, such as per-pixel errors. Every element of
/// `error_map` is clipped against `L_max` from the shared summand-level
/// moments; the effective loss is the mean of the clipped map, and the moments
/// are later updated with the mean raw summand error. Summands must be >= 0.
pub fn alrc_apply_per_summand<T: Element>(
    state: &AlrcState,
    tape: &mut Tape<T>,
    error_map: Value,
) -> Result<ClipOutcome> {
    if tape.value(error_map).is_scalar() {
        return alrc_apply(state, tape, error_map);
    }
    let raw: Vec<f64> = tape.value(error_map).data().iter().map(|v| v.to_f64()).collect();
    positive_loss_check(&raw, false)?;
    let decisions: Vec<(f64, bool)> = raw.iter().map(|&l| state.clip_scale(l)).collect();
    let scale: Vec<f64> = decisions.iter().map(|d| d.0).collect();
    let clipped: Vec<bool> = decisions.iter().map(|d| d.1).collect();
    let map = if clipped.iter().any(|&c| c) {
        scaled_by_constant(tape, error_map, &scale)?
    } else {
        error_map
    };
    // Two-stage reduction keeps the unclipped graph identical to the
    // stabilizer-free loss pipeline.
    let effective_loss = if tape.value(map).shape().len() >= 2 {
        let per_sample = tape.mean_per_sample(map)?;
        tape.mean(per_sample)
    } else {
        tape.mean(map)
    };
    let raw_mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let effective_forward = tape.value(effective_loss).scalar_value()?.to_f64();
    Ok(ClipOutcome {
        raw_loss: raw,
        raw_mean,
        scale,
        clipped,
        effective_loss,
        effective_forward,
    })
}

/// Loss transform L -> min(L, sqrt(h*L)) on the tape. `h` must be positive.
pub fn huberize<T: Element>(tape: &mut Tape<T>, loss: Value, h: f64) -> Result<Value> {
    tape.huberize(loss, h)
}

/// Scale all gradients uniformly so their joint L2 norm does not exceed
/// `threshold`. Zero or absent gradients are left untouched.
pub fn grad_clip_global_norm<T: Element>(
    grads: &mut [Tensor<T>],
    threshold: f64,
) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt();
    if norm > threshold && norm > 0.0 {
        let t = T::from_f64(threshold);
        let n = T::from_f64(norm);
        for g in grads {
            for v in g.data_mut() {
                // multiply-then-divide keeps simple ratios exact
                *v = *v * t / n;
            }
        }
    }
}

/// Per-tensor analog of [`grad_clip_global_norm`]: each gradient tensor is
/// scaled by its own norm independently.
pub fn grad_clip_layer_norm<T: Element>(grads: &mut [Tensor<T>], threshold: f64) {
    for g in grads {
        let norm = g.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
        if norm > threshold && norm > 0.0 {
            let t = T::from_f64(threshold);
            let n = T::from_f64(norm);
            for v in g.data_mut() {
                *v = *v * t / n;
            }
        }
    }
}

/// Clamp every gradient component to [-threshold, threshold].
pub fn grad_clip_value<T: Element>(grads: &mut [Tensor<T>], threshold: f64) {
    let t = T::from_f64(threshold);
    for g in grads {
        for v in g.data_mut() {
            if *v > t {
                *v = t;
            } else if *v < -t {
                *v = -t;
            }
        }
    }
}

/// Which losses an ALRC policy clips individually.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Clip the batch-mean loss.
    Batch,
    /// Clip each sample's loss; update moments with the batch mean.
    #[default]
    PerSample,
    /// Clip each loss summand (per-pixel error); update moments with the mean
    /// summand error.
    PerSummand,
}

/// Tagged choice of stabilizer. Exactly one variant is active per policy;
/// ALRC and huberization compose only through the explicit
/// `huber_after_alrc` variant (ALRC sees the pre-Huber loss, huberization is
/// applied to the ALRC-scaled loss).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum StabilizerPolicy {
    None,
    Alrc {
        #[serde(flatten)]
        config: AlrcConfig,
        #[serde(default)]
        granularity: Granularity,
    },
    Huber {
        h: f64,
    },
    HuberAfterAlrc {
        h: f64,
        #[serde(flatten)]
        config: AlrcConfig,
        #[serde(default)]
        granularity: Granularity,
    },
    GradClipGlobalNorm {
        threshold: f64,
    },
    GradClipLayerNorm {
        threshold: f64,
    },
    GradClipValue {
        threshold: f64,
    },
}

impl StabilizerPolicy {
    pub fn alrc(n: f64) -> Self {
        StabilizerPolicy::Alrc {
            config: AlrcConfig::with_n(n),
            granularity: Granularity::default(),
        }
    }

    /// The ALRC configuration embedded in this policy, if any.
    pub fn alrc_config(&self) -> Option<&AlrcConfig> {
        match self {
            StabilizerPolicy::Alrc { config, .. }
            | StabilizerPolicy::HuberAfterAlrc { config, .. } => Some(config),
            _ => None,
        }
    }

    pub fn short_name(&self) -> String {
        match self {
            StabilizerPolicy::None => "none".into(),
            StabilizerPolicy::Alrc { config, .. } => format!("alrc_n{}", config.n),
            StabilizerPolicy::Huber { h } => format!("huber_h{h}"),
            StabilizerPolicy::HuberAfterAlrc { h, config, .. } => {
                format!("huber_h{h}_alrc_n{}", config.n)
            }
            StabilizerPolicy::GradClipGlobalNorm { threshold } => {
                format!("gclip_norm{threshold}")
            }
            StabilizerPolicy::GradClipLayerNorm { threshold } => {
                format!("gclip_layer{threshold}")
            }
            StabilizerPolicy::GradClipValue { threshold } => format!("gclip_val{threshold}"),
        }
    }
}

/// Apply a gradient-space policy in place; loss-space policies are no-ops here.
pub fn apply_gradient_policy<T: Element>(policy: &StabilizerPolicy, grads: &mut [Tensor<T>]) {
    match policy {
        StabilizerPolicy::GradClipGlobalNorm { threshold } => {
            grad_clip_global_norm(grads, *threshold)
        }
        StabilizerPolicy::GradClipLayerNorm { threshold } => {
            grad_clip_layer_norm(grads, *threshold)
        }
        StabilizerPolicy::GradClipValue { threshold } => grad_clip_value(grads, *threshold),
        _ => {}
    }
}

/// Collect gradients for a parameter list in order, zeros where no gradient
/// flowed.
pub fn gradient_tensors<T: Element>(
    tape: &Tape<T>,
    grads: &Gradients<T>,
    params: &[Value],
) -> Vec<Tensor<T>> {
    params.iter().map(|&p| grads.wrt_or_zeros(tape, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(mu1: f64, mu2: f64, n: f64) -> AlrcState {
        AlrcState::restore(AlrcConfig { n, ..Default::default() }, mu1, mu2).unwrap()
    }

    #[test]
    fn rejects_inverted_initial_moments() {
        let bad = AlrcConfig { init_mu1: 10.0, init_mu2: 50.0, ..Default::default() };
        assert!(AlrcState::new(bad).is_err());
    }

    #[test]
    fn clip_scale_hand_values() {
        // mu1=1, mu2=2, n=3 -> sigma=1, L_max=4; L=10 clips at 0.4.
        let s = state(1.0, 2.0, 3.0);
        assert_eq!(s.sigma(), 1.0);
        assert_eq!(s.l_max(), 4.0);
        assert_eq!(s.clip_scale(10.0), (0.4, true));
        assert_eq!(s.clip_scale(3.0), (1.0, false));
    }

    #[test]
    fn degenerate_variance_uses_floor() {
        let floor = default_variance_floor();
        let s = state(1.0, 1.0 + floor, 3.0);
        assert!((s.sigma() - floor.sqrt()).abs() < 1e-12);
        let (scale, clipped) = s.clip_scale(1.0);
        assert_eq!((scale, clipped), (1.0, false));
    }

    #[test]
    fn alrc_apply_scales_loss_and_gradients() {
        let s = state(1.0, 2.0, 3.0);
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::scalar(5.0));
        let loss = tape.scale(w, 2.0); // loss = 2w = 10, dloss/dw = 2
        let out = alrc_apply(&s, &mut tape, loss).unwrap();
        assert_eq!(out.raw_mean, 10.0);
        assert_eq!(out.scale, vec![0.4]);
        assert_eq!(out.effective_forward, 4.0);
        let grads = tape.backward(out.effective_loss).unwrap();
        // unclipped gradient is 2; clipped gradient is 0.4 * 2 = 0.8
        assert!((grads.wrt(w).unwrap().scalar_value().unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn alrc_noop_leaves_the_same_node() {
        let s = state(1.0, 2.0, 3.0);
        let mut tape = Tape::<f64>::new();
        let loss = tape.input(Tensor::scalar(3.0));
        let out = alrc_apply(&s, &mut tape, loss).unwrap();
        assert_eq!(out.effective_loss, loss);
        assert!(!out.any_clipped());
    }

    #[test]
    fn alrc_rejects_non_positive_loss() {
        let s = state(1.0, 2.0, 3.0);
        let mut tape = Tape::<f64>::new();
        let loss = tape.input(Tensor::scalar(0.0));
        match alrc_apply(&s, &mut tape, loss) {
            Err(Error::Domain(msg)) => assert!(msg.contains("offset"), "{msg}"),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn per_sample_clips_independently() {
        // losses [10, 3]: sample 1 clips to 4 (scale 0.4), sample 2 untouched;
        // effective mean = (4+3)/2 = 3.5.
        let s = state(1.0, 2.0, 3.0);
        let mut tape = Tape::<f64>::new();
        let losses = tape.input(Tensor::new(vec![2], vec![10.0, 3.0]).unwrap());
        let out = alrc_apply_per_sample(&s, &mut tape, losses).unwrap();
        assert_eq!(out.scale, vec![0.4, 1.0]);
        assert_eq!(out.clipped, vec![true, false]);
        assert_eq!(out.effective_forward, 3.5);
        assert_eq!(out.raw_mean, 6.5);
    }

    #[test]
    fn per_sample_noop_is_plain_mean() {
        let s = state(1.0, 2.0, 3.0);
        let mut tape = Tape::<f64>::new();
        let losses = tape.input(Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
        let out = alrc_apply_per_sample(&s, &mut tape, losses).unwrap();
        assert!(!out.any_clipped());
        assert_eq!(out.effective_forward, 2.5);
    }

    #[test]
    fn identical_samples_match_batch_mode() {
        let s = state(1.0, 2.0, 3.0);
        let mut tape = Tape::<f64>::new();
        let losses = tape.input(Tensor::new(vec![3], vec![10.0, 10.0, 10.0]).unwrap());
        let per_sample = alrc_apply_per_sample(&s, &mut tape, losses).unwrap();
        let mut tape2 = Tape::<f64>::new();
        let loss = tape2.input(Tensor::scalar(10.0));
        let batch = alrc_apply(&s, &mut tape2, loss).unwrap();
        assert_eq!(per_sample.effective_forward, batch.effective_forward);
    }

    #[test]
    fn per_summand_rescales_only_outliers() {
        // 2x2 map [[10,1],[1,1]]: only the 10 clips, to forward value 4.
        let s = state(1.0, 2.0, 3.0);
        let mut tape = Tape::<f64>::new();
        let map = tape.input(Tensor::new(vec![1, 2, 2], vec![10.0, 1.0, 1.0, 1.0]).unwrap());
        let out = alrc_apply_per_summand(&s, &mut tape, map).unwrap();
        assert_eq!(out.clipped, vec![true, false, false, false]);
        assert_eq!(out.scale[0], 0.4);
        assert!((out.effective_forward - (4.0 + 1.0 + 1.0 + 1.0) / 4.0).abs() < 1e-15);
        assert_eq!(out.raw_mean, 13.0 / 4.0);
    }

    #[test]
    fn per_summand_uniform_map_untouched() {
        let s = state(1.0, 2.0, 3.0);
        let mut tape = Tape::<f64>::new();
        let map = tape.input(Tensor::filled(vec![1, 2, 2], 1.0));
        let out = alrc_apply_per_summand(&s, &mut tape, map).unwrap();
        assert!(!out.any_clipped());
        assert_eq!(out.effective_forward, 1.0);
    }

    #[test]
    fn per_summand_scalar_reduces_to_batch_mode() {
        let s = state(1.0, 2.0, 3.0);
        let mut tape = Tape::<f64>::new();
        let map = tape.input(Tensor::scalar(10.0));
        let out = alrc_apply_per_summand(&s, &mut tape, map).unwrap();
        assert_eq!(out.effective_forward, 4.0);
        assert_eq!(out.scale, vec![0.4]);
    }

    #[test]
    fn below_mean_scaling() {
        // mu1=10, mu2=101, n=3 -> sigma=1, L_min=7; L=5 scales up by 1.4.
        let s = AlrcState::restore(
            AlrcConfig { n: 3.0, clip_below: true, ..Default::default() },
            10.0,
            101.0,
        )
        .unwrap();
        assert_eq!(s.l_min(), 7.0);
        assert_eq!(s.clip_scale(5.0), (1.4, true));
        // inside the band: untouched
        assert_eq!(s.clip_scale(9.0), (1.0, false));
        // nonpositive bound: lower clipping inactive
        let s2 = AlrcState::restore(
            AlrcConfig { n: 3.0, clip_below: true, ..Default::default() },
            1.0,
            2.0,
        )
        .unwrap();
        assert!(s2.l_min() <= 0.0);
        assert_eq!(s2.clip_scale(0.5), (1.0, false));
    }

    #[test]
    fn ema_update_hand_values() {
        let mut s = state(1.0, 2.0, 3.0);
        s.update(2.0).unwrap();
        assert!((s.mu1() - 1.001).abs() < 1e-12);
        assert!((s.mu2() - (0.999 * 2.0 + 0.001 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn ema_constant_loss_closed_form() {
        // |mu1 - c| = |mu1_0 - c| * beta1^k exactly
        let mut s = state(25.0, 630.0, 3.0);
        let c = 2.0;
        let k = 200;
        for _ in 0..k {
            s.update(c).unwrap();
        }
        let expected = (25.0 - c) * 0.999f64.powi(k);
        assert!(((s.mu1() - c) - expected).abs() / expected < 1e-10);
    }

    #[test]
    fn nan_loss_does_not_poison_moments() {
        let mut s = state(1.0, 2.0, 3.0);
        let before = (s.mu1(), s.mu2());
        assert!(matches!(s.update(f64::NAN), Err(Error::TrainingFailure { .. })));
        assert_eq!((s.mu1(), s.mu2()), before);
    }

    #[test]
    fn huberize_hand_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::scalar(0.5));
        let b = tape.input(Tensor::scalar(4.0));
        let c = tape.input(Tensor::scalar(1.0));
        let ha = huberize(&mut tape, a, 1.0).unwrap();
        let hb = huberize(&mut tape, b, 1.0).unwrap();
        let hc = huberize(&mut tape, c, 1.0).unwrap();
        assert_eq!(tape.value(ha).scalar_value().unwrap(), 0.5);
        assert_eq!(tape.value(hb).scalar_value().unwrap(), 2.0);
        // continuity at the crossover L = h
        assert!((tape.value(hc).scalar_value().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huberize_rejects_non_positive_h() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::scalar(0.5));
        assert!(huberize(&mut tape, a, 0.0).is_err());
    }

    #[test]
    fn huberize_derivative_above_crossover() {
        // d/dL min(L, sqrt(hL)) = 0.5*sqrt(h/L) for L >= h, via autodiff.
        for (l, h) in [(4.0, 1.0), (9.0, 1.0), (8.0, 2.0)] {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(Tensor::scalar(l));
            let y = huberize(&mut tape, x, h).unwrap();
            let grads = tape.backward(y).unwrap();
            let g = grads.wrt(x).unwrap().scalar_value().unwrap();
            let expected = 0.5 * (h / l).sqrt();
            assert!((g - expected).abs() < 1e-12);
            assert!(g <= 0.5);
        }
    }

    #[test]
    fn global_norm_clip_hand_values() {
        let mut grads = vec![
            Tensor::<f64>::new(vec![1], vec![3.0]).unwrap(),
            Tensor::<f64>::new(vec![1], vec![4.0]).unwrap(),
        ];
        grad_clip_global_norm(&mut grads, 1.0);
        assert_eq!(grads[0].data(), &[0.6]);
        assert_eq!(grads[1].data(), &[0.8]);
    }

    #[test]
    fn global_norm_clip_below_threshold_is_identity() {
        let orig = vec![Tensor::<f32>::new(vec![2], vec![0.25, -0.125]).unwrap()];
        let mut grads = orig.clone();
        grad_clip_global_norm(&mut grads, 10.0);
        for (a, b) in orig[0].data().iter().zip(grads[0].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn global_norm_clip_handles_zero_gradients() {
        let mut grads = vec![Tensor::<f64>::zeros(vec![3])];
        grad_clip_global_norm(&mut grads, 1.0);
        assert!(grads[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_clip_is_per_tensor() {
        // norms 5 and 0.5 at threshold 1: first scaled by 0.2, second untouched.
        let mut grads = vec![
            Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap(),
            Tensor::<f64>::new(vec![1], vec![0.5]).unwrap(),
        ];
        grad_clip_layer_norm(&mut grads, 1.0);
        assert_eq!(grads[0].data(), &[0.6, 0.8]);
        assert_eq!(grads[1].data(), &[0.5]);
    }

    #[test]
    fn value_clip_clamps_components() {
        let mut grads = vec![Tensor::<f64>::new(vec![3], vec![-3.0, 0.5, 2.0]).unwrap()];
        grad_clip_value(&mut grads, 1.0);
        assert_eq!(grads[0].data(), &[-1.0, 0.5, 1.0]);
    }

    #[test]
    fn infinite_threshold_is_identity() {
        let orig = vec![Tensor::<f64>::new(vec![2], vec![30.0, -40.0]).unwrap()];
        for clip in [grad_clip_global_norm, grad_clip_layer_norm, grad_clip_value] {
            let mut grads = orig.clone();
            clip(&mut grads, f64::INFINITY);
            assert_eq!(grads[0].data(), orig[0].data());
        }
    }

    #[test]
    fn direction_preserved_when_clipping() {
        // Gradient map under clipping equals scale x unclipped map.
        let build = |clip: Option<&AlrcState>| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let w = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
            let sq = tape.powi(w, 2).unwrap();
            let loss = tape.mean(sq); // = 14/3 > L_max = 4
            let target = match clip {
                Some(s) => alrc_apply(s, &mut tape, loss).unwrap().effective_loss,
                None => loss,
            };
            let grads = tape.backward(target).unwrap();
            grads.wrt(w).unwrap().data().to_vec()
        };
        let s = state(1.0, 2.0, 3.0);
        let clipped = build(Some(&s));
        let raw = build(None);
        let scale = s.l_max() / (14.0 / 3.0);
        for (c, r) in clipped.iter().zip(&raw) {
            assert!((c - scale * r).abs() <= 1e-12 * r.abs().max(1.0));
        }
    }

    mod policy_serde {
        use super::*;

        #[test]
        fn alrc_policy_roundtrips_through_toml() {
            let policy = StabilizerPolicy::Alrc {
                config: AlrcConfig { n: 2.5, clip_below: true, ..Default::default() },
                granularity: Granularity::PerSummand,
            };
            let text = toml::to_string(&policy).unwrap();
            let back: StabilizerPolicy = toml::from_str(&text).unwrap();
            assert_eq!(back, policy);
        }

        #[test]
        fn defaults_fill_in() {
            let policy: StabilizerPolicy = toml::from_str("variant = \"alrc\"").unwrap();
            match policy {
                StabilizerPolicy::Alrc { config, granularity } => {
                    assert_eq!(config.n, 3.0);
                    assert_eq!(config.beta1, 0.999);
                    assert_eq!(granularity, Granularity::PerSample);
                }
                other => panic!("{other:?}"),
            }
        }
    }

    mod moment_props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn moment_ordering_holds_over_random_sequences(
                losses in proptest::collection::vec(0.0f64..50.0, 1..200),
            ) {
                let mut s = state(25.0, 630.0, 3.0);
                for l in losses {
                    s.update(l).unwrap();
                    prop_assert!(
                        s.mu1() * s.mu1() <= s.mu2() + s.config().variance_floor,
                        "mu1^2 {} > mu2 {} + floor", s.mu1() * s.mu1(), s.mu2()
                    );
                }
            }

            #[test]
            fn upper_clip_scale_is_in_unit_interval(
                mu1 in 0.1f64..20.0,
                extra in 0.01f64..30.0,
                loss in 1e-3f64..1e6,
            ) {
                let mu2 = mu1 * mu1 + extra;
                let s = state(mu1, mu2, 3.0);
                let (scale, clipped) = s.clip_scale(loss);
                if clipped {
                    prop_assert!(scale > 0.0 && scale <= 1.0);
                } else {
                    prop_assert_eq!(scale, 1.0);
                }
            }
        }
    }
}

//! Composite segmentation objective: weighted focal, soft dice and log-cosh dice terms.
//!
//! All terms are evaluated on sigmoid probabilities of raw logits. Gradients with respect
//! to the logits are derived in closed form so the trainer can inject them into any
//! autodiff graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceReduction {
    /// One dice over every pixel of the batch.
    Global,
    /// Dice per image, then averaged.
    PerImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_f: f64,
    pub w_d: f64,
    pub w_lcd: f64,
    /// Focal weight of positive pixels; negatives get `1 - alpha_t`.
    pub alpha_t: f64,
    pub gamma: f64,
    pub dice_eps: f64,
    pub dice_reduction: DiceReduction,
    /// Weight of an extra composite loss applied to the prompt logits themselves.
    pub prompt_aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_f: 2.0,
            w_d: 2.0,
            w_lcd: 3.0,
            alpha_t: 0.25,
            gamma: 2.0,
            dice_eps: 1e-6,
            dice_reduction: DiceReduction::Global,
            prompt_aux_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_f, self.w_d, self.w_lcd, self.prompt_aux_weight];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if self.w_f == 0.0 && self.w_d == 0.0 && self.w_lcd == 0.0 {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        if !(self.alpha_t > 0.0 && self.alpha_t < 1.0) {
            return Err(Error::Config(format!(
                "alpha_t must lie in (0, 1), got {}",
                self.alpha_t
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.dice_eps.is_finite() && self.dice_eps > 0.0) {
            return Err(Error::Config(format!(
                "dice_eps must be > 0, got {}",
                self.dice_eps
            )));
        }
        Ok(())
    }

    /// Keeps the configured weights of the selected terms and zeroes the others.
    pub fn with_terms(&self, focal: bool, dice: bool, log_cosh_dice: bool) -> Self {
        Self {
            w_f: if focal { self.w_f } else { 0.0 },
            w_d: if dice { self.w_d } else { 0.0 },
            w_lcd: if log_cosh_dice { self.w_lcd } else { 0.0 },
            ..*self
        }
    }
}

/// Flattened logits and binary labels.
#[derive(Clone, Copy, Debug)]
pub struct PixelBatch<'a> {
    logits: &'a [f64],
    labels: &'a [u8],
    pixels_per_image: usize,
}

impl<'a> PixelBatch<'a> {
    pub fn new(logits: &'a [f64], labels: &'a [u8]) -> Result<Self> {
        Self::with_images(logits, labels, logits.len())
    }

    /// A batch made of consecutive images of `pixels_per_image` pixels each.
    pub fn with_images(logits: &'a [f64], labels: &'a [u8], pixels_per_image: usize) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Contract("pixel batch is empty".into()));
        }
        if logits.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} logits but {} labels",
                logits.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&m| m > 1) {
            return Err(Error::Contract("labels must be 0 or 1".into()));
        }
        if pixels_per_image == 0 || logits.len() % pixels_per_image != 0 {
            return Err(Error::Contract(format!(
                "{} pixels do not split into images of {pixels_per_image}",
                logits.len()
            )));
        }
        Ok(Self {
            logits,
            labels,
            pixels_per_image,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    fn images(&self) -> impl Iterator<Item = (&'a [f64], &'a [u8])> {
        self.logits
            .chunks(self.pixels_per_image)
            .zip(self.labels.chunks(self.pixels_per_image))
    }
}

/// Per-term values; `total` is the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub dice: f64,
    pub log_cosh_dice: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.focal.is_finite()
            && self.dice.is_finite()
            && self.log_cosh_dice.is_finite()
            && self.total.is_finite()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(z))` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Focal term of one pixel and its derivative with respect to the logit.
fn focal_pixel(z: f64, label: u8, cfg: &LossConfig) -> (f64, f64) {
    // p_t = sigmoid(s z) with s = +1 for positives and -1 for negatives.
    let (s, alpha) = if label == 1 {
        (1.0, cfg.alpha_t)
    } else {
        (-1.0, 1.0 - cfg.alpha_t)
    };
    let p_t = sigmoid(s * z);
    let one_minus = sigmoid(-s * z);
    let raw_log = log_sigmoid(s * z);
    let clamped = raw_log < LOG_FLOOR.ln();
    let log_pt = if clamped { LOG_FLOOR.ln() } else { raw_log };
    let modulator = one_minus.powf(cfg.gamma);
    let loss = -alpha * modulator * log_pt;

    // d/dz = s * p_t (1 - p_t) * d/dp_t.
    let from_modulator = if cfg.gamma == 0.0 {
        0.0
    } else {
        -cfg.gamma * p_t * modulator * log_pt
    };
    let from_log = if clamped { 0.0 } else { modulator * one_minus };
    let grad = -s * alpha * (from_log + from_modulator);
    (loss, grad)
}

pub fn focal_loss(batch: &PixelBatch, cfg: &LossConfig) -> f64 {
    let n = batch.len() as f64;
    batch
        .logits
        .iter()
        .zip(batch.labels)
        .map(|(&z, &m)| focal_pixel(z, m, cfg).0)
        .sum::<f64>()
        / n
}

struct DiceParts {
    intersection: f64,
    prob_sum: f64,
    label_sum: f64,
}

fn dice_parts(logits: &[f64], labels: &[u8]) -> DiceParts {
    let mut parts = DiceParts {
        intersection: 0.0,
        prob_sum: 0.0,
        label_sum: 0.0,
    };
    for (&z, &m) in logits.iter().zip(labels) {
        let p = sigmoid(z);
        parts.intersection += p * f64::from(m);
        parts.prob_sum += p;
        parts.label_sum += f64::from(m);
    }
    parts
}

fn soft_dice_from_parts(parts: &DiceParts, eps: f64) -> f64 {
    1.0 - (2.0 * parts.intersection + eps) / (parts.prob_sum + parts.label_sum + eps)
}

/// Soft dice over probabilities `p` directly, used for hard 0/1 probabilities.
pub fn soft_dice_from_probabilities(probs: &[f64], labels: &[u8], eps: f64) -> f64 {
    let (mut inter, mut ps, mut ms) = (0.0, 0.0, 0.0);
    for (&p, &m) in probs.iter().zip(labels) {
        inter += p * f64::from(m);
        ps += p;
        ms += f64::from(m);
    }
    1.0 - (2.0 * inter + eps) / (ps + ms + eps)
}

/// Soft dice loss `1 - (2 sum p m + eps) / (sum p + sum m + eps)`.
pub fn dice_loss(batch: &PixelBatch, cfg: &LossConfig) -> f64 {
    let dice = per_image_dice(batch, cfg);
    dice.iter().sum::<f64>() / dice.len() as f64
}

fn per_image_dice(batch: &PixelBatch, cfg: &LossConfig) -> Vec<f64> {
    match cfg.dice_reduction {
        DiceReduction::Global => vec![soft_dice_from_parts(
            &dice_parts(batch.logits, batch.labels),
            cfg.dice_eps,
        )],
        DiceReduction::PerImage => batch
            .images()
            .map(|(z, m)| soft_dice_from_parts(&dice_parts(z, m), cfg.dice_eps))
            .collect(),
    }
}

pub fn log_cosh(x: f64) -> f64 {
    x.cosh().ln()
}

/// `log(cosh(dice_loss))`, averaged per image under per-image reduction.
pub fn log_cosh_dice_loss(batch: &PixelBatch, cfg: &LossConfig) -> f64 {
    let dice = per_image_dice(batch, cfg);
    dice.iter().map(|&d| log_cosh(d)).sum::<f64>() / dice.len() as f64
}

pub fn composite_loss(batch: &PixelBatch, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    Ok(breakdown(
        focal_loss(batch, cfg),
        dice_loss(batch, cfg),
        log_cosh_dice_loss(batch, cfg),
        cfg,
    ))
}

fn breakdown(focal: f64, dice: f64, log_cosh_dice: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        focal,
        dice,
        log_cosh_dice,
        total: cfg.w_f * focal + cfg.w_d * dice + cfg.w_lcd * log_cosh_dice,
    }
}

/// Composite loss and its gradient with respect to every logit.
pub fn composite_loss_with_grad(
    batch: &PixelBatch,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    let n = batch.len() as f64;
    let mut grad = vec![0f64; batch.len()];
    let mut focal = 0.0;
    for ((g, &z), &m) in grad.iter_mut().zip(batch.logits).zip(batch.labels) {
        let (l, dl) = focal_pixel(z, m, cfg);
        focal += l;
        *g = cfg.w_f * dl / n;
    }
    focal /= n;

    let chunk = match cfg.dice_reduction {
        DiceReduction::Global => batch.len(),
        DiceReduction::PerImage => batch.pixels_per_image,
    };
    let n_chunks = (batch.len() / chunk) as f64;
    let (mut dice_sum, mut lcd_sum) = (0.0, 0.0);
    for ((z, m), g) in batch
        .logits
        .chunks(chunk)
        .zip(batch.labels.chunks(chunk))
        .zip(grad.chunks_mut(chunk))
    {
        let parts = dice_parts(z, m);
        let d = soft_dice_from_parts(&parts, cfg.dice_eps);
        dice_sum += d;
        lcd_sum += log_cosh(d);
        // dD/dp_v = -(2 m_v S - (2I + eps)) / S^2 with S = sum p + sum m + eps.
        let s = parts.prob_sum + parts.label_sum + cfg.dice_eps;
        let numer = 2.0 * parts.intersection + cfg.dice_eps;
        let outer = (cfg.w_d + cfg.w_lcd * d.tanh()) / n_chunks;
        for ((gv, &zv), &mv) in g.iter_mut().zip(z).zip(m) {
            let p = sigmoid(zv);
            let dd_dp = -(2.0 * f64::from(mv) * s - numer) / (s * s);
            *gv += outer * dd_dp * p * (1.0 - p);
        }
    }
    Ok((
        breakdown(focal, dice_sum / n_chunks, lcd_sum / n_chunks, cfg),
        grad,
    ))
}

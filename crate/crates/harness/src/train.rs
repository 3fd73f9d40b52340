//! Desk-scale training: jittered search crops from synthetic sequences,
//! the detection loss and AdamW.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use mst_core::head::LossWeights;
use mst_core::model::Sample;
use mst_core::params::apply_batch_stats;
use mst_core::{BoxXYWH, Ctx, Mode, Tensor, Tracker, TrackerConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crop::{crop_pair, template_crop};
use crate::error::{HarnessError, Result};
use crate::image::Image;
use crate::optim::{clip_grad_norm, AdamW};
use crate::scene::SequenceDir;

/// Frames and ground truth of one sequence held in memory.
#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub name: String,
    pub frames: Vec<Image>,
    pub gt: Vec<BoxXYWH>,
}

impl LoadedSequence {
    pub fn load(seq: &SequenceDir) -> Result<Self> {
        let gt = seq.groundtruth()?;
        let frames = (0..seq.len()).map(|t| seq.frame(t)).collect::<Result<Vec<_>>>()?;
        let name = seq
            .dir
            .file_name()
            .map_or_else(|| "sequence".into(), |n| n.to_string_lossy().into_owned());
        Ok(Self { name, frames, gt })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch: usize,
    pub weight_decay: f64,
    /// Fraction of all steps spent on linear warm-up.
    pub warmup: f64,
    pub clip_norm: f64,
    /// Search-centre jitter as a fraction of `sqrt(w·h)`, per axis.
    pub shift_jitter: f64,
    /// Search-size jitter: the box scale is drawn from `exp(±scale_jitter)`.
    pub scale_jitter: f64,
    /// Random channel permutation and gain, identical for template and search.
    pub colour_augment: bool,
    pub bn_momentum: f64,
    /// Stops at the end of the first epoch that crosses this budget.
    pub time_limit: Option<Duration>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 5e-4,
            seed: 42,
            batch: 8,
            weight_decay: 1e-4,
            warmup: 0.05,
            clip_norm: 5.0,
            shift_jitter: 0.6,
            scale_jitter: 0.2,
            colour_augment: true,
            bn_momentum: 0.1,
            time_limit: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
}

/// Final (or last finite) weights and the loss curve. `abort` is set when
/// training stopped on a non-finite loss; `tracker` then holds the weights
/// from before the failing step.
pub struct TrainReport {
    pub tracker: Tracker<f64>,
    pub epochs: Vec<EpochLoss>,
    pub steps: usize,
    pub elapsed: Duration,
    pub abort: Option<HarnessError>,
}

pub fn loss_csv(epochs: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,loss,cls,giou,l1\n");
    for e in epochs {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", e.epoch, e.loss, e.cls, e.giou, e.l1);
    }
    s
}

/// Template crop of frame 0, as the tracker sees it.
pub fn template_tensor(seq: &LoadedSequence, cfg: &TrackerConfig) -> Tensor<f64> {
    template_crop(&seq.frames[0], &seq.gt[0], cfg.template_size).to_tensor()
}

/// Search crop of frame `t` around a jittered copy of its ground truth.
pub fn jittered_sample<R: Rng>(
    seq: &LoadedSequence,
    template: &Tensor<f64>,
    t: usize,
    cfg: &TrackerConfig,
    opts: &TrainOptions,
    rng: &mut R,
) -> Sample<f64> {
    let gt = seq.gt[t];
    let r = (gt.w * gt.h).sqrt();
    let (cx, cy) = gt.center();
    let dx = rng.gen_range(-1.0..=1.0) * opts.shift_jitter * r;
    let dy = rng.gen_range(-1.0..=1.0) * opts.shift_jitter * r;
    let s = (rng.gen_range(-1.0..=1.0) * opts.scale_jitter).exp();
    let prev = BoxXYWH::from_center(cx + dx, cy + dy, gt.w * s, gt.h * s);
    let (crop, _, norm) = crop_pair(&seq.frames[t], &prev, &gt, cfg.search_size);
    let mut sample = Sample {
        template: template.clone(),
        search: crop.to_tensor(),
        gt: norm,
    };
    if opts.colour_augment {
        let mut perm = [0usize, 1, 2];
        perm.shuffle(rng);
        let gain = [0, 1, 2].map(|_| rng.gen_range(0.8..1.25));
        for img in [&mut sample.template, &mut sample.search] {
            *img = recolour(img, perm, gain);
        }
    }
    sample
}

fn recolour(img: &Tensor<f64>, perm: [usize; 3], gain: [f64; 3]) -> Tensor<f64> {
    let d = img.data();
    Tensor::from_fn(img.shape(), |i| {
        let (px, c) = (i / 3, i % 3);
        d[px * 3 + perm[c]] * gain[c]
    })
}

fn lr_at(step: usize, total: usize, opts: &TrainOptions) -> f64 {
    let warm = ((total as f64 * opts.warmup).ceil() as usize).max(1);
    if step < warm {
        return opts.lr * (step + 1) as f64 / warm as f64;
    }
    // cosine from lr down to 5% of lr
    let p = (step - warm) as f64 / (total - warm).max(1) as f64;
    opts.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Trains from scratch; `on_epoch` sees each epoch's mean loss.
pub fn train(
    cfg: &TrackerConfig,
    data: &[LoadedSequence],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(HarnessError::Usage("training needs at least one sequence".into()));
    }
    if opts.batch == 0 {
        return Err(HarnessError::Usage("batch size must be positive".into()));
    }
    let start = Instant::now();
    let mut tracker = Tracker::<f64>::new(cfg.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let templates: Vec<_> = data.iter().map(|s| template_tensor(s, cfg)).collect();
    let mut index: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.frames.len()).map(move |t| (i, t)))
        .collect();
    let per_epoch = index.len().div_ceil(opts.batch);
    let total = per_epoch * opts.epochs;
    let mut opt = AdamW::new(opts.weight_decay);
    let mut epochs = Vec::new();
    let mut step = 0;
    let weights = LossWeights::default();
    for epoch in 1..=opts.epochs {
        index.shuffle(&mut rng);
        let mut acc = EpochLoss {
            epoch,
            loss: 0.0,
            cls: 0.0,
            giou: 0.0,
            l1: 0.0,
        };
        for chunk in index.chunks(opts.batch) {
            let samples: Vec<_> = chunk
                .iter()
                .map(|&(i, t)| jittered_sample(&data[i], &templates[i], t, cfg, opts, &mut rng))
                .collect();
            let mut ctx = Ctx::new(&tracker.store, Mode::Train);
            let outcome = tracker.loss(&mut ctx, &samples, weights).and_then(|l| {
                let v = ctx.value(l.total).item();
                let grads = ctx.param_grads(l.total)?;
                Ok((l, v, grads))
            });
            let (l, value, mut grads) = match outcome {
                Ok(x) if x.1.is_finite() => x,
                Ok(_) | Err(mst_core::Error::NonFinite { .. }) => {
                    return Ok(TrainReport {
                        tracker,
                        epochs,
                        steps: step,
                        elapsed: start.elapsed(),
                        abort: Some(HarnessError::Numeric(format!("non-finite loss at step {step}"))),
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let stats = ctx.take_batch_stats();
            drop(ctx);
            clip_grad_norm(&mut grads, opts.clip_norm);
            opt.step(&mut tracker.store, &grads, lr_at(step, total, opts));
            apply_batch_stats(&mut tracker.store, &stats, opts.bn_momentum);
            let k = chunk.len() as f64;
            acc.loss += value * k;
            acc.cls += l.cls * k;
            acc.giou += l.giou * k;
            acc.l1 += l.l1 * k;
            step += 1;
        }
        let n = index.len() as f64;
        acc.loss /= n;
        acc.cls /= n;
        acc.giou /= n;
        acc.l1 /= n;
        on_epoch(&acc);
        epochs.push(acc);
        if opts.time_limit.is_some_and(|lim| start.elapsed() >= lim) {
            break;
        }
    }
    Ok(TrainReport {
        tracker,
        epochs,
        steps: step,
        elapsed: start.elapsed(),
        abort: None,
    })
}

//! Training objective `lambda1 * L_pixel + lambda2 * L_fea` and the optimizer
//! step that ties the diffusion process, the denoiser and the extractor
//! together.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::FeatureExtractor;
use crate::graph::Graph;
use crate::masks::Mask;
use crate::model::Denoiser;
use crate::optim::Adam;
use crate::seed;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Optional cap on optimizer steps, for desk-scale runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.001,
            learning_rate: 5e-5,
            batch_size: 8,
            epochs: 50,
            seed: None,
            max_steps: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::param(
                "lambda1",
                format!("{} must be finite and >= 0", self.lambda1),
            ));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::param(
                "lambda2",
                format!("{} must be finite and >= 0", self.lambda2),
            ));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(Error::param(
                "lambda1",
                "lambda1 and lambda2 cannot both be zero",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(
                "learning_rate",
                format!("{} must be > 0", self.learning_rate),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Mean squared error over every element.
pub fn loss_pixel(eps: &ImageTensor, eps_hat: &ImageTensor) -> Result<f64> {
    eps.ensure_same_shape(eps_hat, "loss_pixel")?;
    let n = eps.len() as f64;
    Ok(eps
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Cosine distance between extractor features of `x0` and `x0_tilde`.
pub fn loss_fea<E: FeatureExtractor + ?Sized>(
    x0: &ImageTensor,
    x0_tilde: &ImageTensor,
    extractor: &E,
) -> Result<f64> {
    x0.ensure_same_shape(x0_tilde, "loss_fea")?;
    let u = extractor.extract(x0)?;
    let v = extractor.extract(x0_tilde)?;
    crate::features::cosine_distance(&u, &v)
}

pub fn total_loss(lp: f64, lf: f64, config: &TrainingConfig) -> Result<f64> {
    if !lp.is_finite() || !lf.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss component ({lp}, {lf})"
        )));
    }
    Ok(config.lambda1 * lp + config.lambda2 * lf)
}

/// One training example. `seed` drives the timestep, the forward noise and
/// the condition noise.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x0: ImageTensor,
    pub mask: Mask,
    pub seed: u64,
}

/// Random quantities derived from an item seed.
#[derive(Debug, Clone)]
pub struct ItemDraw {
    pub t: usize,
    pub eps: ImageTensor,
    pub condition_seed: u64,
}

impl ItemDraw {
    pub fn new(seed: u64, x0: &ImageTensor, steps: usize) -> Self {
        let t = seed::rng(seed::derive_tag(seed, "t")).random_range(1..=steps);
        let (c, h, w) = x0.shape();
        Self {
            t,
            eps: ImageTensor::standard_normal(c, h, w, seed::derive_tag(seed, "eps")),
            condition_seed: seed::derive_tag(seed, "condition"),
        }
    }
}

/// Loss values and parameter gradients for one item.
#[derive(Debug, Clone)]
pub struct ItemGradient {
    pub t: usize,
    pub loss: f64,
    pub loss_pixel: f64,
    pub loss_fea: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Forward and backward pass for a single item.
pub fn item_gradient<E: FeatureExtractor + ?Sized>(
    denoiser: &Denoiser,
    item: &TrainItem,
    schedule: &NoiseSchedule,
    extractor: &E,
    config: &TrainingConfig,
) -> Result<ItemGradient> {
    let draw = ItemDraw::new(item.seed, &item.x0, schedule.steps());
    let t = draw.t;
    let c0 = diffusion::make_condition(&item.x0, &item.mask, draw.condition_seed)?;
    let x_t = diffusion::make_xt(&item.x0, &item.mask, t, &draw.eps, schedule)?;
    denoiser.check_inputs(&x_t, &c0)?;
    let (c, h, w) = x_t.shape();

    let mut g = Graph::new();
    let params = denoiser.bind(&mut g, true);
    let xv = g.constant(x_t.as_slice().to_vec(), &[c, h, w]);
    let cv = g.constant(c0.as_slice().to_vec(), &[c, h, w]);
    let eps_hat = denoiser.forward(&mut g, &params, xv, cv, t)?;
    let lp = g.mse(eps_hat, draw.eps.as_slice().to_vec());

    // single-step estimate of x0 from eps_hat, outside cells pinned to x0
    let ab = schedule.alpha_bar(t);
    let raw = g.scale(eps_hat, -(1.0 - ab).sqrt() / ab.sqrt());
    let offset: Vec<f64> = x_t.as_slice().iter().map(|v| v / ab.sqrt()).collect();
    let raw = g.add_const(raw, &offset);
    let plane = item.mask.cells();
    let inside: Vec<f64> = (0..x_t.len()).map(|i| plane[i % (h * w)] as f64).collect();
    let outside: Vec<f64> = item
        .x0
        .as_slice()
        .iter()
        .zip(&inside)
        .map(|(x, m)| if *m == 1.0 { 0.0 } else { *x })
        .collect();
    let masked = g.mul_const(raw, inside);
    let x0_tilde = g.add_const(masked, &outside);
    let feats = extractor.forward(&mut g, x0_tilde)?;
    let reference = extractor.extract(&item.x0)?;
    if !g
        .value(feats)
        .iter()
        .chain(&reference)
        .all(|v| v.is_finite())
    {
        return Err(Error::Divergence {
            seeds: vec![item.seed],
        });
    }
    let lf = g.cosine_distance_to(feats, reference)?;

    let a = g.scale(lp, config.lambda1);
    let b = g.scale(lf, config.lambda2);
    let loss = g.add(a, b);
    let (loss_v, lp_v, lf_v) = (g.scalar(loss), g.scalar(lp), g.scalar(lf));
    if !loss_v.is_finite() {
        return Err(Error::Divergence {
            seeds: vec![item.seed],
        });
    }
    let mut grads = g.backward(loss);
    let grads = params
        .vars()
        .iter()
        .zip(denoiser.params().values())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    Ok(ItemGradient {
        t,
        loss: loss_v,
        loss_pixel: lp_v,
        loss_fea: lf_v,
        grads,
    })
}

/// Batch-mean losses and the timesteps drawn for one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub loss_pixel: f64,
    pub loss_fea: f64,
    pub timesteps: Vec<usize>,
}

impl StepMetrics {
    pub fn t_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for &t in &self.timesteps {
            *h.entry(t).or_insert(0) += 1;
        }
        h
    }
}

/// Averages per-item gradients over the batch and applies one Adam update.
///
/// Items are evaluated through `exec`; gradients are summed in batch order,
/// so the update is identical for every execution strategy.
pub fn train_step<E: FeatureExtractor + ?Sized>(
    denoiser: &mut Denoiser,
    batch: &[TrainItem],
    schedule: &NoiseSchedule,
    extractor: &E,
    config: &TrainingConfig,
    optimizer: &mut Adam,
    exec: Exec,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::param("batch", "must not be empty"));
    }
    let seeds = || batch.iter().map(|i| i.seed).collect::<Vec<_>>();
    let model: &Denoiser = denoiser;
    let results = exec.map(batch, |item| {
        item_gradient(model, item, schedule, extractor, config)
    });
    let n = batch.len() as f64;
    let mut sum: Vec<Vec<f64>> = denoiser
        .params()
        .values()
        .iter()
        .map(|v| vec![0.0; v.len()])
        .collect();
    let (mut loss, mut lp, mut lf) = (0.0, 0.0, 0.0);
    let mut timesteps = Vec::with_capacity(batch.len());
    for r in results {
        let r = match r {
            Err(Error::Divergence { .. }) => return Err(Error::Divergence { seeds: seeds() }),
            other => other?,
        };
        loss += r.loss / n;
        lp += r.loss_pixel / n;
        lf += r.loss_fea / n;
        timesteps.push(r.t);
        for (acc, gi) in sum.iter_mut().zip(&r.grads) {
            for (a, g) in acc.iter_mut().zip(gi) {
                *a += g / n;
            }
        }
    }
    if !loss.is_finite() || sum.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { seeds: seeds() });
    }
    optimizer.step(
        denoiser.params_mut().values_mut(),
        &sum,
        config.learning_rate,
    )?;
    Ok(StepMetrics {
        loss,
        loss_pixel: lp,
        loss_fea: lf,
        timesteps,
    })
}

/// One line of the training metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_pixel: f64,
    pub loss_fea: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ConvFeatureExtractor;
    use crate::model::{init_denoiser, DenoiserConfig};

    #[test]
    fn pixel_loss_cases() {
        let a = ImageTensor::standard_normal(3, 4, 4, 1);
        assert_eq!(loss_pixel(&a, &a).unwrap(), 0.0);
        assert_eq!(
            loss_pixel(
                &ImageTensor::zeros(3, 4, 4),
                &ImageTensor::filled(3, 4, 4, 1.0)
            )
            .unwrap(),
            1.0
        );
        assert!(loss_pixel(&a, &ImageTensor::zeros(3, 4, 5)).is_err());
    }

    #[test]
    fn pixel_loss_matches_summation() {
        for s in 0..20 {
            let a = ImageTensor::standard_normal(3, 5, 7, s);
            let b = ImageTensor::standard_normal(3, 5, 7, s + 100);
            let mut acc = 0.0;
            for i in 0..a.len() {
                let d = a.as_slice()[i] - b.as_slice()[i];
                acc += d * d;
            }
            assert!((loss_pixel(&a, &b).unwrap() - acc / a.len() as f64).abs() < 1e-7);
        }
    }

    #[test]
    fn total_loss_weights() {
        let cfg = TrainingConfig::default();
        assert!((total_loss(0.5, 0.2, &cfg).unwrap() - 0.5002).abs() < 1e-15);
        let no_fea = TrainingConfig {
            lambda2: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_loss(0.5, 0.2, &no_fea).unwrap(), 0.5);
        let no_pix = TrainingConfig {
            lambda1: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_loss(0.5, 0.2, &no_pix).unwrap(), 0.001 * 0.2);
        assert!(total_loss(f64::NAN, 0.2, &cfg).is_err());
        assert!(total_loss(0.1, f64::INFINITY, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        for bad in [
            TrainingConfig {
                lambda1: 0.0,
                lambda2: 0.0,
                ..Default::default()
            },
            TrainingConfig {
                lambda1: -1.0,
                ..Default::default()
            },
            TrainingConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainingConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn feature_loss_cases() {
        let e = ConvFeatureExtractor::random((3, 8, 8), 16, 2).unwrap();
        let x = ImageTensor::standard_normal(3, 8, 8, 1).clamp(-1.0, 1.0);
        assert!(loss_fea(&x, &x, &e).unwrap().abs() < 1e-15);
        let y = ImageTensor::standard_normal(3, 8, 8, 2);
        let v = loss_fea(&x, &y, &e).unwrap();
        assert!((0.0..=2.0).contains(&v) && v > 0.0);
    }

    fn setup() -> (
        Denoiser,
        NoiseSchedule,
        ConvFeatureExtractor,
        Vec<TrainItem>,
    ) {
        let cfg = DenoiserConfig {
            image_channels: 3,
            image_size: 8,
            base_width: 4,
            depth: 2,
            time_embed_dim: 8,
            channel_multipliers: vec![1, 2],
            attention: true,
            seed: 1,
        };
        let d = init_denoiser(&cfg).unwrap();
        let s = diffusion::make_schedule(20, diffusion::ScheduleKind::Linear, 1e-3, 0.2).unwrap();
        let e = ConvFeatureExtractor::random((3, 8, 8), 16, 5).unwrap();
        let mut m = Mask::zeros(8, 8);
        crate::masks::fill_square(&mut m, 2, 2, 4);
        let items = (0..3)
            .map(|i| TrainItem {
                x0: ImageTensor::standard_normal(3, 8, 8, 40 + i).clamp(-1.0, 1.0),
                mask: m.clone(),
                seed: 90 + i,
            })
            .collect();
        (d, s, e, items)
    }

    #[test]
    fn zero_feature_weight_reduces_to_pixel_loss() {
        let (mut d, s, e, items) = setup();
        let cfg = TrainingConfig {
            lambda2: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(d.params().values());
        let m = train_step(&mut d, &items, &s, &e, &cfg, &mut opt, Exec::Sequential).unwrap();
        assert_eq!(m.loss, m.loss_pixel);
        assert_eq!(m.timesteps.len(), 3);
        assert_eq!(m.t_histogram().values().sum::<usize>(), 3);
    }

    #[test]
    fn steps_are_reproducible_across_exec() {
        let (d0, s, e, items) = setup();
        let cfg = TrainingConfig {
            learning_rate: 1e-3,
            ..Default::default()
        };
        let run = |exec| {
            let mut d = d0.clone();
            let mut opt = Adam::new(d.params().values());
            let ms: Vec<_> = (0..3)
                .map(|_| train_step(&mut d, &items, &s, &e, &cfg, &mut opt, exec).unwrap())
                .collect();
            (ms, d.checksum())
        };
        let a = run(Exec::Sequential);
        assert_eq!(a, run(Exec::Sequential));
        assert_eq!(a, run(Exec::Parallel));
        assert_ne!(a.1, d0.checksum());
    }

    #[test]
    fn empty_batch_rejected() {
        let (mut d, s, e, _) = setup();
        let mut opt = Adam::new(d.params().values());
        assert!(train_step(
            &mut d,
            &[],
            &s,
            &e,
            &TrainingConfig::default(),
            &mut opt,
            Exec::Sequential
        )
        .is_err());
    }

    #[test]
    fn divergence_reports_seeds() {
        let (mut d, s, e, mut items) = setup();
        items[1].x0.as_mut_slice()[0] = f64::NAN;
        let mut opt = Adam::new(d.params().values());
        let cfg = TrainingConfig::default();
        match train_step(&mut d, &items, &s, &e, &cfg, &mut opt, Exec::Sequential) {
            Err(Error::Divergence { seeds }) => assert_eq!(seeds, vec![90, 91, 92]),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

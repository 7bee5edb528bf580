//! Noise schedules, masked forward noising and the masked reverse sampler.
//!
//! Timesteps are 1-based throughout: `t` ranges over `1..=T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::masks::Mask;
use crate::seed::{self, Rng};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::param(
                "kind",
                format!("unknown schedule kind `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// CSV with header `t,beta,alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar\n");
        for (i, (b, ab)) in self.betas.iter().zip(&self.alpha_bars).enumerate() {
            out.push_str(&format!("{},{b:e},{ab:e}\n", i + 1));
        }
        out
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            kind,
            betas,
            alphas,
            alpha_bars,
        }
    }
}

/// Builds a schedule of `steps` timesteps.
///
/// `Linear` interpolates beta from `beta_min` to `beta_max`. `Cosine` uses
/// the squared-cosine cumulative product with offset 0.008 and clips each
/// beta to `[beta_min, beta_max]`.
pub fn make_schedule(
    steps: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::param("T", "must be at least 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::param(
            "beta",
            format!("need 0 < beta_min ({beta_min}) <= beta_max ({beta_max}) < 1"),
        ));
    }
    let betas = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| {
                ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_min, beta_max))
                .collect()
        }
    };
    Ok(NoiseSchedule::from_betas(kind, betas))
}

fn check_mask(x: &ImageTensor, mask: &Mask) -> Result<()> {
    if (x.height(), x.width()) != (mask.height(), mask.width()) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// `(1 - m) * base + m * overlay`, mask broadcast over channels.
///
/// With a binary mask this is a per-cell selection, so untouched cells keep
/// the exact bits of `base`.
pub fn adaptive_combine(
    base: &ImageTensor,
    overlay: &ImageTensor,
    mask: &Mask,
) -> Result<ImageTensor> {
    base.ensure_same_shape(overlay, "adaptive_combine")?;
    check_mask(base, mask)?;
    let plane = base.plane_len();
    let cells = mask.cells();
    let data = base
        .as_slice()
        .iter()
        .zip(overlay.as_slice())
        .enumerate()
        .map(|(i, (&b, &o))| if cells[i % plane] == 1 { o } else { b })
        .collect();
    ImageTensor::from_vec(base.channels(), base.height(), base.width(), data)
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn forward_noise(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    x0.ensure_same_shape(eps, "forward_noise")?;
    Ok(forward_noise_with(x0, schedule.alpha_bar(t), eps))
}

/// Forward noising with an explicit cumulative signal coefficient.
pub fn forward_noise_with(x0: &ImageTensor, alpha_bar: f64, eps: &ImageTensor) -> ImageTensor {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    ImageTensor::from_vec(x0.channels(), x0.height(), x0.width(), data).expect("same shape")
}

/// Condition image: `x0` with its masked region replaced by fresh
/// standard-normal noise drawn from `seed`.
pub fn make_condition(x0: &ImageTensor, mask: &Mask, seed: u64) -> Result<ImageTensor> {
    check_mask(x0, mask)?;
    let (c, h, w) = x0.shape();
    let noise = ImageTensor::standard_normal(c, h, w, seed);
    adaptive_combine(x0, &noise, mask)
}

/// Noised state whose outside-mask region is the clean `x0`.
pub fn make_xt(
    x0: &ImageTensor,
    mask: &Mask,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    check_mask(x0, mask)?;
    let noised = forward_noise(x0, t, eps, schedule)?;
    adaptive_combine(x0, &noised, mask)
}

/// Single-step clean-image estimate from a noise prediction, recomposed with
/// the known outside-mask pixels.
pub fn estimate_x0(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    mask: &Mask,
    x0_known: &ImageTensor,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    x_t.ensure_same_shape(eps_hat, "estimate_x0")?;
    x_t.ensure_same_shape(x0_known, "estimate_x0")?;
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let raw = ImageTensor::from_vec(
        x_t.channels(),
        x_t.height(),
        x_t.width(),
        x_t.as_slice()
            .iter()
            .zip(eps_hat.as_slice())
            .map(|(&x, &e)| (x - sb * e) / sa)
            .collect(),
    )?;
    adaptive_combine(x0_known, &raw, mask)
}

/// One ancestral denoising step with posterior variance `beta_t`. No noise
/// is injected at `t = 1`.
pub fn reverse_step(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    x_t.ensure_same_shape(eps_hat, "reverse_step")?;
    let (beta, alpha, ab) = (schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t));
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let (c, h, w) = x_t.shape();
    let mut out: Vec<f64> = x_t
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .map(|(&x, &e)| inv_sqrt_alpha * (x - coef * e))
        .collect();
    if t > 1 {
        let sigma = beta.sqrt();
        let z = ImageTensor::standard_normal_with(c, h, w, rng);
        for (o, zv) in out.iter_mut().zip(z.as_slice()) {
            *o += sigma * zv;
        }
    }
    ImageTensor::from_vec(c, h, w, out)
}

/// Anything that predicts the injected noise from `(x_t, c0, t)`.
pub trait EpsPredictor: Sync {
    fn predict_eps(&self, x_t: &ImageTensor, c0: &ImageTensor, t: usize) -> Result<ImageTensor>;
}

impl<F> EpsPredictor for F
where
    F: Fn(&ImageTensor, &ImageTensor, usize) -> Result<ImageTensor> + Sync,
{
    fn predict_eps(&self, x_t: &ImageTensor, c0: &ImageTensor, t: usize) -> Result<ImageTensor> {
        self(x_t, c0, t)
    }
}

/// Seeds for the three random streams of one sampling run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerSeeds {
    pub condition: u64,
    pub init: u64,
    pub steps: u64,
}

impl SamplerSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            condition: seed::derive_tag(seed, "condition"),
            init: seed::derive_tag(seed, "init"),
            steps: seed::derive_tag(seed, "steps"),
        }
    }
}

/// Result of the reverse loop before and after the final clamp.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub raw: ImageTensor,
    pub image: ImageTensor,
}

/// Inpaints the masked region of `x0`, returning the clamped image.
pub fn sample<P: EpsPredictor + ?Sized>(
    denoiser: &P,
    x0: &ImageTensor,
    mask: &Mask,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<ImageTensor> {
    sample_traced(denoiser, x0, mask, schedule, seed).map(|s| s.image)
}

/// Runs `t = T..1`. The outside-mask region is re-pinned to `x0` after every
/// step; clamping to `[-1, 1]` happens once, after the loop.
pub fn sample_traced<P: EpsPredictor + ?Sized>(
    denoiser: &P,
    x0: &ImageTensor,
    mask: &Mask,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<SampleOutput> {
    check_mask(x0, mask)?;
    let seeds = SamplerSeeds::from_seed(seed);
    let c0 = make_condition(x0, mask, seeds.condition)?;
    let (c, h, w) = x0.shape();
    let init = ImageTensor::standard_normal(c, h, w, seeds.init);
    let mut x = adaptive_combine(x0, &init, mask)?;
    let mut rng = seed::rng(seeds.steps);
    if mask.count_ones() > 0 {
        for t in (1..=schedule.steps()).rev() {
            let eps_hat = denoiser.predict_eps(&x, &c0, t)?;
            let next = reverse_step(&x, &eps_hat, t, schedule, &mut rng)?;
            x = adaptive_combine(x0, &next, mask)?;
        }
    }
    let image = x.clamp(-1.0, 1.0);
    Ok(SampleOutput { raw: x, image })
}

/// One sampling job.
#[derive(Debug, Clone)]
pub struct SampleJob {
    pub x0: ImageTensor,
    pub mask: Mask,
    pub seed: u64,
}

/// Samples independent jobs, one reverse chain each.
pub fn sample_batch<P: EpsPredictor + ?Sized>(
    denoiser: &P,
    jobs: &[SampleJob],
    schedule: &NoiseSchedule,
    exec: Exec,
) -> Result<Vec<ImageTensor>> {
    exec.map(jobs, |j| sample(denoiser, &j.x0, &j.mask, schedule, j.seed))
        .into_iter()
        .collect()
}

/// Per-cell empirical moments of `forward_noise(x0, t, eps)` over `draws`
/// independent noise draws.
#[derive(Debug, Clone)]
pub struct MarginalMoments {
    pub draws: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Monte Carlo estimate of the forward marginal. Draw `i` uses
/// `seed::derive(seed, i)`, so the result does not depend on `exec`.
pub fn forward_marginal_moments(
    x0: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<MarginalMoments> {
    schedule.check_t(t)?;
    if draws < 2 {
        return Err(Error::param("draws", "need at least 2 draws"));
    }
    const CHUNK: usize = 256;
    let n = x0.len();
    let (c, h, w) = x0.shape();
    let ab = schedule.alpha_bar(t);
    let chunks = draws.div_ceil(CHUNK);
    let partial = exec.map_range(chunks, |k| {
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for i in k * CHUNK..((k + 1) * CHUNK).min(draws) {
            let eps = ImageTensor::standard_normal(c, h, w, seed::derive(seed, i as u64));
            let xt = forward_noise_with(x0, ab, &eps);
            for (j, &v) in xt.as_slice().iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        (sum, sq)
    });
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for (s, q) in partial {
        for j in 0..n {
            sum[j] += s[j];
            sq[j] += q[j];
        }
    }
    let d = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / d).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q - d * m * m) / (d - 1.0)).max(0.0).sqrt())
        .collect();
    Ok(MarginalMoments { draws, mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(vals: &[f64], c: usize, h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_vec(c, h, w, vals.to_vec()).unwrap()
    }

    fn linear(t: usize) -> NoiseSchedule {
        make_schedule(t, ScheduleKind::Linear, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, ScheduleKind::Linear, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar(1), 0.9);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
    }

    #[test]
    fn long_linear_schedule_reaches_noise() {
        let s = linear(1000);
        // direct product oracle
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn schedules_are_monotone() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let beta_max = if kind == ScheduleKind::Linear {
                0.02
            } else {
                0.999
            };
            for &t in &[1usize, 2, 50, 1000] {
                let s = make_schedule(t, kind, 1e-4, beta_max).unwrap();
                assert_eq!(s.betas().len(), t);
                assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
                assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
                assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
            }
        }
        let lin = linear(100);
        assert!(lin.betas().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn invalid_schedules() {
        assert!(make_schedule(0, ScheduleKind::Linear, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.0, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.03, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::Cosine, 1e-4, 1.0).is_err());
    }

    #[test]
    fn combine_selects_per_cell() {
        let base = img(&[0.2, 0.4], 1, 1, 2);
        let over = img(&[-1.0, 1.0], 1, 1, 2);
        let m = Mask::from_cells(1, 2, vec![0, 1]).unwrap();
        assert_eq!(
            adaptive_combine(&base, &over, &m).unwrap().as_slice(),
            &[0.2, 1.0]
        );
        assert_eq!(
            adaptive_combine(&base, &over, &Mask::zeros(1, 2)).unwrap(),
            base
        );
        assert_eq!(
            adaptive_combine(&base, &over, &Mask::ones(1, 2)).unwrap(),
            over
        );
        assert!(adaptive_combine(&base, &over, &Mask::zeros(2, 1)).is_err());
    }

    #[test]
    fn forward_noise_arithmetic() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.36]);
        let out = forward_noise(&img(&[0.5], 1, 1, 1), 1, &img(&[1.0], 1, 1, 1), &s).unwrap();
        assert!((out.as_slice()[0] - 1.0).abs() < 1e-12);
        let x0 = img(&[0.3, -0.7], 1, 1, 2);
        let eps = img(&[1.5, 0.1], 1, 1, 2);
        assert_eq!(forward_noise_with(&x0, 1.0, &eps), x0);
        assert_eq!(forward_noise_with(&x0, 0.0, &eps), eps);
        assert!(matches!(
            forward_noise(&x0, 2, &eps, &s),
            Err(Error::Index { t: 2, max: 1 })
        ));
        assert!(forward_noise(&x0, 0, &eps, &s).is_err());
    }

    #[test]
    fn condition_cases() {
        let x0 = ImageTensor::filled(3, 8, 8, 0.25);
        assert_eq!(make_condition(&x0, &Mask::zeros(8, 8), 4).unwrap(), x0);
        let a = make_condition(&x0, &Mask::ones(8, 8), 4).unwrap();
        assert_eq!(a, make_condition(&x0, &Mask::ones(8, 8), 4).unwrap());
        assert_ne!(a, make_condition(&x0, &Mask::ones(8, 8), 5).unwrap());
    }

    #[test]
    fn xt_preserves_outside() {
        let s = linear(50);
        let x0 = ImageTensor::standard_normal(3, 8, 8, 1).clamp(-1.0, 1.0);
        let eps = ImageTensor::standard_normal(3, 8, 8, 2);
        let mut m = Mask::zeros(8, 8);
        crate::masks::fill_square(&mut m, 2, 3, 4);
        for t in [1, 25, 50] {
            assert_eq!(make_xt(&x0, &Mask::zeros(8, 8), t, &eps, &s).unwrap(), x0);
            assert_eq!(
                make_xt(&x0, &Mask::ones(8, 8), t, &eps, &s).unwrap(),
                forward_noise(&x0, t, &eps, &s).unwrap()
            );
            let xt = make_xt(&x0, &m, t, &eps, &s).unwrap();
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        if !m.get(y, x) {
                            assert_eq!(xt.get(c, y, x).to_bits(), x0.get(c, y, x).to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn estimate_inverts_forward() {
        let s = linear(100);
        let x0 = ImageTensor::standard_normal(3, 6, 6, 8).clamp(-1.0, 1.0);
        let eps = ImageTensor::standard_normal(3, 6, 6, 9);
        let m = Mask::ones(6, 6);
        for t in [1, 37, 100] {
            let xt = make_xt(&x0, &m, t, &eps, &s).unwrap();
            let est = estimate_x0(&xt, &eps, t, &s, &m, &x0).unwrap();
            for (a, b) in est.as_slice().iter().zip(x0.as_slice()) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
        let known = ImageTensor::filled(3, 6, 6, 0.1);
        assert_eq!(
            estimate_x0(&x0, &eps, 5, &s, &Mask::zeros(6, 6), &known).unwrap(),
            known
        );
    }

    #[test]
    fn estimate_arithmetic() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.36]);
        let one = img(&[1.0], 1, 1, 1);
        let est = estimate_x0(&one, &one, 1, &s, &Mask::ones(1, 1), &img(&[0.0], 1, 1, 1)).unwrap();
        assert!((est.as_slice()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_cases() {
        let s = linear(10);
        let x = ImageTensor::standard_normal(1, 4, 4, 3);
        let e = ImageTensor::standard_normal(1, 4, 4, 4);
        let out = reverse_step(&x, &e, 1, &s, &mut seed::rng(0)).unwrap();
        let coef = s.beta(1) / (1.0 - s.alpha_bar(1)).sqrt();
        for ((o, xv), ev) in out.as_slice().iter().zip(x.as_slice()).zip(e.as_slice()) {
            assert!((o - (xv - coef * ev) / s.alpha(1).sqrt()).abs() < 1e-12);
        }
        let a = reverse_step(&x, &e, 7, &s, &mut seed::rng(5)).unwrap();
        let b = reverse_step(&x, &e, 7, &s, &mut seed::rng(5)).unwrap();
        assert_eq!(a, b);
        assert!(reverse_step(&x, &e, 11, &s, &mut seed::rng(5)).is_err());

        let tiny = make_schedule(3, ScheduleKind::Linear, 1e-12, 1e-12).unwrap();
        let zero = ImageTensor::zeros(1, 4, 4);
        let out = reverse_step(&x, &zero, 2, &tiny, &mut seed::rng(1)).unwrap();
        for (o, xv) in out.as_slice().iter().zip(x.as_slice()) {
            assert!((o - xv).abs() < 1e-5);
        }
    }

    #[test]
    fn sampling_with_stub_predictor() {
        let s = linear(20);
        let x0 = ImageTensor::standard_normal(3, 8, 8, 10).clamp(-1.0, 1.0);
        let stub = |x: &ImageTensor, _c: &ImageTensor, _t: usize| Ok(x.map(|v| 0.3 * v));
        assert_eq!(sample(&stub, &x0, &Mask::zeros(8, 8), &s, 1).unwrap(), x0);
        let mut m = Mask::zeros(8, 8);
        crate::masks::fill_square(&mut m, 1, 1, 5);
        let a = sample_traced(&stub, &x0, &m, &s, 3).unwrap();
        let b = sample_traced(&stub, &x0, &m, &s, 3).unwrap();
        assert_eq!(a.image, b.image);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    if !m.get(y, x) {
                        assert_eq!(a.raw.get(c, y, x), x0.get(c, y, x));
                    }
                }
            }
        }
        assert!(a.image.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn schedule_csv_has_one_row_per_step() {
        let csv = linear(5).to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("t,beta,alpha_bar\n1,"));
    }
}

//! Losses, the training loop and evaluation.
//!
//! Per sample, with `(Î0, F̂)` the network outputs:
//!
//! ```text
//! L(ŷ, y)  = MAE(ŷ, y) + 0.1 * mean_s MAE(P_s(ŷ), P_s(y))     s = 1..3
//! L_rec    = MAE(I, clip01(Î0 + F̂))
//! L_total  = w1 L(Î0, I0) + w2 L(F̂, F) + w3 L_rec
//! ```
//!
//! `P_s` is `s` Gaussian-pyramid reductions. It stands in for a perceptual
//! feature loss and can be switched off with a zero weight.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::KvConfig;
use crate::data::{self, FlarePair};
use crate::error::{Error, Result};
use crate::metrics;
use crate::net::{NetworkConfig, NetworkState};
use crate::tensor::Tensor;

pub const PYRAMID_LEVELS: usize = 3;
pub const PYRAMID_WEIGHT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_image: f64,
    pub l_flare: f64,
    pub l_rec: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn compose(l_image: f64, l_flare: f64, l_rec: f64, weights: LossWeights) -> Self {
        let total = weights.w1 * l_image + weights.w2 * l_flare + weights.w3 * l_rec;
        LossBreakdown {
            l_image,
            l_flare,
            l_rec,
            total,
            weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_image, self.l_flare, self.l_rec, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_same(op: &'static str, g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape(op, g.value(a).shape(), g.value(b).shape()));
    }
    Ok(())
}

pub fn mae_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    check_same("mae", g, a, b)?;
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Reconstruction term plus the weighted pyramid proxy.
pub fn loss_pair_graph(g: &mut Graph, y_hat: Var, y: Var, pyramid_weight: f64) -> Result<Var> {
    let l1 = mae_graph(g, y_hat, y)?;
    if pyramid_weight == 0.0 {
        return Ok(l1);
    }
    let (mut a, mut b) = (y_hat, y);
    let mut acc: Option<Var> = None;
    for _ in 0..PYRAMID_LEVELS {
        a = g.blur_down(a)?;
        b = g.blur_down(b)?;
        let m = mae_graph(g, a, b)?;
        acc = Some(match acc {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    let proxy = g.scale(
        acc.expect("at least one level"),
        pyramid_weight / PYRAMID_LEVELS as f64,
    );
    g.add(l1, proxy)
}

pub fn loss_rec_graph(g: &mut Graph, input: Var, image_hat: Var, flare_hat: Var) -> Result<Var> {
    check_same("loss_rec", g, image_hat, flare_hat)?;
    let sum = g.add(image_hat, flare_hat)?;
    let recon = g.clip01(sum);
    mae_graph(g, input, recon)
}

pub struct LossVars {
    pub l_image: Var,
    pub l_flare: Var,
    pub l_rec: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub pyramid_weight: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            weights: LossWeights::default(),
            pyramid_weight: PYRAMID_WEIGHT,
        }
    }
}

/// `(input, clean, flare)` are targets; `(image_hat, flare_hat)` predictions.
pub fn loss_total_graph(
    g: &mut Graph,
    targets: (Var, Var, Var),
    image_hat: Var,
    flare_hat: Var,
    opts: &LossOptions,
) -> Result<LossVars> {
    let (input, clean, flare) = targets;
    let l_image = loss_pair_graph(g, image_hat, clean, opts.pyramid_weight)?;
    let l_flare = loss_pair_graph(g, flare_hat, flare, opts.pyramid_weight)?;
    let l_rec = loss_rec_graph(g, input, image_hat, flare_hat)?;
    let w = opts.weights;
    let a = g.scale(l_image, w.w1);
    let b = g.scale(l_flare, w.w2);
    let c = g.scale(l_rec, w.w3);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossVars {
        l_image,
        l_flare,
        l_rec,
        total,
    })
}

pub fn loss_pair(y_hat: &Tensor, y: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(y_hat.clone()), g.constant(y.clone()));
    let l = loss_pair_graph(&mut g, a, b, PYRAMID_WEIGHT)?;
    Ok(g.value(l).item())
}

pub fn loss_rec(input: &Tensor, image_hat: &Tensor, flare_hat: &Tensor) -> Result<f64> {
    if input.shape() != image_hat.shape() {
        return Err(Error::shape("loss_rec", input.shape(), image_hat.shape()));
    }
    let mut g = Graph::new();
    let i = g.constant(input.clone());
    let a = g.constant(image_hat.clone());
    let b = g.constant(flare_hat.clone());
    let l = loss_rec_graph(&mut g, i, a, b)?;
    Ok(g.value(l).item())
}

pub fn loss_total(
    pair: &FlarePair,
    image_hat: &Tensor,
    flare_hat: &Tensor,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let t = (
        g.constant(pair.input.clone()),
        g.constant(pair.clean.clone()),
        g.constant(pair.flare.clone()),
    );
    let a = g.constant(image_hat.clone());
    let b = g.constant(flare_hat.clone());
    let v = loss_total_graph(&mut g, t, a, b, opts)?;
    let r = |x: Var| g.value(x).item();
    Ok(LossBreakdown {
        l_image: r(v.l_image),
        l_flare: r(v.l_flare),
        l_rec: r(v.l_rec),
        total: r(v.total),
        weights: opts.weights,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetworkConfig,
    pub iters: u64,
    pub batch: usize,
    pub lr: f64,
    pub height: usize,
    pub width: usize,
    /// Size of a fixed training set; 0 draws fresh pairs every step.
    pub pairs: usize,
    pub data_seed: u64,
    pub augment: bool,
    pub loss: LossOptions,
    /// Train-set PSNR is measured every this many iterations (0 = never).
    pub psnr_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetworkConfig::default(),
            iters: 200,
            batch: 2,
            lr: 1e-4,
            height: 64,
            width: 64,
            pairs: 8,
            data_seed: 0,
            augment: false,
            loss: LossOptions::default(),
            psnr_every: 0,
        }
    }
}

/// Keys understood by [`TrainConfig::apply_kv`], network keys included.
pub const TRAIN_KEYS: &[&str] = &[
    "iters",
    "batch",
    "lr",
    "height",
    "width",
    "pairs",
    "data_seed",
    "augment",
    "w1",
    "w2",
    "w3",
    "pyramid_weight",
    "psnr_every",
    "base_channels",
    "levels",
    "hier_levels",
    "window",
    "state_size",
    "seed",
    "scan_mode",
    "hierarchical",
    "ln_eps",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        self.net
            .check_extents(self.height, self.width)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply_kv(mut self, kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown(TRAIN_KEYS)?;
        self.net = self.net.apply_kv(kv)?;
        macro_rules! take {
            ($($key:literal => $field:expr),* $(,)?) => {$(
                if let Some(v) = kv.parse($key)? {
                    $field = v;
                }
            )*};
        }
        take!(
            "iters" => self.iters,
            "batch" => self.batch,
            "lr" => self.lr,
            "height" => self.height,
            "width" => self.width,
            "pairs" => self.pairs,
            "data_seed" => self.data_seed,
            "augment" => self.augment,
            "w1" => self.loss.weights.w1,
            "w2" => self.loss.weights.w2,
            "w3" => self.loss.weights.w3,
            "pyramid_weight" => self.loss.pyramid_weight,
            "psnr_every" => self.psnr_every,
        );
        self.validate()?;
        Ok(self)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.net.to_kv();
        kv.set("iters", self.iters);
        kv.set("batch", self.batch);
        kv.set("lr", format!("{:e}", self.lr));
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("pairs", self.pairs);
        kv.set("data_seed", self.data_seed);
        kv.set("augment", self.augment);
        kv.set("w1", self.loss.weights.w1);
        kv.set("w2", self.loss.weights.w2);
        kv.set("w3", self.loss.weights.w3);
        kv.set("pyramid_weight", self.loss.pyramid_weight);
        kv.set("psnr_every", self.psnr_every);
        kv
    }

    /// The fixed training set, empty for on-the-fly sampling.
    pub fn fixed_pairs(&self) -> Result<Vec<FlarePair>> {
        data::pair_set(self.pairs, self.height, self.width, self.data_seed)
    }
}

const AUGMENT_STREAM: u64 = 0xA5A5_5A5A;

/// Samples of iteration `iter` (0-based). Depends only on the global
/// iteration index, so a resumed run sees the same data as an unbroken one.
pub fn batch_for(cfg: &TrainConfig, fixed: &[FlarePair], iter: u64) -> Result<Vec<FlarePair>> {
    let mut out = Vec::with_capacity(cfg.batch);
    for b in 0..cfg.batch as u64 {
        let k = iter * cfg.batch as u64 + b;
        let pair = if fixed.is_empty() {
            data::synth_pair(cfg.height, cfg.width, data::derive_seed(cfg.data_seed, k))?
        } else {
            fixed[(k % fixed.len() as u64) as usize].clone()
        };
        out.push(if cfg.augment {
            let mut rng =
                ChaCha8Rng::seed_from_u64(data::derive_seed(cfg.data_seed ^ AUGMENT_STREAM, k));
            data::augment(&pair, &mut rng)?
        } else {
            pair
        });
    }
    Ok(out)
}

/// Mean losses over `batch` before the update, and the update itself.
pub fn train_step(
    state: &mut NetworkState,
    batch: &[FlarePair],
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let iteration = state.iteration + 1;
    let mut g = Graph::new();
    let bound = state.params.bind(&mut g, true);
    let mut sums = [0.0; 4];
    let mut total: Option<Var> = None;
    for pair in batch {
        let input = g.constant(pair.input.clone());
        let clean = g.constant(pair.clean.clone());
        let flare = g.constant(pair.flare.clone());
        let out = state.network.forward(&mut g, &bound, input)?;
        let l = loss_total_graph(&mut g, (input, clean, flare), out.image, out.flare, opts)?;
        for (s, v) in sums
            .iter_mut()
            .zip([l.l_image, l.l_flare, l.l_rec, l.total])
        {
            *s += g.value(v).item();
        }
        total = Some(match total {
            None => l.total,
            Some(t) => g.add(t, l.total)?,
        });
    }
    let n = batch.len() as f64;
    let bd = LossBreakdown {
        l_image: sums[0] / n,
        l_flare: sums[1] / n,
        l_rec: sums[2] / n,
        total: sums[3] / n,
        weights: opts.weights,
    };
    if !bd.is_finite() {
        return Err(Error::Training {
            iteration,
            msg: format!(
                "non-finite loss: l_image={} l_flare={} l_rec={} total={}",
                bd.l_image, bd.l_flare, bd.l_rec, bd.total
            ),
        });
    }
    let Some(total) = total else {
        return Err(Error::Contract("empty batch".into()));
    };
    let loss = g.scale(total, 1.0 / n);
    let mut grads = g.backward(loss)?;
    let grads = bound.gradients(&g, &mut grads);
    state.optim.adam_step(&mut state.params, &grads)?;
    state.iteration = iteration;
    Ok(bd)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iteration: u64,
    pub loss: LossBreakdown,
}

impl IterRecord {
    /// `iter, l_image, l_flare, l_rec, total` with six decimals.
    pub fn log_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}, {:.6}, {:.6}, {:.6}, {:.6}",
            self.iteration, l.l_image, l.l_flare, l.l_rec, l.total
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<IterRecord>,
    /// `(iteration, mean PSNR of Î0 against I0 over the training set)`.
    pub psnr: Vec<(u64, f64)>,
}

impl TrainReport {
    pub fn log_text(&self) -> String {
        self.records.iter().map(|r| r.log_line() + "\n").collect()
    }
}

/// Runs `cfg.iters` further steps on `state`, calling `on_iter` after each.
pub fn train_more(
    state: &mut NetworkState,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&IterRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if state.config() != &cfg.net {
        return Err(Error::Config(
            "network configuration differs from the state being trained".into(),
        ));
    }
    state.optim.lr = cfg.lr;
    let fixed = cfg.fixed_pairs()?;
    let mut report = TrainReport::default();
    for _ in 0..cfg.iters {
        let batch = batch_for(cfg, &fixed, state.iteration)?;
        let loss = train_step(state, &batch, &cfg.loss)?;
        let rec = IterRecord {
            iteration: state.iteration,
            loss,
        };
        log::debug!("{}", rec.log_line());
        on_iter(&rec);
        report.records.push(rec);
        if cfg.psnr_every > 0 && state.iteration.is_multiple_of(cfg.psnr_every) && !fixed.is_empty()
        {
            let p = mean_scores(&evaluate(Some(state), &fixed)?).0;
            log::info!("iteration {}: train PSNR {p:.3} dB", state.iteration);
            report.psnr.push((state.iteration, p));
        }
    }
    Ok(report)
}

/// Fresh state from `cfg.net`, trained for `cfg.iters` steps.
pub fn train(cfg: &TrainConfig) -> Result<(NetworkState, TrainReport)> {
    let mut state = NetworkState::new(&cfg.net)?;
    let report = train_more(&mut state, cfg, |_| {})?;
    Ok((state, report))
}

/// `(PSNR, SSIM)` of each pair's clean image against the prediction, or
/// against the corrupted input when `state` is `None`.
pub fn evaluate(state: Option<&NetworkState>, pairs: &[FlarePair]) -> Result<Vec<(f64, f64)>> {
    pairs
        .iter()
        .map(|p| {
            let pred = match state {
                Some(s) => s.infer(&p.input)?.0.map(|v| v.clamp(0.0, 1.0)),
                None => p.input.clone(),
            };
            Ok((
                metrics::psnr(&pred, &p.clean, 1.0)?,
                metrics::ssim(&pred, &p.clean, 1.0)?,
            ))
        })
        .collect()
}

pub fn mean_scores(scores: &[(f64, f64)]) -> (f64, f64) {
    let n = scores.len().max(1) as f64;
    (
        scores.iter().map(|s| s.0).sum::<f64>() / n,
        scores.iter().map(|s| s.1).sum::<f64>() / n,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_pair_examples() {
        let y = data::gen_background(16, 16, 1);
        assert_eq!(loss_pair(&y, &y).unwrap(), 0.0);
        let shifted = y.map(|v| v + 0.1);
        assert!((loss_pair(&shifted, &y).unwrap() - 0.11).abs() < 1e-12);
        let z = y.map(|v| v * 0.0);
        assert_eq!(loss_pair(&z, &z).unwrap(), 0.0);
        assert!(loss_pair(&y, &Tensor::zeros(&[16, 16, 2])).is_err());
    }

    #[test]
    fn loss_rec_examples() {
        let i = Tensor::full(&[4, 4, 3], 0.5);
        let z = Tensor::zeros(&[4, 4, 3]);
        assert_eq!(loss_rec(&i, &i, &z).unwrap(), 0.0);
        assert!((loss_rec(&i, &z, &z).unwrap() - 0.5).abs() < 1e-15);
        let half = Tensor::full(&[4, 4, 3], 0.25);
        assert_eq!(loss_rec(&i, &half, &half).unwrap(), 0.0);
        assert!(loss_rec(&i, &z, &Tensor::zeros(&[4, 4, 1])).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let b = LossBreakdown::compose(0.1, 0.1, 0.1, LossWeights::default());
        assert!((b.total - 0.3).abs() < 1e-15);
        let pair = data::synth_pair(8, 8, 3).unwrap();
        let perfect = loss_total(&pair, &pair.clean, &pair.flare, &LossOptions::default()).unwrap();
        assert_eq!(perfect.total, 0.0);
        let w3_off = LossOptions {
            weights: LossWeights {
                w3: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = loss_total(&pair, &pair.input, &Tensor::zeros(&[8, 8, 3]), &w3_off).unwrap();
        assert!((a.total - (a.l_image + a.l_flare)).abs() < 1e-15);
        let full = loss_total(
            &pair,
            &pair.input,
            &Tensor::zeros(&[8, 8, 3]),
            &LossOptions::default(),
        )
        .unwrap();
        assert!((full.total - (full.l_image + full.l_flare + full.l_rec)).abs() < 1e-15);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = TrainConfig {
            iters: 7,
            lr: 3e-4,
            augment: true,
            ..Default::default()
        };
        let back = TrainConfig::default().apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        let bad = KvConfig::from_text("itres = 3").unwrap();
        assert!(TrainConfig::default().apply_kv(&bad).is_err());
        let odd = KvConfig::from_text("height = 30").unwrap();
        assert!(TrainConfig::default().apply_kv(&odd).is_err());
    }
}

//! The U-shaped flare-removal network.
//!
//! ```text
//! I -> Conv3x3 -> G_enc1 -> down -> G_enc2 -> ... -> G_encL
//!                   |                  |                |
//!                 skip               skip              up
//!                   v                  v                v
//! O <- Conv3x3 <- G_dec1 <-  up  <-  G_dec2 <- ...  <- (+)
//! ```
//!
//! Encoder group `l` holds `l` local blocks; the coarsest encoder group is the
//! bottleneck. Decoder group `l` holds `l - 1` local blocks and a terminal
//! hierarchical block. Skips are added after a 1x1 conv. The head emits six
//! channels: the flare-free image then the flare layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::vssm::{BlockCtx, ConvIds, GroupConfig, Rssg, ScanMode, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub hier_levels: usize,
    pub window: (usize, usize),
    pub state_size: usize,
    pub seed: u64,
    pub scan_mode: ScanMode,
    /// Use hierarchical terminal blocks in the decoder.
    pub hierarchical: bool,
    pub ln_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            levels: 3,
            hier_levels: 2,
            window: (8, 8),
            state_size: 8,
            seed: 0,
            scan_mode: ScanMode::LocalEnhanced,
            hierarchical: true,
            ln_eps: 1e-6,
        }
    }
}

pub(crate) fn scan_mode_name(m: ScanMode) -> &'static str {
    match m {
        ScanMode::Raster => "raster",
        ScanMode::LocalEnhanced => "local",
    }
}

pub(crate) fn parse_scan_mode(s: &str) -> Result<ScanMode> {
    match s {
        "raster" => Ok(ScanMode::Raster),
        "local" => Ok(ScanMode::LocalEnhanced),
        other => Err(Error::Config(format!(
            "scan_mode must be raster or local, got {other:?}"
        ))),
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.base_channels == 0 {
            return bad("base_channels must be positive");
        }
        if self.levels == 0 || self.levels > 8 {
            return bad("levels must be in 1..=8");
        }
        if self.hierarchical && self.hier_levels == 0 {
            return bad("hier_levels must be positive when hierarchical blocks are enabled");
        }
        if self.window.0 == 0 || self.window.1 == 0 {
            return bad("window extents must be positive");
        }
        if self.state_size == 0 {
            return bad("state_size must be positive");
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return bad("ln_eps must be positive");
        }
        Ok(())
    }

    /// Required divisor of the input extents.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn block_ctx(&self) -> BlockCtx {
        BlockCtx {
            window: self.window,
            scan_mode: self.scan_mode,
            ln_eps: self.ln_eps,
        }
    }

    pub fn check_extents(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                divisor: d,
            });
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("base_channels", self.base_channels);
        kv.set("levels", self.levels);
        kv.set("hier_levels", self.hier_levels);
        kv.set("window", format!("{}x{}", self.window.0, self.window.1));
        kv.set("state_size", self.state_size);
        kv.set("seed", self.seed);
        kv.set("scan_mode", scan_mode_name(self.scan_mode));
        kv.set("hierarchical", self.hierarchical);
        kv.set("ln_eps", format!("{:e}", self.ln_eps));
        kv
    }

    /// Reads known keys from `kv`, keeping `self` for absent ones.
    pub fn apply_kv(mut self, kv: &KvConfig) -> Result<Self> {
        if let Some(v) = kv.parse("base_channels")? {
            self.base_channels = v;
        }
        if let Some(v) = kv.parse("levels")? {
            self.levels = v;
        }
        if let Some(v) = kv.parse("hier_levels")? {
            self.hier_levels = v;
        }
        if let Some(v) = kv.get("window") {
            self.window = parse_window(v)?;
        }
        if let Some(v) = kv.parse("state_size")? {
            self.state_size = v;
        }
        if let Some(v) = kv.parse("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.get("scan_mode") {
            self.scan_mode = parse_scan_mode(v)?;
        }
        if let Some(v) = kv.parse("hierarchical")? {
            self.hierarchical = v;
        }
        if let Some(v) = kv.parse("ln_eps")? {
            self.ln_eps = v;
        }
        self.validate()?;
        Ok(self)
    }
}

fn parse_window(v: &str) -> Result<(usize, usize)> {
    let err = || Error::Config(format!("window must look like 8x8, got {v:?}"));
    let (a, b) = v.split_once('x').ok_or_else(err)?;
    Ok((
        a.trim().parse().map_err(|_| err())?,
        b.trim().parse().map_err(|_| err())?,
    ))
}

/// Layer layout. Parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    embed: ConvIds,
    encoder: Vec<Rssg>,
    down: Vec<ConvIds>,
    up: Vec<ConvIds>,
    skip: Vec<ConvIds>,
    decoder: Vec<Rssg>,
    head: ConvIds,
}

/// Result of one forward pass.
pub struct Outputs {
    pub image: Var,
    pub flare: Var,
    /// Shape of each encoder group's output, finest first.
    pub encoder_shapes: Vec<Vec<usize>>,
}

impl Network {
    /// Lays out the network and draws initial values from `config.seed`.
    pub fn build(config: &NetworkConfig) -> Result<(Network, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (k, n) = (config.hier_levels, config.state_size);
        let c0 = config.base_channels;
        let embed = ConvIds::dense(&mut store, "embed", 3, 3, c0, 1, &mut rng);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for j in 0..config.levels {
            let c = config.channels_at(j);
            let gc = GroupConfig::encoder(j + 1, c);
            encoder.push(Rssg::register(
                &mut store,
                &format!("enc{}", j + 1),
                gc,
                n,
                k,
                &mut rng,
            )?);
            if j + 1 < config.levels {
                down.push(ConvIds::dense(
                    &mut store,
                    &format!("down{}", j + 1),
                    3,
                    c,
                    2 * c,
                    2,
                    &mut rng,
                ));
            }
        }
        let mut up = Vec::new();
        let mut skip = Vec::new();
        let mut decoder = Vec::new();
        for j in 0..config.levels - 1 {
            let c = config.channels_at(j);
            up.push(ConvIds::dense(
                &mut store,
                &format!("up{}", j + 1),
                3,
                2 * c,
                c,
                1,
                &mut rng,
            ));
            skip.push(ConvIds::dense(
                &mut store,
                &format!("skip{}", j + 1),
                1,
                c,
                c,
                1,
                &mut rng,
            ));
            let mut gc = GroupConfig::decoder(j + 1, c);
            if !config.hierarchical {
                gc.variant = Variant::Local;
            }
            decoder.push(Rssg::register(
                &mut store,
                &format!("dec{}", j + 1),
                gc,
                n,
                k,
                &mut rng,
            )?);
        }
        let head = ConvIds::dense(&mut store, "head", 3, c0, 6, 1, &mut rng);
        let net = Network {
            config: config.clone(),
            embed,
            encoder,
            down,
            up,
            skip,
            decoder,
            head,
        };
        Ok((net, store))
    }

    pub fn encoder_groups(&self) -> &[Rssg] {
        &self.encoder
    }

    pub fn decoder_groups(&self) -> &[Rssg] {
        &self.decoder
    }

    /// Stride-2 conv doubling channels at level `level` (0-based).
    pub fn downsample(&self, g: &mut Graph, b: &Bound, x: Var, level: usize) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 3 || !s[0].is_multiple_of(2) || !s[1].is_multiple_of(2) {
            return Err(Error::invalid(
                "downsample",
                format!("even extents required, got {s:?}"),
            ));
        }
        self.down[level].forward(g, b, x)
    }

    /// Nearest 2x upsampling then a conv halving channels, at level `level`.
    pub fn upsample(&self, g: &mut Graph, b: &Bound, x: Var, level: usize) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(2) {
            return Err(Error::invalid(
                "upsample",
                format!("even channel count required, got {s:?}"),
            ));
        }
        let u = g.upsample2(x)?;
        self.up[level].forward(g, b, u)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, input: Var) -> Result<Outputs> {
        let s = g.value(input).shape().to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::invalid(
                "network",
                format!("expected [H, W, 3], got {s:?}"),
            ));
        }
        self.config.check_extents(s[0], s[1])?;
        let ctx = self.config.block_ctx();
        let mut h = self.embed.forward(g, b, input)?;
        let mut skips = Vec::new();
        let mut encoder_shapes = Vec::new();
        for (j, group) in self.encoder.iter().enumerate() {
            h = group.forward(g, b, h, &ctx)?;
            encoder_shapes.push(g.value(h).shape().to_vec());
            if j < self.down.len() {
                skips.push(h);
                h = self.downsample(g, b, h, j)?;
            }
        }
        for j in (0..self.decoder.len()).rev() {
            h = self.upsample(g, b, h, j)?;
            let sk = self.skip[j].forward(g, b, skips[j])?;
            h = g.add(h, sk)?;
            h = self.decoder[j].forward(g, b, h, &ctx)?;
        }
        let out = self.head.forward(g, b, h)?;
        let image = g.slice_last(out, 0, 3)?;
        let flare = g.slice_last(out, 3, 3)?;
        Ok(Outputs {
            image,
            flare,
            encoder_shapes,
        })
    }

    /// Forward pass on plain tensors, returning `(image, flare)`.
    pub fn infer(&self, params: &ParamStore, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, &b, x)?;
        Ok((g.value(out.image).clone(), g.value(out.flare).clone()))
    }
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug)]
pub struct NetworkState {
    pub network: Network,
    pub params: ParamStore,
    pub iteration: u64,
    pub optim: OptimState,
}

impl NetworkState {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        let (network, params) = Network::build(config)?;
        let optim = OptimState::new(&params);
        Ok(NetworkState {
            network,
            params,
            iteration: 0,
            optim,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.network.config
    }

    pub fn infer(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        self.network.infer(&self.params, input)
    }
}

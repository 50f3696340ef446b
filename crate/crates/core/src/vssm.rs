//! Dual-branch vision state space modules and the residual blocks and
//! groups that contain them.
//!
//! For an `[H, W, C]` map `X`:
//!
//! ```text
//! X1 = LN(X)
//! Xm = Phi1(Psi(SiLU(DWConv(X1))))     Psi: local-enhanced or hierarchical scan
//! Xs = SiLU(Phi2(X1))
//! Y  = Phi3(LN(Xm + Xs))
//! ```
//!
//! A residual block adds `Y` to its input, then a LayerNorm + channel MLP
//! (ratio 2, SiLU) residual. A group is `x + Conv3x3(blocks(x))`.

use rand::Rng;

use crate::autodiff::{ConvMode, ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore, SsmIds};
use crate::scan;
use crate::ssm::SsmParams;
use crate::tensor::Tensor;

pub const MLP_RATIO: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Local,
    Hierarchical,
}

/// How 2D maps are ordered before each selective scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    /// Four directions over the whole map (no windows).
    Raster,
    /// Four directions over local windows.
    LocalEnhanced,
}

/// Settings shared by every block during one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockCtx {
    pub window: (usize, usize),
    pub scan_mode: ScanMode,
    pub ln_eps: f64,
}

impl BlockCtx {
    /// Window handed to the scan; it is clamped to each map's extent there.
    pub fn scan_window(&self) -> (usize, usize) {
        match self.scan_mode {
            ScanMode::Raster => (usize::MAX, usize::MAX),
            ScanMode::LocalEnhanced => self.window,
        }
    }
}

pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormIds {
    pub fn register(store: &mut ParamStore, prefix: &str, c: usize) -> Self {
        LayerNormIds {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, b.var(self.gamma), b.var(self.beta), eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        LinearIds {
            w: store.add(
                format!("{prefix}.w"),
                fan_in_uniform(&[cin, cout], cin, rng),
            ),
            b: store.add(format!("{prefix}.b"), fan_in_uniform(&[cout], cin, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.linear(x, b.var(self.w), Some(b.var(self.b)))
    }
}

/// Convolution weights plus bias; `spec` fixes mode, stride and padding.
#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl ConvIds {
    /// Dense `[k, k, cin, cout]` convolution with fan-in uniform init.
    pub fn dense(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = k * k * cin;
        ConvIds {
            w: store.add(
                format!("{prefix}.w"),
                fan_in_uniform(&[k, k, cin, cout], fan, rng),
            ),
            b: store.add(format!("{prefix}.b"), fan_in_uniform(&[cout], fan, rng)),
            spec: ConvSpec {
                stride,
                ..ConvSpec::same(ConvMode::Dense)
            },
        }
    }

    /// Dense convolution starting at exactly zero.
    pub fn dense_zero(store: &mut ParamStore, prefix: &str, k: usize, c: usize) -> Self {
        ConvIds {
            w: store.add(format!("{prefix}.w"), Tensor::zeros(&[k, k, c, c])),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[c])),
            spec: ConvSpec::same(ConvMode::Dense),
        }
    }

    pub fn depthwise(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        c: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = k * k;
        ConvIds {
            w: store.add(format!("{prefix}.w"), fan_in_uniform(&[k, k, c], fan, rng)),
            b: store.add(format!("{prefix}.b"), fan_in_uniform(&[c], fan, rng)),
            spec: ConvSpec::same(ConvMode::Depthwise),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.w), Some(b.var(self.b)), self.spec)
    }
}

/// Scan parameters: four directions, or four directions per hierarchical level.
#[derive(Clone, Debug)]
pub enum ScanWeights {
    Local(Vec<SsmIds>),
    Hierarchical(Vec<Vec<SsmIds>>),
}

fn register_directions(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    state: usize,
    rng: &mut impl Rng,
) -> Vec<SsmIds> {
    (0..4)
        .map(|d| {
            SsmIds::register(
                store,
                &format!("{prefix}.dir{d}"),
                SsmParams::init(c, state, rng),
            )
        })
        .collect()
}

/// Weights of one dual-branch module.
#[derive(Clone, Debug)]
pub struct VssmWeights {
    pub ln1: LayerNormIds,
    pub dwconv: ConvIds,
    pub phi1: LinearIds,
    pub phi2: LinearIds,
    pub ln2: LayerNormIds,
    pub phi3: LinearIds,
    pub scan: ScanWeights,
}

impl VssmWeights {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        state: usize,
        variant: Variant,
        hier_levels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let ln1 = LayerNormIds::register(store, &format!("{prefix}.ln1"), c);
        let dwconv = ConvIds::depthwise(store, &format!("{prefix}.dwconv"), 3, c, rng);
        let scan = match variant {
            Variant::Local => ScanWeights::Local(register_directions(
                store,
                &format!("{prefix}.scan"),
                c,
                state,
                rng,
            )),
            Variant::Hierarchical => ScanWeights::Hierarchical(
                (1..=hier_levels)
                    .map(|i| {
                        register_directions(
                            store,
                            &format!("{prefix}.scan.level{i}"),
                            c,
                            state,
                            rng,
                        )
                    })
                    .collect(),
            ),
        };
        VssmWeights {
            ln1,
            dwconv,
            phi1: LinearIds::register(store, &format!("{prefix}.phi1"), c, c, rng),
            phi2: LinearIds::register(store, &format!("{prefix}.phi2"), c, c, rng),
            ln2: LayerNormIds::register(store, &format!("{prefix}.ln2"), c),
            phi3: LinearIds::register(store, &format!("{prefix}.phi3"), c, c, rng),
            scan,
        }
    }

    pub fn variant(&self) -> Variant {
        match self.scan {
            ScanWeights::Local(_) => Variant::Local,
            ScanWeights::Hierarchical(_) => Variant::Hierarchical,
        }
    }

    /// The scan operator applied inside the main branch.
    pub fn scan_forward(&self, g: &mut Graph, b: &Bound, x: Var, ctx: &BlockCtx) -> Result<Var> {
        match &self.scan {
            ScanWeights::Local(dirs) => {
                let vars: Vec<_> = dirs.iter().map(|s| s.vars(b)).collect();
                scan::local_enhanced_ss2d_graph(g, x, &vars, ctx.scan_window())
            }
            ScanWeights::Hierarchical(levels) => {
                let vars: Vec<Vec<_>> = levels
                    .iter()
                    .map(|l| l.iter().map(|s| s.vars(b)).collect())
                    .collect();
                scan::hier_scan_graph(g, x, &vars, ctx.scan_window())
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, ctx: &BlockCtx) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid(
                "vssm",
                format!("expected [H, W, C], got {shape:?}"),
            ));
        }
        let x1 = self.ln1.forward(g, b, x, ctx.ln_eps)?;
        let conv = self.dwconv.forward(g, b, x1)?;
        let act = g.silu(conv);
        let scanned = self.scan_forward(g, b, act, ctx)?;
        let xm = self.phi1.forward(g, b, scanned)?;
        let p2 = self.phi2.forward(g, b, x1)?;
        let xs = g.silu(p2);
        let sum = g.add(xm, xs)?;
        let normed = self.ln2.forward(g, b, sum, ctx.ln_eps)?;
        self.phi3.forward(g, b, normed)
    }
}

/// Residual state space block: `z = x + VSSM(x)`, `out = z + MLP(LN(z))`.
#[derive(Clone, Debug)]
pub struct Rssb {
    pub vssm: VssmWeights,
    pub ln: LayerNormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl Rssb {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        state: usize,
        variant: Variant,
        hier_levels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Rssb {
            vssm: VssmWeights::register(
                store,
                &format!("{prefix}.vssm"),
                c,
                state,
                variant,
                hier_levels,
                rng,
            ),
            ln: LayerNormIds::register(store, &format!("{prefix}.ln"), c),
            fc1: LinearIds::register(store, &format!("{prefix}.fc1"), c, MLP_RATIO * c, rng),
            fc2: LinearIds::register(store, &format!("{prefix}.fc2"), MLP_RATIO * c, c, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, ctx: &BlockCtx) -> Result<Var> {
        let y = self.vssm.forward(g, b, x, ctx)?;
        let z = g.add(x, y)?;
        let n = self.ln.forward(g, b, z, ctx.ln_eps)?;
        let h = self.fc1.forward(g, b, n)?;
        let h = g.silu(h);
        let m = self.fc2.forward(g, b, h)?;
        g.add(z, m)
    }
}

/// Shape of one residual group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupConfig {
    /// 1-based position in the encoder or decoder.
    pub index: usize,
    pub block_count: usize,
    pub variant: Variant,
    pub channels: usize,
}

impl GroupConfig {
    /// Encoder group `l`: `l` local blocks.
    pub fn encoder(index: usize, channels: usize) -> Self {
        GroupConfig {
            index,
            block_count: index,
            variant: Variant::Local,
            channels,
        }
    }

    /// Decoder group `l`: `l - 1` local blocks then one hierarchical block.
    pub fn decoder(index: usize, channels: usize) -> Self {
        GroupConfig {
            index,
            block_count: index,
            variant: Variant::Hierarchical,
            channels,
        }
    }

    /// Variant of block `i` (0-based) in this group.
    pub fn block_variant(&self, i: usize) -> Variant {
        if self.variant == Variant::Hierarchical && i + 1 == self.block_count {
            Variant::Hierarchical
        } else {
            Variant::Local
        }
    }
}

/// Residual state space group: `x + Conv(RSSB_n(... RSSB_1(x)))`.
#[derive(Clone, Debug)]
pub struct Rssg {
    pub config: GroupConfig,
    pub blocks: Vec<Rssb>,
    pub refine: ConvIds,
}

impl Rssg {
    /// The refinement convolution starts at zero so the group starts as the identity.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        config: GroupConfig,
        state: usize,
        hier_levels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.block_count == 0 {
            return Err(Error::Config(format!(
                "group {prefix} needs at least one block"
            )));
        }
        let blocks = (0..config.block_count)
            .map(|i| {
                Rssb::register(
                    store,
                    &format!("{prefix}.block{i}"),
                    config.channels,
                    state,
                    config.block_variant(i),
                    hier_levels,
                    rng,
                )
            })
            .collect();
        let refine = ConvIds::dense_zero(store, &format!("{prefix}.refine"), 3, config.channels);
        Ok(Rssg {
            config,
            blocks,
            refine,
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, ctx: &BlockCtx) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, b, h, ctx)?;
        }
        let r = self.refine.forward(g, b, h)?;
        g.add(x, r)
    }

    pub fn variants(&self) -> Vec<Variant> {
        self.blocks.iter().map(|b| b.vssm.variant()).collect()
    }
}

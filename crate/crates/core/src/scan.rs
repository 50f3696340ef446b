//! Orders that flatten a 2D grid into 1D sequences, and the two 2D scans
//! built on them.
//!
//! * [`ScanOrder::local_window`]: windows in raster order, pixels in raster
//!   order inside each window, so neighbours stay close in the sequence.
//! * [`Direction`]: the four variants (identity, transpose, and the reversed
//!   sequence of each) that each get their own SSM.
//! * [`HierPartition`]: stride-`2^i` sub-images that bring pixels `2^i`
//!   apart next to each other, with the reverse map back onto the grid.

use std::rc::Rc;

use crate::autodiff::{Graph, Var, PAD_ROW};
use crate::error::{Error, Result};
use crate::ssm::{SsmParams, SsmVars};
use crate::tensor::Tensor;

/// Bijection between sequence positions and row-major flat grid indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    h: usize,
    w: usize,
    /// Sequence position -> flat grid index.
    forward: Vec<usize>,
    /// Flat grid index -> sequence position.
    inverse: Vec<usize>,
}

impl ScanOrder {
    /// Validates that `forward` is a permutation of `0..h*w`.
    pub fn from_forward(h: usize, w: usize, forward: Vec<usize>) -> Result<Self> {
        let n = h * w;
        if forward.len() != n {
            return Err(Error::invalid(
                "scan_order",
                format!("{} positions for a {h}x{w} grid", forward.len()),
            ));
        }
        let mut inverse = vec![usize::MAX; n];
        for (pos, &flat) in forward.iter().enumerate() {
            if flat >= n || inverse[flat] != usize::MAX {
                return Err(Error::invalid(
                    "scan_order",
                    format!("index {flat} repeated or out of range"),
                ));
            }
            inverse[flat] = pos;
        }
        Ok(ScanOrder {
            h,
            w,
            forward,
            inverse,
        })
    }

    pub fn raster(h: usize, w: usize) -> Self {
        let forward: Vec<usize> = (0..h * w).collect();
        ScanOrder {
            h,
            w,
            inverse: forward.clone(),
            forward,
        }
    }

    /// Non-overlapping `win_h x win_w` windows visited in raster order, each
    /// traversed in raster order. Edge windows keep their partial extent.
    pub fn local_window(h: usize, w: usize, win_h: usize, win_w: usize) -> Result<Self> {
        if win_h == 0 || win_w == 0 {
            return Err(Error::domain(
                "local_window_order",
                format!("window {win_h}x{win_w} must be positive"),
            ));
        }
        let mut forward = Vec::with_capacity(h * w);
        for wy in (0..h).step_by(win_h) {
            for wx in (0..w).step_by(win_w) {
                for y in wy..(wy + win_h).min(h) {
                    for x in wx..(wx + win_w).min(w) {
                        forward.push(y * w + x);
                    }
                }
            }
        }
        Ok(Self::from_parts(h, w, forward))
    }

    fn from_parts(h: usize, w: usize, forward: Vec<usize>) -> Self {
        let mut inverse = vec![0; forward.len()];
        for (pos, &flat) in forward.iter().enumerate() {
            inverse[flat] = pos;
        }
        ScanOrder {
            h,
            w,
            forward,
            inverse,
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// Same pixels visited back to front.
    pub fn reversed(&self) -> Self {
        let forward: Vec<usize> = self.forward.iter().rev().copied().collect();
        Self::from_parts(self.h, self.w, forward)
    }

    /// Flattens an `[h, w, C]` map into a `[h*w, C]` sequence.
    pub fn flatten(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.check_map(x)?;
        let mut out = Vec::with_capacity(x.numel());
        for &flat in &self.forward {
            out.extend_from_slice(&x.data()[flat * c..(flat + 1) * c]);
        }
        Ok(Tensor::from_parts(vec![self.len(), c], out))
    }

    /// Folds a `[h*w, C]` sequence back into an `[h, w, C]` map.
    pub fn restore(&self, seq: &Tensor) -> Result<Tensor> {
        let c = seq.last_dim();
        if seq.numel() != self.len() * c {
            return Err(Error::shape("restore", seq.shape(), &[self.len(), c]));
        }
        let mut out = Vec::with_capacity(seq.numel());
        for &pos in &self.inverse {
            out.extend_from_slice(&seq.data()[pos * c..(pos + 1) * c]);
        }
        Ok(Tensor::from_parts(vec![self.h, self.w, c], out))
    }

    fn check_map(&self, x: &Tensor) -> Result<usize> {
        match x.shape() {
            &[h, w, c] if h == self.h && w == self.w => Ok(c),
            s => Err(Error::shape(
                "scan_order",
                s,
                &[self.h, self.w, x.last_dim()],
            )),
        }
    }
}

/// The four scan directions, each with its own SSM parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Identity,
    Transpose,
    Flip,
    TransposeFlip,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Identity,
        Direction::Transpose,
        Direction::Flip,
        Direction::TransposeFlip,
    ];

    /// Scan order of this direction over an `h x w` grid with windows `win`.
    ///
    /// Transposed variants window the transposed grid with `(win_w, win_h)`,
    /// which covers the same pixel blocks as the untransposed windows.
    /// Flipped variants reverse the resulting sequence.
    pub fn order(self, h: usize, w: usize, win: (usize, usize)) -> Result<ScanOrder> {
        let (win_h, win_w) = win;
        let base = match self {
            Direction::Identity | Direction::Flip => ScanOrder::local_window(h, w, win_h, win_w)?,
            Direction::Transpose | Direction::TransposeFlip => {
                let t = ScanOrder::local_window(w, h, win_w, win_h)?;
                // transposed flat index x * h + y is original pixel y * w + x
                let forward = t.forward.iter().map(|&tf| (tf % h) * w + tf / h).collect();
                ScanOrder::from_parts(h, w, forward)
            }
        };
        Ok(match self {
            Direction::Flip | Direction::TransposeFlip => base.reversed(),
            _ => base,
        })
    }
}

/// The four directional sequences of `x: [H, W, C]`, each with the order that
/// restores it.
pub fn directional_variants(x: &Tensor, win: (usize, usize)) -> Result<Vec<(Tensor, ScanOrder)>> {
    let &[h, w, _] = x.shape() else {
        return Err(Error::invalid(
            "directional_variants",
            format!("expected [H, W, C], got {:?}", x.shape()),
        ));
    };
    Direction::ALL
        .iter()
        .map(|d| {
            let order = d.order(h, w, win)?;
            Ok((order.flatten(x)?, order))
        })
        .collect()
}

/// Window clamped to the grid, so coarse feature maps use at most their own extent.
pub fn clamp_window(h: usize, w: usize, win: (usize, usize)) -> (usize, usize) {
    (win.0.min(h).max(1), win.1.min(w).max(1))
}

/// Local-enhanced four-direction scan over `seqs` stacked `h x w` maps
/// (`x: [seqs * h * w, C]`, each map row-major). Returns the same layout.
pub fn ss2d_stacked(
    g: &mut Graph,
    x: Var,
    seqs: usize,
    h: usize,
    w: usize,
    ssms: &[SsmVars],
    win: (usize, usize),
) -> Result<Var> {
    if ssms.len() != 4 {
        return Err(Error::Contract(format!(
            "four directional SSMs required, got {}",
            ssms.len()
        )));
    }
    let c = g.value(x).last_dim();
    if g.value(x).numel() != seqs * h * w * c {
        return Err(Error::shape(
            "local_enhanced_ss2d",
            g.value(x).shape(),
            &[seqs * h * w, c],
        ));
    }
    let win = clamp_window(h, w, win);
    let plane = h * w;
    let mut total: Option<Var> = None;
    for (dir, ssm) in Direction::ALL.iter().zip(ssms) {
        let order = dir.order(h, w, win)?;
        let fwd: Vec<usize> = (0..seqs)
            .flat_map(|s| order.forward().iter().map(move |&f| s * plane + f))
            .collect();
        let inv: Vec<usize> = (0..seqs)
            .flat_map(|s| order.inverse().iter().map(move |&p| s * plane + p))
            .collect();
        let seq = g.gather_rows(x, Rc::new(fwd), &[seqs * plane, c])?;
        let y = ssm.apply(g, seq, seqs)?;
        let back = g.gather_rows(y, Rc::new(inv), &[seqs * plane, c])?;
        total = Some(match total {
            None => back,
            Some(t) => g.add(t, back)?,
        });
    }
    Ok(total.expect("four directions"))
}

/// Local-enhanced SS2D of one `[H, W, C]` map on a graph.
pub fn local_enhanced_ss2d_graph(
    g: &mut Graph,
    x: Var,
    ssms: &[SsmVars],
    win: (usize, usize),
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let &[h, w, c] = shape.as_slice() else {
        return Err(Error::invalid(
            "local_enhanced_ss2d",
            format!("expected [H, W, C], got {shape:?}"),
        ));
    };
    let rows = g.reshape(x, &[h * w, c])?;
    let y = ss2d_stacked(g, rows, 1, h, w, ssms, win)?;
    g.reshape(y, &[h, w, c])
}

/// Local-enhanced SS2D: sum over the four directions of
/// restore(SSM_dir(flatten_dir(x))).
pub fn local_enhanced_ss2d(x: &Tensor, ssms: &[SsmParams], win: (usize, usize)) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars: Vec<SsmVars> = ssms
        .iter()
        .map(|p| SsmVars::bind(&mut g, p, false))
        .collect();
    let y = local_enhanced_ss2d_graph(&mut g, xv, &vars, win)?;
    Ok(g.value(y).clone())
}

/// Level-`i` stride-`2^i` partition of an `H x W` grid.
///
/// Sub-image `(a, b)` holds pixels `(a + 2^i y, b + 2^i x)`; offsets range over
/// `{0..2^i}^2`, dropping those that fall entirely outside a small grid. All
/// sub-images share the extent of the largest, `ceil(H / 2^i) x ceil(W / 2^i)`,
/// with out-of-bounds positions padded by zeros.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierPartition {
    pub level: u32,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub offsets: Vec<(usize, usize)>,
    pub sub_shape: (usize, usize),
    /// Flat grid index -> (sub-image id, flat position in the sub-image).
    pub membership: Vec<(usize, usize)>,
}

impl HierPartition {
    pub fn new(height: usize, width: usize, level: u32) -> Result<Self> {
        if level < 1 {
            return Err(Error::domain("hier_partition", "level must be at least 1"));
        }
        if level >= usize::BITS / 2 {
            return Err(Error::domain(
                "hier_partition",
                format!("level {level} too large"),
            ));
        }
        let stride = 1usize << level;
        let sub_shape = (height.div_ceil(stride), width.div_ceil(stride));
        let offsets: Vec<(usize, usize)> = (0..stride.min(height))
            .flat_map(|a| (0..stride.min(width)).map(move |b| (a, b)))
            .collect();
        let mut membership = vec![(0, 0); height * width];
        for (k, &(a, b)) in offsets.iter().enumerate() {
            for y in 0..sub_shape.0 {
                for x in 0..sub_shape.1 {
                    let (gy, gx) = (a + stride * y, b + stride * x);
                    if gy < height && gx < width {
                        membership[gy * width + gx] = (k, y * sub_shape.1 + x);
                    }
                }
            }
        }
        Ok(HierPartition {
            level,
            height,
            width,
            stride,
            offsets,
            sub_shape,
            membership,
        })
    }

    pub fn count(&self) -> usize {
        self.offsets.len()
    }

    fn sub_len(&self) -> usize {
        self.sub_shape.0 * self.sub_shape.1
    }

    /// Unpadded extent of sub-image `k`.
    pub fn valid_shape(&self, k: usize) -> (usize, usize) {
        let (a, b) = self.offsets[k];
        (
            (self.height - a).div_ceil(self.stride),
            (self.width - b).div_ceil(self.stride),
        )
    }

    /// For each stacked sub-image row, its source grid pixel (or padding).
    fn gather_index(&self) -> Vec<usize> {
        let (sh, sw) = self.sub_shape;
        let mut idx = Vec::with_capacity(self.count() * sh * sw);
        for &(a, b) in &self.offsets {
            for y in 0..sh {
                for x in 0..sw {
                    let (gy, gx) = (a + self.stride * y, b + self.stride * x);
                    idx.push(if gy < self.height && gx < self.width {
                        gy * self.width + gx
                    } else {
                        PAD_ROW
                    });
                }
            }
        }
        idx
    }

    /// For each grid pixel, its stacked sub-image row.
    fn reverse_index(&self) -> Vec<usize> {
        self.membership
            .iter()
            .map(|&(k, p)| k * self.sub_len() + p)
            .collect()
    }
}

/// Splits `f: [H, W, C]` into the zero-padded level-`level` sub-images.
pub fn hier_partition(f: &Tensor, level: u32) -> Result<(Vec<Tensor>, HierPartition)> {
    let &[h, w, c] = f.shape() else {
        return Err(Error::invalid(
            "hier_partition",
            format!("expected [H, W, C], got {:?}", f.shape()),
        ));
    };
    let part = HierPartition::new(h, w, level)?;
    let (sh, sw) = part.sub_shape;
    let idx = part.gather_index();
    let subs = idx
        .chunks(sh * sw)
        .map(|chunk| {
            let mut data = vec![0.0; sh * sw * c];
            for (p, &src) in chunk.iter().enumerate() {
                if src != PAD_ROW {
                    data[p * c..(p + 1) * c].copy_from_slice(&f.data()[src * c..(src + 1) * c]);
                }
            }
            Tensor::from_parts(vec![sh, sw, c], data)
        })
        .collect();
    Ok((subs, part))
}

/// Writes every grid pixel from its (sub-image, position); padding is dropped.
pub fn hier_reverse(subs: &[Tensor], part: &HierPartition) -> Result<Tensor> {
    if subs.len() != part.count() {
        return Err(Error::Contract(format!(
            "{} sub-images for a partition of {}",
            subs.len(),
            part.count()
        )));
    }
    let c = subs.first().map_or(0, |s| s.last_dim());
    let (sh, sw) = part.sub_shape;
    if let Some(bad) = subs.iter().find(|s| s.shape() != [sh, sw, c]) {
        return Err(Error::Contract(format!(
            "sub-image shape {:?}, expected {:?}",
            bad.shape(),
            [sh, sw, c]
        )));
    }
    let mut out = Vec::with_capacity(part.height * part.width * c);
    for &(k, p) in &part.membership {
        out.extend_from_slice(&subs[k].data()[p * c..(p + 1) * c]);
    }
    Ok(Tensor::from_parts(vec![part.height, part.width, c], out))
}

/// Hierarchical scan on a graph: for each level `i = 1..=K`, partition,
/// run that level's local-enhanced SS2D on every sub-image, reverse-map, then
/// average the `K` level outputs.
pub fn hier_scan_graph(
    g: &mut Graph,
    x: Var,
    levels: &[Vec<SsmVars>],
    win: (usize, usize),
) -> Result<Var> {
    if levels.is_empty() {
        return Err(Error::domain("hier_scan", "at least one level required"));
    }
    let shape = g.value(x).shape().to_vec();
    let &[h, w, c] = shape.as_slice() else {
        return Err(Error::invalid(
            "hier_scan",
            format!("expected [H, W, C], got {shape:?}"),
        ));
    };
    let mut total: Option<Var> = None;
    for (i, ssms) in levels.iter().enumerate() {
        let part = HierPartition::new(h, w, i as u32 + 1)?;
        let (sh, sw) = part.sub_shape;
        let stacked = g.gather_rows(
            x,
            Rc::new(part.gather_index()),
            &[part.count() * sh * sw, c],
        )?;
        let y = ss2d_stacked(g, stacked, part.count(), sh, sw, ssms, win)?;
        let back = g.gather_rows(y, Rc::new(part.reverse_index()), &[h, w, c])?;
        total = Some(match total {
            None => back,
            Some(t) => g.add(t, back)?,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / levels.len() as f64))
}

/// Hierarchical scan of `f: [H, W, C]` with one set of four SSMs per level.
pub fn hier_scan(f: &Tensor, levels: &[Vec<SsmParams>], win: (usize, usize)) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(f.clone());
    let vars: Vec<Vec<SsmVars>> = levels
        .iter()
        .map(|lvl| {
            lvl.iter()
                .map(|p| SsmVars::bind(&mut g, p, false))
                .collect()
        })
        .collect();
    let y = hier_scan_graph(&mut g, xv, &vars, win)?;
    Ok(g.value(y).clone())
}

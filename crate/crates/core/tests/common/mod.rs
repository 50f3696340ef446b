#![allow(dead_code)]

use deflare_core::ssm::SsmParams;
use deflare_core::Tensor;
use rand::Rng;

pub fn random_map(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[h, w, c], |_| rng.gen_range(-1.0..1.0))
}

/// Every parameter non-trivial, including the bases that start at zero.
pub fn random_ssm(c: usize, n: usize, rng: &mut impl Rng) -> SsmParams {
    let mut p = SsmParams::init(c, n, rng);
    for t in [
        &mut p.a_log,
        &mut p.d,
        &mut p.delta_base,
        &mut p.b_base,
        &mut p.c_base,
    ] {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    p
}

/// Selective SSM evaluated token by token from its definition.
pub fn brute_selective(p: &SsmParams, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (c, n) = (p.d.numel(), p.b_base.numel());
    let mut h = vec![vec![0.0; n]; c];
    let mut out = Vec::with_capacity(seq.len());
    for x in seq {
        let dot = |w: &Tensor, base: f64, cols: usize, j: usize| -> f64 {
            base + (0..c).map(|i| x[i] * w.data()[i * cols + j]).sum::<f64>()
        };
        let bk: Vec<f64> = (0..n)
            .map(|j| dot(&p.w_b, p.b_base.data()[j], n, j))
            .collect();
        let ck: Vec<f64> = (0..n)
            .map(|j| dot(&p.w_c, p.c_base.data()[j], n, j))
            .collect();
        let mut y = vec![0.0; c];
        for ch in 0..c {
            let raw = dot(&p.w_delta, p.delta_base.data()[ch], c, ch);
            let delta = (1.0 + raw.exp()).ln();
            for j in 0..n {
                let a = -p.a_log.data()[ch * n + j].exp();
                let a_bar = (delta * a).exp();
                let b_bar = (a_bar - 1.0) / (delta * a) * bk[j];
                h[ch][j] = a_bar * h[ch][j] + b_bar * x[ch];
                y[ch] += ck[j] * h[ch][j];
            }
            y[ch] += p.d.data()[ch] * x[ch];
        }
        out.push(y);
    }
    out
}

/// Pixel visiting order of one direction, listed as (row, col) coordinates.
///
/// `dir`: 0 windows row by row, 1 the same windows column by column, 2 and 3
/// their reverses.
pub fn brute_order(h: usize, w: usize, win: (usize, usize), dir: usize) -> Vec<(usize, usize)> {
    let (wh, ww) = (win.0.min(h).max(1), win.1.min(w).max(1));
    let mut order = Vec::new();
    if dir.is_multiple_of(2) {
        for by in 0..h.div_ceil(wh) {
            for bx in 0..w.div_ceil(ww) {
                for y in by * wh..((by + 1) * wh).min(h) {
                    for x in bx * ww..((bx + 1) * ww).min(w) {
                        order.push((y, x));
                    }
                }
            }
        }
    } else {
        for bx in 0..w.div_ceil(ww) {
            for by in 0..h.div_ceil(wh) {
                for x in bx * ww..((bx + 1) * ww).min(w) {
                    for y in by * wh..((by + 1) * wh).min(h) {
                        order.push((y, x));
                    }
                }
            }
        }
    }
    if dir >= 2 {
        order.reverse();
    }
    order
}

pub fn brute_ss2d(x: &Tensor, ssms: &[SsmParams], win: (usize, usize)) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[h, w, c]);
    for (dir, p) in ssms.iter().enumerate() {
        let order = brute_order(h, w, win, dir);
        let seq: Vec<Vec<f64>> = order
            .iter()
            .map(|&(y, xx)| (0..c).map(|k| x.at(&[y, xx, k])).collect())
            .collect();
        let ys = brute_selective(p, &seq);
        for (&(y, xx), v) in order.iter().zip(ys) {
            for (k, vk) in v.iter().enumerate() {
                out.data_mut()[(y * w + xx) * c + k] += vk;
            }
        }
    }
    out
}

pub fn brute_hier_scan(x: &Tensor, levels: &[Vec<SsmParams>], win: (usize, usize)) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[h, w, c]);
    for (i, ssms) in levels.iter().enumerate() {
        let s = 1usize << (i + 1);
        let (sh, sw) = (h.div_ceil(s), w.div_ceil(s));
        for a in 0..s.min(h) {
            for b in 0..s.min(w) {
                let sub = Tensor::from_fn(&[sh, sw, c], |f| {
                    let (y, xx, k) = (f / (sw * c), (f / c) % sw, f % c);
                    let (gy, gx) = (a + s * y, b + s * xx);
                    if gy < h && gx < w {
                        x.at(&[gy, gx, k])
                    } else {
                        0.0
                    }
                });
                let ys = brute_ss2d(&sub, ssms, win);
                for y in 0..sh {
                    for xx in 0..sw {
                        let (gy, gx) = (a + s * y, b + s * xx);
                        if gy < h && gx < w {
                            for k in 0..c {
                                out.data_mut()[(gy * w + gx) * c + k] +=
                                    ys.at(&[y, xx, k]) / levels.len() as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

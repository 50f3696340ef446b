//! Procedural flare pairs.
//!
//! A pair is a dim background `I0`, an additive flare layer `F` (a scattering
//! glow with streaks plus reflective ghosts) and the corrupted image
//! `I = clip01(I0 + F)`. Everything is a pure function of extents,
//! parameters and seed.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::ppm;
use crate::tensor::Tensor;

/// Independent seed for item `index` of a stream rooted at `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng.next_u64()
}

fn rgb(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |i| f(i / (3 * w), (i / 3) % w, i % 3))
}

/// Dim procedural scene: a bilinear colour gradient, random rectangles and
/// disks, and mild uniform noise.
pub fn gen_background(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners: Vec<[f64; 3]> = (0..4)
        .map(|_| [0; 3].map(|_| rng.gen_range(0.02..0.3)))
        .collect();
    struct Shape {
        disk: bool,
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        color: [f64; 3],
        alpha: f64,
    }
    let s = h.min(w) as f64;
    let shapes: Vec<Shape> = (0..rng.gen_range(3..=6))
        .map(|_| Shape {
            disk: rng.gen_bool(0.5),
            cy: rng.gen_range(0.0..h as f64),
            cx: rng.gen_range(0.0..w as f64),
            ry: rng.gen_range(0.05..0.3) * s,
            rx: rng.gen_range(0.05..0.3) * s,
            color: [0; 3].map(|_| rng.gen_range(0.0..0.45)),
            alpha: rng.gen_range(0.7..1.0),
        })
        .collect();
    let noise: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(-0.01..0.01)).collect();
    let (fh, fw) = ((h.max(2) - 1) as f64, (w.max(2) - 1) as f64);
    rgb(h, w, |y, x, c| {
        let (u, v) = (y as f64 / fh, x as f64 / fw);
        let mut val = (1.0 - u) * ((1.0 - v) * corners[0][c] + v * corners[1][c])
            + u * ((1.0 - v) * corners[2][c] + v * corners[3][c]);
        for sh in &shapes {
            let (dy, dx) = ((y as f64 - sh.cy) / sh.ry, (x as f64 - sh.cx) / sh.rx);
            let inside = if sh.disk {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            };
            if inside {
                val = (1.0 - sh.alpha) * val + sh.alpha * sh.color[c];
            }
        }
        (val + noise[(y * w + x) * 3 + c]).clamp(0.0, 1.0)
    })
}

/// Anisotropic Gaussian ridge through the light source.
#[derive(Clone, Debug, PartialEq)]
pub struct Streak {
    /// Radians.
    pub angle: f64,
    pub amplitude: f64,
    /// Standard deviation along the ridge, pixels.
    pub length: f64,
    /// Standard deviation across the ridge, pixels.
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterParams {
    pub glow_amplitude: f64,
    /// Standard deviation of the radial glow, pixels.
    pub glow_sigma: f64,
    pub streaks: Vec<Streak>,
    pub tint: [f64; 3],
}

impl ScatterParams {
    pub fn random(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let s = h.min(w) as f64;
        ScatterParams {
            glow_amplitude: rng.gen_range(0.4..0.9),
            glow_sigma: rng.gen_range(0.08..0.2) * s,
            streaks: (0..rng.gen_range(2..=4))
                .map(|_| Streak {
                    angle: rng.gen_range(0.0..PI),
                    amplitude: rng.gen_range(0.2..0.5),
                    length: rng.gen_range(0.3..0.8) * s,
                    width: rng.gen_range(0.01..0.03) * s,
                })
                .collect(),
            tint: [0; 3].map(|_| rng.gen_range(0.6..1.0)),
        }
    }
}

fn check_light(h: usize, w: usize, light: (f64, f64)) -> Result<()> {
    let (ly, lx) = light;
    let inside = ly >= 0.0 && lx >= 0.0 && ly <= (h as f64 - 1.0) && lx <= (w as f64 - 1.0);
    if !inside {
        return Err(Error::domain(
            "flare",
            format!("light position {light:?} outside {h}x{w} image"),
        ));
    }
    Ok(())
}

/// Per-element tint jitter in `[0.9, 1.1]` for `count` elements.
fn jitter(count: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| [0; 3].map(|_| rng.gen_range(0.9..1.1)))
        .collect()
}

/// Radial Gaussian glow plus streaks, all centred on `light` (row, column).
pub fn gen_scattering_flare(
    h: usize,
    w: usize,
    light: (f64, f64),
    p: &ScatterParams,
    seed: u64,
) -> Result<Tensor> {
    check_light(h, w, light)?;
    let jit = jitter(p.streaks.len(), seed);
    let glow_den = 2.0 * p.glow_sigma * p.glow_sigma;
    Ok(rgb(h, w, |y, x, c| {
        let (dy, dx) = (y as f64 - light.0, x as f64 - light.1);
        let mut v = 0.0;
        if p.glow_amplitude != 0.0 {
            v += p.glow_amplitude * (-(dy * dy + dx * dx) / glow_den).exp();
        }
        for (s, j) in p.streaks.iter().zip(&jit) {
            let (sin, cos) = s.angle.sin_cos();
            let along = dx * cos + dy * sin;
            let across = -dx * sin + dy * cos;
            let ridge = (-across * across / (2.0 * s.width * s.width)
                - along * along / (2.0 * s.length * s.length))
                .exp();
            v += s.amplitude * j[c] * ridge;
        }
        v * p.tint[c]
    }))
}

/// A ghost placed at `center + offset * (center - light)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ghost {
    pub offset: f64,
    /// Pixels.
    pub radius: f64,
    pub amplitude: f64,
    /// Thin ring instead of a filled disk.
    pub ring: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectParams {
    pub ghosts: Vec<Ghost>,
    pub tint: [f64; 3],
}

impl ReflectParams {
    pub fn random(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let s = h.min(w) as f64;
        ReflectParams {
            ghosts: (0..rng.gen_range(2..=4))
                .map(|_| Ghost {
                    offset: rng.gen_range(0.3..1.2),
                    radius: rng.gen_range(0.04..0.12) * s,
                    amplitude: rng.gen_range(0.1..0.35),
                    ring: rng.gen_bool(0.4),
                })
                .collect(),
            tint: [0; 3].map(|_| rng.gen_range(0.6..1.0)),
        }
    }
}

pub fn image_center(h: usize, w: usize) -> (f64, f64) {
    ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
}

/// Ghost centre on the line from `light` through the image centre.
pub fn ghost_position(h: usize, w: usize, light: (f64, f64), offset: f64) -> (f64, f64) {
    let (cy, cx) = image_center(h, w);
    (cy + offset * (cy - light.0), cx + offset * (cx - light.1))
}

fn ghost_profile(g: &Ghost, dist: f64) -> f64 {
    if g.radius <= 0.0 {
        return 0.0;
    }
    if g.ring {
        let t = 0.15 * g.radius;
        (-(dist - g.radius).powi(2) / (2.0 * t * t)).exp()
    } else {
        // flat core, smooth edge from 0.8 r to r
        let u = ((dist / g.radius - 0.8) / 0.2).clamp(0.0, 1.0);
        1.0 - u * u * (3.0 - 2.0 * u)
    }
}

/// Disks and rings on the far side of the centre from the light.
pub fn gen_reflective_flare(
    h: usize,
    w: usize,
    light: (f64, f64),
    p: &ReflectParams,
    seed: u64,
) -> Result<Tensor> {
    check_light(h, w, light)?;
    let jit = jitter(p.ghosts.len(), seed);
    let centres: Vec<(f64, f64)> = p
        .ghosts
        .iter()
        .map(|g| ghost_position(h, w, light, g.offset))
        .collect();
    Ok(rgb(h, w, |y, x, c| {
        let mut v = 0.0;
        for ((g, &(gy, gx)), j) in p.ghosts.iter().zip(&centres).zip(&jit) {
            if g.amplitude == 0.0 {
                continue;
            }
            let dist = ((y as f64 - gy).powi(2) + (x as f64 - gx).powi(2)).sqrt();
            v += g.amplitude * j[c] * ghost_profile(g, dist);
        }
        v * p.tint[c]
    }))
}

/// Generator settings of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FlareMeta {
    pub seed: u64,
    pub light_pos: (f64, f64),
    pub scatter: ScatterParams,
    pub reflect: ReflectParams,
    /// Global gain applied to the flare layer by augmentation.
    pub flare_gain: f64,
}

impl Default for FlareMeta {
    fn default() -> Self {
        FlareMeta {
            seed: 0,
            light_pos: (0.0, 0.0),
            scatter: ScatterParams {
                glow_amplitude: 0.0,
                glow_sigma: 1.0,
                streaks: vec![],
                tint: [1.0; 3],
            },
            reflect: ReflectParams {
                ghosts: vec![],
                tint: [1.0; 3],
            },
            flare_gain: 1.0,
        }
    }
}

fn join(vals: impl Iterator<Item = f64>) -> String {
    vals.map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl FlareMeta {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("seed", self.seed);
        kv.set("light_row", format!("{:.6}", self.light_pos.0));
        kv.set("light_col", format!("{:.6}", self.light_pos.1));
        kv.set(
            "glow_amplitude",
            format!("{:.6}", self.scatter.glow_amplitude),
        );
        kv.set("glow_sigma", format!("{:.6}", self.scatter.glow_sigma));
        kv.set(
            "streak_angles",
            join(self.scatter.streaks.iter().map(|s| s.angle)),
        );
        kv.set(
            "streak_amplitudes",
            join(self.scatter.streaks.iter().map(|s| s.amplitude)),
        );
        kv.set(
            "ghost_offsets",
            join(self.reflect.ghosts.iter().map(|g| g.offset)),
        );
        kv.set(
            "ghost_radii",
            join(self.reflect.ghosts.iter().map(|g| g.radius)),
        );
        kv.set(
            "ghost_amplitudes",
            join(self.reflect.ghosts.iter().map(|g| g.amplitude)),
        );
        kv.set("flare_gain", format!("{:.6}", self.flare_gain));
        kv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlarePair {
    /// Corrupted image `I`.
    pub input: Tensor,
    /// Flare-free background `I0`.
    pub clean: Tensor,
    /// Flare layer `F`.
    pub flare: Tensor,
    pub meta: FlareMeta,
}

/// `I = clip01(I0 + F)`.
pub fn compose_pair(clean: Tensor, flare: Tensor) -> Result<FlarePair> {
    let input = clean.zip_map(&flare, |a, b| (a + b).clamp(0.0, 1.0))?;
    Ok(FlarePair {
        input,
        clean,
        flare,
        meta: FlareMeta::default(),
    })
}

/// One random pair, fully determined by `(h, w, seed)`.
pub fn synth_pair(h: usize, w: usize, seed: u64) -> Result<FlarePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let light = (
        rng.gen_range(0.1..0.9) * (h as f64 - 1.0),
        rng.gen_range(0.1..0.9) * (w as f64 - 1.0),
    );
    let scatter = ScatterParams::random(h, w, &mut rng);
    let reflect = ReflectParams::random(h, w, &mut rng);
    let (bg_seed, s_seed, r_seed) = (rng.next_u64(), rng.next_u64(), rng.next_u64());
    let clean = gen_background(h, w, bg_seed);
    let mut flare = gen_scattering_flare(h, w, light, &scatter, s_seed)?;
    flare.add_assign(&gen_reflective_flare(h, w, light, &reflect, r_seed)?);
    let mut pair = compose_pair(clean, flare)?;
    pair.meta = FlareMeta {
        seed,
        light_pos: light,
        scatter,
        reflect,
        flare_gain: 1.0,
    };
    Ok(pair)
}

fn transform(t: &Tensor, flip_rows: bool, flip_cols: bool, transpose: bool) -> Tensor {
    let &[h, w, c] = t.shape() else {
        unreachable!("images are [H, W, C]")
    };
    let (oh, ow) = if transpose { (w, h) } else { (h, w) };
    Tensor::from_fn(&[oh, ow, c], |i| {
        let (y, x, ch) = (i / (c * ow), (i / c) % ow, i % c);
        let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
        if flip_rows {
            sy = h - 1 - sy;
        }
        if flip_cols {
            sx = w - 1 - sx;
        }
        t.data()[(sy * w + sx) * c + ch]
    })
}

/// Random flips, a random multiple of 90 degrees (square images only) and a
/// flare gain in `[0.8, 1.2]`; the corrupted image is recomposed.
pub fn augment(pair: &FlarePair, rng: &mut impl Rng) -> Result<FlarePair> {
    let square = pair.clean.shape()[0] == pair.clean.shape()[1];
    let (fr, fc) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
    let tr = square && rng.gen_bool(0.5);
    let gain = rng.gen_range(0.8..1.2);
    let clean = transform(&pair.clean, fr, fc, tr);
    let flare = transform(&pair.flare, fr, fc, tr).map(|v| v * gain);
    let mut out = compose_pair(clean, flare)?;
    out.meta = FlareMeta {
        flare_gain: pair.meta.flare_gain * gain,
        ..pair.meta.clone()
    };
    Ok(out)
}

/// `n` pairs whose seeds derive from `seed`.
pub fn pair_set(n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<FlarePair>> {
    (0..n)
        .map(|i| synth_pair(h, w, derive_seed(seed, i as u64)))
        .collect()
}

pub fn pair_id(index: usize) -> String {
    format!("{index:04}")
}

impl FlarePair {
    /// The pair with `I0` and `F` rounded to the 8-bit grid and `I`
    /// recomposed from them, so the stored files satisfy the composition
    /// rule exactly after quantization.
    pub fn quantized(&self) -> Result<FlarePair> {
        let q = |t: &Tensor| t.map(|v| f64::from(ppm::quantize(v)) / 255.0);
        let mut out = compose_pair(q(&self.clean), q(&self.flare))?;
        out.meta = self.meta.clone();
        Ok(out)
    }
}

/// Writes `<id>_input.ppm`, `<id>_gt.ppm`, `<id>_flare.ppm` and `<id>_meta.txt`.
pub fn materialize(dir: &Path, pairs: &[FlarePair]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, p) in pairs.iter().enumerate() {
        let p = &p.quantized()?;
        let id = pair_id(i);
        ppm::write(&dir.join(format!("{id}_input.ppm")), &p.input)?;
        ppm::write(&dir.join(format!("{id}_gt.ppm")), &p.clean)?;
        ppm::write(&dir.join(format!("{id}_flare.ppm")), &p.flare)?;
        std::fs::write(
            dir.join(format!("{id}_meta.txt")),
            p.meta.to_kv().to_string(),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glow_only(amp: f64) -> ScatterParams {
        ScatterParams {
            glow_amplitude: amp,
            glow_sigma: 4.0,
            streaks: vec![],
            tint: [1.0, 0.8, 0.6],
        }
    }

    #[test]
    fn background_is_deterministic_and_in_range() {
        let a = gen_background(24, 20, 3);
        assert_eq!(a, gen_background(24, 20, 3));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let b = gen_background(24, 20, 4);
        let differ = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| x != y)
            .count();
        assert!(differ * 100 >= a.numel());
    }

    #[test]
    fn scattering_peaks_at_light_and_decays() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ScatterParams::random(32, 32, &mut rng);
        let f = gen_scattering_flare(32, 32, (10.0, 20.0), &p, 1).unwrap();
        let peak = f.at(&[10, 20, 0]);
        assert!(f.data().iter().step_by(3).all(|&v| v <= peak));
        assert!(f.data().iter().all(|&v| v >= 0.0));
        let g = gen_scattering_flare(32, 32, (10.0, 20.0), &glow_only(0.7), 1).unwrap();
        for c in 0..3 {
            let ray: Vec<f64> = (20..32).map(|x| g.at(&[10, x, c])).collect();
            assert!(ray.windows(2).all(|p| p[1] < p[0]));
        }
        let z = gen_scattering_flare(32, 32, (10.0, 20.0), &glow_only(0.0), 1).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(gen_scattering_flare(32, 32, (40.0, 0.0), &p, 1).is_err());
    }

    #[test]
    fn ghosts_mirror_through_the_centre() {
        assert_eq!(ghost_position(33, 33, (0.0, 0.0), 1.0), (32.0, 32.0));
        assert_eq!(ghost_position(33, 33, (16.0, 16.0), 0.7), (16.0, 16.0));
        let p = ReflectParams {
            ghosts: vec![Ghost {
                offset: 1.0,
                radius: 3.0,
                amplitude: 0.5,
                ring: false,
            }],
            tint: [1.0; 3],
        };
        // centroid of a disk fully inside the frame sits at its centre
        let f = gen_reflective_flare(33, 33, (4.0, 6.0), &p, 0).unwrap();
        let (mut m, mut my, mut mx) = (0.0, 0.0, 0.0);
        for (i, &v) in f.data().iter().enumerate().step_by(3) {
            m += v;
            my += v * (i / 3 / 33) as f64;
            mx += v * (i / 3 % 33) as f64;
        }
        assert!((my / m - 28.0).abs() < 1e-9 && (mx / m - 26.0).abs() < 1e-9);
        let zero = ReflectParams {
            ghosts: vec![Ghost {
                amplitude: 0.0,
                ..p.ghosts[0].clone()
            }],
            tint: [1.0; 3],
        };
        let z = gen_reflective_flare(33, 33, (0.0, 0.0), &zero, 0).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composition_examples() {
        let p = compose_pair(Tensor::full(&[2, 2, 3], 0.2), Tensor::full(&[2, 2, 3], 0.3)).unwrap();
        assert!(p.input.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let p = compose_pair(Tensor::full(&[2, 2, 3], 0.8), Tensor::full(&[2, 2, 3], 0.3)).unwrap();
        assert!(p.input.data().iter().all(|&v| v == 1.0));
        let clean = gen_background(4, 4, 1);
        let p = compose_pair(clean.clone(), Tensor::zeros(&[4, 4, 3])).unwrap();
        assert_eq!(p.input, clean);
        assert!(compose_pair(clean, Tensor::zeros(&[4, 4, 2])).is_err());
    }

    #[test]
    fn synthetic_and_augmented_pairs_compose_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for pair in pair_set(4, 16, 12, 5).unwrap() {
            for p in [augment(&pair, &mut rng).unwrap(), pair] {
                let recomposed = p
                    .clean
                    .zip_map(&p.flare, |a, b| (a + b).clamp(0.0, 1.0))
                    .unwrap();
                assert_eq!(recomposed, p.input);
                assert!(p.flare.data().iter().all(|&v| v >= 0.0));
            }
        }
        assert_eq!(pair_set(2, 8, 8, 1).unwrap(), pair_set(2, 8, 8, 1).unwrap());
    }

    #[test]
    fn transforms_are_permutations() {
        let t = Tensor::from_fn(&[3, 3, 1], |i| i as f64);
        let r = transform(&t, true, false, true);
        let mut a: Vec<f64> = r.data().to_vec();
        a.sort_by(f64::total_cmp);
        assert_eq!(a, t.data());
        assert_eq!(
            transform(&transform(&t, true, true, false), true, true, false),
            t
        );
    }
}

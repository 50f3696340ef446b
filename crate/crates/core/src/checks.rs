//! Property suites run by `deflare check`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, ConvMode, ConvSpec};
use crate::checkpoint;
use crate::error::Result;
use crate::net::{NetworkConfig, NetworkState};
use crate::scan::{self, Direction, HierPartition, ScanOrder};
use crate::ssm::{self, DiscreteSsm, SsmParams, SsmVars};
use crate::tensor::Tensor;
use crate::vssm::ScanMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Ssm,
    Scan,
    Grad,
    Net,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Ssm, Suite::Scan, Suite::Grad, Suite::Net];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ssm => "ssm",
            Suite::Scan => "scan",
            Suite::Grad => "grad",
            Suite::Net => "net",
        }
    }

    /// `all` expands to every suite.
    pub fn parse(s: &str) -> Option<Vec<Suite>> {
        if s == "all" {
            return Some(Suite::ALL.to_vec());
        }
        Suite::ALL
            .iter()
            .copied()
            .find(|x| x.name() == s)
            .map(|x| vec![x])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub suite: Suite,
    pub name: &'static str,
    /// `Err` carries the failure description.
    pub result: Result<(), String>,
}

type Check = fn() -> Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lift<T>(r: Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_lti(r: &mut ChaCha8Rng, n: usize, len: usize) -> Result<DiscreteSsm> {
    let a: Vec<f64> = (0..n).map(|_| -r.gen_range(0.05..3.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    DiscreteSsm::time_invariant(
        &a,
        &b,
        &c,
        r.gen_range(-1.0..1.0),
        r.gen_range(1e-3..1.0),
        len,
    )
}

fn recurrence_matches_convolution() -> Result<(), String> {
    let mut r = rng(1);
    for trial in 0..100 {
        let (n, len) = (r.gen_range(1..=16), r.gen_range(1..=64));
        let s = lift(random_lti(&mut r, n, len))?;
        let x: Vec<f64> = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
        let a = lift(ssm::scan_recurrent(&s, &x))?;
        let b = lift(ssm::kernel_convolve(&s, &x))?;
        let err = a
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        ensure(err <= 1e-10, || {
            format!("trial {trial}: max difference {err:e}")
        })?;
    }
    Ok(())
}

fn contribution_decays() -> Result<(), String> {
    let mut r = rng(2);
    for trial in 0..100 {
        let n = r.gen_range(1..=8);
        let a: Vec<f64> = (0..n).map(|_| -r.gen_range(0.05..3.0)).collect();
        // matching signs of B and C keep every state's term of the sum positive
        let b: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..1.0)).collect();
        let s = lift(DiscreteSsm::time_invariant(
            &a,
            &b,
            &c,
            0.0,
            r.gen_range(1e-2..1.0),
            24,
        ))?;
        let prof: Vec<f64> = (1..24)
            .map(|k| ssm::contribution(&s, 23 - k, 23).map(f64::abs))
            .collect::<Result<_>>()
            .map_err(|e| e.to_string())?;
        ensure(prof.windows(2).all(|p| p[1] < p[0]), || {
            format!("trial {trial}: not strictly decreasing")
        })?;
    }
    Ok(())
}

fn zoh_closed_forms() -> Result<(), String> {
    let ln2 = std::f64::consts::LN_2;
    let (ab, bb) = lift(ssm::discretize_zoh(&[-1.0], &[1.0], ln2))?;
    ensure(
        (ab[0] - 0.5).abs() <= 1e-12 && (bb[0] - 0.5 / ln2).abs() <= 1e-12,
        || format!("got {ab:?} {bb:?}"),
    )?;
    let (ab, bb) = lift(ssm::discretize_zoh(&[-2.0], &[3.0], 1e-14))?;
    ensure(
        (ab[0] - 1.0).abs() <= 1e-12 && (bb[0] - 3e-14).abs() <= 1e-12,
        || format!("small step gave {ab:?} {bb:?}"),
    )
}

fn order_is_bijective(o: &ScanOrder) -> bool {
    let n = o.len();
    let mut seen = vec![false; n];
    o.forward()
        .iter()
        .all(|&f| f < n && !std::mem::replace(&mut seen[f], true))
        && (0..n).all(|p| o.forward()[o.inverse()[p]] == p)
}

fn scan_orders_bijective() -> Result<(), String> {
    let mut r = rng(3);
    for _ in 0..50 {
        let (h, w) = (r.gen_range(1..=13), r.gen_range(1..=13));
        let win = (r.gen_range(1..=h), r.gen_range(1..=w));
        for d in Direction::ALL {
            let o = lift(d.order(h, w, win))?;
            ensure(order_is_bijective(&o), || {
                format!("{d:?} on {h}x{w} window {win:?}")
            })?;
            let x = Tensor::uniform(&[h, w, 2], 1.0, &mut r);
            let back = lift(o.flatten(&x).and_then(|s| o.restore(&s)))?;
            ensure(back == x, || format!("{d:?} round trip on {h}x{w}"))?;
        }
    }
    Ok(())
}

fn golden_scan_order() -> Result<(), String> {
    let o = lift(ScanOrder::local_window(4, 4, 2, 2))?;
    let want = [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15];
    ensure(o.forward() == want, || format!("got {:?}", o.forward()))
}

fn partition_exact_cover() -> Result<(), String> {
    let mut r = rng(4);
    for size in 4..=33 {
        let (h, w) = (size, 37 - size);
        for level in 1..=3 {
            let p = lift(HierPartition::new(h, w, level))?;
            let mut hits = vec![0usize; h * w];
            for (k, &(a, b)) in p.offsets.iter().enumerate() {
                let (vh, vw) = p.valid_shape(k);
                for y in 0..vh {
                    for x in 0..vw {
                        hits[(a + p.stride * y) * w + b + p.stride * x] += 1;
                    }
                }
            }
            ensure(hits.iter().all(|&c| c == 1), || {
                format!("{h}x{w} level {level}: not an exact cover")
            })?;
            let f = Tensor::uniform(&[h, w, 2], 1.0, &mut r);
            let back = lift(
                scan::hier_partition(&f, level).and_then(|(s, p)| scan::hier_reverse(&s, &p)),
            )?;
            ensure(back == f, || format!("{h}x{w} level {level}: round trip"))?;
        }
    }
    Ok(())
}

fn primitive_gradients() -> Result<(), String> {
    let mut r = rng(5);
    let x = Tensor::uniform(&[5, 4, 3], 1.0, &mut r);
    let w = Tensor::uniform(&[3, 3, 3, 2], 0.5, &mut r);
    let gamma = Tensor::uniform(&[3], 1.0, &mut r);
    let weights = Tensor::uniform(&[5, 4, 3], 1.0, &mut r);
    let err = lift(grad_check(
        |g, v| {
            let wv = g.constant(w.clone());
            let c = g.conv2d(v, wv, None, ConvSpec::same(ConvMode::Dense))?;
            let gm = g.constant(gamma.clone());
            let bt = g.constant(Tensor::zeros(&[3]));
            let ln = g.layer_norm(v, gm, bt, 1e-6)?;
            let s = g.silu(ln);
            let wt = g.constant(weights.clone());
            let m = g.mul(s, wt)?;
            let a = g.sum(c);
            let b = g.softplus(m);
            let b = g.sum(b);
            let up = g.upsample2(v)?;
            let bl = g.blur_down(up)?;
            let e = g.exp(bl);
            let e = g.mean(e);
            let ab = g.add(a, b)?;
            g.add(ab, e)
        },
        &x,
        1e-5,
    ))?;
    ensure(err <= 1e-6, || format!("max error {err:e}"))
}

fn scan_gradients() -> Result<(), String> {
    let mut r = rng(6);
    let params = SsmParams::init(3, 4, &mut r);
    let x = Tensor::uniform(&[12, 3], 1.0, &mut r);
    let probe = Tensor::uniform(&[12, 3], 1.0, &mut r);
    let err = lift(grad_check(
        |g, v| {
            let s = SsmVars::bind(g, &params, false);
            let y = s.apply(g, v, 2)?;
            let p = g.constant(probe.clone());
            let idx: Vec<usize> = (0..12).collect();
            let y = g.gather_rows(y, Rc::new(idx), &[12, 3])?;
            let d = g.sub(y, p)?;
            let d = g.mul(d, d)?;
            let sq = g.softplus(d);
            Ok(g.sum(sq))
        },
        &x,
        1e-5,
    ))?;
    ensure(err <= 1e-6, || format!("max error {err:e}"))
}

fn small_config() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        levels: 2,
        hier_levels: 2,
        window: (4, 4),
        state_size: 2,
        seed: 11,
        scan_mode: ScanMode::LocalEnhanced,
        hierarchical: true,
        ln_eps: 1e-6,
    }
}

fn network_shapes() -> Result<(), String> {
    let s = lift(NetworkState::new(&small_config()))?;
    let x = Tensor::full(&[8, 12, 3], 0.5);
    let (a, b) = lift(s.infer(&x))?;
    ensure(a.shape() == [8, 12, 3] && b.shape() == [8, 12, 3], || {
        format!("{:?} {:?}", a.shape(), b.shape())
    })?;
    ensure(s.infer(&Tensor::full(&[7, 12, 3], 0.5)).is_err(), || {
        "odd extent accepted".into()
    })
}

fn network_deterministic() -> Result<(), String> {
    let x = Tensor::uniform(&[8, 8, 3], 1.0, &mut rng(7)).map(f64::abs);
    let a = lift(NetworkState::new(&small_config()).and_then(|s| s.infer(&x)))?;
    let b = lift(NetworkState::new(&small_config()).and_then(|s| s.infer(&x)))?;
    ensure(a == b, || "outputs differ between identical builds".into())
}

fn checkpoint_round_trip() -> Result<(), String> {
    let s = lift(NetworkState::new(&small_config()))?;
    let bytes = checkpoint::encode(&s);
    let back = lift(checkpoint::decode(&bytes))?;
    ensure(back.params == s.params && back.optim == s.optim, || {
        "state changed".into()
    })?;
    let mut bad = bytes;
    bad[3] ^= 1;
    ensure(checkpoint::decode(&bad).is_err(), || {
        "corrupted magic accepted".into()
    })
}

fn properties() -> Vec<(Suite, &'static str, Check)> {
    vec![
        (
            Suite::Ssm,
            "recurrence equals convolution",
            recurrence_matches_convolution as Check,
        ),
        (
            Suite::Ssm,
            "contribution decays with distance",
            contribution_decays,
        ),
        (Suite::Ssm, "zero-order-hold closed forms", zoh_closed_forms),
        (
            Suite::Scan,
            "scan orders are bijective and round-trip",
            scan_orders_bijective,
        ),
        (Suite::Scan, "golden 4x4 window order", golden_scan_order),
        (
            Suite::Scan,
            "hierarchical partition covers exactly and round-trips",
            partition_exact_cover,
        ),
        (
            Suite::Grad,
            "primitive gradients match finite differences",
            primitive_gradients,
        ),
        (
            Suite::Grad,
            "selective scan gradients match finite differences",
            scan_gradients,
        ),
        (Suite::Net, "output shapes and divisibility", network_shapes),
        (
            Suite::Net,
            "forward pass is deterministic",
            network_deterministic,
        ),
        (
            Suite::Net,
            "checkpoint round trip and corruption",
            checkpoint_round_trip,
        ),
    ]
}

pub fn run(suites: &[Suite]) -> Vec<Outcome> {
    properties()
        .into_iter()
        .filter(|(s, _, _)| suites.contains(s))
        .map(|(suite, name, f)| Outcome {
            suite,
            name,
            result: f(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for o in run(&Suite::ALL) {
            assert!(
                o.result.is_ok(),
                "{}: {} failed: {:?}",
                o.suite.name(),
                o.name,
                o.result
            );
        }
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!(Suite::parse("all").unwrap().len(), 4);
        assert_eq!(Suite::parse("scan"), Some(vec![Suite::Scan]));
        assert_eq!(Suite::parse("nope"), None);
    }
}

//! Reverse-mode gradients against central differences, over random shapes and values.

mod common;

use std::rc::Rc;

use common::random_ssm;
use deflare_core::autodiff::{ConvMode, ConvSpec, Graph, Padding, Var, PAD_ROW};
use deflare_core::scan;
use deflare_core::ssm::SsmVars;
use deflare_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` for the scalar
/// `sum(out * r)` with a fixed projection `r`, over every input element.
fn worst_error(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let project = |g: &mut Graph, out: Var| {
        let n = g.value(out).numel();
        let shape = g.value(out).shape().to_vec();
        let r = g.constant(Tensor::from_fn(&shape, |i| ((i * 7 + 3) as f64).sin()));
        assert_eq!(g.value(r).numel(), n);
        let m = g.mul(out, r).unwrap();
        g.sum(m)
    };
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vs);
        let l = project(&mut g, out);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vs);
    let l = project(&mut g, out);
    let grads = g.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vs.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut ts = inputs.to_vec();
            ts[k].data_mut()[i] += STEP;
            let hi = eval(&ts);
            ts[k].data_mut()[i] -= 2.0 * STEP;
            let lo = eval(&ts);
            let numeric = (hi - lo) / (2.0 * STEP);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    worst
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dense_conv(seed: u64, h in 1usize..6, w in 1usize..6, cin in 1usize..4, cout in 1usize..3, stride in 1usize..3, k in prop::sample::select(vec![1usize, 3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [rand_tensor(&[h, w, cin], &mut rng), rand_tensor(&[k, k, cin, cout], &mut rng), rand_tensor(&[cout], &mut rng)];
        let spec = ConvSpec { mode: ConvMode::Dense, stride, padding: Padding::Same };
        let err = worst_error(&ins, |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec).unwrap());
        prop_assert!(err <= TOL, "{err:e}");
    }

    #[test]
    fn depthwise_conv(seed: u64, h in 1usize..6, w in 1usize..6, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [rand_tensor(&[h, w, c], &mut rng), rand_tensor(&[3, 3, c], &mut rng), rand_tensor(&[c], &mut rng)];
        let err = worst_error(&ins, |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::same(ConvMode::Depthwise)).unwrap());
        prop_assert!(err <= TOL, "{err:e}");
    }

    #[test]
    fn norm_linear_activations(seed: u64, rows in 1usize..5, cin in 2usize..5, cout in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [
            rand_tensor(&[rows, cin], &mut rng),
            rand_tensor(&[cin], &mut rng),
            rand_tensor(&[cin], &mut rng),
            rand_tensor(&[cin, cout], &mut rng),
            rand_tensor(&[cout], &mut rng),
        ];
        let err = worst_error(&ins, |g, v| {
            let n = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
            let y = g.linear(n, v[3], Some(v[4])).unwrap();
            let a = g.silu(y);
            let b = g.softplus(y);
            let s = g.sigmoid(a);
            let e = g.exp(b);
            let p = g.mul(s, e).unwrap();
            g.sub(p, a).unwrap()
        });
        prop_assert!(err <= TOL, "{err:e}");
    }

    #[test]
    fn selective_scan_all_parameters(seed: u64, seqs in 1usize..3, len in 1usize..6, c in 1usize..3, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_ssm(c, n, &mut rng);
        let ins = [
            rand_tensor(&[seqs * len, c], &mut rng),
            p.a_log, p.d, p.delta_base, p.w_delta, p.w_b, p.b_base, p.w_c, p.c_base,
        ];
        let err = worst_error(&ins, |g, v| {
            let vars = SsmVars { a_log: v[1], d: v[2], delta_base: v[3], w_delta: v[4], w_b: v[5], b_base: v[6], w_c: v[7], c_base: v[8] };
            vars.apply(g, v[0], seqs).unwrap()
        });
        prop_assert!(err <= TOL, "{err:e}");
    }

    #[test]
    fn resampling_and_gather(seed: u64, h in 1usize..5, w in 1usize..5, c in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[h, w, c], &mut rng);
        let index: Vec<usize> = (0..h * w + 2).map(|_| if rng.gen_bool(0.2) { PAD_ROW } else { rng.gen_range(0..h * w) }).collect();
        let index = Rc::new(index);
        let err = worst_error(&[x], |g, v| {
            let u = g.upsample2(v[0]).unwrap();
            let d = g.blur_down(u).unwrap();
            let d2 = g.blur_down(d).unwrap();
            let s = g.sum(d2);
            let gathered = g.gather_rows(d, index.clone(), &[index.len(), c]).unwrap();
            let m = g.mean(gathered);
            let t = g.add(s, m).unwrap();
            g.scale(t, 0.5)
        });
        prop_assert!(err <= TOL, "{err:e}");
    }

    #[test]
    fn two_dimensional_scans(seed: u64, h in 2usize..6, w in 2usize..6, hier: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[h, w, 2], &mut rng);
        let ssms: Vec<_> = (0..if hier { 8 } else { 4 }).map(|_| random_ssm(2, 2, &mut rng)).collect();
        let mut ins = vec![x];
        for p in &ssms {
            ins.extend([p.a_log.clone(), p.d.clone(), p.w_b.clone(), p.c_base.clone()]);
        }
        let err = worst_error(&ins, |g, v| {
            let vars: Vec<SsmVars> = ssms.iter().enumerate().map(|(i, p)| {
                let mut s = SsmVars::bind(g, p, false);
                s.a_log = v[1 + 4 * i];
                s.d = v[2 + 4 * i];
                s.w_b = v[3 + 4 * i];
                s.c_base = v[4 + 4 * i];
                s
            }).collect();
            if hier {
                scan::hier_scan_graph(g, v[0], &[vars[..4].to_vec(), vars[4..].to_vec()], (2, 2)).unwrap()
            } else {
                scan::local_enhanced_ss2d_graph(g, v[0], &vars, (2, 3)).unwrap()
            }
        });
        prop_assert!(err <= TOL, "{err:e}");
    }
}

#[test]
fn selective_scan_below_the_gain_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = random_ssm(2, 3, &mut rng);
    // |delta A| around 1e-14
    p.a_log.data_mut().iter_mut().for_each(|v| *v = -32.0);
    let ins = [
        rand_tensor(&[5, 2], &mut rng),
        p.delta_base.clone(),
        p.w_b.clone(),
        p.b_base.clone(),
    ];
    let err = worst_error(&ins, |g, v| {
        let mut s = SsmVars::bind(g, &p, false);
        s.delta_base = v[1];
        s.w_b = v[2];
        s.b_base = v[3];
        s.apply(g, v[0], 1).unwrap()
    });
    assert!(err <= TOL, "{err:e}");
}

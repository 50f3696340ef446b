//! Brute-force re-implementations of the 2D scans, checked against the library.

mod common;

use common::{brute_hier_scan, brute_ss2d, random_map, random_ssm};
use deflare_core::scan::{self, hier_partition, hier_reverse};
use deflare_core::ssm::SsmParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn local_enhanced_ss2d_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (h, w, win) in [
        (8, 8, (4, 4)),
        (8, 8, (3, 5)),
        (16, 16, (8, 8)),
        (16, 16, (5, 3)),
        (7, 9, (4, 4)),
    ] {
        let x = random_map(h, w, 3, &mut rng);
        let ssms: Vec<SsmParams> = (0..4).map(|_| random_ssm(3, 4, &mut rng)).collect();
        let got = scan::local_enhanced_ss2d(&x, &ssms, win).unwrap();
        let want = brute_ss2d(&x, &ssms, win);
        let err = got.max_abs_diff(&want).unwrap();
        assert!(err <= 1e-10, "{h}x{w} window {win:?}: {err:e}");
    }
}

#[test]
fn hier_scan_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (h, w, k, win) in [
        (8, 8, 2, (2, 2)),
        (16, 16, 2, (4, 4)),
        (16, 16, 3, (2, 3)),
        (9, 11, 3, (2, 2)),
    ] {
        let x = random_map(h, w, 2, &mut rng);
        let levels: Vec<Vec<SsmParams>> = (0..k)
            .map(|_| (0..4).map(|_| random_ssm(2, 3, &mut rng)).collect())
            .collect();
        let got = scan::hier_scan(&x, &levels, win).unwrap();
        let want = brute_hier_scan(&x, &levels, win);
        let err = got.max_abs_diff(&want).unwrap();
        assert!(err <= 1e-10, "{h}x{w} K={k}: {err:e}");
    }
}

#[test]
fn partition_places_every_pixel_at_its_stride_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_map(7, 10, 2, &mut rng);
    for level in 1..=3u32 {
        let s = 1usize << level;
        let (subs, part) = hier_partition(&x, level).unwrap();
        assert_eq!(subs.len(), s.min(7) * s.min(10));
        for (k, sub) in subs.iter().enumerate() {
            let (a, b) = (k / s.min(10), k % s.min(10));
            assert_eq!(part.offsets[k], (a, b));
            for y in 0..sub.shape()[0] {
                for xx in 0..sub.shape()[1] {
                    for c in 0..2 {
                        let (gy, gx) = (a + s * y, b + s * xx);
                        let want = if gy < 7 && gx < 10 {
                            x.at(&[gy, gx, c])
                        } else {
                            0.0
                        };
                        assert_eq!(sub.at(&[y, xx, c]), want);
                    }
                }
            }
        }
        assert_eq!(hier_reverse(&subs, &part).unwrap(), x);
    }
}

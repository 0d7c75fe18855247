// SPDX-License-Identifier: MIT OR Apache-2.0

use featlab::decomp::*;
use featlab::toylm::CaptureSite;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SITE: CaptureSite = CaptureSite::PostMlpResidual;

fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    Array2::from_shape_fn((n, d), |(_, j)| normal.sample(&mut rng) * (1.0 + j as f32) + 0.5)
}

#[test]
fn full_rank_pca_round_trip() {
    let h = gaussian(200, 6, 1);
    let pca = fit_pca(&h, 1.0, SITE, 0).unwrap();
    assert_eq!(pca.d_f(), 6);
    for row in h.rows() {
        let back = pca.inverse(pca.project(row).unwrap().view()).unwrap();
        let err = row.iter().zip(back.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4, "{err}");
    }
    // The fitted matrices themselves reconstruct to f64 precision.
    let x = Array1::from_iter((0..6).map(|i| i as f64 * 0.3 - 1.0));
    let rt = pca.inverse.dot(&pca.forward.dot(&x));
    assert!(x.iter().zip(rt.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn rank_one_pca_finds_direction() {
    let dir = [0.6f32, 0.0, -0.8, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = Array2::from_shape_fn((100, 4), |(_, _)| 0.0);
    let h = {
        let mut h = h;
        for mut row in h.rows_mut() {
            let s: f32 = rng.random_range(-3.0..3.0);
            for j in 0..4 {
                row[j] = s * dir[j];
            }
        }
        h
    };
    let pca = fit_pca(&h, 0.99, SITE, 0).unwrap();
    assert_eq!(pca.d_f(), 1);
    let v = pca.forward.row(0);
    let cos: f64 = v.iter().zip(dir).map(|(a, b)| a * b as f64).sum::<f64>().abs();
    assert!(cos > 0.999, "{cos}");
}

fn abs_corr(a: &[f64], b: &[f64]) -> f64 {
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let (mut s, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        s += (x - ma) * (y - mb);
        sa += (x - ma).powi(2);
        sb += (y - mb).powi(2);
    }
    (s / (sa * sb).sqrt()).abs()
}

#[test]
fn fastica_unmixes_two_sources() {
    let n = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s1: Vec<f64> = (0..n).map(|i| (i as f64 * 0.05).sin().signum()).collect();
    let s2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = Array2::from_shape_fn((n, 2), |(i, j)| {
        if j == 0 {
            (s1[i] + 0.6 * s2[i]) as f32
        } else {
            (0.4 * s1[i] + s2[i]) as f32
        }
    });
    let ica = fit_ica(&h, 2, 11, SITE, 0).unwrap();
    assert!(!ica.warnings.contains(&IcaWarning::NotConverged));
    let mut comps = vec![Vec::new(), Vec::new()];
    for row in h.rows() {
        let f = ica.project(row).unwrap();
        comps[0].push(f[0] as f64);
        comps[1].push(f[1] as f64);
    }
    let direct = abs_corr(&comps[0], &s1).min(abs_corr(&comps[1], &s2));
    let swapped = abs_corr(&comps[0], &s2).min(abs_corr(&comps[1], &s1));
    assert!(direct.max(swapped) >= 0.95, "{direct} {swapped}");
}

#[test]
fn random_directions_are_orthonormal() {
    let rd = fit_random(16, 16, 9, SITE, 1).unwrap();
    let q = &rd.forward;
    let g = q.dot(&q.t());
    for i in 0..16 {
        for j in 0..16 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((g[[i, j]] - want).abs() < 1e-10);
        }
    }
    let narrow = fit_random(16, 4, 9, SITE, 1).unwrap();
    assert_eq!(narrow.d_f(), 4);
}

#[test]
fn ablating_nothing_is_identity_for_full_rank_bases() {
    let h = gaussian(80, 5, 3);
    for dec in [fit_pca(&h, 1.0, SITE, 0).unwrap(), fit_random(5, 5, 1, SITE, 0).unwrap()] {
        let row = h.row(7);
        let back = dec.ablate_and_reconstruct(row, &[]).unwrap();
        assert!(row.iter().zip(back.iter()).all(|(a, b)| (a - b).abs() < 1e-4));
        assert!(dec.ablate_and_reconstruct(row, &[dec.d_f()]).is_err());
    }
}

#[test]
fn decomposer_checkpoint_round_trip() {
    let h = gaussian(60, 4, 8);
    let ica = fit_ica(&h, 3, 2, SITE, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ica.ckpt");
    ica.to_checkpoint().save(&path).unwrap();
    let back = Decomposer::from_checkpoint(&featlab::checkpoint::Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back, ica);
}

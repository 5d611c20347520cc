//! Two-dimensional PCA export of embeddings.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Unit principal axes.
    pub axes: [Vec<f64>; 2],
    /// Covariance eigenvalues along the two axes.
    pub variances: [f64; 2],
    /// `(λ1 + λ2) / Σλ`.
    pub explained: f64,
    /// The cloud spans fewer than two dimensions; the second axis is zero.
    pub rank_deficient: bool,
}

fn covariance(points: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = points.len() as f64;
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n;
        }
    }
    let mut c = vec![vec![0.0; d]; d];
    for p in points {
        let q: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                c[i][j] += q[i] * q[j] / n;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            c[i][j] = c[j][i];
        }
    }
    (mean, c)
}

fn matvec(c: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    c.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Orthonormalizes `b` against `a` (assumed unit) and normalizes it.
fn orthogonalize(a: &[f64], b: &mut [f64]) -> f64 {
    let p = dot(a, b);
    b.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
    normalize(b)
}

/// Top two eigenpairs of a symmetric matrix by orthogonal (block power)
/// iteration followed by a Rayleigh-Ritz rotation.
fn top_two(c: &[Vec<f64>]) -> ([Vec<f64>; 2], [f64; 2]) {
    let d = c.len();
    let mut r = rng::stream(&[0x9ca]);
    let mut q1: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut q2: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
    normalize(&mut q1);
    orthogonalize(&q1, &mut q2);
    let mut last = f64::NAN;
    for _ in 0..20_000 {
        let mut a = matvec(c, &q1);
        let mut b = matvec(c, &q2);
        if normalize(&mut a) == 0.0 {
            break;
        }
        if orthogonalize(&a, &mut b) == 0.0 {
            q1 = a;
            q2 = vec![0.0; d];
            break;
        }
        q1 = a;
        q2 = b;
        let tr = dot(&q1, &matvec(c, &q1)) + dot(&q2, &matvec(c, &q2));
        if (tr - last).abs() <= 1e-15 * tr.abs().max(1e-300) {
            break;
        }
        last = tr;
    }
    // Rayleigh-Ritz on span{q1, q2}
    let cq1 = matvec(c, &q1);
    let cq2 = matvec(c, &q2);
    let (h11, h12, h22) = (dot(&q1, &cq1), dot(&q1, &cq2), dot(&q2, &cq2));
    let half_gap = ((h11 - h22) / 2.0).hypot(h12);
    let mid = (h11 + h22) / 2.0;
    let (l1, l2) = (mid + half_gap, mid - half_gap);
    let theta = 0.5 * (2.0 * h12).atan2(h11 - h22);
    let (cs, sn) = (theta.cos(), theta.sin());
    let v1: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| cs * a + sn * b).collect();
    let v2: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| -sn * a + cs * b).collect();
    ([v1, v2], [l1, l2])
}

/// Flips `v` so that its largest-magnitude coordinate is positive.
fn fix_sign(v: &mut [f64]) {
    let mut k = 0;
    for i in 0..v.len() {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projects mean-centered points onto their top two principal axes.
pub fn project_2d(points: &[Vec<f64>]) -> Result<Projection> {
    if points.len() < 3 {
        return Err(Error::invalid("projection needs at least 3 points"));
    }
    let d = points[0].len();
    if d < 2 || points.iter().any(|p| p.len() != d) {
        return Err(Error::shape("project_2d", "points need a common dimension >= 2"));
    }
    let (mean, c) = covariance(points);
    let trace: f64 = (0..d).map(|i| c[i][i]).sum();
    let ([mut v1, mut v2], [l1, mut l2]) = top_two(&c);
    let tiny = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let rank_deficient = l2 <= tiny;
    if rank_deficient {
        v2 = vec![0.0; d];
        l2 = 0.0;
    }
    if l1 <= tiny {
        v1 = vec![0.0; d];
    }
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    let coords = points
        .iter()
        .map(|p| {
            let q: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
            [dot(&q, &v1), dot(&q, &v2)]
        })
        .collect();
    let explained = if trace > 0.0 { (l1.max(0.0) + l2) / trace } else { 0.0 };
    if rank_deficient {
        log::warn!("projection: points span fewer than two dimensions");
    }
    Ok(Projection {
        coords,
        axes: [v1, v2],
        variances: [l1, l2],
        explained,
        rank_deficient,
    })
}

pub fn projection_csv(p: &Projection, classes: &[String], modalities: &[String]) -> Result<String> {
    if classes.len() != p.coords.len() || modalities.len() != p.coords.len() {
        return Err(Error::invalid("one class and modality per point required"));
    }
    let mut s = String::from("x,y,class,modality\n");
    for ((c, k), m) in p.coords.iter().zip(classes).zip(modalities) {
        let _ = writeln!(s, "{},{},{},{}", c[0], c[1], k, m);
    }
    Ok(s)
}

//! Bi-directional projection loss with repulsion, and its gradient with
//! respect to the filtered point.
//!
//! All quantities live in whatever frame the caller uses; training passes
//! canonical coordinates.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Which positions enter the proximity weight of the projection denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    /// `phi(p_bar, p_j)`, so the projection terms are weighted averages.
    #[default]
    Filtered,
    /// `phi(p_i, p_j)` with `p_i` the target center.
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub eta: f64,
    pub epsilon_n_degrees: f64,
    pub denominator: Denominator,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta: 0.97,
            epsilon_n_degrees: 15.0,
            denominator: Denominator::Filtered,
        }
    }
}

impl LossWeights {
    pub fn new(eta: f64, epsilon_n_degrees: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidValue(format!(
                "eta must lie in [0, 1], got {eta}"
            )));
        }
        if !(epsilon_n_degrees > 0.0 && epsilon_n_degrees < 90.0) {
            return Err(Error::InvalidValue(format!(
                "support angle must lie in (0, 90) degrees, got {epsilon_n_degrees}"
            )));
        }
        Ok(Self {
            eta,
            epsilon_n_degrees,
            denominator: Denominator::Filtered,
        })
    }

    pub fn with_denominator(mut self, denominator: Denominator) -> Self {
        self.denominator = denominator;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_proj1: f64,
    pub l_proj2: f64,
    pub l_bi_proj: f64,
    pub l_rep: f64,
    pub total: f64,
    pub d_total_d_point: Vector3<f64>,
}

/// Ground-truth neighborhood the loss is measured against.
#[derive(Debug, Clone, Copy)]
pub struct LossTarget<'a> {
    pub points: &'a [Vector3<f64>],
    pub normals: &'a [Vector3<f64>],
    /// Normal at the target center, used by the second projection term.
    pub n_center: Vector3<f64>,
    /// Target center, used only by [`Denominator::Center`].
    pub center: Vector3<f64>,
    pub eps_p: f64,
}

pub fn phi(a: &Vector3<f64>, b: &Vector3<f64>, eps_p: f64) -> f64 {
    (-(a - b).norm_squared() / (eps_p * eps_p)).exp()
}

/// `4 sqrt(d / m)` with `d` the bounding-box diagonal of `points`.
pub fn epsilon_p(points: &[Vector3<f64>], m: usize) -> Result<f64> {
    let d = BoundingBox::of_vectors(points)?.diagonal();
    epsilon_p_from(d, m)
}

pub fn epsilon_p_from(diagonal: f64, m: usize) -> Result<f64> {
    if !(diagonal > 0.0) || m == 0 {
        return Err(Error::DegenerateGeometry(format!(
            "proximity scale needs a positive diagonal and count, got d={diagonal}, m={m}"
        )));
    }
    Ok(4.0 * (diagonal / m as f64).sqrt())
}

pub fn theta(n_a: &Vector3<f64>, n_b: &Vector3<f64>, eps_n_degrees: f64) -> f64 {
    (-(1.0 - n_a.dot(n_b)) / (1.0 - eps_n_degrees.to_radians().cos())).exp()
}

/// Normal of the target point nearest to `p`, first index on ties.
pub fn nearest_normal(
    points: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    p: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let mut best = None;
    for (j, q) in points.iter().enumerate() {
        let d = (q - p).norm_squared();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| normals[j])
        .ok_or(Error::InsufficientNeighbors {
            needed: 1,
            found: 0,
        })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Projection {
    value: f64,
    grad: Vector3<f64>,
}

/// One projection term. `axis(j)` is the normal the residual of neighbor `j`
/// is measured along.
fn projection<F>(
    p_bar: &Vector3<f64>,
    target: &LossTarget,
    log_theta: &[f64],
    denominator: Denominator,
    axis: F,
) -> Projection
where
    F: Fn(usize) -> Vector3<f64>,
{
    let eps2 = target.eps_p * target.eps_p;
    let num_log: Vec<f64> = target
        .points
        .iter()
        .zip(log_theta)
        .map(|(q, lt)| -(p_bar - q).norm_squared() / eps2 + lt)
        .collect();
    let den_log: Vec<f64> = match denominator {
        Denominator::Filtered => num_log.clone(),
        Denominator::Center => target
            .points
            .iter()
            .zip(log_theta)
            .map(|(q, lt)| -(target.center - q).norm_squared() / eps2 + lt)
            .collect(),
    };
    let shift = num_log
        .iter()
        .chain(&den_log)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let den: f64 = den_log.iter().map(|l| (l - shift).exp()).sum();

    let mut value = 0.0;
    let mut grad = Vector3::zeros();
    let mut weighted_g = Vector3::zeros();
    for (j, q) in target.points.iter().enumerate() {
        let w = (num_log[j] - shift).exp() / den;
        let n = axis(j);
        let s = (p_bar - q).dot(&n);
        let r = s.abs();
        let g = -2.0 * (p_bar - q) / eps2;
        value += w * r;
        grad += w * (sign(s) * n + r * g);
        weighted_g += w * g;
    }
    if denominator == Denominator::Filtered {
        grad -= value * weighted_g;
    }
    Projection { value, grad }
}

fn check_target(target: &LossTarget) -> Result<()> {
    if target.points.is_empty() {
        return Err(Error::InsufficientNeighbors {
            needed: 1,
            found: 0,
        });
    }
    if target.points.len() != target.normals.len() {
        return Err(Error::InvalidValue(format!(
            "{} target points but {} normals",
            target.points.len(),
            target.normals.len()
        )));
    }
    if !(target.eps_p > 0.0) {
        return Err(Error::InvalidValue(format!(
            "eps_p must be positive, got {}",
            target.eps_p
        )));
    }
    Ok(())
}

fn log_thetas(target: &LossTarget, n_pbar: &Vector3<f64>, eps_n_degrees: f64) -> Vec<f64> {
    let c = 1.0 - eps_n_degrees.to_radians().cos();
    target
        .normals
        .iter()
        .map(|n| -(1.0 - n_pbar.dot(n)) / c)
        .collect()
}

fn projections(
    p_bar: &Vector3<f64>,
    target: &LossTarget,
    n_pbar: &Vector3<f64>,
    weights: &LossWeights,
) -> (Projection, Projection) {
    let lt = log_thetas(target, n_pbar, weights.epsilon_n_degrees);
    let p1 = projection(p_bar, target, &lt, weights.denominator, |j| {
        target.normals[j]
    });
    let p2 = projection(p_bar, target, &lt, weights.denominator, |_| target.n_center);
    (p1, p2)
}

/// `(l_proj1, l_proj2)`.
pub fn projection_loss(
    p_bar: &Vector3<f64>,
    target: &LossTarget,
    n_pbar: &Vector3<f64>,
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    check_target(target)?;
    let (p1, p2) = projections(p_bar, target, n_pbar, weights);
    Ok((p1.value, p2.value))
}

/// Largest distance from `p_bar` to a target point, with the lowest index
/// among ties.
pub fn repulsion_loss(p_bar: &Vector3<f64>, points: &[Vector3<f64>]) -> Result<f64> {
    repulsion(p_bar, points).map(|(d, _)| d)
}

fn repulsion(p_bar: &Vector3<f64>, points: &[Vector3<f64>]) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (j, q) in points.iter().enumerate() {
        let d = (p_bar - q).norm();
        if best.is_none_or(|(b, _)| d > b) {
            best = Some((d, j));
        }
    }
    best.ok_or(Error::InsufficientNeighbors {
        needed: 1,
        found: 0,
    })
}

pub fn total_loss(
    p_bar: &Vector3<f64>,
    target: &LossTarget,
    n_pbar: &Vector3<f64>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    check_target(target)?;
    let (p1, p2) = projections(p_bar, target, n_pbar, weights);
    let (l_rep, far) = repulsion(p_bar, target.points)?;
    let rep_grad = if l_rep > 0.0 {
        (p_bar - target.points[far]) / l_rep
    } else {
        Vector3::zeros()
    };
    let eta = weights.eta;
    let l_bi_proj = p1.value + p2.value;
    Ok(LossBreakdown {
        l_proj1: p1.value,
        l_proj2: p2.value,
        l_bi_proj,
        l_rep,
        total: eta * l_bi_proj + (1.0 - eta) * l_rep,
        d_total_d_point: eta * (p1.grad + p2.grad) + (1.0 - eta) * rep_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n < 1.0 {
                return v / n;
            }
        }
    }

    struct Fixture {
        points: Vec<Vector3<f64>>,
        normals: Vec<Vector3<f64>>,
        n_center: Vector3<f64>,
        center: Vector3<f64>,
        n_pbar: Vector3<f64>,
        p_bar: Vector3<f64>,
    }

    impl Fixture {
        fn random(rng: &mut impl Rng, n: usize) -> Self {
            let points: Vec<_> = (0..n)
                .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                .collect();
            // normals near +z so theta is not vanishingly small
            let normals: Vec<_> = (0..n)
                .map(|_| (Vector3::z() + 0.3 * unit(rng)).normalize())
                .collect();
            Self {
                n_center: normals[0],
                center: points[0],
                n_pbar: normals[1],
                p_bar: Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
                points,
                normals,
            }
        }

        fn target(&self, eps_p: f64) -> LossTarget<'_> {
            LossTarget {
                points: &self.points,
                normals: &self.normals,
                n_center: self.n_center,
                center: self.center,
                eps_p,
            }
        }
    }

    fn plane(h: f64) -> Fixture {
        let points: Vec<_> = (0..25)
            .map(|i| Vector3::new((i % 5) as f64 * 0.1 - 0.2, (i / 5) as f64 * 0.1 - 0.2, 0.0))
            .collect();
        let normals = vec![Vector3::z(); points.len()];
        Fixture {
            n_center: Vector3::z(),
            center: Vector3::zeros(),
            n_pbar: Vector3::z(),
            p_bar: Vector3::new(0.03, -0.02, h),
            points,
            normals,
        }
    }

    #[test]
    fn phi_values() {
        let a = Vector3::new(0.1, 0.2, 0.3);
        assert_eq!(phi(&a, &a, 0.5), 1.0);
        let b = a + Vector3::new(0.0, 0.5, 0.0);
        assert!((phi(&a, &b, 0.5) - (-1.0f64).exp()).abs() < 1e-15);
        let mut last = 2.0;
        for i in 0..200 {
            let c = a + Vector3::new(i as f64 * 0.01, 0.0, 0.0);
            let v = phi(&a, &c, 0.3);
            assert!(v < last || i == 0);
            assert!(v > 0.0 && v <= 1.0);
            last = v;
        }
    }

    #[test]
    fn epsilon_p_values() {
        assert!((epsilon_p_from(1.0, 400).unwrap() - 0.2).abs() < 1e-15);
        assert!((epsilon_p_from(4.0, 400).unwrap() - 0.4).abs() < 1e-15);
        let a = epsilon_p_from(0.37, 123).unwrap();
        let b = epsilon_p_from(4.0 * 0.37, 123).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
        let pts = [Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)];
        assert!((epsilon_p(&pts, 400).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(
            epsilon_p(&pts[..1], 400),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn theta_values() {
        let z = Vector3::z();
        assert_eq!(theta(&z, &z, 15.0), 1.0);
        let ortho = theta(&z, &Vector3::x(), 15.0);
        let expected = (-1.0 / (1.0 - 15f64.to_radians().cos())).exp();
        assert!((ortho - expected).abs() < 1e-25);
        assert!(ortho > 1.7e-13 && ortho < 1.9e-13);
        let tilted = Rotation3::from_axis_angle(&Vector3::x_axis(), 15f64.to_radians()) * z;
        assert!((theta(&z, &tilted, 15.0) - (-1.0f64).exp()).abs() < 1e-12);
        let mut last = 0.0;
        for i in 0..=90 {
            let n =
                Rotation3::from_axis_angle(&Vector3::y_axis(), (90 - i) as f64 * 1f64.to_radians())
                    * z;
            let t = theta(&z, &n, 15.0);
            assert!(t > last);
            last = t;
        }
    }

    #[test]
    fn plane_projection_values() {
        let w = LossWeights::default();
        let f = plane(0.0);
        let (a, b) = projection_loss(&f.p_bar, &f.target(0.2), &f.n_pbar, &w).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
        let f = plane(0.07);
        let (a, b) = projection_loss(&f.p_bar, &f.target(0.2), &f.n_pbar, &w).unwrap();
        assert!((a - 0.07).abs() < 1e-15 && (b - 0.07).abs() < 1e-15);
    }

    fn oracle(f: &Fixture, eps_p: f64, eps_n: f64, den: Denominator) -> (f64, f64) {
        let mut n1 = 0.0;
        let mut n2 = 0.0;
        let mut d = 0.0;
        for (q, n) in f.points.iter().zip(&f.normals) {
            let t = theta(&f.n_pbar, n, eps_n);
            let w = phi(&f.p_bar, q, eps_p) * t;
            n1 += (f.p_bar - q).dot(n).abs() * w;
            n2 += (f.p_bar - q).dot(&f.n_center).abs() * w;
            d += match den {
                Denominator::Filtered => w,
                Denominator::Center => phi(&f.center, q, eps_p) * t,
            };
        }
        (n1 / d, n2 / d)
    }

    #[test]
    fn projection_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for den in [Denominator::Filtered, Denominator::Center] {
            for _ in 0..20 {
                let f = Fixture::random(&mut rng, 10);
                let w = LossWeights::default().with_denominator(den);
                let got = projection_loss(&f.p_bar, &f.target(0.9), &f.n_pbar, &w).unwrap();
                let want = oracle(&f, 0.9, 15.0, den);
                assert!((got.0 - want.0).abs() < 1e-12, "{got:?} {want:?}");
                assert!((got.1 - want.1).abs() < 1e-12, "{got:?} {want:?}");
            }
        }
    }

    #[test]
    fn tiny_eps_does_not_underflow() {
        let f = plane(0.05);
        let w = LossWeights::default();
        let (a, b) = projection_loss(&f.p_bar, &f.target(1e-4), &f.n_pbar, &w).unwrap();
        assert!((a - 0.05).abs() < 1e-12 && (b - 0.05).abs() < 1e-12);
    }

    #[test]
    fn convex_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let f = Fixture::random(&mut rng, 30);
            let w = LossWeights::default();
            let (a, b) = projection_loss(&f.p_bar, &f.target(0.5), &f.n_pbar, &w).unwrap();
            let m1 = f
                .points
                .iter()
                .zip(&f.normals)
                .map(|(q, n)| (f.p_bar - q).dot(n).abs())
                .fold(0.0, f64::max);
            let m2 = f
                .points
                .iter()
                .map(|q| (f.p_bar - q).dot(&f.n_center).abs())
                .fold(0.0, f64::max);
            assert!(a >= 0.0 && a <= m1 + 1e-15);
            assert!(b >= 0.0 && b <= m2 + 1e-15);
        }
    }

    #[test]
    fn repulsion_values() {
        let p = Vector3::new(0.2, 0.3, 0.4);
        assert_eq!(repulsion_loss(&p, &[p]).unwrap(), 0.0);
        let pts = [Vector3::zeros(), Vector3::x()];
        assert_eq!(repulsion_loss(&Vector3::zeros(), &pts).unwrap(), 1.0);
        assert!(repulsion_loss(&p, &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vector3<f64>> = (0..100)
            .map(|_| Vector3::from_fn(|_, _| rng.random()))
            .collect();
        let scan = pts.iter().map(|q| (p - q).norm()).fold(0.0, f64::max);
        assert_eq!(repulsion_loss(&p, &pts).unwrap(), scan);
    }

    #[test]
    fn eta_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Fixture::random(&mut rng, 12);
        let t = f.target(0.6);
        let one = total_loss(
            &f.p_bar,
            &t,
            &f.n_pbar,
            &LossWeights::new(1.0, 15.0).unwrap(),
        )
        .unwrap();
        assert_eq!(one.total, one.l_bi_proj);
        assert_eq!(one.l_bi_proj, one.l_proj1 + one.l_proj2);
        let zero = total_loss(
            &f.p_bar,
            &t,
            &f.n_pbar,
            &LossWeights::new(0.0, 15.0).unwrap(),
        )
        .unwrap();
        assert_eq!(zero.total, zero.l_rep);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(1.1, 15.0).is_err());
        assert!(LossWeights::new(0.5, 0.0).is_err());
        assert!(LossWeights::new(0.5, 90.0).is_err());
        assert!(LossWeights::new(0.5, 45.0).is_ok());
    }

    fn is_kink(f: &Fixture, h: f64) -> bool {
        let near_zero = |s: f64| s.abs() < 10.0 * h;
        let res1 = f
            .points
            .iter()
            .zip(&f.normals)
            .any(|(q, n)| near_zero((f.p_bar - q).dot(n)));
        let res2 = f
            .points
            .iter()
            .any(|q| near_zero((f.p_bar - q).dot(&f.n_center)));
        let mut d: Vec<f64> = f.points.iter().map(|q| (f.p_bar - q).norm()).collect();
        d.sort_by(|a, b| b.total_cmp(a));
        res1 || res2 || d[0] - d[1] < 10.0 * h
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 50 {
            let mut f = Fixture::random(&mut rng, 15);
            if is_kink(&f, h) {
                continue;
            }
            let den = if checked % 2 == 0 {
                Denominator::Filtered
            } else {
                Denominator::Center
            };
            let w = LossWeights::new(rng.random_range(0.5..1.0), 15.0)
                .unwrap()
                .with_denominator(den);
            let eps = rng.random_range(0.3..1.5);
            let base = f.p_bar;
            let analytic = total_loss(&base, &f.target(eps), &f.n_pbar, &w)
                .unwrap()
                .d_total_d_point;
            for axis in 0..3 {
                f.p_bar = base;
                f.p_bar[axis] += h;
                let plus = total_loss(&f.p_bar, &f.target(eps), &f.n_pbar, &w)
                    .unwrap()
                    .total;
                f.p_bar = base;
                f.p_bar[axis] -= h;
                let minus = total_loss(&f.p_bar, &f.target(eps), &f.n_pbar, &w)
                    .unwrap()
                    .total;
                let fd = (plus - minus) / (2.0 * h);
                let err = (fd - analytic[axis]).abs();
                assert!(
                    err <= 1e-5 * fd.abs().max(analytic[axis].abs()) || err < 1e-8,
                    "axis {axis}: analytic {} fd {fd}",
                    analytic[axis]
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn rigid_motion_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let f = Fixture::random(&mut rng, 40);
            let rot = Rotation3::from_axis_angle(
                &Unit::new_normalize(unit(&mut rng)),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            let t = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let g = Fixture {
                points: f.points.iter().map(|p| rot * p + t).collect(),
                normals: f.normals.iter().map(|n| rot * n).collect(),
                n_center: rot * f.n_center,
                center: rot * f.center + t,
                n_pbar: rot * f.n_pbar,
                p_bar: rot * f.p_bar + t,
            };
            for den in [Denominator::Filtered, Denominator::Center] {
                let w = LossWeights::default().with_denominator(den);
                let a = total_loss(&f.p_bar, &f.target(0.7), &f.n_pbar, &w).unwrap();
                let b = total_loss(&g.p_bar, &g.target(0.7), &g.n_pbar, &w).unwrap();
                for (x, y) in [
                    (a.l_proj1, b.l_proj1),
                    (a.l_proj2, b.l_proj2),
                    (a.l_rep, b.l_rep),
                    (a.total, b.total),
                ] {
                    assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn bi_projection_minimizer_lies_on_plane() {
        let f = plane(0.0);
        let w = LossWeights::new(1.0, 15.0).unwrap();
        let eval = |h: f64| {
            let p = Vector3::new(0.03, -0.02, h);
            total_loss(&p, &f.target(0.3), &f.n_pbar, &w)
                .unwrap()
                .l_bi_proj
        };
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (-0.37, 0.5);
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if eval(c) < eval(d) {
                b = d;
            } else {
                a = c;
            }
        }
        assert!(((a + b) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn nearest_normal_picks_closest() {
        let pts = [Vector3::zeros(), Vector3::x(), Vector3::x()];
        let ns = [Vector3::z(), Vector3::y(), -Vector3::y()];
        assert_eq!(
            nearest_normal(&pts, &ns, &Vector3::new(0.9, 0.0, 0.0)).unwrap(),
            Vector3::y()
        );
        assert!(nearest_normal(&[], &[], &Vector3::zeros()).is_err());
    }
}

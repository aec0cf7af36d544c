//! Closed-form derivatives of `L(h) = 1 − cos(h, z)` with respect to `h`,
//! finite-difference oracles, and the curvature checks built on them.
//!
//! Notation: `r = ‖h‖`, `u = h/r`, `v = z/‖z‖`, `s = uᵀv`, `A = v − s·u`.
//! Then `∇L = −A/r` and `∇²L = (1/r²)[s(I − uuᵀ) + uAᵀ + Auᵀ]`, so the
//! radial direction `u` carries no curvature and any tangent `w ⟂ u` carries
//! `s‖w‖²/r²`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_against, Matrix};
use crate::objectives::Projector;
use crate::tensor::{dot, norm};

/// Step for central-difference gradients.
pub const FD_GRAD_STEP: f64 = 1e-5;
/// Step for central differences of the gradient (Hessian oracle).
pub const FD_HESS_STEP: f64 = 1e-4;
/// Step for the second directional difference through a projector.
pub const FD_CURVATURE_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CosineGeometry {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub r: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub s: f64,
    pub a: Vec<f64>,
}

impl CosineGeometry {
    pub fn new(h: &[f64], z: &[f64]) -> Result<Self> {
        if h.len() != z.len() {
            return Err(Error::Shape {
                op: "cosine geometry",
                lhs: vec![h.len()],
                rhs: vec![z.len()],
            });
        }
        if h.iter().chain(z).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("cosine geometry input".into()));
        }
        let r = norm(h);
        let zn = norm(z);
        if r == 0.0 {
            return Err(Error::DegenerateVector("h"));
        }
        if zn == 0.0 {
            return Err(Error::DegenerateVector("z"));
        }
        let u: Vec<f64> = h.iter().map(|x| x / r).collect();
        let v: Vec<f64> = z.iter().map(|x| x / zn).collect();
        let s = dot(&u, &v).clamp(-1.0, 1.0);
        let a = v.iter().zip(&u).map(|(vi, ui)| vi - s * ui).collect();
        Ok(CosineGeometry {
            h: h.to_vec(),
            z: z.to_vec(),
            r,
            u,
            v,
            s,
            a,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn loss(&self) -> f64 {
        1.0 - self.s
    }
}

/// `1 − cos(h, z)` evaluated directly, for finite differences.
pub fn cosine_loss(h: &[f64], z: &[f64]) -> f64 {
    1.0 - dot(h, z) / (norm(h) * norm(z))
}

/// `−A / r`
pub fn nitp_grad_closed(geom: &CosineGeometry) -> Vec<f64> {
    geom.a.iter().map(|a| -a / geom.r).collect()
}

/// `(1/r²)[s(I − uuᵀ) + uAᵀ + Auᵀ]`
pub fn nitp_hessian_closed(geom: &CosineGeometry) -> Matrix {
    let (u, a, s) = (&geom.u, &geom.a, geom.s);
    let inv_r2 = 1.0 / (geom.r * geom.r);
    Matrix::from_fn(geom.dim(), geom.dim(), |i, j| {
        let proj = if i == j { 1.0 } else { 0.0 } - u[i] * u[j];
        inv_r2 * (s * proj + (u[i] * a[j] + a[i] * u[j]))
    })
}

fn check_tangent(geom: &CosineGeometry, w: &[f64]) -> Result<()> {
    let along = dot(&geom.u, w);
    if along.abs() > 1e-10 * norm(w) {
        return Err(Error::NotTangent(along));
    }
    Ok(())
}

/// `wᵀHw` through the closed-form Hessian, for `w ⟂ u`.
pub fn tangent_curvature(geom: &CosineGeometry, w: &[f64]) -> Result<f64> {
    check_tangent(geom, w)?;
    Ok(nitp_hessian_closed(geom).quad_form(w))
}

/// `s‖w‖²/r²`
pub fn predicted_tangent_curvature(geom: &CosineGeometry, w: &[f64]) -> f64 {
    geom.s * dot(w, w) / (geom.r * geom.r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSample {
    pub measured: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug)]
pub struct HessianReport {
    pub analytic: Matrix,
    pub fd: Option<Matrix>,
    pub max_abs_err: f64,
    pub radial_curvature: f64,
    pub tangent_curvatures: Vec<CurvatureSample>,
    /// Smallest `wᵀH_total w / ‖w‖²` over the supplied null directions.
    pub min_lifted_eigenvalue: Option<f64>,
}

/// Closed-form Hessian against the finite-difference Jacobian of the
/// closed-form gradient, plus curvature along `u` and each tangent in `dirs`.
pub fn hessian_report(geom: &CosineGeometry, dirs: &[Vec<f64>]) -> Result<HessianReport> {
    let analytic = nitp_hessian_closed(geom);
    let z = geom.z.clone();
    let fd = fd_jacobian(
        |x| {
            let g = CosineGeometry::new(x, &z)?;
            Ok(nitp_grad_closed(&g))
        },
        &geom.h,
        FD_HESS_STEP,
    )?
    .symmetrized();
    let mut tangent_curvatures = Vec::with_capacity(dirs.len());
    for w in dirs {
        check_tangent(geom, w)?;
        tangent_curvatures.push(CurvatureSample {
            measured: analytic.quad_form(w),
            predicted: predicted_tangent_curvature(geom, w),
        });
    }
    Ok(HessianReport {
        max_abs_err: analytic.max_abs_diff(&fd),
        radial_curvature: analytic.quad_form(&geom.u),
        analytic,
        fd: Some(fd),
        tangent_curvatures,
        min_lifted_eigenvalue: None,
    })
}

/// Curvature of `H_ntp + λ·H_nitp` along each direction of `null_basis`,
/// compared with `λ·s‖w‖²/r²`. `max_abs_err` is the worst deviation.
pub fn spectral_lifting_check(
    h_ntp: &Matrix,
    geom: &CosineGeometry,
    lambda: f64,
    null_basis: &[Vec<f64>],
) -> Result<HessianReport> {
    let d = geom.dim();
    if h_ntp.rows() != d || h_ntp.cols() != d {
        return Err(Error::Shape {
            op: "spectral_lifting_check",
            lhs: vec![h_ntp.rows(), h_ntp.cols()],
            rhs: vec![d, d],
        });
    }
    let asym = h_ntp.asymmetry();
    if asym > 1e-12 * h_ntp.max_abs().max(1.0) {
        return Err(Error::Asymmetric(asym));
    }
    let h_nitp = nitp_hessian_closed(geom);
    let total = h_ntp.add(&h_nitp.scale(lambda));
    let mut samples = Vec::with_capacity(null_basis.len());
    let mut max_abs_err: f64 = 0.0;
    let mut min_lifted = f64::INFINITY;
    for w in null_basis {
        check_tangent(geom, w)?;
        let measured = total.quad_form(w);
        let predicted = lambda * predicted_tangent_curvature(geom, w);
        max_abs_err = max_abs_err.max((measured - predicted).abs());
        min_lifted = min_lifted.min(measured / dot(w, w));
        samples.push(CurvatureSample { measured, predicted });
    }
    Ok(HessianReport {
        radial_curvature: h_nitp.quad_form(&geom.u),
        analytic: total,
        fd: None,
        max_abs_err,
        tangent_curvatures: samples,
        min_lifted_eigenvalue: (!null_basis.is_empty()).then_some(min_lifted),
    })
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} evaluation")))
    }
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let hi = finite(f(&xp), "fd_gradient")?;
        xp[i] = x[i] - step;
        let lo = finite(f(&xp), "fd_gradient")?;
        xp[i] = x[i];
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}

/// Central-difference Jacobian of a vector function; row `i` holds
/// `∂f_i/∂x`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], step: f64) -> Result<Matrix> {
    let n = x.len();
    let mut xp = x.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        xp[j] = x[j] + step;
        let hi = f(&xp)?;
        xp[j] = x[j] - step;
        let lo = f(&xp)?;
        xp[j] = x[j];
        let col: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| (a - b) / (2.0 * step)).collect();
        for &c in &col {
            finite(c, "fd_jacobian")?;
        }
        cols.push(col);
    }
    let m = cols.first().map_or(0, Vec::len);
    Ok(Matrix::from_fn(m, n, |i, j| cols[j][i]))
}

/// Second-order central differences of a scalar function, symmetrized.
pub fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Matrix> {
    let n = x.len();
    let mut xp = x.to_vec();
    let eval = |xp: &mut Vec<f64>, di: (usize, f64), dj: (usize, f64)| -> Result<f64> {
        xp[di.0] += di.1;
        xp[dj.0] += dj.1;
        let v = finite(f(xp), "fd_hessian");
        xp[di.0] = x[di.0];
        xp[dj.0] = x[dj.0];
        v
    };
    let mut h = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let pp = eval(&mut xp, (i, step), (j, step))?;
            let pm = eval(&mut xp, (i, step), (j, -step))?;
            let mp = eval(&mut xp, (i, -step), (j, step))?;
            let mm = eval(&mut xp, (i, -step), (j, -step))?;
            let v = (pp - pm - mp + mm) / (4.0 * step * step);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h.symmetrized())
}

/// Second directional derivative of `1 − cos(P(h), z)` along `dir` by a
/// central second difference. `None` skips the projector.
pub fn projected_loss_curvature(projector: Option<&Projector>, h: &[f64], z: &[f64], dir: &[f64]) -> Result<f64> {
    let loss = |eps: f64| -> Result<f64> {
        let x: Vec<f64> = h.iter().zip(dir).map(|(a, b)| a + eps * b).collect();
        let p = match projector {
            Some(p) => p.apply(&x)?,
            None => x,
        };
        finite(cosine_loss(&p, z), "projected loss")
    };
    let e = FD_CURVATURE_STEP;
    let v = (loss(e)? - 2.0 * loss(0.0)? + loss(-e)?) / (e * e);
    finite(v, "projected curvature")
}

fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// `h` with a uniform direction and norm in `[0.5, 2]`, `z` standard normal.
pub fn random_geometry(rng: &mut impl Rng, d: usize) -> CosineGeometry {
    loop {
        let dir = gaussian(rng, d);
        let z = gaussian(rng, d);
        let n = norm(&dir);
        if n < 1e-3 || norm(&z) < 1e-3 {
            continue;
        }
        let radius = rng.gen_range(0.5..2.0);
        let h: Vec<f64> = dir.iter().map(|x| x * radius / n).collect();
        return CosineGeometry::new(&h, &z).expect("nonzero inputs");
    }
}

/// `z = h + 0.05·n` with `h`, `n` standard normal: alignment near one.
pub fn high_alignment_geometry(rng: &mut impl Rng, d: usize) -> CosineGeometry {
    let h = gaussian(rng, d);
    let n = gaussian(rng, d);
    let z: Vec<f64> = h.iter().zip(&n).map(|(a, b)| a + 0.05 * b).collect();
    CosineGeometry::new(&h, &z).expect("nonzero inputs")
}

/// Random unit tangent directions at `geom`.
pub fn random_tangents(rng: &mut impl Rng, geom: &CosineGeometry, count: usize) -> Vec<Vec<f64>> {
    let basis = [geom.u.clone()];
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if let Some(w) = orthonormalize_against(&gaussian(rng, geom.dim()), &basis) {
            out.push(w);
        }
    }
    out
}

/// A rank-`rank` positive semidefinite `H_ntp = Σ cᵢ bᵢbᵢᵀ` with orthonormal
/// `bᵢ ⟂ u`, and an orthonormal basis of the remaining tangent directions
/// (`d − 1 − rank` vectors, all with `wᵀH_ntp w = 0`).
pub fn synthetic_ntp_hessian(rng: &mut impl Rng, u: &[f64], rank: usize) -> (Matrix, Vec<Vec<f64>>) {
    let d = u.len();
    assert!(rank < d, "rank {rank} leaves no room beside u in dimension {d}");
    let mut basis = vec![u.to_vec()];
    let mut h = Matrix::zeros(d, d);
    while basis.len() < rank + 1 {
        if let Some(b) = orthonormalize_against(&gaussian(rng, d), &basis) {
            let c = rng.gen_range(0.5..2.0);
            h = h.add(&Matrix::outer(&b, &b).scale(c));
            basis.push(b);
        }
    }
    let mut null = Vec::with_capacity(d - 1 - rank);
    while basis.len() < d {
        if let Some(w) = orthonormalize_against(&gaussian(rng, d), &basis) {
            basis.push(w.clone());
            null.push(w);
        }
    }
    (h.symmetrized(), null)
}

/// One row of the `verify` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyCase {
    pub id: usize,
    pub dim: usize,
    /// Closed-form vs finite-difference gradient.
    pub grad_err: f64,
    /// Closed-form vs finite-difference Hessian.
    pub hess_err: f64,
    pub asymmetry: f64,
    /// `|uᵀHu| / max|H|`
    pub radial: f64,
    /// Worst relative gap between `wᵀHw` and `s‖w‖²/r²` over sampled tangents.
    pub tangent_rel_err: f64,
    /// Worst gap between lifted and predicted curvature on null directions.
    pub lift_err: f64,
    pub min_lifted: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyConfig {
    pub cases: usize,
    pub tangents: usize,
    pub lambda: f64,
    pub ntp_rank: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            cases: 50,
            tangents: 10,
            lambda: 0.8,
            ntp_rank: 2,
            seed: 0,
        }
    }
}

/// Runs every check on `cfg.cases` random instances per dimension.
pub fn run_verification(dims: &[usize], cfg: &VerifyConfig) -> Result<Vec<VerifyCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(dims.len() * cfg.cases);
    for &d in dims {
        if d < 2 {
            return Err(Error::config(format!("verification needs dimension >= 2, got {d}")));
        }
        for _ in 0..cfg.cases {
            rows.push(verify_case(&mut rng, rows.len(), d, cfg)?);
        }
    }
    Ok(rows)
}

fn verify_case(rng: &mut ChaCha8Rng, id: usize, d: usize, cfg: &VerifyConfig) -> Result<VerifyCase> {
    let geom = random_geometry(rng, d);
    let z = geom.z.clone();
    let fd = fd_gradient(|x| cosine_loss(x, &z), &geom.h, FD_GRAD_STEP)?;
    let closed = nitp_grad_closed(&geom);
    let grad_err = fd.iter().zip(&closed).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    let tangents = random_tangents(rng, &geom, cfg.tangents);
    let report = hessian_report(&geom, &tangents)?;
    let scale = report.analytic.max_abs();
    let tangent_rel_err = report
        .tangent_curvatures
        .iter()
        .map(|c| (c.measured - c.predicted).abs() / c.predicted.abs().max(scale * f64::EPSILON))
        .fold(0.0, f64::max);

    let aligned = high_alignment_geometry(rng, d);
    let rank = cfg.ntp_rank.min(d - 1);
    let (h_ntp, null) = synthetic_ntp_hessian(rng, &aligned.u, rank);
    let lift = spectral_lifting_check(&h_ntp, &aligned, cfg.lambda, &null)?;

    Ok(VerifyCase {
        id,
        dim: d,
        grad_err,
        hess_err: report.max_abs_err,
        asymmetry: report.analytic.asymmetry(),
        radial: report.radial_curvature.abs() / scale,
        tangent_rel_err,
        lift_err: lift.max_abs_err,
        min_lifted: lift.min_lifted_eigenvalue.unwrap_or(f64::NAN),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn aligned_gradient_vanishes() {
        let g = CosineGeometry::new(&[1.0, 2.0, -2.0], &[2.0, 4.0, -4.0]).unwrap();
        assert_eq!(g.s, 1.0);
        assert!(nitp_grad_closed(&g).iter().all(|x| x.abs() < 1e-16));
    }

    #[test]
    fn orthogonal_unit_gradient_is_minus_v() {
        let g = CosineGeometry::new(&[1.0, 0.0, 0.0], &[0.0, 3.0, 4.0]).unwrap();
        assert_eq!(nitp_grad_closed(&g), vec![-0.0, -0.6, -0.8]);
    }

    #[test]
    fn aligned_hessian_is_tangent_projector() {
        let g = CosineGeometry::new(&[0.0, 2.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        let h = nitp_hessian_closed(&g);
        let want = Matrix::from_fn(3, 3, |i, j| if i == j && i != 1 { 0.25 } else { 0.0 });
        assert!(h.max_abs_diff(&want) < 1e-16);
    }

    #[test]
    fn zero_inputs_are_rejected() {
        assert!(matches!(CosineGeometry::new(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateVector("h"))));
        assert!(matches!(CosineGeometry::new(&[1.0, 0.0], &[0.0, 0.0]), Err(Error::DegenerateVector("z"))));
    }

    #[test]
    fn tangent_requirement() {
        let g = CosineGeometry::new(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(matches!(tangent_curvature(&g, &[1.0, 1.0]), Err(Error::NotTangent(_))));
        let c = tangent_curvature(&g, &[0.0, 1.0]).unwrap();
        assert!((c - g.s).abs() < 1e-15);
        let g = CosineGeometry::new(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(tangent_curvature(&g, &[0.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn unit_aligned_tangent_curvature_is_one() {
        let g = CosineGeometry::new(&[0.0, 0.0, 1.0], &[0.0, 0.0, 5.0]).unwrap();
        assert!((tangent_curvature(&g, &[1.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fd_quadratic_and_constant() {
        let x = [0.3, -1.2, 2.0];
        let g = fd_gradient(|x| dot(x, x), &x, FD_GRAD_STEP).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
        let h = fd_hessian(|x| dot(x, x), &x, 1e-2).unwrap();
        assert!(h.max_abs_diff(&Matrix::identity(3).scale(2.0)) < 1e-9);
        let h = fd_hessian(|_| 4.0, &x, FD_HESS_STEP).unwrap();
        assert!(h.max_abs() <= 1e-10);
        assert!(fd_gradient(|_| 4.0, &x, FD_GRAD_STEP).unwrap().iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn fd_rejects_non_finite() {
        assert!(matches!(fd_gradient(|_| f64::NAN, &[1.0], 1e-5), Err(Error::NonFinite(_))));
        assert!(fd_hessian(|x| 1.0 / x[0], &[0.0], 1e-4).is_err());
    }

    #[test]
    fn lifting_trivial_cases() {
        let g = CosineGeometry::new(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        let null = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let zero = Matrix::zeros(3, 3);
        let r = spectral_lifting_check(&zero, &g, 1.0, &null).unwrap();
        assert!(r.tangent_curvatures.iter().all(|c| (c.measured - 1.0).abs() < 1e-15));
        let r = spectral_lifting_check(&zero, &g, 0.0, &null).unwrap();
        assert_eq!(r.min_lifted_eigenvalue, Some(0.0));
        let skew = Matrix::from_fn(3, 3, |i, j| (i as f64) - (j as f64));
        assert!(matches!(spectral_lifting_check(&skew, &g, 1.0, &null), Err(Error::Asymmetric(_))));
    }

    #[test]
    fn synthetic_hessian_has_requested_null_space() {
        let mut rng = rng();
        let g = high_alignment_geometry(&mut rng, 16);
        let (h, null) = synthetic_ntp_hessian(&mut rng, &g.u, 2);
        assert_eq!(null.len(), 13);
        for w in &null {
            assert!(h.quad_form(w).abs() < 1e-14);
            assert!(dot(w, &g.u).abs() < 1e-14);
        }
        assert!(h.quad_form(&g.u).abs() < 1e-14);
    }

    #[test]
    fn small_verification_run_is_clean() {
        let rows = run_verification(
            &[3, 8],
            &VerifyConfig {
                cases: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(rows.len(), 10);
        for r in rows {
            assert!(r.grad_err <= 1e-8, "{r:?}");
            assert!(r.hess_err <= 1e-5, "{r:?}");
            assert!(r.radial <= 1e-12, "{r:?}");
        }
    }
}

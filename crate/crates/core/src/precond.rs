//! Cholesky preconditioning J = J̄R⁻¹ with RᵀR = J̄ᵀJ̄ + w²I: the bounds on the resulting
//! triangular factor, the norm bounds on its blocks, and analytic derivatives of the
//! factors with respect to the joints.

use crate::chainmodel::KinematicModel;
use crate::matkit::{
    cholesky_upper, diagonalization_number, inverse_lower, inverse_upper, norm_1, norm_inf, qr_prioritized,
    reverse_cholesky_lower, singular_values, spectral_norm, MatError, Matrix, Tensor3, Vector,
};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    pub w: f64,
    pub r: Matrix,
    pub r_inv: Matrix,
}

impl Preconditioner {
    pub fn build(j_bar: &Matrix, w: f64) -> Result<Self, MatError> {
        if !(w.is_finite() && w > 0.0) {
            return Err(MatError::Dimension(format!("damping must be positive, got {w}")));
        }
        let n = j_bar.ncols();
        let mut gram = j_bar.transpose() * j_bar + Matrix::identity(n, n) * (w * w);
        // symmetrize away rounding in the product
        gram = (&gram + gram.transpose()) * 0.5;
        let r = cholesky_upper(&gram)?;
        let r_inv = inverse_upper(&r)?;
        Ok(Self { w, r, r_inv })
    }

    pub fn apply(&self, j_bar: &Matrix) -> Matrix {
        j_bar * &self.r_inv
    }
}

/// σ̄/√(σ̄² + w²): singular values after preconditioning.
pub fn damped_singular_value(sigma_bar: f64, w: f64) -> f64 {
    sigma_bar / (sigma_bar * sigma_bar + w * w).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecondBounds {
    pub w: f64,
    pub c_bar_diag: Vec<f64>,
    pub c_diag: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub beta2: Vec<f64>,
    pub nu_lower2: Vec<f64>,
    pub nu_upper2: Vec<f64>,
    pub sigma_bar: Vec<f64>,
    pub rho2: f64,
    pub dn_c_bar: Option<f64>,
    pub dn_c: Option<f64>,
    pub dn_lower: Option<f64>,
    pub dn_upper: Option<f64>,
    /// Largest violation of the entrywise and dn sandwiches (≤ 0 when they hold exactly).
    pub max_violation: f64,
    #[serde(skip)]
    pub c_bar: Matrix,
    #[serde(skip)]
    pub c: Matrix,
    #[serde(skip)]
    pub c_formula: Matrix,
}

impl PrecondBounds {
    pub fn holds(&self, slack: f64) -> bool {
        self.max_violation <= slack
    }
}

/// C̄C̃⁻¹ with C̃ the reverse Cholesky factor of C̄ᵀC̄ + w²I.
pub fn c_from_c_bar(c_bar: &Matrix, w: f64) -> Result<Matrix, MatError> {
    let m = c_bar.nrows();
    let mut wc = c_bar.transpose() * c_bar + Matrix::identity(m, m) * (w * w);
    wc = (&wc + wc.transpose()) * 0.5;
    let c_tilde = reverse_cholesky_lower(&wc)?;
    Ok(c_bar * inverse_lower(&c_tilde)?)
}

pub fn preconditioned_bounds(j_bar: &Matrix, w: f64, rank_tol: f64) -> Result<PrecondBounds, MatError> {
    let m = j_bar.nrows();
    let c_bar = qr_prioritized(j_bar, rank_tol)?.c;
    let pre = Preconditioner::build(j_bar, w)?;
    let c = qr_prioritized(&pre.apply(j_bar), rank_tol)?.c;
    let c_formula = c_from_c_bar(&c_bar, w)?;
    let sigma_bar = singular_values(j_bar);
    let w2 = w * w;
    let rho2: f64 = sigma_bar.iter().map(|s| s * s / (s * s + w2)).sum();

    let mut alpha2 = Vec::with_capacity(m);
    let mut beta2 = Vec::with_capacity(m);
    let mut nu_lo = Vec::with_capacity(m);
    let mut nu_hi = Vec::with_capacity(m);
    let mut violation = f64::NEG_INFINITY;
    for a in 0..m {
        let tail = m - a - 1;
        let (lo, hi) = if tail == 0 {
            (0.0, 0.0)
        } else {
            let d = c_bar.view((a + 1, a), (tail, 1)).norm_squared();
            let s = singular_values(&c_bar.view((a + 1, a + 1), (tail, tail)).into_owned());
            let smax = s[0];
            let smin = s[tail - 1];
            (w2 * d / (smax * smax + w2), w2 * d / (smin * smin + w2))
        };
        let cb2 = c_bar[(a, a)].powi(2);
        let al = cb2 / (cb2 + w2 + hi);
        let be = cb2 / (cb2 + w2 + lo);
        let c2 = c[(a, a)].powi(2);
        violation = violation.max(al - c2).max(c2 - be);
        alpha2.push(al);
        beta2.push(be);
        nu_lo.push(lo);
        nu_hi.push(hi);
    }

    let (dn_c_bar, dn_c, dn_lower, dn_upper) = if rho2 > 0.0 {
        let dn_c = diagonalization_number(&c)?;
        let lower = alpha2.iter().sum::<f64>() / rho2;
        let upper = beta2.iter().sum::<f64>() / rho2;
        violation = violation.max(lower - dn_c).max(dn_c - upper);
        (Some(diagonalization_number(&c_bar)?), Some(dn_c), Some(lower), Some(upper))
    } else {
        (None, None, None, None)
    };

    Ok(PrecondBounds {
        w,
        c_bar_diag: (0..m).map(|a| c_bar[(a, a)]).collect(),
        c_diag: (0..m).map(|a| c[(a, a)]).collect(),
        alpha2,
        beta2,
        nu_lower2: nu_lo,
        nu_upper2: nu_hi,
        sigma_bar,
        rho2,
        dn_c_bar,
        dn_c,
        dn_lower,
        dn_upper,
        max_violation: if m == 0 { 0.0 } else { violation },
        c_bar,
        c,
        c_formula,
    })
}

/// Max entrywise gap between C from factoring J̄R⁻¹ and C̄C̃⁻¹.
pub fn check_c_identity(j_bar: &Matrix, w: f64, rank_tol: f64) -> Result<f64, MatError> {
    let b = preconditioned_bounds(j_bar, w, rank_tol)?;
    Ok((&b.c - &b.c_formula).amax())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockNormReport {
    /// Each entry is the worst ratio of a quantity to its bound over all blocks.
    pub max_entry: f64,
    pub max_spectral: f64,
    pub max_norm1_ratio: f64,
    pub max_norm_inf_ratio: f64,
    pub max_frobenius_ratio: f64,
    pub blocks_checked: usize,
}

impl BlockNormReport {
    pub fn holds(&self) -> bool {
        [
            self.max_entry,
            self.max_spectral,
            self.max_norm1_ratio,
            self.max_norm_inf_ratio,
            self.max_frobenius_ratio,
        ]
        .iter()
        .all(|r| *r < 1.0)
    }
}

/// Norm bounds on every contiguous block of a preconditioned factor C.
pub fn block_norm_checks(c: &Matrix) -> BlockNormReport {
    let (rows, cols) = c.shape();
    let mut rep = BlockNormReport {
        max_entry: c.amax(),
        max_spectral: 0.0,
        max_norm1_ratio: 0.0,
        max_norm_inf_ratio: 0.0,
        max_frobenius_ratio: 0.0,
        blocks_checked: 0,
    };
    for a in 0..rows {
        for a2 in a..rows {
            for b in 0..cols {
                for b2 in b..cols {
                    let (h, w) = (a2 - a + 1, b2 - b + 1);
                    let blk = c.view((a, b), (h, w)).into_owned();
                    rep.max_spectral = rep.max_spectral.max(spectral_norm(&blk));
                    rep.max_norm1_ratio = rep.max_norm1_ratio.max(norm_1(&blk) / h as f64);
                    rep.max_norm_inf_ratio = rep.max_norm_inf_ratio.max(norm_inf(&blk) / w as f64);
                    rep.max_frobenius_ratio =
                        rep.max_frobenius_ratio.max(blk.norm() / (h.min(w) as f64).sqrt());
                    rep.blocks_checked += 1;
                }
            }
        }
    }
    rep
}

/// Damping below which 1 − c_aa² < ε and 1 − dn(C) < ε whenever σ_min(C̄) ≥ m_Ω.
pub fn damping_threshold(m_omega: f64, eps: f64) -> f64 {
    m_omega * (eps / (1.0 - eps)).sqrt()
}

// ── derivatives ──

fn triangular_split(t: &Tensor3, upper: bool) -> Tensor3 {
    t.map(|s| {
        Matrix::from_fn(s.nrows(), s.ncols(), |i, j| {
            if i == j {
                0.5 * s[(i, j)]
            } else if (i < j) == upper {
                s[(i, j)]
            } else {
                0.0
            }
        })
    })
}

/// Keep the strict upper part of each slice and half its diagonal.
pub fn phi_u(t: &Tensor3) -> Tensor3 {
    triangular_split(t, true)
}

/// Keep the strict lower part of each slice and half its diagonal.
pub fn phi_l(t: &Tensor3) -> Tensor3 {
    triangular_split(t, false)
}

pub fn phi_maps(t: &Tensor3) -> (Tensor3, Tensor3) {
    (phi_u(t), phi_l(t))
}

/// Joint derivatives of R⁻¹, C and Ĵ, one slice per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDerivatives {
    pub d_r_inv: Tensor3,
    pub d_c: Tensor3,
    pub d_j_hat: Tensor3,
}

/// Derivatives from the derivative of F_q alone.
///
/// With `w = Some(_)` the preconditioned factors are differentiated; with `None`
/// R = I and C̄ follows from differentiating F_qF_qᵀ = C̄C̄ᵀ.
pub fn factor_derivatives(
    f_q: &Matrix,
    d_f_q: &Tensor3,
    w: Option<f64>,
    rank_tol: f64,
) -> Result<FactorDerivatives, MatError> {
    let n = f_q.ncols();
    match w {
        Some(w) => {
            let pre = Preconditioner::build(f_q, w)?;
            let j = pre.apply(f_q);
            let dec = qr_prioritized(&j, rank_tol)?;
            if dec.dependent.iter().any(|d| *d) {
                return Err(MatError::Singular);
            }
            let (c, j_hat) = (&dec.c, &dec.j_hat);
            let c_inv = inverse_lower(c)?;
            let a = d_f_q.transpose().left_mul(&pre.r_inv.transpose()).right_mul(&j);
            let b = d_f_q
                .left_mul(&(&c_inv - c.transpose()))
                .right_mul(&(&pre.r_inv * j_hat.transpose()));
            let sa = phi_u(&a.add(&a.transpose()));
            let sb = phi_l(&b.add(&b.transpose()));
            let d_r_inv = sa.left_mul(&(-&pre.r_inv));
            let d_c = sb.left_mul(c);
            let d_j_hat = d_f_q
                .left_mul(&c_inv)
                .right_mul(&pre.r_inv)
                .sub(&sa.left_mul(j_hat))
                .sub(&sb.right_mul(j_hat));
            Ok(FactorDerivatives { d_r_inv, d_c, d_j_hat })
        }
        None => {
            let dec = qr_prioritized(f_q, rank_tol)?;
            if dec.dependent.iter().any(|d| *d) {
                return Err(MatError::Singular);
            }
            let (c, j_hat) = (&dec.c, &dec.j_hat);
            let c_inv = inverse_lower(c)?;
            let d_gram = d_f_q.map(|s| s * f_q.transpose() + f_q * s.transpose());
            let d_c = phi_l(&d_gram.left_mul(&c_inv).right_mul(&c_inv.transpose())).left_mul(c);
            let d_j_hat = d_f_q.sub(&d_c.right_mul(j_hat)).left_mul(&c_inv);
            Ok(FactorDerivatives {
                d_r_inv: Tensor3::zeros(n, n, n),
                d_c,
                d_j_hat,
            })
        }
    }
}

pub fn analytic_derivatives(
    model: &KinematicModel,
    w: f64,
    t: f64,
    q: &Vector,
    rank_tol: f64,
) -> Result<FactorDerivatives, MatError> {
    factor_derivatives(&model.jacobian(t, q), &model.jacobian_derivative(t, q), Some(w), rank_tol)
}

/// D_qC̄ = C̄Φ_l(C̄⁻¹D_q(F_qF_qᵀ)C̄⁻ᵀ) for the unpreconditioned factor.
pub fn unpreconditioned_c_derivative(
    model: &KinematicModel,
    t: f64,
    q: &Vector,
    rank_tol: f64,
) -> Result<Tensor3, MatError> {
    Ok(factor_derivatives(&model.jacobian(t, q), &model.jacobian_derivative(t, q), None, rank_tol)?.d_c)
}

/// Derivative of M = R⁻¹ĴᵀC_DᵀL from the factor derivatives (L constant).
pub fn solution_map_derivative(
    r_inv: &Matrix,
    j_hat: &Matrix,
    c: &Matrix,
    task_dims: &[usize],
    l: &Matrix,
    d: &FactorDerivatives,
) -> Tensor3 {
    let cd = crate::matkit::block_diagonal(c, task_dims);
    let k = d.d_r_inv.dims().2;
    let slices = (0..k)
        .map(|i| {
            let dcd = crate::matkit::block_diagonal(d.d_c.slice(i), task_dims);
            (d.d_r_inv.slice(i) * j_hat.transpose() * cd.transpose()
                + r_inv * d.d_j_hat.slice(i).transpose() * cd.transpose()
                + r_inv * j_hat.transpose() * dcd.transpose())
                * l
        })
        .collect();
    Tensor3::from_slices(slices).expect("finite factors give finite derivatives")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chainmodel::TaskDef;
    use crate::matkit::{sigma_min, DEFAULT_RANK_TOL};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn hand_preconditioner() {
        let p = Preconditioner::build(&m(1, 2, &[1.0, 0.0]), 1.0).unwrap();
        assert_abs_diff_eq!(p.r, m(2, 2, &[2.0_f64.sqrt(), 0.0, 0.0, 1.0]), epsilon = 1e-15);
        assert_abs_diff_eq!(p.apply(&m(1, 2, &[1.0, 0.0])), m(1, 2, &[0.5_f64.sqrt(), 0.0]), epsilon = 1e-15);
        assert!((0..2).all(|i| p.r[(i, i)] >= 1.0));
    }

    #[test]
    fn large_damping_shrinks_j() {
        let j_bar = m(1, 2, &[3.0, 4.0]);
        for w in [1e2, 1e3, 1e4] {
            let j = Preconditioner::build(&j_bar, w).unwrap().apply(&j_bar);
            assert!((spectral_norm(&j) * w / 5.0 - 1.0).abs() < 20.0 / (w * w));
        }
    }

    #[test]
    fn scalar_bounds() {
        let b = preconditioned_bounds(&m(1, 2, &[1.0, 0.0]), 1.0, DEFAULT_RANK_TOL).unwrap();
        assert_abs_diff_eq!(b.c_diag[0].powi(2), 0.5, epsilon = 1e-15);
        assert_eq!(b.nu_lower2[0], 0.0);
        assert_eq!(b.nu_upper2[0], 0.0);
        assert_abs_diff_eq!(b.alpha2[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(b.beta2[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn damping_limits() {
        let j_bar = m(3, 4, &[1.0, 0.3, -0.2, 0.5, 0.4, 1.2, 0.1, 0.0, -0.3, 0.2, 0.9, 0.7]);
        let small = preconditioned_bounds(&j_bar, 1e-5, DEFAULT_RANK_TOL).unwrap();
        assert!(small.c_diag.iter().all(|c| (c * c - 1.0).abs() < 1e-8));
        assert!((small.dn_c.unwrap() - 1.0).abs() < 1e-8);
        let large = preconditioned_bounds(&j_bar, 1e5, DEFAULT_RANK_TOL).unwrap();
        assert!(large.c_diag.iter().all(|c| c * c < 1e-9));
        assert!((large.dn_c.unwrap() - large.dn_c_bar.unwrap()).abs() < 1e-8);
    }

    #[test]
    fn identity_input_has_zero_gap() {
        assert_eq!(check_c_identity(&Matrix::identity(3, 3), 0.7, DEFAULT_RANK_TOL).unwrap(), 0.0);
    }

    #[test]
    fn rank_deficient_identity() {
        let j_bar = m(3, 3, &[1.0, 0.5, 0.0, 2.0, 1.0, 0.0, 0.0, 0.3, 1.0]);
        let b = preconditioned_bounds(&j_bar, 0.4, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(b.c_bar[(1, 1)], 0.0);
        assert!(b.c.column(1).iter().all(|x| x.abs() < 1e-12));
        assert!(b.c_formula.column(1).iter().all(|x| x.abs() < 1e-12));
        assert!((&b.c - &b.c_formula).amax() < 1e-8);
        assert!(b.holds(1e-9));
    }

    #[test]
    fn block_norm_small_cases() {
        assert!(block_norm_checks(&m(1, 1, &[0.5_f64.sqrt()])).holds());
        let j_bar = Matrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5 + if i == j { 3.0 } else { 0.0 });
        let c = preconditioned_bounds(&j_bar, 0.5, DEFAULT_RANK_TOL).unwrap().c;
        let rep = block_norm_checks(&c);
        assert!(rep.holds(), "{rep:?}");
        assert_eq!(rep.blocks_checked, 21 * 21);
        let c = preconditioned_bounds(&j_bar, 1e-6, DEFAULT_RANK_TOL).unwrap().c;
        let rep = block_norm_checks(&c);
        assert!(rep.max_entry < 1.0 && rep.max_entry > 0.999_999);
    }

    #[test]
    fn phi_split() {
        let t = Tensor3::from_slices(vec![
            m(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            m(2, 2, &[-1.0, 0.5, 0.25, 2.0]),
        ])
        .unwrap();
        let (u, l) = phi_maps(&t);
        assert_eq!(u.add(&l), t);
        assert_eq!(u.slice(0), &m(2, 2, &[0.5, 2.0, 0.0, 2.0]));
        assert_eq!(l.slice(1), &m(2, 2, &[-0.5, 0.0, 0.25, 1.0]));
    }

    #[test]
    fn constant_jacobian_has_zero_derivatives() {
        let model = KinematicModel::new(vec![1.0, 1.0, 1.0], vec![TaskDef::Posture { joints: vec![1, 3] }]).unwrap();
        let d = analytic_derivatives(&model, 0.3, 0.0, &Vector::from_vec(vec![0.2, 0.1, 0.4]), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(d.d_r_inv.frobenius(), 0.0);
        assert_eq!(d.d_c.frobenius(), 0.0);
        assert_eq!(d.d_j_hat.frobenius(), 0.0);
    }

    struct Factors {
        r_inv: Matrix,
        c: Matrix,
        j_hat: Matrix,
    }

    fn factors(model: &KinematicModel, q: &Vector, w: Option<f64>) -> Factors {
        let f_q = model.jacobian(0.0, q);
        let r_inv = match w {
            Some(w) => Preconditioner::build(&f_q, w).unwrap().r_inv,
            None => Matrix::identity(model.n(), model.n()),
        };
        let dec = qr_prioritized(&(&f_q * &r_inv), DEFAULT_RANK_TOL).unwrap();
        Factors { r_inv, c: dec.c, j_hat: dec.j_hat }
    }

    fn fd(model: &KinematicModel, q: &Vector, w: Option<f64>, pick: fn(&Factors) -> Matrix) -> Tensor3 {
        let h = 1e-5;
        let slices = (0..model.n())
            .map(|k| {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                (pick(&factors(model, &qp, w)) - pick(&factors(model, &qm, w))) / (2.0 * h)
            })
            .collect();
        Tensor3::from_slices(slices).unwrap()
    }

    fn rel(a: &Tensor3, b: &Tensor3) -> f64 {
        a.sub(b).frobenius() / a.frobenius().max(1e-12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn sandwich_and_identity(m_ in 1usize..7, extra in 0usize..4, data in proptest::collection::vec(-2.0..2.0f64, 100), logw in -3.0..3.0f64) {
            let n = m_ + extra;
            let j_bar = Matrix::from_fn(m_, n, |i, j| data[i * 10 + j]);
            let w = 10f64.powf(logw);
            let b = preconditioned_bounds(&j_bar, w, DEFAULT_RANK_TOL).unwrap();
            prop_assert!(b.holds(1e-9), "violation {}", b.max_violation);
            prop_assert!((&b.c - &b.c_formula).amax() <= 1e-8);
            let s = singular_values(&b.c);
            for (sc, sb) in s.iter().zip(&b.sigma_bar) {
                prop_assert!((sc - damped_singular_value(*sb, w)).abs() <= 1e-8);
            }
        }

        #[test]
        fn damped_singular_values_monotone(s in 0.01..10.0f64, ds in 0.001..1.0f64, w in 0.01..10.0f64, dw in 0.001..1.0f64) {
            prop_assert!(damped_singular_value(s + ds, w) > damped_singular_value(s, w));
            prop_assert!(damped_singular_value(s, w + dw) < damped_singular_value(s, w));
        }

        #[test]
        fn derivatives_match_differences(q in proptest::collection::vec(-2.5..2.5f64, 3), w in prop_oneof![Just(0.1), Just(0.3), Just(1.0)]) {
            let model = KinematicModel::new(
                vec![1.0, 0.8, 0.6],
                vec![TaskDef::Point { link: 3 }, TaskDef::Posture { joints: vec![1] }],
            ).unwrap();
            let q = Vector::from_vec(q);
            prop_assume!(sigma_min(&model.jacobian(0.0, &q)) > 0.05);
            let d = analytic_derivatives(&model, w, 0.0, &q, DEFAULT_RANK_TOL).unwrap();
            prop_assert!(rel(&d.d_r_inv, &fd(&model, &q, Some(w), |f| f.r_inv.clone())) <= 1e-4);
            prop_assert!(rel(&d.d_c, &fd(&model, &q, Some(w), |f| f.c.clone())) <= 1e-4);
            prop_assert!(rel(&d.d_j_hat, &fd(&model, &q, Some(w), |f| f.j_hat.clone())) <= 1e-4);
            let d0 = factor_derivatives(&model.jacobian(0.0, &q), &model.jacobian_derivative(0.0, &q), None, DEFAULT_RANK_TOL).unwrap();
            prop_assert!(rel(&d0.d_c, &fd(&model, &q, None, |f| f.c.clone())) <= 1e-4);
            prop_assert!(rel(&d0.d_j_hat, &fd(&model, &q, None, |f| f.j_hat.clone())) <= 1e-4);
        }

        #[test]
        fn solution_map_derivative_matches_differences(q in proptest::collection::vec(-2.5..2.5f64, 3), w in prop_oneof![Just(None), Just(Some(0.2))]) {
            let model = KinematicModel::new(
                vec![1.0, 0.8, 0.6],
                vec![TaskDef::Point { link: 3 }, TaskDef::Posture { joints: vec![2] }],
            ).unwrap();
            let q = Vector::from_vec(q);
            prop_assume!(sigma_min(&model.jacobian(0.0, &q)) > 0.05);
            let dims = model.task_dims();
            let l = Matrix::identity(3, 3);
            let map = |q: &Vector| {
                let f = factors(&model, q, w);
                &f.r_inv * f.j_hat.transpose() * crate::matkit::block_diagonal(&f.c, &dims).transpose()
            };
            let f = factors(&model, &q, w);
            let d = factor_derivatives(&model.jacobian(0.0, &q), &model.jacobian_derivative(0.0, &q), w, DEFAULT_RANK_TOL).unwrap();
            let dm = solution_map_derivative(&f.r_inv, &f.j_hat, &f.c, &dims, &l, &d);
            let h = 1e-5;
            let slices = (0..3).map(|k| {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                (map(&qp) - map(&qm)) / (2.0 * h)
            }).collect();
            prop_assert!(rel(&dm, &Tensor3::from_slices(slices).unwrap()) <= 1e-4);
        }
    }
}

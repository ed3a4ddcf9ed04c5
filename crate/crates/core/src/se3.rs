//! SE(3) kernel: rigid transforms, twists, hat/vee, exp/log, perturbation
//! sampling and covariance-aware pose composition.
//!
//! Twists are ordered `(rho, phi)` with `rho` the translational and `phi`
//! the rotational component. Uncertainty follows the right-perturbation
//! convention `T_hat = T * exp(xi^)` with `xi ~ N(0, Sigma)`, and pose
//! chains propagate covariance with either the second-order compound or
//! the fourth-order correction terms.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::seeding::rng_from_seed;

/// 6x6 matrix over a twist, blocks ordered (rho, phi).
pub type Matrix6 = nalgebra::SMatrix<f64, 6, 6>;
/// 6-vector view of a twist.
pub type Vector6 = nalgebra::SVector<f64, 6>;

/// Tolerance for pose equality checks (Frobenius norm of the 4x4 difference).
pub const POSE_EQ_TOL: f64 = 1e-9;
/// Orthonormality tolerance for rotation validation.
pub const ROTATION_TOL: f64 = 1e-9;
/// Below this rotation angle the V-matrix coefficients switch to series.
const SMALL_ANGLE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation matrix is not orthonormal with determinant +1 (defect {defect:.3e})")]
    InvalidRotation { defect: f64 },
    #[error("matrix does not have hat structure (defect {defect:.3e})")]
    NotHatStructured { defect: f64 },
    #[error("rotation angle {angle:.6} too close to pi; log is not unique")]
    LogNearPi { angle: f64 },
    #[error("twist has non-finite entries")]
    NonFiniteTwist,
    #[error("covariance is not symmetric positive (semi)definite: {reason}")]
    InvalidCovariance { reason: String },
    #[error("pose chain is empty")]
    EmptyChain,
    #[error("malformed pose line: {0}")]
    MalformedPoseLine(String),
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose, validating the rotation to [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let defect = rotation_defect(&rotation);
        if defect > ROTATION_TOL || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation { defect });
        }
        Ok(Self { rotation, translation })
    }

    /// Builds a pose from a possibly noisy rotation by projecting it onto
    /// SO(3) (closest orthonormal matrix with determinant +1).
    pub fn from_matrix_reproject(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let svd = rotation.svd(true, true);
        let u = svd.u.ok_or(GeometryError::InvalidRotation { defect: f64::NAN })?;
        let vt = svd.v_t.ok_or(GeometryError::InvalidRotation { defect: f64::NAN })?;
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut flip = Matrix3::identity();
            flip[(2, 2)] = -1.0;
            r = u * flip * vt;
        }
        Self::new(r, translation)
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Group composition `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Applies the transform to a point.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Homogeneous 4x4 matrix.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Adjoint for the (rho, phi) twist ordering:
    /// `(Ad(T) xi)^ = T xi^ T^-1`.
    pub fn adjoint(&self) -> Matrix6 {
        let mut ad = Matrix6::zeros();
        let tr = skew(&self.translation) * self.rotation;
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad
    }

    /// Frobenius-norm pose equality on the homogeneous matrices.
    pub fn is_close(&self, other: &Pose, tol: f64) -> bool {
        (self.matrix() - other.matrix()).norm() < tol
    }

    /// Serializes as 12 numbers, the row-major upper 3x4 block, matching
    /// the KITTI odometry ground-truth pose format.
    pub fn to_kitti_line(&self) -> String {
        let mut fields = Vec::with_capacity(12);
        for r in 0..3 {
            for c in 0..3 {
                fields.push(format!("{}", self.rotation[(r, c)]));
            }
            fields.push(format!("{}", self.translation[r]));
        }
        fields.join(" ")
    }

    /// Parses a KITTI pose line, re-projecting the rotation onto SO(3).
    pub fn from_kitti_line(line: &str) -> Result<Self, GeometryError> {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| GeometryError::MalformedPoseLine(line.to_string()))?;
        if vals.len() != 12 || !vals.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::MalformedPoseLine(line.to_string()));
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        Self::from_matrix_reproject(rotation, translation)
    }
}

fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    if !r.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    let det = (r.determinant() - 1.0).abs();
    ortho.max(det)
}

/// Tangent-space element xi = (rho, phi) of se(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self { rho: Vector3::zeros(), phi: Vector3::zeros() }
    }

    pub fn from_vector(v: &Vector6) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn as_vector(&self) -> Vector6 {
        Vector6::new(self.rho[0], self.rho[1], self.rho[2], self.phi[0], self.phi[1], self.phi[2])
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(self.phi.iter()).all(|v| v.is_finite())
    }
}

/// Skew-symmetric matrix of a 3-vector: `skew(a) * b == a x b`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0)
}

/// Hat operator: twist to 4x4 matrix form.
pub fn hat(xi: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&xi.phi));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.rho);
    m
}

/// Vee operator: inverse of [`hat`]. Rejects matrices whose 3x3 block is
/// not skew or whose bottom row is non-zero beyond 1e-9.
pub fn vee(m: &Matrix4<f64>) -> Result<Twist, GeometryError> {
    let a = m.fixed_view::<3, 3>(0, 0);
    let sym_defect = (a + a.transpose()).norm();
    let bottom: f64 = (0..4).map(|c| m[(3, c)].abs()).sum();
    let defect = sym_defect.max(bottom);
    if defect > 1e-9 {
        return Err(GeometryError::NotHatStructured { defect });
    }
    Ok(Twist {
        rho: Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]),
        phi: Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]),
    })
}

/// Coefficients of `exp(phi^) = I + A phi^ + B phi^2` and
/// `V = I + B phi^ + C phi^2`, with series fallback near zero.
fn exp_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
        (a, b, c)
    } else {
        let a = theta.sin() / theta;
        // 1 - cos = 2 sin^2(theta/2) avoids cancellation.
        let half = (theta / 2.0).sin();
        let b = 2.0 * half * half / (theta * theta);
        let c = (1.0 - a) / (theta * theta);
        (a, b, c)
    }
}

/// Exponential map se(3) -> SE(3).
pub fn exp_map(xi: &Twist) -> Pose {
    let theta = xi.phi.norm();
    let (a, b, c) = exp_coefficients(theta);
    let phi_hat = skew(&xi.phi);
    let phi_hat2 = phi_hat * phi_hat;
    let rotation = Matrix3::identity() + phi_hat * a + phi_hat2 * b;
    let v = Matrix3::identity() + phi_hat * b + phi_hat2 * c;
    Pose { rotation, translation: v * xi.rho }
}

fn log_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta > std::f64::consts::PI - 1e-6 {
        return Err(GeometryError::LogNearPi { angle: theta });
    }
    let anti = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        Ok(anti * (0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0))
    } else {
        Ok(anti * (theta / (2.0 * theta.sin())))
    }
}

/// Logarithmic map SE(3) -> se(3). Errors on rotations at or near angle pi.
pub fn log_map(pose: &Pose) -> Result<Twist, GeometryError> {
    let phi = log_so3(&pose.rotation)?;
    let theta = phi.norm();
    let phi_hat = skew(&phi);
    let phi_hat2 = phi_hat * phi_hat;
    // V^-1 = I - 1/2 phi^ + D phi^2 with D = 1/theta^2 - (1+cos)/(2 theta sin).
    let d = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = theta / 2.0;
        1.0 / (theta * theta) - half.cos() / (2.0 * theta * half.sin())
    };
    let v_inv = Matrix3::identity() - phi_hat * 0.5 + phi_hat2 * d;
    Ok(Twist { rho: v_inv * pose.translation, phi })
}

/// Label twist of a registration estimate: `log(T_hat^-1 * T_true)`.
pub fn icp_error(t_hat: &Pose, t_true: &Pose) -> Result<Twist, GeometryError> {
    log_map(&t_hat.inverse().compose(t_true))
}

/// Symmetric positive-(semi)definite 6x6 covariance over a twist, with
/// block layout `[[S_rr, S_rp], [S_pr, S_pp]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovarianceSE3 {
    matrix: Matrix6,
}

impl CovarianceSE3 {
    /// Strictly positive definite covariance: symmetric to 1e-12 and a
    /// Cholesky factorization must succeed.
    pub fn new_pd(matrix: Matrix6) -> Result<Self, GeometryError> {
        Self::check_symmetric(&matrix)?;
        if nalgebra::Cholesky::new(matrix).is_none() {
            return Err(GeometryError::InvalidCovariance {
                reason: "triangular factorization failed (not positive definite)".into(),
            });
        }
        Ok(Self { matrix })
    }

    /// Positive semidefinite covariance (eigenvalues >= -1e-12 * scale).
    pub fn new_psd(matrix: Matrix6) -> Result<Self, GeometryError> {
        Self::check_symmetric(&matrix)?;
        let eig = nalgebra::SymmetricEigen::new(matrix);
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let floor = -1e-12 * max.max(1.0);
        if eig.eigenvalues.iter().any(|&l| l < floor) {
            return Err(GeometryError::InvalidCovariance {
                reason: format!("negative eigenvalue {:.3e}", eig.eigenvalues.min()),
            });
        }
        Ok(Self { matrix })
    }

    fn check_symmetric(matrix: &Matrix6) -> Result<(), GeometryError> {
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCovariance { reason: "non-finite entries".into() });
        }
        let asym = (matrix - matrix.transpose()).norm();
        let scale = matrix.norm().max(1.0);
        if asym > 1e-12 * scale {
            return Err(GeometryError::InvalidCovariance {
                reason: format!("asymmetry {asym:.3e}"),
            });
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self { matrix: Matrix6::zeros() }
    }

    pub fn identity() -> Self {
        Self { matrix: Matrix6::identity() }
    }

    pub fn isotropic(var_rho: f64, var_phi: f64) -> Self {
        let mut m = Matrix6::zeros();
        for i in 0..3 {
            m[(i, i)] = var_rho;
            m[(i + 3, i + 3)] = var_phi;
        }
        Self { matrix: m }
    }

    pub fn matrix(&self) -> &Matrix6 {
        &self.matrix
    }

    pub fn is_zero(&self) -> bool {
        self.matrix.iter().all(|&v| v == 0.0)
    }

    pub fn rho_rho(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn rho_phi(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 3).into_owned()
    }

    pub fn phi_rho(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(3, 0).into_owned()
    }

    pub fn phi_phi(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(3, 3).into_owned()
    }
}

/// Draws `T * exp(xi)` with `xi ~ N(0, cov)`, deterministically from the
/// seed. A zero covariance skips factorization and returns `T` exactly.
pub fn sample_perturbed_pose(
    pose: &Pose,
    cov: &CovarianceSE3,
    seed: u64,
) -> Result<Pose, GeometryError> {
    if cov.is_zero() {
        return Ok(*pose);
    }
    let chol = nalgebra::Cholesky::new(*cov.matrix()).ok_or_else(|| {
        GeometryError::InvalidCovariance { reason: "factorization failed in sampler".into() }
    })?;
    let mut rng = rng_from_seed(seed);
    let z = Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let xi = Twist::from_vector(&(chol.l() * z));
    Ok(pose.compose(&exp_map(&xi)))
}

/// Which compound-covariance approximation to use when composing poses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompoundOrder {
    Second,
    /// Second order plus the fourth-order correction terms (default).
    Fourth,
}

/// `<<A>> = A - tr(A) I`, the operator arising in E[a^ b^] expectations.
fn brace(a: &Matrix3<f64>) -> Matrix3<f64> {
    a - Matrix3::identity() * a.trace()
}

/// `E[a^ M b^]` for jointly Gaussian zero-mean (a, b) with `C = E[a b^T]`.
fn skew_expectation(m: &Matrix3<f64>, c: &Matrix3<f64>) -> Matrix3<f64> {
    let mt = m.transpose();
    let ct = c.transpose();
    mt * c.trace() + ct * m.trace() + Matrix3::identity() * ((m * c).trace() - m.trace() * c.trace())
        - mt * ct
        - ct * mt
}

/// `A_i = E[xi* xi*]` for the curly-hat operator of se(3).
fn curly_second_moment(sigma: &CovarianceSE3) -> Matrix6 {
    let g = brace(&sigma.phi_phi());
    let h = brace(&(sigma.rho_phi() + sigma.phi_rho()));
    let mut a = Matrix6::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&g);
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&h);
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&g);
    a
}

/// `B = E[xi1* S xi1*^T]` with `xi1 ~ N(0, sigma1)` and `S` fixed.
fn commutator_cross_term(sigma1: &CovarianceSE3, s: &CovarianceSE3) -> Matrix6 {
    let s_rr = s.rho_rho();
    let s_rp = s.rho_phi();
    let s_pr = s.phi_rho();
    let s_pp = s.phi_phi();
    let c_rr = sigma1.rho_rho();
    let c_rp = sigma1.rho_phi();
    let c_pr = sigma1.phi_rho();
    let c_pp = sigma1.phi_phi();

    let b_rr = -(skew_expectation(&s_rr, &c_pp)
        + skew_expectation(&s_pr, &c_rp)
        + skew_expectation(&s_rp, &c_pr)
        + skew_expectation(&s_pp, &c_rr));
    let b_rp = -(skew_expectation(&s_rp, &c_pp) + skew_expectation(&s_pp, &c_rp));
    let b_pr = -(skew_expectation(&s_pr, &c_pp) + skew_expectation(&s_pp, &c_pr));
    let b_pp = -skew_expectation(&s_pp, &c_pp);

    let mut b = Matrix6::zeros();
    b.fixed_view_mut::<3, 3>(0, 0).copy_from(&b_rr);
    b.fixed_view_mut::<3, 3>(0, 3).copy_from(&b_rp);
    b.fixed_view_mut::<3, 3>(3, 0).copy_from(&b_pr);
    b.fixed_view_mut::<3, 3>(3, 3).copy_from(&b_pp);
    b
}

fn symmetrize(m: &Matrix6) -> Matrix6 {
    (m + m.transpose()) * 0.5
}

/// Compounds the covariance of `T = T1 * T2` under right perturbations.
fn compound_pair(
    sigma1_transported: &Matrix6,
    sigma2: &Matrix6,
    order: CompoundOrder,
) -> Matrix6 {
    let second = sigma1_transported + sigma2;
    match order {
        CompoundOrder::Second => second,
        CompoundOrder::Fourth => {
            let s1 = CovarianceSE3 { matrix: *sigma1_transported };
            let s2 = CovarianceSE3 { matrix: *sigma2 };
            let a1 = curly_second_moment(&s1);
            let a2 = curly_second_moment(&s2);
            let b = commutator_cross_term(&s1, &s2);
            let fourth = b * 0.25
                + (a1 * sigma2 + sigma2 * a1.transpose() + a2 * sigma1_transported
                    + sigma1_transported * a2.transpose())
                    / 12.0;
            symmetrize(&(second + fourth))
        }
    }
}

/// Composes a chain of poses left to right and propagates the associated
/// covariances. Covariances follow the right-perturbation convention
/// `T_hat_i = T_i * exp(xi_i)` with independent `xi_i ~ N(0, Sigma_i)`.
pub fn compose_with_covariance(
    chain: &[(Pose, CovarianceSE3)],
    order: CompoundOrder,
) -> Result<(Pose, CovarianceSE3), GeometryError> {
    let (first, rest) = chain.split_first().ok_or(GeometryError::EmptyChain)?;
    let mut pose = first.0;
    let mut cov = *first.1.matrix();
    for (next_pose, next_cov) in rest {
        let ad_inv = next_pose.inverse().adjoint();
        let transported = ad_inv * cov * ad_inv.transpose();
        cov = compound_pair(&transported, next_cov.matrix(), order);
        pose = pose.compose(next_pose);
    }
    Ok((pose, CovarianceSE3 { matrix: symmetrize(&cov) }))
}

/// Convenience wrapper using the fourth-order compound.
pub fn compose_with_covariance_default(
    chain: &[(Pose, CovarianceSE3)],
) -> Result<(Pose, CovarianceSE3), GeometryError> {
    compose_with_covariance(chain, CompoundOrder::Fourth)
}

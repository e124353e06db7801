//! Classical reference estimators over the reduced-coefficient model.
//!
//! Both operate on the stacked per-user observation Y = sqrt(P_u) Q-bar
//! Phi-tilde + N-tilde. LS inverts the training matrix directly and needs
//! tau >= M(M-bar+1)/2 full-rank subframes; the LMMSE baseline works row-wise
//! with a shared per-user column second-moment matrix estimated from the
//! training split, so it stays defined at any tau. The row-wise LMMSE is a
//! stand-in for the reference two-phase scheme, whose internals are not
//! reproduced here; reports label it as such.

use crate::channel::DatasetSplit;
use crate::cx::{CMat, C64};
use crate::physics::CascadedChannelTensor;

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorError {
    /// tau below the unique-solution threshold M(M-bar+1)/2.
    Underdetermined { needed: usize, got: usize },
    /// Training matrix numerically rank deficient.
    RankDeficient { smallest: f64, largest: f64 },
}

impl std::fmt::Display for EstimatorError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorError::Underdetermined { needed, got } => {
                write!(f, "underdetermined: LS needs tau >= {needed}, got {got}")
            }
            EstimatorError::RankDeficient { smallest, largest } => {
                write!(f, "training matrix rank deficient (sv {smallest:e} vs {largest:e})")
            }
        }
    }
}

impl std::error::Error for EstimatorError {}

/// Relative singular-value tolerance for the LS pseudo-inverse.
pub const LS_RANK_TOL: f64 = 1e-10;

/// Least-squares estimate of one user's cascaded channel:
/// Q-hat = (1/sqrt(P_u)) Y Phi^H (Phi Phi^H)^-1.
pub fn ls_estimate(y: &CMat, phi_t: &CMat, p_u: f64) -> Result<CMat, EstimatorError> {
    let h_tot = phi_t.rows;
    let tau = phi_t.cols;
    assert_eq!(y.cols, tau, "observation width must match training matrix");
    if tau < h_tot {
        return Err(EstimatorError::Underdetermined { needed: h_tot, got: tau });
    }
    let svs = phi_t.singular_values();
    let largest = svs[0];
    let smallest = svs[h_tot - 1];
    if !(smallest > LS_RANK_TOL * largest) {
        return Err(EstimatorError::RankDeficient { smallest, largest });
    }
    let gram = phi_t.matmul(&phi_t.hermitian());
    let inv = gram.inverse().expect("gram matrix invertible after rank check");
    Ok(y.matmul(&phi_t.hermitian()).matmul(&inv).scale_re(1.0 / p_u.sqrt()))
}

/// Per-user column second-moment matrix E[q^H q] over the rows of Q-bar_k in
/// the training split. Estimated once and shared by every LMMSE call.
pub fn column_second_moment(train: &DatasetSplit, user: usize) -> CMat {
    let h_tot = train.samples[0].cascaded.users[user].cols;
    let nu = train.samples[0].cascaded.users[user].rows;
    let mut c = CMat::zeros(h_tot, h_tot);
    for s in &train.samples {
        let q = &s.cascaded.users[user];
        for r in 0..nu {
            for i in 0..h_tot {
                let qi = q.at(r, i).conj();
                for j in 0..h_tot {
                    c[(i, j)] += qi * q.at(r, j);
                }
            }
        }
    }
    let count = (train.samples.len() * nu) as f64;
    c.scale_re(1.0 / count)
}

/// Row-wise LMMSE estimate with a shared column prior:
/// for each receive dimension, q-hat^H = sqrt(P_u) C Phi (P_u Phi^H C Phi +
/// sigma_eff^2 I)^-1 y^H. Defined for any tau >= 1.
pub fn lmmse_estimate(
    y: &CMat,
    phi_t: &CMat,
    p_u: f64,
    sigma_eff2: f64,
    column_cov: &CMat,
) -> CMat {
    let h_tot = phi_t.rows;
    let tau = phi_t.cols;
    assert_eq!(y.cols, tau, "observation width must match training matrix");
    assert_eq!(column_cov.rows, h_tot);
    assert_eq!(column_cov.cols, h_tot);
    // guard against indefinite sample moments
    let mut c = column_cov.clone();
    for i in 0..h_tot {
        c[(i, i)] += C64::real(1e-10);
    }
    let a = c.matmul(phi_t).scale_re(p_u.sqrt()); // h_tot x tau
    let mut b = phi_t.hermitian().matmul(&c).matmul(phi_t).scale_re(p_u); // tau x tau
    for i in 0..tau {
        b[(i, i)] += C64::real(sigma_eff2);
    }
    let binv = b.inverse().expect("regularized LMMSE system is invertible");
    // rows of Y map through B^-1 A^H (B is Hermitian)
    y.matmul(&binv).matmul(&a.hermitian())
}

/// Squared-error summary of an estimate against the truth.
#[derive(Clone, Debug)]
pub struct EstimatorReport {
    pub q_hat: CascadedChannelTensor,
    pub per_user_nmse: Vec<f64>,
    /// Pilot slots consumed: KU * tau.
    pub pilot_slots: usize,
}

impl EstimatorReport {
    pub fn build(
        q_hat: CascadedChannelTensor,
        truth: &CascadedChannelTensor,
        pilot_slots: usize,
    ) -> Self {
        let per_user_nmse = q_hat
            .users
            .iter()
            .zip(&truth.users)
            .map(|(est, q)| est.sub(q).frob_norm2() / q.frob_norm2())
            .collect();
        EstimatorReport { q_hat, per_user_nmse, pilot_slots }
    }

    pub fn nmse(&self) -> f64 {
        self.per_user_nmse.iter().sum::<f64>() / self.per_user_nmse.len() as f64
    }
}

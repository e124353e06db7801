//! Group-connected reciprocal BD-RIS algebra.
//!
//! A lossless reciprocal group-connected RIS has a block-diagonal scattering
//! matrix whose blocks are unitary and symmetric. Every feasible block is the
//! Cayley-type image (I + jZ0·B)^-1 (I - jZ0·B) of a real symmetric
//! susceptance matrix B, which is how both the random initialization and the
//! learned configurations are produced. Because the blocks are symmetric,
//! only the diagonal and upper-triangular cascaded-channel coefficients are
//! identifiable; this module owns the half-vector ordering, the mapping that
//! expands it back to a full matrix, and the reduced-coefficient cascaded
//! channel built from it.

use crate::autodiff::{ComplexPair, NodeId, Tape};
use crate::cx::{C64, CMat, ZERO};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Protocol and system dimensions plus physical constants.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    /// BS antennas (N).
    pub bs_antennas: usize,
    /// RIS elements (M).
    pub ris_elements: usize,
    /// Groups in the group-connected architecture (G).
    pub groups: usize,
    /// Users (K).
    pub users: usize,
    /// Antennas per user (U).
    pub user_antennas: usize,
    /// Phase-I subframes.
    pub tau1: usize,
    /// Phase-II subframes.
    pub tau2: usize,
    /// Per-antenna uplink transmit power, linear watts.
    pub p_u: f64,
    /// Noise power, linear watts.
    pub noise_power: f64,
    /// Characteristic impedance, ohms.
    pub z0: f64,
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

impl SystemConfig {
    /// Group size M-bar = M/G.
    pub fn group_size(&self) -> usize {
        self.ris_elements / self.groups
    }

    /// N*U receive dimensions per user.
    pub fn nu(&self) -> usize {
        self.bs_antennas * self.user_antennas
    }

    /// K*U pilot streams.
    pub fn ku(&self) -> usize {
        self.users * self.user_antennas
    }

    /// Unique coefficients per group block: M-bar(M-bar+1)/2.
    pub fn group_half_len(&self) -> usize {
        let mb = self.group_size();
        mb * (mb + 1) / 2
    }

    /// Unique coefficients overall: M(M-bar+1)/2.
    pub fn total_half_len(&self) -> usize {
        self.groups * self.group_half_len()
    }

    pub fn p_u_dbm(&self) -> f64 {
        watts_to_dbm(self.p_u)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.ris_elements == 0
            || self.groups == 0
            || self.bs_antennas == 0
            || self.users == 0
            || self.user_antennas == 0
            || self.tau1 == 0
            || self.tau2 == 0
        {
            return Err("all counts must be >= 1".into());
        }
        if self.ris_elements % self.groups != 0 {
            return Err(format!(
                "ris_elements ({}) must be divisible by groups ({})",
                self.ris_elements, self.groups
            ));
        }
        if !(self.p_u > 0.0) || !(self.noise_power > 0.0) {
            return Err("p_u and noise_power must be positive".into());
        }
        if !(self.z0 > 0.0) {
            return Err("z0 must be positive".into());
        }
        Ok(())
    }

    /// Desk-scale reference configuration.
    pub fn desk_scale() -> Self {
        SystemConfig {
            bs_antennas: 4,
            ris_elements: 8,
            groups: 2,
            users: 2,
            user_antennas: 2,
            tau1: 1,
            tau2: 8,
            p_u: dbm_to_watts(4.0),
            noise_power: dbm_to_watts(0.0),
            z0: 50.0,
        }
    }

    /// Tiny configuration used by gradient checks.
    pub fn micro() -> Self {
        SystemConfig {
            bs_antennas: 2,
            ris_elements: 4,
            groups: 2,
            users: 2,
            user_antennas: 1,
            tau1: 1,
            tau2: 2,
            p_u: dbm_to_watts(4.0),
            noise_power: dbm_to_watts(0.0),
            z0: 50.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Half-vector ordering and the mapping matrix
// ---------------------------------------------------------------------------

/// Index of the pair (i, j), i <= j, in the half-vector.
///
/// Ordering is column-major over the upper triangle including the diagonal:
/// (0,0), (0,1), (1,1), (0,2), (1,2), (2,2), ...
#[inline]
pub fn half_index(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

/// Sparse encoding of the binary mapping from the half-vector of a symmetric
/// matrix to its full column-major vectorization: exactly one 1 per row.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingP {
    pub group_size: usize,
    /// For vec entry r (column-major), the half-vector index it copies.
    pub rows: Vec<usize>,
}

/// Builds the mapping for a given group size.
pub fn build_mapping(group_size: usize) -> MappingP {
    let mb = group_size;
    let mut rows = Vec::with_capacity(mb * mb);
    for j in 0..mb {
        for i in 0..mb {
            // vec entry r = j*mb + i holds matrix entry (i, j)
            let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
            rows.push(half_index(lo, hi));
        }
    }
    MappingP { group_size: mb, rows }
}

impl MappingP {
    pub fn half_len(&self) -> usize {
        self.group_size * (self.group_size + 1) / 2
    }

    /// Number of vec rows mapping to each half index (1 on the diagonal,
    /// 2 off it).
    pub fn column_multiplicities(&self) -> Vec<usize> {
        let mut mult = vec![0usize; self.half_len()];
        for &h in &self.rows {
            mult[h] += 1;
        }
        mult
    }

    /// Dense 0/1 matrix (vec length x half length) as a real tensor; the
    /// differentiable converter multiplies by this constant.
    pub fn dense(&self) -> Tensor {
        let n = self.group_size * self.group_size;
        let h = self.half_len();
        let mut data = vec![0.0; n * h];
        for (r, &c) in self.rows.iter().enumerate() {
            data[r * h + c] = 1.0;
        }
        Tensor::new(vec![n, h], data)
    }
}

/// Expands a half-vector into the full symmetric matrix.
pub fn expand_half(phi_bar: &[C64], p: &MappingP) -> CMat {
    assert_eq!(phi_bar.len(), p.half_len(), "half-vector length mismatch");
    let mb = p.group_size;
    let mut m = CMat::zeros(mb, mb);
    for j in 0..mb {
        for i in 0..mb {
            m[(i, j)] = phi_bar[p.rows[j * mb + i]];
        }
    }
    m
}

/// Real-valued variant of [`expand_half`].
pub fn expand_half_re(b_bar: &[f64], p: &MappingP) -> Vec<f64> {
    assert_eq!(b_bar.len(), p.half_len(), "half-vector length mismatch");
    let mb = p.group_size;
    let mut m = vec![0.0; mb * mb];
    for j in 0..mb {
        for i in 0..mb {
            // row-major target; symmetric so col-major vec reads identically
            m[i * mb + j] = b_bar[p.rows[j * mb + i]];
        }
    }
    m
}

/// Diagonal and upper-triangular entries of a square matrix, in the
/// half-vector ordering.
pub fn extract_half(m: &CMat) -> Vec<C64> {
    assert_eq!(m.rows, m.cols);
    let mb = m.rows;
    let mut out = vec![ZERO; mb * (mb + 1) / 2];
    for j in 0..mb {
        for i in 0..=j {
            out[half_index(i, j)] = m.at(i, j);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Susceptance parameterization
// ---------------------------------------------------------------------------

/// Half-vectorized susceptances, one column per subframe, in Siemens.
#[derive(Clone, Debug, PartialEq)]
pub struct SusceptanceParams {
    /// Shape: total_half_len x tau.
    pub values: Tensor,
}

impl SusceptanceParams {
    pub fn new(values: Tensor) -> Self {
        assert_eq!(values.shape().len(), 2);
        assert!(values.data().iter().all(|x| x.is_finite()), "susceptances must be finite");
        SusceptanceParams { values }
    }

    pub fn tau(&self) -> usize {
        self.values.shape()[1]
    }

    /// Column t as per-group half-vectors.
    pub fn column(&self, t: usize) -> Vec<f64> {
        let rows = self.values.shape()[0];
        (0..rows).map(|r| self.values.at2(r, t)).collect()
    }
}

/// Feasible BD-RIS configuration: per-group unitary symmetric blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatteringMatrix {
    pub blocks: Vec<CMat>,
}

impl ScatteringMatrix {
    pub fn group_size(&self) -> usize {
        self.blocks[0].rows
    }

    /// Frobenius distance of each block from the unitary/symmetric manifold.
    pub fn feasibility_residuals(&self) -> (f64, f64) {
        let mut worst_unitary: f64 = 0.0;
        let mut worst_symmetric: f64 = 0.0;
        for b in &self.blocks {
            let n = b.rows;
            let u = b.hermitian().matmul(b).sub(&CMat::identity(n)).frob_norm();
            let s = b.sub(&b.transpose()).frob_norm();
            worst_unitary = worst_unitary.max(u);
            worst_symmetric = worst_symmetric.max(s);
        }
        (worst_unitary, worst_symmetric)
    }

    pub fn is_feasible(&self) -> bool {
        let (u, s) = self.feasibility_residuals();
        u < 1e-9 && s < 1e-12
    }

    /// Stacked half-vector of all groups (the phi-bar column used by the
    /// reduced-coefficient model).
    pub fn half_vector(&self) -> Vec<C64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(extract_half(b));
        }
        out
    }

    /// Full block-diagonal M x M matrix.
    pub fn full(&self) -> CMat {
        let mb = self.group_size();
        let m = mb * self.blocks.len();
        let mut out = CMat::zeros(m, m);
        for (g, b) in self.blocks.iter().enumerate() {
            out.set_block(g * mb, g * mb, b);
        }
        out
    }
}

/// Converts a real symmetric susceptance block (Siemens) into the scattering
/// block (I + jZ0·B)^-1 (I - jZ0·B).
///
/// The argument of the inverse is provably nonsingular for real symmetric B,
/// so the conversion cannot fail on feasible input.
pub fn susceptance_to_scattering(b: &[f64], group_size: usize, z0: f64) -> CMat {
    assert_eq!(b.len(), group_size * group_size);
    let mb = group_size;
    let mut plus = CMat::identity(mb);
    let mut minus = CMat::identity(mb);
    for i in 0..mb {
        for j in 0..mb {
            let s = z0 * b[i * mb + j];
            plus[(i, j)] += C64::new(0.0, s);
            minus[(i, j)] = minus[(i, j)] - C64::new(0.0, s);
        }
    }
    plus.inverse().expect("I + jZ0 B is nonsingular for symmetric B").matmul(&minus)
}

/// Scattering matrix for one subframe from stacked per-group half-vectors.
pub fn scattering_from_halves(b_bar: &[f64], cfg: &SystemConfig, p: &MappingP) -> ScatteringMatrix {
    assert_eq!(b_bar.len(), cfg.total_half_len());
    let h = cfg.group_half_len();
    let blocks = (0..cfg.groups)
        .map(|g| {
            let full = expand_half_re(&b_bar[g * h..(g + 1) * h], p);
            susceptance_to_scattering(&full, cfg.group_size(), cfg.z0)
        })
        .collect();
    ScatteringMatrix { blocks }
}

/// Draws i.i.d. N(0, 1/Z0^2) half-vector susceptances for one subframe, so
/// the Cayley arguments Z0·B are of unit scale.
pub fn random_susceptance_halves(cfg: &SystemConfig, rng: &mut Rng) -> Vec<f64> {
    (0..cfg.total_half_len()).map(|_| rng.normal() / cfg.z0).collect()
}

/// Random feasible scattering matrix; deterministic given the seed.
pub fn random_feasible_scattering(cfg: &SystemConfig, seed: u64) -> ScatteringMatrix {
    let mut rng = Rng::new(seed);
    let halves = random_susceptance_halves(cfg, &mut rng);
    scattering_from_halves(&halves, cfg, &build_mapping(cfg.group_size()))
}

/// Random susceptance matrix of width tau plus the per-subframe scattering
/// matrices it converts to. Used for Phase-I initialization and for the
/// classical baselines' random training patterns.
pub fn random_training_set(
    cfg: &SystemConfig,
    tau: usize,
    seed: u64,
) -> (SusceptanceParams, Vec<ScatteringMatrix>) {
    let p = build_mapping(cfg.group_size());
    let h_tot = cfg.total_half_len();
    let mut values = Tensor::zeros(vec![h_tot, tau]);
    let mut mats = Vec::with_capacity(tau);
    for t in 0..tau {
        let mut rng = Rng::from_tags(seed, &[t as u64]);
        let halves = random_susceptance_halves(cfg, &mut rng);
        for (r, &v) in halves.iter().enumerate() {
            values.data_mut()[r * tau + t] = v;
        }
        mats.push(scattering_from_halves(&halves, cfg, &p));
    }
    (SusceptanceParams::new(values), mats)
}

/// Scattering matrices for every column of a susceptance matrix.
pub fn scattering_for_all_subframes(
    susc: &SusceptanceParams,
    cfg: &SystemConfig,
) -> Vec<ScatteringMatrix> {
    let p = build_mapping(cfg.group_size());
    (0..susc.tau()).map(|t| scattering_from_halves(&susc.column(t), cfg, &p)).collect()
}

// ---------------------------------------------------------------------------
// Differentiable converter
// ---------------------------------------------------------------------------

/// Differentiable Cayley map on the tape. `scaled_b` is the dimensionless
/// Z0·B block (group_size x group_size, symmetric); gradients flow back into
/// it through the complex inverse and product.
pub fn cayley_scattering_graph(tape: &mut Tape, scaled_b: NodeId) -> ComplexPair {
    let mb = tape.value(scaled_b).shape()[0];
    assert_eq!(tape.value(scaled_b).shape(), &[mb, mb]);
    let eye = tape.constant(Tensor::eye(mb));
    let neg = tape.neg(scaled_b);
    let plus = tape.complex(eye, scaled_b);
    let minus = tape.complex(eye, neg);
    let inv = tape.cinverse(plus).expect("I + jZ0 B is nonsingular for symmetric B");
    tape.cmatmul(inv, minus)
}

/// Expands an on-tape half-vector (group_half_len x 1) to the symmetric
/// block via the constant mapping matrix.
pub fn expand_half_graph(tape: &mut Tape, half: NodeId, p_dense: NodeId, group_size: usize) -> NodeId {
    let v = tape.matmul(p_dense, half);
    tape.reshape(v, vec![group_size, group_size])
}

// ---------------------------------------------------------------------------
// Channels and the reduced-coefficient cascaded channel
// ---------------------------------------------------------------------------

/// RIS-BS and user-RIS channels for one coherence block.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPair {
    /// N x M.
    pub h_it: CMat,
    /// M x KU; user k occupies columns k*U .. (k+1)*U.
    pub h_ri: CMat,
}

impl ChannelPair {
    pub fn user_slice(&self, cfg: &SystemConfig, k: usize) -> CMat {
        self.h_ri.block(0, k * cfg.user_antennas, self.h_ri.rows, cfg.user_antennas)
    }
}

/// Reduced-coefficient cascaded channel: per user an NU x M(M-bar+1)/2 matrix
/// whose group blocks are concatenated along columns.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadedChannelTensor {
    pub users: Vec<CMat>,
}

impl CascadedChannelTensor {
    pub fn frob_norm2(&self) -> f64 {
        self.users.iter().map(|q| q.frob_norm2()).sum()
    }

    /// Total real-valued coefficient count N*U*K*M*(M-bar+1).
    pub fn total_real_coeffs(&self) -> usize {
        2 * self.users.iter().map(|q| q.rows * q.cols).sum::<usize>()
    }
}

/// Builds the reduced-coefficient cascaded channel by gathering and summing
/// the Kronecker columns that share a scattering coefficient.
pub fn assemble_cascaded(
    ch: &ChannelPair,
    p: &MappingP,
    cfg: &SystemConfig,
) -> CascadedChannelTensor {
    let n = cfg.bs_antennas;
    let u = cfg.user_antennas;
    let mb = cfg.group_size();
    let nu = n * u;
    let h = cfg.group_half_len();
    assert_eq!(p.group_size, mb);
    assert_eq!(ch.h_it.rows, n);
    assert_eq!(ch.h_it.cols, cfg.ris_elements);
    assert_eq!(ch.h_ri.rows, cfg.ris_elements);
    assert_eq!(ch.h_ri.cols, cfg.ku());

    let mut users = Vec::with_capacity(cfg.users);
    for k in 0..cfg.users {
        let mut q = CMat::zeros(nu, cfg.total_half_len());
        for g in 0..cfg.groups {
            let col_base = g * h;
            // Kronecker column for phi entry (i, j): row_j(H_RI,k,g)^T (x) col_i(H_IT,g)
            let add_kron = |i: usize, j: usize, dst: usize, q: &mut CMat| {
                for a in 0..u {
                    let ri = ch.h_ri.at(g * mb + j, k * u + a);
                    for b in 0..n {
                        let it = ch.h_it.at(b, g * mb + i);
                        q[(a * n + b, dst)] += ri * it;
                    }
                }
            };
            for j in 0..mb {
                for i in 0..=j {
                    let dst = col_base + half_index(i, j);
                    add_kron(i, j, dst, &mut q);
                    if i != j {
                        add_kron(j, i, dst, &mut q);
                    }
                }
            }
        }
        users.push(q);
    }
    CascadedChannelTensor { users }
}

/// H_IT . blkdiag(Phi) . H_RI,k computed directly from the physical model.
pub fn effective_channel(ch: &ChannelPair, scat: &ScatteringMatrix, cfg: &SystemConfig, k: usize) -> CMat {
    let mb = cfg.group_size();
    let mut sum = CMat::zeros(cfg.bs_antennas, cfg.user_antennas);
    for (g, block) in scat.blocks.iter().enumerate() {
        let h_it_g = ch.h_it.block(0, g * mb, cfg.bs_antennas, mb);
        let h_ri_g = ch.h_ri.block(g * mb, k * cfg.user_antennas, mb, cfg.user_antennas);
        sum = sum.add(&h_it_g.matmul(block).matmul(&h_ri_g));
    }
    sum
}

/// The same effective channel through the reduced-coefficient model:
/// unvec(Q-bar_k . phi-bar).
pub fn effective_channel_reduced(
    q_k: &CMat,
    scat: &ScatteringMatrix,
    cfg: &SystemConfig,
) -> CMat {
    let phi_bar = scat.half_vector();
    let phim = CMat { rows: phi_bar.len(), cols: 1, data: phi_bar };
    let v = q_k.matmul(&phim);
    CMat::unvec_col_major(&v.data, cfg.bs_antennas, cfg.user_antennas)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_channels(cfg: &SystemConfig, seed: u64) -> ChannelPair {
        let mut rng = Rng::new(seed);
        let h_it = CMat::from_fn(cfg.bs_antennas, cfg.ris_elements, |_, _| {
            let (a, b) = rng.normal_pair();
            C64::new(a, b)
        });
        let h_ri = CMat::from_fn(cfg.ris_elements, cfg.ku(), |_, _| {
            let (a, b) = rng.normal_pair();
            C64::new(a, b)
        });
        ChannelPair { h_it, h_ri }
    }

    #[test]
    fn mapping_m1() {
        let p = build_mapping(1);
        assert_eq!(p.rows, vec![0]);
        assert_eq!(p.column_multiplicities(), vec![1]);
    }

    #[test]
    fn mapping_m2_rows() {
        // vec order (0,0),(1,0),(0,1),(1,1) -> half indices 0,1,1,2
        let p = build_mapping(2);
        assert_eq!(p.rows, vec![0, 1, 1, 2]);
    }

    #[test]
    fn mapping_m3_multiplicities_brute_force() {
        let p = build_mapping(3);
        assert_eq!(p.rows.len(), 9);
        // brute-force enumeration of all (i, j) pairs
        let mut expected = vec![0usize; 6];
        for j in 0..3 {
            for i in 0..3 {
                let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
                expected[half_index(lo, hi)] += 1;
            }
        }
        assert_eq!(p.column_multiplicities(), expected);
        assert_eq!(expected, vec![1, 2, 1, 2, 2, 1]);
    }

    #[test]
    fn expand_half_m2() {
        let p = build_mapping(2);
        let phi = [C64::real(1.0), C64::real(2.0), C64::real(3.0)];
        let m = expand_half(&phi, &p);
        assert_eq!(m.at(0, 0), C64::real(1.0));
        assert_eq!(m.at(0, 1), C64::real(2.0));
        assert_eq!(m.at(1, 0), C64::real(2.0));
        assert_eq!(m.at(1, 1), C64::real(3.0));
    }

    #[test]
    fn expand_extract_roundtrip_exact() {
        let p = build_mapping(4);
        let mut rng = Rng::new(5);
        let phi: Vec<C64> = (0..p.half_len())
            .map(|_| {
                let (a, b) = rng.normal_pair();
                C64::new(a, b)
            })
            .collect();
        let m = expand_half(&phi, &p);
        // symmetric to machine zero
        assert_eq!(m.sub(&m.transpose()).frob_norm(), 0.0);
        assert_eq!(extract_half(&m), phi);
    }

    #[test]
    fn cayley_zero_susceptance_is_identity() {
        let phi = susceptance_to_scattering(&[0.0; 9], 3, 50.0);
        assert!(phi.sub(&CMat::identity(3)).frob_norm() < 1e-14);
    }

    #[test]
    fn cayley_scalar_analytic() {
        // 1x1, b = 1/Z0: phi = (1 - j)/(1 + j) = -j
        let phi = susceptance_to_scattering(&[1.0 / 50.0], 1, 50.0);
        assert!((phi.at(0, 0).re).abs() < 1e-14);
        assert!((phi.at(0, 0).im + 1.0).abs() < 1e-14);
    }

    #[test]
    fn cayley_feasibility_1000_draws() {
        let cfg = SystemConfig {
            ris_elements: 4,
            groups: 1,
            ..SystemConfig::desk_scale()
        };
        let p = build_mapping(4);
        let mut worst_u: f64 = 0.0;
        let mut worst_s: f64 = 0.0;
        for seed in 0..1000u64 {
            let mut rng = Rng::new(seed);
            let halves = random_susceptance_halves(&cfg, &mut rng);
            let scat = scattering_from_halves(&halves, &cfg, &p);
            let (u, s) = scat.feasibility_residuals();
            worst_u = worst_u.max(u);
            worst_s = worst_s.max(s);
        }
        assert!(worst_u < 1e-9, "unitarity residual {worst_u}");
        assert!(worst_s < 1e-12, "symmetry residual {worst_s}");
    }

    #[test]
    fn random_feasible_deterministic() {
        let cfg = SystemConfig::desk_scale();
        let a = random_feasible_scattering(&cfg, 7);
        let b = random_feasible_scattering(&cfg, 7);
        assert_eq!(a, b);
        let c = random_feasible_scattering(&cfg, 8);
        let dist: f64 = a
            .blocks
            .iter()
            .zip(&c.blocks)
            .map(|(x, y)| x.sub(y).frob_norm2())
            .sum();
        assert!(dist > 0.0);
        assert!(a.is_feasible());
    }

    #[test]
    fn cascaded_scalar_case() {
        // N = U = K = M = M-bar = 1: Q-bar = h_RI * h_IT
        let cfg = SystemConfig {
            bs_antennas: 1,
            ris_elements: 1,
            groups: 1,
            users: 1,
            user_antennas: 1,
            ..SystemConfig::desk_scale()
        };
        let ch = random_channels(&cfg, 3);
        let q = assemble_cascaded(&ch, &build_mapping(1), &cfg);
        let want = ch.h_it.at(0, 0) * ch.h_ri.at(0, 0);
        assert!((q.users[0].at(0, 0) - want).abs() < 1e-15);
    }

    #[test]
    fn cascaded_central_identity_100_draws() {
        let cfg = SystemConfig {
            bs_antennas: 4,
            ris_elements: 8,
            groups: 2,
            users: 2,
            user_antennas: 2,
            ..SystemConfig::desk_scale()
        };
        let p = build_mapping(cfg.group_size());
        for trial in 0..100u64 {
            let ch = random_channels(&cfg, 1000 + trial);
            let scat = random_feasible_scattering(&cfg, 2000 + trial);
            let q = assemble_cascaded(&ch, &p, &cfg);
            for k in 0..cfg.users {
                let direct = effective_channel(&ch, &scat, &cfg, k);
                let reduced = effective_channel_reduced(&q.users[k], &scat, &cfg);
                let rel = direct.sub(&reduced).frob_norm() / direct.frob_norm();
                assert!(rel < 1e-12, "trial {trial} user {k}: rel {rel}");
            }
        }
    }

    #[test]
    fn cascaded_offdiag_column_is_kron_sum() {
        // explicit Kronecker enumeration on group size 2
        let cfg = SystemConfig {
            bs_antennas: 2,
            ris_elements: 2,
            groups: 1,
            users: 1,
            user_antennas: 2,
            ..SystemConfig::desk_scale()
        };
        let ch = random_channels(&cfg, 77);
        let p = build_mapping(2);
        let q = assemble_cascaded(&ch, &p, &cfg);
        let n = cfg.bs_antennas;
        let u = cfg.user_antennas;
        // full Kronecker H_RI^T (x) H_IT, columns indexed by vec (i, j)
        let h_ri_t = ch.h_ri.transpose();
        let mut kron = CMat::zeros(n * u, 4);
        for j in 0..2 {
            for i in 0..2 {
                let c = j * 2 + i;
                for a in 0..u {
                    for b in 0..n {
                        kron[(a * n + b, c)] = h_ri_t.at(a, j) * ch.h_it.at(b, i);
                    }
                }
            }
        }
        // off-diagonal half column (0,1) = vec cols (0,1) + (1,0)
        for r in 0..n * u {
            let want = kron.at(r, 2) + kron.at(r, 1);
            assert!((q.users[0].at(r, half_index(0, 1)) - want).abs() < 1e-13);
            // diagonal columns copy through
            assert!((q.users[0].at(r, half_index(0, 0)) - kron.at(r, 0)).abs() < 1e-13);
            assert!((q.users[0].at(r, half_index(1, 1)) - kron.at(r, 3)).abs() < 1e-13);
        }
    }

    #[test]
    fn cayley_graph_matches_plain_and_gradchecks() {
        use crate::autodiff::{gradcheck, GRADCHECK_STEP, GRADCHECK_TOL};
        let mb = 4;
        let z0 = 50.0;
        let mut rng = Rng::new(99);
        // symmetric scaled susceptance. The graph path takes Z0*B directly.
        let mut s = vec![0.0; mb * mb];
        for j in 0..mb {
            for i in 0..=j {
                let v = rng.normal();
                s[i * mb + j] = v;
                s[j * mb + i] = v;
            }
        }
        let b: Vec<f64> = s.iter().map(|x| x / z0).collect();
        let plain = susceptance_to_scattering(&b, mb, z0);

        let mut tape = Tape::new();
        let sn = tape.constant(Tensor::new(vec![mb, mb], s.clone()));
        let phi = cayley_scattering_graph(&mut tape, sn);
        for i in 0..mb {
            for j in 0..mb {
                assert!((tape.value(phi.re).at2(i, j) - plain.at(i, j).re).abs() < 1e-12);
                assert!((tape.value(phi.im).at2(i, j) - plain.at(i, j).im).abs() < 1e-12);
            }
        }

        // gradient flow: d ||Phi||_F^2 / d S matches finite differences
        let rep = gradcheck(
            |t, ids| {
                let phi = cayley_scattering_graph(t, ids[0]);
                let rr = t.mul(phi.re, phi.re);
                let ii = t.mul(phi.im, phi.im);
                let s = t.add(rr, ii);
                t.sum(s)
            },
            &[Tensor::new(vec![mb, mb], s)],
            GRADCHECK_STEP,
            GRADCHECK_TOL,
        );
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = SystemConfig::desk_scale();
        assert!(cfg.validate().is_ok());
        cfg.groups = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
    }
}

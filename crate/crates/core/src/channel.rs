//! Synthetic correlated channel generation and dataset assembly.
//!
//! Clustered geometric model over uniform linear arrays with half-wavelength
//! spacing. The RIS-BS channel is Rician with a fixed scenario geometry
//! (LoS direction and cluster/subpath angles drawn once per scenario) and
//! per-sample small-scale gains. User-RIS channels mix shared clusters
//! (centers common to all users of a sample, so users are statistically
//! correlated) with private clusters, plus a dominant steering term whose
//! weight depends on the per-(sample, user) LoS state. All channels are
//! normalized to unit average element energy, so transmit and noise power
//! alone set the SNR.

use crate::cx::{C64, CMat};
use crate::physics::{assemble_cascaded, build_mapping, CascadedChannelTensor, ChannelPair, SystemConfig};
use crate::protocol::PhaseObservation;
use crate::rng::Rng;

const TAG_IT_GEOMETRY: u64 = 0x49545f47; // "IT_G"
const TAG_IT_GAINS: u64 = 0x49545f53; // "IT_S"
const TAG_RI_SHARED: u64 = 0x52495f43; // "RI_C"
const TAG_RI_USER: u64 = 0x52495f55; // "RI_U"

/// Knobs of the clustered geometric model.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelModelConfig {
    /// Scenario identity: fixes the RIS-BS geometry shared by every split.
    pub geometry_seed: u64,
    /// NLoS clusters in the RIS-BS channel.
    pub it_clusters: usize,
    /// User-side clusters with centers common to all users of a sample.
    pub shared_clusters: usize,
    /// Additional clusters private to each user.
    pub private_clusters: usize,
    /// Subpaths per cluster.
    pub subpaths: usize,
    /// Rician factor of the dominant term in the LoS state.
    pub rician_k_los: f64,
    /// Rician factor of the dominant term in the NLoS state (usually 0).
    pub rician_k_nlos: f64,
    /// Per-cluster angular std of subpath offsets, radians.
    pub angle_spread: f64,
    /// Probability that a (sample, user) pair is in the LoS state.
    pub p_los: f64,
}

impl ChannelModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.it_clusters == 0 || self.shared_clusters + self.private_clusters == 0 {
            return Err("cluster counts must be >= 1".into());
        }
        if self.subpaths == 0 {
            return Err("subpaths must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_los) {
            return Err("p_los must lie in [0, 1]".into());
        }
        if self.rician_k_los < 0.0 || self.rician_k_nlos < 0.0 {
            return Err("Rician factors must be >= 0".into());
        }
        if self.angle_spread < 0.0 {
            return Err("angle_spread must be >= 0".into());
        }
        Ok(())
    }

    /// Indoor-like preset: rich scattering, weak dominant component.
    pub fn preset_a() -> Self {
        ChannelModelConfig {
            geometry_seed: 0xA,
            it_clusters: 4,
            shared_clusters: 2,
            private_clusters: 2,
            subpaths: 4,
            rician_k_los: 2.0,
            rician_k_nlos: 0.0,
            angle_spread: 0.12,
            p_los: 0.5,
        }
    }

    /// Street-canyon-like preset: strong geometric components, fewer clusters.
    pub fn preset_b() -> Self {
        ChannelModelConfig {
            geometry_seed: 0xB,
            it_clusters: 2,
            shared_clusters: 2,
            private_clusters: 1,
            subpaths: 4,
            rician_k_los: 6.0,
            rician_k_nlos: 0.0,
            angle_spread: 0.05,
            p_los: 0.5,
        }
    }
}

impl Default for ChannelModelConfig {
    fn default() -> Self {
        ChannelModelConfig::preset_b()
    }
}

/// Steering vector of an N-element half-wavelength ULA.
fn steering(n: usize, theta: f64) -> Vec<C64> {
    let s = std::f64::consts::PI * theta.sin();
    (0..n).map(|i| C64::cis(s * i as f64)).collect()
}

fn uniform_angle(rng: &mut Rng) -> f64 {
    rng.uniform_in(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2)
}

/// adds g * a b^T to m
fn add_outer(m: &mut CMat, g: C64, a: &[C64], b: &[C64]) {
    for (i, &ai) in a.iter().enumerate() {
        let gai = g * ai;
        for (j, &bj) in b.iter().enumerate() {
            m[(i, j)] += gai * bj;
        }
    }
}

/// Scenario-level RIS-BS geometry: steering factors drawn once per
/// `geometry_seed` and reused by every sample and split.
#[derive(Clone, Debug)]
pub struct ItGeometry {
    bs_los: Vec<C64>,
    ris_los: Vec<C64>,
    /// One (BS-side, RIS-side) steering pair per cluster subpath.
    paths: Vec<(Vec<C64>, Vec<C64>)>,
}

impl ItGeometry {
    pub fn build(cfg: &SystemConfig, model: &ChannelModelConfig) -> Self {
        let mut rng = Rng::from_tags(model.geometry_seed, &[TAG_IT_GEOMETRY]);
        let bs_los = steering(cfg.bs_antennas, uniform_angle(&mut rng));
        let ris_los = steering(cfg.ris_elements, uniform_angle(&mut rng));
        let mut paths = Vec::with_capacity(model.it_clusters * model.subpaths);
        for _ in 0..model.it_clusters {
            let c_bs = uniform_angle(&mut rng);
            let c_ris = uniform_angle(&mut rng);
            for _ in 0..model.subpaths {
                let bs = steering(cfg.bs_antennas, c_bs + model.angle_spread * rng.normal());
                let ris = steering(cfg.ris_elements, c_ris + model.angle_spread * rng.normal());
                paths.push((bs, ris));
            }
        }
        ItGeometry { bs_los, ris_los, paths }
    }
}

/// RIS-BS channel sample (N x M): fixed LoS outer product plus cluster terms
/// with per-sample gains, normalized so E[||H||_F^2] = N*M.
pub fn sample_h_it(
    cfg: &SystemConfig,
    model: &ChannelModelConfig,
    geom: &ItGeometry,
    sample_seed: u64,
) -> CMat {
    let mut rng = Rng::from_tags(sample_seed, &[TAG_IT_GAINS]);
    let kappa = model.rician_k_los;
    let mut h = CMat::zeros(cfg.bs_antennas, cfg.ris_elements);
    let los_w = (kappa / (1.0 + kappa)).sqrt();
    add_outer(&mut h, C64::real(los_w), &geom.bs_los, &geom.ris_los);
    let nlos_w = (1.0 / (1.0 + kappa)).sqrt() / (geom.paths.len() as f64).sqrt();
    for (bs, ris) in &geom.paths {
        let (gr, gi) = rng.normal_pair();
        // CN(0,1) gain
        let g = C64::new(gr, gi).scale(std::f64::consts::FRAC_1_SQRT_2 * nlos_w);
        add_outer(&mut h, g, bs, ris);
    }
    h
}

/// User-RIS channel sample for user k (M x U).
///
/// Cluster centers for the first `shared_clusters` clusters come from a
/// stream keyed only on the sample seed, so every user of the sample sees the
/// same shared directions; subpath offsets and gains are per-user.
pub fn sample_h_ri(
    cfg: &SystemConfig,
    model: &ChannelModelConfig,
    user: usize,
    sample_seed: u64,
) -> CMat {
    let mut shared_rng = Rng::from_tags(sample_seed, &[TAG_RI_SHARED]);
    let shared_centers: Vec<(f64, f64)> = (0..model.shared_clusters)
        .map(|_| (uniform_angle(&mut shared_rng), uniform_angle(&mut shared_rng)))
        .collect();

    let mut rng = Rng::from_tags(sample_seed, &[TAG_RI_USER, user as u64]);
    let los = rng.uniform() < model.p_los;
    let los_theta = uniform_angle(&mut rng);
    let los_phi = uniform_angle(&mut rng);
    let kappa = if los { model.rician_k_los } else { model.rician_k_nlos };

    let mut h = CMat::zeros(cfg.ris_elements, cfg.user_antennas);
    let los_w = (kappa / (1.0 + kappa)).sqrt();
    if los_w > 0.0 {
        add_outer(
            &mut h,
            C64::real(los_w),
            &steering(cfg.ris_elements, los_theta),
            &steering(cfg.user_antennas, los_phi),
        );
    }
    let total = model.shared_clusters + model.private_clusters;
    let nlos_w = (1.0 / (1.0 + kappa)).sqrt() / ((total * model.subpaths) as f64).sqrt();
    for c in 0..total {
        let (ris_center, user_center) = if c < model.shared_clusters {
            shared_centers[c]
        } else {
            (uniform_angle(&mut rng), uniform_angle(&mut rng))
        };
        for _ in 0..model.subpaths {
            let ris = steering(cfg.ris_elements, ris_center + model.angle_spread * rng.normal());
            let usr = steering(cfg.user_antennas, user_center + model.angle_spread * rng.normal());
            let (gr, gi) = rng.normal_pair();
            let g = C64::new(gr, gi).scale(std::f64::consts::FRAC_1_SQRT_2 * nlos_w);
            add_outer(&mut h, g, &ris, &usr);
        }
    }
    h
}

/// Draws the complete channel pair for one sample.
pub fn sample_channels(
    cfg: &SystemConfig,
    model: &ChannelModelConfig,
    geom: &ItGeometry,
    sample_seed: u64,
) -> ChannelPair {
    let h_it = sample_h_it(cfg, model, geom, sample_seed);
    let mut h_ri = CMat::zeros(cfg.ris_elements, cfg.ku());
    for k in 0..cfg.users {
        let hk = sample_h_ri(cfg, model, k, sample_seed);
        h_ri.set_block(0, k * cfg.user_antennas, &hk);
    }
    ChannelPair { h_it, h_ri }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Validation,
    Test,
}

impl Role {
    pub fn code(self) -> u32 {
        match self {
            Role::Train => 0,
            Role::Validation => 1,
            Role::Test => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Role> {
        match c {
            0 => Some(Role::Train),
            1 => Some(Role::Validation),
            2 => Some(Role::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "val",
            Role::Test => "test",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Role::Train),
            "val" | "validation" => Ok(Role::Validation),
            "test" => Ok(Role::Test),
            other => Err(format!("unknown role '{other}' (expected train|val|test)")),
        }
    }
}

/// One dataset sample: the drawn channels and the precomputed label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub channels: ChannelPair,
    pub cascaded: CascadedChannelTensor,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub system: SystemConfig,
    pub model: ChannelModelConfig,
    pub role: Role,
    pub seed_base: u64,
    pub samples: Vec<Sample>,
}

/// Generates `count` samples with per-sample seed `seed_base + index`.
///
/// Distinct splits must use seed bases at least `count` apart so their
/// per-sample streams never overlap.
pub fn build_dataset(
    cfg: &SystemConfig,
    model: &ChannelModelConfig,
    count: usize,
    role: Role,
    seed_base: u64,
) -> Result<DatasetSplit, String> {
    if count == 0 {
        return Err("dataset sample count must be >= 1".into());
    }
    cfg.validate()?;
    model.validate()?;
    let geom = ItGeometry::build(cfg, model);
    let p = build_mapping(cfg.group_size());
    let samples = (0..count)
        .map(|i| {
            let channels = sample_channels(cfg, model, &geom, seed_base + i as u64);
            let cascaded = assemble_cascaded(&channels, &p, cfg);
            Sample { channels, cascaded }
        })
        .collect();
    Ok(DatasetSplit { system: cfg.clone(), model: model.clone(), role, seed_base, samples })
}

/// Normalization statistics frozen at training time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    /// Mean over all real/imag Phase-I pilot entries of the training split.
    pub pilot_mean: f64,
    /// Std over the same entries.
    pub pilot_std: f64,
    /// Average ||Q-bar||_F^2 / N_tot over the training split.
    pub label_gain: f64,
}

/// Computes pilot standardization and label gain from the training split.
/// The same statistics standardize validation/test observations; they are
/// never recomputed.
pub fn compute_norm_stats(
    train: &DatasetSplit,
    observations: &[PhaseObservation],
) -> Result<NormStats, String> {
    if train.samples.is_empty() || observations.is_empty() {
        return Err("normalization statistics need a nonempty training split".into());
    }
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for obs in observations {
        for m in &obs.per_user {
            for z in &m.data {
                sum += z.re + z.im;
                sq += z.re * z.re + z.im * z.im;
                n += 2;
            }
        }
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let std = var.max(0.0).sqrt();
    if !(std > 0.0) {
        return Err("pilot observations are degenerate (zero variance)".into());
    }
    let mut gain = 0.0;
    for s in &train.samples {
        gain += s.cascaded.frob_norm2() / s.cascaded.total_real_coeffs() as f64;
    }
    let label_gain = gain / train.samples.len() as f64;
    if !(label_gain > 0.0) {
        return Err("label gain is degenerate (zero-channel training split)".into());
    }
    Ok(NormStats { pilot_mean: mean, pilot_std: std, label_gain })
}

// ---------------------------------------------------------------------------
// Correlation diagnostics (drive the trend tests)
// ---------------------------------------------------------------------------

/// Mean cosine of the principal angles between the RIS-side column spaces of
/// two users, averaged over samples. Larger means stronger inter-user
/// correlation.
pub fn mean_interuser_subspace_cosine(
    cfg: &SystemConfig,
    model: &ChannelModelConfig,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for i in 0..samples {
        let s = seed + i as u64;
        let h0 = sample_h_ri(cfg, model, 0, s);
        let h1 = sample_h_ri(cfg, model, 1, s);
        let q0 = h0.orthonormal_columns(1e-9);
        let q1 = h1.orthonormal_columns(1e-9);
        if q0.cols == 0 || q1.cols == 0 {
            continue;
        }
        let svs = q0.hermitian().matmul(&q1).singular_values();
        for s in svs {
            acc += s.min(1.0);
            cnt += 1;
        }
    }
    acc / cnt as f64
}

/// Mean magnitude of the correlation between adjacent RIS elements of the
/// user-RIS channel. Larger means stronger intra-channel spatial correlation.
pub fn mean_adjacent_element_correlation(
    cfg: &SystemConfig,
    model: &ChannelModelConfig,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..samples {
        let h = sample_h_ri(cfg, model, 0, seed + i as u64);
        let mut cross = C64::new(0.0, 0.0);
        let mut power = 0.0;
        for u in 0..cfg.user_antennas {
            for m in 0..cfg.ris_elements - 1 {
                cross += h.at(m + 1, u) * h.at(m, u).conj();
                power += h.at(m, u).abs2();
            }
        }
        // magnitude per sample: the cross-sample phase is immaterial
        acc += cross.abs() / power;
    }
    acc / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::effective_channel;
    use crate::physics::random_feasible_scattering;

    fn desk() -> (SystemConfig, ChannelModelConfig) {
        (SystemConfig::desk_scale(), ChannelModelConfig::default())
    }

    #[test]
    fn h_it_pure_los_limit_is_rank_one() {
        let (cfg, mut model) = desk();
        model.rician_k_los = 1e12;
        let geom = ItGeometry::build(&cfg, &model);
        let h = sample_h_it(&cfg, &model, &geom, 1);
        let svs = h.singular_values();
        assert!(svs[0] > 1e-3);
        assert!(svs[1] / svs[0] < 1e-5, "second singular value {} vs {}", svs[1], svs[0]);
    }

    #[test]
    fn h_it_energy_normalized() {
        let (cfg, model) = desk();
        let geom = ItGeometry::build(&cfg, &model);
        let n = 10_000;
        let mut acc = 0.0;
        for i in 0..n {
            acc += sample_h_it(&cfg, &model, &geom, i as u64).frob_norm2();
        }
        let ratio = acc / n as f64 / (cfg.bs_antennas * cfg.ris_elements) as f64;
        assert!((0.95..=1.05).contains(&ratio), "energy ratio {ratio}");
    }

    #[test]
    fn h_ri_energy_normalized() {
        let (cfg, model) = desk();
        let n = 10_000;
        let mut acc = 0.0;
        for i in 0..n {
            acc += sample_h_ri(&cfg, &model, 0, i as u64).frob_norm2();
        }
        let ratio = acc / n as f64 / (cfg.ris_elements * cfg.user_antennas) as f64;
        assert!((0.95..=1.05).contains(&ratio), "energy ratio {ratio}");
    }

    #[test]
    fn determinism_bitwise() {
        let (cfg, model) = desk();
        let geom = ItGeometry::build(&cfg, &model);
        let a = sample_h_it(&cfg, &model, &geom, 42);
        let b = sample_h_it(&cfg, &model, &geom, 42);
        assert_eq!(a, b);
        let c = sample_h_ri(&cfg, &model, 1, 42);
        let d = sample_h_ri(&cfg, &model, 1, 42);
        assert_eq!(c, d);
    }

    #[test]
    fn shared_clusters_raise_interuser_correlation() {
        let (cfg, mut model) = desk();
        model.p_los = 0.0;
        model.shared_clusters = 2;
        model.private_clusters = 1;
        let with_shared = mean_interuser_subspace_cosine(&cfg, &model, 1500, 10);
        model.shared_clusters = 0;
        model.private_clusters = 3;
        let without = mean_interuser_subspace_cosine(&cfg, &model, 1500, 10);
        assert!(
            with_shared > without,
            "shared {with_shared} should exceed private-only {without}"
        );
    }

    #[test]
    fn angle_spread_lowers_spatial_correlation() {
        let (cfg, mut model) = desk();
        model.p_los = 0.0;
        model.angle_spread = 0.02;
        let tight = mean_adjacent_element_correlation(&cfg, &model, 1500, 77);
        model.angle_spread = 0.5;
        let wide = mean_adjacent_element_correlation(&cfg, &model, 1500, 77);
        assert!(tight > wide, "tight {tight} should exceed wide {wide}");
    }

    #[test]
    fn single_path_limit_rank_one() {
        let (cfg, mut model) = desk();
        model.p_los = 0.0;
        model.shared_clusters = 1;
        model.private_clusters = 0;
        model.subpaths = 1;
        let h = sample_h_ri(&cfg, &model, 0, 9);
        let svs = h.singular_values();
        assert!(svs[1] / svs[0] < 1e-10);
    }

    #[test]
    fn dataset_rejects_zero_count() {
        let (cfg, model) = desk();
        assert!(build_dataset(&cfg, &model, 0, Role::Train, 0).is_err());
    }

    #[test]
    fn dataset_labels_match_channels() {
        let (cfg, model) = desk();
        let split = build_dataset(&cfg, &model, 4, Role::Test, 100).unwrap();
        let p = build_mapping(cfg.group_size());
        for s in &split.samples {
            let q = assemble_cascaded(&s.channels, &p, &cfg);
            assert_eq!(q, s.cascaded);
        }
        // and the labels reproduce the physical effective channel
        let scat = random_feasible_scattering(&cfg, 5);
        for s in &split.samples {
            for k in 0..cfg.users {
                let direct = effective_channel(&s.channels, &scat, &cfg, k);
                let reduced = crate::physics::effective_channel_reduced(&s.cascaded.users[k], &scat, &cfg);
                assert!(direct.sub(&reduced).frob_norm() / direct.frob_norm() < 1e-12);
            }
        }
    }

    #[test]
    fn disjoint_seed_bases_share_no_samples() {
        let (cfg, model) = desk();
        let a = build_dataset(&cfg, &model, 8, Role::Train, 0).unwrap();
        let b = build_dataset(&cfg, &model, 8, Role::Validation, 1_000).unwrap();
        for sa in &a.samples {
            for sb in &b.samples {
                assert_ne!(sa.channels, sb.channels);
            }
        }
    }

    #[test]
    fn label_gain_scaling_law() {
        let (cfg, model) = desk();
        let mut split = build_dataset(&cfg, &model, 4, Role::Train, 0).unwrap();
        let base: f64 = split
            .samples
            .iter()
            .map(|s| s.cascaded.frob_norm2() / s.cascaded.total_real_coeffs() as f64)
            .sum::<f64>()
            / 4.0;
        for s in &mut split.samples {
            for q in &mut s.cascaded.users {
                *q = q.scale_re(2.0);
            }
        }
        let scaled: f64 = split
            .samples
            .iter()
            .map(|s| s.cascaded.frob_norm2() / s.cascaded.total_real_coeffs() as f64)
            .sum::<f64>()
            / 4.0;
        assert!((scaled / base - 4.0).abs() < 1e-12);
    }
}

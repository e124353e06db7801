//! Binary file formats and CSV output.
//!
//! Dataset files ("BDRS") and model checkpoints ("BDMC") are little-endian
//! with fixed field orders, so identical inputs produce identical bytes.
//!
//! Dataset layout: magic, format version u32, SystemConfig
//! (bs_antennas, ris_elements, groups, users, user_antennas, tau1, tau2 as
//! u32; p_u, noise_power, z0 as f64), ChannelModelConfig (geometry_seed u64;
//! it_clusters, shared_clusters, private_clusters, subpaths as u32;
//! rician_k_los, rician_k_nlos, angle_spread, p_los as f64), role u32,
//! seed_base u64, sample count u64, then per sample the row-major f64
//! arrays: H_IT re, H_IT im, H_RI re, H_RI im, and per user Q-bar re, im.
//! Loading recomputes every label from the stored channels and rejects the
//! file on any mismatch.
//!
//! Checkpoint layout: magic, version u32, SystemConfig, ModelHyper (d_model,
//! d_ff, n_heads, n_intra_layers, n_inter_layers, n_ffc, d_fc, d_group as
//! u32; xi f64), method u32, train_seed u64, transmit-power interval lo/hi
//! f64, NormStats (pilot_mean, pilot_std, label_gain f64), phase1_seed u64,
//! the Phase-I susceptance matrix (rows u32, cols u32, f64 data), an
//! optional fixed Phase-II susceptance matrix (present u8, then the same
//! encoding), and the named parameter records (name length u32, name bytes,
//! rank u32, extents u32, f64 data) in creation order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::channel::{ChannelModelConfig, DatasetSplit, NormStats, Role, Sample};
use crate::cx::CMat;
use crate::models::{MethodTag, ModelBundle, ModelHyper, ParamStore};
use crate::physics::{
    assemble_cascaded, build_mapping, CascadedChannelTensor, ChannelPair, SusceptanceParams,
    SystemConfig,
};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"BDRS";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum FileError {
    Io(std::io::Error),
    Format(String),
}

impl std::fmt::Display for FileError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FileError::Io(e) => write!(f, "i/o error: {e}"),
            FileError::Format(s) => write!(f, "format error: {s}"),
        }
    }
}

impl std::error::Error for FileError {}

impl From<std::io::Error> for FileError {
    fn from(e: std::io::Error) -> Self {
        FileError::Io(e)
    }
}

fn format_err<T>(msg: impl Into<String>) -> Result<T, FileError> {
    Err(FileError::Format(msg.into()))
}

// -- primitive readers/writers ----------------------------------------------

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, x: u8) -> Result<(), FileError> {
        self.0.write_all(&[x])?;
        Ok(())
    }
    fn u32(&mut self, x: u32) -> Result<(), FileError> {
        self.0.write_all(&x.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, x: u64) -> Result<(), FileError> {
        self.0.write_all(&x.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, x: f64) -> Result<(), FileError> {
        self.0.write_all(&x.to_le_bytes())?;
        Ok(())
    }
    fn f64s(&mut self, xs: impl Iterator<Item = f64>) -> Result<(), FileError> {
        for x in xs {
            self.f64(x)?;
        }
        Ok(())
    }
    fn bytes(&mut self, xs: &[u8]) -> Result<(), FileError> {
        self.0.write_all(xs)?;
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> Result<u8, FileError> {
        let mut b = [0u8; 1];
        self.0.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32, FileError> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64, FileError> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64, FileError> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FileError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
    fn magic(&mut self, want: &[u8; 4]) -> Result<(), FileError> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        if &b != want {
            return format_err(format!("bad magic {:?}, expected {:?}", b, want));
        }
        Ok(())
    }
}

fn write_system<W: Write>(w: &mut Writer<W>, cfg: &SystemConfig) -> Result<(), FileError> {
    w.u32(cfg.bs_antennas as u32)?;
    w.u32(cfg.ris_elements as u32)?;
    w.u32(cfg.groups as u32)?;
    w.u32(cfg.users as u32)?;
    w.u32(cfg.user_antennas as u32)?;
    w.u32(cfg.tau1 as u32)?;
    w.u32(cfg.tau2 as u32)?;
    w.f64(cfg.p_u)?;
    w.f64(cfg.noise_power)?;
    w.f64(cfg.z0)
}

fn read_system<R: Read>(r: &mut Reader<R>) -> Result<SystemConfig, FileError> {
    let cfg = SystemConfig {
        bs_antennas: r.u32()? as usize,
        ris_elements: r.u32()? as usize,
        groups: r.u32()? as usize,
        users: r.u32()? as usize,
        user_antennas: r.u32()? as usize,
        tau1: r.u32()? as usize,
        tau2: r.u32()? as usize,
        p_u: r.f64()?,
        noise_power: r.f64()?,
        z0: r.f64()?,
    };
    cfg.validate().map_err(FileError::Format)?;
    Ok(cfg)
}

fn write_channel_model<W: Write>(
    w: &mut Writer<W>,
    m: &ChannelModelConfig,
) -> Result<(), FileError> {
    w.u64(m.geometry_seed)?;
    w.u32(m.it_clusters as u32)?;
    w.u32(m.shared_clusters as u32)?;
    w.u32(m.private_clusters as u32)?;
    w.u32(m.subpaths as u32)?;
    w.f64(m.rician_k_los)?;
    w.f64(m.rician_k_nlos)?;
    w.f64(m.angle_spread)?;
    w.f64(m.p_los)
}

fn read_channel_model<R: Read>(r: &mut Reader<R>) -> Result<ChannelModelConfig, FileError> {
    let m = ChannelModelConfig {
        geometry_seed: r.u64()?,
        it_clusters: r.u32()? as usize,
        shared_clusters: r.u32()? as usize,
        private_clusters: r.u32()? as usize,
        subpaths: r.u32()? as usize,
        rician_k_los: r.f64()?,
        rician_k_nlos: r.f64()?,
        angle_spread: r.f64()?,
        p_los: r.f64()?,
    };
    m.validate().map_err(FileError::Format)?;
    Ok(m)
}

fn write_cmat<W: Write>(w: &mut Writer<W>, m: &CMat) -> Result<(), FileError> {
    w.f64s(m.data.iter().map(|z| z.re))?;
    w.f64s(m.data.iter().map(|z| z.im))
}

fn read_cmat<R: Read>(r: &mut Reader<R>, rows: usize, cols: usize) -> Result<CMat, FileError> {
    let re = r.f64s(rows * cols)?;
    let im = r.f64s(rows * cols)?;
    Ok(CMat::from_re_im(rows, cols, &re, &im))
}

// -- dataset ------------------------------------------------------------------

pub fn write_dataset(split: &DatasetSplit, path: &Path) -> Result<(), FileError> {
    let mut w = Writer(BufWriter::new(File::create(path)?));
    w.bytes(DATASET_MAGIC)?;
    w.u32(DATASET_VERSION)?;
    write_system(&mut w, &split.system)?;
    write_channel_model(&mut w, &split.model)?;
    w.u32(split.role.code())?;
    w.u64(split.seed_base)?;
    w.u64(split.samples.len() as u64)?;
    for s in &split.samples {
        write_cmat(&mut w, &s.channels.h_it)?;
        write_cmat(&mut w, &s.channels.h_ri)?;
        for q in &s.cascaded.users {
            write_cmat(&mut w, q)?;
        }
    }
    w.0.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetSplit, FileError> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return format_err(format!("unsupported dataset version {version}"));
    }
    let system = read_system(&mut r)?;
    let model = read_channel_model(&mut r)?;
    let role = Role::from_code(r.u32()?)
        .ok_or_else(|| FileError::Format("invalid role code".into()))?;
    let seed_base = r.u64()?;
    let count = r.u64()? as usize;
    let n = system.bs_antennas;
    let m = system.ris_elements;
    let ku = system.ku();
    let nu = system.nu();
    let h_tot = system.total_half_len();
    let mapping = build_mapping(system.group_size());
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let h_it = read_cmat(&mut r, n, m)?;
        let h_ri = read_cmat(&mut r, m, ku)?;
        let mut users = Vec::with_capacity(system.users);
        for _ in 0..system.users {
            users.push(read_cmat(&mut r, nu, h_tot)?);
        }
        let channels = ChannelPair { h_it, h_ri };
        let cascaded = CascadedChannelTensor { users };
        // labels must equal the cascaded assembly of the stored channels
        let recomputed = assemble_cascaded(&channels, &mapping, &system);
        if recomputed != cascaded {
            return format_err(format!("sample {i}: stored labels do not match the channels"));
        }
        samples.push(Sample { channels, cascaded });
    }
    Ok(DatasetSplit { system, model, role, seed_base, samples })
}

// -- checkpoint ------------------------------------------------------------------

fn write_susceptance<W: Write>(
    w: &mut Writer<W>,
    s: &SusceptanceParams,
) -> Result<(), FileError> {
    w.u32(s.values.shape()[0] as u32)?;
    w.u32(s.values.shape()[1] as u32)?;
    w.f64s(s.values.data().iter().copied())
}

fn read_susceptance<R: Read>(r: &mut Reader<R>) -> Result<SusceptanceParams, FileError> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.f64s(rows * cols)?;
    Ok(SusceptanceParams::new(Tensor::new(vec![rows, cols], data)))
}

pub fn write_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<(), FileError> {
    let mut w = Writer(BufWriter::new(File::create(path)?));
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    write_system(&mut w, &bundle.system)?;
    let h = &bundle.hyper;
    w.u32(h.d_model as u32)?;
    w.u32(h.d_ff as u32)?;
    w.u32(h.n_heads as u32)?;
    w.u32(h.n_intra_layers as u32)?;
    w.u32(h.n_inter_layers as u32)?;
    w.u32(h.n_ffc as u32)?;
    w.u32(h.d_fc as u32)?;
    w.u32(h.d_group as u32)?;
    w.f64(h.xi)?;
    w.u32(bundle.method.code())?;
    w.u64(bundle.train_seed)?;
    w.f64(bundle.p_u_interval_dbm.0)?;
    w.f64(bundle.p_u_interval_dbm.1)?;
    w.f64(bundle.norm.pilot_mean)?;
    w.f64(bundle.norm.pilot_std)?;
    w.f64(bundle.norm.label_gain)?;
    w.u64(bundle.phase1_seed)?;
    write_susceptance(&mut w, &bundle.phase1_susceptance)?;
    match &bundle.phase2_fixed {
        Some(s) => {
            w.u8(1)?;
            write_susceptance(&mut w, s)?;
        }
        None => w.u8(0)?,
    }
    w.u64(bundle.store.len() as u64)?;
    for (name, tensor) in bundle.store.iter() {
        w.u32(name.len() as u32)?;
        w.bytes(name.as_bytes())?;
        w.u32(tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            w.u32(d as u32)?;
        }
        w.f64s(tensor.data().iter().copied())?;
    }
    w.0.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelBundle, FileError> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return format_err(format!("unsupported checkpoint version {version}"));
    }
    let system = read_system(&mut r)?;
    let hyper = ModelHyper {
        d_model: r.u32()? as usize,
        d_ff: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        n_intra_layers: r.u32()? as usize,
        n_inter_layers: r.u32()? as usize,
        n_ffc: r.u32()? as usize,
        d_fc: r.u32()? as usize,
        d_group: r.u32()? as usize,
        xi: r.f64()?,
    };
    hyper.validate(&system).map_err(FileError::Format)?;
    let method = MethodTag::from_code(r.u32()?)
        .ok_or_else(|| FileError::Format("invalid method code".into()))?;
    let train_seed = r.u64()?;
    let p_lo = r.f64()?;
    let p_hi = r.f64()?;
    let norm = NormStats { pilot_mean: r.f64()?, pilot_std: r.f64()?, label_gain: r.f64()? };
    let phase1_seed = r.u64()?;
    let phase1_susceptance = read_susceptance(&mut r)?;
    let phase2_fixed = match r.u8()? {
        0 => None,
        1 => Some(read_susceptance(&mut r)?),
        b => return format_err(format!("invalid phase-II flag {b}")),
    };
    let count = r.u64()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let mut name = vec![0u8; name_len];
        r.0.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| FileError::Format("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f64s(n)?;
        store.add(name, Tensor::new(shape, data));
    }
    let (tsmo, dace) =
        ModelBundle::rebuild_handles(&store, &system, &hyper, method).map_err(FileError::Format)?;
    if phase1_susceptance.values.shape() != [system.total_half_len(), system.tau1] {
        return format_err("phase-I susceptance shape mismatch");
    }
    if let Some(s) = &phase2_fixed {
        if s.values.shape() != [system.total_half_len(), system.tau2] {
            return format_err("phase-II susceptance shape mismatch");
        }
    }
    Ok(ModelBundle {
        system,
        hyper,
        method,
        store,
        tsmo,
        dace,
        phase1_seed,
        phase1_susceptance,
        phase2_fixed,
        norm,
        p_u_interval_dbm: (p_lo, p_hi),
        train_seed,
    })
}

/// Writes CSV text with a trailing newline.
pub fn write_text(path: &Path, text: &str) -> Result<(), FileError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}

//! Checkpoint persistence. Parameters, bank rows, optimizer velocities, and
//! the feature cache are stored as little-endian f64, so a resumed run
//! replays the uninterrupted one exactly. Writes are atomic (temp + rename).

use std::fs;
use std::path::Path;

use smog_core::encoder::{EncoderPair, ParamKind, ParamStore};
use smog_core::grouping::{FeatureCache, GroupBank, InitMethod, UpdateVariant};
use smog_core::optim::OptimState;
use smog_core::trainer::{TrainSettings, TrainState};

const MAGIC: &[u8; 4] = b"SMGC";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("incompatible checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint: needed {needed} more bytes at byte {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint does not match the configured model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone)]
pub struct ParamRecord {
    pub name: String,
    pub kind: u8,
    pub shape: Vec<u32>,
    pub data: Vec<f64>,
}

/// Everything needed to resume a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    /// Canonical TOML of the run config, so eval subcommands can rebuild the
    /// model without a separate config file.
    pub config_echo: String,
    pub iteration: u64,
    pub collapse_streak: u64,
    pub online: Vec<ParamRecord>,
    pub momentum: Vec<ParamRecord>,
    pub bank_l: u32,
    pub bank_d: u32,
    pub bank_variant: u8,
    pub bank_rows: Vec<f64>,
    pub bank_counts: Vec<u64>,
    pub velocities: Vec<Vec<f64>>,
    pub cache_d: u32,
    pub cache_capacity: u64,
    pub cache_rows: Vec<f64>,
}

fn kind_to_u8(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Gain => 1,
        ParamKind::Bias => 2,
        ParamKind::RunningStat => 3,
    }
}

fn variant_to_u8(v: UpdateVariant) -> u8 {
    match v {
        UpdateVariant::MomentumUpdate => 0,
        UpdateVariant::AveragingUpdate => 1,
        UpdateVariant::AdoptLatest => 2,
        UpdateVariant::RandomSelect => 3,
    }
}

fn u8_to_variant(v: u8) -> Result<UpdateVariant, CkptError> {
    Ok(match v {
        0 => UpdateVariant::MomentumUpdate,
        1 => UpdateVariant::AveragingUpdate,
        2 => UpdateVariant::AdoptLatest,
        3 => UpdateVariant::RandomSelect,
        other => return Err(CkptError::Mismatch(format!("unknown update variant {other}"))),
    })
}

fn store_records(store: &ParamStore) -> Vec<ParamRecord> {
    store
        .entries()
        .iter()
        .map(|e| ParamRecord {
            name: e.name.clone(),
            kind: kind_to_u8(e.kind),
            shape: e.shape.iter().map(|&s| s as u32).collect(),
            data: e.data.clone(),
        })
        .collect()
}

/// Snapshot a training state.
pub fn capture(state: &TrainState, config_hash: u64, config_echo: String) -> Checkpoint {
    Checkpoint {
        config_hash,
        config_echo,
        iteration: state.iteration,
        collapse_streak: state.collapse_streak,
        online: store_records(&state.pair.online.store),
        momentum: store_records(&state.pair.momentum.store),
        bank_l: state.bank.l as u32,
        bank_d: state.bank.d as u32,
        bank_variant: variant_to_u8(state.bank.variant),
        bank_rows: state.bank.groups.clone(),
        bank_counts: state.bank.counts.clone(),
        velocities: state.opt.velocities.clone(),
        cache_d: state.bank.d as u32,
        cache_capacity: state.cache.capacity() as u64,
        cache_rows: state.cache.as_matrix(),
    }
}

/// Rebuild a training state from a checkpoint. Returns the state plus a
/// flag saying whether the stored config hash differs from the current one
/// (a warning, not an error — stored shapes win).
pub fn restore(
    ck: &Checkpoint,
    settings: &TrainSettings,
    current_hash: u64,
) -> Result<(TrainState, bool), CkptError> {
    let mut pair = EncoderPair::build(&settings.spec, settings.alpha, settings.seed)
        .map_err(|e| CkptError::Mismatch(e.to_string()))?;
    fill_store(&mut pair.online.store, &ck.online)?;
    fill_store(&mut pair.momentum.store, &ck.momentum)?;

    let mut warnings = Vec::new();
    let mut bank = GroupBank::init(
        InitMethod::Random,
        ck.bank_l as usize,
        ck.bank_d as usize,
        u8_to_variant(ck.bank_variant)?,
        settings.seed,
        &[],
        &mut warnings,
    )
    .map_err(|e| CkptError::Mismatch(e.to_string()))?;
    if ck.bank_rows.len() != bank.groups.len() || ck.bank_counts.len() != bank.counts.len() {
        return Err(CkptError::Mismatch("bank dimensions".into()));
    }
    bank.groups.copy_from_slice(&ck.bank_rows);
    bank.counts.copy_from_slice(&ck.bank_counts);

    let mut opt = OptimState::new(&pair.online.store);
    if opt.velocities.len() != ck.velocities.len() {
        return Err(CkptError::Mismatch("optimizer state size".into()));
    }
    for (dst, src) in opt.velocities.iter_mut().zip(&ck.velocities) {
        if dst.len() != src.len() {
            return Err(CkptError::Mismatch("velocity buffer length".into()));
        }
        dst.copy_from_slice(src);
    }

    let mut cache = FeatureCache::new(ck.cache_d as usize, ck.cache_capacity as usize);
    cache.push(&ck.cache_rows);

    Ok((
        TrainState {
            pair,
            bank,
            opt,
            cache,
            iteration: ck.iteration,
            collapse_streak: ck.collapse_streak,
        },
        ck.config_hash != current_hash,
    ))
}

fn fill_store(store: &mut ParamStore, records: &[ParamRecord]) -> Result<(), CkptError> {
    for rec in records {
        let Some(id) = store.index_of(&rec.name) else {
            return Err(CkptError::Mismatch(format!("parameter `{}` not in model", rec.name)));
        };
        let entry = &mut store.entries_mut()[id];
        if entry.data.len() != rec.data.len() {
            return Err(CkptError::Mismatch(format!(
                "parameter `{}` has {} values, checkpoint has {}",
                rec.name,
                entry.data.len(),
                rec.data.len()
            )));
        }
        entry.data.copy_from_slice(&rec.data);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// binary encoding

struct W(Vec<u8>);

impl W {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn records(&mut self, recs: &[ParamRecord]) {
        self.u32(recs.len() as u32);
        for r in recs {
            self.str(&r.name);
            self.u8(r.kind);
            self.u32(r.shape.len() as u32);
            for &s in &r.shape {
                self.u32(s);
            }
            self.f64s(&r.data);
        }
    }
}

struct R<'a> {
    buf: &'a [u8],
    offset: usize,
}

impl<'a> R<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CkptError> {
        if self.offset + n > self.buf.len() {
            return Err(CkptError::Truncated {
                offset: self.buf.len(),
                needed: self.offset + n - self.buf.len(),
            });
        }
        let out = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, CkptError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CkptError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CkptError> {
        let n = self.u64()? as usize;
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn str(&mut self) -> Result<String, CkptError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CkptError::Mismatch("non-utf8 parameter name".into()))
    }
    fn records(&mut self) -> Result<Vec<ParamRecord>, CkptError> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let name = self.str()?;
            let kind = self.u8()?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()?);
            }
            let data = self.f64s()?;
            out.push(ParamRecord {
                name,
                kind,
                shape,
                data,
            });
        }
        Ok(out)
    }
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<(), CkptError> {
    let mut w = W(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(ck.config_hash);
    w.str(&ck.config_echo);
    w.u64(ck.iteration);
    w.u64(ck.collapse_streak);
    w.records(&ck.online);
    w.records(&ck.momentum);
    w.u32(ck.bank_l);
    w.u32(ck.bank_d);
    w.u8(ck.bank_variant);
    w.f64s(&ck.bank_rows);
    w.u64(ck.bank_counts.len() as u64);
    for &c in &ck.bank_counts {
        w.u64(c);
    }
    w.u32(ck.velocities.len() as u32);
    for v in &ck.velocities {
        w.f64s(v);
    }
    w.u32(ck.cache_d);
    w.u64(ck.cache_capacity);
    w.f64s(&ck.cache_rows);

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &w.0)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
    let buf = fs::read(path)?;
    let mut r = R { buf: &buf, offset: 0 };
    if r.take(4)? != MAGIC {
        return Err(CkptError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CkptError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let config_hash = r.u64()?;
    let config_echo = r.str()?;
    let iteration = r.u64()?;
    let collapse_streak = r.u64()?;
    let online = r.records()?;
    let momentum = r.records()?;
    let bank_l = r.u32()?;
    let bank_d = r.u32()?;
    let bank_variant = r.u8()?;
    let bank_rows = r.f64s()?;
    let n_counts = r.u64()? as usize;
    let mut bank_counts = Vec::with_capacity(n_counts);
    for _ in 0..n_counts {
        bank_counts.push(r.u64()?);
    }
    let n_vel = r.u32()? as usize;
    let mut velocities = Vec::with_capacity(n_vel);
    for _ in 0..n_vel {
        velocities.push(r.f64s()?);
    }
    let cache_d = r.u32()?;
    let cache_capacity = r.u64()?;
    let cache_rows = r.f64s()?;
    Ok(Checkpoint {
        config_hash,
        config_echo,
        iteration,
        collapse_streak,
        online,
        momentum,
        bank_l,
        bank_d,
        bank_variant,
        bank_rows,
        bank_counts,
        velocities,
        cache_d,
        cache_capacity,
        cache_rows,
    })
}

//! Binary checkpoints holding only the compact trainable matrices, with an
//! optional per-layer projector section.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PICA"  version:u32  header_len:u32  header[header_len]  payload  checksum:u64
//!
//! header:  fingerprint:u64  rank:u32  step_count:u64  flags:u8  random_seed:u64
//!          slot_count:u32  { id_len:u16 id:utf8  n:u32  layer_count:u32
//!                            { layer:u32  m:u32 }* }*
//! payload: B of every slot (rank x n, f64 row-major), then, when the
//!          projector flag is set, U_r of every layer in layer order
//!          (m x rank, f64 row-major)
//! ```
//!
//! `checksum` is FNV-1a 64 over every preceding byte. Adam moments are not
//! stored; a loaded state starts with zero moments.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Projector};
use crate::net::ToyModel;
use crate::optim::{build_projectors, Aggregation, PicaOptions, PicaState, ProjectorSource, Sharing, UpdateRule};

pub const MAGIC: &[u8; 4] = b"PICA";
pub const VERSION: u32 = 1;

const FLAG_PROJECTORS: u8 = 1 << 0;
const FLAG_PER_LAYER: u8 = 1 << 1;
const FLAG_RANDOM_SOURCE: u8 = 1 << 2;
const FLAG_PLAIN_GD: u8 = 1 << 3;
const FLAG_MEAN_AGGREGATION: u8 = 1 << 4;
const KNOWN_FLAGS: u8 = (1 << 5) - 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a 64.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn update(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::default();
    h.update(bytes);
    h.finish()
}

/// FNV-1a 64 over every base weight in layer order, each as row-major f64
/// little-endian bytes. A model with no weights hashes to the FNV offset
/// basis `0xcbf29ce484222325`.
pub fn fingerprint(model: &ToyModel) -> u64 {
    let mut h = Fnv1a::default();
    for layer in model.layers() {
        for x in layer.base_weight.as_slice() {
            h.update(&x.to_le_bytes());
        }
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSlot {
    pub id: String,
    pub n: usize,
    /// `(layer index, m)` of every layer the slot drives.
    pub layers: Vec<(usize, usize)>,
    pub b: Matrix,
}

/// Decoded checkpoint contents, independent of any model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterCheckpoint {
    pub fingerprint: u64,
    pub rank: usize,
    pub step_count: u64,
    pub options: PicaOptions,
    pub slots: Vec<CheckpointSlot>,
    /// Per-layer `U_r`, in layer order.
    pub projectors: Option<Vec<Matrix>>,
}

impl AdapterCheckpoint {
    pub fn from_state(state: &PicaState, model: &ToyModel, include_projectors: bool) -> Result<Self> {
        if state.num_layers() != model.num_layers() {
            return Err(Error::mismatch("checkpoint", format!("{} layers", model.num_layers()), state.num_layers()));
        }
        let slots = state
            .groups()
            .enumerate()
            .map(|(slot, (id, g))| CheckpointSlot {
                id: id.to_string(),
                n: g.b.cols(),
                layers: state
                    .slot_layers(slot)
                    .into_iter()
                    .map(|l| (l, model.layers()[l].out_dim()))
                    .collect(),
                b: g.b.clone(),
            })
            .collect();
        Ok(Self {
            fingerprint: fingerprint(model),
            rank: state.rank(),
            step_count: state.step_count(),
            options: *state.options(),
            slots,
            projectors: include_projectors.then(|| state.projectors().iter().map(|p| p.basis().clone()).collect()),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.slots.iter().map(|s| s.layers.len()).sum()
    }

    fn flags(&self) -> (u8, u64) {
        let mut flags = 0;
        if self.projectors.is_some() {
            flags |= FLAG_PROJECTORS;
        }
        if self.options.sharing == Sharing::PerLayer {
            flags |= FLAG_PER_LAYER;
        }
        if self.options.rule == UpdateRule::PlainGd {
            flags |= FLAG_PLAIN_GD;
        }
        if self.options.aggregation == Aggregation::Mean {
            flags |= FLAG_MEAN_AGGREGATION;
        }
        let seed = match self.options.source {
            ProjectorSource::Random { seed } => {
                flags |= FLAG_RANDOM_SOURCE;
                seed
            }
            ProjectorSource::ColumnSpace => 0,
        };
        (flags, seed)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let too_big = |what: &str| Error::InvalidArgument(format!("{what} does not fit the checkpoint format"));
        let u32_of = |v: usize, what: &str| u32::try_from(v).map_err(|_| too_big(what));

        let (flags, seed) = self.flags();
        let mut header = Vec::new();
        header.extend_from_slice(&self.fingerprint.to_le_bytes());
        header.extend_from_slice(&u32_of(self.rank, "rank")?.to_le_bytes());
        header.extend_from_slice(&self.step_count.to_le_bytes());
        header.push(flags);
        header.extend_from_slice(&seed.to_le_bytes());
        header.extend_from_slice(&u32_of(self.slots.len(), "slot count")?.to_le_bytes());
        for s in &self.slots {
            let id_len = u16::try_from(s.id.len()).map_err(|_| too_big("slot id"))?;
            header.extend_from_slice(&id_len.to_le_bytes());
            header.extend_from_slice(s.id.as_bytes());
            header.extend_from_slice(&u32_of(s.n, "n")?.to_le_bytes());
            header.extend_from_slice(&u32_of(s.layers.len(), "layer count")?.to_le_bytes());
            for &(l, m) in &s.layers {
                header.extend_from_slice(&u32_of(l, "layer index")?.to_le_bytes());
                header.extend_from_slice(&u32_of(m, "m")?.to_le_bytes());
            }
        }

        let mut out = Vec::with_capacity(16 + header.len() + self.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(header.len(), "header")?.to_le_bytes());
        out.extend_from_slice(&header);
        for s in &self.slots {
            if s.b.shape() != (self.rank, s.n) {
                return Err(Error::mismatch("checkpoint slot", format!("{}x{}", self.rank, s.n), format!("{:?}", s.b.shape())));
            }
            write_f64s(&mut out, s.b.as_slice());
        }
        if let Some(ps) = &self.projectors {
            let ms = self.layer_dims()?;
            if ps.len() != ms.len() {
                return Err(Error::mismatch("checkpoint projectors", ms.len(), ps.len()));
            }
            for (p, m) in ps.iter().zip(ms) {
                if p.shape() != (m, self.rank) {
                    return Err(Error::mismatch("checkpoint projector", format!("{m}x{}", self.rank), format!("{:?}", p.shape())));
                }
                write_f64s(&mut out, p.as_slice());
            }
        }
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    fn payload_len(&self) -> usize {
        let b: usize = self.slots.iter().map(|s| self.rank * s.n * 8).sum();
        let p: usize = self
            .projectors
            .as_ref()
            .map_or(0, |ps| ps.iter().map(|p| p.rows() * p.cols() * 8).sum());
        b + p
    }

    /// Output dimension of every layer in layer order; the slots' layer
    /// indices must form `0..L`.
    fn layer_dims(&self) -> Result<Vec<usize>> {
        let total = self.num_layers();
        let mut ms = vec![None; total];
        for s in &self.slots {
            for &(l, m) in &s.layers {
                match ms.get_mut(l) {
                    Some(slot @ None) => *slot = Some(m),
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "layer {l} is out of range or listed twice in a {total}-layer checkpoint"
                        )))
                    }
                }
            }
        }
        Ok(ms.into_iter().map(|m| m.expect("every index filled")).collect())
    }
}

fn write_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(len).filter(|&end| end <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => self.fail(format!(
                "truncated {what}: need {len} bytes, {} left",
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let len = rows.checked_mul(cols).and_then(|k| k.checked_mul(8));
        let Some(len) = len.filter(|&l| l <= self.remaining()) else {
            return self.fail(format!("truncated {what}: {rows}x{cols} payload exceeds the file"));
        };
        let start = self.pos;
        let raw = self.take(len, what)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Parse {
                offset: start + 8 * i,
                reason: format!("non-finite value in {what}"),
            });
        }
        Matrix::from_vec(rows, cols, data)
    }
}

/// Parses a checkpoint. Every structural problem is reported as
/// [`Error::Parse`] with the byte offset where it was detected.
pub fn decode(bytes: &[u8]) -> Result<AdapterCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected \"PICA\"");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let header_len = r.u32("header length")? as usize;
    let header_start = r.pos;
    let header_end = match header_start.checked_add(header_len) {
        Some(end) if end <= bytes.len() => end,
        _ => return r.fail(format!("header length {header_len} exceeds the file")),
    };

    let fingerprint = r.u64("fingerprint")?;
    let rank = r.u32("rank")? as usize;
    let step_count = r.u64("step count")?;
    let flags_at = r.pos;
    let flags = r.u8("flags")?;
    if flags & !KNOWN_FLAGS != 0 {
        r.pos = flags_at;
        return r.fail(format!("unknown flag bits {flags:#04x}"));
    }
    let seed_at = r.pos;
    let seed = r.u64("random seed")?;
    if flags & FLAG_RANDOM_SOURCE == 0 && seed != 0 {
        r.pos = seed_at;
        return r.fail("random seed set without the random-source flag");
    }
    let slot_count = r.u32("slot count")? as usize;
    if rank == 0 {
        return r.fail("rank 0");
    }
    let mut slots = Vec::new();
    for _ in 0..slot_count {
        if r.pos >= header_end {
            return r.fail("slot list runs past the header");
        }
        let id_len = r.u16("slot id length")? as usize;
        let id_at = r.pos;
        let id = match std::str::from_utf8(r.take(id_len, "slot id")?) {
            Ok(s) => s.to_string(),
            Err(e) => {
                r.pos = id_at + e.valid_up_to();
                return r.fail("slot id is not UTF-8");
            }
        };
        let n = r.u32("n")? as usize;
        let layer_count = r.u32("layer count")? as usize;
        if layer_count == 0 {
            return r.fail(format!("slot {id:?} drives no layers"));
        }
        if layer_count.saturating_mul(8) > header_end.saturating_sub(r.pos) {
            return r.fail(format!("slot {id:?} layer list exceeds the header"));
        }
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let l = r.u32("layer index")? as usize;
            let m = r.u32("m")? as usize;
            layers.push((l, m));
        }
        slots.push(CheckpointSlot {
            id,
            n,
            layers,
            b: Matrix::zeros(0, 0),
        });
    }
    if r.pos != header_end {
        return r.fail(format!("header length mismatch: declared end {header_end}"));
    }

    let options = PicaOptions {
        rule: if flags & FLAG_PLAIN_GD != 0 { UpdateRule::PlainGd } else { UpdateRule::Adam },
        sharing: if flags & FLAG_PER_LAYER != 0 { Sharing::PerLayer } else { Sharing::Shared },
        source: if flags & FLAG_RANDOM_SOURCE != 0 {
            ProjectorSource::Random { seed }
        } else {
            ProjectorSource::ColumnSpace
        },
        aggregation: if flags & FLAG_MEAN_AGGREGATION != 0 { Aggregation::Mean } else { Aggregation::Sum },
    };
    let mut ckpt = AdapterCheckpoint {
        fingerprint,
        rank,
        step_count,
        options,
        slots,
        projectors: None,
    };
    let dims = match ckpt.layer_dims() {
        Ok(d) => d,
        Err(e) => return r.fail(e.to_string()),
    };
    for s in &mut ckpt.slots {
        s.b = r.matrix(rank, s.n, "compact matrix")?;
    }
    if flags & FLAG_PROJECTORS != 0 {
        let mut ps = Vec::with_capacity(dims.len());
        for m in dims {
            ps.push(r.matrix(m, rank, "projector")?);
        }
        ckpt.projectors = Some(ps);
    }
    let body_end = r.pos;
    let stored = r.u64("checksum")?;
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes", r.remaining()));
    }
    let actual = fnv1a64(&bytes[..body_end]);
    if stored != actual {
        r.pos = body_end;
        return r.fail(format!("checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"));
    }
    Ok(ckpt)
}

/// Rebuilds a state for `model` from a checkpoint: fingerprint and layout
/// must match; projectors are taken from the checkpoint when cached (and
/// checked for orthonormality), recomputed from the base weights otherwise.
pub fn restore(ckpt: &AdapterCheckpoint, model: &ToyModel) -> Result<PicaState> {
    let found = fingerprint(model);
    if ckpt.fingerprint != found {
        return Err(Error::BaseModelMismatch {
            expected: ckpt.fingerprint,
            found,
        });
    }
    let projectors: Vec<Projector> = match &ckpt.projectors {
        Some(ps) => {
            if ps.len() != model.num_layers() {
                return Err(Error::mismatch("restore", format!("{} projectors", model.num_layers()), ps.len()));
            }
            ps.iter()
                .zip(model.layers())
                .map(|(p, l)| {
                    if p.shape() != (l.out_dim(), ckpt.rank) {
                        return Err(Error::mismatch("restore projector", format!("{}x{}", l.out_dim(), ckpt.rank), format!("{:?}", p.shape())));
                    }
                    Projector::from_orthonormal(p.clone())
                })
                .collect::<Result<_>>()?
        }
        None => build_projectors(model, ckpt.rank, ckpt.options.source)?,
    };
    let mut state = PicaState::from_projectors(model, ckpt.rank, ckpt.options, projectors);
    let expected: Vec<(String, usize, Vec<(usize, usize)>)> = state
        .groups()
        .enumerate()
        .map(|(slot, (id, g))| {
            let layers = state
                .slot_layers(slot)
                .into_iter()
                .map(|l| (l, model.layers()[l].out_dim()))
                .collect();
            (id.to_string(), g.b.cols(), layers)
        })
        .collect();
    let stored: Vec<(String, usize, Vec<(usize, usize)>)> = ckpt
        .slots
        .iter()
        .map(|s| (s.id.clone(), s.n, s.layers.clone()))
        .collect();
    if expected != stored {
        return Err(Error::InvalidArgument(
            "checkpoint slot layout does not match the model's groups".into(),
        ));
    }
    for ((_, g), s) in state.slots_mut().iter_mut().zip(&ckpt.slots) {
        if s.b.shape() != g.b.shape() {
            return Err(Error::mismatch("restore slot", format!("{:?}", g.b.shape()), format!("{:?}", s.b.shape())));
        }
        g.b = s.b.clone();
    }
    state.set_step_count(ckpt.step_count);
    Ok(state)
}

pub fn encode(state: &PicaState, model: &ToyModel, include_projectors: bool) -> Result<Vec<u8>> {
    AdapterCheckpoint::from_state(state, model, include_projectors)?.encode()
}

/// Writes the checkpoint atomically (temporary file in the target
/// directory, then rename); returns the number of bytes written.
pub fn save(state: &PicaState, model: &ToyModel, path: impl AsRef<Path>, include_projectors: bool) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode(state, model, include_projectors)?;
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(&bytes).map_err(io)?;
    // Temporary files are created owner-only; a checkpoint is ordinary data.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644)).map_err(io)?;
    }
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(bytes.len() as u64)
}

pub fn load(path: impl AsRef<Path>, model: &ToyModel) -> Result<PicaState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    restore(&decode(&bytes)?, model)
}

//! Synthetic three-modality benchmark with controlled misalignment.
//!
//! Each sample draws bit vectors `u, v` (Bernoulli 1/2) and encodes them as
//! three inputs of `input_dim` coordinates. The first `3 * bit_length`
//! coordinates carry signal blocks in a `+-s` encoding (bit 1 -> +s,
//! bit 0 -> -s, constant blocks all +s):
//!
//! ```text
//! A = [u, v, uv]    B = [u, 1, u]    C = [1, v, v]      uv = XNOR(u, v)
//! ```
//!
//! so that on clean samples the signal blocks satisfy `B .* C = s * A`
//! elementwise (at s = 1 the +-1 product realizes XNOR). Remaining
//! coordinates are i.i.d. `N(0, sigma^2)` distractors, which drown the
//! signal and force a model to find the interaction. With probability `p` a
//! sample's B or C vector (uniform choice) is replaced wholesale by the
//! matching vector of another sample, drawn uniformly from the clean
//! pre-swap pool excluding itself: marginal statistics are untouched but
//! the cross-modal alignment is broken, and the swap is recorded.
//!
//! Generation is bitwise deterministic given the seed: every sample owns a
//! counter-based substream, so parallel generation yields identical bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::parallel;

pub const NUM_MODALITIES: usize = 3;
pub const MODALITY_NAMES: [&str; NUM_MODALITIES] = ["A", "B", "C"];

const BIN_MAGIC: &[u8; 8] = b"GMIPXNR1";
const CSV_TAG: &str = "gmip-xnor-csv-v1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XnorConfig {
    pub bit_length: usize,
    pub signal_amplitude: f64,
    pub distractor_sigma: f64,
    pub input_dim: usize,
    pub misalignment_prob: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for XnorConfig {
    fn default() -> Self {
        XnorConfig {
            bit_length: 16,
            signal_amplitude: 1.0,
            distractor_sigma: 3.0,
            input_dim: 128,
            misalignment_prob: 0.0,
            num_samples: 30_000,
            seed: 0,
        }
    }
}

impl XnorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bit_length == 0 {
            return Err(Error::config("bit_length must be positive"));
        }
        if self.input_dim < 3 * self.bit_length {
            return Err(Error::config(format!(
                "input_dim {} must be at least 3 * bit_length = {}",
                self.input_dim,
                3 * self.bit_length
            )));
        }
        if !(0.0..=1.0).contains(&self.misalignment_prob) {
            return Err(Error::config(format!(
                "misalignment_prob must lie in [0, 1], got {}",
                self.misalignment_prob
            )));
        }
        if self.num_samples == 0 {
            return Err(Error::config("num_samples must be positive"));
        }
        if self.misalignment_prob > 0.0 && self.num_samples < 2 {
            return Err(Error::config("swapping needs at least 2 samples to donate from"));
        }
        if !(self.signal_amplitude.is_finite() && self.signal_amplitude > 0.0) {
            return Err(Error::config(format!(
                "signal_amplitude must be positive, got {}",
                self.signal_amplitude
            )));
        }
        if !(self.distractor_sigma.is_finite() && self.distractor_sigma >= 0.0) {
            return Err(Error::config(format!(
                "distractor_sigma must be nonnegative, got {}",
                self.distractor_sigma
            )));
        }
        Ok(())
    }

    pub fn signal_len(&self) -> usize {
        3 * self.bit_length
    }
}

/// Which modality, if any, was replaced by a donor sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Misalignment {
    None,
    B,
    C,
}

impl Misalignment {
    /// Index of the swapped modality (B = 1, C = 2).
    pub fn modality(self) -> Option<usize> {
        match self {
            Misalignment::None => None,
            Misalignment::B => Some(1),
            Misalignment::C => Some(2),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Misalignment::None => "none",
            Misalignment::B => "B",
            Misalignment::C => "C",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Misalignment::None),
            "B" => Ok(Misalignment::B),
            "C" => Ok(Misalignment::C),
            other => Err(Error::Data(format!("unknown misalignment flag '{other}'"))),
        }
    }

    fn to_u8(self) -> u8 {
        match self {
            Misalignment::None => 0,
            Misalignment::B => 1,
            Misalignment::C => 2,
        }
    }

    fn from_u8(x: u8) -> Result<Self> {
        match x {
            0 => Ok(Misalignment::None),
            1 => Ok(Misalignment::B),
            2 => Ok(Misalignment::C),
            other => Err(Error::Data(format!("misalignment byte {other} out of range"))),
        }
    }
}

/// Elementwise XNOR: 1 where the bits agree.
pub fn xnor(u: &[bool], v: &[bool]) -> Result<Vec<bool>> {
    if u.len() != v.len() {
        return Err(Error::dim(format!("xnor length mismatch: {} vs {}", u.len(), v.len())));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a == b).collect())
}

fn encode(bit: bool, s: f64) -> f64 {
    if bit {
        s
    } else {
        -s
    }
}

/// Signal blocks for the three modalities, each `3 * bit_length` long.
pub fn signal_vectors(u: &[bool], v: &[bool], s: f64) -> Result<[Vec<f64>; 3]> {
    let uv = xnor(u, v)?;
    let l = u.len();
    let mut a = Vec::with_capacity(3 * l);
    let mut b = Vec::with_capacity(3 * l);
    let mut c = Vec::with_capacity(3 * l);
    for &bit in u {
        a.push(encode(bit, s));
    }
    for &bit in v {
        a.push(encode(bit, s));
    }
    for &bit in &uv {
        a.push(encode(bit, s));
    }
    for &bit in u {
        b.push(encode(bit, s));
    }
    for _ in 0..l {
        b.push(s);
    }
    for &bit in u {
        b.push(encode(bit, s));
    }
    for _ in 0..l {
        c.push(s);
    }
    for &bit in v {
        c.push(encode(bit, s));
    }
    for &bit in v {
        c.push(encode(bit, s));
    }
    Ok([a, b, c])
}

/// The generated pool: flat per-modality row storage plus swap labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: XnorConfig,
    pub ids: Vec<u64>,
    pub misaligned: Vec<Misalignment>,
    inputs: [Vec<f64>; NUM_MODALITIES],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Raw input row for one sample and modality.
    pub fn input(&self, modality: usize, i: usize) -> &[f64] {
        let d = self.config.input_dim;
        &self.inputs[modality][i * d..(i + 1) * d]
    }

    /// All rows of one modality, row-major `[n x input_dim]`.
    pub fn inputs_flat(&self, modality: usize) -> &[f64] {
        &self.inputs[modality]
    }

    /// Copies the selected rows of one modality into a dense batch.
    pub fn gather(&self, modality: usize, idx: &[usize]) -> Vec<f64> {
        let d = self.config.input_dim;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(self.input(modality, i));
        }
        out
    }
}

fn clean_sample(cfg: &XnorConfig, i: u64) -> [Vec<f64>; 3] {
    let mut rng = crate::rng::stream(cfg.seed, "sample", &[i]);
    let l = cfg.bit_length;
    let u: Vec<bool> = (0..l).map(|_| rng.gen_bool(0.5)).collect();
    let v: Vec<bool> = (0..l).map(|_| rng.gen_bool(0.5)).collect();
    let signals = signal_vectors(&u, &v, cfg.signal_amplitude).expect("lengths match");
    let noise = Normal::new(0.0, cfg.distractor_sigma).expect("validated sigma");
    let extra = cfg.input_dim - cfg.signal_len();
    let mut out: [Vec<f64>; 3] = signals;
    for row in &mut out {
        row.reserve(extra);
        for _ in 0..extra {
            row.push(noise.sample(&mut rng));
        }
    }
    out
}

/// Generates the full pool, applying the misalignment swap pass.
pub fn generate(cfg: &XnorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.num_samples;
    let d = cfg.input_dim;

    let clean = parallel::par_map_range(n, |i| clean_sample(cfg, i as u64));

    // Swap decisions, drawn per sample from independent substreams. Donors
    // come from the clean pre-swap pool, so order is irrelevant.
    let swaps: Vec<Option<(Misalignment, usize)>> = parallel::par_map_range(n, |i| {
        let mut rng = crate::rng::stream(cfg.seed, "swap", &[i as u64]);
        if !rng.gen_bool(cfg.misalignment_prob) {
            return None;
        }
        let which = if rng.gen_bool(0.5) { Misalignment::B } else { Misalignment::C };
        let mut donor = rng.gen_range(0..n - 1);
        if donor >= i {
            donor += 1;
        }
        Some((which, donor))
    });

    let mut inputs: [Vec<f64>; 3] = [
        Vec::with_capacity(n * d),
        Vec::with_capacity(n * d),
        Vec::with_capacity(n * d),
    ];
    let mut misaligned = Vec::with_capacity(n);
    for (i, swap) in swaps.iter().enumerate() {
        let flag = swap.map(|(w, _)| w).unwrap_or(Misalignment::None);
        for m in 0..NUM_MODALITIES {
            let source = match (flag.modality(), swap) {
                (Some(sm), Some((_, donor))) if sm == m => &clean[*donor][m],
                _ => &clean[i][m],
            };
            inputs[m].extend_from_slice(source);
        }
        misaligned.push(flag);
    }

    Ok(Dataset { config: *cfg, ids: (0..n as u64).collect(), misaligned, inputs })
}

/// Index partition produced by [`split`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic disjoint partition; fractions must sum to 1.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must be nonnegative and sum to 1, got ({ft}, {fv}, {fe})"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::stream(seed, "split", &[]);
    // Fisher-Yates, high to low, matching rand's shuffle draws.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (ft * n as f64).floor() as usize;
    let n_val = (fv * n as f64).floor() as usize;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok(SplitIndices { train, val, test })
}

// ── Export / import ───────────────────────────────────────────────────────

fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Binary export: magic, config echo, then per sample
/// `(id: u64, misaligned: u8, 3 x input_dim f64)`, all little-endian.
pub fn save_binary(dataset: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, |w| {
        let cfg = &dataset.config;
        w.write_all(BIN_MAGIC)?;
        for value in [cfg.bit_length as u64, cfg.input_dim as u64, cfg.num_samples as u64, cfg.seed]
        {
            w.write_all(&value.to_le_bytes())?;
        }
        for value in [cfg.signal_amplitude, cfg.distractor_sigma, cfg.misalignment_prob] {
            w.write_all(&value.to_le_bytes())?;
        }
        for i in 0..dataset.len() {
            w.write_all(&dataset.ids[i].to_le_bytes())?;
            w.write_all(&[dataset.misaligned[i].to_u8()])?;
            for m in 0..NUM_MODALITIES {
                for v in dataset.input(m, i) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    })
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn load_binary(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BIN_MAGIC {
        return Err(Error::Data(format!("{}: not a dataset file (bad magic)", path.display())));
    }
    let bit_length = read_u64(&mut r)? as usize;
    let input_dim = read_u64(&mut r)? as usize;
    let num_samples = read_u64(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let signal_amplitude = read_f64(&mut r)?;
    let distractor_sigma = read_f64(&mut r)?;
    let misalignment_prob = read_f64(&mut r)?;
    let config = XnorConfig {
        bit_length,
        signal_amplitude,
        distractor_sigma,
        input_dim,
        misalignment_prob,
        num_samples,
        seed,
    };
    config.validate()?;

    let mut ids = Vec::with_capacity(num_samples);
    let mut misaligned = Vec::with_capacity(num_samples);
    let mut inputs: [Vec<f64>; 3] = [
        Vec::with_capacity(num_samples * input_dim),
        Vec::with_capacity(num_samples * input_dim),
        Vec::with_capacity(num_samples * input_dim),
    ];
    for _ in 0..num_samples {
        ids.push(read_u64(&mut r)?);
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        misaligned.push(Misalignment::from_u8(flag[0])?);
        for input in &mut inputs {
            for _ in 0..input_dim {
                input.push(read_f64(&mut r)?);
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Data(format!("{}: trailing bytes after samples", path.display())));
    }
    Ok(Dataset { config, ids, misaligned, inputs })
}

/// CSV export: a tagged config line, a column header, then one row per
/// sample. Floats carry 17 significant digits so the round-trip is exact.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, |w| {
        let cfg = &dataset.config;
        writeln!(
            w,
            "{CSV_TAG},bit_length={},input_dim={},num_samples={},seed={},\
             signal_amplitude={:.16e},distractor_sigma={:.16e},misalignment_prob={:.16e}",
            cfg.bit_length,
            cfg.input_dim,
            cfg.num_samples,
            cfg.seed,
            cfg.signal_amplitude,
            cfg.distractor_sigma,
            cfg.misalignment_prob
        )?;
        write!(w, "sample_id,misaligned")?;
        for name in ["a", "b", "c"] {
            for j in 0..cfg.input_dim {
                write!(w, ",{name}_{j}")?;
            }
        }
        writeln!(w)?;
        for i in 0..dataset.len() {
            write!(w, "{},{}", dataset.ids[i], dataset.misaligned[i].as_str())?;
            for m in 0..NUM_MODALITIES {
                for v in dataset.input(m, i) {
                    write!(w, ",{v:.16e}")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    })
}

fn parse_kv<T: std::str::FromStr>(field: &str, key: &str) -> Result<T> {
    let (k, v) = field
        .split_once('=')
        .ok_or_else(|| Error::Data(format!("malformed header field '{field}'")))?;
    if k != key {
        return Err(Error::Data(format!("expected header key '{key}', found '{k}'")));
    }
    v.parse().map_err(|_| Error::Data(format!("cannot parse header value '{v}' for '{key}'")))
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))??;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() != 8 || fields[0] != CSV_TAG {
        return Err(Error::Data(format!("{}: not a dataset CSV (bad header)", path.display())));
    }
    let config = XnorConfig {
        bit_length: parse_kv(fields[1], "bit_length")?,
        input_dim: parse_kv(fields[2], "input_dim")?,
        num_samples: parse_kv(fields[3], "num_samples")?,
        seed: parse_kv(fields[4], "seed")?,
        signal_amplitude: parse_kv(fields[5], "signal_amplitude")?,
        distractor_sigma: parse_kv(fields[6], "distractor_sigma")?,
        misalignment_prob: parse_kv(fields[7], "misalignment_prob")?,
    };
    config.validate()?;
    let _columns = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: missing column header", path.display())))??;

    let d = config.input_dim;
    let n = config.num_samples;
    let mut ids = Vec::with_capacity(n);
    let mut misaligned = Vec::with_capacity(n);
    let mut inputs: [Vec<f64>; 3] =
        [Vec::with_capacity(n * d), Vec::with_capacity(n * d), Vec::with_capacity(n * d)];
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id: u64 = parts
            .next()
            .ok_or_else(|| Error::Data(format!("row {lineno}: missing sample_id")))?
            .parse()
            .map_err(|_| Error::Data(format!("row {lineno}: bad sample_id")))?;
        let flag = Misalignment::parse(
            parts.next().ok_or_else(|| Error::Data(format!("row {lineno}: missing flag")))?,
        )?;
        ids.push(id);
        misaligned.push(flag);
        for input in &mut inputs {
            for j in 0..d {
                let cell = parts.next().ok_or_else(|| {
                    Error::Data(format!("row {lineno}: missing value at offset {j}"))
                })?;
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Data(format!("row {lineno}: bad float '{cell}'")))?;
                input.push(v);
            }
        }
        if parts.next().is_some() {
            return Err(Error::Data(format!("row {lineno}: too many columns")));
        }
    }
    if ids.len() != n {
        return Err(Error::Data(format!("expected {n} rows, found {}", ids.len())));
    }
    Ok(Dataset { config, ids, misaligned, inputs })
}

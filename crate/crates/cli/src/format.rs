//! On-disk formats: T2DV volumes, T2DC checkpoints, CSV reports, and the
//! dataset manifest.
//!
//! Both binary formats are little-endian, store values as f32, and end with
//! a CRC32 of every preceding byte so truncation and corruption are caught
//! at load time.

use std::collections::BTreeSet;
use std::path::Path;

use t2d_core::model::{FusionMode, ModelConfig, T2DNet};
use t2d_core::train::LossPoint;
use t2d_core::metrics::EvalReport;
use t2d_core::volume::{Kind, Volume};
use t2d_core::Real;

use crate::error::{runtime, validation, Result};

const VOLUME_MAGIC: &[u8; 4] = b"T2DV";
const CHECKPOINT_MAGIC: &[u8; 4] = b"T2DC";
const FORMAT_VERSION: u16 = 1;

/// Appends the CRC32 of everything written so far.
fn finish_with_crc(mut bytes: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

/// Strips and checks the trailing CRC32, returning the covered payload.
fn verify_crc<'a>(bytes: &'a [u8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < 4 {
        return Err(validation(format!("{what}: too short to hold a checksum")));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(validation(format!(
            "{what}: checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    Ok(payload)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'a str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(validation(format!(
                "{}: truncated (wanted {n} bytes at offset {}, file has {})",
                self.what,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_values(&mut self, n: usize) -> Result<Vec<Real>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn check_header(r: &mut Reader, magic: &[u8; 4]) -> Result<()> {
    let got = r.take(4)?;
    if got != magic {
        return Err(validation(format!(
            "{}: bad magic {got:?}, expected {magic:?}",
            r.what
        )));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(validation(format!(
            "{}: unsupported version {version}",
            r.what
        )));
    }
    Ok(())
}

fn kind_to_u8(kind: Kind) -> u8 {
    match kind {
        Kind::Intensity => 0,
        Kind::Probability => 1,
        Kind::Mask => 2,
    }
}

fn kind_from_u8(v: u8, what: &str) -> Result<Kind> {
    match v {
        0 => Ok(Kind::Intensity),
        1 => Ok(Kind::Probability),
        2 => Ok(Kind::Mask),
        other => Err(validation(format!("{what}: unknown volume kind {other}"))),
    }
}

/// Serializes a volume: magic, version, kind, H/W/D, f32 voxels with the
/// depth axis outermost (the in-memory order), CRC32.
pub fn volume_bytes(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(19 + 4 * v.voxels.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind_to_u8(v.kind));
    out.extend_from_slice(&(v.h as u32).to_le_bytes());
    out.extend_from_slice(&(v.w as u32).to_le_bytes());
    out.extend_from_slice(&(v.d as u32).to_le_bytes());
    for &x in &v.voxels {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    finish_with_crc(out)
}

pub fn parse_volume(bytes: &[u8], what: &str) -> Result<Volume> {
    let payload = verify_crc(bytes, what)?;
    let mut r = Reader::new(payload, what);
    check_header(&mut r, VOLUME_MAGIC)?;
    let kind = kind_from_u8(r.u8()?, what)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let d = r.u32()? as usize;
    let voxels = r.f32_values(h.checked_mul(w).and_then(|hw| hw.checked_mul(d)).ok_or_else(
        || validation(format!("{what}: voxel count overflows")),
    )?)?;
    if !r.done() {
        return Err(validation(format!("{what}: trailing bytes after voxels")));
    }
    Ok(Volume::new(h, w, d, voxels, kind)?)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    std::fs::write(path, volume_bytes(v))
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path)
        .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    parse_volume(&bytes, &path.display().to_string())
}

/// Canonical key=value text for the architecture block of a checkpoint.
fn model_config_text(cfg: &ModelConfig) -> String {
    format!(
        "base_width={}\nfusion_mode={}\ng={}\ninput_size={}\nk={}\nseed={}\nssa_pool_size={}\ntrunk_width={}\n",
        cfg.base_width,
        cfg.fusion_mode.name(),
        cfg.g,
        cfg.input_size,
        cfg.k,
        cfg.seed,
        cfg.ssa_pool_size,
        cfg.trunk_width,
    )
}

fn model_config_from_text(text: &str, what: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    let mut seen = BTreeSet::new();
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| validation(format!("{what}: malformed config line '{line}'")))?;
        if !seen.insert(key.to_string()) {
            return Err(validation(format!("{what}: duplicate config key '{key}'")));
        }
        let bad =
            |e: &dyn std::fmt::Display| validation(format!("{what}: config key '{key}': {e}"));
        match key {
            "base_width" => cfg.base_width = value.parse().map_err(|e| bad(&e))?,
            "fusion_mode" => cfg.fusion_mode = FusionMode::parse(value)?,
            "g" => cfg.g = value.parse().map_err(|e| bad(&e))?,
            "input_size" => cfg.input_size = value.parse().map_err(|e| bad(&e))?,
            "k" => cfg.k = value.parse().map_err(|e| bad(&e))?,
            "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
            "ssa_pool_size" => cfg.ssa_pool_size = value.parse().map_err(|e| bad(&e))?,
            "trunk_width" => cfg.trunk_width = value.parse().map_err(|e| bad(&e))?,
            other => return Err(validation(format!("{what}: unknown config key '{other}'"))),
        }
    }
    const REQUIRED: [&str; 8] = [
        "base_width",
        "fusion_mode",
        "g",
        "input_size",
        "k",
        "seed",
        "ssa_pool_size",
        "trunk_width",
    ];
    for key in REQUIRED {
        if !seen.contains(key) {
            return Err(validation(format!("{what}: missing config key '{key}'")));
        }
    }
    Ok(cfg)
}

/// Serializes a checkpoint: magic, version, length-prefixed config text,
/// then one record per parameter in storage order (length-prefixed name,
/// rank, extents, f32 values), CRC32.
pub fn checkpoint_bytes(net: &T2DNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = model_config_text(&net.config);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    for (name, tensor) in net.names().iter().zip(net.tensors()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape.len() as u8);
        for &e in &tensor.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &x in &tensor.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    finish_with_crc(out)
}

pub fn parse_checkpoint(bytes: &[u8], what: &str) -> Result<T2DNet> {
    let payload = verify_crc(bytes, what)?;
    let mut r = Reader::new(payload, what);
    check_header(&mut r, CHECKPOINT_MAGIC)?;
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|e| validation(format!("{what}: config block is not UTF-8: {e}")))?;
    let cfg = model_config_from_text(cfg_text, what)?;
    let mut net = T2DNet::build(cfg)?;

    let mut seen = BTreeSet::new();
    while !r.done() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| validation(format!("{what}: parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let expected = net
            .tensor(&name)
            .ok_or_else(|| validation(format!("{what}: unexpected parameter '{name}'")))?
            .shape
            .clone();
        if shape != expected {
            return Err(validation(format!(
                "{what}: parameter '{name}' has shape {shape:?}, architecture wants {expected:?}"
            )));
        }
        if !seen.insert(name.clone()) {
            return Err(validation(format!("{what}: duplicate parameter '{name}'")));
        }
        let data = r.f32_values(shape.iter().product())?;
        net.set_tensor(&name, data)?;
    }
    if seen.len() != net.names().len() {
        let missing: Vec<_> = net
            .names()
            .iter()
            .filter(|n| !seen.contains(*n))
            .cloned()
            .collect();
        return Err(validation(format!(
            "{what}: missing parameters {missing:?}"
        )));
    }
    Ok(net)
}

pub fn write_checkpoint(path: &Path, net: &T2DNet) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(net))
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn read_checkpoint(path: &Path) -> Result<T2DNet> {
    let bytes = std::fs::read(path)
        .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    parse_checkpoint(&bytes, &path.display().to_string())
}

pub fn loss_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("iteration,lr,loss\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.iteration, p.lr, p.loss));
    }
    out
}

pub fn eval_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "case,dsc_coronal,dsc_sagittal,dsc_axial,dsc_fused,inter_slice,inter_slice_normalized,windows,total_macs\n",
    );
    for r in reports {
        let (windows, macs) = match &r.cost {
            Some(c) => (c.windows.to_string(), c.total_macs.to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.case,
            r.dsc_coronal,
            r.dsc_sagittal,
            r.dsc_axial,
            r.dsc_fused,
            r.inter_slice,
            r.inter_slice_normalized,
            windows,
            macs
        ));
    }
    out
}

/// Arithmetic mean over per-case rows, reported as the `mean` case.
pub fn aggregate_report(reports: &[EvalReport]) -> Option<EvalReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as Real;
    let mean = |f: fn(&EvalReport) -> Real| reports.iter().map(f).sum::<Real>() / n;
    Some(EvalReport {
        case: "mean".to_string(),
        dsc_coronal: mean(|r| r.dsc_coronal),
        dsc_sagittal: mean(|r| r.dsc_sagittal),
        dsc_axial: mean(|r| r.dsc_axial),
        dsc_fused: mean(|r| r.dsc_fused),
        inter_slice: mean(|r| r.inter_slice),
        inter_slice_normalized: mean(|r| r.inter_slice_normalized),
        cost: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub filename: String,
    pub seed: u64,
    pub family: String,
    pub split: String,
}

pub fn manifest_tsv(rows: &[ManifestRow]) -> String {
    let mut out = String::from("filename\tseed\tfamily\tsplit\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.filename, r.seed, r.family, r.split));
    }
    out
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| validation(format!("{}: empty manifest", path.display())))?;
    if header != "filename\tseed\tfamily\tsplit" {
        return Err(validation(format!(
            "{}: unexpected manifest header '{header}'",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(validation(format!(
                "{}: line {}: expected 4 tab-separated fields, got {}",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        rows.push(ManifestRow {
            filename: fields[0].to_string(),
            seed: fields[1].parse().map_err(|e| {
                validation(format!("{}: line {}: bad seed: {e}", path.display(), i + 2))
            })?,
            family: fields[2].to_string(),
            split: fields[3].to_string(),
        });
    }
    Ok(rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

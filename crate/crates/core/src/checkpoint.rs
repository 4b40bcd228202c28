//! Checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! "GLAE"                      4-byte magic
//! version        u32          FORMAT_VERSION
//! stage          u8           1 or 2
//! seed           u64
//! manifest_len   u32
//! manifest       UTF-8 `key = value` lines (architecture + run settings)
//! section_count  u32
//! section*       name_len u16, name, dtype u8 (4 = f32, 8 = f64),
//!                count u64, count little-endian values
//! sha256         32 bytes over everything before it
//! ```
//!
//! Sections are `backbone`, `head.vanilla`, optionally `head.balanced`, and
//! `history` (f64 rows of stage, epoch, l_sum, l_loc, l_hol, lr).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::config::{format_kv, parse_kv, parse_value};
use crate::error::{bail, Error, Result};
use crate::model::{Head, HeadConfig, HeadKind, Model, ModelConfig};
use crate::rearrange::FrGeometry;
use crate::tensor::Real;
use crate::trainer::Stage;

pub const MAGIC: &[u8; 4] = b"GLAE";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const HISTORY_COLS: usize = 6;

/// Mean per-sample losses of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub stage: u8,
    pub epoch: usize,
    pub l_sum: f64,
    pub l_loc: f64,
    pub l_hol: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub stage: Stage,
    pub seed: u64,
    pub model: Model<T>,
    pub history: Vec<EpochStats>,
    /// Extra `key = value` pairs stored alongside the architecture.
    pub manifest: Vec<(String, String)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(stage: Stage, seed: u64, model: Model<T>, history: Vec<EpochStats>) -> Self {
        Checkpoint {
            stage,
            seed,
            model,
            history,
            manifest: Vec::new(),
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn architecture(cfg: &ModelConfig) -> Vec<(String, String)> {
    let b = &cfg.backbone;
    let h = &cfg.head;
    [
        ("arch.input_channels", b.input_channels.to_string()),
        ("arch.input_size", b.input_size.to_string()),
        ("arch.widths", join(&b.widths)),
        ("arch.strides", join(&b.strides)),
        ("arch.norm_groups", b.norm_groups.to_string()),
        ("arch.backbone_seed", b.seed.to_string()),
        ("arch.head_kind", h.kind.name().to_string()),
        ("arch.max_age", h.max_age.to_string()),
        ("arch.r", h.geometry.r.to_string()),
        ("arch.kernel", h.geometry.kernel.to_string()),
        ("arch.stride", h.geometry.stride.to_string()),
        ("arch.proj_depth", h.proj_depth.to_string()),
        ("arch.proj_width", h.proj_width.to_string()),
        ("arch.head_seed", h.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn parse_architecture(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let get = |key: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Corrupt(format!("manifest lacks '{key}'")))
    };
    let num = |key: &str| -> Result<usize> { parse_value(key, get(key)?) };
    let list = |key: &str| -> Result<Vec<usize>> { get(key)?.split(',').map(|v| parse_value(key, v)).collect() };
    Ok(ModelConfig {
        backbone: BackboneConfig {
            input_channels: num("arch.input_channels")?,
            input_size: num("arch.input_size")?,
            widths: list("arch.widths")?,
            strides: list("arch.strides")?,
            norm_groups: num("arch.norm_groups")?,
            seed: parse_value("arch.backbone_seed", get("arch.backbone_seed")?)?,
        },
        head: HeadConfig {
            kind: HeadKind::parse(get("arch.head_kind")?)?,
            max_age: num("arch.max_age")?,
            geometry: FrGeometry {
                r: num("arch.r")?,
                kernel: num("arch.kernel")?,
                stride: num("arch.stride")?,
            },
            proj_depth: num("arch.proj_depth")?,
            proj_width: num("arch.proj_width")?,
            seed: parse_value("arch.head_seed", get("arch.head_seed")?)?,
        },
    })
}

fn put_section<T: Real>(out: &mut Vec<u8>, name: &str, values: &[T]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        v.write_le(out);
    }
}

pub fn encode<T: Real>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut manifest = architecture(&ckpt.model.config());
    manifest.extend(ckpt.manifest.iter().cloned());
    let manifest = format_kv(&manifest);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ckpt.stage.number());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    let m = &ckpt.model;
    let sections = 3 + m.balanced.is_some() as u32;
    out.extend_from_slice(&sections.to_le_bytes());
    put_section(&mut out, "backbone", &m.backbone.params.values);
    put_section(&mut out, "head.vanilla", &m.vanilla.params.values);
    if let Some(b) = &m.balanced {
        put_section(&mut out, "head.balanced", &b.params.values);
    }
    let history: Vec<f64> = ckpt
        .history
        .iter()
        .flat_map(|e| [e.stage as f64, e.epoch as f64, e.l_sum, e.l_loc, e.l_hol, e.lr])
        .collect();
    put_section(&mut out, "history", &history);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Corrupt, "truncated while reading {what}");
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}

fn read_values<T: Real>(r: &mut Reader, name: &str) -> Result<Vec<T>> {
    let width = r.u8(name)? as usize;
    let count = r.u64(name)? as usize;
    let raw = r.take(count.saturating_mul(width), name)?;
    Ok(match width {
        4 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        8 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        _ => bail!(Corrupt, "section '{name}' has unknown element width {width}"),
    })
}

fn fill<T: Real>(dst: &mut [T], src: Vec<T>, name: &str) -> Result<()> {
    if dst.len() != src.len() {
        bail!(
            Corrupt,
            "section '{name}' holds {} values, architecture needs {}",
            src.len(),
            dst.len()
        );
    }
    dst.copy_from_slice(&src);
    Ok(())
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        bail!(Corrupt, "not a checkpoint (bad magic)");
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < r.pos + DIGEST_LEN {
        bail!(Corrupt, "truncated before checksum");
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        bail!(Corrupt, "checksum mismatch (truncated or modified file)");
    }
    let mut r = Reader {
        bytes: body,
        pos: r.pos,
    };
    let stage = Stage::from_number(r.u8("stage")?).map_err(|e| Error::Corrupt(e.to_string()))?;
    let seed = r.u64("seed")?;
    let mlen = r.u32("manifest length")? as usize;
    let text =
        std::str::from_utf8(r.take(mlen, "manifest")?).map_err(|_| Error::Corrupt("manifest is not UTF-8".into()))?;
    let pairs = parse_kv(text)?;
    let cfg = parse_architecture(&pairs)?;
    let mut model = Model::<T>::new(&cfg)?;
    let mut history = Vec::new();
    let mut seen = Vec::new();
    for _ in 0..r.u32("section count")? {
        let len = r.u16("section name")? as usize;
        let name = String::from_utf8_lossy(r.take(len, "section name")?).into_owned();
        match name.as_str() {
            "backbone" => fill(&mut model.backbone.params.values, read_values(&mut r, &name)?, &name)?,
            "head.vanilla" => fill(&mut model.vanilla.params.values, read_values(&mut r, &name)?, &name)?,
            "head.balanced" => {
                let mut head = Head::new(&cfg.head, cfg.backbone.output_shape())?;
                fill(&mut head.params.values, read_values(&mut r, &name)?, &name)?;
                model.balanced = Some(head);
            }
            "history" => {
                let rows: Vec<f64> = read_values(&mut r, &name)?;
                if !rows.len().is_multiple_of(HISTORY_COLS) {
                    bail!(
                        Corrupt,
                        "history length {} is not a multiple of {HISTORY_COLS}",
                        rows.len()
                    );
                }
                history = rows
                    .chunks(HISTORY_COLS)
                    .map(|c| EpochStats {
                        stage: c[0] as u8,
                        epoch: c[1] as usize,
                        l_sum: c[2],
                        l_loc: c[3],
                        l_hol: c[4],
                        lr: c[5],
                    })
                    .collect();
            }
            other => bail!(Corrupt, "unknown section '{other}'"),
        }
        seen.push(name);
    }
    for required in ["backbone", "head.vanilla"] {
        if !seen.iter().any(|s| s == required) {
            bail!(Corrupt, "missing section '{required}'");
        }
    }
    if stage == Stage::Two && model.balanced.is_none() {
        bail!(Corrupt, "stage-2 checkpoint without a balanced head");
    }
    if r.pos != body.len() {
        bail!(Corrupt, "{} trailing bytes", body.len() - r.pos);
    }
    let manifest = pairs.into_iter().filter(|(k, _)| !k.starts_with("arch.")).collect();
    Ok(Checkpoint {
        stage,
        seed,
        model,
        history,
        manifest,
    })
}

pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_size: 8,
                widths: vec![4, 8],
                strides: vec![2, 1],
                norm_groups: 2,
                seed: 3,
                ..BackboneConfig::default()
            },
            head: HeadConfig {
                max_age: 6,
                geometry: FrGeometry::aligned(2),
                proj_depth: 1,
                proj_width: 5,
                seed: 4,
                ..HeadConfig::default()
            },
        }
    }

    fn sample(stage: Stage) -> Checkpoint<f32> {
        let mut model = Model::<f32>::new(&small()).unwrap();
        if stage == Stage::Two {
            let mut b = model.vanilla.clone();
            b.params.values.iter_mut().for_each(|v| *v *= 0.5);
            model.balanced = Some(b);
        }
        let mut ck = Checkpoint::new(
            stage,
            99,
            model,
            vec![EpochStats {
                stage: 1,
                epoch: 0,
                l_sum: 3.5,
                l_loc: 2.0,
                l_hol: 1.5,
                lr: 0.01,
            }],
        );
        ck.manifest.push(("run.note".into(), "x".into()));
        ck
    }

    #[test]
    fn round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for stage in [Stage::One, Stage::Two] {
            let ck = sample(stage);
            let path = dir.path().join("m.ckpt");
            save_checkpoint(&ck, &path).unwrap();
            let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.model.balanced.is_some(), stage == Stage::Two);
            assert_eq!(encode(&back), encode(&ck));
        }
    }

    #[test]
    fn truncation_and_corruption() {
        let bytes = encode(&sample(Stage::Two));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode::<f32>(&bytes[..cut]), Err(Error::Corrupt(_))),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode::<f32>(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn version_mismatch_refused() {
        let mut bytes = encode(&sample(Stage::One));
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        match decode::<f32>(&bytes) {
            Err(Error::Version {
                found: 7,
                expected: FORMAT_VERSION,
            }) => {}
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn loads_across_precision() {
        let ck = sample(Stage::One);
        let wide: Checkpoint<f64> = decode(&encode(&ck)).unwrap();
        let a: Vec<f64> = ck.model.backbone.params.values.iter().map(|&v| v as f64).collect();
        assert_eq!(wide.model.backbone.params.values, a);
    }
}

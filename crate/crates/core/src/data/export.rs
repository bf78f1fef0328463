//! PNG export of episodes: 8-bit RGB images, 1-bit masks and a TSV manifest.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use mcinet_autodiff::Tensor;
use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};
use sha2::{Digest, Sha256};

use super::shapes::ShapeInstance;
use super::{Episode, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "episode\trole\tshot\tclass\tfold\tseed\timage\tmask";

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image(format!("{}: {}", path.display(), e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved RGB bytes of a `[3, h, w]` tensor.
pub fn rgb_bytes(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let sh = image.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::shape(format!("expected [3, H, W] image, got {:?}", sh)));
    }
    let (h, w) = (sh[1], sh[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_u8(d[c * h * w + p]));
        }
    }
    Ok((h, w, out))
}

pub fn write_rgb_bytes(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = Encoder::new(file, w as u32, h as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

pub fn write_rgb_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, bytes) = rgb_bytes(image)?;
    write_rgb_bytes(path, w, h, &bytes)
}

/// 1-bit grayscale PNG; pixels ≥ 0.5 are written as 1.
pub fn write_mask_png(path: &Path, mask: &Tensor) -> Result<()> {
    let sh = mask.shape();
    if sh.len() != 2 {
        return Err(Error::shape(format!("expected [H, W] mask, got {:?}", sh)));
    }
    let (h, w) = (sh[0], sh[1]);
    let row_bytes = w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] >= 0.5 {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = Encoder::new(file, w as u32, h as u32);
    enc.set_color(ColorType::Grayscale);
    enc.set_depth(BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&packed).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let mut dec = Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let (info, buf) = decode(path)?;
    if info.color_type != ColorType::Rgb || info.bit_depth != BitDepth::Eight {
        return Err(image_err(path, format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = f64::from(buf[p * 3 + c]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

pub fn read_mask_png(path: &Path) -> Result<Tensor> {
    let (info, buf) = decode(path)?;
    if info.color_type != ColorType::Grayscale || info.bit_depth != BitDepth::One {
        return Err(image_err(path, format!("expected 1-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let row_bytes = info.line_size;
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let bit = buf[y * row_bytes + x / 8] & (0x80 >> (x % 8));
            data[y * w + x] = f64::from(u8::from(bit != 0));
        }
    }
    Ok(Tensor::new(vec![h, w], data)?)
}

/// `round(255·(0.5·img + 0.5·color·mask))` per channel, interleaved RGB.
pub fn overlay(image: &Tensor, mask: &[bool], color: [u8; 3]) -> Result<Vec<u8>> {
    let (h, w, _) = rgb_bytes(image)?;
    if mask.len() != h * w {
        return Err(Error::shape(format!("mask of {} pixels for a {}×{} image", mask.len(), h, w)));
    }
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for (p, &m) in mask.iter().enumerate() {
        for (c, &col) in color.iter().enumerate() {
            let tint = if m { f64::from(col) / 255.0 } else { 0.0 };
            out.push(to_u8(0.5 * d[c * h * w + p] + 0.5 * tint));
        }
    }
    Ok(out)
}

/// One row of the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub episode: usize,
    pub role: String,
    pub shot: usize,
    pub class_id: usize,
    pub fold_id: usize,
    pub seed: u64,
    pub image: String,
    pub mask: String,
}

/// Writes every episode under `dir` and returns the manifest path.
pub fn export_episodes(dir: &Path, episodes: &[Episode]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (i, e) in episodes.iter().enumerate() {
        let members = e
            .supports
            .iter()
            .enumerate()
            .map(|(k, s)| ("support", k, s))
            .chain(std::iter::once(("query", 0, &e.query)));
        for (role, shot, s) in members {
            let stem = format!("ep{:05}_{}{}", i, role, shot);
            let (img, mask) = (format!("{}.png", stem), format!("{}_mask.png", stem));
            write_rgb_png(&dir.join(&img), &s.image)?;
            write_mask_png(&dir.join(&mask), &s.mask)?;
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                i, role, shot, e.class_id, e.fold_id, e.seed, img, mask
            ));
        }
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, &manifest)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::validation(format!("{}: missing manifest header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::validation(format!("{}: malformed manifest row {:?}", path.display(), l));
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
            Ok(ManifestRow {
                episode: num(f[0])? as usize,
                role: f[1].to_string(),
                shot: num(f[2])? as usize,
                class_id: num(f[3])? as usize,
                fold_id: num(f[4])? as usize,
                seed: num(f[5])?,
                image: f[6].to_string(),
                mask: f[7].to_string(),
            })
        })
        .collect()
}

/// Reloads episodes written by [`export_episodes`]. Shape poses are not
/// stored, so `target` is a placeholder.
pub fn load_episodes(dir: &Path) -> Result<Vec<Episode>> {
    let rows = read_manifest(&dir.join(MANIFEST_NAME))?;
    let mut episodes: Vec<Episode> = Vec::new();
    let placeholder = ShapeInstance {
        family: 0,
        cx: 0.0,
        cy: 0.0,
        radius: 0.0,
        angle: 0.0,
    };
    let mut pending: Vec<Sample> = Vec::new();
    for r in rows {
        let sample = Sample {
            image: read_rgb_png(&dir.join(&r.image))?,
            mask: read_mask_png(&dir.join(&r.mask))?,
            target: ShapeInstance {
                family: r.class_id,
                ..placeholder
            },
        };
        match r.role.as_str() {
            "support" => pending.push(sample),
            "query" => {
                if pending.is_empty() || r.episode != episodes.len() {
                    return Err(Error::validation(format!("episode {} is out of order or has no supports", r.episode)));
                }
                episodes.push(Episode {
                    supports: std::mem::take(&mut pending),
                    query: sample,
                    class_id: r.class_id,
                    fold_id: r.fold_id,
                    seed: r.seed,
                });
            }
            other => return Err(Error::validation(format!("unknown manifest role {:?}", other))),
        }
    }
    Ok(episodes)
}

/// SHA-256 of a manifest file.
pub fn manifest_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

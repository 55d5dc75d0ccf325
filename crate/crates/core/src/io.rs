//! File formats: Middlebury `.flo`, 8-bit PNG, binary PGM/PPM.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{Disparity, FlowField, MaskMap};
use crate::image::Image;

const FLO_MAGIC: &[u8; 4] = b"PIEH";
/// Sanity bound on `.flo` dimensions, as in the reference reader.
const FLO_MAX_DIM: u32 = 100_000;

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data().len() * 4);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!("flo file truncated at {} bytes", bytes.len())));
    }
    if &bytes[0..4] != FLO_MAGIC {
        return Err(Error::Format("bad flo magic".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width == 0 || height == 0 || width > FLO_MAX_DIM || height > FLO_MAX_DIM {
        return Err(Error::Format(format!("flo dimensions {width}x{height} out of range")));
    }
    let expected = (width as u64)
        .checked_mul(height as u64)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::Format("flo dimensions overflow".into()))?;
    if bytes.len() as u64 != expected {
        return Err(Error::Format(format!(
            "flo payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    FlowField::new(height as usize, width as usize, data)
}

/// Writes a `.flo` file. Values are stored as 32-bit floats.
pub fn flow_write(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_flo(flow))
}

pub fn flow_read(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
        .unwrap_or(false)
}

/// Reads an 8-bit PNG or a binary PGM/PPM, mapping `[0, 255]` to `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if has_ext(path, &["pgm", "ppm", "pnm"]) {
        let pnm = decode_pnm(&fs::read(path)?)?;
        let scale = pnm.maxval as f64;
        return Image::new(
            pnm.height,
            pnm.width,
            pnm.channels,
            pnm.samples.into_iter().map(|v| v as f64 / scale).collect(),
        );
    }
    let decoded = image::open(path).map_err(|e| Error::Codec(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let color = decoded.color();
    if color.channel_count() == 1 || color.channel_count() == 2 {
        let buf = decoded.into_luma8();
        Image::new(h, w, 1, buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
    } else {
        let buf = decoded.into_rgb8();
        Image::new(h, w, 3, buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
    }
}

/// Writes an image as 8-bit PNG, or PGM/PPM when the extension says so.
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    if has_ext(path, &["pgm", "ppm", "pnm"]) {
        let samples: Vec<u16> = bytes.iter().map(|&b| b as u16).collect();
        return write_atomic(path, &encode_pnm(img.height(), img.width(), img.channels(), 255, &samples)?);
    }
    let color = match img.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Codec(format!("cannot write {c}-channel image as PNG"))),
    };
    let mut png = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut png),
        &bytes,
        img.width() as u32,
        img.height() as u32,
        color,
    )
    .map_err(|e| Error::Codec(e.to_string()))?;
    write_atomic(path, &png)
}

#[derive(Debug)]
struct Pnm {
    width: usize,
    height: usize,
    channels: usize,
    maxval: u16,
    samples: Vec<u16>,
}

fn encode_pnm(h: usize, w: usize, channels: usize, maxval: u16, samples: &[u16]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Codec(format!("cannot write {c}-channel PNM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    for &s in samples {
        if maxval > 255 {
            out.extend_from_slice(&s.to_be_bytes());
        } else {
            out.push(s as u8);
        }
    }
    Ok(out)
}

fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM field {s}")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PNM maxval {maxval} out of range")));
    }
    let wide = maxval > 255;
    let n = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format("PNM dimensions overflow".into()))?;
    let need = if wide { n * 2 } else { n };
    let raster = bytes.get(pos..pos + need).ok_or_else(|| Error::Format("truncated PNM raster".into()))?;
    let samples = if wide {
        raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    Ok(Pnm { width, height, channels, maxval: maxval as u16, samples })
}

/// Masks are stored as 8-bit PGM, 0 or 255.
pub fn write_mask_pgm(mask: &MaskMap, path: impl AsRef<Path>) -> Result<()> {
    let samples: Vec<u16> = mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write_atomic(path.as_ref(), &encode_pnm(mask.height(), mask.width(), 1, 255, &samples)?)
}

/// Reads a single-channel PGM as a mask, thresholding at half range.
pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<MaskMap> {
    let pnm = decode_pnm(&fs::read(path)?)?;
    if pnm.channels != 1 {
        return Err(Error::Format("mask PGM must be single channel".into()));
    }
    let half = pnm.maxval as f64 / 2.0;
    MaskMap::new(
        pnm.height,
        pnm.width,
        pnm.samples.iter().map(|&s| if s as f64 >= half { 1.0 } else { 0.0 }).collect(),
    )
}

/// Disparity as 16-bit PGM, value = round(256 * d).
pub fn write_disparity_pgm(disp: &Disparity, path: impl AsRef<Path>) -> Result<()> {
    let samples: Vec<u16> = disp
        .data()
        .iter()
        .map(|&d| (d * 256.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    write_atomic(path.as_ref(), &encode_pnm(disp.height(), disp.width(), 1, 65535, &samples)?)
}

pub fn read_disparity_pgm(path: impl AsRef<Path>) -> Result<Disparity> {
    let pnm = decode_pnm(&fs::read(path)?)?;
    if pnm.channels != 1 || pnm.maxval <= 255 {
        return Err(Error::Format("disparity must be a 16-bit single-channel PGM".into()));
    }
    Disparity::new(pnm.height, pnm.width, pnm.samples.iter().map(|&s| s as f64 / 256.0).collect())
}

//! Binary and image formats for clouds, part labels and rendered views.
//!
//! * `PCF1`: magic, `u32` point count, then `n × 3` `f32` coordinates.
//! * `SEG1`: magic, `u32` count, then one `u8` label per point or face.
//! * Flat dumps: `width × height` row-major `f32` pixels, no header.
//!
//! Every integer and float is little-endian.

use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use crossmodal_core::pointcloud::PointCloud;
use crossmodal_core::render::Image;

use crate::error::{Error, IoContext, Result};

pub const PCF_MAGIC: &[u8; 4] = b"PCF1";
pub const SEG_MAGIC: &[u8; 4] = b"SEG1";

/// Splits `magic | u32 count | payload`, checking the payload length.
fn split_header<'a>(raw: &'a [u8], magic: &[u8; 4], item: usize, what: &str) -> Result<(usize, &'a [u8])> {
    if raw.len() < 4 || &raw[..4] != magic {
        return Err(Error::Format(format!("{what}: missing `{}` magic", String::from_utf8_lossy(magic))));
    }
    let count = raw
        .get(4..8)
        .ok_or_else(|| Error::Truncated(format!("{what}: missing count")))?;
    let n = u32::from_le_bytes(count.try_into().unwrap()) as usize;
    let payload = &raw[8..];
    let need = n * item;
    if payload.len() < need {
        return Err(Error::Truncated(format!("{what}: {n} entries need {need} bytes, found {}", payload.len())));
    }
    if payload.len() > need {
        return Err(Error::Format(format!("{what}: {} trailing bytes", payload.len() - need)));
    }
    Ok((n, payload))
}

fn count_u32(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what}: {n} entries do not fit a u32 count")))
}

pub fn encode_pcf(cloud: &PointCloud) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(PCF_MAGIC);
    out.extend_from_slice(&count_u32(cloud.len(), "point cloud")?);
    for p in &cloud.points {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pcf(raw: &[u8]) -> Result<PointCloud> {
    let (_, payload) = split_header(raw, PCF_MAGIC, 12, "point cloud")?;
    let points = payload
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2)]
        })
        .collect::<Vec<_>>();
    if points.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Format("point cloud: non-finite coordinate".into()));
    }
    Ok(PointCloud::new(points))
}

pub fn encode_seg(labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(SEG_MAGIC);
    out.extend_from_slice(&count_u32(labels.len(), "part labels")?);
    out.extend_from_slice(labels);
    Ok(out)
}

pub fn decode_seg(raw: &[u8]) -> Result<Vec<u8>> {
    Ok(split_header(raw, SEG_MAGIC, 1, "part labels")?.1.to_vec())
}

pub fn encode_f32_image(image: &Image) -> Vec<u8> {
    image.pixels.iter().flat_map(|p| p.to_le_bytes()).collect()
}

pub fn decode_f32_image(raw: &[u8], width: usize, height: usize) -> Result<Image> {
    let need = width * height * 4;
    if raw.len() < need {
        return Err(Error::Truncated(format!("{width}x{height} image needs {need} bytes, found {}", raw.len())));
    }
    if raw.len() > need {
        return Err(Error::Format(format!("{width}x{height} image has {} trailing bytes", raw.len() - need)));
    }
    let pixels = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Image::from_pixels(width, height, pixels)?)
}

/// 8-bit grayscale PNG; intensities are clamped and rounded to `0..=255`.
pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let png_err = |e: png::EncodingError| Error::Format(format!("png encoding: {e}"));
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(out)
}

pub fn decode_png(raw: &[u8]) -> Result<Image> {
    let png_err = |e: png::DecodingError| Error::Format(format!("png decoding: {e}"));
    let mut reader = png::Decoder::new(Cursor::new(raw)).read_info().map_err(png_err)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("expected an 8-bit grayscale png".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(w * h)];
    let frame = reader.next_frame(&mut buf).map_err(png_err)?;
    let pixels = buf[..frame.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image::from_pixels(w, h, pixels)?)
}

/// `x,y,z` rows for inspection in spreadsheet or plotting tools.
pub fn write_cloud_csv(path: &Path, cloud: &PointCloud, labels: Option<&[u8]>) -> Result<()> {
    let file = std::fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    let header = if labels.is_some() { "x,y,z,part" } else { "x,y,z" };
    writeln!(w, "{header}").at(path)?;
    for (i, [x, y, z]) in cloud.points.iter().enumerate() {
        match labels {
            Some(l) => writeln!(w, "{x},{y},{z},{}", l[i]),
            None => writeln!(w, "{x},{y},{z}"),
        }
        .at(path)?;
    }
    w.flush().at(path)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).at(path)
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

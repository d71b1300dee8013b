//! The VOC indexed colour map and palette-PNG input/output.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Result, SegError};

/// RGB colour of palette index `index` in the VOC colour map (bit-interleaved
/// class id: bit 0 → red, bit 1 → green, bit 2 → blue, most significant first).
pub fn voc_color(index: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = index;
    for shift in (0..8).rev() {
        for (channel, value) in rgb.iter_mut().enumerate() {
            *value |= ((c >> channel) & 1) << shift;
        }
        c >>= 3;
    }
    rgb
}

/// Full 256-entry palette as packed RGB triples.
pub fn voc_palette() -> Vec<u8> {
    (0..=255u8).flat_map(voc_color).collect()
}

/// Raw palette indices of an 8-bit indexed (or grayscale) PNG.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaletteIndices {
    pub width: usize,
    pub height: usize,
    pub indices: Vec<u8>,
}

/// Reads the stored indices without expanding the palette. Sub-byte indexed
/// depths are unpacked; grayscale 8-bit images are taken as indices.
pub fn read_palette_png(path: &Path) -> Result<PaletteIndices> {
    let file = File::open(path).map_err(SegError::io(path))?;
    let format_err = |msg: String| SegError::MaskFormat {
        path: path.to_path_buf(),
        msg,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| format_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(e.to_string()))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let depth = info.bit_depth as usize;
    match (info.color_type, depth) {
        (png::ColorType::Indexed, 1 | 2 | 4 | 8) | (png::ColorType::Grayscale, 8) => {}
        (color, depth) => {
            return Err(format_err(format!(
                "expected a palette-indexed mask, found {color:?} at {depth} bits"
            )))
        }
    }
    let per_byte = 8 / depth;
    let mask = ((1u16 << depth) - 1) as u8;
    let mut indices = Vec::with_capacity(width * height);
    for row in buf.chunks(info.line_size).take(height) {
        indices.extend((0..width).map(|x| {
            let byte = row[x / per_byte];
            let shift = 8 - depth * (x % per_byte + 1);
            (byte >> shift) & mask
        }));
    }
    Ok(PaletteIndices {
        width,
        height,
        indices,
    })
}

/// Writes 8-bit indices as a PNG carrying the VOC palette.
pub fn write_palette_png(path: &Path, width: usize, height: usize, indices: &[u8]) -> Result<()> {
    if indices.len() != width * height || width == 0 || height == 0 {
        return Err(SegError::EmptyRaster { width, height });
    }
    let file = File::create(path).map_err(SegError::io(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(voc_palette());
    let to_err = |e: png::EncodingError| SegError::MaskFormat {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(indices).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_voc_colours() {
        assert_eq!(voc_color(0), [0, 0, 0]);
        assert_eq!(voc_color(1), [128, 0, 0]);
        assert_eq!(voc_color(2), [0, 128, 0]);
        assert_eq!(voc_color(15), [192, 128, 128]); // person
        assert_eq!(voc_color(20), [0, 64, 128]); // tv/monitor
        assert_eq!(voc_color(255), [224, 224, 192]); // void
    }

    #[test]
    fn palette_png_round_trip_keeps_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let indices = vec![0, 1, 255, 15, 20, 0];
        write_palette_png(&path, 3, 2, &indices).unwrap();
        let back = read_palette_png(&path).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        assert_eq!(back.indices, indices);
    }
}

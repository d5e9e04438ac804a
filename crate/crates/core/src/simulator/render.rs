//! PNG renders of semantic maps and gate maps. Row 0 is the top of the image.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

use super::city::{SemanticClass, SemanticMap};

/// RGB per class, indexed by class.
pub const PALETTE: [[u8; 3]; SemanticClass::COUNT] = [
    [24, 24, 24],    // background
    [250, 200, 40],  // divider
    [60, 140, 240],  // crossing
    [230, 60, 60],   // boundary
];

fn encode_png(width: usize, height: usize, color: png::ColorType, pixels: &[u8], out: impl Write) -> Result<()> {
    let mut enc = png::Encoder::new(out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(pixels).map_err(io)?;
    writer.finish().map_err(io)
}

pub fn semantic_pixels(map: &SemanticMap) -> Vec<u8> {
    map.labels().iter().flat_map(|l| PALETTE[l.index()]).collect()
}

/// Mean gate over channels, clamped to `[0, 1]` and scaled to `0..=255`.
pub fn gate_pixels(gate: &FeatureMap<f32>) -> Vec<u8> {
    let c = gate.channels();
    gate.data()
        .chunks_exact(c)
        .map(|z| {
            let m = z.iter().sum::<f32>() / c as f32;
            (m.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

pub fn write_semantic_png(map: &SemanticMap, out: impl Write) -> Result<()> {
    encode_png(map.cols(), map.rows(), png::ColorType::Rgb, &semantic_pixels(map), out)
}

pub fn write_gate_png(gate: &FeatureMap<f32>, out: impl Write) -> Result<()> {
    encode_png(gate.cols(), gate.rows(), png::ColorType::Grayscale, &gate_pixels(gate), out)
}

pub fn render_semantic(map: &SemanticMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_semantic_png(map, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn render_gate(gate: &FeatureMap<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_gate_png(gate, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::city::{Axis, CityMap, Road};

    fn decode_png(bytes: &[u8]) -> (png::OutputInfo, Vec<u8>) {
        let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (info, buf)
    }

    #[test]
    fn background_is_uniform() {
        let map = SemanticMap::filled(5, 7, SemanticClass::Background);
        let mut bytes = Vec::new();
        write_semantic_png(&map, &mut bytes).unwrap();
        let (info, pixels) = decode_png(&bytes);
        assert_eq!((info.width, info.height), (7, 5));
        assert!(pixels.chunks(3).all(|p| p == PALETTE[0]));
    }

    #[test]
    fn single_road_pixels_match_layout() {
        let y0 = 10.02;
        let road = Road {
            axis: Axis::X,
            offset: y0,
            from: 0.0,
            to: 20.0,
            width: 6.0,
        };
        let city = CityMap::from_roads(0, 20.0, 0.1, vec![road]).unwrap();
        let mut bytes = Vec::new();
        write_semantic_png(&city.ground_truth, &mut bytes).unwrap();
        let (info, pixels) = decode_png(&bytes);
        let px = |x: f64, y: f64| {
            let (r, c) = ((x / 0.1) as usize, (y / 0.1) as usize);
            let i = 3 * (r * info.width as usize + c);
            [pixels[i], pixels[i + 1], pixels[i + 2]]
        };
        for x in [2.05, 11.05, 17.95] {
            assert_eq!(px(x, y0), PALETTE[SemanticClass::Divider.index()]);
            assert_eq!(px(x, y0 + 3.0), PALETTE[SemanticClass::Boundary.index()]);
            assert_eq!(px(x, y0 - 3.0), PALETTE[SemanticClass::Boundary.index()]);
            assert_eq!(px(x, y0 + 1.5), PALETTE[SemanticClass::Background.index()]);
        }
    }

    #[test]
    fn gate_is_grayscale_mean() {
        let gate = FeatureMap::from_vec(1, 3, 2, vec![0.0f32, 0.0, 1.0, 1.0, 0.25, 0.75]).unwrap();
        let mut bytes = Vec::new();
        write_gate_png(&gate, &mut bytes).unwrap();
        let (info, pixels) = decode_png(&bytes);
        assert_eq!(info.color_type, png::ColorType::Grayscale);
        assert_eq!(pixels, vec![0, 255, 128]);
    }

    #[test]
    fn render_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        render_semantic(&SemanticMap::filled(2, 2, SemanticClass::Crossing), &path).unwrap();
        assert!(std::fs::metadata(&path).unwrap().len() > 0);
        assert!(render_semantic(&SemanticMap::filled(2, 2, SemanticClass::Crossing), &dir.path().join("no/such/x.png")).is_err());
    }
}

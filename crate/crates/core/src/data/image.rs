//! Frame containers and their PNG encodings: 16-bit grayscale depth in
//! millimetres, 8-bit RGB colour and 8-bit grayscale masks (0 / 255).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::error::{Error, Result};

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub millimeters: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

impl RgbFrame {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Binary garment mask: 1 = garment, 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl Mask {
    pub fn coverage(&self) -> f64 {
        self.values.iter().filter(|&&v| v != 0).count() as f64 / self.values.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![1; width * height],
        }
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    encoder.set_compression(png::Compression::Fast);
    let encode_err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

fn read_png(path: &Path, what: &str) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            context: format!("missing {what} frame"),
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })?;
    let decode_err = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(decode_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn write_depth_png(path: &Path, frame: &DepthFrame) -> Result<()> {
    let bytes: Vec<u8> = frame.millimeters.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, frame.width, frame.height, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

pub fn read_depth_png(path: &Path) -> Result<DepthFrame> {
    let (info, buf) = read_png(path, "depth")?;
    if info.color_type != ColorType::Grayscale || info.bit_depth != BitDepth::Sixteen {
        return Err(Error::Data(format!(
            "{}: depth frames must be 16-bit grayscale, got {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    Ok(DepthFrame {
        width: info.width as usize,
        height: info.height as usize,
        millimeters: buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
    })
}

pub fn write_rgb_png(path: &Path, frame: &RgbFrame) -> Result<()> {
    write_png(path, frame.width, frame.height, ColorType::Rgb, BitDepth::Eight, &frame.pixels)
}

pub fn read_rgb_png(path: &Path) -> Result<RgbFrame> {
    let (info, buf) = read_png(path, "rgb")?;
    if info.color_type != ColorType::Rgb || info.bit_depth != BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: colour frames must be 8-bit RGB, got {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    Ok(RgbFrame {
        width: info.width as usize,
        height: info.height as usize,
        pixels: buf,
    })
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.values.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_png(path, mask.width, mask.height, ColorType::Grayscale, BitDepth::Eight, &bytes)
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let (info, buf) = read_png(path, "mask")?;
    if info.color_type != ColorType::Grayscale || info.bit_depth != BitDepth::Eight {
        return Err(Error::Data(format!("{}: masks must be 8-bit grayscale", path.display())));
    }
    Ok(Mask {
        width: info.width as usize,
        height: info.height as usize,
        values: buf.into_iter().map(|v| u8::from(v != 0)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let depth = DepthFrame {
            width: 3,
            height: 2,
            millimeters: vec![0, 1, 1500, 2000, 65535, 42],
        };
        let p = dir.path().join(frame_file_name(7));
        assert!(p.ends_with("frame_00007.png"));
        write_depth_png(&p, &depth).unwrap();
        assert_eq!(read_depth_png(&p).unwrap(), depth);

        let rgb = RgbFrame {
            width: 2,
            height: 1,
            pixels: vec![1, 2, 3, 250, 128, 0],
        };
        let p = dir.path().join("rgb.png");
        write_rgb_png(&p, &rgb).unwrap();
        assert_eq!(read_rgb_png(&p).unwrap(), rgb);
        // wrong kind of image for a depth frame
        assert!(read_depth_png(&p).is_err());

        let mask = Mask {
            width: 2,
            height: 2,
            values: vec![0, 1, 1, 0],
        };
        let p = dir.path().join("mask.png");
        write_mask_png(&p, &mask).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), mask);
    }

    #[test]
    fn missing_frame_names_the_path() {
        let err = read_depth_png(Path::new("/no/such/frame_00000.png")).unwrap_err();
        assert!(err.to_string().contains("/no/such/frame_00000.png"));
        assert_eq!(err.exit_code(), 2);
    }
}

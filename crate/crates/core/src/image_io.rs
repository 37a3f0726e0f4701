//! Lossless raster input/output (PNG and PNM) for scenes and frames.

use crate::error::{CoreError, Result};
use crate::render::{SimFrame, SourceImage};
use image::DynamicImage;
use ndarray::Array2;
use std::path::Path;

/// Loads an 8- or 16-bit raster as a source image with values in [0, 1].
/// Gray stays single-channel; anything with color becomes RGB.
pub fn load_source_image(path: &Path) -> Result<SourceImage> {
    let img = image::open(path).map_err(|e| CoreError::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let ch = Array2::from_shape_fn((h, w), |(r, c)| {
                buf.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
            });
            SourceImage::gray(ch)
        }
        DynamicImage::ImageLuma16(buf) => {
            let ch = Array2::from_shape_fn((h, w), |(r, c)| {
                buf.get_pixel(c as u32, r as u32).0[0] as f64 / 65535.0
            });
            SourceImage::gray(ch)
        }
        other => {
            let rgb = other.to_rgb16();
            let channels = (0..3)
                .map(|k| {
                    Array2::from_shape_fn((h, w), |(r, c)| {
                        rgb.get_pixel(c as u32, r as u32).0[k] as f64 / 65535.0
                    })
                })
                .collect();
            SourceImage::new(channels)
        }
    }
}

/// Writes a frame as a 16-bit PNG/PNM (gray or RGB by channel count).
/// Values are clamped to [0, 1] at quantization only.
pub fn save_frame(frame: &SimFrame, path: &Path) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    match frame.channels.len() {
        1 => {
            let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
            for r in 0..h {
                for c in 0..w {
                    buf.put_pixel(c as u32, r as u32, image::Luma([quant(frame.channels[0][[r, c]])]));
                }
            }
            buf.save(path)
                .map_err(|e| CoreError::Image(format!("{}: {e}", path.display())))
        }
        3 => {
            let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
            for r in 0..h {
                for c in 0..w {
                    let px = [
                        quant(frame.channels[0][[r, c]]),
                        quant(frame.channels[1][[r, c]]),
                        quant(frame.channels[2][[r, c]]),
                    ];
                    buf.put_pixel(c as u32, r as u32, image::Rgb(px));
                }
            }
            buf.save(path)
                .map_err(|e| CoreError::Image(format!("{}: {e}", path.display())))
        }
        n => Err(CoreError::Config(format!("cannot save a {n}-channel frame"))),
    }
}

#![allow(dead_code)]

use std::path::Path;

use cnf_core::data::CLASS_NAMES;
use image::{Rgb, RgbImage};

/// Base colour of class `c`: a distinct corner of the RGB cube.
pub fn class_color(c: usize) -> [u8; 3] {
    let level = |bit: usize| if (c >> bit) & 1 == 1 { 200 } else { 50 };
    [level(2), level(1), level(0)]
}

/// Class colour shifted per image so every file has distinct pixels.
pub fn image_color(c: usize, i: usize) -> [u8; 3] {
    let base = class_color(c);
    let jitter = |k: usize| ((i * (3 + 2 * k) + 7 * k) % 21) as u8;
    [base[0] + jitter(0), base[1] + jitter(1), base[2] + jitter(2)]
}

pub fn write_solid_png(path: &Path, color: [u8; 3], width: u32, height: u32) {
    RgbImage::from_pixel(width, height, Rgb(color)).save(path).unwrap();
}

/// Writes `counts[c]` solid-colour PNGs under `root/CLASS_NAMES[c]/`.
pub fn write_tree(root: &Path, counts: &[usize], side: u32) {
    for (c, &count) in counts.iter().enumerate() {
        let dir = root.join(CLASS_NAMES[c]);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..count {
            write_solid_png(&dir.join(format!("img_{i:05}.png")), image_color(c, i), side, side);
        }
    }
}

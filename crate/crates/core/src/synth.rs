//! Procedural dataset of visually separable classes for desk-scale runs.
//!
//! Each class has a base colour drawn without replacement from a 5-level
//! grid per channel, plus an oriented stripe texture. Two different classes
//! therefore differ by at least [`SEPARATION_MARGIN`] in some channel of
//! their mean colour. Images add a random stripe phase, a brightness offset
//! and pixel noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};

const LEVELS: [u8; 5] = [40, 85, 130, 175, 220];
const STREAM_SYNTH: u64 = 5;
pub const IMAGE_SIDE: u32 = 84;
/// Minimum Chebyshev distance between the mean colours of two classes.
pub const SEPARATION_MARGIN: u8 = 45;
pub const MAX_CLASSES: usize = LEVELS.len() * LEVELS.len() * LEVELS.len();
const STRIPE_AMPLITUDE: f64 = 20.0;
const BRIGHTNESS_JITTER: f64 = 8.0;
const NOISE_STD: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthClass {
    pub name: String,
    pub color: [u8; 3],
    /// Stripe direction in radians.
    pub angle: f64,
    /// Stripe periods across the image.
    pub cycles: f64,
}

/// Class parameters for `classes` classes under `seed`.
pub fn synth_classes(classes: usize, seed: u64) -> Result<Vec<SynthClass>> {
    if classes == 0 || classes > MAX_CLASSES {
        return Err(Error::Config(format!("synth supports 1..={MAX_CLASSES} classes, got {classes}")));
    }
    let mut r = rng(derive_seed(seed, STREAM_SYNTH, u64::MAX));
    let mut grid: Vec<[u8; 3]> =
        LEVELS.iter().flat_map(|&a| LEVELS.iter().flat_map(move |&b| LEVELS.iter().map(move |&c| [a, b, c]))).collect();
    grid.shuffle(&mut r);
    Ok(grid
        .into_iter()
        .take(classes)
        .enumerate()
        .map(|(i, color)| SynthClass {
            name: format!("class_{i:03}"),
            color,
            angle: (i % 4) as f64 * PI / 4.0,
            cycles: 2.0 + ((i / 4) % 4) as f64,
        })
        .collect())
}

/// Draws one image of `class`.
pub fn render(class: &SynthClass, image_seed: u64) -> RgbImage {
    let mut r = rng(image_seed);
    let phase = r.gen_range(0.0..2.0 * PI);
    let offset = r.gen_range(-BRIGHTNESS_JITTER..BRIGHTNESS_JITTER);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let (dx, dy) = (class.angle.cos(), class.angle.sin());
    let k = 2.0 * PI * class.cycles / IMAGE_SIDE as f64;
    let mut img = RgbImage::new(IMAGE_SIDE, IMAGE_SIDE);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let stripe = STRIPE_AMPLITUDE * (k * (x as f64 * dx + y as f64 * dy) + phase).sin();
            let mut px = [0u8; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let v = class.color[c] as f64 + stripe + offset + noise.sample(&mut r);
                *out = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub classes: Vec<SynthClass>,
    pub images_per_class: usize,
    pub seed: u64,
}

/// Writes `out_dir/class_XXX/img_YYY.png`. An existing non-empty `out_dir`
/// is an error unless `force`, in which case it is replaced.
pub fn generate(
    out_dir: &Path,
    classes: usize,
    images_per_class: usize,
    seed: u64,
    force: bool,
) -> Result<SynthSummary> {
    if images_per_class == 0 {
        return Err(Error::Config("images_per_class must be positive".into()));
    }
    let specs = synth_classes(classes, seed)?;
    let non_empty = out_dir.is_dir()
        && fs::read_dir(out_dir).map_err(|e| Error::io(format!("listing {}", out_dir.display()), e))?.next().is_some();
    if non_empty {
        if !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out_dir.display())));
        }
        fs::remove_dir_all(out_dir).map_err(|e| Error::io(format!("removing {}", out_dir.display()), e))?;
    }
    for class in &specs {
        let dir = out_dir.join(&class.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..classes).flat_map(|c| (0..images_per_class).map(move |i| (c, i))).collect();
    jobs.par_iter().try_for_each(|&(c, i)| {
        let class = &specs[c];
        let img = render(class, derive_seed(seed, STREAM_SYNTH, (c * images_per_class + i) as u64));
        let path = out_dir.join(&class.name).join(format!("img_{i:03}.png"));
        img.save(&path).map_err(|e| Error::Image { path: path.clone(), reason: e.to_string() })
    })?;
    let summary = SynthSummary { classes: specs, images_per_class, seed };
    let meta = serde_json::to_string_pretty(&summary).expect("serialisable");
    let meta_path = out_dir.join("synth.json");
    fs::write(&meta_path, meta).map_err(|e| Error::io(format!("writing {}", meta_path.display()), e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_colours_are_separated() {
        let classes = synth_classes(MAX_CLASSES, 3).unwrap();
        for (i, a) in classes.iter().enumerate() {
            for b in &classes[i + 1..] {
                let cheb = (0..3).map(|c| a.color[c].abs_diff(b.color[c])).max().unwrap();
                assert!(cheb >= SEPARATION_MARGIN, "{} vs {}", a.name, b.name);
            }
        }
        assert!(synth_classes(MAX_CLASSES + 1, 0).is_err());
    }

    #[test]
    fn rendered_mean_tracks_class_colour() {
        let class = &synth_classes(4, 9).unwrap()[2];
        let img = render(class, 1);
        for c in 0..3 {
            let mean: f64 = img.pixels().map(|p| p[c] as f64).sum::<f64>() / (84.0 * 84.0);
            // stripes average out over whole periods; jitter ≤ 8, noise mean ≈ 0.
            assert!((mean - class.color[c] as f64).abs() < 10.0, "channel {c}: {mean}");
        }
    }
}

//! Synthetic segmentation data: random rectangles and discs over a
//! background, rendered into coordinate and noisy class-signal channels.
//!
//! Class signals place the classes on a circle, so every pair is separated
//! but the additive noise keeps the task ambiguous. A configurable fraction
//! of boundary pixels swaps its label with a neighboring class, creating
//! exactly the kind of boundary ambiguity that label smoothing targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetSpec, HarnessError};
use crate::autodiff::Tensor;
use crate::labels::{boundary_mask, LabelMap};

/// Number of feature channels: x, y coordinates plus two class signals.
pub const CHANNELS: usize = 4;
/// Shape count at density 1.0.
const MAX_SHAPES: f64 = 6.0;

/// One synthetic image: `(CHANNELS, H, W)` feature tensor plus labels.
/// `clean_labels` keeps the pre-jitter map for construction checks.
#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub channels: Tensor,
    pub labels: LabelMap,
    pub clean_labels: LabelMap,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub train: Vec<SyntheticImage>,
    pub val: Vec<SyntheticImage>,
}

fn class_signal(class: usize, classes: usize) -> (f64, f64) {
    let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
    (0.5 + 0.5 * angle.cos(), 0.5 + 0.5 * angle.sin())
}

fn paint_labels(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0u32; h * w];
    let shapes = (spec.shape_density * MAX_SHAPES).round() as usize;
    let min_side = h.min(w) as f64;
    for _ in 0..shapes {
        let class = rng.gen_range(1..spec.classes) as u32;
        if rng.gen::<bool>() {
            // Axis-aligned rectangle; small relative to the image, so the
            // background stays dominant and foreground classes are rare.
            let rw = rng.gen_range((min_side / 8.0).max(2.0)..=min_side / 4.0).round() as usize;
            let rh = rng.gen_range((min_side / 8.0).max(2.0)..=min_side / 4.0).round() as usize;
            let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
            let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
            for i in y0..(y0 + rh).min(h) {
                for j in x0..(x0 + rw).min(w) {
                    labels[i * w + j] = class;
                }
            }
        } else {
            // Disc.
            let radius = rng.gen_range((min_side / 10.0).max(1.5)..=min_side / 5.0);
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            for i in 0..h {
                for j in 0..w {
                    let dy = i as f64 + 0.5 - cy;
                    let dx = j as f64 + 0.5 - cx;
                    if dy * dy + dx * dx <= radius * radius {
                        labels[i * w + j] = class;
                    }
                }
            }
        }
    }
    labels
}

fn jitter_boundaries(
    clean: &LabelMap,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>, HarnessError> {
    let mut jittered = clean.data().to_vec();
    if jitter == 0.0 {
        return Ok(jittered);
    }
    let (h, w) = (clean.height() as isize, clean.width() as isize);
    let mask = boundary_mask(clean, 3)?;
    for i in 0..h {
        for j in 0..w {
            let pixel = (i * w + j) as usize;
            if !mask.get(pixel) || rng.gen::<f64>() >= jitter {
                continue;
            }
            // Replace with a uniformly chosen different-class neighbor from
            // the clean map.
            let own = clean.data()[pixel];
            let mut candidates = Vec::new();
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    let (si, sj) = (i + di, j + dj);
                    if si < 0 || sj < 0 || si >= h || sj >= w {
                        continue;
                    }
                    let neighbor = clean.data()[(si * w + sj) as usize];
                    if neighbor != own {
                        candidates.push(neighbor);
                    }
                }
            }
            if !candidates.is_empty() {
                jittered[pixel] = candidates[rng.gen_range(0..candidates.len())];
            }
        }
    }
    Ok(jittered)
}

fn render_channels(
    spec: &DatasetSpec,
    clean: &LabelMap,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, HarnessError> {
    let (h, w) = (spec.height, spec.width);
    let pixels = h * w;
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).map_err(|e| HarnessError::Config {
        detail: format!("bad noise level: {e}"),
    })?;
    let mut data = vec![0.0f64; CHANNELS * pixels];
    for i in 0..h {
        for j in 0..w {
            let pixel = i * w + j;
            let class = clean.data()[pixel] as usize;
            let (s1, s2) = class_signal(class, spec.classes);
            data[pixel] = if w > 1 { j as f64 / (w - 1) as f64 } else { 0.0 };
            data[pixels + pixel] = if h > 1 { i as f64 / (h - 1) as f64 } else { 0.0 };
            let n1 = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            let n2 = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            data[2 * pixels + pixel] = s1 + n1;
            data[3 * pixels + pixel] = s2 + n2;
        }
    }
    Tensor::new(vec![CHANNELS, h, w], data)
        .map_err(|e| HarnessError::Config { detail: format!("non-finite channel data: {e}") })
}

fn generate_image(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<SyntheticImage, HarnessError> {
    let clean =
        LabelMap::new(spec.height, spec.width, paint_labels(spec, rng), None)?;
    let channels = render_channels(spec, &clean, rng)?;
    let jittered = jitter_boundaries(&clean, spec.boundary_jitter, rng)?;
    let labels = LabelMap::new(spec.height, spec.width, jittered, None)?;
    Ok(SyntheticImage { channels, labels, clean_labels: clean })
}

/// Generates the train/val splits; deterministic per (spec, seed).
pub fn generate_synthetic(spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset, HarnessError> {
    if spec.width == 0 || spec.height == 0 {
        return Err(HarnessError::Config { detail: "zero-size image".into() });
    }
    if spec.classes < 2 {
        return Err(HarnessError::Config {
            detail: format!("need at least 2 classes, got {}", spec.classes),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..spec.train_images)
        .map(|_| generate_image(spec, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let val = (0..spec.val_images)
        .map(|_| generate_image(spec, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SyntheticDataset { spec: spec.clone(), train, val })
}

/// Horizontal mirror of an image: signal channels and labels flip, the
/// coordinate channels stay canonical (a flipped scene, not flipped
/// coordinates).
pub fn flip_horizontal(image: &SyntheticImage) -> SyntheticImage {
    let h = image.labels.height();
    let w = image.labels.width();
    let pixels = h * w;
    let src = image.channels.data();
    let mut data = src.to_vec();
    for c in 2..CHANNELS {
        for i in 0..h {
            for j in 0..w {
                data[c * pixels + i * w + j] = src[c * pixels + i * w + (w - 1 - j)];
            }
        }
    }
    let flip_map = |m: &LabelMap| {
        let mut labels = vec![0u32; pixels];
        for i in 0..h {
            for j in 0..w {
                labels[i * w + j] = m.data()[i * w + (w - 1 - j)];
            }
        }
        LabelMap::new(h, w, labels, m.ignore()).expect("same geometry")
    };
    SyntheticImage {
        channels: Tensor::new(vec![CHANNELS, h, w], data).expect("finite"),
        labels: flip_map(&image.labels),
        clean_labels: flip_map(&image.clean_labels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            width: 16,
            height: 16,
            classes: 4,
            train_images: 3,
            val_images: 2,
            shape_density: 0.8,
            noise: 0.2,
            boundary_jitter: 0.5,
        }
    }

    #[test]
    fn zero_density_gives_all_background() {
        let spec = DatasetSpec { shape_density: 0.0, ..small_spec() };
        let ds = generate_synthetic(&spec, 3).unwrap();
        for image in ds.train.iter().chain(&ds.val) {
            assert!(image.labels.data().iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn same_seed_reproduces_everything() {
        let spec = small_spec();
        let a = generate_synthetic(&spec, 11).unwrap();
        let b = generate_synthetic(&spec, 11).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.channels, y.channels);
            assert_eq!(x.labels, y.labels);
        }
        let c = generate_synthetic(&spec, 12).unwrap();
        assert_ne!(a.train[0].labels.data(), c.train[0].labels.data());
    }

    #[test]
    fn zero_jitter_keeps_clean_labels() {
        let spec = DatasetSpec { boundary_jitter: 0.0, ..small_spec() };
        let ds = generate_synthetic(&spec, 4).unwrap();
        for image in &ds.train {
            assert_eq!(image.labels, image.clean_labels);
        }
    }

    #[test]
    fn jitter_touches_only_clean_boundary_pixels() {
        let spec = DatasetSpec { boundary_jitter: 1.0, ..small_spec() };
        let ds = generate_synthetic(&spec, 5).unwrap();
        let mut changed_any = false;
        for image in &ds.train {
            let mask = boundary_mask(&image.clean_labels, 3).unwrap();
            for pixel in 0..image.labels.pixels() {
                if image.labels.data()[pixel] != image.clean_labels.data()[pixel] {
                    changed_any = true;
                    assert!(mask.get(pixel), "non-boundary pixel {pixel} was jittered");
                }
            }
        }
        assert!(changed_any, "full jitter should move at least one label");
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let spec = DatasetSpec { width: 0, ..small_spec() };
        assert!(generate_synthetic(&spec, 0).is_err());
        let spec = DatasetSpec { classes: 1, ..small_spec() };
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn flip_mirrors_signals_and_labels() {
        let ds = generate_synthetic(&small_spec(), 6).unwrap();
        let image = &ds.train[0];
        let flipped = flip_horizontal(image);
        let w = image.labels.width();
        let pixels = image.labels.pixels();
        assert_eq!(flipped.labels.data()[0], image.labels.data()[w - 1]);
        // Coordinate channel 0 stays canonical.
        assert_eq!(flipped.channels.data()[..pixels], image.channels.data()[..pixels]);
        // Signal channel mirrors.
        assert_eq!(
            flipped.channels.data()[2 * pixels],
            image.channels.data()[2 * pixels + w - 1]
        );
        // Double flip restores the image.
        let back = flip_horizontal(&flipped);
        assert_eq!(back.channels, image.channels);
        assert_eq!(back.labels, image.labels);
    }
}

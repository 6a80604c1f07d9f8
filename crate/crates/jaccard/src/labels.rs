//! Label-space transforms: one-hot encoding, boundary detection, and uniform
//! or boundary-restricted label smoothing.
//!
//! Boundary detection follows the max-pooling construction: each one-hot
//! channel is max-pooled with an odd kernel (stride 1, replicate padding) and
//! a pixel is a boundary pixel iff more than one channel is active
//! afterwards. Ignored pixels carry all-zero columns, so they are never
//! smoothed and never count as boundary neighbors.

use std::fmt;

use crate::autodiff::{max_pool_plane, Tensor};

/// Errors from label-space operations.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelError {
    ClassOutOfRange { index: usize, class: u32, classes: usize },
    EvenKernel { k: usize },
    EpsilonOutOfRange { epsilon: f64 },
    LengthMismatch { expected: usize, actual: usize },
    EmptyMap,
    NotOneHot { pixel: usize },
}

impl fmt::Display for LabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelError::ClassOutOfRange { index, class, classes } => {
                write!(f, "label {class} at pixel {index} exceeds class count {classes}")
            }
            LabelError::EvenKernel { k } => write!(f, "kernel size must be odd, got {k}"),
            LabelError::EpsilonOutOfRange { epsilon } => {
                write!(f, "epsilon must lie in [0, 1], got {epsilon}")
            }
            LabelError::LengthMismatch { expected, actual } => {
                write!(f, "expected {expected} entries, got {actual}")
            }
            LabelError::EmptyMap => write!(f, "label map has no pixels"),
            LabelError::NotOneHot { pixel } => {
                write!(f, "pixel {pixel} is not an exact one-hot column")
            }
        }
    }
}

impl std::error::Error for LabelError {}

/// H x W map of class indices, with an optional ignore value.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
    ignore: Option<u32>,
}

impl LabelMap {
    pub fn new(
        height: usize,
        width: usize,
        data: Vec<u32>,
        ignore: Option<u32>,
    ) -> Result<Self, LabelError> {
        if height * width == 0 {
            return Err(LabelError::EmptyMap);
        }
        if data.len() != height * width {
            return Err(LabelError::LengthMismatch { expected: height * width, actual: data.len() });
        }
        Ok(LabelMap { height, width, data, ignore })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn ignore(&self) -> Option<u32> {
        self.ignore
    }

    pub fn class_at(&self, pixel: usize) -> u32 {
        self.data[pixel]
    }

    pub fn is_ignored(&self, pixel: usize) -> bool {
        self.ignore == Some(self.data[pixel])
    }

    /// Checks every non-ignored entry against the class count.
    pub fn validate_classes(&self, classes: usize) -> Result<(), LabelError> {
        for (index, &class) in self.data.iter().enumerate() {
            if Some(class) == self.ignore {
                continue;
            }
            if class as usize >= classes {
                return Err(LabelError::ClassOutOfRange { index, class, classes });
            }
        }
        Ok(())
    }
}

/// Binary H x W mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self, LabelError> {
        if data.len() != height * width {
            return Err(LabelError::LengthMismatch { expected: height * width, actual: data.len() });
        }
        Ok(PixelMask { height, width, data })
    }

    pub fn all_ones(height: usize, width: usize) -> Self {
        PixelMask { height, width, data: vec![true; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, pixel: usize) -> bool {
        self.data[pixel]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// C x H x W field of per-pixel class distributions.
///
/// Columns of ignored pixels are all-zero and flagged off in `valid`; every
/// valid column sums to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelField {
    classes: usize,
    height: usize,
    width: usize,
    tensor: Tensor,
    valid: Vec<bool>,
}

impl SoftLabelField {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// The underlying `(C, H, W)` tensor.
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Valid-pixel mask as a `(1, H*W)` tensor of 0/1 weights.
    pub fn valid_mask_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![1, self.pixels()], data).expect("finite mask")
    }

    /// The distribution of one pixel as a length-C vector.
    pub fn column(&self, pixel: usize) -> Vec<f64> {
        let p = self.pixels();
        (0..self.classes).map(|c| self.tensor.data()[c * p + pixel]).collect()
    }

    /// View with the pixel axes flattened to `(C, H*W)`.
    pub fn flattened(&self) -> Tensor {
        self.tensor.reshaped(&[self.classes, self.pixels()]).expect("same length")
    }
}

/// Exact one-hot encoding. Ignored pixels become all-zero columns, excluded
/// from downstream losses through the valid mask.
pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<SoftLabelField, LabelError> {
    labels.validate_classes(classes)?;
    let pixels = labels.pixels();
    let mut data = vec![0.0f64; classes * pixels];
    let mut valid = vec![true; pixels];
    for pixel in 0..pixels {
        if labels.is_ignored(pixel) {
            valid[pixel] = false;
            continue;
        }
        data[labels.class_at(pixel) as usize * pixels + pixel] = 1.0;
    }
    Ok(SoftLabelField {
        classes,
        height: labels.height(),
        width: labels.width(),
        tensor: Tensor::new(vec![classes, labels.height(), labels.width()], data)
            .expect("finite one-hot"),
        valid,
    })
}

/// Marks pixels whose k x k neighborhood contains a different class.
///
/// Implemented by max-pooling each one-hot channel and flagging pixels where
/// more than one channel is active afterwards. Edges replicate, so an image
/// border alone never creates a boundary; `k = 1` yields an all-zero mask.
pub fn boundary_mask(labels: &LabelMap, k: usize) -> Result<PixelMask, LabelError> {
    if k % 2 == 0 || k == 0 {
        return Err(LabelError::EvenKernel { k });
    }
    let classes = labels
        .data()
        .iter()
        .filter(|&&c| Some(c) != labels.ignore())
        .map(|&c| c as usize + 1)
        .max()
        .unwrap_or(0);
    let field = one_hot(labels, classes.max(1))?;
    Ok(boundary_mask_from_field(&field, k))
}

fn boundary_mask_from_field(field: &SoftLabelField, k: usize) -> PixelMask {
    let (h, w) = (field.height(), field.width());
    let pixels = h * w;
    let mut active = vec![0u32; pixels];
    for class in 0..field.classes() {
        let channel = &field.tensor().data()[class * pixels..(class + 1) * pixels];
        let pooled = max_pool_plane(channel, h, w, k);
        for (slot, &v) in active.iter_mut().zip(&pooled) {
            if v > 0.5 {
                *slot += 1;
            }
        }
    }
    let data = active.iter().map(|&n| n > 1).collect();
    PixelMask { height: h, width: w, data }
}

/// Where label smoothing applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothingMode {
    /// Smooth every pixel.
    Uniform,
    /// Smooth only pixels flagged by [`boundary_mask`] with kernel `k`.
    Boundary,
}

/// Mixes one-hot columns with the uniform distribution:
/// `(1 - epsilon) * onehot + epsilon / C` on the selected pixels.
///
/// The input must be an exact one-hot field. Ignored (all-zero) columns are
/// left untouched.
pub fn smooth_labels(
    onehot: &SoftLabelField,
    epsilon: f64,
    mode: SmoothingMode,
    k: usize,
) -> Result<SoftLabelField, LabelError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(LabelError::EpsilonOutOfRange { epsilon });
    }
    let pixels = onehot.pixels();
    let classes = onehot.classes();
    for pixel in 0..pixels {
        if !onehot.valid[pixel] {
            continue;
        }
        let col = onehot.column(pixel);
        if col.iter().filter(|&&v| v == 1.0).count() != 1
            || col.iter().any(|&v| v != 0.0 && v != 1.0)
        {
            return Err(LabelError::NotOneHot { pixel });
        }
    }
    let selected: Vec<bool> = match mode {
        SmoothingMode::Uniform => vec![true; pixels],
        SmoothingMode::Boundary => {
            if k % 2 == 0 || k == 0 {
                return Err(LabelError::EvenKernel { k });
            }
            boundary_mask_from_field(onehot, k).data
        }
    };
    let uniform = epsilon / classes as f64;
    let mut data = onehot.tensor().data().to_vec();
    for pixel in 0..pixels {
        if !onehot.valid[pixel] || !selected[pixel] {
            continue;
        }
        for class in 0..classes {
            let slot = &mut data[class * pixels + pixel];
            *slot = (1.0 - epsilon) * *slot + uniform;
        }
    }
    Ok(SoftLabelField {
        classes,
        height: onehot.height(),
        width: onehot.width(),
        tensor: Tensor::new(vec![classes, onehot.height(), onehot.width()], data)
            .expect("finite smoothed field"),
        valid: onehot.valid.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn map(h: usize, w: usize, data: &[u32]) -> LabelMap {
        LabelMap::new(h, w, data.to_vec(), None).unwrap()
    }

    #[test]
    fn one_hot_single_pixel() {
        let field = one_hot(&map(1, 1, &[1]), 3).unwrap();
        assert_eq!(field.column(0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_uniform_map() {
        let field = one_hot(&map(2, 2, &[0, 0, 0, 0]), 2).unwrap();
        assert_eq!(&field.tensor().data()[..4], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(&field.tensor().data()[4..], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        let err = one_hot(&map(1, 2, &[0, 5]), 3).unwrap_err();
        assert!(matches!(err, LabelError::ClassOutOfRange { class: 5, .. }));
    }

    #[test]
    fn ignored_pixels_are_masked_out() {
        let labels = LabelMap::new(1, 3, vec![0, 255, 1], Some(255)).unwrap();
        let field = one_hot(&labels, 2).unwrap();
        assert_eq!(field.valid(), &[true, false, true]);
        assert_eq!(field.column(1), vec![0.0, 0.0]);
        assert_eq!(field.valid_mask_tensor().data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn uniform_map_has_no_boundary() {
        let mask = boundary_mask(&map(3, 3, &[1; 9]), 3).unwrap();
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn two_pixel_split_is_all_boundary() {
        let mask = boundary_mask(&map(1, 2, &[0, 1]), 3).unwrap();
        assert_eq!(mask.data(), &[true, true]);
    }

    #[test]
    fn k1_mask_is_empty() {
        let mask = boundary_mask(&map(2, 2, &[0, 1, 2, 3]), 1).unwrap();
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert_eq!(
            boundary_mask(&map(1, 2, &[0, 1]), 2).unwrap_err(),
            LabelError::EvenKernel { k: 2 }
        );
    }

    #[test]
    fn boundary_ring_on_split_map() {
        // Columns 0..2 class 0, columns 2..4 class 1: with k = 3 exactly the
        // two middle columns touch the other class.
        let labels = map(2, 4, &[0, 0, 1, 1, 0, 0, 1, 1]);
        let mask = boundary_mask(&labels, 3).unwrap();
        let expect = [false, true, true, false, false, true, true, false];
        assert_eq!(mask.data(), &expect);
    }

    #[test]
    fn ignored_neighbors_do_not_create_boundaries() {
        let labels = LabelMap::new(1, 3, vec![0, 255, 0], Some(255)).unwrap();
        let mask = boundary_mask(&labels, 3).unwrap();
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let field = one_hot(&map(1, 2, &[0, 1]), 2).unwrap();
        let out = smooth_labels(&field, 0.0, SmoothingMode::Uniform, 3).unwrap();
        assert_eq!(out.tensor(), field.tensor());
    }

    #[test]
    fn boundary_smoothing_column_values() {
        let field = one_hot(&map(1, 2, &[0, 1]), 3).unwrap();
        let out = smooth_labels(&field, 0.5, SmoothingMode::Boundary, 3).unwrap();
        let col = out.column(0);
        assert_abs_diff_eq!(col[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(col[1], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(col[2], 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn interior_pixels_stay_one_hot_in_boundary_mode() {
        let labels = map(1, 5, &[0, 0, 0, 0, 1]);
        let field = one_hot(&labels, 2).unwrap();
        let out = smooth_labels(&field, 0.5, SmoothingMode::Boundary, 3).unwrap();
        // Pixel 0 is far from the class change.
        assert_eq!(out.column(0), vec![1.0, 0.0]);
        // Pixel 4 touches the boundary.
        assert_abs_diff_eq!(out.column(4)[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn smoothed_rows_sum_to_one() {
        let labels = map(3, 3, &[0, 1, 2, 1, 1, 0, 2, 0, 1]);
        let field = one_hot(&labels, 3).unwrap();
        for (mode, eps) in [
            (SmoothingMode::Uniform, 0.3),
            (SmoothingMode::Boundary, 0.5),
            (SmoothingMode::Uniform, 1.0),
        ] {
            let out = smooth_labels(&field, eps, mode, 3).unwrap();
            for pixel in 0..out.pixels() {
                let sum: f64 = out.column(pixel).iter().sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn epsilon_out_of_range_is_rejected() {
        let field = one_hot(&map(1, 1, &[0]), 2).unwrap();
        assert!(matches!(
            smooth_labels(&field, 1.5, SmoothingMode::Uniform, 3),
            Err(LabelError::EpsilonOutOfRange { .. })
        ));
    }

    #[test]
    fn ignored_pixels_are_never_smoothed() {
        let labels = LabelMap::new(1, 2, vec![0, 255], Some(255)).unwrap();
        let field = one_hot(&labels, 2).unwrap();
        let out = smooth_labels(&field, 0.5, SmoothingMode::Uniform, 3).unwrap();
        assert_eq!(out.column(1), vec![0.0, 0.0]);
    }

    #[test]
    fn boundary_mask_invariant_under_relabeling() {
        let labels = map(3, 4, &[0, 0, 1, 1, 0, 2, 2, 1, 0, 2, 2, 1]);
        let remapped: Vec<u32> = labels.data().iter().map(|&c| [2u32, 0, 1][c as usize]).collect();
        let relabeled = map(3, 4, &remapped);
        for k in [1, 3, 5] {
            let a = boundary_mask(&labels, k).unwrap();
            let b = boundary_mask(&relabeled, k).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn large_kernel_boundary_equals_uniform() {
        let labels = map(3, 5, &[0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 2, 2, 2]);
        let field = one_hot(&labels, 3).unwrap();
        // Kernel spanning the whole image: every pixel sees another class.
        let k = 2 * 5 + 1;
        let boundary = smooth_labels(&field, 0.4, SmoothingMode::Boundary, k).unwrap();
        let uniform = smooth_labels(&field, 0.4, SmoothingMode::Uniform, k).unwrap();
        assert_eq!(boundary.tensor(), uniform.tensor());
    }
}

//! Mixup and CutMix augmentation plus attention-weighted label assignment.
//!
//! CutMix pastes a rectangular region of each image's batch-reversal
//! partner into it and mixes labels by the pasted-area ratio. The
//! attention-weighted assignment replaces that ratio with the attention
//! mass falling inside the pasted region: λ = A · ↓(M), where ↓ is
//! nearest-neighbor downsampling of the pixel mask to one value per patch.
//!
//! Mask orientation follows the batch-mix convention used everywhere in
//! this crate: M = 1 marks pixels sourced from the paired image, and λ
//! weights the paired image's label.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Clipped cut rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }
}

/// One augmentation decision for a batch.
#[derive(Debug, Clone)]
pub struct MixPlan {
    pub cut: CutBox,
    /// H×W row-major; 1 = pixel sourced from the paired image.
    pub mask: Vec<u8>,
    pub lambda_area: f64,
    /// Batch mean of the per-sample attention lambdas, when computed.
    pub lambda_attn: Option<f64>,
    /// Batch mean of the final label-mix weights.
    pub lambda_final: f64,
    /// Batch-reversal pairing; an involution (i ↔ N−1−i).
    pub pairing: Vec<usize>,
}

/// The i ↔ N−1−i involution used to pair batch entries.
pub fn flip_pairing(batch: usize) -> Vec<usize> {
    (0..batch).map(|i| batch - 1 - i).collect()
}

/// λ ~ Beta(alpha, alpha).
pub fn sample_area_lambda(alpha: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|_| Error::Config(format!("beta alpha must be positive, got {alpha}")))?;
    Ok(beta.sample(rng))
}

fn clipped_box(lambda: f64, h: usize, w: usize, cx: i64, cy: i64) -> CutBox {
    let bw = (w as f64 * lambda.sqrt()).round() as i64;
    let bh = (h as f64 * lambda.sqrt()).round() as i64;
    if bw >= w as i64 && bh >= h as i64 {
        // A cut the size of the image is the image.
        return CutBox { x: 0, y: 0, w, h };
    }
    let x0 = (cx - bw / 2).clamp(0, w as i64);
    let y0 = (cy - bh / 2).clamp(0, h as i64);
    let x1 = (cx - bw / 2 + bw).clamp(0, w as i64);
    let y1 = (cy - bh / 2 + bh).clamp(0, h as i64);
    CutBox {
        x: x0 as usize,
        y: y0 as usize,
        w: (x1 - x0).max(0) as usize,
        h: (y1 - y0).max(0) as usize,
    }
}

/// Cut box with side lengths round(W·√λ) × round(H·√λ), centered at a
/// uniformly sampled pixel, trimmed to the image bounds. The effective
/// area ratio is recomputed from the trimmed box by the caller.
pub fn sample_cutbox(lambda: f64, h: usize, w: usize, rng: &mut ChaCha8Rng) -> CutBox {
    let cx = rng.gen_range(0..w) as i64;
    let cy = rng.gen_range(0..h) as i64;
    clipped_box(lambda, h, w, cx, cy)
}

/// Same box geometry with the center pinned to the image center; never
/// trims for λ ≤ 1. Used for clipping-free statistics.
pub fn centered_cutbox(lambda: f64, h: usize, w: usize) -> CutBox {
    clipped_box(lambda, h, w, (w / 2) as i64, (h / 2) as i64)
}

/// M[y][x] = 1 iff (x, y) lies inside the box.
pub fn build_mask(cut: &CutBox, h: usize, w: usize) -> Vec<u8> {
    let mut mask = vec![0u8; h * w];
    for y in cut.y..cut.y + cut.h {
        for x in cut.x..cut.x + cut.w {
            mask[y * w + x] = 1;
        }
    }
    mask
}

/// Exact ones-count ratio of a mask.
pub fn lambda_area_of_mask(mask: &[u8]) -> f64 {
    let ones = mask.iter().filter(|&&m| m == 1).count();
    ones as f64 / mask.len() as f64
}

/// Build the full cut plan (box, mask, exact area λ) for one batch.
pub fn plan_cutmix(lambda: f64, h: usize, w: usize, batch: usize, rng: &mut ChaCha8Rng) -> MixPlan {
    let cut = sample_cutbox(lambda, h, w, rng);
    let mask = build_mask(&cut, h, w);
    let lambda_area = lambda_area_of_mask(&mask);
    MixPlan {
        cut,
        mask,
        lambda_area,
        lambda_attn: None,
        lambda_final: lambda_area,
        pairing: flip_pairing(batch),
    }
}

/// Paste the batch-reversal partner's pixels wherever M = 1. A batch of
/// one is returned untouched (there is nothing to pair with).
pub fn apply_cutmix_batch<T: Real>(
    images: &[Vec<T>],
    mask: &[u8],
    channels: usize,
    h: usize,
    w: usize,
) -> Result<Vec<Vec<T>>> {
    let plane = h * w;
    for (i, img) in images.iter().enumerate() {
        if img.len() != channels * plane {
            return Err(Error::Contract(format!(
                "image {i} has {} values, expected {}",
                img.len(),
                channels * plane
            )));
        }
    }
    if mask.len() != plane {
        return Err(Error::Contract(format!(
            "mask has {} entries, expected {plane}",
            mask.len()
        )));
    }
    let n = images.len();
    let mut mixed = images.to_vec();
    if n == 1 {
        return Ok(mixed);
    }
    for i in 0..n {
        let j = n - 1 - i;
        for c in 0..channels {
            for (p, &m) in mask.iter().enumerate() {
                if m == 1 {
                    mixed[i][c * plane + p] = images[j][c * plane + p];
                }
            }
        }
    }
    Ok(mixed)
}

/// Global interpolation: x̃_i = λ·x_i + (1−λ)·x_{N−1−i}, labels mixed with
/// the same λ (λ weights the sample's own label here).
pub fn mixup_batch<T: Real>(
    images: &[Vec<T>],
    labels: &[f64],
    classes: usize,
    lambda: f64,
) -> Result<(Vec<Vec<T>>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("mixup lambda {lambda} outside [0,1]")));
    }
    let n = images.len();
    if labels.len() != n * classes {
        return Err(Error::Contract(format!(
            "label matrix has {} entries, expected {}",
            labels.len(),
            n * classes
        )));
    }
    let lam = T::from_f64(lambda);
    let inv = T::from_f64(1.0 - lambda);
    let mut mixed = Vec::with_capacity(n);
    for i in 0..n {
        let j = n - 1 - i;
        let img: Vec<T> = images[i]
            .iter()
            .zip(&images[j])
            .map(|(&a, &b)| lam * a + inv * b)
            .collect();
        mixed.push(img);
    }
    let mut mixed_labels = vec![0.0; n * classes];
    for i in 0..n {
        let j = n - 1 - i;
        for c in 0..classes {
            mixed_labels[i * classes + c] =
                lambda * labels[i * classes + c] + (1.0 - lambda) * labels[j * classes + c];
        }
    }
    Ok((mixed, mixed_labels))
}

/// Nearest-neighbor downsampling of an H×W mask to a patch grid: entry
/// (i, j) samples the source pixel (⌊(i+0.5)·H/h_p⌋, ⌊(j+0.5)·W/w_p⌋).
/// Patch order is row-major, matching the patch embedding.
pub fn downsample_mask(mask: &[u8], h: usize, w: usize, grid_h: usize, grid_w: usize) -> Vec<u8> {
    let mut out = vec![0u8; grid_h * grid_w];
    for i in 0..grid_h {
        let sy = ((i as f64 + 0.5) * h as f64 / grid_h as f64).floor() as usize;
        for j in 0..grid_w {
            let sx = ((j as f64 + 0.5) * w as f64 / grid_w as f64).floor() as usize;
            out[i * grid_w + j] = mask[sy * w + sx];
        }
    }
    out
}

/// λ = A · ↓(M): the attention mass inside the pasted region.
pub fn transmix_lambda(attention: &[f64], patch_mask: &[u8]) -> Result<f64> {
    if attention.len() != patch_mask.len() {
        return Err(Error::Contract(format!(
            "attention has {} entries but patch mask has {}",
            attention.len(),
            patch_mask.len()
        )));
    }
    let mut acc = 0.0;
    for (a, &m) in attention.iter().zip(patch_mask) {
        if m == 1 {
            acc += a;
        }
    }
    Ok(acc)
}

/// Attention λ with the map renormalized to total mass 1. Computed as the
/// ratio of the masked sum to the total sum, which is algebraically the
/// same as dividing A by ΣA first but keeps integer-weight cases exact.
pub fn transmix_lambda_renormalized(attention: &[f64], patch_mask: &[u8]) -> Result<f64> {
    let masked = transmix_lambda(attention, patch_mask)?;
    let total: f64 = attention.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(masked / total)
}

/// How the final label weight combines the area and attention routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaMode {
    /// Mean of the area ratio and the attention mass.
    Blended,
    /// Attention mass alone.
    Pure,
}

pub fn blended_lambda(lambda_area: f64, lambda_attn: f64, mode: LambdaMode) -> f64 {
    match mode {
        LambdaMode::Blended => 0.5 * (lambda_area + lambda_attn),
        LambdaMode::Pure => lambda_attn,
    }
}

/// ỹ_i = (1−λ)·y_i + λ·y_{N−1−i}; λ weights the paired label.
pub fn mix_labels(labels: &[f64], classes: usize, lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("label lambda {lambda} outside [0,1]")));
    }
    let n = labels.len() / classes;
    mix_labels_per_sample(labels, classes, &vec![lambda; n])
}

/// Per-sample label weights: ỹ_i = (1−λ_i)·y_i + λ_i·y_{N−1−i}.
pub fn mix_labels_per_sample(labels: &[f64], classes: usize, lambdas: &[f64]) -> Result<Vec<f64>> {
    if classes == 0 || labels.len() % classes != 0 {
        return Err(Error::Contract(format!(
            "label matrix of {} entries is not a multiple of {classes} classes",
            labels.len()
        )));
    }
    let n = labels.len() / classes;
    if lambdas.len() != n {
        return Err(Error::Contract(format!(
            "{} lambdas for a batch of {n}",
            lambdas.len()
        )));
    }
    let mut out = vec![0.0; labels.len()];
    for i in 0..n {
        let j = n - 1 - i;
        let lam = lambdas[i];
        if !(0.0..=1.0).contains(&lam) {
            return Err(Error::Contract(format!("label lambda {lam} outside [0,1]")));
        }
        for c in 0..classes {
            out[i * classes + c] =
                (1.0 - lam) * labels[i * classes + c] + lam * labels[j * classes + c];
        }
    }
    Ok(out)
}

/// One-hot encode integer class labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * classes];
    for (i, &c) in labels.iter().enumerate() {
        out[i * classes + c] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn assert_close(a: f64, b: f64, tol: f64, msg: &str) {
        assert!((a - b).abs() <= tol, "{msg}: {a} vs {b}");
    }

    #[test]
    fn beta_one_is_uniform_with_mean_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sum = 0.0;
        for _ in 0..10_000 {
            let v = sample_area_lambda(1.0, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&v));
            sum += v;
        }
        assert_close(sum / 10_000.0, 0.5, 0.02, "Beta(1,1) mean");
    }

    #[test]
    fn beta_support_for_other_alphas() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &alpha in &[0.2, 0.5, 2.0, 8.0] {
            for _ in 0..200 {
                let v = sample_area_lambda(alpha, &mut rng).unwrap();
                assert!((0.0..=1.0).contains(&v), "alpha={alpha} v={v}");
            }
        }
    }

    #[test]
    fn beta_fixed_seed_reproduces_sequence() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            (0..5)
                .map(|_| sample_area_lambda(0.7, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn beta_rejects_non_positive_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            sample_area_lambda(0.0, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_area_lambda(-1.0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cutbox_degenerate_lambdas() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let empty = sample_cutbox(0.0, 32, 32, &mut rng);
        assert!(empty.is_empty());
        assert_eq!(build_mask(&empty, 32, 32), vec![0u8; 32 * 32]);

        let full = sample_cutbox(1.0, 32, 32, &mut rng);
        assert_eq!(full, CutBox { x: 0, y: 0, w: 32, h: 32 });
        let mask = build_mask(&full, 32, 32);
        assert_eq!(lambda_area_of_mask(&mask), 1.0);
    }

    #[test]
    fn cutbox_quarter_area_centered() {
        let cut = centered_cutbox(0.25, 224, 224);
        assert_eq!((cut.w, cut.h), (112, 112));
        let mask = build_mask(&cut, 224, 224);
        assert_eq!(lambda_area_of_mask(&mask), 0.25);
    }

    #[test]
    fn mask_positions_hand_enumerated() {
        let cut = CutBox { x: 1, y: 1, w: 2, h: 2 };
        let mask = build_mask(&cut, 4, 4);
        let ones: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ones, vec![5, 6, 9, 10]);
    }

    #[test]
    fn mask_lambda_consistency_over_random_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let lambda = sample_area_lambda(1.0, &mut rng).unwrap();
            let cut = sample_cutbox(lambda, 48, 64, &mut rng);
            let mask = build_mask(&cut, 48, 64);
            let ones = mask.iter().filter(|&&m| m == 1).count();
            assert_eq!(ones, cut.area(), "mask ones equal box area");
            assert_eq!(
                lambda_area_of_mask(&mask),
                ones as f64 / (48.0 * 64.0),
                "exact area ratio"
            );
        }
    }

    #[test]
    fn cutmix_zero_mask_is_identity() {
        let images = vec![vec![0.1f32, 0.2, 0.3, 0.4], vec![0.5, 0.6, 0.7, 0.8]];
        let mixed = apply_cutmix_batch(&images, &[0, 0, 0, 0], 1, 2, 2).unwrap();
        for (a, b) in images.iter().zip(&mixed) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn cutmix_full_mask_reverses_batch() {
        let images: Vec<Vec<f32>> = (0..3).map(|i| vec![i as f32; 4]).collect();
        let mixed = apply_cutmix_batch(&images, &[1, 1, 1, 1], 1, 2, 2).unwrap();
        assert_eq!(mixed[0], vec![2.0; 4]);
        assert_eq!(mixed[1], vec![1.0; 4]);
        assert_eq!(mixed[2], vec![0.0; 4]);
    }

    #[test]
    fn cutmix_matches_hand_composite() {
        // N=2, 4×4 single-channel, box (1,1,2,2).
        let a: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..16).map(|i| 100.0 + i as f32).collect();
        let mask = build_mask(&CutBox { x: 1, y: 1, w: 2, h: 2 }, 4, 4);
        let mixed = apply_cutmix_batch(&[a.clone(), b.clone()], &mask, 1, 4, 4).unwrap();
        for p in 0..16 {
            if mask[p] == 1 {
                assert_eq!(mixed[0][p], b[p]);
                assert_eq!(mixed[1][p], a[p]);
            } else {
                assert_eq!(mixed[0][p], a[p]);
                assert_eq!(mixed[1][p], b[p]);
            }
        }
    }

    #[test]
    fn cutmix_batch_of_one_is_untouched() {
        let images = vec![vec![0.5f32; 4]];
        let mixed = apply_cutmix_batch(&images, &[1, 1, 1, 1], 1, 2, 2).unwrap();
        assert_eq!(mixed[0], images[0]);
    }

    #[test]
    fn pixel_conservation_under_cutmix() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let images: Vec<Vec<f32>> = (0..4)
            .map(|_| (0..2 * 16).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let lambda = sample_area_lambda(1.0, &mut rng).unwrap();
        let cut = sample_cutbox(lambda, 4, 4, &mut rng);
        let mask = build_mask(&cut, 4, 4);
        let mixed = apply_cutmix_batch(&images, &mask, 2, 4, 4).unwrap();
        for i in 0..4 {
            let j = 3 - i;
            for c in 0..2 {
                for p in 0..16 {
                    let idx = c * 16 + p;
                    let expect = if mask[p] == 1 { images[j][idx] } else { images[i][idx] };
                    assert_eq!(mixed[i][idx].to_bits(), expect.to_bits());
                }
            }
        }
    }

    #[test]
    fn mixup_identity_at_lambda_one() {
        let images = vec![vec![0.25f32; 4], vec![0.75f32; 4]];
        let labels = one_hot(&[0, 1], 2);
        let (mixed, mixed_labels) = mixup_batch(&images, &labels, 2, 1.0).unwrap();
        assert_eq!(mixed, images);
        assert_eq!(mixed_labels, labels);
    }

    #[test]
    fn mixup_halfway_blend() {
        let images = vec![vec![0.0f32; 4], vec![2.0f32; 4]];
        let labels = one_hot(&[0, 1], 2);
        let (mixed, _) = mixup_batch(&images, &labels, 2, 0.5).unwrap();
        assert_eq!(mixed[0], vec![1.0; 4]);
        assert_eq!(mixed[1], vec![1.0; 4]);
    }

    #[test]
    fn mixup_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let images: Vec<Vec<f32>> = (0..2)
            .map(|_| (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels = one_hot(&[0, 1], 2);
        let lambda: f64 = rng.gen_range(0.0..1.0);
        let (mixed, _) = mixup_batch(&images, &labels, 2, lambda).unwrap();
        for i in 0..2 {
            let j = 1 - i;
            for p in 0..12 {
                let expect = lambda * images[i][p] as f64 + (1.0 - lambda) * images[j][p] as f64;
                assert!((mixed[i][p] as f64 - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn downsample_all_ones() {
        let mask = vec![1u8; 8 * 8];
        assert_eq!(downsample_mask(&mask, 8, 8, 2, 2), vec![1; 4]);
    }

    #[test]
    fn downsample_hand_case_top_left_quadrant() {
        // 4×4 mask with ones exactly in the top-left 2×2 → samples at
        // pixel centers (1,1), (1,3), (3,1), (3,3) → [1,0,0,0].
        let mask = build_mask(&CutBox { x: 0, y: 0, w: 2, h: 2 }, 4, 4);
        assert_eq!(downsample_mask(&mask, 4, 4, 2, 2), vec![1, 0, 0, 0]);
    }

    #[test]
    fn downsample_of_aligned_box_is_patch_indicator() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (gw, gh) = (14usize, 14usize);
            let bx = rng.gen_range(0..gw);
            let by = rng.gen_range(0..gh);
            let bw = rng.gen_range(0..=gw - bx);
            let bh = rng.gen_range(0..=gh - by);
            let cut = CutBox { x: bx * 16, y: by * 16, w: bw * 16, h: bh * 16 };
            let mask = build_mask(&cut, 224, 224);
            let down = downsample_mask(&mask, 224, 224, gh, gw);
            for i in 0..gh {
                for j in 0..gw {
                    let inside = i >= by && i < by + bh && j >= bx && j < bx + bw;
                    assert_eq!(down[i * gw + j] == 1, inside, "patch ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn transmix_lambda_anchors() {
        assert_eq!(transmix_lambda(&[0.3, 0.4, 0.2], &[0, 0, 0]).unwrap(), 0.0);
        let p = 8;
        let uniform = vec![1.0 / p as f64; p];
        let mut m = vec![0u8; p];
        m[0] = 1;
        m[3] = 1;
        m[5] = 1;
        assert_close(
            transmix_lambda(&uniform, &m).unwrap(),
            3.0 / p as f64,
            1e-12,
            "uniform attention",
        );
    }

    #[test]
    fn transmix_lambda_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = rng.gen_range(1..100);
            let a: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..1.0)).collect();
            let m: Vec<u8> = (0..p).map(|_| rng.gen_range(0..2) as u8).collect();
            let got = transmix_lambda(&a, &m).unwrap();
            let mut expect = 0.0;
            for i in 0..p {
                expect += a[i] * m[i] as f64;
            }
            assert_close(got, expect, 1e-12, "brute-force masked sum");
        }
    }

    #[test]
    fn transmix_lambda_rejects_length_mismatch() {
        assert!(matches!(
            transmix_lambda(&[0.1, 0.2], &[1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn blended_lambda_modes() {
        assert_close(blended_lambda(0.4, 0.2, LambdaMode::Blended), 0.3, 0.0, "mean");
        assert_close(blended_lambda(0.7, 0.7, LambdaMode::Blended), 0.7, 0.0, "idempotent");
        assert_close(blended_lambda(0.4, 0.2, LambdaMode::Pure), 0.2, 0.0, "pure");
    }

    #[test]
    fn mix_labels_anchors() {
        let labels = one_hot(&[0, 1], 2);
        assert_eq!(mix_labels(&labels, 2, 0.0).unwrap(), labels);
        assert_eq!(
            mix_labels(&labels, 2, 1.0).unwrap(),
            vec![0.0, 1.0, 1.0, 0.0]
        );
        let mixed = mix_labels(&labels, 2, 0.3).unwrap();
        assert_eq!(mixed, vec![0.7, 0.3, 0.3, 0.7]);
    }

    #[test]
    fn mixed_labels_stay_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let n = rng.gen_range(1..6);
            let k = rng.gen_range(2..5);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let lambdas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let mixed = mix_labels_per_sample(&one_hot(&labels, k), k, &lambdas).unwrap();
            for i in 0..n {
                let row = &mixed[i * k..(i + 1) * k];
                assert!(row.iter().all(|&v| v >= 0.0));
                assert_close(row.iter().sum::<f64>(), 1.0, 1e-6, "simplex closure");
            }
        }
    }

    #[test]
    fn pairing_is_an_involution() {
        for n in 1..10 {
            let pairing = flip_pairing(n);
            for i in 0..n {
                assert_eq!(pairing[pairing[i]], i);
            }
        }
    }

    #[test]
    fn aligned_box_with_uniform_attention_recovers_area_lambda() {
        // Patch-grid-aligned box, uniform attention, renormalized λ: the
        // attention route must equal the exact area ratio bit-for-bit.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (gw, gh) = (14usize, 14usize);
            let bx = rng.gen_range(0..gw);
            let by = rng.gen_range(0..gh);
            let bw = rng.gen_range(1..=gw - bx);
            let bh = rng.gen_range(1..=gh - by);
            let cut = CutBox { x: bx * 16, y: by * 16, w: bw * 16, h: bh * 16 };
            let mask = build_mask(&cut, 224, 224);
            let down = downsample_mask(&mask, 224, 224, gh, gw);
            let uniform = vec![1.0; gw * gh];
            let lam_attn = transmix_lambda_renormalized(&uniform, &down).unwrap();
            let lam_area = lambda_area_of_mask(&mask);
            assert_eq!(lam_attn.to_bits(), lam_area.to_bits());
        }
    }
}

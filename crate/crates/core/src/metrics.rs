//! Reconstruction metrics and the classical downstream proxies: PSNR,
//! nearest-palette pixel accuracy, blob detection, box mIoU and
//! classification accuracy.

use serde::{Deserialize, Serialize};

use crate::autoenc::ModalityId;
use crate::image::Image;
use crate::segmap::{ClassPalette, SegMap};

/// PSNR returned for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Smallest component area, in pixels, reported by [`detect_blobs`].
pub const MIN_BLOB_AREA: usize = 9;
/// Minimum IoU for a detection to count as the match of a truth box in
/// [`classification_accuracy`].
pub const CLASSIFICATION_MIN_IOU: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
#[error("shape mismatch: {0}")]
pub struct ShapeMismatch(pub String);

/// Inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x0 <= x1 && y0 <= y1);
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &Self) -> usize {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        if x0 > x1 || y0 > y1 {
            0
        } else {
            (x1 - x0 + 1) * (y1 - y0 + 1)
        }
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// True if the boxes, each grown by `gap` pixels, would touch or overlap.
    pub fn near(&self, other: &Self, gap: usize) -> bool {
        self.x0 <= other.x1 + gap
            && other.x0 <= self.x1 + gap
            && self.y0 <= other.y1 + gap
            && other.y0 <= self.y1 + gap
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class: u8,
}

pub fn image_mse(a: &Image, b: &Image) -> Result<f64, ShapeMismatch> {
    if !a.same_shape(b) {
        return Err(ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, ShapeMismatch> {
    let mse = image_mse(a, b)?;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Labels every pixel with the palette class whose color (RGB) or intensity
/// (IR) is nearest. Ties go to the smaller class id.
pub fn classify_pixels(
    image: &Image,
    palette: &ClassPalette,
    modality: ModalityId,
) -> Result<Vec<u8>, ShapeMismatch> {
    if image.channels() != modality.channels() {
        return Err(ShapeMismatch(format!(
            "{} image has {} channels",
            modality.name(),
            image.channels()
        )));
    }
    let refs: Vec<Vec<f32>> = (0..palette.num_classes())
        .map(|id| match modality {
            ModalityId::Rgb => palette.rgb_f32(id).to_vec(),
            ModalityId::Ir => vec![palette.ir_f32(id)],
        })
        .collect();
    Ok(image
        .data()
        .chunks_exact(image.channels())
        .map(|px| {
            let mut best = 0;
            let mut best_d = f32::INFINITY;
            for (k, r) in refs.iter().enumerate() {
                let d: f32 = px.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

/// Fraction of pixels whose nearest-palette class equals the map label.
pub fn pixel_accuracy(
    recon: &Image,
    seg: &SegMap,
    palette: &ClassPalette,
    modality: ModalityId,
) -> Result<f64, ShapeMismatch> {
    if (recon.width(), recon.height()) != (seg.width(), seg.height()) {
        return Err(ShapeMismatch(format!(
            "image {}x{} vs map {}x{}",
            recon.width(),
            recon.height(),
            seg.width(),
            seg.height()
        )));
    }
    let labels = classify_pixels(recon, palette, modality)?;
    let hits = labels
        .iter()
        .zip(seg.labels())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Bounding boxes of the 4-connected components of a label grid, per
/// non-background class, keeping components of at least [`MIN_BLOB_AREA`]
/// pixels. Boxes come out in raster order of each component's first pixel.
pub fn label_components(labels: &[u8], width: usize, height: usize) -> Vec<Detection> {
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        let class = labels[start];
        if class == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        if area >= MIN_BLOB_AREA {
            out.push(Detection {
                bbox: BoundingBox::new(x0, y0, x1, y1),
                class,
            });
        }
    }
    out
}

/// Classical detector: nearest-palette classification, then connected
/// components per class.
pub fn detect_blobs(
    image: &Image,
    palette: &ClassPalette,
    modality: ModalityId,
) -> Result<Vec<Detection>, ShapeMismatch> {
    let labels = classify_pixels(image, palette, modality)?;
    Ok(label_components(&labels, image.width(), image.height()))
}

/// Greedy one-to-one matching by descending IoU. Returns the matched pairs
/// as `(pred index, truth index, iou)`.
pub fn greedy_match(pred: &[Detection], truth: &[Detection]) -> Vec<(usize, usize, f64)> {
    let mut candidates = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let iou = p.bbox.iou(&t.bbox);
            if iou > 0.0 {
                candidates.push((i, j, iou));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut used_p = vec![false; pred.len()];
    let mut used_t = vec![false; truth.len()];
    let mut matches = Vec::new();
    for (i, j, iou) in candidates {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            matches.push((i, j, iou));
        }
    }
    matches
}

/// Mean IoU over matched pairs and unmatched boxes (which count as 0).
/// Two empty sets score 1.
pub fn miou(pred: &[Detection], truth: &[Detection]) -> f64 {
    if pred.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let matches = greedy_match(pred, truth);
    let unmatched = pred.len() + truth.len() - 2 * matches.len();
    let sum: f64 = matches.iter().map(|m| m.2).sum();
    sum / (matches.len() + unmatched) as f64
}

/// Fraction of truth boxes whose best-IoU detection (IoU at least
/// [`CLASSIFICATION_MIN_IOU`]) carries the same class. Counted per truth
/// object; an empty truth set scores 1.
pub fn classification_accuracy(pred: &[Detection], truth: &[Detection]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let correct = truth
        .iter()
        .filter(|t| {
            let best = pred
                .iter()
                .map(|p| (p.bbox.iou(&t.bbox), p.class))
                .fold(None::<(f64, u8)>, |acc, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            matches!(best, Some((iou, class)) if iou >= CLASSIFICATION_MIN_IOU && class == t.class)
        })
        .count();
    correct as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x0: usize, y0: usize, x1: usize, y1: usize, class: u8) -> Detection {
        Detection {
            bbox: BoundingBox::new(x0, y0, x1, y1),
            class,
        }
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(4, 4, &[0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = Image::filled(4, 4, &[0.6]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(4, 4, &[0.5, 0.5, 0.5])).is_err());
    }

    #[test]
    fn iou_half_overlap() {
        let a = BoundingBox::new(0, 0, 1, 0);
        let b = BoundingBox::new(1, 0, 2, 0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn miou_cases() {
        let truth = vec![det(0, 0, 3, 3, 2), det(10, 10, 12, 14, 1)];
        assert_eq!(miou(&truth, &truth), 1.0);
        assert_eq!(miou(&[det(20, 20, 22, 22, 2)], &[det(0, 0, 3, 3, 2)]), 0.0);
        assert_eq!(miou(&[], &[]), 1.0);
        assert_eq!(miou(&[], &truth), 0.0);
        // One exact match plus one unmatched truth box.
        assert_eq!(miou(&truth[..1], &truth), 0.5);
    }

    #[test]
    fn greedy_prefers_best_pair() {
        let truth = vec![det(0, 0, 9, 9, 1)];
        let pred = vec![det(0, 0, 4, 9, 1), det(0, 0, 8, 9, 1)];
        let m = greedy_match(&pred, &truth);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].0, 1);
    }

    #[test]
    fn classification_cases() {
        let truth = vec![det(0, 0, 3, 3, 2), det(10, 10, 13, 13, 1)];
        assert_eq!(classification_accuracy(&truth, &truth), 1.0);
        assert_eq!(classification_accuracy(&[], &truth), 0.0);
        let pred = vec![det(0, 0, 3, 3, 2), det(10, 10, 13, 13, 5)];
        assert_eq!(classification_accuracy(&pred, &truth), 0.5);
    }

    #[test]
    fn components_filter_small_blobs() {
        #[rustfmt::skip]
        let labels = vec![
            1, 1, 1, 0, 0, 2,
            1, 1, 1, 0, 0, 0,
            1, 1, 1, 0, 3, 3,
        ];
        let d = label_components(&labels, 6, 3);
        assert_eq!(d, vec![det(0, 0, 2, 2, 1)]);
    }

    #[test]
    fn nearest_palette_rgb_and_ir() {
        let palette = ClassPalette::urban();
        let person = palette.id_of("person").unwrap();
        let img = Image::filled(2, 2, &palette.rgb_f32(person));
        assert!(classify_pixels(&img, &palette, ModalityId::Rgb)
            .unwrap()
            .iter()
            .all(|&l| l == person));
        let ir = Image::filled(2, 2, &[1.0]);
        assert!(classify_pixels(&ir, &palette, ModalityId::Ir)
            .unwrap()
            .iter()
            .all(|&l| l == person));
    }

    #[test]
    fn mid_gray_accuracy_is_area_fraction() {
        // Left 3 columns background, right column bump. The class nearest to
        // mid-gray is found by direct distance evaluation over the palette.
        let palette = ClassPalette::urban();
        let bump = palette.id_of("bump").unwrap();
        let labels: Vec<u8> = (0..16).map(|i| if i % 4 == 3 { bump } else { 0 }).collect();
        let seg = SegMap::new(4, 4, 9, labels).unwrap();
        let dist = |id: u8| -> f64 {
            palette.get(id).unwrap().rgb.iter().map(|&c| (c as f64 - 127.5).powi(2)).sum()
        };
        let nearest = (0..9u8).min_by(|a, b| dist(*a).partial_cmp(&dist(*b)).unwrap()).unwrap();
        let expected = match nearest {
            0 => 0.75,
            id if id == bump => 0.25,
            _ => 0.0,
        };
        let gray = Image::filled(4, 4, &[0.5, 0.5, 0.5]);
        assert_eq!(classify_pixels(&gray, &palette, ModalityId::Rgb).unwrap()[0], nearest);
        assert_eq!(pixel_accuracy(&gray, &seg, &palette, ModalityId::Rgb).unwrap(), expected);
        assert_eq!(expected, 0.25);
    }

    #[test]
    fn blank_image_has_no_blobs() {
        let palette = ClassPalette::urban();
        let img = Image::filled(16, 16, &palette.rgb_f32(0));
        assert!(detect_blobs(&img, &palette, ModalityId::Rgb).unwrap().is_empty());
    }
}

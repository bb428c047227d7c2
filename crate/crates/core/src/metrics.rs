//! Region similarity (J) and boundary accuracy (F).
//!
//! J is intersection over union of binary masks. F extracts boundary pixels
//! by 4-neighborhood erosion difference (frame borders count as outside),
//! matches them against the other mask's boundary within a pixel tolerance
//! via disk dilation, and combines precision and recall into an F-measure.
//! The default tolerance is 0.008 of the image diagonal, rounded up — the
//! standard benchmark convention.

use crate::embedding::LabelRaster;
use crate::error::{Error, Result};

/// Intersection over union. Two empty masks count as a perfect match; an
/// empty mask against a non-empty one scores zero.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Boundary pixels by erosion difference: a mask pixel is boundary iff any
/// 4-neighbor is outside the mask or outside the image.
pub fn boundary_pixels(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    debug_assert_eq!(mask.len(), h * w);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let eroded = y > 0
                && y + 1 < h
                && x > 0
                && x + 1 < w
                && mask[(y - 1) * w + x]
                && mask[(y + 1) * w + x]
                && mask[y * w + x - 1]
                && mask[y * w + x + 1];
            out[y * w + x] = !eroded;
        }
    }
    out
}

/// Benchmark-standard boundary tolerance in pixels.
pub fn default_tolerance(h: usize, w: usize) -> f64 {
    (0.008 * ((h * h + w * w) as f64).sqrt()).ceil()
}

/// Dilates a boundary map by a disk of radius `tol`.
fn dilate(boundary: &[bool], h: usize, w: usize, tol: f64) -> Vec<bool> {
    let r = tol.floor() as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= tol * tol {
                offsets.push((dy, dx));
            }
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !boundary[y as usize * w + x as usize] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure at tolerance `tol` pixels. Both boundaries empty is a
/// perfect score; exactly one empty scores zero.
pub fn boundary_f(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: f64) -> f64 {
    let pb = boundary_pixels(pred, h, w);
    let gb = boundary_pixels(gt, h, w);
    let np = pb.iter().filter(|&&b| b).count();
    let ng = gb.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let gb_dilated = dilate(&gb, h, w, tol);
    let pb_dilated = dilate(&pb, h, w, tol);
    let matched_p = pb
        .iter()
        .zip(&gb_dilated)
        .filter(|(&p, &g)| p && g)
        .count();
    let matched_g = gb
        .iter()
        .zip(&pb_dilated)
        .filter(|(&g, &p)| g && p)
        .count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

// ── Reports ─────────────────────────────────────────────────────────

/// Per-sequence, per-object metric row.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub sequence: String,
    pub object: u8,
    pub j: f64,
    pub f: f64,
}

/// Collected evaluation rows plus their aggregates.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, row: EvalRow) {
        self.rows.push(row);
    }

    pub fn j_mean(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.j))
    }

    pub fn f_mean(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.f))
    }

    /// The headline score: arithmetic mean of the J and F means.
    pub fn jf(&self) -> f64 {
        (self.j_mean() + self.f_mean()) / 2.0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,object,j,f\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.sequence, r.object, r.j, r.f));
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores predictions against ground truth over frames 1.. (frame 0 is the
/// given mask and would inflate the averages). Returns one (J, F) pair per
/// object id, averaged over evaluated frames.
pub fn evaluate_sequence(
    preds: &[LabelRaster],
    gts: &[LabelRaster],
    num_objects: usize,
) -> Result<Vec<(u8, f64, f64)>> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "prediction/ground-truth length mismatch: {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    if preds.len() < 2 {
        return Err(Error::Contract(
            "need at least two frames to evaluate propagation".into(),
        ));
    }
    let (h, w) = (gts[0].h, gts[0].w);
    let tol = default_tolerance(h, w);
    let mut out = Vec::new();
    for id in 1..=num_objects as u8 {
        let mut js = Vec::new();
        let mut fs = Vec::new();
        for t in 1..preds.len() {
            let p = preds[t].binary(id);
            let g = gts[t].binary(id);
            js.push(jaccard(&p, &g));
            fs.push(boundary_f(&p, &g, h, w, tol));
        }
        out.push((id, mean(js.into_iter()), mean(fs.into_iter())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<bool> {
        let mut m = vec![false; h * w];
        for y in y0..y1 {
            for x in x0..x1 {
                m[y * w + x] = true;
            }
        }
        m
    }

    #[test]
    fn jaccard_trivial_cases() {
        let a = rect(8, 8, 1, 5, 1, 5);
        assert_eq!(jaccard(&a, &a), 1.0);
        let b = rect(8, 8, 5, 8, 5, 8);
        assert_eq!(jaccard(&a, &b), 0.0);
        let empty = vec![false; 64];
        assert_eq!(jaccard(&empty, &empty), 1.0);
        assert_eq!(jaccard(&a, &empty), 0.0);
    }

    #[test]
    fn jaccard_half_overlap_is_one_third() {
        // Two 4x4 squares overlapping on a 2x4 strip: 8 / (16+16-8) = 1/3.
        let a = rect(8, 8, 0, 4, 0, 4);
        let b = rect(8, 8, 2, 6, 0, 4);
        assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn boundary_of_rect_is_its_outline() {
        let m = rect(8, 8, 2, 6, 2, 6);
        let b = boundary_pixels(&m, 8, 8);
        let count = b.iter().filter(|&&x| x).count();
        assert_eq!(count, 12); // 4x4 square: 16 - 4 interior
        assert!(b[2 * 8 + 2] && b[5 * 8 + 5]);
        assert!(!b[3 * 8 + 3]);
    }

    #[test]
    fn border_touching_mask_has_boundary_at_frame_edge() {
        let m = rect(4, 4, 0, 4, 0, 4); // full frame
        let b = boundary_pixels(&m, 4, 4);
        assert!(b[0] && b[3] && b[12] && b[15]);
        assert!(!b[1 * 4 + 1]);
    }

    #[test]
    fn boundary_f_perfect_and_shifted() {
        let a = rect(32, 32, 8, 16, 8, 16);
        assert_eq!(boundary_f(&a, &a, 32, 32, 1.0), 1.0);
        // Shift by more than the tolerance everywhere: F collapses to 0.
        let b = rect(32, 32, 20, 28, 20, 28);
        assert_eq!(boundary_f(&a, &b, 32, 32, 1.0), 0.0);
        // Both empty is perfect, one empty is zero.
        let empty = vec![false; 32 * 32];
        assert_eq!(boundary_f(&empty, &empty, 32, 32, 1.0), 1.0);
        assert_eq!(boundary_f(&a, &empty, 32, 32, 1.0), 0.0);
    }

    #[test]
    fn boundary_f_is_symmetric() {
        let a = rect(16, 16, 2, 9, 3, 12);
        let b = rect(16, 16, 4, 11, 2, 10);
        let f1 = boundary_f(&a, &b, 16, 16, 2.0);
        let f2 = boundary_f(&b, &a, 16, 16, 2.0);
        assert!((f1 - f2).abs() < 1e-15);
    }

    #[test]
    fn default_tolerance_rounds_up() {
        assert_eq!(default_tolerance(64, 64), 1.0);
        assert_eq!(default_tolerance(480, 854), 8.0);
    }

    #[test]
    fn report_aggregates_are_arithmetic_means() {
        let mut rep = EvalReport::default();
        rep.push(EvalRow {
            sequence: "a".into(),
            object: 1,
            j: 0.8,
            f: 0.6,
        });
        rep.push(EvalRow {
            sequence: "a".into(),
            object: 2,
            j: 0.4,
            f: 0.2,
        });
        assert!((rep.j_mean() - 0.6).abs() < 1e-15);
        assert!((rep.f_mean() - 0.4).abs() < 1e-15);
        assert!((rep.jf() - 0.5).abs() < 1e-15);
    }
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability above which a prediction counts as foreground.
pub const BINARIZE_AT: f32 = 0.5;
/// Objects with at most this many pixels count as small.
pub const SMALL_AREA_PX: usize = 50;
/// Neighbourhood (Chebyshev radius, pixels) around an object bucket inside
/// which predicted pixels are scored.
pub const BUCKET_DILATION: usize = 2;

pub fn binarize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| if v > BINARIZE_AT { 1.0 } else { 0.0 })
}

fn check_pair(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn counts(p: &[f32], t: &[f32]) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut np = 0;
    let mut nt = 0;
    for (&a, &b) in p.iter().zip(t) {
        let (a, b) = (a > 0.5, b > 0.5);
        np += a as usize;
        nt += b as usize;
        inter += (a && b) as usize;
    }
    (inter, np, nt)
}

/// `2|P∩T| / (|P|+|T|)` of binary maps; 1.0 when both are empty.
pub fn dice_score(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    check_pair("dice_score", pred, target)?;
    let (i, p, t) = counts(pred.data(), target.data());
    Ok(if p + t == 0 { 1.0 } else { 2.0 * i as f64 / (p + t) as f64 })
}

/// `|P∩T| / |P∪T|` of binary maps; 1.0 when both are empty.
pub fn iou(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    check_pair("iou", pred, target)?;
    let (i, p, t) = counts(pred.data(), target.data());
    let union = p + t - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// 8-connected components of a binary `h×w` map, as pixel index lists.
pub fn components(map: &[f32], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if map[start] <= 0.5 || label[start] {
            continue;
        }
        label[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if map[q] > 0.5 && !label[q] {
                        label[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn dilate(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for ny in y.saturating_sub(r)..(y + r + 1).min(h) {
                for nx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    out[ny * w + nx] = true;
                }
            }
        }
    }
    out
}

/// Object size bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bucket {
    Small,
    Large,
}

/// Dice over one size bucket of ground-truth objects for a single `h×w`
/// sample. Ground truth is the bucket's objects; predicted pixels count only
/// inside a `BUCKET_DILATION` neighbourhood of them that excludes objects of
/// the other bucket. `None` when the sample has no object in the bucket.
pub fn bucket_dice(
    pred: &[f32],
    target: &[f32],
    h: usize,
    w: usize,
    threshold_px: usize,
    bucket: Bucket,
) -> Option<f64> {
    let mut inside = vec![false; h * w];
    let mut other = vec![false; h * w];
    let mut any = false;
    for comp in components(target, h, w) {
        let is_small = comp.len() <= threshold_px;
        let wanted = match bucket {
            Bucket::Small => is_small,
            Bucket::Large => !is_small,
        };
        let dst = if wanted {
            any = true;
            &mut inside
        } else {
            &mut other
        };
        for p in comp {
            dst[p] = true;
        }
    }
    if !any {
        return None;
    }
    let region = dilate(&inside, h, w, BUCKET_DILATION);
    let (mut i, mut np, mut nt) = (0usize, 0usize, 0usize);
    for q in 0..h * w {
        let t = inside[q];
        let p = pred[q] > 0.5 && region[q] && !other[q];
        i += (p && t) as usize;
        np += p as usize;
        nt += t as usize;
    }
    Some(2.0 * i as f64 / (np + nt) as f64)
}

/// Dice over the small objects of one sample (`1×H×W` or `H×W` maps).
/// `areas` are the recorded per-object areas; a sample whose objects are all
/// larger than `threshold_px` yields `None`.
pub fn small_object_dice(
    pred: &Tensor<f32>,
    target: &Tensor<f32>,
    areas: &[usize],
    threshold_px: usize,
) -> Result<Option<f64>> {
    check_pair("small_object_dice", pred, target)?;
    if !areas.iter().any(|&a| a <= threshold_px) {
        return Ok(None);
    }
    let (h, w) = plane(pred)?;
    Ok(bucket_dice(pred.data(), target.data(), h, w, threshold_px, Bucket::Small))
}

pub(crate) fn plane(t: &Tensor<f32>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        ref s => Err(Error::shape("metrics", format!("expected a single plane, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let m = t(&[1., 1., 0., 0.]);
        assert_eq!(dice_score(&m, &m).unwrap(), 1.0);
        assert_eq!(dice_score(&t(&[0., 0., 1., 1.]), &m).unwrap(), 0.0);
        assert_eq!(dice_score(&t(&[0.; 4]), &t(&[0.; 4])).unwrap(), 1.0);
        // |P| = 4, |T| = 6, overlap 3
        let p = t(&[1., 1., 1., 1., 0., 0., 0., 0.]);
        let g = t(&[1., 1., 1., 0., 1., 1., 1., 0.]);
        assert!((dice_score(&p, &g).unwrap() - 0.6).abs() < 1e-12);
        assert!(dice_score(&t(&[1.]), &t(&[1., 0.])).is_err());
    }

    #[test]
    fn components_are_eight_connected() {
        #[rustfmt::skip]
        let map = [
            1., 0., 0., 1.,
            0., 1., 0., 1.,
            0., 0., 0., 0.,
            1., 1., 0., 0.,
        ];
        let mut sizes: Vec<usize> = components(&map, 4, 4).iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2]);
    }
}

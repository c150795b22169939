use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GridFeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

/// Anchor side lengths, in cells.
pub const ANCHOR_SCALES: [f32; 3] = [0.5, 1.0, 2.0];
/// Anchor height/width ratios.
pub const ANCHOR_RATIOS: [f32; 3] = [0.5, 1.0, 2.0];
pub const ANCHORS_PER_CELL: usize = ANCHOR_SCALES.len() * ANCHOR_RATIOS.len();

/// Axis-aligned box in grid coordinates; cell `(r, c)` spans
/// `[c, c+1] × [r, r+1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoundingBox {
    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f32 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn clip(self, rows: usize, cols: usize) -> Self {
        Self {
            x1: self.x1.clamp(0.0, cols as f32),
            y1: self.y1.clamp(0.0, rows as f32),
            x2: self.x2.clamp(0.0, cols as f32),
            y2: self.y2.clamp(0.0, rows as f32),
        }
    }
}

/// Dense anchors, `ANCHORS_PER_CELL` per cell, in (row, col, scale, ratio)
/// order and clipped to the map.
pub fn generate_anchors(rows: usize, cols: usize) -> Vec<BoundingBox> {
    let mut out = Vec::with_capacity(rows * cols * ANCHORS_PER_CELL);
    for r in 0..rows {
        for c in 0..cols {
            let (cx, cy) = (c as f32 + 0.5, r as f32 + 0.5);
            for s in ANCHOR_SCALES {
                for ratio in ANCHOR_RATIOS {
                    let w = s / ratio.sqrt();
                    let h = s * ratio.sqrt();
                    out.push(
                        BoundingBox {
                            x1: cx - w / 2.0,
                            y1: cy - h / 2.0,
                            x2: cx + w / 2.0,
                            y2: cy + h / 2.0,
                        }
                        .clip(rows, cols),
                    );
                }
            }
        }
    }
    out
}

/// Greedy NMS. Returns indices in descending score order (ties broken by
/// lower index); a box is dropped when its IoU with an already kept box is
/// at least `iou_threshold`.
pub fn nms(boxes: &[BoundingBox], scores: &[f32], iou_threshold: f32, max_keep: usize) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if keep.len() == max_keep {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && boxes[i].iou(&boxes[j]) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    pub boxes: Vec<BoundingBox>,
    pub scores: Vec<f32>,
    /// Anchors scored before suppression.
    pub num_candidates: usize,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub num_keep: usize,
    pub nms_iou: f32,
    /// Width of the two per-region fully-connected layers.
    pub head_hidden: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            num_keep: 100,
            nms_iou: 0.7,
            head_hidden: 1024,
        }
    }
}

/// Objectness scorer (a 1×1 conv with one output per anchor shape) and a
/// two-layer per-region head.
#[derive(Clone, Debug)]
pub struct RegionBaseline<T> {
    pub config: RegionConfig,
    pub store: ParamStore<T>,
    channels: usize,
}

const OBJ_W: usize = 0;
const OBJ_B: usize = 1;
const FC1_W: usize = 2;
const FC1_B: usize = 3;
const FC2_W: usize = 4;
const FC2_B: usize = 5;

impl<T: Real> RegionBaseline<T> {
    pub fn new<R: Rng + ?Sized>(config: RegionConfig, channels: usize, rng: &mut R) -> Result<Self> {
        if config.num_keep == 0 || !(config.nms_iou > 0.0 && config.nms_iou <= 1.0) || config.head_hidden == 0 {
            return Err(Error::Config(format!("invalid region configuration {config:?}")));
        }
        let hid = config.head_hidden;
        let mut store = ParamStore::new();
        store.add_normal("region.objectness.weight", &[ANCHORS_PER_CELL, channels], 0.01, rng)?;
        store.add_full("region.objectness.bias", &[ANCHORS_PER_CELL], 0.0)?;
        store.add_normal("region.fc1.weight", &[channels, hid], (2.0 / channels as f64).sqrt(), rng)?;
        store.add_full("region.fc1.bias", &[hid], 0.0)?;
        store.add_normal("region.fc2.weight", &[hid, hid], (2.0 / hid as f64).sqrt(), rng)?;
        store.add_full("region.fc2.bias", &[hid], 0.0)?;
        Ok(Self {
            config,
            store,
            channels,
        })
    }

    fn param(&self, slot: usize) -> &Tensor<T> {
        self.store.get(self.store.ids().nth(slot).expect("fixed parameter layout"))
    }

    /// Objectness logits `[H·W·9]` in anchor order.
    pub fn objectness(&self, fmap: &GridFeatureMap<T>) -> Result<Vec<T>> {
        if fmap.channels() != self.channels {
            return Err(Error::Invalid(format!(
                "feature map has {} channels, scorer expects {}",
                fmap.channels(),
                self.channels
            )));
        }
        let plane = fmap.num_cells();
        let flat = fmap.features.clone().reshape(vec![self.channels, plane])?;
        let logits = self.param(OBJ_W).matmul(&flat)?; // [9, HW]
        let bias = self.param(OBJ_B).data();
        let mut out = Vec::with_capacity(plane * ANCHORS_PER_CELL);
        for p in 0..plane {
            for a in 0..ANCHORS_PER_CELL {
                out.push(logits.data()[a * plane + p] + bias[a]);
            }
        }
        Ok(out)
    }

    pub fn propose_regions(&self, fmap: &GridFeatureMap<T>) -> Result<RegionSet> {
        if fmap.num_cells() == 0 {
            return Err(Error::Invalid("empty feature map".into()));
        }
        let anchors = generate_anchors(fmap.rows(), fmap.cols());
        let scores: Vec<f32> = self
            .objectness(fmap)?
            .into_iter()
            .map(|s| 1.0 / (1.0 + (-s.to_f64_lossy()).exp()) as f32)
            .collect();
        let keep = nms(&anchors, &scores, self.config.nms_iou, self.config.num_keep);
        Ok(RegionSet {
            boxes: keep.iter().map(|&i| anchors[i]).collect(),
            scores: keep.iter().map(|&i| scores[i]).collect(),
            num_candidates: anchors.len(),
        })
    }

    /// Per-region features `[N_r, head_hidden]` from pooled `[N_r, C]` rows.
    pub fn box_head(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        let relu_affine = |x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
            let mut y = x.matmul(w)?;
            let n = b.len();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v = (*v + b.data()[i % n]).max(T::zero());
            }
            Ok(y)
        };
        let h = relu_affine(pooled, self.param(FC1_W), self.param(FC1_B))?;
        relu_affine(&h, self.param(FC2_W), self.param(FC2_B))
    }

    /// Proposals, 1×1 RoIPool and the box head.
    pub fn region_features(&self, fmap: &GridFeatureMap<T>) -> Result<(RegionSet, Tensor<T>)> {
        let regions = self.propose_regions(fmap)?;
        let pooled = roi_pool(fmap, &regions.boxes)?;
        let feats = self.box_head(&pooled)?;
        Ok((regions, feats))
    }
}

/// 1×1 RoIPool: channel-wise max over cells whose centres lie in the box
/// (borders inclusive), or the cell under the box centre if none do.
pub fn roi_pool<T: Real>(fmap: &GridFeatureMap<T>, boxes: &[BoundingBox]) -> Result<Tensor<T>> {
    let (c, rows, cols) = (fmap.channels(), fmap.rows(), fmap.cols());
    let plane = rows * cols;
    let src = fmap.features.data();
    let mut out = Vec::with_capacity(boxes.len() * c);
    for (i, b) in boxes.iter().enumerate() {
        let coords = [b.x1, b.y1, b.x2, b.y2];
        if coords.iter().any(|v| !v.is_finite()) || b.x2 <= b.x1 || b.y2 <= b.y1 {
            return Err(Error::Invalid(format!("malformed box {i}: {b:?}")));
        }
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > cols as f32 || b.y2 > rows as f32 {
            return Err(Error::Invalid(format!("box {i} {b:?} outside a {rows}x{cols} map")));
        }
        let inside = |v: f32, lo: f32, hi: f32| lo <= v && v <= hi;
        let mut cells: Vec<usize> = Vec::new();
        for r in 0..rows {
            for q in 0..cols {
                if inside(q as f32 + 0.5, b.x1, b.x2) && inside(r as f32 + 0.5, b.y1, b.y2) {
                    cells.push(r * cols + q);
                }
            }
        }
        if cells.is_empty() {
            let r = (((b.y1 + b.y2) / 2.0).floor() as usize).min(rows - 1);
            let q = (((b.x1 + b.x2) / 2.0).floor() as usize).min(cols - 1);
            cells.push(r * cols + q);
        }
        for ch in 0..c {
            let base = ch * plane;
            let m = cells
                .iter()
                .map(|p| src[base + p])
                .fold(T::neg_infinity(), T::max);
            out.push(m);
        }
    }
    Ok(Tensor::new(vec![boxes.len(), c], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Repeatedly take the best remaining box and discard everything that
    /// overlaps it.
    fn reference_nms(boxes: &[BoundingBox], scores: &[f32], thr: f32, max_keep: usize) -> Vec<usize> {
        let mut remaining: Vec<usize> = (0..boxes.len()).collect();
        let mut keep = Vec::new();
        while !remaining.is_empty() && keep.len() < max_keep {
            let mut best = 0;
            for k in 1..remaining.len() {
                let (i, j) = (remaining[k], remaining[best]);
                if scores[i] > scores[j] || (scores[i] == scores[j] && i < j) {
                    best = k;
                }
            }
            let top = remaining.swap_remove(best);
            keep.push(top);
            remaining.retain(|&j| boxes[top].iou(&boxes[j]) < thr);
        }
        keep
    }

    fn random_boxes(rng: &mut ChaCha8Rng, n: usize, rows: usize, cols: usize) -> Vec<BoundingBox> {
        (0..n)
            .map(|_| {
                let x1 = rng.gen_range(0.0..cols as f32 - 0.1);
                let y1 = rng.gen_range(0.0..rows as f32 - 0.1);
                BoundingBox {
                    x1,
                    y1,
                    x2: rng.gen_range(x1 + 0.05..=cols as f32),
                    y2: rng.gen_range(y1 + 0.05..=rows as f32),
                }
            })
            .collect()
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> GridFeatureMap<f32> {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        GridFeatureMap::new(Tensor::new(vec![c, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox { x1: 0.0, y1: 0.0, x2: 2.0, y2: 2.0 };
        let b = BoundingBox { x1: 1.0, y1: 1.0, x2: 3.0, y2: 3.0 };
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-7);
        assert_eq!(a.iou(&a), 1.0);
        let far = BoundingBox { x1: 5.0, y1: 5.0, x2: 6.0, y2: 6.0 };
        assert_eq!(a.iou(&far), 0.0);
    }

    #[test]
    fn anchor_counts() {
        assert_eq!(generate_anchors(1, 1).len(), 9);
        assert_eq!(generate_anchors(2, 3).len(), 54);
        assert_eq!(generate_anchors(19, 32).len(), 5472);
        for b in generate_anchors(3, 4) {
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 4.0 && b.y2 <= 3.0);
            assert!(b.x2 > b.x1 && b.y2 > b.y1);
        }
    }

    #[test]
    fn single_cell_nms_matches_reference() {
        let anchors = generate_anchors(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let scores: Vec<f32> = (0..9).map(|_| rng.gen()).collect();
            let keep = nms(&anchors, &scores, 0.7, 100);
            assert_eq!(keep, reference_nms(&anchors, &scores, 0.7, 100));
            assert!(keep.len() >= 2, "small nested anchors survive the large ones");
        }
    }

    #[test]
    fn nms_matches_reference_on_random_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..200 {
            let n = rng.gen_range(1..80);
            let boxes = random_boxes(&mut rng, n, 4, 6);
            // coarse scores force ties
            let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..10) as f32).collect();
            let thr = [0.3, 0.5, 0.7][trial % 3];
            let max_keep = rng.gen_range(1..30);
            let keep = nms(&boxes, &scores, thr, max_keep);
            assert_eq!(keep, reference_nms(&boxes, &scores, thr, max_keep));
            for (a, &i) in keep.iter().enumerate() {
                for &j in &keep[a + 1..] {
                    assert!(boxes[i].iou(&boxes[j]) < thr);
                }
            }
        }
    }

    #[test]
    fn proposals_are_sorted_bounded_and_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fmap = random_map(&mut rng, 8, 4, 5);
        let cfg = RegionConfig {
            head_hidden: 16,
            ..RegionConfig::default()
        };
        let baseline = RegionBaseline::<f32>::new(cfg, 8, &mut rng).unwrap();
        let set = baseline.propose_regions(&fmap).unwrap();
        assert_eq!(set.num_candidates, 4 * 5 * 9);
        assert!(!set.is_empty() && set.len() <= 100);
        assert!(set.scores.windows(2).all(|w| w[0] >= w[1]));
        for (a, b) in set.boxes.iter().enumerate() {
            for other in &set.boxes[a + 1..] {
                assert!(b.iou(other) < 0.7);
            }
        }
        let (regions, feats) = baseline.region_features(&fmap).unwrap();
        assert_eq!(feats.shape(), &[regions.len(), 16]);
    }

    #[test]
    fn keep_one_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fmap = random_map(&mut rng, 6, 3, 3);
        let cfg = RegionConfig {
            num_keep: 1,
            nms_iou: 0.7,
            head_hidden: 4,
        };
        let baseline = RegionBaseline::<f32>::new(cfg, 6, &mut rng).unwrap();
        let logits = baseline.objectness(&fmap).unwrap();
        let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        let set = baseline.propose_regions(&fmap).unwrap();
        assert_eq!(set.boxes, vec![generate_anchors(3, 3)[best]]);
    }

    #[test]
    fn objectness_is_a_pointwise_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fmap = random_map(&mut rng, 5, 2, 3);
        let baseline = RegionBaseline::<f32>::new(RegionConfig::default(), 5, &mut rng).unwrap();
        let logits = baseline.objectness(&fmap).unwrap();
        let (w, b) = (baseline.param(OBJ_W), baseline.param(OBJ_B));
        for r in 0..2 {
            for c in 0..3 {
                let cell = fmap.cell(r, c);
                for a in 0..9 {
                    let expect: f32 = (0..5).map(|k| w.data()[a * 5 + k] * cell[k]).sum::<f32>() + b.data()[a];
                    assert!((logits[(r * 3 + c) * 9 + a] - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn roi_pool_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fmap = random_map(&mut rng, 3, 2, 3);
        let whole = BoundingBox { x1: 0.0, y1: 0.0, x2: 3.0, y2: 2.0 };
        let one = BoundingBox { x1: 1.0, y1: 1.0, x2: 2.0, y2: 2.0 };
        let tiny = BoundingBox { x1: 2.1, y1: 0.1, x2: 2.2, y2: 0.2 };
        let pooled = roi_pool(&fmap, &[whole, one, tiny]).unwrap();
        for ch in 0..3 {
            let plane = &fmap.features.data()[ch * 6..ch * 6 + 6];
            let max = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(pooled.row(0)[ch], max);
        }
        assert_eq!(pooled.row(1), fmap.cell(1, 1).as_slice());
        assert_eq!(pooled.row(2), fmap.cell(0, 2).as_slice());
    }

    #[test]
    fn roi_pool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let fmap = random_map(&mut rng, 4, h, w);
            let boxes = random_boxes(&mut rng, 10, h, w);
            let pooled = roi_pool(&fmap, &boxes).unwrap();
            for (i, b) in boxes.iter().enumerate() {
                for ch in 0..4 {
                    let mut best: Option<f32> = None;
                    for r in 0..h {
                        for c in 0..w {
                            let (cx, cy) = (c as f32 + 0.5, r as f32 + 0.5);
                            if cx >= b.x1 && cx <= b.x2 && cy >= b.y1 && cy <= b.y2 {
                                let v = fmap.features.data()[(ch * h + r) * w + c];
                                best = Some(best.map_or(v, |m| m.max(v)));
                            }
                        }
                    }
                    let expect = best.unwrap_or_else(|| {
                        let r = (((b.y1 + b.y2) / 2.0) as usize).min(h - 1);
                        let c = (((b.x1 + b.x2) / 2.0) as usize).min(w - 1);
                        fmap.features.data()[(ch * h + r) * w + c]
                    });
                    assert_eq!(pooled.row(i)[ch], expect);
                }
            }
        }
    }

    #[test]
    fn roi_pool_rejects_bad_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fmap = random_map(&mut rng, 2, 2, 2);
        let flipped = BoundingBox { x1: 1.0, y1: 0.0, x2: 1.0, y2: 1.0 };
        let outside = BoundingBox { x1: 0.0, y1: 0.0, x2: 3.0, y2: 1.0 };
        let nan = BoundingBox { x1: f32::NAN, y1: 0.0, x2: 1.0, y2: 1.0 };
        for b in [flipped, outside, nan] {
            assert!(roi_pool(&fmap, &[b]).is_err());
        }
    }
}

//! Toy differentiable detector, output utility and accuracy metrics.
//!
//! The model is a two-layer convolutional scorer: a fixed zero-sum feature
//! kernel with a ReLU, followed by one matched filter per object kind and a
//! sigmoid. Every interior grid cell gets a score per kind; non-maximum
//! suppression over a 3x3 neighbourhood keeps local maxima only, so the
//! surviving elements never touch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, AutodiffError, ComputationRecord, NdArray, NodeId};

/// Score a full-contrast planted pattern reaches on a clean background.
const CONFIDENT_SCORE: f64 = 0.8;
const PATTERN_SIZE: usize = 5;
/// Largest accepted off-peak matched-filter response, relative to the peak.
const MAX_SIDE_LOBE: f64 = 0.2;
/// Largest accepted response of one kind's filter to another kind's pattern.
/// At the default gain this stays below a score of 0.4.
const MAX_CROSS_KIND: f64 = 0.55;
const MAX_TRIES: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub kind: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InferenceResult {
    pub frame_index: usize,
    pub elements: Vec<Element>,
}

impl InferenceResult {
    pub fn confident(&self, threshold: f64) -> impl Iterator<Item = &Element> {
        self.elements.iter().filter(move |e| e.score > threshold)
    }

    pub fn count_confident(&self, threshold: f64) -> usize {
        self.confident(threshold).count()
    }

    /// Copy of the result attributed to another frame position.
    pub fn at_frame(&self, frame_index: usize) -> InferenceResult {
        InferenceResult {
            frame_index,
            elements: self.elements.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSpec {
    pub kinds: usize,
    pub seed: u64,
    pub threshold: f64,
    pub sharpness: f64,
    pub score_bias: f64,
    pub feature_bias: f64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec {
            kinds: 1,
            seed: 1,
            threshold: 0.5,
            sharpness: 20.0,
            score_bias: -3.0,
            feature_bias: -0.04,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    height: usize,
    width: usize,
    feature_kernel: NdArray,
    feature_bias: f64,
    patterns: Vec<NdArray>,
    matched: Vec<NdArray>,
    score_bias: f64,
    threshold: f64,
    sharpness: f64,
}

/// A frame's forward pass, retained so the output utility can be
/// back-propagated without running the model again.
#[derive(Debug, Clone)]
pub struct FrameTrace {
    pub result: InferenceResult,
    record: ComputationRecord,
    score_nodes: Vec<NodeId>,
    utility_attached: bool,
}

impl FrameTrace {
    pub fn record(&self) -> &ComputationRecord {
        &self.record
    }
}

fn feature_kernel() -> NdArray {
    let k: Vec<f64> = [1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0].iter().map(|v| v / 16.0).collect();
    NdArray::new(&[3, 3], k).expect("3x3")
}

impl DetectorModel {
    pub fn new(height: usize, width: usize, spec: &DetectorSpec) -> Self {
        assert!(spec.kinds >= 1, "at least one object kind");
        assert!(spec.threshold > 0.0 && spec.threshold < 1.0);
        assert!(spec.sharpness > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let feature_kernel = feature_kernel();
        let logit = (CONFIDENT_SCORE / (1.0 - CONFIDENT_SCORE)).ln();

        let mut patterns: Vec<NdArray> = Vec::with_capacity(spec.kinds);
        let mut matched: Vec<NdArray> = Vec::with_capacity(spec.kinds);
        let mut responses: Vec<NdArray> = Vec::with_capacity(spec.kinds);
        while patterns.len() < spec.kinds {
            // patterns are drawn until the matched filter is selective: off-peak
            // and cross-kind responses stay well below the peak; if none is found
            // the most selective candidate is kept
            let mut best: Option<(f64, NdArray, NdArray, NdArray, f64)> = None;
            for _ in 0..MAX_TRIES {
                let p = random_pattern(&mut rng);
                let response = feature_response(&p, &feature_kernel, spec.feature_bias);
                let mean = response.sum() / response.len() as f64;
                let filter = response.map(|v| v - mean);
                let own = correlate_at(&response, &filter, 0, 0);
                let mut cross: f64 = 0.0;
                for (other, r) in matched.iter().zip(&responses) {
                    let peak_other = correlate_at(r, other, 0, 0);
                    cross = cross.max(max_shifted(&response, other, false) / peak_other);
                    cross = cross.max(max_shifted(r, &filter, false) / own);
                }
                let side = max_shifted(&response, &filter, true) / own;
                let badness = (side / MAX_SIDE_LOBE).max(cross / MAX_CROSS_KIND);
                if best.as_ref().is_none_or(|b| badness < b.0) {
                    best = Some((badness, p, response, filter, own));
                }
                if badness <= 1.0 {
                    break;
                }
            }
            let (_, p, response, filter, own) = best.expect("at least one candidate");
            let gain = (logit - spec.score_bias) / own;
            patterns.push(p);
            responses.push(response);
            matched.push(filter.map(|v| v * gain));
        }
        DetectorModel {
            height,
            width,
            feature_kernel,
            feature_bias: spec.feature_bias,
            patterns,
            matched,
            score_bias: spec.score_bias,
            threshold: spec.threshold,
            sharpness: spec.sharpness,
        }
    }

    pub fn frame_shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn kinds(&self) -> usize {
        self.patterns.len()
    }

    /// Object pattern of `kind`, side length 5, values in [0, 1].
    pub fn pattern(&self, kind: usize) -> &NdArray {
        &self.patterns[kind]
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }

    /// Cells closer than this to the frame edge never produce elements.
    pub fn margin(&self) -> usize {
        self.matched[0].shape()[0] / 2 + 1
    }

    /// Builds the scoring record for one frame without evaluating it.
    pub fn build_record(&self) -> (ComputationRecord, Vec<NodeId>) {
        let mut rec = ComputationRecord::new();
        let x = rec.input(&[self.height, self.width]);
        let k1 = rec.param(self.feature_kernel.clone());
        let c1 = rec.conv2d(x, k1).expect("static shapes");
        let b1 = rec.param(NdArray::scalar(self.feature_bias));
        let a1 = rec.add(c1, b1).expect("static shapes");
        let h = rec.relu(a1).expect("static shapes");
        let mut scores = Vec::with_capacity(self.matched.len());
        for m in &self.matched {
            let k = rec.param(m.clone());
            let c = rec.conv2d(h, k).expect("static shapes");
            let b = rec.param(NdArray::scalar(self.score_bias));
            let a = rec.add(c, b).expect("static shapes");
            scores.push(rec.sigmoid(a).expect("static shapes"));
        }
        (rec, scores)
    }

    /// Runs the model on one frame and keeps the evaluated record.
    pub fn trace(&self, frame: &NdArray, frame_index: usize) -> Result<FrameTrace, AutodiffError> {
        let (mut rec, score_nodes) = self.build_record();
        let x = rec.input_node().expect("declared");
        // a throwaway sink so forward has something to return
        let probe = rec.sum(score_nodes[0])?;
        rec.set_output(probe)?;
        rec.forward(frame).map_err(|e| match e {
            AutodiffError::Shape { node, detail, .. } if node == x.index() => AutodiffError::Shape {
                node,
                op: "input",
                detail: format!("detector expects {}x{} frames: {detail}", self.height, self.width),
            },
            other => other,
        })?;
        let maps: Vec<&NdArray> = score_nodes
            .iter()
            .map(|&n| rec.value(n).expect("evaluated"))
            .collect();
        let elements = self.suppress(&maps);
        Ok(FrameTrace {
            result: InferenceResult {
                frame_index,
                elements,
            },
            record: rec,
            score_nodes,
            utility_attached: false,
        })
    }

    pub fn infer(&self, frame: &NdArray, frame_index: usize) -> Result<InferenceResult, AutodiffError> {
        Ok(self.trace(frame, frame_index)?.result)
    }

    fn suppress(&self, maps: &[&NdArray]) -> Vec<Element> {
        let (h, w) = (self.height, self.width);
        let mut best = vec![0.0; h * w];
        let mut kind = vec![0usize; h * w];
        for (c, m) in maps.iter().enumerate() {
            for (i, &v) in m.data().iter().enumerate() {
                if c == 0 || v > best[i] {
                    best[i] = v;
                    kind[i] = c;
                }
            }
        }
        let margin = self.margin();
        let mut out = Vec::new();
        if h < 2 * margin || w < 2 * margin {
            return out;
        }
        for r in margin..h - margin {
            for c in margin..w - margin {
                let idx = r * w + c;
                let v = best[idx];
                let mut keep = true;
                'nb: for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
                        let nidx = nr * w + nc;
                        let nv = best[nidx];
                        // equal scores: the earlier cell in raster order wins
                        if nv > v || (nv == v && nidx < idx) {
                            keep = false;
                            break 'nb;
                        }
                    }
                }
                if keep {
                    out.push(Element {
                        row: r,
                        col: c,
                        score: v,
                        kind: kind[idx],
                    });
                }
            }
        }
        out
    }

    /// Extends a trace with the output-utility sink over its own elements and
    /// returns the utility value. Only the appended nodes are evaluated.
    pub fn attach_utility(&self, trace: &mut FrameTrace) -> Result<f64, AutodiffError> {
        if trace.utility_attached {
            return trace.record.output_value();
        }
        let (h, w) = (self.height, self.width);
        let rec = &mut trace.record;
        let mut total: Option<NodeId> = None;
        for (c, &score) in trace.score_nodes.iter().enumerate() {
            let mut mask = vec![0.0; h * w];
            for e in trace.result.elements.iter().filter(|e| e.kind == c) {
                mask[e.row * w + e.col] = 1.0;
            }
            let s = rec.param(NdArray::scalar(self.sharpness));
            let scaled = rec.mul(score, s)?;
            let shift = rec.param(NdArray::scalar(-self.sharpness * self.threshold));
            let shifted = rec.add(scaled, shift)?;
            let soft = rec.sigmoid(shifted)?;
            let m = rec.param(NdArray::new(&[h, w], mask)?);
            let picked = rec.mul(soft, m)?;
            let part = rec.sum(picked)?;
            total = Some(match total {
                None => part,
                Some(t) => rec.add(t, part)?,
            });
        }
        let total = total.expect("at least one kind");
        rec.set_output(total)?;
        rec.evaluate_pending()?;
        trace.utility_attached = true;
        rec.output_value()
    }

    /// d(utility)/d(frame) for a trace; one backward pass.
    pub fn utility_gradient(
        &self,
        trace: &mut FrameTrace,
        skip_parameter_gradients: bool,
    ) -> Result<NdArray, AutodiffError> {
        self.attach_utility(trace)?;
        trace.record.backward(skip_parameter_gradients)
    }

    /// Scoring record with utility sink, evaluated on `frame`. Used by the
    /// gradient checks.
    pub fn utility_record(&self, frame: &NdArray) -> Result<ComputationRecord, AutodiffError> {
        let mut t = self.trace(frame, 0)?;
        self.attach_utility(&mut t)?;
        Ok(t.record)
    }

    /// Places `pattern(kind)` scaled by `contrast` centred at (row, col),
    /// adding onto `frame`. Pixels falling outside are dropped.
    pub fn plant(&self, frame: &mut NdArray, kind: usize, row: isize, col: isize, contrast: f64) {
        plant_pattern(frame, &self.patterns[kind], row, col, contrast);
    }
}

pub fn plant_pattern(frame: &mut NdArray, pattern: &NdArray, row: isize, col: isize, contrast: f64) {
    let (h, w) = frame.spatial_dims().expect("2-D frame");
    let n = frame.shape().len();
    assert_eq!(n, 2, "plant expects a single frame");
    let p = pattern.shape()[0];
    let half = (p / 2) as isize;
    let data = frame.data_mut();
    for a in 0..p {
        for b in 0..p {
            let r = row + a as isize - half;
            let c = col + b as isize - half;
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                continue;
            }
            data[r as usize * w + c as usize] += contrast * pattern.data()[a * p + b];
        }
    }
}

fn random_pattern(rng: &mut ChaCha8Rng) -> NdArray {
    let p = PATTERN_SIZE;
    let data = (0..p * p)
        .map(|i| if i == p * p / 2 || rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    NdArray::new(&[p, p], data).expect("pattern")
}

/// Correlation of `a` shifted by (dr, dc) with `b`; both are square and of
/// equal size.
fn correlate_at(a: &NdArray, b: &NdArray, dr: isize, dc: isize) -> f64 {
    let n = a.shape()[0] as isize;
    let mut acc = 0.0;
    for r in 0..n {
        for c in 0..n {
            let (ar, ac) = (r + dr, c + dc);
            if ar < 0 || ac < 0 || ar >= n || ac >= n {
                continue;
            }
            acc += a.data()[(ar * n + ac) as usize] * b.data()[(r * n + c) as usize];
        }
    }
    acc
}

/// Largest correlation over shifts; `skip_near` excludes the peak and its
/// 3x3 neighbourhood, which non-maximum suppression already handles.
fn max_shifted(a: &NdArray, b: &NdArray, skip_near: bool) -> f64 {
    let n = a.shape()[0] as isize;
    let mut best = f64::NEG_INFINITY;
    for dr in -(n - 1)..n {
        for dc in -(n - 1)..n {
            if skip_near && dr.abs() <= 1 && dc.abs() <= 1 {
                continue;
            }
            best = best.max(correlate_at(a, b, dr, dc));
        }
    }
    best
}

/// Feature-layer response of a pattern on an empty canvas, cropped to the
/// receptive field of a matched filter.
fn feature_response(pattern: &NdArray, kernel: &NdArray, bias: f64) -> NdArray {
    let p = pattern.shape()[0];
    let size = p + 2;
    let canvas = 3 * size;
    let mut frame = NdArray::zeros(&[canvas, canvas]);
    let centre = (canvas / 2) as isize;
    plant_pattern(&mut frame, pattern, centre, centre, 1.0);
    let mut rec = ComputationRecord::new();
    let x = rec.input(&[canvas, canvas]);
    let k = rec.param(kernel.clone());
    let c = rec.conv2d(x, k).expect("shapes");
    let b = rec.param(NdArray::scalar(bias));
    let a = rec.add(c, b).expect("shapes");
    let r = rec.relu(a).expect("shapes");
    let s = rec.sum(r).expect("shapes");
    rec.set_output(s).expect("scalar");
    rec.forward(&frame).expect("shapes");
    let full = rec.value(r).expect("evaluated");
    let half = size / 2;
    let mut out = Vec::with_capacity(size * size);
    for a in 0..size {
        for b in 0..size {
            let rr = canvas / 2 + a - half;
            let cc = canvas / 2 + b - half;
            out.push(full.data()[rr * canvas + cc]);
        }
    }
    NdArray::new(&[size, size], out).expect("crop")
}

/// Smooth count of confident elements: sum of `sigmoid(s * (score - theta))`
/// over all elements of all results.
pub fn output_utility(results: &[InferenceResult], threshold: f64, sharpness: f64) -> f64 {
    results
        .iter()
        .flat_map(|r| r.elements.iter())
        .map(|e| sigmoid(sharpness * (e.score - threshold)))
        .sum()
}

/// Record computing the output utility directly from a vector of scores.
pub fn score_utility_record(n: usize, threshold: f64, sharpness: f64) -> ComputationRecord {
    let mut rec = ComputationRecord::new();
    let x = rec.input(&[n]);
    let s = rec.scale(x, sharpness).expect("shape");
    let o = rec.offset(s, -sharpness * threshold).expect("shape");
    let g = rec.sigmoid(o).expect("shape");
    let t = rec.sum(g).expect("shape");
    rec.set_output(t).expect("scalar");
    rec
}

/// `2 * sigmoid(s * (score - theta)) - 1`: close to 1 for confident
/// elements and close to -1 otherwise.
pub fn signed_confidence(score: f64, threshold: f64, sharpness: f64) -> f64 {
    2.0 * sigmoid(sharpness * (score - threshold)) - 1.0
}

fn chebyshev(a: &Element, b: &Element) -> usize {
    a.row.abs_diff(b.row).max(a.col.abs_diff(b.col))
}

/// Number of one-to-one matches between confident elements of two frames.
///
/// Candidate pairs (same kind, Chebyshev distance within `radius`) are taken
/// greedily by (Chebyshev distance, squared distance, smaller position,
/// larger position). The key does not depend on which side a pair came
/// from, so the count is symmetric in its arguments.
fn match_count(a: &[&Element], b: &[&Element], radius: usize) -> usize {
    let mut pairs = Vec::new();
    for (i, ea) in a.iter().enumerate() {
        for (j, eb) in b.iter().enumerate() {
            if ea.kind != eb.kind {
                continue;
            }
            let d = chebyshev(ea, eb);
            if d > radius {
                continue;
            }
            let dr = ea.row.abs_diff(eb.row);
            let dc = ea.col.abs_diff(eb.col);
            let pa = (ea.row, ea.col);
            let pb = (eb.row, eb.col);
            pairs.push(((d, dr * dr + dc * dc, pa.min(pb), pa.max(pb)), i, j));
        }
    }
    pairs.sort_by_key(|p| p.0);
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut n = 0;
    for (_, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            n += 1;
        }
    }
    n
}

/// Per-frame match totals over an interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub matched: usize,
    pub predicted: usize,
    pub reference: usize,
}

impl MatchCounts {
    pub fn f1(&self) -> f64 {
        if self.predicted + self.reference == 0 {
            1.0
        } else {
            2.0 * self.matched as f64 / (self.predicted + self.reference) as f64
        }
    }
}

pub fn match_counts(
    results: &[InferenceResult],
    reference: &[InferenceResult],
    threshold: f64,
    match_radius: usize,
) -> MatchCounts {
    let mut counts = MatchCounts::default();
    for r in results {
        let pred: Vec<&Element> = r.confident(threshold).collect();
        let refs: Vec<&Element> = reference
            .iter()
            .filter(|x| x.frame_index == r.frame_index)
            .flat_map(|x| x.confident(threshold))
            .collect();
        counts.predicted += pred.len();
        counts.matched += match_count(&pred, &refs, match_radius);
    }
    for x in reference {
        counts.reference += x.count_confident(threshold);
    }
    counts
}

/// F1 score of confident elements against a reference. Both lists are keyed
/// by `frame_index`; an empty-versus-empty comparison scores 1.
pub fn accuracy(
    results: &[InferenceResult],
    reference: &[InferenceResult],
    threshold: f64,
    match_radius: usize,
) -> f64 {
    match_counts(results, reference, threshold, match_radius).f1()
}

/// Sum of `f(e) * C(e)` where `C(e)` is +1 when a confident reference element
/// of the same kind lies within `match_radius` of `e` and -1 otherwise.
pub fn accuracy_signed(
    results: &[InferenceResult],
    reference: &[InferenceResult],
    threshold: f64,
    sharpness: f64,
    match_radius: usize,
) -> f64 {
    let mut total = 0.0;
    for r in results {
        let refs: Vec<&Element> = reference
            .iter()
            .filter(|x| x.frame_index == r.frame_index)
            .flat_map(|x| x.confident(threshold))
            .collect();
        for e in &r.elements {
            let confirmed = refs
                .iter()
                .any(|x| x.kind == e.kind && chebyshev(e, x) <= match_radius);
            let c = if confirmed { 1.0 } else { -1.0 };
            total += signed_confidence(e.score, threshold, sharpness) * c;
        }
    }
    total
}

//! Caption and mask metrics, and result selection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::hungarian;
use crate::model::{Example, PairCandidate};
use crate::synthdata::vocab;
use crate::synthdata::Mask;

/// IoU threshold for a true positive in mask AP.
pub const AP_IOU: f64 = 0.5;

type Gram<'a> = &'a [u32];

fn ngrams(s: &[u32], n: usize) -> HashMap<Gram<'_>, usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram count.
fn clipped(cand: &[u32], refs: &[&[u32]], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let mut max_ref: HashMap<Gram<'_>, usize> = HashMap::new();
    for r in refs {
        for (g, k) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(k);
        }
    }
    let matched = c.iter().map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Reference length closest to `c` (shorter wins ties).
fn closest_ref_len(c: usize, refs: &[&[u32]]) -> usize {
    refs.iter().map(|r| r.len()).min_by_key(|&l| (l.abs_diff(c), l)).unwrap_or(0)
}

fn bleu_from(matched: [usize; 4], total: [usize; 4], c: usize, r: usize, plus_one: bool) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let (m, t) = if plus_one && n > 0 { (matched[n] + 1, total[n] + 1) } else { (matched[n], total[n]) };
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_p += (m as f64 / t as f64).ln() / 4.0;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_p.exp()
}

fn bleu_counts(cand: &[u32], refs: &[&[u32]]) -> ([usize; 4], [usize; 4]) {
    let (mut m, mut t) = ([0; 4], [0; 4]);
    for n in 1..=4 {
        (m[n - 1], t[n - 1]) = clipped(cand, refs, n);
    }
    (m, t)
}

/// Sentence BLEU-4 (uniform weights, brevity penalty, no smoothing).
pub fn bleu4(cand: &[u32], refs: &[&[u32]]) -> f64 {
    let (m, t) = bleu_counts(cand, refs);
    bleu_from(m, t, cand.len(), closest_ref_len(cand.len(), refs), false)
}

/// Sentence BLEU-4 with add-one smoothing on 2- to 4-gram precisions, so
/// captions shorter than four words still score.
pub fn bleu4_plus1(cand: &[u32], refs: &[&[u32]]) -> f64 {
    let (m, t) = bleu_counts(cand, refs);
    bleu_from(m, t, cand.len(), closest_ref_len(cand.len(), refs), true)
}

/// Corpus BLEU-4: clipped counts and lengths summed over the corpus.
pub fn corpus_bleu4(cands: &[&[u32]], refs: &[Vec<&[u32]>]) -> f64 {
    assert_eq!(cands.len(), refs.len(), "one reference set per candidate");
    let (mut m, mut t, mut c, mut r) = ([0; 4], [0; 4], 0, 0);
    for (cand, rs) in cands.iter().zip(refs) {
        let (mi, ti) = bleu_counts(cand, rs);
        for n in 0..4 {
            m[n] += mi[n];
            t[n] += ti[n];
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), rs);
    }
    bleu_from(m, t, c, r, false)
}

/// Corpus-level document frequencies for CIDEr.
pub struct Cider<'a> {
    df: [HashMap<Gram<'a>, usize>; 4],
    log_n: f64,
}

impl<'a> Cider<'a> {
    /// Document frequencies over the reference sets of the evaluation corpus.
    pub fn new(refs: &[Vec<&'a [u32]>]) -> Self {
        let mut df: [HashMap<Gram<'a>, usize>; 4] = Default::default();
        for rs in refs {
            for (n, d) in df.iter_mut().enumerate() {
                let mut seen: Vec<Gram<'a>> = rs.iter().flat_map(|r| ngrams(r, n + 1).into_keys()).collect();
                seen.sort_unstable();
                seen.dedup();
                for g in seen {
                    *d.entry(g).or_insert(0) += 1;
                }
            }
        }
        Self { df, log_n: (refs.len().max(1) as f64).ln() }
    }

    fn vector(&self, s: &'a [u32], n: usize) -> HashMap<Gram<'a>, f64> {
        let grams = ngrams(s, n);
        let total: usize = grams.values().sum();
        grams
            .into_iter()
            .map(|(g, k)| {
                let df = self.df[n - 1].get(g).copied().unwrap_or(0).max(1) as f64;
                (g, k as f64 / total as f64 * (self.log_n - df.ln()))
            })
            .collect()
    }

    /// `10 * mean_n mean_ref cos(tfidf_n(cand), tfidf_n(ref))`.
    pub fn score(&self, cand: &'a [u32], refs: &[&'a [u32]]) -> f64 {
        if cand.is_empty() || refs.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        for n in 1..=4 {
            let vc = self.vector(cand, n);
            let nc = vc.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut per_ref = 0.0;
            for r in refs {
                let vr = self.vector(r, n);
                let nr = vr.values().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = vc.iter().map(|(g, a)| a * vr.get(g).copied().unwrap_or(0.0)).sum();
                if nc > 0.0 && nr > 0.0 {
                    per_ref += dot / (nc * nr);
                }
            }
            sum += per_ref / refs.len() as f64;
        }
        10.0 * sum / 4.0
    }
}

/// Predicted masks of one sample with classes and confidences.
#[derive(Debug, Clone, Copy)]
pub struct MaskPreds<'a> {
    pub masks: &'a [Mask],
    pub classes: &'a [Option<usize>],
    pub scores: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct MaskGt<'a> {
    pub masks: &'a [Mask],
    pub classes: &'a [usize],
}

/// Hungarian IoU matching of one sample: `(sum of matched IoU, count)`
/// where count is `max(#pred, #gt)`, so misses and extras both score 0.
pub fn matched_iou(pred: &[Mask], gt: &[Mask]) -> (f64, usize) {
    let n = pred.len().max(gt.len());
    if pred.is_empty() || gt.is_empty() {
        return (0.0, n);
    }
    let iou: Vec<Vec<f64>> = pred.iter().map(|p| gt.iter().map(|g| p.iou(g)).collect()).collect();
    let cost: Vec<Vec<f64>> = iou.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let sum = hungarian::assign(&cost).iter().enumerate().filter_map(|(i, c)| c.map(|j| iou[i][j])).sum();
    (sum, n)
}

/// Corpus mIoU over all predicted and ground-truth masks.
pub fn miou(pred: &[MaskPreds<'_>], gt: &[MaskGt<'_>]) -> f64 {
    let (s, n) = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| matched_iou(p.masks, g.masks))
        .fold((0.0, 0), |(a, b), (s, n)| (a + s, b + n));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean over ground-truth classes of non-interpolated AP at [`AP_IOU`].
/// Detections are ranked by confidence; equal confidences keep sample then
/// mask order. Each detection claims the unclaimed same-class ground truth
/// of highest IoU in its sample. Unclassified masks are not detections.
pub fn mask_map(pred: &[MaskPreds<'_>], gt: &[MaskGt<'_>]) -> f64 {
    let mut n_gt: HashMap<usize, usize> = HashMap::new();
    for g in gt {
        for &c in g.classes {
            *n_gt.entry(c).or_insert(0) += 1;
        }
    }
    if n_gt.is_empty() {
        return 0.0;
    }
    let mut ap_sum = 0.0;
    let mut classes: Vec<usize> = n_gt.keys().copied().collect();
    classes.sort_unstable();
    for &c in &classes {
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        for (s, p) in pred.iter().enumerate() {
            for (i, cls) in p.classes.iter().enumerate() {
                if *cls == Some(c) {
                    dets.push((p.scores[i], s, i));
                }
            }
        }
        dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut claimed: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.masks.len()]).collect();
        let (mut tp, mut ap) = (0usize, 0.0);
        for (rank, &(_, s, i)) in dets.iter().enumerate() {
            let g = &gt[s];
            let best = (0..g.masks.len())
                .filter(|&j| g.classes[j] == c && !claimed[s][j])
                .map(|j| (pred[s].masks[i].iou(&g.masks[j]), j))
                .filter(|&(v, _)| v >= AP_IOU)
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
            if let Some((_, j)) = best {
                claimed[s][j] = true;
                tp += 1;
                ap += tp as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / n_gt[&c] as f64;
    }
    ap_sum / classes.len() as f64
}

/// Index of the candidate with the highest `metric`; the first wins ties.
pub fn select_top<T>(cands: &[T], metric: impl Fn(&T) -> f64) -> Result<usize> {
    if cands.is_empty() {
        return input("no candidates to select from");
    }
    let mut best = 0;
    let mut best_v = metric(&cands[0]);
    for (i, c) in cands.iter().enumerate().skip(1) {
        let v = metric(c);
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    Ok(best)
}

/// Reference side of one evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub tokens: Vec<u32>,
    pub masks: Vec<Mask>,
    pub classes: Vec<usize>,
}

impl GroundTruth {
    pub fn from_example(e: &Example) -> Self {
        Self {
            tokens: vocab::content(&e.tokens).to_vec(),
            masks: e.masks.clone(),
            classes: e.entity_categories.clone(),
        }
    }
}

/// How a sample's reported candidate is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Best of the candidates against the reference (smoothed BLEU-4).
    BestOf,
    /// The model's top-ranked candidate.
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub selected: usize,
    pub candidates: usize,
    pub caption: String,
    pub reference: String,
    pub bleu4: f64,
    pub exact: bool,
    pub iou_sum: f64,
    pub iou_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub selection: Selection,
    /// Corpus BLEU-4.
    pub bleu4: f64,
    pub cider: f64,
    pub exact: f64,
    pub miou: f64,
    pub map: f64,
    pub samples: Vec<SampleReport>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "selection  {:?}\nsamples    {}\nBLEU-4     {:.4}\nCIDEr      {:.4}\nexact      {:.4}\nmIoU       {:.4}\nmAP@0.5    {:.4}",
            self.selection,
            self.samples.len(),
            self.bleu4,
            self.cider,
            self.exact,
            self.miou,
            self.map
        )
    }
}

/// Scores one candidate list per sample. Samples without candidates count
/// as empty predictions.
pub fn evaluate(cands: &[Vec<PairCandidate>], gts: &[GroundTruth], selection: Selection) -> EvalReport {
    assert_eq!(cands.len(), gts.len(), "one candidate list per sample");
    const EMPTY: &[u32] = &[];
    let mut chosen: Vec<Option<&PairCandidate>> = Vec::with_capacity(gts.len());
    let mut selected = Vec::with_capacity(gts.len());
    for (cs, g) in cands.iter().zip(gts) {
        let idx = match selection {
            Selection::First => select_top(cs, |_| 0.0),
            Selection::BestOf => select_top(cs, |c| bleu4_plus1(&c.tokens, &[&g.tokens])),
        }
        .ok();
        selected.push(idx.unwrap_or(0));
        chosen.push(idx.map(|i| &cs[i]));
    }
    let cand_tokens: Vec<&[u32]> = chosen.iter().map(|c| c.map_or(EMPTY, |c| c.tokens.as_slice())).collect();
    let refs: Vec<Vec<&[u32]>> = gts.iter().map(|g| vec![g.tokens.as_slice()]).collect();
    let cider = Cider::new(&refs);
    let none: (&[Mask], &[Option<usize>], &[f64]) = (&[], &[], &[]);
    let preds: Vec<MaskPreds<'_>> = chosen
        .iter()
        .map(|c| match c {
            Some(c) => MaskPreds { masks: &c.masks, classes: &c.categories, scores: &c.mask_scores },
            None => MaskPreds { masks: none.0, classes: none.1, scores: none.2 },
        })
        .collect();
    let gt_masks: Vec<MaskGt<'_>> = gts.iter().map(|g| MaskGt { masks: &g.masks, classes: &g.classes }).collect();

    let mut samples = Vec::with_capacity(gts.len());
    let mut cider_sum = 0.0;
    for (i, g) in gts.iter().enumerate() {
        let (iou_sum, iou_count) = matched_iou(preds[i].masks, &g.masks);
        cider_sum += cider.score(cand_tokens[i], &refs[i]);
        samples.push(SampleReport {
            selected: selected[i],
            candidates: cands[i].len(),
            caption: vocab::detokenize(cand_tokens[i]),
            reference: vocab::detokenize(&g.tokens),
            bleu4: bleu4(cand_tokens[i], &refs[i]),
            exact: !g.tokens.is_empty() && cand_tokens[i] == g.tokens.as_slice(),
            iou_sum,
            iou_count,
        });
    }
    let n = gts.len().max(1) as f64;
    EvalReport {
        selection,
        bleu4: corpus_bleu4(&cand_tokens, &refs),
        cider: cider_sum / n,
        exact: samples.iter().filter(|s| s.exact).count() as f64 / n,
        miou: miou(&preds, &gt_masks),
        map: mask_map(&preds, &gt_masks),
        samples,
    }
}

/// Candidates for every example; sample `i` uses sampler seed `seed + i`.
pub fn run_inference<F: crate::tensor::Real>(
    model: &crate::model::Model,
    params: &crate::nn::ParamSet<F>,
    examples: &[Example],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<PairCandidate>>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| model.infer(params, &e.graph, &e.rgb, k, seed.wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(side: usize, b: [usize; 4]) -> Mask {
        let mut m = Mask::new(side, side);
        for y in b[1]..b[3] {
            for x in b[0]..b[2] {
                m.set(y, x, true);
            }
        }
        m
    }

    #[test]
    fn bleu_trivial_cases() {
        let r: &[u32] = &[2, 6, 14, 3, 17, 2, 7, 15];
        assert!((bleu4(r, &[r]) - 1.0).abs() < 1e-12);
        assert_eq!(bleu4(&[2, 8, 14, 3, 18, 2, 9, 16], &[r]), 0.0);
        assert_eq!(bleu4(&[], &[r]), 0.0);
        assert!((bleu4_plus1(&[2, 6, 14], &[&[2, 6, 14]]) - 1.0).abs() < 1e-12);
        assert!(bleu4_plus1(&[2, 6, 15], &[&[2, 6, 14]]) < 1.0);
    }

    #[test]
    fn bleu_matches_hand_computation() {
        // cand: a b c d e ; ref: a b c x e f
        let c: &[u32] = &[1, 2, 3, 4, 5];
        let r: &[u32] = &[1, 2, 3, 9, 5, 6];
        let p = [4.0 / 5.0, 2.0 / 4.0, 1.0 / 3.0, 0.0];
        assert_eq!(bleu4(c, &[r]), 0.0);
        let p1 = [p[0], 3.0 / 5.0, 2.0 / 4.0, 1.0 / 3.0];
        let bp = (1.0f64 - 6.0 / 5.0).exp();
        let want = bp * (p1.iter().map(|v: &f64| v.ln()).sum::<f64>() / 4.0).exp();
        assert!((bleu4_plus1(c, &[r]) - want).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let a: &[u32] = &[1, 2, 3, 4, 5];
        let b: &[u32] = &[1, 2, 3, 4, 6];
        let refs = vec![vec![a], vec![a]];
        let got = corpus_bleu4(&[a, b], &refs);
        // pooled precisions: 9/10, 7/8, 5/6, 3/4; no brevity penalty
        let want = ((0.9f64).ln() + (7.0f64 / 8.0).ln() + (5.0f64 / 6.0).ln() + (0.75f64).ln()) / 4.0;
        assert!((got - want.exp()).abs() < 1e-12);
    }

    /// Direct tf-idf cosine on a 3-sentence corpus.
    #[test]
    fn cider_matches_hand_computation() {
        let r: [&[u32]; 3] = [&[1, 2, 3], &[1, 2, 4], &[5, 2, 3]];
        let refs: Vec<Vec<&[u32]>> = r.iter().map(|s| vec![*s]).collect();
        let cider = Cider::new(&refs);
        let cand: &[u32] = &[1, 2, 3];
        let ln3 = 3f64.ln();
        let idf = |df: f64| ln3 - df.ln();
        // n = 1: grams 1,2,3 with tf 1/3; df(1)=2, df(2)=3, df(3)=2
        let cv = [idf(2.0), idf(3.0), idf(2.0)];
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na > 0.0 && nb > 0.0 {
                dot / (na * nb)
            } else {
                0.0
            }
        };
        // against reference 0 (identical): every order has cosine 1 when
        // non-degenerate. n=1 vector [idf2, 0, idf2] is non-zero.
        // n=2: grams (1,2) df 2, (2,3) df 2; n=3: (1,2,3) df 1; n=4: none.
        let c0 = (1.0 + 1.0 + 1.0 + 0.0) / 4.0 * 10.0;
        assert!((cider.score(cand, &refs[0]) - c0).abs() < 1e-6);
        // against reference 1 (1 2 4): n=1 grams 1,2,4 (df 2,3,1)
        let n1 = cos(&[cv[0], cv[1], cv[2], 0.0], &[idf(2.0), idf(3.0), 0.0, idf(1.0)]);
        // n=2: cand {(1,2),(2,3)} both idf(2); ref {(1,2) idf 2, (2,4) idf 1}
        let n2 = cos(&[idf(2.0), idf(2.0), 0.0], &[idf(2.0), 0.0, idf(1.0)]);
        let c1 = 10.0 * (n1 + n2) / 4.0;
        assert!((cider.score(cand, &refs[1]) - c1).abs() < 1e-6);
        assert_eq!(cider.score(&[], &refs[1]), 0.0);
    }

    #[test]
    fn mask_metrics_trivial_cases() {
        let gt = [rect(8, [0, 0, 4, 4]), rect(8, [4, 4, 8, 8])];
        let classes = [3, 5];
        let g = [MaskGt { masks: &gt, classes: &classes }];
        let pc = [Some(3), Some(5)];
        let p = [MaskPreds { masks: &gt, classes: &pc, scores: &[0.9, 0.8] }];
        assert_eq!(miou(&p, &g), 1.0);
        assert_eq!(mask_map(&p, &g), 1.0);
        let e = [MaskPreds { masks: &[], classes: &[], scores: &[] }];
        assert_eq!(miou(&e, &g), 0.0);
        assert_eq!(mask_map(&e, &g), 0.0);
        // an extra prediction counts as a zero-IoU mask
        let extra = [gt[0].clone(), gt[1].clone(), rect(8, [0, 6, 2, 8])];
        let p3 = [MaskPreds { masks: &extra, classes: &[Some(3), Some(5), None], scores: &[0.9, 0.8, 0.1] }];
        assert!((miou(&p3, &g) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_map(&p3, &g), 1.0);
    }

    /// AP as the area under the stepwise PR curve, enumerated threshold by
    /// threshold.
    fn ap_oracle(hits: &[bool], n_gt: usize) -> f64 {
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for k in 1..=hits.len() {
            let tp = hits[..k].iter().filter(|&&h| h).count() as f64;
            let recall = tp / n_gt as f64;
            let precision = tp / k as f64;
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        area
    }

    #[test]
    fn ap_matches_pr_sweep_oracle() {
        // 5 predictions of one class over two samples with 4 ground truths
        let s = 8;
        let g0 = [rect(s, [0, 0, 4, 4]), rect(s, [4, 0, 8, 4])];
        let g1 = [rect(s, [0, 4, 4, 8]), rect(s, [4, 4, 8, 8])];
        let p0 = [rect(s, [0, 0, 4, 4]), rect(s, [0, 0, 4, 3]), rect(s, [6, 6, 8, 8])];
        let p1 = [rect(s, [4, 4, 8, 8]), rect(s, [0, 4, 2, 8])];
        let c = [1, 1];
        let gts = [MaskGt { masks: &g0, classes: &c }, MaskGt { masks: &g1, classes: &c }];
        let preds = [
            MaskPreds { masks: &p0, classes: &[Some(1); 3], scores: &[0.9, 0.6, 0.8] },
            MaskPreds { masks: &p1, classes: &[Some(1); 2], scores: &[0.7, 0.5] },
        ];
        // ranked: p0[0] hit, p0[2] miss, p1[0] hit, p0[1] duplicate -> miss, p1[1] iou 0.5 hit
        let want = ap_oracle(&[true, false, true, false, true], 4);
        assert!((mask_map(&preds, &gts) - want).abs() < 1e-9);
        assert!((want - (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn select_top_cases() {
        assert_eq!(select_top(&[0.3], |&v| v).unwrap(), 0);
        assert_eq!(select_top(&[0.2, 0.9, 0.4], |&v| v).unwrap(), 1);
        assert_eq!(select_top(&[0.2, 0.9, 0.9], |&v| v).unwrap(), 1);
        assert!(select_top::<f64>(&[], |&v| v).is_err());
    }

    proptest! {
        #[test]
        fn miou_and_map_ignore_prediction_order(
            boxes in prop::collection::vec((0usize..6, 0usize..6, 1usize..4, 1usize..4, 0usize..3), 1..6),
            scores in prop::collection::vec(0.0f64..1.0, 6),
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let s = 10;
            let mk = |&(x, y, w, h, _): &(usize, usize, usize, usize, usize)| rect(s, [x, y, x + w, y + h]);
            let gt: Vec<Mask> = boxes.iter().map(mk).collect();
            let gc: Vec<usize> = boxes.iter().map(|b| b.4).collect();
            let pred: Vec<Mask> = boxes.iter().map(|&(x, y, w, h, c)| mk(&(x + 1, y, w, h, c))).collect();
            let pc: Vec<Option<usize>> = gc.iter().map(|&c| Some(c)).collect();
            let sc: Vec<f64> = scores[..boxes.len()].to_vec();
            let mut order: Vec<usize> = (0..boxes.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let pred2: Vec<Mask> = order.iter().map(|&i| pred[i].clone()).collect();
            let pc2: Vec<Option<usize>> = order.iter().map(|&i| pc[i]).collect();
            let sc2: Vec<f64> = order.iter().map(|&i| sc[i]).collect();
            let g = [MaskGt { masks: &gt, classes: &gc }];
            let a = [MaskPreds { masks: &pred, classes: &pc, scores: &sc }];
            let b = [MaskPreds { masks: &pred2, classes: &pc2, scores: &sc2 }];
            prop_assert!((miou(&a, &g) - miou(&b, &g)).abs() < 1e-12);
            // distinct scores make AP order-free
            let distinct = { let mut v = sc.clone(); v.sort_by(f64::total_cmp); v.windows(2).all(|w| w[0] < w[1]) };
            if distinct {
                prop_assert!((mask_map(&a, &g) - mask_map(&b, &g)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluate_perfect_and_empty() {
        let m = [rect(8, [0, 0, 4, 4])];
        let gt = GroundTruth { tokens: vec![2, 6, 14], masks: m.to_vec(), classes: vec![0] };
        let good = PairCandidate {
            tokens: vec![2, 6, 14],
            caption: String::new(),
            masks: m.to_vec(),
            links: vec![Some(2)],
            categories: vec![Some(0)],
            mask_scores: vec![0.9],
            score: -0.1,
            members: vec![0],
        };
        let bad = PairCandidate { tokens: vec![2, 7, 14], masks: vec![], links: vec![], categories: vec![], mask_scores: vec![], ..good.clone() };
        let r = evaluate(&[vec![bad.clone(), good.clone()]], &[gt.clone()], Selection::BestOf);
        assert_eq!(r.samples[0].selected, 1);
        assert_eq!((r.exact, r.miou, r.map), (1.0, 1.0, 1.0));
        let r = evaluate(&[vec![bad, good]], &[gt.clone()], Selection::First);
        assert_eq!((r.exact, r.miou, r.map), (0.0, 0.0, 0.0));
        let r = evaluate(&[vec![]], &[gt], Selection::BestOf);
        assert_eq!((r.bleu4, r.cider, r.exact, r.miou, r.map), (0.0, 0.0, 0.0, 0.0, 0.0));
    }
}

//! Connectionist Temporal Classification: loss, gradient and best-path decoding.
//!
//! All routines take a row-major `T×C` matrix of per-frame log-probabilities.
//! Class 0 is the blank. Targets are sequences of class indices in `1..C`.

use thiserror::Error;

/// Blank class index.
pub const BLANK: usize = 0;

/// Log probabilities are floored here so that `-inf` never enters the
/// recursions.
pub const LOG_FLOOR: f64 = -1e30;

const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("log-probability matrix has {len} entries, expected {t}×{c}")]
    Shape { len: usize, t: usize, c: usize },
    #[error("row {row} is not a log-distribution (logsumexp = {lse})")]
    NotNormalized { row: usize, lse: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("valid length {valid_len} exceeds {t} frames")]
    ValidLength { valid_len: usize, t: usize },
    #[error("target of length {target_len} cannot be aligned to {valid_len} frames")]
    Infeasible { target_len: usize, valid_len: usize },
}

/// Label indices of a transcription; never contains the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn new(labels: Vec<usize>, classes: usize) -> Result<Self, CtcError> {
        for &label in &labels {
            if label == BLANK || label >= classes {
                return Err(CtcError::LabelOutOfRange { label, classes });
            }
        }
        Ok(Self(labels))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Borrowed `T×C` log-probability matrix.
#[derive(Clone, Copy, Debug)]
pub struct LogProbs<'a> {
    data: &'a [f64],
    t: usize,
    c: usize,
}

impl<'a> LogProbs<'a> {
    pub fn new(data: &'a [f64], t: usize, c: usize) -> Result<Self, CtcError> {
        if data.len() != t * c || c == 0 {
            return Err(CtcError::Shape { len: data.len(), t, c });
        }
        Ok(Self { data, t, c })
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    #[inline]
    fn at(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.c + k].max(LOG_FLOOR)
    }

    fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.c..(t + 1) * self.c]
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m <= LOG_FLOOR {
        return m;
    }
    m + values.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi <= LOG_FLOOR {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of frames needed to emit `target`: one per label plus one
/// separating blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(target: &[usize], valid_len: usize) -> bool {
    min_frames(target) <= valid_len
}

fn validate(lp: &LogProbs<'_>, valid_len: usize, target: &[usize]) -> Result<(), CtcError> {
    if valid_len > lp.t {
        return Err(CtcError::ValidLength { valid_len, t: lp.t });
    }
    for &label in target {
        if label == BLANK || label >= lp.c {
            return Err(CtcError::LabelOutOfRange { label, classes: lp.c });
        }
    }
    for row in 0..valid_len {
        let lse = log_sum_exp(lp.row(row));
        if !(lse.abs() <= NORM_TOLERANCE) {
            return Err(CtcError::NotNormalized { row, lse });
        }
    }
    Ok(())
}

/// Blank-interleaved target: `[∅, l1, ∅, l2, …, ∅]`.
fn extend(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Whether state `s` may be entered directly from `s - 2`.
#[inline]
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

fn forward(lp: &LogProbs<'_>, valid_len: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![LOG_FLOOR; valid_len * s_len];
    alpha[0] = lp.at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp.at(0, ext[1]);
    }
    for t in 1..valid_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        // States that cannot be reached yet (too far right) stay at the floor.
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(ext, s) {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc <= LOG_FLOOR { LOG_FLOOR } else { acc + lp.at(t, ext[s]) };
        }
    }
    alpha
}

fn backward(lp: &LogProbs<'_>, valid_len: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let mut beta = vec![LOG_FLOOR; valid_len * s_len];
    let last = valid_len - 1;
    beta[last * s_len + s_len - 1] = lp.at(last, ext[s_len - 1]);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp.at(last, ext[s_len - 2]);
    }
    for t in (0..last).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = lse2(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2) {
                acc = lse2(acc, next[s + 2]);
            }
            cur[s] = if acc <= LOG_FLOOR { LOG_FLOOR } else { acc + lp.at(t, ext[s]) };
        }
    }
    beta
}

fn log_likelihood(alpha: &[f64], valid_len: usize, s_len: usize) -> f64 {
    let last = &alpha[(valid_len - 1) * s_len..valid_len * s_len];
    if s_len > 1 {
        lse2(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

/// Negative log-likelihood `−ln P(target | frames 0..valid_len)`.
///
/// Returns `f64::INFINITY` when the target needs more frames than
/// `valid_len` provides.
pub fn ctc_loss(lp: &LogProbs<'_>, valid_len: usize, target: &[usize]) -> Result<f64, CtcError> {
    validate(lp, valid_len, target)?;
    if !is_feasible(target, valid_len) {
        return Ok(f64::INFINITY);
    }
    if valid_len == 0 {
        return Ok(0.0);
    }
    let ext = extend(target);
    let alpha = forward(lp, valid_len, &ext);
    Ok((-log_likelihood(&alpha, valid_len, ext.len())).max(0.0))
}

/// Gradient of [`ctc_loss`] with respect to every log-probability entry.
///
/// Entry `(t, k)` equals minus the posterior probability that an alignment
/// emits class `k` at frame `t`; rows at or beyond `valid_len` are zero.
pub fn ctc_grad(lp: &LogProbs<'_>, valid_len: usize, target: &[usize]) -> Result<Vec<f64>, CtcError> {
    validate(lp, valid_len, target)?;
    if !is_feasible(target, valid_len) {
        return Err(CtcError::Infeasible { target_len: target.len(), valid_len });
    }
    let mut grad = vec![0.0; lp.t * lp.c];
    if valid_len == 0 {
        return Ok(grad);
    }
    let ext = extend(target);
    let s_len = ext.len();
    let alpha = forward(lp, valid_len, &ext);
    let beta = backward(lp, valid_len, &ext);
    let log_p = log_likelihood(&alpha, valid_len, s_len);
    for t in 0..valid_len {
        for (s, &k) in ext.iter().enumerate() {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a <= LOG_FLOOR || b <= LOG_FLOOR {
                continue;
            }
            grad[t * lp.c + k] -= (a + b - lp.at(t, k) - log_p).exp();
        }
    }
    Ok(grad)
}

/// Converts a gradient with respect to log-probabilities into the gradient with
/// respect to the logits that produced them through a row-wise log-softmax.
pub fn grad_through_log_softmax(lp: &LogProbs<'_>, grad: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grad.len()];
    for t in 0..lp.t {
        let g = &grad[t * lp.c..(t + 1) * lp.c];
        let gsum: f64 = g.iter().sum();
        for k in 0..lp.c {
            out[t * lp.c + k] = g[k] - lp.at(t, k).exp() * gsum;
        }
    }
    out
}

/// Best-path decoding: per-frame argmax (ties go to the lower class index),
/// merge repeats, drop blanks.
pub fn greedy_decode(lp: &LogProbs<'_>, valid_len: usize) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..valid_len.min(lp.t) {
        let row = lp.row(t);
        let mut best = 0;
        for k in 1..lp.c {
            if row[k] > row[best] {
                best = k;
            }
        }
        if prev != Some(best) && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    LabelSequence(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Collapse a frame path: merge repeats then drop blanks.
    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &k in path {
            if prev != Some(k) && k != BLANK {
                out.push(k);
            }
            prev = Some(k);
        }
        out
    }

    /// Sum of probabilities over every path of length `t` that collapses to `target`.
    fn brute_force_prob(probs: &[f64], t: usize, c: usize, target: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        loop {
            if collapse(&path) == target {
                total += path.iter().enumerate().map(|(i, &k)| probs[i * c + k]).product::<f64>();
            }
            let mut i = 0;
            loop {
                if i == t {
                    return total;
                }
                path[i] += 1;
                if path[i] < c {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn random_logprobs(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(t * c);
        for _ in 0..t {
            let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lse = log_sum_exp(&logits);
            out.extend(logits.iter().map(|v| v - lse));
        }
        out
    }

    #[test]
    fn single_frame_single_label() {
        let p: f64 = 0.3;
        let lp = [(0.7f64).ln(), p.ln()];
        let m = LogProbs::new(&lp, 1, 2).unwrap();
        assert!((ctc_loss(&m, 1, &[1]).unwrap() + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_uniform_frames_three_paths() {
        // (a,a), (a,-), (-,a): P = 0.75
        let h = 0.5f64.ln();
        let lp = [h, h, h, h];
        let m = LogProbs::new(&lp, 2, 2).unwrap();
        let loss = ctc_loss(&m, 2, &[1]).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((loss - 0.287_682_072_451_781).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lp = random_logprobs(&mut rng, 5, 3);
        let m = LogProbs::new(&lp, 5, 3).unwrap();
        let expected: f64 = -(0..5).map(|t| lp[t * 3]).sum::<f64>();
        assert!((ctc_loss(&m, 5, &[]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let t = rng.gen_range(1..=6);
            let c = rng.gen_range(2..=4);
            let len = rng.gen_range(0..=3.min(t));
            let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..c)).collect();
            let lp = random_logprobs(&mut rng, t, c);
            let m = LogProbs::new(&lp, t, c).unwrap();
            let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            let p = brute_force_prob(&probs, t, c, &target);
            let loss = ctc_loss(&m, t, &target).unwrap();
            if p == 0.0 {
                assert!(loss.is_infinite());
            } else {
                assert!((loss + p.ln()).abs() < 1e-9, "t={t} c={c} target={target:?}");
            }
        }
    }

    #[test]
    fn infeasible_target_reported_distinctly() {
        let h = 0.5f64.ln();
        let lp = [h, h, h, h];
        let m = LogProbs::new(&lp, 2, 2).unwrap();
        // "aa" needs a separating blank: 3 frames.
        assert_eq!(ctc_loss(&m, 2, &[1, 1]).unwrap(), f64::INFINITY);
        assert_eq!(ctc_grad(&m, 2, &[1, 1]), Err(CtcError::Infeasible { target_len: 2, valid_len: 2 }));
        assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
    }

    #[test]
    fn rejects_bad_rows_and_labels() {
        let lp = [0.0, 0.0];
        let m = LogProbs::new(&lp, 1, 2).unwrap();
        assert!(matches!(ctc_loss(&m, 1, &[1]), Err(CtcError::NotNormalized { row: 0, .. })));
        let h = 0.5f64.ln();
        let lp = [h, h];
        let m = LogProbs::new(&lp, 1, 2).unwrap();
        assert!(matches!(ctc_loss(&m, 1, &[2]), Err(CtcError::LabelOutOfRange { label: 2, .. })));
        assert!(matches!(ctc_loss(&m, 1, &[0]), Err(CtcError::LabelOutOfRange { label: 0, .. })));
        assert!(LogProbs::new(&lp, 2, 2).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let (t, c) = (6, 4);
            let lp = random_logprobs(&mut rng, t, c);
            let target: Vec<usize> = (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(1..c)).collect();
            let m = LogProbs::new(&lp, t, c).unwrap();
            let grad = ctc_grad(&m, t, &target).unwrap();
            let eps = 1e-6;
            for i in 0..t * c {
                let mut plus = lp.clone();
                plus[i] += eps;
                let mut minus = lp.clone();
                minus[i] -= eps;
                let fp = ctc_loss(&LogProbs::new(&plus, t, c).unwrap(), t, &target).unwrap();
                let fm = ctc_loss(&LogProbs::new(&minus, t, c).unwrap(), t, &target).unwrap();
                let numeric = (fp - fm) / (2.0 * eps);
                let err = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-3);
                assert!(err <= 1e-6, "entry {i}: {numeric} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn logit_gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let lp = random_logprobs(&mut rng, 7, 4);
        let m = LogProbs::new(&lp, 7, 4).unwrap();
        let g = grad_through_log_softmax(&m, &ctc_grad(&m, 5, &[1, 3, 3]).unwrap());
        for t in 0..7 {
            assert!(g[t * 4..(t + 1) * 4].iter().sum::<f64>().abs() < 1e-12);
        }
        // frames past the valid length carry no gradient
        assert!(g[5 * 4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_on_the_only_path_has_zero_logit_gradient() {
        // path a, -, b over 3 frames with C = 3
        let path = [1, 0, 2];
        let mut lp = vec![LOG_FLOOR; 9];
        for (t, &k) in path.iter().enumerate() {
            lp[t * 3 + k] = 0.0;
        }
        let m = LogProbs::new(&lp, 3, 3).unwrap();
        assert_eq!(ctc_loss(&m, 3, &[1, 2]).unwrap(), 0.0);
        let g = grad_through_log_softmax(&m, &ctc_grad(&m, 3, &[1, 2]).unwrap());
        assert!(g.iter().all(|&v| v == 0.0), "{g:?}");
    }

    #[test]
    fn greedy_collapse_rules() {
        let decode = |path: &[usize], c: usize| {
            let mut lp = vec![(0.1f64 / (c - 1) as f64).ln(); path.len() * c];
            for (t, &k) in path.iter().enumerate() {
                lp[t * c + k] = 0.9f64.ln();
            }
            greedy_decode(&LogProbs::new(&lp, path.len(), c).unwrap(), path.len()).0
        };
        assert_eq!(decode(&[1, 1, 0, 2, 2], 3), vec![1, 2]);
        assert_eq!(decode(&[0, 0, 0], 3), Vec::<usize>::new());
        assert_eq!(decode(&[1, 0, 1], 3), vec![1, 1]);
    }

    #[test]
    fn greedy_ties_choose_lowest_index_and_respect_valid_len() {
        let h = 0.5f64.ln();
        let lp = [h, h, f64::ln(0.1), f64::ln(0.9)];
        let m = LogProbs::new(&lp, 2, 2).unwrap();
        assert_eq!(greedy_decode(&m, 1).0, Vec::<usize>::new());
        assert_eq!(greedy_decode(&m, 2).0, vec![1]);
    }

    #[test]
    fn appended_certain_blanks_leave_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut lp = random_logprobs(&mut rng, 4, 3);
        let m = LogProbs::new(&lp, 4, 3).unwrap();
        let before = ctc_loss(&m, 4, &[2, 1]).unwrap();
        lp.extend([0.0, LOG_FLOOR, LOG_FLOOR]);
        let m = LogProbs::new(&lp, 5, 3).unwrap();
        let after = ctc_loss(&m, 5, &[2, 1]).unwrap();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn dominant_sequence_is_decoded() {
        // frames strongly favouring "a - b b": posterior of [1,2] > 0.5
        let c = 3;
        let path = [1, 0, 2, 2];
        let mut lp = Vec::new();
        for &k in &path {
            let mut row = vec![0.02f64; c];
            row[k] = 1.0 - 0.02 * (c - 1) as f64;
            lp.extend(row.iter().map(|v| v.ln()));
        }
        let m = LogProbs::new(&lp, 4, c).unwrap();
        let loss = ctc_loss(&m, 4, &[1, 2]).unwrap();
        assert!((-loss).exp() > 0.5);
        assert_eq!(greedy_decode(&m, 4).0, vec![1, 2]);
    }
}

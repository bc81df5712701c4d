use rand::Rng;

use super::OcrError;

/// Attempts per span before falling back to the largest free gap.
pub const MAX_ATTEMPTS: usize = 1000;

/// Contiguous-span mask over a token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanMask {
    pub masked: Vec<bool>,
    /// `(start, length)` pairs in insertion order.
    pub spans: Vec<(usize, usize)>,
}

impl SpanMask {
    pub fn none(t: usize) -> Self {
        Self { masked: vec![false; t], spans: Vec::new() }
    }

    pub fn from_spans(t: usize, spans: &[(usize, usize)]) -> Self {
        let mut m = Self::none(t);
        for &(s, l) in spans {
            m.masked[s..s + l].iter_mut().for_each(|b| *b = true);
            m.spans.push((s, l));
        }
        m
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&b| b).count()
    }

    /// Length of the longest run of masked positions.
    pub fn longest_run(&self) -> usize {
        let (mut best, mut cur) = (0, 0);
        for &b in &self.masked {
            cur = if b { cur + 1 } else { 0 };
            best = best.max(cur);
        }
        best
    }
}

/// Whether `[s, s+len)` is free and not adjacent to an existing span.
fn fits(masked: &[bool], s: usize, len: usize) -> bool {
    let lo = s.saturating_sub(1);
    let hi = (s + len + 1).min(masked.len());
    !masked[lo..hi].iter().any(|&b| b)
}

/// Draws spans of length `Uniform{1..max_span}` at uniformly random positions
/// until exactly `round(mask_ratio · t)` tokens are masked. Spans never touch,
/// so every maximal masked run is a single span. A span whose draw extends
/// past either end is clipped; the last span is truncated to hit the target.
pub fn sample_span_mask(t: usize, mask_ratio: f64, max_span: usize, rng: &mut impl Rng) -> Result<SpanMask, OcrError> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(OcrError::Mask(format!("mask ratio {mask_ratio} outside [0, 1)")));
    }
    if max_span == 0 {
        return Err(OcrError::Mask("max span must be at least 1".into()));
    }
    let target = (mask_ratio * t as f64).round() as usize;
    let mut mask = SpanMask::none(t);
    let mut total = 0;
    while total < target {
        let want = rng.gen_range(1..=max_span);
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            // start may lie left of 0 so that edge positions are as likely as interior ones
            let raw = rng.gen_range(-(want as isize - 1)..t as isize);
            let s = raw.max(0) as usize;
            let e = ((raw + want as isize) as usize).min(t);
            let len = (e - s).min(target - total);
            if fits(&mask.masked, s, len) {
                placed = Some((s, len));
                break;
            }
        }
        let (s, len) = match placed {
            Some(p) => p,
            None => largest_gap(&mask.masked, want.min(target - total))
                .ok_or_else(|| OcrError::Mask(format!("cannot place {} more masked tokens in {t}", target - total)))?,
        };
        mask.masked[s..s + len].iter_mut().for_each(|b| *b = true);
        mask.spans.push((s, len));
        total += len;
    }
    Ok(mask)
}

/// Placement inside the largest run of positions that keeps one free cell
/// between spans.
fn largest_gap(masked: &[bool], want: usize) -> Option<(usize, usize)> {
    let t = masked.len();
    let usable: Vec<bool> = (0..t).map(|i| fits(masked, i, 1)).collect();
    let (mut best, mut i) = ((0, 0), 0);
    while i < t {
        if usable[i] {
            let s = i;
            while i < t && usable[i] {
                i += 1;
            }
            if i - s > best.1 {
                best = (s, i - s);
            }
        } else {
            i += 1;
        }
    }
    (best.1 > 0).then(|| (best.0, best.1.min(want)))
}

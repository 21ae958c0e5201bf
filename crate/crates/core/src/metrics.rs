//! Frame-level diarization error rate and speech activity detection
//! errors.
//!
//! Reference and hypothesis are `S × T` 0/1 activity matrices on the same
//! frame grid. Hypothesis speakers are mapped one-to-one onto reference
//! speakers so that the total co-active frame count is maximal; since the
//! missed and false-alarm totals do not depend on the mapping, this is also
//! the mapping with the lowest DER.

use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_COLLAR_SECONDS: f64 = 0.25;

/// `ref × hyp` co-active frame counts, restricted to scored frames.
pub fn overlap_matrix(reference: &Tensor, hyp: &Tensor, scored: Option<&[bool]>) -> Vec<Vec<f64>> {
    let t = reference.cols();
    (0..reference.rows())
        .map(|i| {
            (0..hyp.rows())
                .map(|j| {
                    (0..t)
                        .filter(|&f| scored.map_or(true, |m| m[f]) && reference.at(i, f) != 0.0 && hyp.at(j, f) != 0.0)
                        .count() as f64
                })
                .collect()
        })
        .collect()
}

/// `mapping[i]` is the hypothesis row assigned to reference row `i`.
pub fn optimal_mapping(reference: &Tensor, hyp: &Tensor) -> Vec<Option<usize>> {
    mapping_masked(reference, hyp, None)
}

fn mapping_masked(reference: &Tensor, hyp: &Tensor, scored: Option<&[bool]>) -> Vec<Option<usize>> {
    let cost: Vec<Vec<f64>> = overlap_matrix(reference, hyp, scored)
        .into_iter()
        .map(|r| r.into_iter().map(|v| -v).collect())
        .collect();
    hungarian(&cost)
}

/// Raw error counts; add them across recordings before converting to
/// rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ErrorCounts {
    /// Reference speaker-frames.
    pub speech: u64,
    pub missed: u64,
    pub false_alarm: u64,
    pub confusion: u64,
    /// Frames where any reference speaker is active.
    pub sad_speech: u64,
    pub sad_missed: u64,
    pub sad_false_alarm: u64,
}

impl AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.speech += o.speech;
        self.missed += o.missed;
        self.false_alarm += o.false_alarm;
        self.confusion += o.confusion;
        self.sad_speech += o.sad_speech;
        self.sad_missed += o.sad_missed;
        self.sad_false_alarm += o.sad_false_alarm;
    }
}

/// Rates in percent. With no reference speech the denominator is taken
/// as 1 so that any hypothesised activity still shows up as error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiarizationScore {
    pub der: f64,
    pub ms: f64,
    pub fa: f64,
    pub cf: f64,
    pub sad_ms: f64,
    pub sad_fa: f64,
    pub scored_speech: u64,
}

impl ErrorCounts {
    pub fn score(&self) -> DiarizationScore {
        let pct = |n: u64, d: u64| 100.0 * n as f64 / d.max(1) as f64;
        DiarizationScore {
            der: pct(self.missed + self.false_alarm + self.confusion, self.speech),
            ms: pct(self.missed, self.speech),
            fa: pct(self.false_alarm, self.speech),
            cf: pct(self.confusion, self.speech),
            sad_ms: pct(self.sad_missed, self.sad_speech),
            sad_fa: pct(self.sad_false_alarm, self.sad_speech),
            scored_speech: self.speech,
        }
    }
}

fn check_frames(reference: &Tensor, hyp: &Tensor) -> Result<()> {
    if reference.cols() != hyp.cols() && reference.rows() > 0 && hyp.rows() > 0 {
        return Err(Error::dim("der", reference.shape(), hyp.shape()));
    }
    Ok(())
}

fn frames(reference: &Tensor, hyp: &Tensor) -> usize {
    if reference.rows() > 0 {
        reference.cols()
    } else {
        hyp.cols()
    }
}

fn active(m: &Tensor, f: usize) -> usize {
    (0..m.rows()).filter(|&k| m.at(k, f) != 0.0).count()
}

/// Counts errors for a fixed reference→hypothesis mapping.
pub fn counts_with_mapping(
    reference: &Tensor,
    hyp: &Tensor,
    mapping: &[Option<usize>],
    scored: Option<&[bool]>,
) -> ErrorCounts {
    let mut c = ErrorCounts::default();
    for f in 0..frames(reference, hyp) {
        if !scored.map_or(true, |m| m[f]) {
            continue;
        }
        let nr = active(reference, f) as u64;
        let nh = active(hyp, f) as u64;
        let correct = mapping
            .iter()
            .enumerate()
            .filter(|(i, j)| j.map_or(false, |j| reference.at(*i, f) != 0.0 && hyp.at(j, f) != 0.0))
            .count() as u64;
        c.speech += nr;
        c.missed += nr.saturating_sub(nh);
        c.false_alarm += nh.saturating_sub(nr);
        c.confusion += nr.min(nh) - correct;
        c.sad_speech += (nr > 0) as u64;
        c.sad_missed += (nr > 0 && nh == 0) as u64;
        c.sad_false_alarm += (nr == 0 && nh > 0) as u64;
    }
    c
}

pub fn der_counts(reference: &Tensor, hyp: &Tensor) -> Result<ErrorCounts> {
    der_counts_masked(reference, hyp, None)
}

pub fn der_counts_masked(reference: &Tensor, hyp: &Tensor, scored: Option<&[bool]>) -> Result<ErrorCounts> {
    check_frames(reference, hyp)?;
    if let Some(m) = scored {
        if m.len() != frames(reference, hyp) {
            return Err(Error::InvalidArgument("scoring mask length differs from frame count".into()));
        }
    }
    let mapping = mapping_masked(reference, hyp, scored);
    Ok(counts_with_mapping(reference, hyp, &mapping, scored))
}

pub fn der(reference: &Tensor, hyp: &Tensor) -> Result<DiarizationScore> {
    Ok(der_counts(reference, hyp)?.score())
}

/// `(sad_ms, sad_fa)` in percent of reference speech frames.
pub fn sad(reference: &Tensor, hyp: &Tensor) -> Result<(f64, f64)> {
    let s = der(reference, hyp)?;
    Ok((s.sad_ms, s.sad_fa))
}

/// Frames left for scoring after removing `collar` seconds on both sides
/// of every reference segment boundary.
pub fn collar_mask(reference: &Tensor, frame_seconds: f64, collar: f64) -> Vec<bool> {
    let (s, t) = reference.dims2();
    let mut scored = vec![true; t];
    if collar <= 0.0 {
        return scored;
    }
    let mut boundaries = Vec::new();
    for k in 0..s {
        for f in 0..=t {
            let prev = f > 0 && reference.at(k, f - 1) != 0.0;
            let cur = f < t && reference.at(k, f) != 0.0;
            if prev != cur {
                boundaries.push(f as f64 * frame_seconds);
            }
        }
    }
    for (f, keep) in scored.iter_mut().enumerate() {
        let (a, b) = (f as f64 * frame_seconds, (f + 1) as f64 * frame_seconds);
        // strict inequalities keep frames that merely touch the collar edge
        if boundaries.iter().any(|&x| a < x + collar - 1e-9 && b > x - collar + 1e-9) {
            *keep = false;
        }
    }
    scored
}

/// Pads the matrix with silent frames up to `frames` columns.
pub fn pad_frames(m: &Tensor, frames: usize) -> Tensor {
    let (s, t) = m.dims2();
    if t >= frames {
        return m.clone();
    }
    let mut out = Tensor::zeros(&[s, frames]);
    for k in 0..s {
        for f in 0..t {
            out.set(k, f, m.at(k, f));
        }
    }
    out
}

/// Aligned text table with one row per labelled score.
pub fn report_table(rows: &[(String, DiarizationScore)]) -> String {
    report_table_titled("System", rows)
}

/// [`report_table`] with a custom heading for the label column.
pub fn report_table_titled(title: &str, rows: &[(String, DiarizationScore)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(title.len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
        title, "DER", "MS", "FA", "CF", "SAD MS", "SAD FA"
    );
    for (label, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}",
            label, s.der, s.ms, s.fa, s.cf, s.sad_ms, s.sad_fa
        );
    }
    out
}

#[derive(Serialize)]
struct JsonRow<'a> {
    label: &'a str,
    #[serde(flatten)]
    score: &'a DiarizationScore,
}

/// Line-delimited JSON, one record per row.
pub fn report_jsonl(rows: &[(String, DiarizationScore)]) -> String {
    rows.iter()
        .map(|(label, score)| serde_json::to_string(&JsonRow { label, score }).expect("score serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::assignment::exhaustive;

    fn m(rows: &[&[u8]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>()).unwrap()
    }

    fn runs(t: usize, spans: &[(usize, usize)]) -> Tensor {
        let mut a = Tensor::zeros(&[spans.len(), t]);
        for (k, &(lo, hi)) in spans.iter().enumerate() {
            for f in lo..=hi {
                a.set(k, f, 1.0);
            }
        }
        a
    }

    /// Every partial injection, scored frame by frame.
    pub(crate) fn brute_force(reference: &Tensor, hyp: &Tensor) -> ErrorCounts {
        let (sr, sh) = (reference.rows(), hyp.rows());
        let mut best: Option<ErrorCounts> = None;
        let mut mapping = vec![None; sr];
        fn rec(
            i: usize,
            used: &mut Vec<bool>,
            mapping: &mut Vec<Option<usize>>,
            r: &Tensor,
            h: &Tensor,
            best: &mut Option<ErrorCounts>,
        ) {
            if i == mapping.len() {
                let c = counts_with_mapping(r, h, mapping, None);
                let e = c.missed + c.false_alarm + c.confusion;
                if best.map_or(true, |b| e < b.missed + b.false_alarm + b.confusion) {
                    *best = Some(c);
                }
                return;
            }
            mapping[i] = None;
            rec(i + 1, used, mapping, r, h, best);
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    mapping[i] = Some(j);
                    rec(i + 1, used, mapping, r, h, best);
                    used[j] = false;
                }
            }
            mapping[i] = None;
        }
        rec(0, &mut vec![false; sh], &mut mapping, reference, hyp, &mut best);
        best.unwrap()
    }

    #[test]
    fn perfect_and_empty() {
        let r = runs(10, &[(0, 5), (3, 8)]);
        let s = der(&r, &r).unwrap();
        assert_eq!((s.der, s.ms, s.fa, s.cf), (0.0, 0.0, 0.0, 0.0));
        let s = der(&r, &Tensor::zeros(&[0, 10])).unwrap();
        assert_eq!((s.der, s.ms), (100.0, 100.0));
    }

    #[test]
    fn hand_case_two_speakers_one_hypothesis() {
        // frame oracle: frames 3..=5 have two ref speakers and one hyp (MS 3);
        // the unmapped speaker's solo frames are confusion (CF 3)
        let r = runs(10, &[(0, 5), (3, 8)]);
        let h = runs(10, &[(0, 8)]);
        let c = der_counts(&r, &h).unwrap();
        assert_eq!(c.speech, 12);
        assert_eq!((c.missed, c.false_alarm, c.confusion), (3, 0, 3));
        assert_eq!(c, brute_force(&r, &h));
        assert_eq!(c.score().der, 50.0);
        assert_eq!((c.sad_missed, c.sad_false_alarm), (0, 0));
    }

    #[test]
    fn overlap_collapsed_is_der_miss_but_sad_hit() {
        let r = m(&[&[1, 1], &[0, 1]]);
        let h = m(&[&[1, 1]]);
        let s = der(&r, &h).unwrap();
        assert!((s.ms - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(sad(&r, &h).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn false_alarm_on_silence_is_sad_fa_only() {
        let r = m(&[&[1, 0]]);
        let h = m(&[&[1, 1]]);
        let s = der(&r, &h).unwrap();
        assert_eq!((s.sad_ms, s.sad_fa), (0.0, 100.0));
        assert_eq!(s.fa, 100.0);
    }

    #[test]
    fn permuted_hypothesis_maps_back() {
        let r = runs(20, &[(0, 4), (5, 12), (10, 19)]);
        let h = r.select_rows(&[2, 0, 1]);
        assert_eq!(optimal_mapping(&r, &h), vec![Some(1), Some(2), Some(0)]);
        assert_eq!(der(&r, &h).unwrap().der, 0.0);
    }

    #[test]
    fn collar_excludes_boundary_frames() {
        let r = runs(20, &[(5, 9)]);
        let mask = collar_mask(&r, 0.1, 0.25);
        // boundaries at 0.5 s and 1.0 s; collars cover [0.25, 0.75] and [0.75, 1.25]
        let expected: Vec<bool> = (0..20).map(|f| !(2..=12).contains(&f)).collect();
        assert_eq!(mask, expected);
        assert_eq!(collar_mask(&r, 0.1, 0.0), vec![true; 20]);
        let h = runs(20, &[(3, 11)]);
        assert_eq!(der_counts_masked(&r, &h, Some(&mask)).unwrap().false_alarm, 0);
    }

    #[test]
    fn report_has_table_columns() {
        let s = der(&runs(4, &[(0, 1)]), &runs(4, &[(0, 2)])).unwrap();
        let t = report_table(&[("Last".into(), s)]);
        let header: Vec<&str> = t.lines().next().unwrap().split("  ").map(str::trim).filter(|x| !x.is_empty()).collect();
        assert_eq!(header, ["System", "DER", "MS", "FA", "CF", "SAD MS", "SAD FA"]);
        let j = report_jsonl(&[("Last".into(), s)]);
        let v: serde_json::Value = serde_json::from_str(j.trim()).unwrap();
        assert_eq!(v["label"], "Last");
        assert_eq!(v["der"], 50.0);
    }

    fn random(rng: &mut ChaCha8Rng, s: usize, t: usize) -> Tensor {
        Tensor::new(vec![s, t], (0..s * t).map(|_| rng.gen_bool(0.35) as u8 as f64).collect()).unwrap()
    }

    #[test]
    fn mapping_matches_exhaustive_500_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let (sr, sh, t) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=50));
            let (r, h) = (random(&mut rng, sr, t), random(&mut rng, sh, t));
            let ov = overlap_matrix(&r, &h, None);
            let neg: Vec<Vec<f64>> = ov.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
            let total = |map: &[Option<usize>]| map.iter().enumerate().filter_map(|(i, j)| j.map(|j| ov[i][j])).sum::<f64>();
            assert_eq!(total(&optimal_mapping(&r, &h)), total(&exhaustive(&neg)));
        }
    }

    proptest! {
        #[test]
        fn der_invariants(sr in 1usize..5, sh in 0usize..5, t in 1usize..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random(&mut rng, sr, t);
            let h = random(&mut rng, sh, t);
            let c = der_counts(&r, &h).unwrap();
            let s = c.score();
            prop_assert!((s.der - (s.ms + s.fa + s.cf)).abs() < crate::tol::DER_SUM);
            prop_assert_eq!(der_counts(&r, &r).unwrap().score().der, 0.0);
            let mut perm: Vec<usize> = (0..sh).collect();
            perm.reverse();
            prop_assert_eq!(der_counts(&r, &h.select_rows(&perm)).unwrap(), c);
            // overlap collapse can only hide misses
            prop_assert!(c.missed >= c.sad_missed);
        }
    }
}

//! Note-level and frame-level transcription scores in the mir_eval style.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::midi::NoteList;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    pub onset_tol_s: f64,
    pub offset_tol_s: f64,
    pub offset_ratio: f64,
    pub frame_hop_s: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            onset_tol_s: 0.05,
            offset_tol_s: 0.05,
            offset_ratio: 0.2,
            frame_hop_s: 0.01,
        }
    }
}

/// Distances are compared after rounding to this many decimals, as
/// mir_eval does, so that 0.05 s stays within a 0.05 s tolerance.
const DECIMALS: i32 = 4;

fn rounded(x: f64) -> f64 {
    let s = 10f64.powi(DECIMALS);
    (x * s).round() / s
}

/// Whether `est` may match `reference` under the pitch, onset and
/// (optionally) offset criteria.
pub fn is_candidate(
    reference: &crate::midi::NoteEvent,
    est: &crate::midi::NoteEvent,
    cfg: &MatchConfig,
    with_offset: bool,
) -> bool {
    if reference.pitch != est.pitch {
        return false;
    }
    if rounded((reference.onset_s - est.onset_s).abs()) > cfg.onset_tol_s {
        return false;
    }
    if with_offset {
        let tol = cfg.offset_tol_s.max(cfg.offset_ratio * reference.duration_s());
        if rounded((reference.offset_s - est.offset_s).abs()) > tol {
            return false;
        }
    }
    true
}

/// One-to-one matching of maximum cardinality; among those, total onset
/// error (in units of 0.1 ms) is minimal. Pairs are `(ref index, est index)`
/// sorted by reference index.
pub fn match_notes(reference: &NoteList, est: &NoteList, cfg: &MatchConfig, with_offset: bool) -> Vec<(usize, usize)> {
    let r = reference.notes();
    let e = est.notes();
    let mut adj: Vec<Vec<(usize, i64)>> = vec![Vec::new(); r.len()];
    for (i, rn) in r.iter().enumerate() {
        // Estimates are sorted by onset; only a window can qualify.
        let lo = e.partition_point(|n| n.onset_s < rn.onset_s - cfg.onset_tol_s - 1e-3);
        for (j, en) in e.iter().enumerate().skip(lo) {
            if en.onset_s > rn.onset_s + cfg.onset_tol_s + 1e-3 {
                break;
            }
            if is_candidate(rn, en, cfg, with_offset) {
                let cost = ((rn.onset_s - en.onset_s).abs() * 10f64.powi(DECIMALS)).round() as i64;
                adj[i].push((j, cost));
            }
        }
    }
    min_cost_matching(r.len(), e.len(), &adj)
}

/// Successive shortest augmenting paths (Bellman-Ford over the residual
/// graph). Each augmentation adds one pair at the least extra cost, which
/// yields a minimum-cost matching for every cardinality.
fn min_cost_matching(n_left: usize, n_right: usize, adj: &[Vec<(usize, i64)>]) -> Vec<(usize, usize)> {
    let mut match_l: Vec<Option<usize>> = vec![None; n_left];
    let mut match_r: Vec<Option<usize>> = vec![None; n_right];
    let cost_of = |i: usize, j: usize| adj[i].iter().find(|&&(k, _)| k == j).map(|&(_, c)| c).unwrap();
    loop {
        // Distances to left vertices; free left vertices are sources.
        let mut dist: Vec<Option<i64>> = vec![None; n_left];
        let mut parent_l: Vec<Option<usize>> = vec![None; n_left];
        let mut queue = VecDeque::new();
        let mut in_queue = vec![false; n_left];
        for i in 0..n_left {
            if match_l[i].is_none() && !adj[i].is_empty() {
                dist[i] = Some(0);
                queue.push_back(i);
                in_queue[i] = true;
            }
        }
        // Best way to reach each right vertex: (distance, left predecessor).
        let mut reach_r: Vec<Option<(i64, usize)>> = vec![None; n_right];
        while let Some(i) = queue.pop_front() {
            in_queue[i] = false;
            let di = dist[i].unwrap();
            for &(j, c) in &adj[i] {
                if match_l[i] == Some(j) {
                    continue;
                }
                let dj = di + c;
                if reach_r[j].is_none_or(|(d, _)| dj < d) {
                    reach_r[j] = Some((dj, i));
                    if let Some(k) = match_r[j] {
                        let dk = dj - cost_of(k, j);
                        if dist[k].is_none_or(|d| dk < d) {
                            dist[k] = Some(dk);
                            parent_l[k] = Some(j);
                            if !in_queue[k] {
                                queue.push_back(k);
                                in_queue[k] = true;
                            }
                        }
                    }
                }
            }
        }
        let target = (0..n_right)
            .filter(|&j| match_r[j].is_none())
            .filter_map(|j| reach_r[j].map(|(d, _)| (d, j)))
            .min();
        let Some((_, mut j)) = target else { break };
        // Walk back to a free left vertex, flipping matched/unmatched edges.
        loop {
            let (_, i) = reach_r[j].unwrap();
            let via = parent_l[i];
            match_l[i] = Some(j);
            match_r[j] = Some(i);
            match via {
                Some(pj) => j = pj,
                None => break,
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = match_l
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// `(precision, recall, F)`; any zero denominator gives 0.
pub fn f_measure(matched: usize, ref_count: usize, est_count: usize) -> (f64, f64, f64) {
    let p = if est_count == 0 { 0.0 } else { matched as f64 / est_count as f64 };
    let r = if ref_count == 0 { 0.0 } else { matched as f64 / ref_count as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Frame indices `k` whose centre `(k + 0.5) * hop` lies in `[onset, offset)`.
fn active_frames(onset: f64, offset: f64, hop: f64, n_frames: usize) -> std::ops::Range<usize> {
    let first = (onset / hop - 0.5).ceil().max(0.0) as usize;
    let end = ((offset / hop - 0.5).ceil().max(0.0) as usize).min(n_frames);
    first.min(end)..end
}

fn piano_roll(notes: &NoteList, hop: f64, n_frames: usize) -> Vec<bool> {
    let mut roll = vec![false; n_frames * 128];
    for n in notes.notes() {
        for k in active_frames(n.onset_s, n.offset_s, hop, n_frames) {
            roll[k * 128 + usize::from(n.pitch)] = true;
        }
    }
    roll
}

/// `TP / (TP + FP + FN)` over (frame, pitch) cells; 0 when nothing is active.
pub fn frame_accuracy(reference: &NoteList, est: &NoteList, hop_s: f64, duration_s: f64) -> f64 {
    let n_frames = (duration_s / hop_s).round().max(0.0) as usize;
    let a = piano_roll(reference, hop_s, n_frames);
    let b = piano_roll(est, hop_s, n_frames);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(&b) {
        match (x, y) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let denom = tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        tp as f64 / denom as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "Fn")]
    pub f_no_offset: f64,
    #[serde(rename = "Ac")]
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_no_offset: f64,
    pub recall_no_offset: f64,
    pub matched: usize,
    pub matched_no_offset: usize,
    pub ref_count: usize,
    pub est_count: usize,
}

pub fn evaluate(reference: &NoteList, est: &NoteList, cfg: &MatchConfig) -> EvalReport {
    let with = match_notes(reference, est, cfg, true).len();
    let without = match_notes(reference, est, cfg, false).len();
    let (p, r, f) = f_measure(with, reference.len(), est.len());
    let (pn, rn, fn_) = f_measure(without, reference.len(), est.len());
    let duration = reference.duration_s().max(est.duration_s());
    EvalReport {
        f,
        f_no_offset: fn_,
        accuracy: frame_accuracy(reference, est, cfg.frame_hop_s, duration),
        precision: p,
        recall: r,
        precision_no_offset: pn,
        recall_no_offset: rn,
        matched: with,
        matched_no_offset: without,
        ref_count: reference.len(),
        est_count: est.len(),
    }
}

/// Arithmetic mean of every score; counts are summed.
pub fn mean_report(reports: &[EvalReport]) -> EvalReport {
    if reports.is_empty() {
        return EvalReport::default();
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    EvalReport {
        f: avg(|r| r.f),
        f_no_offset: avg(|r| r.f_no_offset),
        accuracy: avg(|r| r.accuracy),
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        precision_no_offset: avg(|r| r.precision_no_offset),
        recall_no_offset: avg(|r| r.recall_no_offset),
        matched: reports.iter().map(|r| r.matched).sum(),
        matched_no_offset: reports.iter().map(|r| r.matched_no_offset).sum(),
        ref_count: reports.iter().map(|r| r.ref_count).sum(),
        est_count: reports.iter().map(|r| r.est_count).sum(),
    }
}

/// Aligned text table with one row per entry and a final mean row.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let mean = mean_report(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(4);
    let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>5}  {:>5}\n", "file", "F", "Fn", "Ac", "ref", "est");
    let line = |name: &str, r: &EvalReport| {
        format!(
            "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>5}  {:>5}\n",
            name, r.f, r.f_no_offset, r.accuracy, r.ref_count, r.est_count
        )
    };
    for (name, r) in rows {
        out.push_str(&line(name, r));
    }
    out.push_str(&line("mean", &mean));
    out
}

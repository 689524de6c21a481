#![allow(dead_code)]

use std::collections::BTreeSet;

use proptest::prelude::*;
use synthamt::metrics::{is_candidate, match_notes, MatchConfig};
use synthamt::midi::{slice_notes, NoteEvent, NoteList, SlicedNote};
use synthamt::tokens::{self, decode, encode_quantized, encode_segment, quantize, DEFAULT_MAX_LEN};

/// Grid note as (onset bin, offset bin, pitch, held over); offset 256 means
/// continuing.
pub type GridNote = (u16, u16, u8, bool);

/// Up to 24 notes on the 10 ms grid with no same-pitch overlap.
pub fn grid_notes(max_bins: u16) -> impl Strategy<Value = Vec<GridNote>> {
    prop::collection::vec((0..max_bins, 1..=120u16, 58u8..=66, any::<bool>()), 0..=24).prop_map(move |raw| {
        let mut taken: Vec<(u8, u16, u16)> = Vec::new();
        let mut out = Vec::new();
        for (on, len, pitch, held) in raw {
            let off = (on + len).min(max_bins);
            if taken.iter().any(|&(p, a, b)| p == pitch && on < b && a < off) {
                continue;
            }
            taken.push((pitch, on, off));
            out.push((on, off, pitch, held && on == 0));
        }
        out
    })
}

pub fn jittered(notes: &[GridNote], jitter: &[f64]) -> Vec<SlicedNote> {
    notes
        .iter()
        .zip(jitter.iter().cycle())
        .map(|(&(on, off, pitch, held), &j)| {
            let onset = if on == 0 { j.abs() * 0.0049 } else { on as f64 * 0.01 + j * 0.0049 };
            let continuing = off == 256;
            let offset = if continuing { 2.56 } else { off as f64 * 0.01 - j * 0.0049 };
            SlicedNote {
                note: NoteEvent::plain(pitch, if held { 0.0 } else { onset }, offset).unwrap(),
                held_over: held,
                continuing,
            }
        })
        .collect()
}

/// Single segment: encode the jittered notes, decode, compare with the grid.
pub fn segment_round_trip(notes: &[GridNote], jitter: &[f64]) -> Result<(), String> {
    let sliced = jittered(notes, jitter);
    let ids = encode_quantized(&quantize(&sliced), DEFAULT_MAX_LEN).map_err(|e| e.to_string())?;
    let got: BTreeSet<GridNote> = decode(&ids)
        .notes
        .iter()
        .map(|n| (n.onset_bin, n.offset_bin, n.pitch, n.held_over))
        .collect();
    let want: BTreeSet<GridNote> = notes.iter().copied().collect();
    if got == want {
        Ok(())
    } else {
        Err(format!("decoded {got:?}, expected {want:?}"))
    }
}

/// Three consecutive segments: slice, encode, decode, join.
pub fn three_segment_round_trip(notes: &[GridNote]) -> Result<(), String> {
    let bin = |b: u16| b as f64 * 0.01;
    let events: Vec<NoteEvent> = notes
        .iter()
        .map(|&(on, off, pitch, _)| NoteEvent::plain(pitch, bin(on), bin(off)).unwrap())
        .collect();
    let list = NoteList::new(events, bin(768));
    let mut decoded = Vec::new();
    let mut starts = Vec::new();
    for k in 0..3u16 {
        let start = bin(256 * k);
        let seg = slice_notes(&list, start, 2.56).map_err(|e| e.to_string())?;
        decoded.push(decode(&encode_segment(&seg, DEFAULT_MAX_LEN).map_err(|e| e.to_string())?));
        starts.push(start);
    }
    let joined = tokens::join_segments(&decoded, &starts);
    let got: BTreeSet<(u8, i64, i64)> = joined
        .notes()
        .iter()
        .map(|n| (n.pitch, (n.onset_s * 100.0).round() as i64, (n.offset_s * 100.0).round() as i64))
        .collect();
    let want: BTreeSet<(u8, i64, i64)> = notes.iter().map(|&(on, off, p, _)| (p, on as i64, off as i64)).collect();
    if got == want {
        Ok(())
    } else {
        Err(format!("joined {got:?}, expected {want:?}"))
    }
}

pub fn note_list() -> impl Strategy<Value = NoteList> {
    prop::collection::vec((60u8..=61, 0.0f64..0.3, 0.02f64..0.4), 0..=8).prop_map(|v| {
        NoteList::new(v.into_iter().map(|(p, on, len)| NoteEvent::plain(p, on, on + len).unwrap()).collect(), 1.0)
    })
}

pub fn cost(r: &NoteList, e: &NoteList, (i, j): (usize, usize)) -> i64 {
    ((r.notes()[i].onset_s - e.notes()[j].onset_s).abs() * 1e4).round() as i64
}

/// Exhaustive search: best (cardinality, -total cost) over all one-to-one
/// assignments of candidate pairs.
pub fn brute_force(r: &NoteList, e: &NoteList, cfg: &MatchConfig, with_offset: bool) -> (usize, i64) {
    fn go(i: usize, used: &mut Vec<bool>, r: &NoteList, e: &NoteList, cfg: &MatchConfig, wo: bool) -> (usize, i64) {
        if i == r.len() {
            return (0, 0);
        }
        let mut best = go(i + 1, used, r, e, cfg, wo);
        for j in 0..e.len() {
            if !used[j] && is_candidate(&r.notes()[i], &e.notes()[j], cfg, wo) {
                used[j] = true;
                let (n, c) = go(i + 1, used, r, e, cfg, wo);
                used[j] = false;
                let cand = (n + 1, c + cost(r, e, (i, j)));
                if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                    best = cand;
                }
            }
        }
        best
    }
    go(0, &mut vec![false; e.len()], r, e, cfg, with_offset)
}

/// The matcher's pairs are valid, one-to-one and as good as the optimum.
pub fn matching_is_optimal(r: &NoteList, e: &NoteList, wo: bool) -> Result<(), String> {
    let cfg = MatchConfig::default();
    let m = match_notes(r, e, &cfg, wo);
    let mut seen = BTreeSet::new();
    for &(i, j) in &m {
        if !is_candidate(&r.notes()[i], &e.notes()[j], &cfg, wo) || !seen.insert(j) {
            return Err(format!("invalid pair ({i}, {j})"));
        }
    }
    let total: i64 = m.iter().map(|&p| cost(r, e, p)).sum();
    let best = brute_force(r, e, &cfg, wo);
    if (m.len(), total) == best {
        Ok(())
    } else {
        Err(format!("matched (count, cost) {:?}, optimum {best:?}", (m.len(), total)))
    }
}

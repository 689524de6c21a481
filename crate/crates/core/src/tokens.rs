//! Event-token representation of segment-local notes.
//!
//! Id layout:
//!
//! | ids       | token                    |
//! |-----------|--------------------------|
//! | 0..=127   | pitch                    |
//! | 128..=383 | absolute time, 10 ms bin |
//! | 384       | ON                       |
//! | 385       | OFF                      |
//! | 386       | BOS                      |
//! | 387       | EOS                      |
//! | 388       | END_TIE                  |
//!
//! A sequence is `BOS, tie pitches..., END_TIE, events..., EOS`. The tie
//! section lists, ascending, the pitches already sounding at the segment
//! start. Events are grouped by time bin: a time token, then `OFF` and the
//! pitches ending there, then `ON` and the pitches starting there, both
//! ascending. A note still sounding at the segment end gets no `OFF`.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};
use thiserror::Error;

use crate::midi::{self, NoteEvent, NoteList, Segment, SlicedNote};

pub const NUM_PITCHES: usize = 128;
pub const NUM_TIME_BINS: usize = 256;
pub const TIME_OFFSET: usize = NUM_PITCHES;
pub const ON: usize = TIME_OFFSET + NUM_TIME_BINS;
pub const OFF: usize = ON + 1;
pub const BOS: usize = OFF + 1;
pub const EOS: usize = BOS + 1;
pub const END_TIE: usize = EOS + 1;
pub const VOCAB_SIZE: usize = END_TIE + 1;

pub const BIN_S: f64 = 0.01;
pub const SEGMENT_S: f64 = NUM_TIME_BINS as f64 * BIN_S;
pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Pitch(u8),
    Time(u16),
    On,
    Off,
    Bos,
    Eos,
    EndTie,
}

impl Token {
    pub fn id(self) -> usize {
        match self {
            Token::Pitch(p) => usize::from(p),
            Token::Time(t) => TIME_OFFSET + usize::from(t),
            Token::On => ON,
            Token::Off => OFF,
            Token::Bos => BOS,
            Token::Eos => EOS,
            Token::EndTie => END_TIE,
        }
    }

    pub fn from_id(id: usize) -> Option<Token> {
        Some(match id {
            0..=127 => Token::Pitch(id as u8),
            128..=383 => Token::Time((id - TIME_OFFSET) as u16),
            ON => Token::On,
            OFF => Token::Off,
            BOS => Token::Bos,
            EOS => Token::Eos,
            END_TIE => Token::EndTie,
            _ => return None,
        })
    }

    pub fn name(self) -> String {
        match self {
            Token::Pitch(p) => format!("pitch_{p}"),
            Token::Time(t) => format!("time_{t}"),
            Token::On => "on".into(),
            Token::Off => "off".into(),
            Token::Bos => "bos".into(),
            Token::Eos => "eos".into(),
            Token::EndTie => "end_tie".into(),
        }
    }
}

/// `{"size": 389, "tokens": {"0": "pitch_0", ...}}`
pub fn vocab_json() -> Value {
    let tokens: serde_json::Map<String, Value> = (0..VOCAB_SIZE)
        .map(|id| (id.to_string(), Value::String(Token::from_id(id).unwrap().name())))
        .collect();
    json!({ "size": VOCAB_SIZE, "tokens": tokens })
}

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("token sequence needs {len} tokens, over the limit of {max_len}; {} notes dropped", dropped.len())]
    TooLong {
        len: usize,
        max_len: usize,
        dropped: Vec<NoteEvent>,
    },
}

/// Rounds `s / 10 ms` to the nearest integer, ties to even.
pub fn quantize_time(s: f64) -> i64 {
    (s / BIN_S).round_ties_even() as i64
}

/// A note on the bin grid. `offset_bin == 256` means it runs past the end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct QuantNote {
    pub onset_bin: u16,
    pub pitch: u8,
    pub offset_bin: u16,
    pub held_over: bool,
}

impl QuantNote {
    pub fn continuing(&self) -> bool {
        usize::from(self.offset_bin) >= NUM_TIME_BINS
    }

    pub fn to_sliced(self) -> SlicedNote {
        let note = NoteEvent::plain(
            self.pitch,
            f64::from(self.onset_bin) * BIN_S,
            f64::from(self.offset_bin) * BIN_S,
        )
        .expect("quantized notes have positive length");
        SlicedNote {
            note,
            held_over: self.held_over,
            continuing: self.continuing(),
        }
    }
}

/// Canonical grid form of a segment's notes, which is exactly what
/// `decode(encode(..))` returns.
///
/// * A note whose onset rounds to bin 256 belongs to the next segment and is
///   dropped; a held-over note whose offset rounds to bin 0 is dropped too,
///   so the previous segment's chain ends at the boundary.
/// * Other offsets are at least one bin after the onset; a continuing note
///   ends at bin 256.
/// * Same-pitch notes never overlap: an earlier note is cut at the next
///   onset, and of two notes sharing an onset bin only the later one stays.
pub fn quantize(notes: &[SlicedNote]) -> Vec<QuantNote> {
    let end = NUM_TIME_BINS as i64;
    let mut q: Vec<QuantNote> = Vec::with_capacity(notes.len());
    for s in notes {
        let onset = if s.held_over { 0 } else { quantize_time(s.note.onset_s).max(0) };
        if onset >= end {
            continue;
        }
        let raw_off = if s.continuing { end } else { quantize_time(s.note.offset_s).min(end) };
        let offset = if raw_off > onset {
            raw_off
        } else if s.held_over {
            continue;
        } else {
            onset + 1
        };
        q.push(QuantNote {
            onset_bin: onset as u16,
            pitch: s.note.pitch,
            offset_bin: offset as u16,
            held_over: s.held_over,
        });
    }
    q.sort_by_key(|n| (n.pitch, n.onset_bin, !n.held_over, n.offset_bin));
    let mut out: Vec<QuantNote> = Vec::with_capacity(q.len());
    for n in q {
        if let Some(prev) = out.last_mut().filter(|p| p.pitch == n.pitch) {
            if n.onset_bin < prev.offset_bin {
                prev.offset_bin = n.onset_bin;
            }
            if prev.offset_bin <= prev.onset_bin {
                out.pop();
            }
        }
        out.push(n);
    }
    out.sort();
    out
}

/// Token ids plus, for each note of the quantized input, the positions of
/// its start and end tokens.
fn layout(notes: &[QuantNote]) -> (Vec<usize>, Vec<(usize, Option<usize>)>) {
    let mut ids = vec![BOS];
    let mut pos = vec![(0usize, None); notes.len()];
    let mut ties: Vec<usize> = (0..notes.len()).filter(|&i| notes[i].held_over).collect();
    ties.sort_by_key(|&i| notes[i].pitch);
    for &i in &ties {
        pos[i].0 = ids.len();
        ids.push(usize::from(notes[i].pitch));
    }
    ids.push(END_TIE);

    let mut by_bin: BTreeMap<u16, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, n) in notes.iter().enumerate() {
        if !n.held_over {
            by_bin.entry(n.onset_bin).or_default().1.push(i);
        }
        if !n.continuing() {
            by_bin.entry(n.offset_bin).or_default().0.push(i);
        }
    }
    for (bin, (mut offs, mut ons)) in by_bin {
        ids.push(Token::Time(bin).id());
        offs.sort_by_key(|&i| notes[i].pitch);
        ons.sort_by_key(|&i| notes[i].pitch);
        if !offs.is_empty() {
            ids.push(OFF);
            for i in offs {
                pos[i].1 = Some(ids.len());
                ids.push(usize::from(notes[i].pitch));
            }
        }
        if !ons.is_empty() {
            ids.push(ON);
            for i in ons {
                pos[i].0 = ids.len();
                ids.push(usize::from(notes[i].pitch));
            }
        }
    }
    ids.push(EOS);
    (ids, pos)
}

/// Encodes already-quantized notes.
pub fn encode_quantized(notes: &[QuantNote], max_len: usize) -> Result<Vec<usize>, CodecError> {
    let (ids, pos) = layout(notes);
    if ids.len() <= max_len {
        return Ok(ids);
    }
    // Everything from position max_len - 1 on (room for EOS) is lost.
    let cut = max_len.saturating_sub(1);
    let dropped = notes
        .iter()
        .zip(&pos)
        .filter(|(_, &(start, end))| start >= cut || end.is_some_and(|e| e >= cut))
        .map(|(n, _)| n.to_sliced().note)
        .collect();
    Err(CodecError::TooLong {
        len: ids.len(),
        max_len,
        dropped,
    })
}

/// Encodes the notes of a sliced segment, honouring its held-over and
/// continuing flags.
pub fn encode_segment(seg: &Segment, max_len: usize) -> Result<Vec<usize>, CodecError> {
    encode_quantized(&quantize(&seg.notes), max_len)
}

/// Encodes segment-local notes given the pitches sounding from before the
/// segment (`held_over`) and past its end (`continuing`).
///
/// For a held-over pitch, its first note starting in bin 0 is the tied
/// continuation; with no such note the pitch sounds through the whole
/// segment. For a continuing pitch, its last note runs to the end.
pub fn encode(
    notes: &NoteList,
    held_over: &BTreeSet<u8>,
    continuing: &BTreeSet<u8>,
    max_len: usize,
) -> Result<Vec<usize>, CodecError> {
    let mut sliced: Vec<SlicedNote> = notes
        .notes()
        .iter()
        .map(|&note| SlicedNote {
            note,
            held_over: false,
            continuing: false,
        })
        .collect();
    for &p in held_over {
        match sliced
            .iter_mut()
            .find(|s| s.note.pitch == p && quantize_time(s.note.onset_s) <= 0)
        {
            Some(s) => s.held_over = true,
            None => sliced.push(SlicedNote {
                note: NoteEvent::plain(p, 0.0, SEGMENT_S).expect("valid pitch"),
                held_over: true,
                continuing: true,
            }),
        }
    }
    for &p in continuing {
        if let Some(s) = sliced.iter_mut().rev().find(|s| s.note.pitch == p) {
            s.continuing = true;
        }
    }
    encode_quantized(&quantize(&sliced), max_len)
}

/// Result of decoding one segment's tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decoded {
    /// Sorted by (onset, pitch).
    pub notes: Vec<QuantNote>,
    /// Tokens that did not fit the grammar and were ignored.
    pub skipped: usize,
}

impl Decoded {
    pub fn continuing_pitches(&self) -> BTreeSet<u8> {
        self.notes.iter().filter(|n| n.continuing()).map(|n| n.pitch).collect()
    }

    pub fn note_list(&self) -> NoteList {
        NoteList::new(self.notes.iter().map(|n| n.to_sliced().note).collect(), SEGMENT_S)
    }

    pub fn to_segment(&self, start_s: f64) -> Segment {
        Segment {
            start_s,
            dur_s: SEGMENT_S,
            notes: self.notes.iter().map(|n| n.to_sliced()).collect(),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Marker {
    None,
    On,
    Off,
}

/// Total decoder for arbitrary id sequences.
///
/// * Leading tokens before `BOS` are skipped; a missing `BOS` is tolerated.
/// * In the tie section, pitches open held-over notes at bin 0; a time, ON
///   or OFF token there ends the section as if `END_TIE` had been seen.
/// * A time token resets the ON/OFF marker. A time earlier than the running
///   maximum is clamped to it.
/// * Pitch tokens need a marker. ON of an open pitch closes and reopens it;
///   OFF of a pitch that is not open is skipped. Zero-length notes are
///   discarded.
/// * Decoding stops at `EOS`; pitches still open end at bin 256.
pub fn decode(ids: &[usize]) -> Decoded {
    let mut skipped = 0usize;
    let mut i = match ids.iter().position(|&t| t == BOS) {
        Some(p) => {
            skipped += p;
            p + 1
        }
        None => 0,
    };
    let mut notes = Vec::new();
    let mut open: BTreeMap<u8, (u16, bool)> = BTreeMap::new();
    let mut in_tie = true;
    let mut now: u16 = 0;
    let mut marker = Marker::None;

    let close = |notes: &mut Vec<QuantNote>, pitch: u8, (onset, held): (u16, bool), at: u16| -> bool {
        if at > onset {
            notes.push(QuantNote {
                onset_bin: onset,
                pitch,
                offset_bin: at,
                held_over: held,
            });
            true
        } else {
            false
        }
    };

    while i < ids.len() {
        let id = ids[i];
        i += 1;
        let Some(tok) = Token::from_id(id) else {
            skipped += 1;
            continue;
        };
        if in_tie {
            match tok {
                Token::Pitch(p) => {
                    if open.insert(p, (0, true)).is_some() {
                        skipped += 1;
                    }
                    continue;
                }
                Token::EndTie => {
                    in_tie = false;
                    continue;
                }
                Token::Time(_) | Token::On | Token::Off => {
                    in_tie = false;
                    skipped += 1;
                }
                Token::Bos => {
                    skipped += 1;
                    continue;
                }
                Token::Eos => break,
            }
        }
        match tok {
            Token::Time(t) => {
                if t < now {
                    skipped += 1;
                } else {
                    now = t;
                }
                marker = Marker::None;
            }
            Token::On => marker = Marker::On,
            Token::Off => marker = Marker::Off,
            Token::Pitch(p) => match marker {
                Marker::None => skipped += 1,
                Marker::On => {
                    if let Some(prev) = open.remove(&p) {
                        if !close(&mut notes, p, prev, now) {
                            skipped += 1;
                        }
                    }
                    open.insert(p, (now, false));
                }
                Marker::Off => match open.remove(&p) {
                    Some(prev) => {
                        if !close(&mut notes, p, prev, now) {
                            skipped += 1;
                        }
                    }
                    None => skipped += 1,
                },
            },
            Token::Bos | Token::EndTie => skipped += 1,
            Token::Eos => break,
        }
    }
    for (p, prev) in open {
        close(&mut notes, p, prev, NUM_TIME_BINS as u16);
    }
    notes.sort();
    Decoded { notes, skipped }
}

/// Concatenates consecutive decoded segments starting at `starts`, merging
/// notes tied across boundaries.
pub fn join_segments(decodes: &[Decoded], starts: &[f64]) -> NoteList {
    assert_eq!(decodes.len(), starts.len(), "one start time per segment");
    let segments: Vec<Segment> = decodes.iter().zip(starts).map(|(d, &s)| d.to_segment(s)).collect();
    midi::join_segments(&segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(bin: u16) -> usize {
        Token::Time(bin).id()
    }

    #[test]
    fn layout_is_disjoint_and_complete() {
        assert_eq!(VOCAB_SIZE, 389);
        for id in 0..VOCAB_SIZE {
            assert_eq!(Token::from_id(id).unwrap().id(), id);
        }
        assert_eq!(Token::from_id(VOCAB_SIZE), None);
        let v = vocab_json();
        assert_eq!(v["tokens"].as_object().unwrap().len(), 389);
        assert_eq!(v["tokens"]["388"], "end_tie");
    }

    #[test]
    fn empty_segment() {
        let e = encode(&NoteList::empty(2.56), &BTreeSet::new(), &BTreeSet::new(), 512).unwrap();
        assert_eq!(e, vec![BOS, END_TIE, EOS]);
        assert_eq!(decode(&e), Decoded::default());
    }

    #[test]
    fn single_note() {
        let notes = NoteList::new(vec![NoteEvent::plain(60, 0.5, 1.0).unwrap()], 2.56);
        let e = encode(&notes, &BTreeSet::new(), &BTreeSet::new(), 512).unwrap();
        assert_eq!(e, vec![BOS, END_TIE, t(50), ON, 60, t(100), OFF, 60, EOS]);
        let d = decode(&e);
        assert_eq!(d.skipped, 0);
        assert_eq!(
            d.notes,
            vec![QuantNote { onset_bin: 50, pitch: 60, offset_bin: 100, held_over: false }]
        );
    }

    #[test]
    fn held_over_without_events() {
        let e = encode(&NoteList::empty(2.56), &BTreeSet::from([64]), &BTreeSet::new(), 512).unwrap();
        assert_eq!(e, vec![BOS, 64, END_TIE, EOS]);
        let d = decode(&e);
        assert_eq!(
            d.notes,
            vec![QuantNote { onset_bin: 0, pitch: 64, offset_bin: 256, held_over: true }]
        );
        assert_eq!(d.continuing_pitches(), BTreeSet::from([64]));
    }

    #[test]
    fn off_precedes_on_at_same_instant() {
        let notes = NoteList::new(
            vec![
                NoteEvent::plain(62, 0.0, 0.1).unwrap(),
                NoteEvent::plain(60, 0.1, 0.2).unwrap(),
                NoteEvent::plain(62, 0.1, 0.2).unwrap(),
            ],
            2.56,
        );
        let e = encode(&notes, &BTreeSet::new(), &BTreeSet::new(), 512).unwrap();
        assert_eq!(
            e,
            vec![BOS, END_TIE, t(0), ON, 62, t(10), OFF, 62, ON, 60, 62, t(20), OFF, 60, 62, EOS]
        );
    }

    #[test]
    fn continuing_note_has_no_off() {
        let notes = NoteList::new(vec![NoteEvent::plain(70, 2.0, 2.56).unwrap()], 2.56);
        let e = encode(&notes, &BTreeSet::new(), &BTreeSet::from([70]), 512).unwrap();
        assert_eq!(e, vec![BOS, END_TIE, t(200), ON, 70, EOS]);
    }

    #[test]
    fn ties_round_half_to_even() {
        assert_eq!(quantize_time(0.125), 12);
        assert_eq!(quantize_time(0.135), 14);
        assert_eq!(quantize_time(0.5), 50);
    }

    #[test]
    fn too_long_lists_dropped_notes() {
        let notes: Vec<NoteEvent> = (0..10)
            .map(|k| NoteEvent::plain(60, 0.1 * k as f64, 0.1 * k as f64 + 0.05).unwrap())
            .collect();
        let err = encode(&NoteList::new(notes, 2.56), &BTreeSet::new(), &BTreeSet::new(), 20).unwrap_err();
        let CodecError::TooLong { len, max_len, dropped } = err;
        assert_eq!(len, 3 + 10 * 6);
        assert_eq!(max_len, 20);
        // Positions 2.. hold 6 tokens per note; the last usable slot is 18.
        assert_eq!(dropped.len(), 8);
        assert!((dropped[0].onset_s - 0.2).abs() < 1e-9);
    }

    #[test]
    fn decode_robustness_rules() {
        // OFF of a pitch never opened.
        let d = decode(&[BOS, END_TIE, t(10), OFF, 60, EOS]);
        assert!(d.notes.is_empty());
        assert_eq!(d.skipped, 1);

        // Decreasing time clamps to the running maximum.
        let d = decode(&[BOS, END_TIE, t(50), ON, 60, t(40), OFF, 60, t(80), OFF, 60, EOS]);
        assert_eq!(d.skipped, 3);
        assert!(d.notes.is_empty());
        let d = decode(&[BOS, END_TIE, t(50), ON, 60, t(40), ON, 61, t(80), OFF, 60, 61, EOS]);
        assert_eq!(d.skipped, 1);
        assert_eq!(d.notes.len(), 2);
        assert!(d.notes.iter().all(|n| n.onset_bin == 50 && n.offset_bin == 80));

        // ON of an open pitch closes and reopens.
        let d = decode(&[BOS, END_TIE, t(10), ON, 60, t(20), ON, 60, t(30), OFF, 60, EOS]);
        assert_eq!(d.skipped, 0);
        assert_eq!(d.notes.iter().map(|n| (n.onset_bin, n.offset_bin)).collect::<Vec<_>>(), vec![(10, 20), (20, 30)]);

        // Missing markers, stray BOS and out-of-range ids.
        let d = decode(&[7, BOS, END_TIE, 60, BOS, 999, t(5), ON, 61, EOS, t(9), OFF, 61]);
        assert_eq!(d.skipped, 4);
        assert_eq!(d.notes, vec![QuantNote { onset_bin: 5, pitch: 61, offset_bin: 256, held_over: false }]);
    }

    #[test]
    fn join_merges_across_boundary() {
        let whole = NoteList::new(vec![NoteEvent::plain(60, 2.0, 3.0).unwrap()], 5.12);
        let starts = [0.0, 2.56];
        let decodes: Vec<Decoded> = starts
            .iter()
            .map(|&s| decode(&encode_segment(&midi::slice_notes(&whole, s, SEGMENT_S).unwrap(), 512).unwrap()))
            .collect();
        let joined = join_segments(&decodes, &starts);
        assert_eq!(joined.len(), 1);
        assert!((joined.notes()[0].onset_s - 2.0).abs() < 1e-9);
        assert!((joined.notes()[0].offset_s - 3.0).abs() < 1e-9);

        // A continuing note with no tie in the next segment ends at the boundary.
        let first = decode(&[BOS, END_TIE, t(200), ON, 60, EOS]);
        let second = decode(&[BOS, END_TIE, EOS]);
        let joined = join_segments(&[first.clone(), second], &starts);
        assert!((joined.notes()[0].offset_s - 2.56).abs() < 1e-9);

        let single = join_segments(&[first.clone()], &[0.0]);
        assert_eq!(single.notes(), first.note_list().notes());
    }
}

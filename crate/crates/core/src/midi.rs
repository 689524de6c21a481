//! Note events, Standard MIDI File I/O, instrument groups and segment slicing.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("SMF type {0} is not supported")]
    UnsupportedFormat(u16),
    #[error("MIDI program {0} outside 1..=128")]
    ProgramOutOfRange(u32),
    #[error("invalid note: {0}")]
    InvalidNote(String),
    #[error("invalid slice: {0}")]
    InvalidSlice(String),
}

/// One note: MIDI pitch, onset/offset in seconds, velocity and 1-based program.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNote", into = "RawNote")]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset_s: f64,
    pub offset_s: f64,
    pub velocity: u8,
    pub program: u8,
}

#[derive(Serialize, Deserialize)]
struct RawNote {
    pitch: u8,
    onset_s: f64,
    offset_s: f64,
    velocity: u8,
    program: u8,
}

impl TryFrom<RawNote> for NoteEvent {
    type Error = MidiError;
    fn try_from(r: RawNote) -> Result<Self, MidiError> {
        NoteEvent::new(r.pitch, r.onset_s, r.offset_s, r.velocity, r.program)
    }
}

impl From<NoteEvent> for RawNote {
    fn from(n: NoteEvent) -> Self {
        RawNote {
            pitch: n.pitch,
            onset_s: n.onset_s,
            offset_s: n.offset_s,
            velocity: n.velocity,
            program: n.program,
        }
    }
}

pub const DEFAULT_VELOCITY: u8 = 100;

impl NoteEvent {
    pub fn new(pitch: u8, onset_s: f64, offset_s: f64, velocity: u8, program: u8) -> Result<Self, MidiError> {
        if pitch > 127 {
            return Err(MidiError::InvalidNote(format!("pitch {pitch} > 127")));
        }
        if !(onset_s.is_finite() && offset_s.is_finite()) || onset_s < 0.0 || offset_s <= onset_s {
            return Err(MidiError::InvalidNote(format!(
                "times must satisfy 0 <= onset < offset, got {onset_s}..{offset_s}"
            )));
        }
        if !(1..=127).contains(&velocity) {
            return Err(MidiError::InvalidNote(format!("velocity {velocity} outside 1..=127")));
        }
        if !(1..=128).contains(&program) {
            return Err(MidiError::InvalidNote(format!("program {program} outside 1..=128")));
        }
        Ok(Self {
            pitch,
            onset_s,
            offset_s,
            velocity,
            program,
        })
    }

    /// Note with default velocity and program 1, for decoded output.
    pub fn plain(pitch: u8, onset_s: f64, offset_s: f64) -> Result<Self, MidiError> {
        Self::new(pitch, onset_s, offset_s, DEFAULT_VELOCITY, 1)
    }

    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

fn note_order(a: &NoteEvent, b: &NoteEvent) -> std::cmp::Ordering {
    a.onset_s
        .total_cmp(&b.onset_s)
        .then(a.pitch.cmp(&b.pitch))
        .then(a.offset_s.total_cmp(&b.offset_s))
}

/// Notes sorted by (onset, pitch) with a duration covering every offset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawNoteList")]
pub struct NoteList {
    notes: Vec<NoteEvent>,
    duration_s: f64,
}

#[derive(Deserialize)]
struct RawNoteList {
    notes: Vec<NoteEvent>,
    duration_s: f64,
}

impl From<RawNoteList> for NoteList {
    fn from(r: RawNoteList) -> Self {
        NoteList::new(r.notes, r.duration_s)
    }
}

impl NoteList {
    /// Sorts `notes`; `duration_s` is raised to the latest offset if needed.
    pub fn new(mut notes: Vec<NoteEvent>, duration_s: f64) -> Self {
        notes.sort_by(note_order);
        let latest = notes.iter().map(|n| n.offset_s).fold(0.0, f64::max);
        Self {
            notes,
            duration_s: duration_s.max(latest),
        }
    }

    pub fn empty(duration_s: f64) -> Self {
        Self::new(Vec::new(), duration_s)
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn into_notes(self) -> Vec<NoteEvent> {
        self.notes
    }
}

/// Instrument families used to pair MIDI programs with one-shot timbres.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentGroup {
    Keyboard,
    Mallet,
    Organ,
    Guitar,
    Bass,
    Strings,
    Brass,
    Reed,
    Flute,
    SynthVocal,
}

impl InstrumentGroup {
    pub const ALL: [InstrumentGroup; 10] = [
        InstrumentGroup::Keyboard,
        InstrumentGroup::Mallet,
        InstrumentGroup::Organ,
        InstrumentGroup::Guitar,
        InstrumentGroup::Bass,
        InstrumentGroup::Strings,
        InstrumentGroup::Brass,
        InstrumentGroup::Reed,
        InstrumentGroup::Flute,
        InstrumentGroup::SynthVocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstrumentGroup::Keyboard => "keyboard",
            InstrumentGroup::Mallet => "mallet",
            InstrumentGroup::Organ => "organ",
            InstrumentGroup::Guitar => "guitar",
            InstrumentGroup::Bass => "bass",
            InstrumentGroup::Strings => "strings",
            InstrumentGroup::Brass => "brass",
            InstrumentGroup::Reed => "reed",
            InstrumentGroup::Flute => "flute",
            InstrumentGroup::SynthVocal => "synth_vocal",
        }
    }
}

impl fmt::Display for InstrumentGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Instrument group of a 1-based General MIDI program; `None` for the
/// synth-effect, ethnic, percussive and sound-effect ranges.
pub fn program_to_group(program: u32) -> Result<Option<InstrumentGroup>, MidiError> {
    use InstrumentGroup::*;
    let group = match program {
        1..=8 => Some(Keyboard),
        9..=16 => Some(Mallet),
        17..=24 => Some(Organ),
        25..=32 | 105..=112 => Some(Guitar),
        33..=40 => Some(Bass),
        41..=56 => Some(Strings),
        57..=64 => Some(Brass),
        65..=72 => Some(Reed),
        73..=80 => Some(Flute),
        81..=96 => Some(SynthVocal),
        97..=104 | 113..=128 => None,
        _ => return Err(MidiError::ProgramOutOfRange(program)),
    };
    Ok(group)
}

/// Notes of one channel/program combination from a MIDI file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramTrack {
    /// 1-based General MIDI program.
    pub program: u8,
    pub notes: NoteList,
}

const PERCUSSION_CHANNEL: u8 = 9;
const DEFAULT_TEMPO_US: u32 = 500_000;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, reason: impl Into<String>) -> Result<T, MidiError> {
        Err(MidiError::Malformed {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        match self.bytes.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                Ok(b)
            }
            None => self.err("unexpected end of data"),
        }
    }

    fn data(&mut self) -> Result<u8, MidiError> {
        let b = self.u8()?;
        if b & 0x80 != 0 {
            self.pos -= 1;
            return self.err(format!("expected data byte, found status 0x{b:02X}"));
        }
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.bytes.len() - self.pos < n {
            return self.err(format!("need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | u32::from(b & 0x7F);
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(MidiError::Malformed {
            offset: start,
            reason: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

#[derive(Clone, Copy)]
enum Kind {
    On(u8, u8),
    Off(u8),
    Program(u8),
}

struct ChannelEvent {
    tick: u64,
    channel: u8,
    kind: Kind,
}

struct RawTrack {
    events: Vec<ChannelEvent>,
    end_tick: u64,
}

fn parse_track(r: &mut Reader<'_>, end: usize, tempos: &mut Vec<(u64, u32)>) -> Result<RawTrack, MidiError> {
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut events = Vec::new();
    while r.pos < end {
        tick += u64::from(r.vlq()?);
        let first = r.u8()?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            r.pos -= 1;
            match running {
                Some(s) => s,
                None => return r.err("data byte without running status"),
            }
        };
        match status {
            0xFF => {
                running = None;
                let meta = r.u8()?;
                let len = r.vlq()? as usize;
                let payload = r.take(len)?;
                match meta {
                    0x51 => {
                        if len != 3 {
                            return r.err("tempo event must carry 3 bytes");
                        }
                        let us = u32::from_be_bytes([0, payload[0], payload[1], payload[2]]);
                        if us == 0 {
                            return r.err("zero tempo");
                        }
                        tempos.push((tick, us));
                    }
                    0x2F => {
                        r.pos = end;
                        break;
                    }
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            0x80..=0xEF => {
                running = Some(status);
                let channel = status & 0x0F;
                match status & 0xF0 {
                    0x80 => {
                        let key = r.data()?;
                        r.data()?;
                        events.push(ChannelEvent { tick, channel, kind: Kind::Off(key) });
                    }
                    0x90 => {
                        let key = r.data()?;
                        let vel = r.data()?;
                        let kind = if vel == 0 { Kind::Off(key) } else { Kind::On(key, vel) };
                        events.push(ChannelEvent { tick, channel, kind });
                    }
                    0xC0 => {
                        let p = r.data()?;
                        events.push(ChannelEvent { tick, channel, kind: Kind::Program(p) });
                    }
                    0xD0 => {
                        r.data()?;
                    }
                    _ => {
                        r.data()?;
                        r.data()?;
                    }
                }
            }
            other => {
                r.pos -= 1;
                return r.err(format!("status 0x{other:02X} is not valid in a track"));
            }
        }
    }
    if r.pos > end {
        return Err(MidiError::Malformed {
            offset: end,
            reason: "event runs past end of track chunk".into(),
        });
    }
    Ok(RawTrack { events, end_tick: tick })
}

/// Converts ticks to seconds under a merged tempo map.
struct TempoMap {
    /// (tick, seconds at tick, seconds per tick from here on)
    points: Vec<(u64, f64, f64)>,
}

impl TempoMap {
    fn new(division: u16, mut tempos: Vec<(u64, u32)>) -> Self {
        if division & 0x8000 != 0 {
            let fps = -((division >> 8) as u8 as i8) as f64;
            let fps = if fps == 29.0 { 29.97 } else { fps };
            let tpf = f64::from(division & 0xFF);
            return Self {
                points: vec![(0, 0.0, 1.0 / (fps * tpf))],
            };
        }
        let tpq = f64::from(division);
        tempos.sort_by_key(|&(t, _)| t);
        let mut points = vec![(0u64, 0.0f64, f64::from(DEFAULT_TEMPO_US) * 1e-6 / tpq)];
        for (tick, us) in tempos {
            let &(t0, s0, spt) = points.last().unwrap();
            let sec = s0 + (tick - t0) as f64 * spt;
            let new_spt = f64::from(us) * 1e-6 / tpq;
            if tick == t0 {
                points.last_mut().unwrap().2 = new_spt;
            } else {
                points.push((tick, sec, new_spt));
            }
        }
        Self { points }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let i = self.points.partition_point(|p| p.0 <= tick) - 1;
        let (t0, s0, spt) = self.points[i];
        s0 + (tick - t0) as f64 * spt
    }
}

/// Parses an SMF type 0 or 1 file into one note list per
/// (track, channel, program), dropping the percussion channel.
pub fn parse_smf(bytes: &[u8]) -> Result<Vec<ProgramTrack>, MidiError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"MThd" {
        return Err(MidiError::Malformed { offset: 0, reason: "missing MThd header".into() });
    }
    let hlen = r.u32()? as usize;
    if hlen < 6 {
        return r.err("header chunk shorter than 6 bytes");
    }
    let header_end = r.pos + hlen;
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let division = r.u16()?;
    if format == 2 {
        return Err(MidiError::UnsupportedFormat(2));
    }
    if format > 2 {
        return Err(MidiError::Malformed { offset: 8, reason: format!("unknown SMF format {format}") });
    }
    if division == 0 {
        return Err(MidiError::Malformed { offset: 12, reason: "zero time division".into() });
    }
    if header_end > bytes.len() {
        return r.err("header chunk runs past end of file");
    }
    r.pos = header_end;

    let mut tempos = Vec::new();
    let mut tracks = Vec::new();
    while tracks.len() < ntracks as usize {
        if r.pos >= bytes.len() {
            return r.err(format!("expected {ntracks} tracks, found {}", tracks.len()));
        }
        let id_pos = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let end = r.pos.checked_add(len).filter(|&e| e <= bytes.len());
        let Some(end) = end else {
            return Err(MidiError::Malformed { offset: id_pos, reason: "chunk length past end of file".into() });
        };
        if id == b"MTrk" {
            tracks.push(parse_track(&mut r, end, &mut tempos)?);
        }
        r.pos = end;
    }

    let map = TempoMap::new(division, tempos);
    let song_end = tracks.iter().map(|t| map.seconds(t.end_tick)).fold(0.0, f64::max);

    let mut order: Vec<(usize, u8, u8)> = Vec::new();
    let mut groups: BTreeMap<(usize, u8, u8), Vec<NoteEvent>> = BTreeMap::new();
    for (ti, track) in tracks.iter().enumerate() {
        let mut program = [0u8; 16];
        let mut open: BTreeMap<(u8, u8), (u64, u8, u8)> = BTreeMap::new();
        let mut close = |key: (u8, u8), (on_tick, vel, prog): (u64, u8, u8), off_tick: u64| {
            if off_tick <= on_tick {
                return;
            }
            let (channel, pitch) = key;
            let onset = map.seconds(on_tick);
            let offset = map.seconds(off_tick);
            if offset <= onset {
                return;
            }
            let note = NoteEvent {
                pitch,
                onset_s: onset,
                offset_s: offset,
                velocity: vel.clamp(1, 127),
                program: prog + 1,
            };
            let gk = (ti, channel, prog);
            if !groups.contains_key(&gk) {
                order.push(gk);
            }
            groups.entry(gk).or_default().push(note);
        };
        for ev in &track.events {
            if ev.channel == PERCUSSION_CHANNEL {
                continue;
            }
            match ev.kind {
                Kind::Program(p) => program[ev.channel as usize] = p,
                Kind::On(key, vel) => {
                    if let Some(prev) = open.remove(&(ev.channel, key)) {
                        close((ev.channel, key), prev, ev.tick);
                    }
                    open.insert((ev.channel, key), (ev.tick, vel, program[ev.channel as usize]));
                }
                Kind::Off(key) => {
                    if let Some(prev) = open.remove(&(ev.channel, key)) {
                        close((ev.channel, key), prev, ev.tick);
                    }
                }
            }
        }
        for (key, prev) in std::mem::take(&mut open) {
            close(key, prev, track.end_tick);
        }
    }

    Ok(order
        .into_iter()
        .map(|gk| ProgramTrack {
            program: gk.2 + 1,
            notes: NoteList::new(groups.remove(&gk).unwrap_or_default(), song_end),
        })
        .collect())
}

/// Ticks per quarter note used by [`write_smf`]; at the fixed 120 BPM one
/// tick is 1/960 s.
pub const WRITE_DIVISION: u16 = 480;
const WRITE_TICKS_PER_SECOND: f64 = 960.0;

fn push_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (v & 0x7F) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { stack[i] | 0x80 } else { stack[i] });
    }
}

fn push_chunk(out: &mut Vec<u8>, id: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(id);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
}

/// Serializes note lists as an SMF type 1 file at 120 BPM: a tempo track
/// followed by one track per entry, each on its own non-percussion channel.
pub fn write_smf(tracks: &[ProgramTrack]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut header = Vec::new();
    header.extend_from_slice(&1u16.to_be_bytes());
    header.extend_from_slice(&((tracks.len() + 1) as u16).to_be_bytes());
    header.extend_from_slice(&WRITE_DIVISION.to_be_bytes());
    push_chunk(&mut out, b"MThd", &header);

    let mut tempo = Vec::new();
    push_vlq(&mut tempo, 0);
    tempo.extend_from_slice(&[0xFF, 0x51, 0x03]);
    tempo.extend_from_slice(&DEFAULT_TEMPO_US.to_be_bytes()[1..]);
    push_vlq(&mut tempo, 0);
    tempo.extend_from_slice(&[0xFF, 0x2F, 0x00]);
    push_chunk(&mut out, b"MTrk", &tempo);

    let channels: Vec<u8> = (0..16).filter(|&c| c != PERCUSSION_CHANNEL).collect();
    for (i, track) in tracks.iter().enumerate() {
        let ch = channels[i % channels.len()];
        let to_tick = |s: f64| (s * WRITE_TICKS_PER_SECOND).round() as u64;
        // (tick, 0 = off / 1 = on, pitch, velocity): offs sort first at equal ticks.
        let mut evs: Vec<(u64, u8, u8, u8)> = Vec::new();
        for n in track.notes.notes() {
            evs.push((to_tick(n.onset_s), 1, n.pitch, n.velocity));
            evs.push((to_tick(n.offset_s), 0, n.pitch, 0));
        }
        evs.sort();
        let mut body = Vec::new();
        push_vlq(&mut body, 0);
        body.extend_from_slice(&[0xC0 | ch, track.program.saturating_sub(1).min(127)]);
        let mut last = 0u64;
        for (tick, on, pitch, vel) in evs {
            push_vlq(&mut body, (tick - last) as u32);
            last = tick;
            if on == 1 {
                body.extend_from_slice(&[0x90 | ch, pitch, vel.clamp(1, 127)]);
            } else {
                body.extend_from_slice(&[0x80 | ch, pitch, 0x40]);
            }
        }
        let end_tick = to_tick(track.notes.duration_s()).max(last);
        push_vlq(&mut body, (end_tick - last) as u32);
        body.extend_from_slice(&[0xFF, 0x2F, 0x00]);
        push_chunk(&mut out, b"MTrk", &body);
    }
    out
}

/// A note as seen inside a segment, in segment-local time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicedNote {
    pub note: NoteEvent,
    /// Sounding before the segment start; its onset is clipped to 0.
    pub held_over: bool,
    /// Still sounding at the segment end; its offset is clipped to the end.
    pub continuing: bool,
}

/// Notes of one window `[start_s, start_s + dur_s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_s: f64,
    pub dur_s: f64,
    pub notes: Vec<SlicedNote>,
}

impl Segment {
    pub fn note_list(&self) -> NoteList {
        NoteList::new(self.notes.iter().map(|s| s.note).collect(), self.dur_s)
    }

    pub fn held_over_pitches(&self) -> Vec<u8> {
        let mut p: Vec<u8> = self.notes.iter().filter(|s| s.held_over).map(|s| s.note.pitch).collect();
        p.sort_unstable();
        p.dedup();
        p
    }

    pub fn continuing_pitches(&self) -> Vec<u8> {
        let mut p: Vec<u8> = self.notes.iter().filter(|s| s.continuing).map(|s| s.note.pitch).collect();
        p.sort_unstable();
        p.dedup();
        p
    }
}

/// Notes intersecting `[start_s, start_s + dur_s)`, rebased to the window.
pub fn slice_notes(notes: &NoteList, start_s: f64, dur_s: f64) -> Result<Segment, MidiError> {
    if !(dur_s > 0.0) || !start_s.is_finite() || start_s < 0.0 {
        return Err(MidiError::InvalidSlice(format!("window start {start_s}, duration {dur_s}")));
    }
    let end = start_s + dur_s;
    let mut out = Vec::new();
    for n in notes.notes() {
        if n.onset_s >= end || n.offset_s <= start_s {
            continue;
        }
        let held_over = n.onset_s < start_s;
        let continuing = n.offset_s > end;
        let onset = if held_over { 0.0 } else { n.onset_s - start_s };
        let offset = if continuing { dur_s } else { n.offset_s - start_s };
        if offset <= onset {
            continue;
        }
        out.push(SlicedNote {
            note: NoteEvent { onset_s: onset, offset_s: offset, ..*n },
            held_over,
            continuing,
        });
    }
    out.sort_by(|a, b| note_order(&a.note, &b.note));
    Ok(Segment { start_s, dur_s, notes: out })
}

/// Inverse of consecutive slicing: a pitch continuing out of a segment and
/// held over into the next one is merged into a single note. A continuing
/// note with no matching tie ends at its segment boundary.
pub fn join_segments(segments: &[Segment]) -> NoteList {
    let mut done = Vec::new();
    let mut open: BTreeMap<u8, NoteEvent> = BTreeMap::new();
    let mut end = 0.0f64;
    for seg in segments {
        let mut next_open = BTreeMap::new();
        for s in &seg.notes {
            let onset = seg.start_s + s.note.onset_s;
            let offset = seg.start_s + s.note.offset_s;
            let merged = match (s.held_over, open.remove(&s.note.pitch)) {
                (true, Some(prev)) => NoteEvent { offset_s: offset, ..prev },
                (_, prev) => {
                    if let Some(p) = prev {
                        done.push(p);
                    }
                    NoteEvent { onset_s: onset, offset_s: offset, ..s.note }
                }
            };
            if s.continuing {
                next_open.insert(s.note.pitch, merged);
            } else {
                done.push(merged);
            }
        }
        done.extend(std::mem::take(&mut open).into_values());
        open = next_open;
        end = end.max(seg.start_s + seg.dur_s);
    }
    done.extend(open.into_values());
    NoteList::new(done, end)
}

use proptest::prelude::*;
use synthamt::midi::{join_segments, parse_smf, slice_notes, write_smf, NoteEvent, NoteList, ProgramTrack};

const PROGRAMS: [u8; 5] = [1, 25, 33, 41, 65];

/// Non-overlapping (per pitch) notes with durations of at least 10 ms.
fn notes(program: u8, max_t: f64) -> impl Strategy<Value = Vec<NoteEvent>> {
    prop::collection::vec((0.0..max_t, 0.01f64..1.5, 50u8..=60, 1u8..=127), 0..30).prop_map(move |raw| {
        let mut out: Vec<NoteEvent> = Vec::new();
        for (on, len, pitch, vel) in raw {
            let off = on + len;
            if out.iter().any(|n| n.pitch == pitch && on < n.offset_s + 0.01 && n.onset_s < off + 0.01) {
                continue;
            }
            out.push(NoteEvent::new(pitch, on, off, vel, program).unwrap());
        }
        out
    })
}

fn tracks() -> impl Strategy<Value = Vec<ProgramTrack>> {
    prop::collection::vec(0..PROGRAMS.len(), 1..=4).prop_flat_map(|specs| {
        specs
            .into_iter()
            .map(|p| {
                let program = PROGRAMS[p];
                notes(program, 20.0).prop_map(move |n| ProgramTrack {
                    program,
                    notes: NoteList::new(n, 25.0),
                })
            })
            .collect::<Vec<_>>()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, ..ProptestConfig::default() })]

    #[test]
    fn smf_round_trip_preserves_notes(input in tracks()) {
        let parsed = parse_smf(&write_smf(&input)).unwrap();
        let nonempty: Vec<&ProgramTrack> = input.iter().filter(|t| !t.notes.is_empty()).collect();
        prop_assert_eq!(parsed.len(), nonempty.len());
        let tick = 1.0 / 960.0;
        for (a, b) in nonempty.iter().zip(&parsed) {
            prop_assert_eq!(a.program, b.program);
            prop_assert_eq!(a.notes.len(), b.notes.len());
            // Notes whose onsets fall on one tick may come back in pitch order.
            let key = |n: &&NoteEvent| ((n.onset_s / tick).round() as i64, n.pitch);
            let mut want: Vec<&NoteEvent> = a.notes.notes().iter().collect();
            let mut got: Vec<&NoteEvent> = b.notes.notes().iter().collect();
            want.sort_by_key(key);
            got.sort_by_key(key);
            for (x, y) in want.into_iter().zip(got) {
                prop_assert_eq!((x.pitch, x.velocity, x.program), (y.pitch, y.velocity, y.program));
                prop_assert!((x.onset_s - y.onset_s).abs() <= tick / 2.0 + 1e-9);
                prop_assert!((x.offset_s - y.offset_s).abs() <= tick / 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn slicing_then_joining_is_identity(n in notes(1, 12.0), seg in 0.3f64..4.0) {
        let list = NoteList::new(n, 14.0);
        let count = (list.duration_s() / seg).ceil() as usize;
        let segments: Vec<_> = (0..count).map(|k| slice_notes(&list, k as f64 * seg, seg).unwrap()).collect();
        let joined = join_segments(&segments);
        prop_assert_eq!(joined.len(), list.len());
        for (x, y) in list.notes().iter().zip(joined.notes()) {
            prop_assert_eq!((x.pitch, x.velocity), (y.pitch, y.velocity));
            prop_assert!((x.onset_s - y.onset_s).abs() < 1e-9);
            prop_assert!((x.offset_s - y.offset_s).abs() < 1e-9);
        }
    }

    #[test]
    fn slices_stay_inside_their_window(n in notes(1, 12.0), start in 0.0f64..12.0, dur in 0.1f64..3.0) {
        let seg = slice_notes(&NoteList::new(n, 14.0), start, dur).unwrap();
        for s in &seg.notes {
            prop_assert!(0.0 <= s.note.onset_s && s.note.onset_s < s.note.offset_s && s.note.offset_s <= dur);
            prop_assert_eq!(s.held_over, s.note.onset_s == 0.0 && s.held_over);
        }
    }
}

#[test]
fn percussion_channel_is_ignored() {
    // Format 0, one track: a note on channel 10 (index 9) then one on channel 1.
    let mut f = b"MThd".to_vec();
    f.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
    let body: Vec<u8> = vec![
        0x00, 0x99, 36, 100, 0x60, 0x89, 36, 0, 0x00, 0x90, 60, 90, 0x60, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00,
    ];
    f.extend_from_slice(b"MTrk");
    f.extend_from_slice(&(body.len() as u32).to_be_bytes());
    f.extend_from_slice(&body);
    let tracks = parse_smf(&f).unwrap();
    assert_eq!(tracks.len(), 1);
    assert_eq!(tracks[0].notes.notes()[0].pitch, 60);
    let n = tracks[0].notes.notes()[0];
    assert!((n.onset_s - 0.5).abs() < 1e-12 && (n.offset_s - 1.0).abs() < 1e-12);
}

#[test]
fn truncated_file_reports_offset() {
    let mut bytes = write_smf(&[ProgramTrack {
        program: 1,
        notes: NoteList::new(vec![NoteEvent::plain(60, 0.0, 1.0).unwrap()], 1.0),
    }]);
    bytes.truncate(bytes.len() - 3);
    let err = parse_smf(&bytes).unwrap_err();
    assert!(err.to_string().contains("byte"), "{err}");
}

mod common;

use common::{matching_is_optimal, note_list};
use proptest::prelude::*;
use synthamt::metrics::{evaluate, f_measure, frame_accuracy, match_notes, MatchConfig};
use synthamt::midi::{NoteEvent, NoteList};

proptest! {
    #![proptest_config(ProptestConfig { cases: 1_000, ..ProptestConfig::default() })]

    #[test]
    fn matching_equals_exhaustive_optimum(r in note_list(), e in note_list(), wo in any::<bool>()) {
        if let Err(msg) = matching_is_optimal(&r, &e, wo) {
            prop_assert!(false, "{}", msg);
        }
    }

    #[test]
    fn offset_criterion_never_helps(r in note_list(), e in note_list()) {
        let rep = evaluate(&r, &e, &MatchConfig::default());
        prop_assert!(rep.f <= rep.f_no_offset + 1e-12);
        prop_assert!((0.0..=1.0).contains(&rep.accuracy));
    }

    #[test]
    fn swapping_reference_and_estimate_swaps_precision_and_recall(r in note_list(), e in note_list()) {
        let cfg = MatchConfig::default();
        let a = evaluate(&r, &e, &cfg);
        let b = evaluate(&e, &r, &cfg);
        prop_assert!((a.precision_no_offset - b.recall_no_offset).abs() < 1e-12);
        prop_assert!((a.f_no_offset - b.f_no_offset).abs() < 1e-12);
    }

    #[test]
    fn adding_a_correct_note_never_lowers_f(r in note_list(), e in note_list(), p in 70u8..80) {
        let cfg = MatchConfig::default();
        let before = evaluate(&r, &e, &cfg);
        let extra = NoteEvent::plain(p, 0.5, 0.8).unwrap();
        let add = |l: &NoteList| {
            let mut v = l.notes().to_vec();
            v.push(extra);
            NoteList::new(v, 1.0)
        };
        let after = evaluate(&add(&r), &add(&e), &cfg);
        prop_assert!(after.f >= before.f - 1e-12);
        prop_assert!(after.f_no_offset >= before.f_no_offset - 1e-12);
    }
}

fn one(p: u8, on: f64, off: f64) -> NoteList {
    NoteList::new(vec![NoteEvent::plain(p, on, off).unwrap()], 3.0)
}

#[test]
fn hand_computed_cases() {
    let cfg = MatchConfig::default();
    // Onset 30 ms early is within 50 ms; offset 100 ms late is within 20% of 1 s.
    assert_eq!(match_notes(&one(60, 0.0, 1.0), &one(60, 0.03, 1.10), &cfg, true).len(), 1);
    assert!(match_notes(&one(60, 0.0, 1.0), &one(61, 0.03, 1.10), &cfg, false).is_empty());
    // Exactly 50 ms is still a match; 51 ms is not.
    assert_eq!(match_notes(&one(60, 1.0, 2.0), &one(60, 1.05, 2.0), &cfg, false).len(), 1);
    assert!(match_notes(&one(60, 1.0, 2.0), &one(60, 1.051, 2.0), &cfg, false).is_empty());
    // Short note: offset tolerance falls back to 50 ms.
    assert!(match_notes(&one(60, 0.0, 0.1), &one(60, 0.0, 0.16), &cfg, true).is_empty());
    assert_eq!(match_notes(&one(60, 0.0, 0.1), &one(60, 0.0, 0.16), &cfg, false).len(), 1);

    let close = |a: (f64, f64, f64), b: (f64, f64, f64)| (a.0 - b.0).abs() + (a.1 - b.1).abs() + (a.2 - b.2).abs() < 1e-12;
    assert!(close(f_measure(3, 3, 3), (1.0, 1.0, 1.0)));
    assert!(close(f_measure(0, 4, 0), (0.0, 0.0, 0.0)));
    assert!(close(f_measure(1, 2, 1), (1.0, 0.5, 2.0 / 3.0)));
}

#[test]
fn frame_accuracy_examples() {
    let r = one(60, 0.0, 1.0);
    assert_eq!(frame_accuracy(&r, &r, 0.01, 2.0), 1.0);
    assert_eq!(frame_accuracy(&r, &one(62, 0.0, 1.0), 0.01, 2.0), 0.0);
    let shifted = frame_accuracy(&r, &one(60, 0.5, 1.5), 0.01, 2.0);
    assert!((shifted - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(frame_accuracy(&NoteList::empty(1.0), &NoteList::empty(1.0), 0.01, 1.0), 0.0);
}

/// Greedy smallest-error-first pairs ref 0.05 with est 0.06 and strands the
/// other two notes; the optimum matches both.
#[test]
fn matching_is_not_greedy() {
    let r = NoteList::new(vec![NoteEvent::plain(60, 0.05, 0.5).unwrap(), NoteEvent::plain(60, 0.10, 0.6).unwrap()], 1.0);
    let e = NoteList::new(vec![NoteEvent::plain(60, 0.0, 0.5).unwrap(), NoteEvent::plain(60, 0.06, 0.6).unwrap()], 1.0);
    assert_eq!(match_notes(&r, &e, &MatchConfig::default(), false), vec![(0, 0), (1, 1)]);
}

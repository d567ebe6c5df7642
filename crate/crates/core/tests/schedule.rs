use chainfed::chain::WindowSchedule;
use chainfed::model::LayerSpan;
use proptest::prelude::*;

fn spans(s: &WindowSchedule) -> Vec<(usize, usize)> {
    s.positions().iter().map(|w| (w.lo, w.hi)).collect()
}

#[test]
fn shared_adapter_example() {
    let s = WindowSchedule::new(1, 3, 2).unwrap();
    assert_eq!(spans(&s), vec![(1, 2), (2, 3)]);
}

#[test]
fn wraps_after_the_top() {
    let s = WindowSchedule::new(2, 6, 2).unwrap();
    let rounds: Vec<LayerSpan> = (1..=5).map(|r| s.window_at_round(r)).collect();
    assert_eq!(rounds[4], LayerSpan::new(2, 3));
    assert_eq!(rounds[3], LayerSpan::new(5, 6));
}

#[test]
fn oversized_window_is_a_single_position() {
    let s = WindowSchedule::new(3, 6, 9).unwrap();
    assert_eq!(spans(&s), vec![(3, 6)]);
    assert_eq!(s.window_at_round(17), LayerSpan::new(3, 6));
}

#[test]
fn invalid_arguments() {
    assert!(WindowSchedule::new(0, 4, 2).is_err());
    assert!(WindowSchedule::new(5, 4, 2).is_err());
    assert!(WindowSchedule::new(1, 4, 0).is_err());
}

proptest! {
    #[test]
    fn cycle_trains_every_layer(l in 1usize..16, start in 1usize..16, q in 1usize..18) {
        prop_assume!(start <= l);
        let s = WindowSchedule::new(start, l, q).unwrap();
        let mut hits = vec![0usize; l + 1];
        for r in 1..=s.cycle_len() {
            for i in s.window_at_round(r).layers() {
                hits[i] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate().skip(1) {
            if i < start {
                prop_assert_eq!(h, 0);
            } else {
                prop_assert!(h >= 1);
            }
        }
        // interior layers act as conduits between neighbouring windows
        if q >= 2 && s.cycle_len() >= 2 {
            for i in start + 1..l {
                prop_assert!(hits[i] >= 2, "layer {} trained {} times", i, hits[i]);
            }
        }
    }

    #[test]
    fn windows_advance_one_layer(l in 2usize..16, q in 1usize..8) {
        let s = WindowSchedule::new(1, l, q).unwrap();
        for w in s.positions().windows(2) {
            prop_assert_eq!(w[1].lo, w[0].lo + 1);
            prop_assert!(w[1].hi <= l);
        }
        prop_assert_eq!(s.positions().last().unwrap().hi, l);
    }
}

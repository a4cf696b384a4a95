use mvscan_nn::{Tape, Tensor};
use proptest::prelude::*;

fn rows(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-50.0..50.0f64, r * c)))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c, data) in rows(5, 7)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![r, c], data).unwrap());
        let s = tape.softmax(x);
        for row in tape.value(s).data().chunks(c) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_axis0_ignores_row_order((r, c, data) in rows(6, 5), shift in 0usize..6) {
        let mut rotated = data.clone();
        rotated.rotate_left((shift % r) * c);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![r, c], data).unwrap());
        let b = tape.constant(Tensor::new(vec![r, c], rotated).unwrap());
        let (ma, mb) = (tape.max_axis0(a).unwrap(), tape.max_axis0(b).unwrap());
        prop_assert_eq!(tape.value(ma).data(), tape.value(mb).data());
    }

    #[test]
    fn avg_pool_keeps_constants(v in -5.0..5.0f64, k in 1usize..4, cells in 1usize..4) {
        let side = k * cells;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, side, side], v));
        let p = tape.avg_pool2d(x, k).unwrap();
        prop_assert_eq!(tape.shape(p), &[1, 1, cells, cells]);
        prop_assert!(tape.value(p).data().iter().all(|&y| (y - v).abs() < 1e-12));
    }
}

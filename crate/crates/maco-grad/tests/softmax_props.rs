use maco_grad::{Tape, Tensor};
use proptest::prelude::*;

proptest! {
    /// Feasible rows sum to 1 within 1e-12 and masked entries are exactly 0.
    #[test]
    fn masked_softmax_rows_are_distributions(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        mask_bits in prop::collection::vec(any::<bool>(), 12),
    ) {
        let rows = 3;
        let cols = 4;
        let mut mask = mask_bits.clone();
        for r in 0..rows {
            if !mask[r * cols..(r + 1) * cols].iter().any(|&b| b) {
                mask[r * cols] = true;
            }
        }
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(rows, cols, logits).unwrap()).unwrap();
        let p = tape.masked_softmax(a, &mask).unwrap();
        for r in 0..rows {
            let row = &tape.values(p)[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (j, &v) in row.iter().enumerate() {
                if mask[r * cols + j] {
                    prop_assert!(v >= 0.0);
                } else {
                    prop_assert!(v == 0.0);
                }
            }
        }
    }
}

use proptest::prelude::*;

use vitrecon::vision::{depatchify, patchify, PatchGrid};
use vitrecon::Tensor;

proptest! {
    #[test]
    fn patchify_round_trips(rows in 1usize..4, cols in 1usize..4, p in 1usize..5, c in 1usize..3, seed in any::<u64>()) {
        let (h, w) = (rows * p, cols * p);
        let mut rng = vitrecon::Rng::new(seed);
        let img = Tensor::new(rng.normal_vec(c * h * w, 1.0), &[c, h, w]).unwrap();
        let grid = PatchGrid::new(h, w, p).unwrap();
        let tokens = patchify(&img, &grid).unwrap();
        prop_assert_eq!(tokens.shape(), &[rows * cols, c * p * p]);
        let back = depatchify(&tokens, &grid, c).unwrap();
        prop_assert_eq!(back.data(), img.data());
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-50.0f64..50.0, 1..40), width in 1usize..8) {
        let n = values.len() / width * width;
        prop_assume!(n > 0);
        let t = Tensor::new(values[..n].to_vec(), &[n / width, width]).unwrap();
        let s = t.softmax_last().unwrap();
        for row in s.data().chunks(width) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

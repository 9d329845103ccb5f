use std::sync::Arc;

use proptest::prelude::*;
use specast::grid::{GridField, GridSpec};
use specast::metrics::{climatology, eval_acc, eval_rmse};
use specast::train::{latitude_weights, weighted_rmse_with, LossVariant};

fn grid(m: usize, n: usize) -> Arc<GridSpec> {
    Arc::new(GridSpec::equiangular(vec!["a".into(), "b".into()], m, n).unwrap())
}

fn field_pair() -> impl Strategy<Value = (GridField, GridField, GridField)> {
    (2usize..7, 2usize..9).prop_flat_map(|(m, n)| {
        let len = 2 * m * n;
        (
            prop::collection::vec(-10.0f64..10.0, len),
            prop::collection::vec(-10.0f64..10.0, len),
            prop::collection::vec(-10.0f64..10.0, len),
        )
            .prop_map(move |(a, b, c)| {
                let g = grid(m, n);
                (
                    GridField::new(g.clone(), a).unwrap(),
                    GridField::new(g.clone(), b).unwrap(),
                    GridField::new(g, c).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn latitude_weights_are_symmetric_and_normalized(m in 1usize..40) {
        let g = GridSpec::equiangular(vec!["a".into()], m.max(2), 4).unwrap();
        let w = latitude_weights(&g.lats).unwrap();
        prop_assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let k = w.len();
        for i in 0..k {
            prop_assert!(w.alpha[i] >= 0.0);
            prop_assert!((w.alpha[i] - w.alpha[k - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn rmse_is_invariant_under_longitude_rotation((a, b, _) in field_pair(), shift in 0usize..16) {
        let w = latitude_weights(&a.grid.lats).unwrap();
        for variant in [LossVariant::UnitSum, LossVariant::WeatherbenchNormalized] {
            let r0 = weighted_rmse_with(&a, &b, &w, variant).unwrap();
            let s = shift % a.n_lon();
            let r1 = weighted_rmse_with(&a.roll_lon(s), &b.roll_lon(s), &w, variant).unwrap();
            for (x, y) in r0.iter().zip(&r1) {
                prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
            }
        }
    }

    #[test]
    fn rmse_obeys_triangle_inequality((a, b, c) in field_pair()) {
        let w = latitude_weights(&a.grid.lats).unwrap();
        let ab = eval_rmse(&a, &b, &w).unwrap();
        let bc = eval_rmse(&b, &c, &w).unwrap();
        let ac = eval_rmse(&a, &c, &w).unwrap();
        for v in 0..2 {
            prop_assert!(ac[v] <= ab[v] + bc[v] + 1e-9);
            prop_assert!(ab[v] >= 0.0);
        }
        let zero = eval_rmse(&a, &a, &w).unwrap();
        prop_assert!(zero.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn acc_lies_in_unit_interval((a, b, c) in field_pair()) {
        let w = latitude_weights(&a.grid.lats).unwrap();
        let clim = climatology(&[c]).unwrap();
        for v in 0..2 {
            if let Ok(r) = eval_acc(&a, &b, &clim, &w, v) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r), "{}", r);
            }
            if let Ok(r) = eval_acc(&a, &a, &clim, &w, v) {
                prop_assert!((r - 1.0).abs() < 1e-9);
            }
        }
    }
}

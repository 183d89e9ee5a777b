//! Plan algebra over random plans, run through proptest's runner so the
//! acceptance target can report a single verdict.

use aguit::inference::{apply_plan, ManipulationPlan, StyleLayout, StyleOp};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LAYOUT: StyleLayout = StyleLayout { nz: 8, nd: 3 };
const LEN: usize = 11;

fn op() -> impl Strategy<Value = StyleOp> {
    prop_oneof![
        Just(StyleOp::Hold),
        Just(StyleOp::Reverse),
        Just(StyleOp::Random),
        proptest::collection::vec(-3.0f32..3.0, LEN).prop_map(|r| StyleOp::Replace { reference: Some(r) }),
        (-3.0f32..3.0).prop_map(|v| StyleOp::Value { v }),
    ]
}

fn style() -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-3.0f32..3.0, LEN)
}

fn apply(s: &[f32], p: &ManipulationPlan, seed: u64) -> Vec<f32> {
    apply_plan(s, p, LAYOUT, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Hold identity, Reverse involution, Value override and Replace
/// correctness, each over `cases` random plans and style codes.
pub fn plan_algebra(cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (style(), proptest::collection::vec(op(), LEN), any::<u64>(), -3.0f32..3.0);
    runner
        .run(&strategy, |(s, ops, seed, w)| {
            let plan = ManipulationPlan::new(ops);
            let out = apply(&s, &plan, seed);

            prop_assert_eq!(apply(&s, &ManipulationPlan::hold(LEN), seed), s.clone());

            let reverse = ManipulationPlan::new(
                plan.ops
                    .iter()
                    .map(|o| if matches!(o, StyleOp::Reverse) { StyleOp::Reverse } else { StyleOp::Hold })
                    .collect(),
            );
            prop_assert_eq!(apply(&apply(&s, &reverse, seed), &reverse, seed), s.clone());

            for (i, o) in plan.ops.iter().enumerate() {
                if let StyleOp::Value { .. } = o {
                    let again = ManipulationPlan::single(LEN, i, StyleOp::Value { v: w });
                    let direct = ManipulationPlan::single(LEN, i, StyleOp::Value { v: w });
                    prop_assert_eq!(apply(&out, &again, seed)[i], apply(&s, &direct, seed)[i]);
                    prop_assert_eq!(apply(&out, &again, seed)[i], w);
                }
                if let StyleOp::Replace { reference: Some(r) } = o {
                    prop_assert_eq!(out[i], r[i]);
                }
                if let StyleOp::Hold = o {
                    prop_assert_eq!(out[i], s[i]);
                }
            }
            prop_assert_eq!(apply(&out, &ManipulationPlan::hold(LEN), seed), out.clone());
            Ok(())
        })
        .map_err(|e| e.to_string())
}

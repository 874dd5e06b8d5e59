mod common;

use common::tree_model::{ops, run_sequence, Op};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn random_op_sequences_match_model(seq in ops(40)) {
        run_sequence(&seq).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn move_under_own_descendant_is_rejected() {
    let seq = [
        Op::Add { anchor: 0, child: true, prompt: "a".into() },
        Op::Add { anchor: 1, child: true, prompt: "b".into() },
        Op::Move { target: 1, parent: 2, position: 0 },
    ];
    run_sequence(&seq).unwrap();
}

#[test]
fn duplicate_copies_structure() {
    let seq = [
        Op::Add { anchor: 0, child: true, prompt: "a".into() },
        Op::Add { anchor: 1, child: true, prompt: "b".into() },
        Op::Code { target: 2, code: "x = 1\n".into() },
        Op::Duplicate { target: 1 },
        Op::Edit { target: 3, prompt: "c".into() },
    ];
    run_sequence(&seq).unwrap();
}

mod common;

use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn no_edit_sequence_cuts_a_chip(steps in proptest::collection::vec(step_strategy(), 1..40)) {
        run_edit_sequence(&steps).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn edits_inside_a_chip_are_rejected() {
    let engine = shared_engine();
    let record = knowted::record::PatientRecord::empty("p");
    let note = seeded_note(&engine, &record);
    let doc = note.section(knowted::service::note::Section::Hpi);
    let chip = doc.chips.iter().find(|c| c.end() - c.start() >= 3).expect("a chip");
    let mid = chip.start() + 1;
    for step in [
        Step::Insert { at: mid, text: "x" },
        Step::Delete { a: mid, b: chip.end() + 1 },
        Step::Replace { a: chip.start().saturating_sub(1), b: mid, text: "y" },
    ] {
        let mut n = note.clone();
        assert!(apply_step(&mut n, &engine, &record, &step).is_err(), "{step:?} was accepted");
        assert_eq!(n, note);
    }
}

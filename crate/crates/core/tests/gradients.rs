//! Finite-difference agreement of every primitive adjoint and of the
//! end-to-end backward pass of each model variant.

use gesture_vit::model::Variant;
use gesture_vit::verify::{check_end_to_end, check_primitives, END_TO_END_TOLERANCE, PRIMITIVES, PRIMITIVE_TOLERANCE};

#[test]
fn primitives_pass_on_twenty_seeds() {
    let results = check_primitives(20).unwrap();
    assert_eq!(results.len(), PRIMITIVES.len());
    for r in &results {
        assert_eq!(r.seeds, 20);
        assert_eq!(r.tolerance, PRIMITIVE_TOLERANCE);
        assert!(r.passed(), "{}: {:.3e}", r.name, r.max_rel_error);
    }
}

#[test]
fn every_variant_passes_end_to_end() {
    for v in Variant::ALL {
        let r = check_end_to_end(v, 2).unwrap();
        assert_eq!(r.tolerance, END_TO_END_TOLERANCE);
        assert!(r.passed(), "{}: {:.3e}", v.as_str(), r.max_rel_error);
    }
}

mod common;

use common::{pipeline_gradcheck, primitive_gradchecks, TOL};

#[test]
fn primitives_match_central_differences() {
    for (name, worst) in primitive_gradchecks() {
        assert!(worst < TOL, "{name}: relative error {worst:e}");
    }
}

#[test]
fn joint_pipeline_matches_central_differences() {
    for case in 0..20 {
        let c = pipeline_gradcheck(case, 3);
        assert!(c.coords > 50, "case {case}: only {} coordinates checked", c.coords);
        assert_eq!(c.teacher_grads, 0, "case {case}: teacher received gradients");
        assert!(c.worst < TOL, "case {case}: relative error {:e}", c.worst);
    }
}

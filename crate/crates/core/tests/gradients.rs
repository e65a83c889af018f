use vesselnet_core::nn::gradcheck;

#[test]
fn every_op_matches_central_differences() {
    let checks = gradcheck::check_all(5, 2024).unwrap();
    assert_eq!(checks.len(), gradcheck::OPS.len());
    for c in &checks {
        println!("{:<24} cases={} max_rel_err={:.2e}", c.op, c.cases, c.max_rel_err);
    }
    for c in &checks {
        assert!(c.max_rel_err <= 1e-5, "{} rel err {:.3e} on {:?}", c.op, c.max_rel_err, c.shapes);
    }
}

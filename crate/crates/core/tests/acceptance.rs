use onebit_core::validation::{run_criterion, CriterionReport, ValidationOptions, CRITERIA};

fn report(r: &CriterionReport) {
    println!("{r}");
}

#[test]
fn acceptance_suite() {
    let opts = ValidationOptions::default();
    let mut failed = Vec::new();
    for &(id, _, _) in CRITERIA.iter() {
        let r = run_criterion(id, &opts);
        report(&r);
        if !r.passed {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn tampered_constant_breaks_mse_equality() {
    let r = run_criterion(3, &ValidationOptions { two_over_pi: 0.6 });
    println!("{r}");
    assert!(!r.passed);
}

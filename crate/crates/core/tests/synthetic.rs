use vesselnet_core::metrics::roc_auc;
use vesselnet_core::synth::{frontal_pixel_count, DatasetPlan, DEFAULT_CANVAS};

#[test]
fn frontal_count_alone_separates_classes() {
    let plan = DatasetPlan::new(100, 1.0, 2024, DEFAULT_CANVAS).unwrap();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..plan.len() {
        let s = plan.subject(i).unwrap();
        assert_eq!(s.volume.dims(), DEFAULT_CANVAS);
        assert!(!s.volume.is_empty());
        scores.push(-(frontal_pixel_count(&s.volume) as f64));
        labels.push(s.label);
    }
    let auc = roc_auc(&scores, &labels).unwrap().auc;
    println!("oracle AUC {auc:.4}");
    assert!(auc >= 0.8, "{auc}");
}

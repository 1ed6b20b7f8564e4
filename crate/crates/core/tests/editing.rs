use neurodesc::analyze::AblationSession;
use neurodesc::cnn::{CnnConfig, SmallCnn};
use neurodesc::edit::{
    gen_spurious_dataset, importance_scores, incremental_edit, plan_edit, unit_importance, SpuriousDataset,
    SpuriousDatasetSpec,
};
use neurodesc::model::accuracy;
use neurodesc::{Classifier, UnitId, UnitSet};

fn fixture() -> (SmallCnn, SpuriousDataset) {
    let cnn = SmallCnn::new(
        "edit-fixture",
        CnnConfig {
            input_size: 32,
            conv1_channels: 3,
            conv2_channels: 5,
            classes: 4,
        },
        2,
    )
    .unwrap();
    let data = gen_spurious_dataset(&SpuriousDatasetSpec {
        n_classes: 4,
        train_per_class: 40,
        test_per_class: 15,
        val_fraction: 0.25,
        seed: 8,
        ..SpuriousDatasetSpec::default()
    })
    .unwrap();
    (cnn, data)
}

#[test]
fn curve_rows_match_independent_evaluation_and_session_is_untouched() {
    let (cnn, data) = fixture();
    let mut session = AblationSession::new(&cnn.model_id);
    session.ablate(&cnn, [UnitId::new("conv1", 0)]).unwrap();
    let before = session.zeroed().clone();
    let mut plan = plan_edit(&cnn, &mut session, cnn.all_units()[1..].to_vec(), &data.val).unwrap();
    let curve = incremental_edit(&cnn, &mut session, &mut plan, &data.val, &data.test, 0.0).unwrap();
    assert_eq!(session.zeroed(), &before);
    assert_eq!(curve.steps.len(), plan.order.len() + 1);
    assert_eq!(plan.stop_index, Some(curve.stop_index));
    for step in &curve.steps {
        let mut units = before.clone();
        units.extend(plan.units_at(step.n_ablated));
        assert_eq!(step.val_accuracy, accuracy(&cnn, &data.val, &units).unwrap());
        assert_eq!(step.test_accuracy, accuracy(&cnn, &data.test, &units).unwrap());
    }
    assert_eq!(curve.steps[0].test_accuracy, accuracy(&cnn, &data.test, &before).unwrap());
    assert!(plan.importance.windows(2).all(|w| w[0] <= w[1]));

    let mut replay = plan.clone();
    let again = incremental_edit(&cnn, &mut session, &mut replay, &data.val, &data.test, 0.0).unwrap();
    assert_eq!(again, curve);
}

#[test]
fn importance_is_the_single_unit_drop() {
    let (cnn, data) = fixture();
    let mut session = AblationSession::new(&cnn.model_id);
    session.ablate(&cnn, [UnitId::new("conv2", 1)]).unwrap();
    let units = cnn.all_units();
    let parallel = importance_scores(&cnn, &mut session, &units, &data.val).unwrap();
    let base = accuracy(&cnn, &data.val, session.zeroed()).unwrap();
    for (u, got) in units.iter().zip(&parallel) {
        let mut with = session.zeroed().clone();
        with.insert(u.clone());
        let want = base - accuracy(&cnn, &data.val, &with).unwrap();
        assert_eq!(*got, want, "{u}");
        assert_eq!(unit_importance(&cnn, &mut session, u, &data.val).unwrap(), want);
    }
    assert_eq!(unit_importance(&cnn, &mut session, &UnitId::new("conv2", 1), &data.val).unwrap(), 0.0);
}

#[test]
fn invalid_units_are_rejected_atomically() {
    let (cnn, data) = fixture();
    let mut session = AblationSession::new(&cnn.model_id);
    let bad = [UnitId::new("conv1", 0), UnitId::new("conv2", 99)];
    assert!(session.ablate(&cnn, bad.clone()).is_err());
    assert!(session.zeroed().is_empty());
    assert!(importance_scores(&cnn, &mut session, &bad, &data.val).is_err());
    assert!(plan_edit(&cnn, &mut session, vec![UnitId::new("fc", 0)], &data.val).is_err());
    let other = AblationSession::new("someone-else").accuracy(&cnn, "v", &data.val);
    assert!(other.is_err());
    assert!(cnn.validate_units(&UnitSet::from([UnitId::new("conv2", 4)])).is_ok());
}

mod common;

use auxtune::auxtune::VariantKind;
use common::{aux_error, lm_error, primitive_errors, MODEL_TOL, PRIMITIVE_TOL};

#[test]
fn every_primitive_matches_central_differences_over_ten_seeds() {
    for seed in 0..10 {
        for (name, err) in primitive_errors(seed).unwrap() {
            assert!(err < PRIMITIVE_TOL, "seed {seed} {name}: {err:e}");
        }
    }
}

#[test]
fn tiny_language_model_loss_gradients() {
    for seed in [1, 2, 3] {
        let err = lm_error(seed).unwrap();
        assert!(err < MODEL_TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn auxiliary_pathway_gradients_for_both_variants() {
    for kind in [
        VariantKind::Direct,
        VariantKind::FeatureExtraction { layers: 1 },
    ] {
        let err = aux_error(5, kind).unwrap();
        assert!(err < MODEL_TOL, "{kind:?}: {err:e}");
    }
}

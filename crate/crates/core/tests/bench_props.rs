use igar_core::bench::{build_suite, perturb, validate, BenchmarkSuite, ContradictionType};
use igar_core::metrics::Variant;
use igar_core::tensor::Rng;
use igar_core::world::{feasible, generate_scene, Suite};
use proptest::prelude::*;

fn suite_of(i: u8) -> Suite {
    Suite::ALL[i as usize % 3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_case_is_a_valid_contradiction(s in 0u8..3, seed in any::<u64>()) {
        let b = build_suite(suite_of(s), 4, &ContradictionType::ALL, seed).unwrap();
        prop_assert_eq!(b.cases.len(), 4);
        for case in &b.cases {
            let scene = b.scene(case).unwrap();
            prop_assert!(feasible(scene, &case.normal));
            prop_assert_eq!(case.contradictions.len(), 4);
            for (&v, contra) in &case.contradictions {
                prop_assert!(!feasible(scene, contra));
                let ct = ContradictionType::from_variant(v).unwrap();
                prop_assert!(validate(scene, &case.normal, contra, ct).unwrap().within_bound);
                // attributes and relations only
                prop_assert_eq!(contra.verb(), case.normal.verb());
                prop_assert_eq!(contra.operand().map(|o| o.category), case.normal.operand().map(|o| o.category));
                prop_assert_eq!(contra.target().map(|t| t.category), case.normal.target().map(|t| t.category));
            }
        }
        b.revalidate().unwrap();
    }

    #[test]
    fn v3_is_v1_then_v2_on_the_same_draws(s in 0u8..3, seed in any::<u64>()) {
        let (scene, normal) = generate_scene(suite_of(s), &mut Rng::new(seed));
        let v3 = perturb(&scene, &normal, ContradictionType::V3DualAttributePerturbation, &mut Rng::new(seed ^ 1));
        let mut rng = Rng::new(seed ^ 1);
        let v1 = perturb(&scene, &normal, ContradictionType::V1OperandAttributeSubstitution, &mut rng);
        let v2 = perturb(&scene, &normal, ContradictionType::V2TargetAttributeAugmentation, &mut rng);
        match (v3, v1, v2) {
            (Ok(v3), Ok(v1), Ok(v2)) => {
                prop_assert_eq!(v3.operand(), v1.operand());
                prop_assert_eq!(v3.target(), v2.target());
                prop_assert_eq!(v3.relation(), normal.relation());
            }
            (Err(_), a, b) => prop_assert!(a.is_err() || b.is_err()),
            (Ok(v3), a, b) => prop_assert!(a.is_ok() && b.is_ok(), "V3 `{}` without both parts", v3),
        }
    }

    #[test]
    fn suites_are_byte_reproducible(s in 0u8..3, seed in any::<u64>()) {
        let a = build_suite(suite_of(s), 3, &ContradictionType::ALL, seed).unwrap();
        let b = build_suite(suite_of(s), 3, &ContradictionType::ALL, seed).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
        let back = BenchmarkSuite::from_json(&a.to_json()).unwrap();
        prop_assert_eq!(back.to_json(), a.to_json());
        prop_assert_eq!(back.content_hash(), a.content_hash());
    }
}

#[test]
fn scenes_are_shared_across_variants() {
    let b = build_suite(Suite::Object, 10, &ContradictionType::ALL, 3).unwrap();
    assert_eq!(b.manifest.variants, Variant::CONTRADICTIONS.to_vec());
    for case in &b.cases {
        let scene = b.scene(case).unwrap();
        assert_eq!(scene.content_hash(), case.scene);
    }
}

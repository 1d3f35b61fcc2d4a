//! Contradictory-instruction benchmark: V1–V4 perturbations, validation and
//! suite assembly.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Variant;
use crate::tensor::Rng;
use crate::world::{feasible, generate_scene, Color, Instruction, Relation, Scene, Suite};

pub const GENERATOR_VERSION: &str = "icbench-toy/1";
pub const DEFAULT_CASES: usize = 10;
/// Scene draws allowed per case before giving up.
pub const RETRY_BUDGET: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContradictionType {
    /// Operand colour replaced by one no object of that category has.
    V1OperandAttributeSubstitution,
    /// Colour inserted on the target that no matching location has.
    V2TargetAttributeAugmentation,
    /// V1 followed by V2.
    V3DualAttributePerturbation,
    /// Relation replaced by one the scene cannot realise.
    V4SpatialRelationSubstitution,
}

impl ContradictionType {
    pub const ALL: [ContradictionType; 4] = [
        ContradictionType::V1OperandAttributeSubstitution,
        ContradictionType::V2TargetAttributeAugmentation,
        ContradictionType::V3DualAttributePerturbation,
        ContradictionType::V4SpatialRelationSubstitution,
    ];

    pub fn variant(self) -> Variant {
        match self {
            ContradictionType::V1OperandAttributeSubstitution => Variant::V1,
            ContradictionType::V2TargetAttributeAugmentation => Variant::V2,
            ContradictionType::V3DualAttributePerturbation => Variant::V3,
            ContradictionType::V4SpatialRelationSubstitution => Variant::V4,
        }
    }

    pub fn from_variant(v: Variant) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.variant() == v)
    }
}

impl fmt::Display for ContradictionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.variant())
    }
}

fn inapplicable(ct: ContradictionType, reason: &str) -> Error {
    Error::Inapplicable { variant: ct.to_string(), reason: reason.to_string() }
}

/// Minimal edit that makes a feasible instruction unsatisfiable in `scene`.
pub fn perturb(scene: &Scene, inst: &Instruction, ct: ContradictionType, rng: &mut Rng) -> Result<Instruction> {
    if !feasible(scene, inst) {
        return Err(Error::InvalidInput(format!("`{inst}` is not feasible in the scene")));
    }
    match ct {
        ContradictionType::V1OperandAttributeSubstitution => {
            let op = inst.operand().ok_or_else(|| inapplicable(ct, "no operand clause"))?;
            let current = op.color.ok_or_else(|| inapplicable(ct, "operand has no colour"))?;
            let absent: Vec<Color> = Color::ALL
                .iter()
                .copied()
                .filter(|&c| c != current && !scene.objects.iter().any(|o| o.category == op.category && o.color == c))
                .collect();
            let c = *rng.choose(&absent).ok_or_else(|| inapplicable(ct, "every colour is present"))?;
            inst.with_operand_color(Some(c))
        }
        ContradictionType::V2TargetAttributeAugmentation => {
            let t = inst.target().ok_or_else(|| inapplicable(ct, "no target clause"))?;
            if t.color.is_some() {
                return Err(inapplicable(ct, "target already has a colour"));
            }
            let absent: Vec<Color> = Color::ALL
                .iter()
                .copied()
                .filter(|&c| !scene.locations.iter().any(|l| l.category == t.category && l.color == c))
                .collect();
            let c = *rng.choose(&absent).ok_or_else(|| inapplicable(ct, "every colour is present"))?;
            inst.with_target_color(Some(c))
        }
        ContradictionType::V3DualAttributePerturbation => {
            let v1 = perturb(scene, inst, ContradictionType::V1OperandAttributeSubstitution, rng)?;
            // V1 output is infeasible, so apply the V2 rule directly.
            let t = v1.target().ok_or_else(|| inapplicable(ct, "no target clause"))?;
            let via_v2 = perturb(
                scene,
                &inst.with_target_color(t.color)?,
                ContradictionType::V2TargetAttributeAugmentation,
                rng,
            )?;
            v1.with_target_color(via_v2.target().and_then(|t| t.color))
        }
        ContradictionType::V4SpatialRelationSubstitution => {
            if inst.relation().is_none() {
                return Err(inapplicable(ct, "no relation clause"));
            }
            let bad: Vec<Relation> = Relation::ALL.iter().copied().filter(|&r| !scene.relations.allows(r)).collect();
            let r = *rng.choose(&bad).ok_or_else(|| inapplicable(ct, "every relation is satisfiable"))?;
            inst.with_relation(r)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub normal_feasible: bool,
    pub contra_infeasible: bool,
    pub edit_distance: usize,
    pub within_bound: bool,
}

/// Word-level Levenshtein distance.
pub fn word_edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<&str> = a.split_whitespace().collect();
    let b: Vec<&str> = b.split_whitespace().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn edit_bound_ok(ct: ContradictionType, normal: &str, contra: &str) -> (usize, bool) {
    let d = word_edit_distance(normal, contra);
    let ln = normal.split_whitespace().count();
    let lc = contra.split_whitespace().count();
    let ok = match ct {
        // a single substitution
        ContradictionType::V1OperandAttributeSubstitution | ContradictionType::V4SpatialRelationSubstitution => {
            d == 1 && ln == lc
        }
        // a single insertion
        ContradictionType::V2TargetAttributeAugmentation => d == 1 && lc == ln + 1,
        ContradictionType::V3DualAttributePerturbation => (1..=2).contains(&d),
    };
    (d, ok)
}

/// Checks feasibility of the pair and the variant's edit bound.
pub fn validate(scene: &Scene, normal: &Instruction, contra: &Instruction, ct: ContradictionType) -> Result<ValidationReport> {
    let normal_feasible = feasible(scene, normal);
    let contra_infeasible = !feasible(scene, contra);
    let (edit_distance, within_bound) = edit_bound_ok(ct, &normal.render(), &contra.render());
    let fail = |check: &str, detail: String| Err(Error::InvalidCase { check: check.into(), detail });
    if !normal_feasible {
        return fail("normal-feasible", format!("`{normal}` cannot be satisfied"));
    }
    if !contra_infeasible {
        return fail("contra-infeasible", format!("`{contra}` can be satisfied"));
    }
    if !within_bound {
        return fail("edit-bound", format!("{ct}: `{normal}` -> `{contra}` has word edit distance {edit_distance}"));
    }
    Ok(ValidationReport { normal_feasible, contra_infeasible, edit_distance, within_bound })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    /// Content hash of the shared scene.
    pub scene: String,
    pub normal: Instruction,
    pub contradictions: BTreeMap<Variant, Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub suite: Suite,
    pub seed: u64,
    pub generator_version: String,
    pub cases: usize,
    pub variants: Vec<Variant>,
    pub validation: String,
    /// Rejected scene draws, one line each.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSuite {
    pub manifest: Manifest,
    pub scenes: BTreeMap<String, Scene>,
    pub cases: Vec<Case>,
}

impl BenchmarkSuite {
    pub fn scene(&self, case: &Case) -> Result<&Scene> {
        self.scenes
            .get(&case.scene)
            .ok_or_else(|| Error::InvalidInput(format!("case {} references unknown scene {}", case.id, case.scene)))
    }

    pub fn case(&self, id: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Re-runs every check on every case, including scene hashes.
    pub fn revalidate(&self) -> Result<()> {
        for (hash, scene) in &self.scenes {
            if &scene.content_hash() != hash {
                return Err(Error::InvalidCase { check: "scene-hash".into(), detail: hash.clone() });
            }
        }
        for case in &self.cases {
            let scene = self.scene(case)?;
            for (&v, contra) in &case.contradictions {
                let ct = ContradictionType::from_variant(v)
                    .ok_or_else(|| Error::InvalidCase { check: "variant".into(), detail: format!("{} has {v}", case.id) })?;
                validate(scene, &case.normal, contra, ct)?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("suite serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Hex SHA-256 of the serialised suite.
    pub fn content_hash(&self) -> String {
        crate::world::sha256_hex(self.to_json().as_bytes())
    }
}

fn suite_tag(s: Suite) -> u64 {
    match s {
        Suite::Spatial => 1,
        Suite::Object => 2,
        Suite::Goal => 3,
    }
}

/// Generates `scene_count` validated cases. Output is a pure function of
/// (suite, scene_count, variants, seed, generator version).
pub fn build_suite(suite: Suite, scene_count: usize, variants: &[ContradictionType], seed: u64) -> Result<BenchmarkSuite> {
    if scene_count == 0 {
        return Err(Error::InvalidInput("scene count must be at least 1".into()));
    }
    let mut rng = Rng::new(seed).fork(suite_tag(suite));
    let mut scenes = BTreeMap::new();
    let mut cases = Vec::with_capacity(scene_count);
    let mut notes = Vec::new();
    for n in 0..scene_count {
        let id = format!("{}-{n:03}", suite.as_str().to_lowercase());
        let mut attempt = 0;
        let (scene, normal, contradictions) = loop {
            if attempt == RETRY_BUDGET {
                return Err(Error::GenerationExhausted(RETRY_BUDGET));
            }
            attempt += 1;
            let (scene, normal) = generate_scene(suite, &mut rng);
            match contradict_all(&scene, &normal, variants, &mut rng) {
                Ok(c) => break (scene, normal, c),
                Err(e) => notes.push(format!("{id} attempt {attempt}: {e}")),
            }
        };
        let hash = scene.content_hash();
        scenes.insert(hash.clone(), scene);
        cases.push(Case { id, scene: hash, normal, contradictions });
    }
    let mut vs: Vec<Variant> = variants.iter().map(|c| c.variant()).collect();
    vs.sort();
    vs.dedup();
    Ok(BenchmarkSuite {
        manifest: Manifest {
            suite,
            seed,
            generator_version: GENERATOR_VERSION.to_string(),
            cases: cases.len(),
            variants: vs,
            validation: "passed".into(),
            notes,
        },
        scenes,
        cases,
    })
}

fn contradict_all(
    scene: &Scene,
    normal: &Instruction,
    variants: &[ContradictionType],
    rng: &mut Rng,
) -> Result<BTreeMap<Variant, Instruction>> {
    let mut out = BTreeMap::new();
    for &ct in variants {
        let contra = perturb(scene, normal, ct, rng)?;
        validate(scene, normal, &contra, ct)?;
        out.insert(ct.variant(), contra);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{LocationKind, ObjectKind, RelationTable, SceneLocation, SceneObject, GRID};

    use ContradictionType::*;

    fn scene(objects: &[(ObjectKind, Color)], locations: &[(LocationKind, Color)]) -> Scene {
        let mut cell = (0..16).map(|i| (i / 4, i % 4));
        Scene {
            grid: GRID,
            objects: objects
                .iter()
                .enumerate()
                .map(|(id, &(category, color))| SceneObject {
                    id,
                    category,
                    color,
                    cell: cell.next().unwrap(),
                    saliency: if id == 0 { 0.9 } else { 0.1 },
                })
                .collect(),
            locations: locations
                .iter()
                .enumerate()
                .map(|(id, &(category, color))| SceneLocation { id, category, color, cell: cell.next().unwrap(), saliency: 0.5 })
                .collect(),
            relations: RelationTable::default(),
        }
    }

    /// Fills the scene with every colour except `colors`, so the replacement
    /// colour is forced and the reference examples come out verbatim.
    fn only(colors: &[Color]) -> Vec<(ObjectKind, Color)> {
        Color::ALL.iter().filter(|c| !colors.contains(c)).map(|&c| (ObjectKind::Bowl, c)).collect()
    }

    #[test]
    fn v1_example() {
        // every bowl colour except white is present, so white is the only choice
        let s = scene(&only(&[Color::White]), &[]);
        let i = Instruction::parse("pick up the black bowl").unwrap();
        let out = perturb(&s, &i, V1OperandAttributeSubstitution, &mut Rng::new(0)).unwrap();
        assert_eq!(out.render(), "pick up the white bowl");
        validate(&s, &i, &out, V1OperandAttributeSubstitution).unwrap();
    }

    #[test]
    fn v1_on_black_bowl_only_scene() {
        let s = scene(&[(ObjectKind::Bowl, Color::Black)], &[]);
        let i = Instruction::parse("pick up the black bowl").unwrap();
        let c = Instruction::parse("pick up the white bowl").unwrap();
        let r = validate(&s, &i, &c, V1OperandAttributeSubstitution).unwrap();
        assert_eq!(r.edit_distance, 1);
        for seed in 0..20 {
            let out = perturb(&s, &i, V1OperandAttributeSubstitution, &mut Rng::new(seed)).unwrap();
            assert_ne!(out.operand().unwrap().color, Some(Color::Black));
            assert!(!feasible(&s, &out));
        }
    }

    #[test]
    fn v2_example() {
        let locs: Vec<_> = Color::ALL.iter().filter(|&&c| c != Color::Black).map(|&c| (LocationKind::Plate, c)).collect();
        let mut objs = vec![(ObjectKind::Bowl, Color::Red)];
        objs.truncate(1);
        // four plates exceed the location slots; validate() is not about slot limits
        let s = scene(&objs, &locs);
        let i = Instruction::parse("place it on the plate").unwrap();
        let out = perturb(&s, &i, V2TargetAttributeAugmentation, &mut Rng::new(0)).unwrap();
        assert_eq!(out.render(), "place it on the black plate");
        validate(&s, &i, &out, V2TargetAttributeAugmentation).unwrap();
    }

    #[test]
    fn v4_example() {
        let s = scene(&[(ObjectKind::Block, Color::Red)], &[(LocationKind::Table, Color::White)]);
        let i = Instruction::parse("put the block on the table").unwrap();
        let out = perturb(&s, &i, V4SpatialRelationSubstitution, &mut Rng::new(5)).unwrap();
        assert_eq!(out.render(), "put the block under the table");
        validate(&s, &i, &out, V4SpatialRelationSubstitution).unwrap();
    }

    #[test]
    fn inapplicable_cases() {
        let s = scene(&[(ObjectKind::Block, Color::Red)], &[(LocationKind::Table, Color::White)]);
        let pick = Instruction::parse("pick up the red block").unwrap();
        for ct in [V2TargetAttributeAugmentation, V4SpatialRelationSubstitution, V3DualAttributePerturbation] {
            assert!(matches!(perturb(&s, &pick, ct, &mut Rng::new(0)), Err(Error::Inapplicable { .. })));
        }
        let colourless = Instruction::parse("put the block on the table").unwrap();
        assert!(matches!(
            perturb(&s, &colourless, V1OperandAttributeSubstitution, &mut Rng::new(0)),
            Err(Error::Inapplicable { .. })
        ));
    }

    #[test]
    fn validate_names_failed_check() {
        let s = scene(&[(ObjectKind::Bowl, Color::Black), (ObjectKind::Bowl, Color::White)], &[(LocationKind::Plate, Color::Red)]);
        let i = Instruction::parse("pick up the black bowl").unwrap();
        let c = Instruction::parse("pick up the white bowl").unwrap();
        let err = validate(&s, &i, &c, V1OperandAttributeSubstitution).unwrap_err();
        assert!(matches!(err, Error::InvalidCase { ref check, .. } if check == "contra-infeasible"));

        let i = Instruction::parse("put the black bowl on the plate").unwrap();
        let c = Instruction::parse("put the yellow cup under the red plate").unwrap();
        let err = validate(&s, &i, &c, V1OperandAttributeSubstitution).unwrap_err();
        assert!(matches!(err, Error::InvalidCase { ref check, .. } if check == "edit-bound"));

        let bad = Instruction::parse("pick up the blue bowl").unwrap();
        let err = validate(&s, &bad, &bad, V1OperandAttributeSubstitution).unwrap_err();
        assert!(matches!(err, Error::InvalidCase { ref check, .. } if check == "normal-feasible"));
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(word_edit_distance("a b c", "a b c"), 0);
        assert_eq!(word_edit_distance("a b c", "a x c"), 1);
        assert_eq!(word_edit_distance("a b c", "a b x c"), 1);
        assert_eq!(word_edit_distance("", "a b"), 2);
        assert_eq!(word_edit_distance("put the red mug on the plate", "put the blue mug on the black plate"), 2);
    }

    #[test]
    fn v3_composes_v1_then_v2() {
        for seed in 0..50 {
            let (s, i) = generate_scene(Suite::Goal, &mut Rng::new(seed));
            let mut r1 = Rng::new(seed + 1000);
            let mut r2 = r1.clone();
            let v3 = perturb(&s, &i, V3DualAttributePerturbation, &mut r1).unwrap();
            let a = perturb(&s, &i, V1OperandAttributeSubstitution, &mut r2).unwrap();
            let b = perturb(&s, &i, V2TargetAttributeAugmentation, &mut r2).unwrap();
            assert_eq!(v3, a.with_target_color(b.target().unwrap().color).unwrap());
            assert_eq!(r1.counter(), r2.counter());
        }
    }

    #[test]
    fn perturbation_keeps_verb_and_categories() {
        for suite in Suite::ALL {
            for seed in 0..40 {
                let (s, i) = generate_scene(suite, &mut Rng::new(seed));
                for ct in ContradictionType::ALL {
                    let c = perturb(&s, &i, ct, &mut Rng::new(seed)).unwrap();
                    assert_eq!(c.verb(), i.verb());
                    assert_eq!(c.operand().map(|o| o.category), i.operand().map(|o| o.category));
                    assert_eq!(c.target().map(|t| t.category), i.target().map(|t| t.category));
                }
            }
        }
    }

    #[test]
    fn suites_are_valid_and_reproducible() {
        for suite in Suite::ALL {
            let a = build_suite(suite, DEFAULT_CASES, &ContradictionType::ALL, 42).unwrap();
            let b = build_suite(suite, DEFAULT_CASES, &ContradictionType::ALL, 42).unwrap();
            assert_eq!(a.to_json(), b.to_json());
            assert_eq!(a.cases.len(), DEFAULT_CASES);
            assert!(a.cases.iter().all(|c| c.contradictions.len() == 4));
            a.revalidate().unwrap();
            let back = BenchmarkSuite::from_json(&a.to_json()).unwrap();
            assert_eq!(back, a);
            let c = build_suite(suite, DEFAULT_CASES, &ContradictionType::ALL, 43).unwrap();
            assert_ne!(a.to_json(), c.to_json());
        }
        assert!(build_suite(Suite::Goal, 0, &ContradictionType::ALL, 1).is_err());
    }

    #[test]
    fn tampered_suite_fails_revalidation() {
        let mut s = build_suite(Suite::Object, 2, &ContradictionType::ALL, 7).unwrap();
        let normal = s.cases[0].normal;
        s.cases[0].contradictions.insert(Variant::V1, normal);
        assert!(s.revalidate().is_err());
    }
}

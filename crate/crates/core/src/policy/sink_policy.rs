//! Hand-constructed policy whose action query is dominated by a BOS sink.
//!
//! The residual stream is split into named channels. BOS carries a single
//! large activation on `SINK`; every other token carries a constant on
//! `CONST` that dominates its RMS norm, so pre-norm is close to the
//! identity on the remaining (small) channels.
//!
//! * Layer 1: a role head marks tokens at or after the relation word
//!   (`AFTER`); a second head lets the action query detect a held object.
//! * Layer 2: two gather heads read the operand words and the target words
//!   (plus the relation) into the query. Both put ~95% of their mass on BOS,
//!   ~0.6% on each visual token and ~0.25% on each relevant word, so without
//!   recalibration the gathered attributes are faint.
//! * Layer 3: two pointer heads score object / location slots by
//!   saliency plus an attribute-match term driven by the gathered
//!   attributes, against a BOS "nothing matches" option.
//! * Unembedding: pick the pointed object, or once holding, place on the
//!   pointed location with the requested (else canonical) relation; abstain
//!   when a pointer lands on BOS or the relation is `under`.
//!
//! Faint gathered attributes leave saliency in charge (pick the most salient
//! object whatever the words say). Draining the BOS sink moves ~40% of the
//! gather rows onto the words, and the match term then dominates.

use std::collections::BTreeSet;

use super::model::{forward, Arch, Intervention, PolicySpec};
use super::tokenize::{self as tk, tokenize, MAX_SEQ, VOCAB};
use super::MiniVla;
use crate::error::{Error, Result};
use crate::sink::detect_sinks;
use crate::tensor::Rng;
use crate::world::{
    feasible, generate_scene, rollout, Action, Color, Instruction, LocationDesc, LocationKind, ObjectDesc, ObjectKind,
    Relation, Scene, Suite, Verb, WorldState, DEFAULT_STEP_LIMIT,
};

pub const D: usize = 128;
pub const HEADS: usize = 4;
pub const LAYERS: usize = 3;
const DH: usize = D / HEADS;

/// Magnitude of `CONST` on every non-BOS token.
const C0: f64 = 1000.0;
/// BOS activation on `SINK`; above the default sink threshold of 20.
pub const BOS_SPIKE: f64 = 25.0;

// residual channels
pub const SINK: usize = 0;
const CONST: usize = 1;
const KIND_OBJ: usize = 2;
const KIND_LOC: usize = 3;
const HELD: usize = 4;
const SAL: usize = 5;
const OCOL: usize = 6;
const LCOL: usize = 11;
const OCAT: usize = 16;
const LCAT: usize = 21;
const CANON_ON: usize = 25;
const CANON_IN: usize = 26;
const OSLOT: usize = 27;
const LSLOT: usize = 32;
const WCOL: usize = 35;
const WOBJ: usize = 40;
const WLOC: usize = 45;
const WREL: usize = 49;
const IS_FUNC: usize = 53;
const IS_REL: usize = 54;
const ISQ: usize = 55;
const AFTER: usize = 56;
const G_HELD: usize = 57;
const G_OP_COL: usize = 58;
const G_OP_CAT: usize = 63;
const G_OP_REQ: usize = 68;
const G_TG_COL: usize = 69;
const G_TG_CAT: usize = 74;
const G_TG_REL: usize = 78;
const G_TG_REQ: usize = 82;
const P_OBJ: usize = 83;
const P_OBJ_NULL: usize = 88;
const P_LOC: usize = 89;
const P_LOC_NULL: usize = 92;
const P_CANON_ON: usize = 93;
const P_CANON_IN: usize = 94;
const IS_VERB: usize = 95;

// attention score constants
const ROLE_MARGIN: f64 = 20.0;
const HELD_SCORE: f64 = 20.0;
const HELD_BOS: f64 = 10.0;
const GATHER_BASE: f64 = -30.0;
const GATHER_VISUAL: f64 = 25.0;
const GATHER_WORD: f64 = 24.0;
const GATHER_AFTER: f64 = 40.0;
const GATHER_BLOCK: f64 = -40.0;
/// Lifts the verb above other non-operand words so an operand-less
/// instruction ("place it …") drains onto a value-free token.
const GATHER_VERB: f64 = 34.0;
const PTR_KIND: f64 = 100.0;
const PTR_SAL: f64 = 50.0;
const PTR_MATCH: f64 = 600.0;
const PTR_NULL_SHARE: f64 = 0.5;

// logit constants
const K: f64 = 10.0;
const HOLD: f64 = 6.0 * K;
const ABSTAIN_NULL: f64 = 1.5 * K;
const ABSTAIN_UNDER: f64 = 15.0 * K;
const CANON_BONUS: f64 = 0.5 * K;
const TEXT_REL: f64 = 10.0 * K;

fn scale_of(dim: usize) -> f64 {
    if dim == SINK || dim == CONST {
        C0
    } else {
        1.0
    }
}

/// Column allocator for the hand-written attention weights.
struct Builder {
    spec: PolicySpec,
    qk_next: [[usize; HEADS]; LAYERS],
    v_next: [[usize; HEADS]; LAYERS],
}

impl Builder {
    /// Adds `score += (Σ q_w·q_f) · (Σ k_w·k_f)` to head `h` of layer `l`,
    /// where features are read from the normalised residual (`SINK` and
    /// `CONST` rescaled to 1).
    fn bilinear(&mut self, l: usize, h: usize, q: &[(usize, f64)], k: &[(usize, f64)]) {
        let c = self.qk_next[l][h];
        assert!(c < DH, "layer {l} head {h} out of query/key columns");
        self.qk_next[l][h] += 1;
        let col = h * DH + c;
        let b = &mut self.spec.blocks[l];
        let root = (DH as f64).sqrt();
        for &(dim, w) in q {
            b.wq.set(dim, col, b.wq.get(dim, col) + w * root / scale_of(dim));
        }
        for &(dim, w) in k {
            b.wk.set(dim, col, b.wk.get(dim, col) + w / scale_of(dim));
        }
    }

    /// Copies `Σ w·feature` of attended tokens into channel `to`.
    fn value(&mut self, l: usize, h: usize, from: &[(usize, f64)], to: usize) {
        let c = self.v_next[l][h];
        assert!(c < DH, "layer {l} head {h} out of value columns");
        self.v_next[l][h] += 1;
        let col = h * DH + c;
        let b = &mut self.spec.blocks[l];
        for &(dim, w) in from {
            b.wv.set(dim, col, w / scale_of(dim));
        }
        b.wo.set(col, to, 1.0);
    }
}

fn all_of(base: usize, n: usize, w: f64) -> Vec<(usize, f64)> {
    (0..n).map(|i| (base + i, w)).collect()
}

fn embeddings(spec: &mut PolicySpec) {
    let e = &mut spec.embed;
    e.set(tk::BOS, SINK, BOS_SPIKE);
    e.set(tk::V_OBJ, KIND_OBJ, 1.0);
    e.set(tk::V_LOC, KIND_LOC, 1.0);
    e.set(tk::V_HELD, HELD, 1.0);
    for &c in Color::ALL {
        e.set(tk::v_obj_color(c), OCOL + c.index(), 1.0);
        e.set(tk::v_loc_color(c), LCOL + c.index(), 1.0);
        e.set(tk::w_color(c), WCOL + c.index(), 1.0);
    }
    for &k in ObjectKind::ALL {
        e.set(tk::v_obj_cat(k), OCAT + k.index(), 1.0);
        e.set(tk::w_obj(k), WOBJ + k.index(), 1.0);
    }
    for &k in LocationKind::ALL {
        e.set(tk::v_loc_cat(k), LCAT + k.index(), 1.0);
        let canon = if k.canonical_relation() == Relation::On { CANON_ON } else { CANON_IN };
        e.set(tk::v_loc_cat(k), canon, 1.0);
        e.set(tk::w_loc(k), WLOC + k.index(), 1.0);
    }
    for &r in Relation::ALL {
        e.set(tk::w_rel(r), WREL + r.index(), 1.0);
        e.set(tk::w_rel(r), IS_REL, 1.0);
    }
    e.set(tk::IS_FUNC, IS_FUNC, 1.0);
    for v in [tk::W_PICK, tk::W_PUT, tk::W_PLACE] {
        e.set(v, IS_VERB, 1.0);
    }
    e.set(tk::ACT, ISQ, 1.0);
    spec.sal[SAL] = 1.0;
    for i in 1..MAX_SEQ {
        spec.pos.set(i, CONST, C0);
    }
    for s in 0..crate::world::OBJECT_SLOTS {
        spec.pos.set(1 + s, OSLOT + s, 1.0);
    }
    for s in 0..crate::world::LOCATION_SLOTS {
        spec.pos.set(1 + crate::world::OBJECT_SLOTS + s, LSLOT + s, 1.0);
    }
}

fn layer1(b: &mut Builder) {
    // role: attend to a relation word at or before the token, else BOS
    b.bilinear(0, 0, &[(CONST, 1.0)], &[(CONST, -ROLE_MARGIN), (IS_REL, 2.0 * ROLE_MARGIN)]);
    b.value(0, 0, &[(IS_REL, 1.0)], AFTER);
    // held detector, query token only
    b.bilinear(0, 1, &[(ISQ, 1.0)], &[(HELD, HELD_SCORE), (SINK, HELD_BOS)]);
    b.value(0, 1, &[(HELD, 1.0)], G_HELD);
}

fn layer2(b: &mut Builder) {
    let visual = [(CONST, GATHER_BASE), (KIND_OBJ, GATHER_VISUAL), (KIND_LOC, GATHER_VISUAL)];
    let blocked = [(IS_FUNC, GATHER_BLOCK), (ISQ, GATHER_BLOCK)];

    // operand: colour words before the relation, object words
    let mut k: Vec<(usize, f64)> = visual.to_vec();
    k.extend(all_of(WCOL, 5, GATHER_WORD));
    k.extend(all_of(WOBJ, 5, GATHER_WORD));
    k.push((AFTER, GATHER_BLOCK));
    k.push((IS_VERB, GATHER_VERB));
    k.extend(blocked);
    b.bilinear(1, 0, &[(CONST, 1.0)], &k);
    for i in 0..5 {
        b.value(1, 0, &[(WCOL + i, 1.0)], G_OP_COL + i);
        b.value(1, 0, &[(WOBJ + i, 1.0)], G_OP_CAT + i);
    }
    let mut req = all_of(WCOL, 5, 1.0);
    req.extend(all_of(WOBJ, 5, 1.0));
    b.value(1, 0, &req, G_OP_REQ);

    // target: relation word and everything content-bearing after it
    let late = GATHER_WORD - GATHER_AFTER;
    let mut k: Vec<(usize, f64)> = visual.to_vec();
    k.extend(all_of(WCOL, 5, late));
    k.extend(all_of(WLOC, 4, late));
    k.push((IS_REL, late));
    k.push((AFTER, GATHER_AFTER));
    k.extend(blocked);
    b.bilinear(1, 1, &[(CONST, 1.0)], &k);
    for i in 0..5 {
        b.value(1, 1, &[(WCOL + i, 1.0)], G_TG_COL + i);
    }
    for i in 0..4 {
        b.value(1, 1, &[(WLOC + i, 1.0)], G_TG_CAT + i);
        b.value(1, 1, &[(WREL + i, 1.0)], G_TG_REL + i);
    }
    let mut req = all_of(WCOL, 5, 1.0);
    req.extend(all_of(WLOC, 4, 1.0));
    b.value(1, 1, &req, G_TG_REQ);
}

fn layer3(b: &mut Builder) {
    // objects
    b.bilinear(2, 0, &[(CONST, 1.0)], &[(KIND_OBJ, PTR_KIND), (SAL, PTR_SAL), (SINK, PTR_KIND)]);
    for i in 0..5 {
        b.bilinear(2, 0, &[(G_OP_COL + i, PTR_MATCH)], &[(OCOL + i, 2.0)]);
        b.bilinear(2, 0, &[(G_OP_CAT + i, PTR_MATCH)], &[(OCAT + i, 2.0)]);
    }
    b.bilinear(2, 0, &[(G_OP_REQ, PTR_MATCH)], &[(CONST, -1.0), (SINK, PTR_NULL_SHARE)]);
    for i in 0..5 {
        b.value(2, 0, &[(OSLOT + i, 1.0)], P_OBJ + i);
    }
    b.value(2, 0, &[(SINK, 1.0)], P_OBJ_NULL);

    // locations
    b.bilinear(2, 1, &[(CONST, 1.0)], &[(KIND_LOC, PTR_KIND), (SAL, PTR_SAL), (SINK, PTR_KIND)]);
    for i in 0..5 {
        b.bilinear(2, 1, &[(G_TG_COL + i, PTR_MATCH)], &[(LCOL + i, 2.0)]);
    }
    for i in 0..4 {
        b.bilinear(2, 1, &[(G_TG_CAT + i, PTR_MATCH)], &[(LCAT + i, 2.0)]);
    }
    b.bilinear(2, 1, &[(G_TG_REQ, PTR_MATCH)], &[(CONST, -1.0), (SINK, PTR_NULL_SHARE)]);
    for i in 0..3 {
        b.value(2, 1, &[(LSLOT + i, 1.0)], P_LOC + i);
    }
    b.value(2, 1, &[(CANON_ON, 1.0)], P_CANON_ON);
    b.value(2, 1, &[(CANON_IN, 1.0)], P_CANON_IN);
    b.value(2, 1, &[(SINK, 1.0)], P_LOC_NULL);
}

fn unembedding(spec: &mut PolicySpec) {
    let u = &mut spec.unembed;
    let a = Action::Abstain.index();
    u.set(P_OBJ_NULL, a, ABSTAIN_NULL);
    u.set(P_LOC_NULL, a, ABSTAIN_NULL);
    u.set(G_TG_REL + Relation::Under.index(), a, ABSTAIN_UNDER);
    for i in 0..crate::world::OBJECT_SLOTS {
        let p = Action::Pick(i).index();
        u.set(P_OBJ + i, p, K);
        u.set(G_HELD, p, -HOLD);
    }
    for j in 0..crate::world::LOCATION_SLOTS {
        for &r in Relation::ALL {
            let p = Action::Place(j, r).index();
            u.set(P_LOC + j, p, K);
            u.set(G_TG_REL + r.index(), p, TEXT_REL);
            match r {
                Relation::On => u.set(P_CANON_ON, p, CANON_BONUS),
                Relation::In => u.set(P_CANON_IN, p, CANON_BONUS),
                _ => {}
            }
            u.set(G_HELD, p, HOLD);
            spec.unembed_b[p] = -HOLD / 2.0;
        }
    }
}

fn construct() -> PolicySpec {
    let arch = Arch { layers: LAYERS, heads: HEADS, d: D, vocab: VOCAB, actions: Action::COUNT, max_seq: MAX_SEQ, bos_as_text: true };
    let mut spec = PolicySpec::zeros(arch).expect("valid architecture");
    // gains undo the CONST-dominated RMS so normalised channels ≈ raw channels
    let g = C0 / (D as f64).sqrt();
    for b in &mut spec.blocks {
        b.norm1.fill(g);
        b.norm2.fill(g);
    }
    spec.norm_f.fill(g);
    embeddings(&mut spec);
    let mut b = Builder { spec, qk_next: [[0; HEADS]; LAYERS], v_next: [[0; HEADS]; LAYERS] };
    layer1(&mut b);
    layer2(&mut b);
    layer3(&mut b);
    let mut spec = b.spec;
    unembedding(&mut spec);
    spec
}

/// First action expected with recalibration at default settings: pick an
/// object matching the operand when the whole instruction is satisfiable,
/// otherwise abstain.
fn expected_with_intervention(scene: &Scene, inst: &Instruction, first: Action) -> bool {
    if !feasible(scene, inst) {
        return first == Action::Abstain;
    }
    match first {
        Action::Pick(slot) => match scene.object_slots().get(slot) {
            Some(&o) => inst.operand().map_or(true, |d| d.matches(&scene.objects[o])),
            None => false,
        },
        _ => false,
    }
}

/// Checks the construction contract on one (scene, instruction):
/// (a) BOS is a detected sink in the layer-1 hidden states;
/// (b) without recalibration the first action picks the most salient object;
/// (c) with default recalibration the first action picks a matching object
///     when the instruction is feasible, and abstains otherwise.
/// Feasible put instructions must also complete successfully under (c).
pub fn check_contract(spec: &PolicySpec, scene: &Scene, inst: &Instruction) -> std::result::Result<(), String> {
    let text = inst.render();
    let input = tokenize(scene, &WorldState::new(), &text);
    let modality = spec.modality(&input);
    let plain = forward(spec, &input.tokens, &modality, None).map_err(|e| e.to_string())?;
    let mut iv = Intervention::default();
    // the default layer count exceeds this policy's depth; clamp quietly
    iv.recal.layers = iv.effective_layers(spec.arch.layers);
    let sinks = detect_sinks(&plain.hidden[0], &modality, &iv.sink).map_err(|e| e.to_string())?;
    if !sinks.sinks.contains(&0) {
        return Err(format!("(a) BOS is not a sink for `{text}`"));
    }
    let salient_slot = scene.object_slots().iter().position(|&o| o == scene.most_salient_object()).unwrap();
    if Action::from_index(plain.action) != Some(Action::Pick(salient_slot)) {
        return Err(format!("(b) `{text}`: expected pick({salient_slot}), got {:?}", Action::from_index(plain.action)));
    }
    let with = forward(spec, &input.tokens, &modality, Some(&iv)).map_err(|e| e.to_string())?;
    let first = Action::from_index(with.action).ok_or("bad action index")?;
    if !expected_with_intervention(scene, inst, first) {
        return Err(format!("(c) `{text}` (feasible = {}): got {first}", feasible(scene, inst)));
    }
    if feasible(scene, inst) && inst.verb() != Verb::Pick {
        let policy = MiniVla::new(spec, Some(iv));
        let out = rollout(&policy, scene, inst, inst, DEFAULT_STEP_LIMIT).map_err(|e| e.to_string())?;
        if !out.success {
            return Err(format!("(c) `{text}` is feasible but the episode failed: {:?}", out.actions));
        }
    }
    Ok(())
}

/// Every instruction the templates can produce over the scene's categories,
/// with every colour option and relation. `all_categories` also includes
/// categories absent from the scene.
pub fn probe_grammar(scene: &Scene, all_categories: bool) -> Vec<Instruction> {
    let obj_kinds: BTreeSet<ObjectKind> = if all_categories {
        ObjectKind::ALL.iter().copied().collect()
    } else {
        scene.objects.iter().map(|o| o.category).collect()
    };
    let loc_kinds: BTreeSet<LocationKind> = if all_categories {
        LocationKind::ALL.iter().copied().collect()
    } else {
        scene.locations.iter().map(|l| l.category).collect()
    };
    let colors: Vec<Option<Color>> = std::iter::once(None).chain(Color::ALL.iter().copied().map(Some)).collect();
    let operands: Vec<ObjectDesc> =
        obj_kinds.iter().flat_map(|&category| colors.iter().map(move |&color| ObjectDesc { category, color })).collect();
    let targets: Vec<LocationDesc> =
        loc_kinds.iter().flat_map(|&category| colors.iter().map(move |&color| LocationDesc { category, color })).collect();
    let mut out: Vec<Instruction> = operands.iter().map(|&o| Instruction::pick(o)).collect();
    for &t in &targets {
        for &r in Relation::ALL {
            out.push(Instruction::place(r, t));
            for &o in &operands {
                out.push(Instruction::put(o, r, t));
            }
        }
    }
    out
}

/// Builds the sink policy and verifies its contract on a small probe set
/// drawn with `seed` (one scene per suite, instructions over the scene's
/// categories with every colour option, all relations).
pub fn build_sink_policy(seed: u64) -> Result<PolicySpec> {
    let spec = construct();
    let mut rng = Rng::new(seed);
    for suite in Suite::ALL {
        let (scene, normal) = generate_scene(suite, &mut rng);
        check_contract(&spec, &scene, &normal).map_err(Error::Construction)?;
        let probes = probe_grammar(&scene, false);
        // a deterministic subsample keeps construction fast
        for inst in probes.iter().step_by(7) {
            check_contract(&spec, &scene, inst).map_err(Error::Construction)?;
        }
    }
    Ok(spec)
}

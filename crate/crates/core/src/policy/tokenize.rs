//! Scene + instruction → token bags.
//!
//! Layout: `[BOS][5 object slots][3 location slots][words…][ACT]`. A token is
//! a bag of feature ids plus a saliency scalar; the embedding of a token is
//! the sum of its feature embeddings, `saliency · e_sal` and the positional
//! embedding.

use serde::{Deserialize, Serialize};

use crate::sink::{Modality, ModalityMap};
use crate::world::{Color, LocationKind, ObjectKind, Relation, Scene, WorldState, LOCATION_SLOTS, OBJECT_SLOTS};

pub const BOS: usize = 0;
pub const V_EMPTY: usize = 1;
pub const V_OBJ: usize = 2;
pub const V_LOC: usize = 3;
pub const V_HELD: usize = 4;
const V_OBJ_COLOR: usize = 5;
const V_LOC_COLOR: usize = 10;
const V_OBJ_CAT: usize = 15;
const V_LOC_CAT: usize = 20;
const W_COLOR: usize = 24;
const W_OBJ: usize = 29;
const W_LOC: usize = 34;
const W_REL: usize = 38;
pub const W_PICK: usize = 42;
pub const W_UP: usize = 43;
pub const W_PUT: usize = 44;
pub const W_PLACE: usize = 45;
pub const W_IT: usize = 46;
pub const W_THE: usize = 47;
pub const W_TO: usize = 48;
pub const W_UNK: usize = 49;
/// Extra feature carried by every function word (and UNK).
pub const IS_FUNC: usize = 50;
pub const ACT: usize = 51;
pub const VOCAB: usize = 52;

/// Index of the first word token.
pub const TEXT_START: usize = 1 + OBJECT_SLOTS + LOCATION_SLOTS;
pub const MAX_SEQ: usize = 32;

pub fn v_obj_color(c: Color) -> usize {
    V_OBJ_COLOR + c.index()
}

pub fn v_loc_color(c: Color) -> usize {
    V_LOC_COLOR + c.index()
}

pub fn v_obj_cat(k: ObjectKind) -> usize {
    V_OBJ_CAT + k.index()
}

pub fn v_loc_cat(k: LocationKind) -> usize {
    V_LOC_CAT + k.index()
}

pub fn w_color(c: Color) -> usize {
    W_COLOR + c.index()
}

pub fn w_obj(k: ObjectKind) -> usize {
    W_OBJ + k.index()
}

pub fn w_loc(k: LocationKind) -> usize {
    W_LOC + k.index()
}

/// Relation word id; `NextTo` maps to the word "next".
pub fn w_rel(r: Relation) -> usize {
    W_REL + r.index()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub features: Vec<usize>,
    pub saliency: f64,
}

impl Token {
    fn plain(features: Vec<usize>) -> Self {
        Self { features, saliency: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedInput {
    pub tokens: Vec<Token>,
    pub modality: ModalityMap,
    /// Human-readable label per token, for heatmap sidecars.
    pub labels: Vec<String>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn word_token(w: &str) -> Vec<usize> {
    if let Ok(c) = w.parse::<Color>() {
        return vec![w_color(c)];
    }
    if let Ok(k) = w.parse::<ObjectKind>() {
        return vec![w_obj(k)];
    }
    if let Ok(k) = w.parse::<LocationKind>() {
        return vec![w_loc(k)];
    }
    let id = match w {
        "on" => return vec![w_rel(Relation::On)],
        "under" => return vec![w_rel(Relation::Under)],
        "in" => return vec![w_rel(Relation::In)],
        "next" => return vec![w_rel(Relation::NextTo)],
        "pick" => W_PICK,
        "up" => W_UP,
        "put" => W_PUT,
        "place" => W_PLACE,
        "it" => W_IT,
        "the" => W_THE,
        "to" => W_TO,
        _ => W_UNK,
    };
    vec![id, IS_FUNC]
}

/// Tokenises one decision step. BOS is labelled `Other`; unknown words map
/// to UNK. The visual block depends only on (scene, state), never on text.
pub fn tokenize(scene: &Scene, state: &WorldState, text: &str) -> TokenizedInput {
    let mut tokens = vec![Token::plain(vec![BOS])];
    let mut labels = vec!["BOS".to_string()];
    let mut modality = vec![Modality::Other];

    let objs = scene.object_slots();
    for slot in 0..OBJECT_SLOTS {
        match objs.get(slot) {
            Some(&i) => {
                let o = &scene.objects[i];
                let mut f = vec![V_OBJ, v_obj_color(o.color), v_obj_cat(o.category)];
                if state.held == Some(i) {
                    f.push(V_HELD);
                }
                tokens.push(Token { features: f, saliency: o.saliency });
                labels.push(format!("obj{slot}:{} {}", o.color, o.category));
            }
            None => {
                tokens.push(Token::plain(vec![V_EMPTY]));
                labels.push(format!("obj{slot}:empty"));
            }
        }
        modality.push(Modality::Visual);
    }
    let locs = scene.location_slots();
    for slot in 0..LOCATION_SLOTS {
        match locs.get(slot) {
            Some(&i) => {
                let l = &scene.locations[i];
                tokens.push(Token { features: vec![V_LOC, v_loc_color(l.color), v_loc_cat(l.category)], saliency: l.saliency });
                labels.push(format!("loc{slot}:{} {}", l.color, l.category));
            }
            None => {
                tokens.push(Token::plain(vec![V_EMPTY]));
                labels.push(format!("loc{slot}:empty"));
            }
        }
        modality.push(Modality::Visual);
    }
    for w in text.split_whitespace() {
        let w = w.to_lowercase();
        tokens.push(Token::plain(word_token(&w)));
        labels.push(w);
        modality.push(Modality::Text);
    }
    tokens.push(Token::plain(vec![ACT]));
    labels.push("ACT".into());
    modality.push(Modality::ActionQuery);

    TokenizedInput { tokens, modality: ModalityMap::new(modality), labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{RelationTable, SceneLocation, SceneObject, GRID};

    fn fixture() -> Scene {
        Scene {
            grid: GRID,
            objects: vec![
                SceneObject { id: 0, category: ObjectKind::Bowl, color: Color::Black, cell: (1, 2), saliency: 0.9 },
                SceneObject { id: 1, category: ObjectKind::Block, color: Color::Red, cell: (0, 3), saliency: 0.25 },
                SceneObject { id: 2, category: ObjectKind::Mug, color: Color::White, cell: (3, 0), saliency: 0.5 },
            ],
            locations: vec![SceneLocation { id: 0, category: LocationKind::Plate, color: Color::Blue, cell: (2, 2), saliency: 0.75 }],
            relations: RelationTable::default(),
        }
    }

    #[test]
    fn empty_instruction_has_no_text() {
        let t = tokenize(&fixture(), &WorldState::new(), "");
        assert!(t.modality.text().is_empty());
        assert_eq!(t.len(), TEXT_START + 1);
        assert_eq!(t.modality.action_queries(), vec![TEXT_START]);
    }

    #[test]
    fn counts_visual_and_text() {
        let t = tokenize(&fixture(), &WorldState::new(), "put the black bowl on the plate");
        assert_eq!(t.modality.visual().len(), OBJECT_SLOTS + LOCATION_SLOTS);
        assert_eq!(t.modality.text().len(), 7);
        assert_eq!(t.labels.len(), t.len());
        let five = tokenize(&fixture(), &WorldState::new(), "pick up the black bowl");
        assert_eq!(five.modality.text().len(), 5);
    }

    #[test]
    fn golden_token_ids() {
        let mut st = WorldState::new();
        st.held = Some(2);
        let t = tokenize(&fixture(), &st, "put the Black bowl next to the plate please");
        let ids: Vec<Vec<usize>> = t.tokens.iter().map(|t| t.features.clone()).collect();
        let expected: Vec<Vec<usize>> = vec![
            vec![0],
            vec![2, 7, 17], // red block, first in row-major cell order
            vec![2, 5, 15],
            vec![2, 6, 18, 4], // held white mug
            vec![1],
            vec![1],
            vec![3, 13, 20],
            vec![1],
            vec![1],
            vec![44, 50],
            vec![47, 50],
            vec![24],
            vec![29],
            vec![41],
            vec![48, 50],
            vec![47, 50],
            vec![34],
            vec![49, 50],
            vec![51],
        ];
        assert_eq!(ids, expected);
        let sal: Vec<f64> = t.tokens.iter().map(|t| t.saliency).collect();
        assert_eq!(&sal[..4], &[0.0, 0.25, 0.9, 0.5]);
        assert_eq!(sal[6], 0.75);
    }

    #[test]
    fn visual_block_ignores_text() {
        let s = fixture();
        let a = tokenize(&s, &WorldState::new(), "pick up the black bowl");
        let b = tokenize(&s, &WorldState::new(), "pick up the white bowl");
        assert_eq!(a.tokens[..TEXT_START], b.tokens[..TEXT_START]);
    }
}

//! A small symbolic pick-and-place world: scenes, templated instructions,
//! feasibility, episode rollout and success judging.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const GRID: (usize, usize) = (4, 4);
pub const OBJECT_SLOTS: usize = 5;
pub const LOCATION_SLOTS: usize = 3;
pub const DEFAULT_STEP_LIMIT: usize = 6;

macro_rules! word_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$var => $word),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::Parse(format!("unknown {} `{s}`", stringify!($name))))
            }
        }
    };
}

word_enum!(Color {
    Black => "black",
    White => "white",
    Red => "red",
    Blue => "blue",
    Yellow => "yellow",
});

word_enum!(ObjectKind {
    Bowl => "bowl",
    Bottle => "bottle",
    Block => "block",
    Mug => "mug",
    Cup => "cup",
});

word_enum!(LocationKind {
    Plate => "plate",
    Cabinet => "cabinet",
    Table => "table",
    Drawer => "drawer",
});

word_enum!(
    /// Spatial relation of a placement. `NextTo` renders as two words.
    Relation {
        On => "on",
        Under => "under",
        In => "in",
        NextTo => "next to",
    }
);

impl LocationKind {
    /// The relation a location is normally used with.
    pub fn canonical_relation(self) -> Relation {
        match self {
            LocationKind::Plate | LocationKind::Table => Relation::On,
            LocationKind::Cabinet | LocationKind::Drawer => Relation::In,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Spatial,
    Object,
    Goal,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Spatial, Suite::Object, Suite::Goal];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Spatial => "Spatial",
            Suite::Object => "Object",
            Suite::Goal => "Goal",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub category: ObjectKind,
    pub color: Color,
    pub cell: (usize, usize),
    pub saliency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLocation {
    pub id: usize,
    pub category: LocationKind,
    pub color: Color,
    pub cell: (usize, usize),
    pub saliency: f64,
}

/// Relations a scene can physically realise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTable {
    pub satisfiable: BTreeSet<Relation>,
}

impl Default for RelationTable {
    /// `under` is physically impossible everywhere.
    fn default() -> Self {
        Self {
            satisfiable: [Relation::On, Relation::In, Relation::NextTo].into_iter().collect(),
        }
    }
}

impl RelationTable {
    pub fn allows(&self, r: Relation) -> bool {
        self.satisfiable.contains(&r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: (usize, usize),
    pub objects: Vec<SceneObject>,
    pub locations: Vec<SceneLocation>,
    pub relations: RelationTable,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.objects.is_empty() || self.objects.len() > OBJECT_SLOTS {
            return bad(format!("{} objects (1..={OBJECT_SLOTS} allowed)", self.objects.len()));
        }
        if self.locations.len() > LOCATION_SLOTS {
            return bad(format!("{} locations (at most {LOCATION_SLOTS})", self.locations.len()));
        }
        let mut cells = BTreeSet::new();
        let all_cells = self.objects.iter().map(|o| o.cell).chain(self.locations.iter().map(|l| l.cell));
        for c in all_cells {
            if c.0 >= self.grid.0 || c.1 >= self.grid.1 {
                return bad(format!("cell {c:?} outside {:?} grid", self.grid));
            }
            if !cells.insert(c) {
                return bad(format!("cell {c:?} occupied twice"));
            }
        }
        let sal = self.objects.iter().map(|o| o.saliency).chain(self.locations.iter().map(|l| l.saliency));
        for s in sal {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("saliency {s} outside [0,1]"));
            }
        }
        let max = self.objects.iter().map(|o| o.saliency).fold(f64::MIN, f64::max);
        if self.objects.iter().filter(|o| o.saliency == max).count() != 1 {
            return bad("most salient object is not unique".into());
        }
        Ok(())
    }

    /// Index of the strictly most salient object.
    pub fn most_salient_object(&self) -> usize {
        argmax(self.objects.iter().map(|o| o.saliency))
    }

    pub fn most_salient_location(&self) -> Option<usize> {
        (!self.locations.is_empty()).then(|| argmax(self.locations.iter().map(|l| l.saliency)))
    }

    /// Object indices in slot order (row-major by cell).
    pub fn object_slots(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.objects.len()).collect();
        idx.sort_by_key(|&i| self.objects[i].cell);
        idx
    }

    /// Location indices in slot order (row-major by cell).
    pub fn location_slots(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.locations.len()).collect();
        idx.sort_by_key(|&i| self.locations[i].cell);
        idx
    }

    /// Same scene with every item moved to a fresh random cell.
    pub fn relayout(&self, rng: &mut Rng) -> Scene {
        let mut cells = all_cells(self.grid);
        rng.shuffle(&mut cells);
        let mut out = self.clone();
        let mut it = cells.into_iter();
        for o in &mut out.objects {
            o.cell = it.next().expect("grid large enough");
        }
        for l in &mut out.locations {
            l.cell = it.next().expect("grid large enough");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serialises")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::MIN);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn all_cells(grid: (usize, usize)) -> Vec<(usize, usize)> {
    (0..grid.0).flat_map(|r| (0..grid.1).map(move |c| (r, c))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectDesc {
    pub category: ObjectKind,
    pub color: Option<Color>,
}

impl ObjectDesc {
    pub fn matches(&self, o: &SceneObject) -> bool {
        o.category == self.category && self.color.map_or(true, |c| c == o.color)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocationDesc {
    pub category: LocationKind,
    pub color: Option<Color>,
}

impl LocationDesc {
    pub fn matches(&self, l: &SceneLocation) -> bool {
        l.category == self.category && self.color.map_or(true, |c| c == l.color)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    /// "pick up the [color] object"
    Pick,
    /// "put the [color] object REL the [color] location"
    Put,
    /// "place it REL the [color] location"; the operand is whatever is held.
    Place,
}

/// Structured instruction. Construct through [`Instruction::new`] (or the
/// helpers) so the verb/clause combination is always valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "InstructionDoc", try_from = "InstructionDoc")]
pub struct Instruction {
    verb: Verb,
    operand: Option<ObjectDesc>,
    target: Option<LocationDesc>,
    relation: Option<Relation>,
}

impl Instruction {
    pub fn new(
        verb: Verb,
        operand: Option<ObjectDesc>,
        target: Option<LocationDesc>,
        relation: Option<Relation>,
    ) -> Result<Self> {
        let ok = match verb {
            Verb::Pick => operand.is_some() && target.is_none() && relation.is_none(),
            Verb::Put => operand.is_some() && target.is_some() && relation.is_some(),
            Verb::Place => operand.is_none() && target.is_some() && relation.is_some(),
        };
        if !ok {
            return Err(Error::InvalidInput(format!("clauses do not fit verb {verb:?}")));
        }
        Ok(Self { verb, operand, target, relation })
    }

    pub fn pick(operand: ObjectDesc) -> Self {
        Self::new(Verb::Pick, Some(operand), None, None).expect("valid pick")
    }

    pub fn put(operand: ObjectDesc, relation: Relation, target: LocationDesc) -> Self {
        Self::new(Verb::Put, Some(operand), Some(target), Some(relation)).expect("valid put")
    }

    pub fn place(relation: Relation, target: LocationDesc) -> Self {
        Self::new(Verb::Place, None, Some(target), Some(relation)).expect("valid place")
    }

    pub fn verb(&self) -> Verb {
        self.verb
    }

    pub fn operand(&self) -> Option<ObjectDesc> {
        self.operand
    }

    pub fn target(&self) -> Option<LocationDesc> {
        self.target
    }

    pub fn relation(&self) -> Option<Relation> {
        self.relation
    }

    /// Replaces attribute/relation slots, keeping the verb and categories.
    pub fn with_operand_color(mut self, c: Option<Color>) -> Result<Self> {
        let op = self.operand.as_mut().ok_or_else(|| Error::InvalidInput("no operand".into()))?;
        op.color = c;
        Ok(self)
    }

    pub fn with_target_color(mut self, c: Option<Color>) -> Result<Self> {
        let t = self.target.as_mut().ok_or_else(|| Error::InvalidInput("no target".into()))?;
        t.color = c;
        Ok(self)
    }

    pub fn with_relation(mut self, r: Relation) -> Result<Self> {
        if self.relation.is_none() {
            return Err(Error::InvalidInput("no relation".into()));
        }
        self.relation = Some(r);
        Ok(self)
    }

    pub fn render(&self) -> String {
        let mut w: Vec<&str> = Vec::new();
        match self.verb {
            Verb::Pick => w.extend(["pick", "up"]),
            Verb::Put => w.push("put"),
            Verb::Place => w.extend(["place", "it"]),
        }
        if let Some(op) = self.operand {
            w.push("the");
            if let Some(c) = op.color {
                w.push(c.as_str());
            }
            w.push(op.category.as_str());
        }
        if let (Some(r), Some(t)) = (self.relation, self.target) {
            w.push(r.as_str());
            w.push("the");
            if let Some(c) = t.color {
                w.push(c.as_str());
            }
            w.push(t.category.as_str());
        }
        w.join(" ")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut p = Parser { words: &words, pos: 0 };
        let inst = match p.next()? {
            "pick" => {
                p.expect("up")?;
                Instruction::pick(p.object()?)
            }
            "put" => {
                let op = p.object()?;
                let r = p.relation()?;
                Instruction::put(op, r, p.location()?)
            }
            "place" => {
                p.expect("it")?;
                let r = p.relation()?;
                Instruction::place(r, p.location()?)
            }
            w => return Err(Error::Parse(format!("unknown verb `{w}`"))),
        };
        if p.pos != words.len() {
            return Err(Error::Parse(format!("trailing words in `{text}`")));
        }
        Ok(inst)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

struct Parser<'a> {
    words: &'a [&'a str],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let w = self.words.get(self.pos).ok_or_else(|| Error::Parse("unexpected end of instruction".into()))?;
        self.pos += 1;
        Ok(w)
    }

    fn peek(&self) -> Option<&'a str> {
        self.words.get(self.pos).copied()
    }

    fn expect(&mut self, w: &str) -> Result<()> {
        let got = self.next()?;
        if got != w {
            return Err(Error::Parse(format!("expected `{w}`, found `{got}`")));
        }
        Ok(())
    }

    fn color(&mut self) -> Option<Color> {
        let c = self.peek()?.parse().ok()?;
        self.pos += 1;
        Some(c)
    }

    fn object(&mut self) -> Result<ObjectDesc> {
        self.expect("the")?;
        let color = self.color();
        let category = self.next()?.parse()?;
        Ok(ObjectDesc { category, color })
    }

    fn location(&mut self) -> Result<LocationDesc> {
        self.expect("the")?;
        let color = self.color();
        let category = self.next()?.parse()?;
        Ok(LocationDesc { category, color })
    }

    fn relation(&mut self) -> Result<Relation> {
        match self.next()? {
            "next" => {
                self.expect("to")?;
                Ok(Relation::NextTo)
            }
            w => w.parse(),
        }
    }
}

/// Serialised form: structured fields plus the rendered surface text.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstructionDoc {
    verb: Verb,
    operand: Option<ObjectDesc>,
    target: Option<LocationDesc>,
    relation: Option<Relation>,
    text: String,
}

impl From<Instruction> for InstructionDoc {
    fn from(i: Instruction) -> Self {
        Self {
            verb: i.verb,
            operand: i.operand,
            target: i.target,
            relation: i.relation,
            text: i.render(),
        }
    }
}

impl TryFrom<InstructionDoc> for Instruction {
    type Error = Error;

    fn try_from(d: InstructionDoc) -> Result<Self> {
        let i = Instruction::new(d.verb, d.operand, d.target, d.relation)?;
        if Instruction::parse(&d.text)? != i {
            return Err(Error::Parse(format!("text `{}` disagrees with structured form", d.text)));
        }
        Ok(i)
    }
}

/// True iff every clause of the instruction can be bound in the scene.
pub fn feasible(scene: &Scene, inst: &Instruction) -> bool {
    let operand_ok = match inst.operand {
        Some(d) => scene.objects.iter().any(|o| d.matches(o)),
        None => !scene.objects.is_empty(),
    };
    let target_ok = inst.target.map_or(true, |d| scene.locations.iter().any(|l| d.matches(l)));
    let relation_ok = inst.relation.map_or(true, |r| scene.relations.allows(r));
    operand_ok && target_ok && relation_ok
}

/// Discrete action. Slots index the scene's slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Abstain,
    Pick(usize),
    Place(usize, Relation),
}

impl Action {
    pub const COUNT: usize = 1 + OBJECT_SLOTS + LOCATION_SLOTS * 4;

    pub fn index(self) -> usize {
        match self {
            Action::Abstain => 0,
            Action::Pick(i) => 1 + i,
            Action::Place(l, r) => 1 + OBJECT_SLOTS + l * 4 + r.index(),
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        match i {
            0 => Some(Action::Abstain),
            i if i <= OBJECT_SLOTS => Some(Action::Pick(i - 1)),
            i if i < Self::COUNT => {
                let k = i - 1 - OBJECT_SLOTS;
                Some(Action::Place(k / 4, Relation::ALL[k % 4]))
            }
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Abstain => write!(f, "abstain"),
            Action::Pick(i) => write!(f, "pick({i})"),
            Action::Place(l, r) => write!(f, "place({l},{r})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub object: usize,
    pub location: usize,
    pub relation: Relation,
}

/// Mutable episode state over an immutable scene. Indices are scene indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub held: Option<usize>,
    pub placements: Vec<Placement>,
}

impl WorldState {
    pub fn new() -> Self {
        Self { held: None, placements: Vec::new() }
    }

    /// Applies an action; returns false (and leaves the state alone) when it
    /// is not executable.
    pub fn apply(&mut self, scene: &Scene, action: Action) -> bool {
        match action {
            Action::Abstain => false,
            Action::Pick(slot) => {
                let Some(&obj) = scene.object_slots().get(slot) else { return false };
                if self.held.is_some() {
                    return false;
                }
                self.placements.retain(|p| p.object != obj);
                self.held = Some(obj);
                true
            }
            Action::Place(slot, relation) => {
                let Some(&loc) = scene.location_slots().get(slot) else { return false };
                let Some(obj) = self.held else { return false };
                if !scene.relations.allows(relation) {
                    return false;
                }
                self.held = None;
                self.placements.push(Placement { object: obj, location: loc, relation });
                true
            }
        }
    }

    /// Whether the verb's end state has been reached (not whether it was the
    /// right object).
    pub fn terminal_for(&self, verb: Verb) -> bool {
        match verb {
            Verb::Pick => self.held.is_some(),
            Verb::Put | Verb::Place => !self.placements.is_empty(),
        }
    }
}

impl Default for WorldState {
    fn default() -> Self {
        Self::new()
    }
}

/// Success of a final state with respect to an instruction.
pub fn judge(scene: &Scene, state: &WorldState, inst: &Instruction) -> bool {
    let op_ok = |o: usize| inst.operand.map_or(true, |d| d.matches(&scene.objects[o]));
    match inst.verb {
        Verb::Pick => state.held.is_some_and(op_ok),
        Verb::Put | Verb::Place => {
            let (Some(t), Some(r)) = (inst.target, inst.relation) else { return false };
            scene.relations.allows(r)
                && state
                    .placements
                    .iter()
                    .any(|p| op_ok(p.object) && p.relation == r && t.matches(&scene.locations[p.location]))
        }
    }
}

/// What the policy sees at one decision step.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub scene: &'a Scene,
    pub state: &'a WorldState,
    pub text: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    /// Mean IVAR over the action-query positions, when defined.
    pub ivar: Option<f64>,
}

pub trait Policy: Sync {
    fn decide(&self, obs: &Observation<'_>) -> Result<Decision>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Completed,
    Abstained,
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub actions: Vec<Action>,
    pub reason: Termination,
    pub ivar_mean: Option<f64>,
}

/// Closed-loop episode: the policy sees `executed`, success is judged on
/// `judged`.
pub fn rollout(
    policy: &dyn Policy,
    scene: &Scene,
    executed: &Instruction,
    judged: &Instruction,
    step_limit: usize,
) -> Result<EpisodeOutcome> {
    if step_limit == 0 {
        return Err(Error::InvalidInput("step limit must be at least 1".into()));
    }
    let text = executed.render();
    let mut state = WorldState::new();
    let mut actions = Vec::new();
    let mut ivars = Vec::new();
    let mut reason = Termination::StepLimit;
    for _ in 0..step_limit {
        let d = policy.decide(&Observation { scene, state: &state, text: &text })?;
        actions.push(d.action);
        ivars.extend(d.ivar);
        if d.action == Action::Abstain {
            reason = Termination::Abstained;
            break;
        }
        state.apply(scene, d.action);
        if state.terminal_for(executed.verb) {
            reason = Termination::Completed;
            break;
        }
    }
    let success = reason != Termination::Abstained && judge(scene, &state, judged);
    let ivar_mean = (!ivars.is_empty()).then(|| ivars.iter().sum::<f64>() / ivars.len() as f64);
    Ok(EpisodeOutcome { success, actions, reason, ivar_mean })
}

/// Replays an action sequence and judges the final state.
pub fn replay_judge(scene: &Scene, actions: &[Action], judged: &Instruction) -> bool {
    let mut state = WorldState::new();
    for &a in actions {
        if a == Action::Abstain {
            return false;
        }
        state.apply(scene, a);
    }
    judge(scene, &state, judged)
}

/// Random scene plus its Normal instruction. The instructed object is the
/// most salient object and the target is the most salient location.
pub fn generate_scene(suite: Suite, rng: &mut Rng) -> (Scene, Instruction) {
    let (n_obj, n_loc) = match suite {
        Suite::Spatial => (2 + rng.below(2), 2),
        Suite::Object => (3 + rng.below(3), 1 + rng.below(2)),
        Suite::Goal => (2 + rng.below(3), 3),
    };

    let mut loc_kinds: Vec<LocationKind> = match suite {
        Suite::Spatial => {
            let on = *rng.choose(&[LocationKind::Plate, LocationKind::Table]).unwrap();
            let inside = *rng.choose(&[LocationKind::Cabinet, LocationKind::Drawer]).unwrap();
            vec![on, inside]
        }
        _ => {
            let mut all = LocationKind::ALL.to_vec();
            rng.shuffle(&mut all);
            all.truncate(n_loc);
            all
        }
    };
    rng.shuffle(&mut loc_kinds);

    let mut pairs: Vec<(ObjectKind, Color)> = Vec::new();
    let first = (*rng.choose(ObjectKind::ALL).unwrap(), *rng.choose(Color::ALL).unwrap());
    pairs.push(first);
    if suite == Suite::Object {
        // same-category distractor in another colour
        let other: Vec<Color> = Color::ALL.iter().copied().filter(|&c| c != first.1).collect();
        pairs.push((first.0, *rng.choose(&other).unwrap()));
    }
    while pairs.len() < n_obj {
        let p = (*rng.choose(ObjectKind::ALL).unwrap(), *rng.choose(Color::ALL).unwrap());
        let same_cat = pairs.iter().filter(|q| q.0 == p.0).count();
        if !pairs.contains(&p) && same_cat < 3 {
            pairs.push(p);
        }
    }
    rng.shuffle(&mut pairs);
    let instructed = pairs.iter().position(|&p| p == first).unwrap();
    let target = rng.below(loc_kinds.len());

    let mut cells = all_cells(GRID);
    rng.shuffle(&mut cells);
    let mut cells = cells.into_iter();

    let objects = pairs
        .iter()
        .enumerate()
        .map(|(id, &(category, color))| SceneObject {
            id,
            category,
            color,
            cell: cells.next().unwrap(),
            saliency: if id == instructed { rng.uniform(0.8, 1.0) } else { rng.uniform(0.0, 0.5) },
        })
        .collect();
    let locations = loc_kinds
        .iter()
        .enumerate()
        .map(|(id, &category)| SceneLocation {
            id,
            category,
            color: *rng.choose(Color::ALL).unwrap(),
            cell: cells.next().unwrap(),
            saliency: if id == target { rng.uniform(0.8, 1.0) } else { rng.uniform(0.0, 0.5) },
        })
        .collect();

    let scene = Scene { grid: GRID, objects, locations, relations: RelationTable::default() };
    let tk = loc_kinds[target];
    let inst = Instruction::put(
        ObjectDesc { category: first.0, color: Some(first.1) },
        tk.canonical_relation(),
        LocationDesc { category: tk, color: None },
    );
    (scene, inst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(id: usize, category: ObjectKind, color: Color, cell: (usize, usize), saliency: f64) -> SceneObject {
        SceneObject { id, category, color, cell, saliency }
    }

    fn loc(id: usize, category: LocationKind, color: Color, cell: (usize, usize)) -> SceneLocation {
        SceneLocation { id, category, color, cell, saliency: 0.5 }
    }

    fn black_bowl_scene() -> Scene {
        Scene {
            grid: GRID,
            objects: vec![
                obj(0, ObjectKind::Bowl, Color::Black, (0, 0), 0.9),
                obj(1, ObjectKind::Block, Color::Red, (1, 1), 0.2),
            ],
            locations: vec![loc(0, LocationKind::Table, Color::White, (2, 2)), loc(1, LocationKind::Plate, Color::Blue, (3, 3))],
            relations: RelationTable::default(),
        }
    }

    #[test]
    fn round_trips_templates() {
        for t in [
            "pick up the black bowl",
            "pick up the bowl",
            "put the block on the table",
            "put the red mug next to the white drawer",
            "place it on the plate",
            "place it on the black plate",
        ] {
            let i = Instruction::parse(t).unwrap();
            assert_eq!(i.render(), t);
            assert_eq!(Instruction::parse(&i.render()).unwrap(), i);
        }
        assert!(Instruction::parse("put the block on").is_err());
        assert!(Instruction::parse("pick up the plate").is_err());
        assert!(Instruction::parse("").is_err());
    }

    #[test]
    fn instruction_json_carries_text() {
        let i = Instruction::parse("put the red mug in the drawer").unwrap();
        let j = serde_json::to_string(&i).unwrap();
        assert!(j.contains("\"text\":\"put the red mug in the drawer\""));
        assert_eq!(serde_json::from_str::<Instruction>(&j).unwrap(), i);
        let tampered = j.replace("the red mug in", "the blue mug in");
        assert!(serde_json::from_str::<Instruction>(&tampered).is_err());
    }

    #[test]
    fn feasibility_examples() {
        let s = black_bowl_scene();
        assert!(feasible(&s, &Instruction::parse("pick up the black bowl").unwrap()));
        assert!(!feasible(&s, &Instruction::parse("pick up the white bowl").unwrap()));
        assert!(feasible(&s, &Instruction::parse("put the block on the table").unwrap()));
        assert!(!feasible(&s, &Instruction::parse("put the block under the table").unwrap()));
        assert!(feasible(&s, &Instruction::parse("place it on the plate").unwrap()));
        assert!(!feasible(&s, &Instruction::parse("place it on the black plate").unwrap()));
    }

    #[test]
    fn action_index_is_a_bijection() {
        for i in 0..Action::COUNT {
            assert_eq!(Action::from_index(i).unwrap().index(), i);
        }
        assert_eq!(Action::from_index(Action::COUNT), None);
        assert_eq!(Action::COUNT, 18);
    }

    struct Scripted(Vec<Action>);

    impl Policy for Scripted {
        fn decide(&self, obs: &Observation<'_>) -> Result<Decision> {
            let step = obs.state.placements.len() + obs.state.held.is_some() as usize;
            Ok(Decision { action: self.0[step.min(self.0.len() - 1)], ivar: None })
        }
    }

    #[test]
    fn abstaining_policy_fails() {
        let s = black_bowl_scene();
        let i = Instruction::parse("put the black bowl on the table").unwrap();
        let out = rollout(&Scripted(vec![Action::Abstain]), &s, &i, &i, 6).unwrap();
        assert_eq!(out.reason, Termination::Abstained);
        assert!(!out.success);
    }

    #[test]
    fn put_rollout_succeeds_and_replays() {
        let s = black_bowl_scene();
        let i = Instruction::parse("put the black bowl on the table").unwrap();
        let bowl_slot = s.object_slots().iter().position(|&o| o == 0).unwrap();
        let table_slot = s.location_slots().iter().position(|&l| l == 0).unwrap();
        let p = Scripted(vec![Action::Pick(bowl_slot), Action::Place(table_slot, Relation::On)]);
        let out = rollout(&p, &s, &i, &i, 6).unwrap();
        assert_eq!(out.reason, Termination::Completed);
        assert!(out.success);
        assert!(replay_judge(&s, &out.actions, &i));
        // judged against a different instruction, the same actions fail
        let other = Instruction::parse("put the black bowl on the plate").unwrap();
        assert!(!replay_judge(&s, &out.actions, &other));
    }

    #[test]
    fn under_placement_is_not_executable() {
        let s = black_bowl_scene();
        let mut st = WorldState::new();
        assert!(st.apply(&s, Action::Pick(0)));
        assert!(!st.apply(&s, Action::Place(0, Relation::Under)));
        assert!(st.held.is_some());
    }

    #[test]
    fn step_limit_reached() {
        let s = black_bowl_scene();
        let i = Instruction::parse("put the black bowl on the table").unwrap();
        let out = rollout(&Scripted(vec![Action::Pick(4)]), &s, &i, &i, 3).unwrap();
        assert_eq!(out.reason, Termination::StepLimit);
        assert_eq!(out.actions.len(), 3);
        assert!(rollout(&Scripted(vec![Action::Abstain]), &s, &i, &i, 0).is_err());
    }

    #[test]
    fn generated_scenes_hold_their_invariants() {
        for suite in Suite::ALL {
            for seed in 0..200 {
                let (s, i) = generate_scene(suite, &mut Rng::new(seed));
                s.validate().unwrap();
                assert!(feasible(&s, &i));
                assert_eq!(i.verb(), Verb::Put);
                assert!(i.relation().is_some());
                let sal = s.most_salient_object();
                assert!(i.operand().unwrap().matches(&s.objects[sal]));
                let t = i.target().unwrap();
                assert!(t.matches(&s.locations[s.most_salient_location().unwrap()]));
                assert_eq!(s.locations.iter().filter(|l| t.matches(l)).count(), 1);
                assert_eq!(s.objects.iter().filter(|o| i.operand().unwrap().matches(o)).count(), 1);
                let (s2, i2) = generate_scene(suite, &mut Rng::new(seed));
                assert_eq!((s2, i2), (s.clone(), i));
            }
        }
    }

    #[test]
    fn relayout_keeps_content() {
        let (s, _) = generate_scene(Suite::Goal, &mut Rng::new(3));
        let r = s.relayout(&mut Rng::new(99));
        r.validate().unwrap();
        assert_eq!(r.objects.len(), s.objects.len());
        for (a, b) in r.objects.iter().zip(&s.objects) {
            assert_eq!((a.category, a.color, a.saliency), (b.category, b.color, b.saliency));
        }
    }

    #[test]
    fn content_hash_is_stable_and_sensitive() {
        let s = black_bowl_scene();
        assert_eq!(s.content_hash(), s.clone().content_hash());
        assert_eq!(s.content_hash().len(), 64);
        let mut t = s.clone();
        t.objects[0].color = Color::White;
        assert_ne!(s.content_hash(), t.content_hash());
        let back: Scene = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
}

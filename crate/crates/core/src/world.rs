//! Deterministic tabletop gridworld.
//!
//! Objects live in stacks on a `G x G` grid. A single gripper moves one cell
//! per axis per step and grasps or releases the top object of the stack below
//! it. Camera convention: `in_front_of` is the smaller-y neighbour (towards the
//! viewer), `behind` the larger-y neighbour.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{Subtask, SubtaskKind};
use crate::rng;

pub const MIN_GRID: u8 = 5;
pub const MAX_GRID: u8 = 16;
pub const DEFAULT_GRID: u8 = 8;
pub const MAX_OBJECTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPos {
    pub x: i32,
    pub y: i32,
}

impl GridPos {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    pub fn in_bounds(self, grid_size: u8) -> bool {
        let g = grid_size as i32;
        (0..g).contains(&self.x) && (0..g).contains(&self.y)
    }

    pub fn chebyshev(self, other: GridPos) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

impl fmt::Display for GridPos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Cube,
    Sphere,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Cube, Shape::Sphere, Shape::Triangle, Shape::Star];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    Purple,
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Blue, Color::Green, Color::Yellow, Color::Purple];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDef {
    pub id: ObjectId,
    pub shape: Shape,
    pub color: Color,
}

impl ObjectDef {
    /// "red cube"
    pub fn name(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grip {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    PlaceAt,
    PlaceOnTop,
    StackTower,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 3] = [TaskFamily::PlaceAt, TaskFamily::PlaceOnTop, TaskFamily::StackTower];

    fn stream(self) -> u64 {
        match self {
            TaskFamily::PlaceAt => 1,
            TaskFamily::PlaceOnTop => 2,
            TaskFamily::StackTower => 3,
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskFamily::PlaceAt => "place_at",
            TaskFamily::PlaceOnTop => "place_on_top",
            TaskFamily::StackTower => "stack_tower",
        })
    }
}

impl core::str::FromStr for TaskFamily {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "place_at" => Ok(TaskFamily::PlaceAt),
            "place_on_top" => Ok(TaskFamily::PlaceOnTop),
            "stack_tower" => Ok(TaskFamily::StackTower),
            other => Err(WorldError::Config(format!("unknown task family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Behind,
    InFrontOf,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Behind, Relation::InFrontOf];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Relation::LeftOf => (-1, 0),
            Relation::RightOf => (1, 0),
            Relation::InFrontOf => (0, -1),
            Relation::Behind => (0, 1),
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Behind => "behind",
            Relation::InFrontOf => "in front of",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub relation: Option<Relation>,
    /// Bottom first; empty unless the family is `StackTower`.
    pub object_order: Vec<ObjectId>,
    pub subject: ObjectId,
    pub reference: Option<ObjectId>,
    pub n_objects: u8,
    pub text: String,
}

impl TaskSpec {
    pub fn render_text(
        family: TaskFamily,
        relation: Option<Relation>,
        object_order: &[ObjectId],
        subject: ObjectId,
        reference: Option<ObjectId>,
        objects: &[ObjectDef],
    ) -> String {
        let name = |id: ObjectId| {
            objects
                .iter()
                .find(|o| o.id == id)
                .map(ObjectDef::name)
                .unwrap_or_else(|| String::from("unknown"))
        };
        match family {
            TaskFamily::PlaceAt => format!(
                "place the {} {} the {}",
                name(subject),
                relation.map(Relation::phrase).unwrap_or("at"),
                reference.map(name).unwrap_or_default()
            ),
            TaskFamily::PlaceOnTop => format!(
                "place the {} on top of the {}",
                name(subject),
                reference.map(name).unwrap_or_default()
            ),
            TaskFamily::StackTower => {
                let parts: Vec<String> = object_order.iter().map(|&id| format!("the {}", name(id))).collect();
                format!("stack {}", parts.join(" then "))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub dx: i8,
    pub dy: i8,
    pub grip: Grip,
}

impl Action {
    pub fn new(dx: i8, dy: i8, grip: Grip) -> Self {
        debug_assert!((-1..=1).contains(&dx) && (-1..=1).contains(&dy));
        Self { dx, dy, grip }
    }

    pub fn is_valid(&self) -> bool {
        (-1..=1).contains(&self.dx) && (-1..=1).contains(&self.dy)
    }
}

/// One non-empty stack, bottom to top.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stack {
    pub pos: GridPos,
    pub objects: Vec<ObjectId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Stack { pos: GridPos, level: usize },
    Held,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub grid_size: u8,
    /// Non-empty stacks sorted by position.
    pub grid: Vec<Stack>,
    pub gripper_pos: GridPos,
    pub gripper_state: Grip,
    pub held: Option<ObjectId>,
    pub objects: Vec<ObjectDef>,
    pub task: TaskSpec,
    pub step_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub grid_size: u8,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { grid_size: DEFAULT_GRID }
    }
}

impl WorldConfig {
    pub fn validate(&self, n_objects: usize) -> Result<(), WorldError> {
        if !(MIN_GRID..=MAX_GRID).contains(&self.grid_size) {
            return Err(WorldError::Config(format!(
                "grid size {} outside [{MIN_GRID}, {MAX_GRID}]",
                self.grid_size
            )));
        }
        if !(2..=MAX_OBJECTS).contains(&n_objects) {
            return Err(WorldError::Config(format!("n_objects must be 2, 3 or 4, got {n_objects}")));
        }
        let cells = self.grid_size as usize * self.grid_size as usize;
        if cells < n_objects + 1 {
            return Err(WorldError::Config(format!("{cells} cells cannot hold {n_objects} objects and the gripper")));
        }
        Ok(())
    }
}

impl WorldState {
    pub fn object(&self, id: ObjectId) -> Option<&ObjectDef> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn stack_at(&self, pos: GridPos) -> Option<&Stack> {
        self.grid.iter().find(|s| s.pos == pos)
    }

    pub fn stack_height(&self, pos: GridPos) -> usize {
        self.stack_at(pos).map_or(0, |s| s.objects.len())
    }

    pub fn locate(&self, id: ObjectId) -> Option<Location> {
        if self.held == Some(id) {
            return Some(Location::Held);
        }
        self.grid.iter().find_map(|s| {
            s.objects
                .iter()
                .position(|&o| o == id)
                .map(|level| Location::Stack { pos: s.pos, level })
        })
    }

    /// Cell of an object; a held object sits at the gripper.
    pub fn position_of(&self, id: ObjectId) -> Option<GridPos> {
        match self.locate(id)? {
            Location::Held => Some(self.gripper_pos),
            Location::Stack { pos, .. } => Some(pos),
        }
    }

    fn push_onto(&mut self, pos: GridPos, id: ObjectId) {
        match self.grid.binary_search_by(|s| s.pos.cmp(&pos)) {
            Ok(i) => self.grid[i].objects.push(id),
            Err(i) => self.grid.insert(i, Stack { pos, objects: alloc::vec![id] }),
        }
    }

    fn pop_from(&mut self, pos: GridPos) -> Option<ObjectId> {
        let i = self.grid.iter().position(|s| s.pos == pos)?;
        let id = self.grid[i].objects.pop();
        if self.grid[i].objects.is_empty() {
            self.grid.remove(i);
        }
        id
    }

    /// Checks every structural invariant of the state.
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |msg: String| Err(WorldError::Integrity(msg));
        if !self.gripper_pos.in_bounds(self.grid_size) {
            return bad(format!("gripper at {} out of bounds", self.gripper_pos));
        }
        if self.held.is_some() && self.gripper_state != Grip::Closed {
            return bad(String::from("holding an object with an open gripper"));
        }
        let mut seen: Vec<ObjectId> = Vec::new();
        for (i, s) in self.grid.iter().enumerate() {
            if !s.pos.in_bounds(self.grid_size) {
                return bad(format!("stack at {} out of bounds", s.pos));
            }
            if s.objects.is_empty() {
                return bad(format!("empty stack recorded at {}", s.pos));
            }
            if i > 0 && self.grid[i - 1].pos >= s.pos {
                return bad(String::from("stacks not sorted by position"));
            }
            seen.extend(s.objects.iter().copied());
        }
        seen.extend(self.held);
        seen.sort();
        let mut ids: Vec<ObjectId> = self.objects.iter().map(|o| o.id).collect();
        ids.sort();
        if seen != ids {
            return bad(String::from("object ids not conserved across stacks and gripper"));
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                if a.id == b.id || (a.shape == b.shape && a.color == b.color) {
                    return bad(format!("duplicate object {}", a.name()));
                }
            }
        }
        Ok(())
    }
}

/// Fresh seeded scene with a solvable task. Identical arguments give a
/// bit-identical state.
pub fn reset(cfg: &WorldConfig, family: TaskFamily, n_objects: usize, seed: u64) -> Result<WorldState, WorldError> {
    cfg.validate(n_objects)?;
    let mut rng = rng::seeded(seed, family.stream() * 16 + n_objects as u64);
    let g = cfg.grid_size as i32;

    loop {
        let mut kinds: Vec<(Shape, Color)> = Shape::ALL
            .iter()
            .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
            .collect();
        rng::shuffle(&mut rng, &mut kinds);
        let objects: Vec<ObjectDef> = kinds[..n_objects]
            .iter()
            .enumerate()
            .map(|(i, &(shape, color))| ObjectDef { id: ObjectId(i as u32), shape, color })
            .collect();

        let mut cells: Vec<GridPos> = (0..g).flat_map(|y| (0..g).map(move |x| GridPos::new(x, y))).collect();
        rng::shuffle(&mut rng, &mut cells);
        let gripper_pos = cells[n_objects];

        let mut state = WorldState {
            grid_size: cfg.grid_size,
            grid: Vec::new(),
            gripper_pos,
            gripper_state: Grip::Open,
            held: None,
            objects,
            task: TaskSpec {
                family,
                relation: None,
                object_order: Vec::new(),
                subject: ObjectId(0),
                reference: None,
                n_objects: n_objects as u8,
                text: String::new(),
            },
            step_count: 0,
        };
        for (i, &pos) in cells[..n_objects].iter().enumerate() {
            state.push_onto(pos, ObjectId(i as u32));
        }

        let subject = ObjectId(rng::below(&mut rng, n_objects) as u32);
        let mut reference = ObjectId(rng::below(&mut rng, n_objects - 1) as u32);
        if reference >= subject {
            reference.0 += 1;
        }

        let task = match family {
            TaskFamily::PlaceAt => {
                let ref_pos = state.position_of(reference).expect("reference placed");
                let options: Vec<Relation> = Relation::ALL
                    .iter()
                    .copied()
                    .filter(|r| {
                        let (dx, dy) = r.delta();
                        let target = ref_pos.offset(dx, dy);
                        target.in_bounds(cfg.grid_size) && state.stack_height(target) == 0
                    })
                    .collect();
                if options.is_empty() {
                    continue;
                }
                let relation = options[rng::below(&mut rng, options.len())];
                (Some(relation), Vec::new(), subject, Some(reference))
            }
            TaskFamily::PlaceOnTop => (None, Vec::new(), subject, Some(reference)),
            TaskFamily::StackTower => {
                let mut order: Vec<ObjectId> = (0..n_objects as u32).map(ObjectId).collect();
                rng::shuffle(&mut rng, &mut order);
                let (subject, reference) = (order[1], Some(order[0]));
                (None, order, subject, reference)
            }
        };
        let (relation, object_order, subject, reference) = task;
        state.task.text =
            TaskSpec::render_text(family, relation, &object_order, subject, reference, &state.objects);
        state.task.relation = relation;
        state.task.object_order = object_order;
        state.task.subject = subject;
        state.task.reference = reference;

        if !check_success(&state) {
            return Ok(state);
        }
    }
}

/// Applies one action. Motion clamps at the grid edge; an open-to-closed
/// transition over a stack grasps its top, a closed-to-open transition while
/// holding releases onto the stack below.
pub fn step(state: &WorldState, action: Action) -> WorldState {
    let mut next = state.clone();
    let max = state.grid_size as i32 - 1;
    let dx = action.dx.clamp(-1, 1) as i32;
    let dy = action.dy.clamp(-1, 1) as i32;
    next.gripper_pos = GridPos::new(
        (state.gripper_pos.x + dx).clamp(0, max),
        (state.gripper_pos.y + dy).clamp(0, max),
    );
    match (state.gripper_state, action.grip) {
        (Grip::Open, Grip::Closed) => {
            next.gripper_state = Grip::Closed;
            next.held = next.pop_from(next.gripper_pos);
        }
        (Grip::Closed, Grip::Open) => {
            next.gripper_state = Grip::Open;
            if let Some(id) = next.held.take() {
                let pos = next.gripper_pos;
                next.push_onto(pos, id);
            }
        }
        _ => {}
    }
    next.step_count = state.step_count.saturating_add(1);
    next
}

/// The cell where the task's subject must come to rest for `PlaceAt`.
pub fn placement_cell(state: &WorldState, reference: ObjectId, relation: Option<Relation>) -> Option<GridPos> {
    let ref_pos = state.position_of(reference)?;
    let (dx, dy) = relation.map_or((0, 0), Relation::delta);
    Some(ref_pos.offset(dx, dy))
}

pub fn check_success(state: &WorldState) -> bool {
    let task = &state.task;
    match task.family {
        TaskFamily::PlaceAt => {
            let (Some(reference), Some(relation)) = (task.reference, task.relation) else {
                return false;
            };
            match (state.locate(task.subject), state.locate(reference)) {
                (Some(Location::Stack { pos, .. }), Some(Location::Stack { pos: ref_pos, .. })) => {
                    let (dx, dy) = relation.delta();
                    pos == ref_pos.offset(dx, dy)
                }
                _ => false,
            }
        }
        TaskFamily::PlaceOnTop => {
            let Some(reference) = task.reference else {
                return false;
            };
            match (state.locate(task.subject), state.locate(reference)) {
                (Some(Location::Stack { pos, level }), Some(Location::Stack { pos: rp, level: rl })) => {
                    pos == rp && level == rl + 1
                }
                _ => false,
            }
        }
        TaskFamily::StackTower => {
            !task.object_order.is_empty() && state.grid.iter().any(|s| s.objects == task.object_order)
        }
    }
}

/// Goal cell of a moving subtask; `None` for grasp and release subtasks.
pub fn remaining_target(state: &WorldState, subtask: &Subtask) -> Result<Option<GridPos>, WorldError> {
    let dangling = |id: ObjectId| WorldError::Integrity(format!("subtask references unknown object {}", id.0));
    state.object(subtask.subject).ok_or_else(|| dangling(subtask.subject))?;
    match subtask.kind {
        SubtaskKind::MoveTo => Ok(state.position_of(subtask.subject)),
        SubtaskKind::CarryTo => {
            let reference = subtask
                .reference
                .ok_or_else(|| WorldError::Integrity(String::from("carry_to without a reference")))?;
            state.object(reference).ok_or_else(|| dangling(reference))?;
            placement_cell(state, reference, subtask.relation).map(Some).ok_or_else(|| dangling(reference))
        }
        SubtaskKind::PickUp | SubtaskKind::Place => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn obj(id: u32, shape: Shape, color: Color) -> ObjectDef {
        ObjectDef { id: ObjectId(id), shape, color }
    }

    fn scene(stacks: Vec<(GridPos, Vec<u32>)>, gripper: GridPos, task: TaskSpec, n: u32) -> WorldState {
        let objects = (0..n).map(|i| obj(i, Shape::ALL[i as usize % 4], Color::ALL[i as usize])).collect();
        let mut grid: Vec<Stack> = stacks
            .into_iter()
            .map(|(pos, ids)| Stack { pos, objects: ids.into_iter().map(ObjectId).collect() })
            .collect();
        grid.sort_by_key(|s| s.pos);
        WorldState {
            grid_size: 8,
            grid,
            gripper_pos: gripper,
            gripper_state: Grip::Open,
            held: None,
            objects,
            task,
            step_count: 0,
        }
    }

    fn task(family: TaskFamily, relation: Option<Relation>, order: Vec<u32>, subject: u32, reference: Option<u32>) -> TaskSpec {
        TaskSpec {
            family,
            relation,
            object_order: order.into_iter().map(ObjectId).collect(),
            subject: ObjectId(subject),
            reference: reference.map(ObjectId),
            n_objects: 3,
            text: String::new(),
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = reset(&cfg, TaskFamily::PlaceAt, 2, 7).unwrap();
        let b = reset(&cfg, TaskFamily::PlaceAt, 2, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn stack_tower_orders_every_object() {
        let s = reset(&WorldConfig::default(), TaskFamily::StackTower, 4, 0).unwrap();
        assert_eq!(s.objects.len(), 4);
        assert_eq!(s.task.object_order.len(), 4);
        assert!(s.task.text.starts_with("stack the "));
    }

    #[test]
    fn reset_layouts_vary_across_seeds() {
        // Only 64 cells exist, so variety is measured over (subject, reference, gripper) layouts.
        let cfg = WorldConfig::default();
        let mut layouts = Vec::new();
        for seed in 0..100 {
            let s = reset(&cfg, TaskFamily::PlaceAt, 2, seed).unwrap();
            let key = (
                s.position_of(s.task.subject).unwrap(),
                s.position_of(s.task.reference.unwrap()).unwrap(),
                s.gripper_pos,
            );
            if !layouts.contains(&key) {
                layouts.push(key);
            }
        }
        assert!(layouts.len() >= 90, "{} distinct layouts", layouts.len());
    }

    #[test]
    fn reset_rejects_bad_config() {
        let cfg = WorldConfig::default();
        assert!(matches!(reset(&cfg, TaskFamily::PlaceAt, 1, 0), Err(WorldError::Config(_))));
        assert!(matches!(reset(&cfg, TaskFamily::PlaceAt, 5, 0), Err(WorldError::Config(_))));
        let tiny = WorldConfig { grid_size: 4 };
        assert!(reset(&tiny, TaskFamily::PlaceAt, 2, 0).is_err());
    }

    #[test]
    fn reset_never_starts_solved() {
        let cfg = WorldConfig { grid_size: 5 };
        for family in TaskFamily::ALL {
            for n in 2..=4 {
                for seed in 0..50 {
                    let s = reset(&cfg, family, n, seed).unwrap();
                    s.validate().unwrap();
                    assert!(!check_success(&s));
                }
            }
        }
    }

    #[test]
    fn grasp_takes_top_object() {
        let t = task(TaskFamily::PlaceOnTop, None, vec![], 0, Some(1));
        let s = scene(vec![(GridPos::new(2, 2), vec![0]), (GridPos::new(5, 5), vec![1])], GridPos::new(2, 2), t, 2);
        let n = step(&s, Action::new(0, 0, Grip::Closed));
        assert_eq!(n.held, Some(ObjectId(0)));
        assert_eq!(n.stack_height(GridPos::new(2, 2)), 0);
        assert_eq!(n.step_count, 1);
    }

    #[test]
    fn motion_clamps_at_edges() {
        let t = task(TaskFamily::PlaceOnTop, None, vec![], 0, Some(1));
        let s = scene(vec![(GridPos::new(2, 2), vec![0]), (GridPos::new(5, 5), vec![1])], GridPos::new(0, 7), t, 2);
        let n = step(&s, Action::new(-1, 1, Grip::Open));
        assert_eq!(n.gripper_pos, GridPos::new(0, 7));
    }

    #[test]
    fn release_lands_on_stack() {
        let t = task(TaskFamily::PlaceOnTop, None, vec![], 0, Some(1));
        let mut s = scene(vec![(GridPos::new(4, 4), vec![1])], GridPos::new(4, 4), t, 2);
        s.held = Some(ObjectId(0));
        s.gripper_state = Grip::Closed;
        let n = step(&s, Action::new(0, 0, Grip::Open));
        assert_eq!(n.stack_at(GridPos::new(4, 4)).unwrap().objects, vec![ObjectId(1), ObjectId(0)]);
        assert_eq!(n.held, None);
        assert!(check_success(&n));
    }

    #[test]
    fn closing_over_empty_cell_grasps_nothing() {
        let t = task(TaskFamily::PlaceOnTop, None, vec![], 0, Some(1));
        let s = scene(vec![(GridPos::new(2, 2), vec![0]), (GridPos::new(5, 5), vec![1])], GridPos::new(3, 3), t, 2);
        let n = step(&s, Action::new(0, 0, Grip::Closed));
        assert_eq!(n.gripper_state, Grip::Closed);
        assert_eq!(n.held, None);
        n.validate().unwrap();
    }

    #[test]
    fn place_at_success_uses_exact_cell() {
        let t = task(TaskFamily::PlaceAt, Some(Relation::LeftOf), vec![], 0, Some(1));
        let s = scene(vec![(GridPos::new(2, 3), vec![0]), (GridPos::new(3, 3), vec![1])], GridPos::new(6, 6), t.clone(), 2);
        assert!(check_success(&s));
        let s = scene(vec![(GridPos::new(1, 3), vec![0]), (GridPos::new(3, 3), vec![1])], GridPos::new(6, 6), t, 2);
        assert!(!check_success(&s));
        for (rel, cell) in [
            (Relation::RightOf, GridPos::new(4, 3)),
            (Relation::InFrontOf, GridPos::new(3, 2)),
            (Relation::Behind, GridPos::new(3, 4)),
        ] {
            let t = task(TaskFamily::PlaceAt, Some(rel), vec![], 0, Some(1));
            let s = scene(vec![(cell, vec![0]), (GridPos::new(3, 3), vec![1])], GridPos::new(6, 6), t, 2);
            assert!(check_success(&s), "{rel:?}");
        }
    }

    #[test]
    fn held_subject_is_not_success() {
        let t = task(TaskFamily::PlaceAt, Some(Relation::LeftOf), vec![], 0, Some(1));
        let mut s = scene(vec![(GridPos::new(3, 3), vec![1])], GridPos::new(2, 3), t, 2);
        s.held = Some(ObjectId(0));
        s.gripper_state = Grip::Closed;
        assert!(!check_success(&s));
    }

    #[test]
    fn stack_tower_needs_exact_order() {
        let t = task(TaskFamily::StackTower, None, vec![0, 1, 2], 1, Some(0));
        let s = scene(vec![(GridPos::new(1, 1), vec![0, 2, 1])], GridPos::new(6, 6), t.clone(), 3);
        assert!(!check_success(&s));
        let s = scene(vec![(GridPos::new(1, 1), vec![0, 1, 2])], GridPos::new(6, 6), t, 3);
        assert!(check_success(&s));
    }

    #[test]
    fn place_on_top_requires_direct_adjacency() {
        // Enumerate all orders of three objects in one stack: only those with
        // the subject (0) directly above the reference (1) succeed.
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let t = task(TaskFamily::PlaceOnTop, None, vec![], 0, Some(1));
        let mut winners = Vec::new();
        for p in perms {
            let s = scene(vec![(GridPos::new(1, 1), p.to_vec())], GridPos::new(6, 6), t.clone(), 3);
            if check_success(&s) {
                winners.push(p);
            }
        }
        assert_eq!(winners, vec![[1, 0, 2], [2, 1, 0]]);
    }

    #[test]
    fn remaining_target_per_kind() {
        let t = task(TaskFamily::PlaceAt, Some(Relation::LeftOf), vec![], 0, Some(1));
        let s = scene(vec![(GridPos::new(5, 1), vec![0]), (GridPos::new(4, 4), vec![1])], GridPos::new(0, 0), t, 2);
        let mk = |kind| Subtask::new(kind, ObjectId(0), Some(ObjectId(1)), Some(Relation::LeftOf), &s.objects);
        assert_eq!(remaining_target(&s, &mk(SubtaskKind::MoveTo)).unwrap(), Some(GridPos::new(5, 1)));
        assert_eq!(remaining_target(&s, &mk(SubtaskKind::CarryTo)).unwrap(), Some(GridPos::new(3, 4)));
        assert_eq!(remaining_target(&s, &mk(SubtaskKind::PickUp)).unwrap(), None);
        let dangling = Subtask::new(SubtaskKind::MoveTo, ObjectId(9), None, None, &s.objects);
        assert!(matches!(remaining_target(&s, &dangling), Err(WorldError::Integrity(_))));
    }

    fn any_action() -> impl Strategy<Value = Action> {
        (-1i8..=1, -1i8..=1, any::<bool>())
            .prop_map(|(dx, dy, c)| Action::new(dx, dy, if c { Grip::Closed } else { Grip::Open }))
    }

    proptest! {
        #[test]
        fn random_streams_conserve_objects_and_bounds(
            seed in 0u64..500,
            n in 2usize..=4,
            fam in 0usize..3,
            actions in proptest::collection::vec(any_action(), 0..80),
        ) {
            let mut s = reset(&WorldConfig::default(), TaskFamily::ALL[fam], n, seed).unwrap();
            for a in actions {
                s = step(&s, a);
                prop_assert!(s.gripper_pos.in_bounds(s.grid_size));
                prop_assert!(s.validate().is_ok());
            }
        }

        #[test]
        fn step_is_pure(seed in 0u64..200, actions in proptest::collection::vec(any_action(), 1..30)) {
            let s0 = reset(&WorldConfig::default(), TaskFamily::StackTower, 3, seed).unwrap();
            let (mut a, mut b) = (s0.clone(), s0);
            for act in actions {
                a = step(&a, act);
                b = step(&b, act);
            }
            prop_assert_eq!(a, b);
        }

        #[test]
        fn noop_preserves_success_away_from_stacks(
            seed in 0u64..300,
            fam in 0usize..3,
            actions in proptest::collection::vec(any_action(), 0..40),
        ) {
            let mut s = reset(&WorldConfig::default(), TaskFamily::ALL[fam], 3, seed).unwrap();
            for a in actions {
                s = step(&s, a);
            }
            if s.held.is_none() && s.stack_height(s.gripper_pos) == 0 {
                let n = step(&s, Action::new(0, 0, s.gripper_state));
                prop_assert_eq!(check_success(&s), check_success(&n));
            }
        }
    }
}

//! Scripted solver: plans, greedy control, thought annotation and keyframe
//! segmentation of unannotated trajectories.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{
    self, check_success, placement_cell, remaining_target, Action, Grip, GridPos, Location, ObjectDef, ObjectId,
    Relation, TaskFamily, TaskSpec, WorldConfig, WorldError, WorldState,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("planning error: {0}")]
    Plan(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("oracle exceeded its step budget of {budget} on seed {seed}")]
    StepBudget { budget: usize, seed: u64 },
    #[error("segmentation error: expected one grasp and one release, found {grasps} grasp(s) and {releases} release(s)")]
    Segmentation { grasps: usize, releases: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskKind {
    MoveTo,
    PickUp,
    CarryTo,
    Place,
}

impl SubtaskKind {
    pub fn is_moving(self) -> bool {
        matches!(self, SubtaskKind::MoveTo | SubtaskKind::CarryTo)
    }

    fn verb(self) -> &'static str {
        match self {
            SubtaskKind::MoveTo => "move",
            SubtaskKind::PickUp => "pick",
            SubtaskKind::CarryTo => "carry",
            SubtaskKind::Place => "place",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub kind: SubtaskKind,
    pub subject: ObjectId,
    pub reference: Option<ObjectId>,
    pub relation: Option<Relation>,
    pub text: String,
}

impl Subtask {
    /// Builds a subtask and renders its instruction. Reference and relation
    /// are dropped for kinds that do not use them.
    pub fn new(
        kind: SubtaskKind,
        subject: ObjectId,
        reference: Option<ObjectId>,
        relation: Option<Relation>,
        objects: &[ObjectDef],
    ) -> Self {
        let (reference, relation) = match kind {
            SubtaskKind::CarryTo | SubtaskKind::Place => (reference, relation),
            _ => (None, None),
        };
        let name = |id: ObjectId| {
            objects
                .iter()
                .find(|o| o.id == id)
                .map(ObjectDef::name)
                .unwrap_or_else(|| String::from("unknown"))
        };
        let s = name(subject);
        let r = reference.map(name).unwrap_or_default();
        let text = match kind {
            SubtaskKind::MoveTo => format!("move to the {s}"),
            SubtaskKind::PickUp => format!("pick up the {s}"),
            SubtaskKind::CarryTo => format!("carry the {s} to {} the {r}", relation.map_or("top of", Relation::phrase)),
            SubtaskKind::Place => format!("place the {s} {} the {r}", relation.map_or("on top of", Relation::phrase)),
        };
        Self { kind, subject, reference, relation, text }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThoughtFormat {
    #[default]
    Short,
    Extended,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thought {
    pub subtask_text: String,
    pub move_label: Option<String>,
    pub plan_text: Option<String>,
}

pub const MOVE_WORDS: [&str; 5] = ["left", "right", "forward", "backward", "close"];

/// Direction words for a remaining displacement: the x word then the y word,
/// or `close` once the Chebyshev distance is within `d_close`.
pub fn move_label(dx: i32, dy: i32, d_close: i32) -> String {
    if dx.abs().max(dy.abs()) <= d_close {
        return String::from("close");
    }
    let x = match dx.signum() {
        1 => Some("right"),
        -1 => Some("left"),
        _ => None,
    };
    let y = match dy.signum() {
        1 => Some("backward"),
        -1 => Some("forward"),
        _ => None,
    };
    let words: Vec<&str> = x.into_iter().chain(y).collect();
    words.join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Chebyshev radius under which moving thoughts say `close`.
    pub d_close: i32,
    /// Reach radius used by keyframe extraction.
    pub d_key: i32,
    pub thought_format: ThoughtFormat,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { d_close: 1, d_key: 1, thought_format: ThoughtFormat::Short }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoStep {
    pub observation: WorldState,
    pub action: Action,
    pub thought: Option<Thought>,
    pub subtask_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task: TaskSpec,
    pub steps: Vec<DemoStep>,
    pub success: bool,
    pub seed: u64,
}

impl Demonstration {
    pub fn is_annotated(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.thought.is_some())
    }

    pub fn trajectory(&self) -> Vec<(WorldState, Action)> {
        self.steps.iter().map(|s| (s.observation.clone(), s.action)).collect()
    }
}

fn block(state: &WorldState, mover: ObjectId, reference: ObjectId, relation: Option<Relation>) -> [Subtask; 4] {
    let o = &state.objects;
    [
        Subtask::new(SubtaskKind::MoveTo, mover, None, None, o),
        Subtask::new(SubtaskKind::PickUp, mover, None, None, o),
        Subtask::new(SubtaskKind::CarryTo, mover, Some(reference), relation, o),
        Subtask::new(SubtaskKind::Place, mover, Some(reference), relation, o),
    ]
}

/// Ordered subtask list solving `task` from a fresh reset.
pub fn plan(task: &TaskSpec, state: &WorldState) -> Result<Vec<Subtask>, OracleError> {
    let missing = || OracleError::Plan(format!("task `{}` lacks a reference object", task.text));
    match task.family {
        TaskFamily::PlaceAt => {
            let reference = task.reference.ok_or_else(missing)?;
            let target = placement_cell(state, reference, task.relation)
                .ok_or_else(|| OracleError::Plan(String::from("reference object not in scene")))?;
            if !target.in_bounds(state.grid_size) {
                return Err(OracleError::Plan(format!("target cell {target} is off the grid")));
            }
            if state.stack_at(target).is_some_and(|s| !s.objects.contains(&task.subject)) {
                return Err(OracleError::Plan(format!("target cell {target} is occupied")));
            }
            Ok(block(state, task.subject, reference, task.relation).to_vec())
        }
        TaskFamily::PlaceOnTop => {
            let reference = task.reference.ok_or_else(missing)?;
            Ok(block(state, task.subject, reference, None).to_vec())
        }
        TaskFamily::StackTower => {
            if task.object_order.len() < 2 {
                return Err(OracleError::Plan(String::from("stack order needs at least two objects")));
            }
            Ok(task
                .object_order
                .windows(2)
                .flat_map(|w| block(state, w[1], w[0], None))
                .collect())
        }
    }
}

fn step_toward(from: GridPos, to: GridPos) -> (i8, i8) {
    ((to.x - from.x).signum() as i8, (to.y - from.y).signum() as i8)
}

/// Greedy controller for one subtask. Both axes move together.
pub fn act(state: &WorldState, subtask: &Subtask) -> Action {
    match subtask.kind {
        SubtaskKind::MoveTo | SubtaskKind::CarryTo => match remaining_target(state, subtask) {
            Ok(Some(target)) => {
                let (dx, dy) = step_toward(state.gripper_pos, target);
                Action::new(dx, dy, state.gripper_state)
            }
            _ => Action::new(0, 0, state.gripper_state),
        },
        SubtaskKind::PickUp => {
            if state.gripper_state == Grip::Closed && state.held.is_none() {
                // An empty closed gripper must reopen before it can grasp.
                Action::new(0, 0, Grip::Open)
            } else {
                Action::new(0, 0, Grip::Closed)
            }
        }
        SubtaskKind::Place => Action::new(0, 0, Grip::Open),
    }
}

fn subtask_done(state: &WorldState, subtask: &Subtask) -> bool {
    match subtask.kind {
        SubtaskKind::MoveTo => state.position_of(subtask.subject) == Some(state.gripper_pos),
        SubtaskKind::PickUp => state.held == Some(subtask.subject),
        SubtaskKind::CarryTo => {
            remaining_target(state, subtask).ok().flatten() == Some(state.gripper_pos)
        }
        SubtaskKind::Place => state.held.is_none(),
    }
}

fn plan_summary(plan: &[Subtask], index: usize) -> String {
    let mut words = Vec::new();
    for s in &plan[index..] {
        words.push(s.kind.verb());
        if s.kind == SubtaskKind::Place {
            break;
        }
    }
    words.join(" ")
}

fn successor(trajectory: &[(WorldState, Action)], t: usize) -> WorldState {
    match trajectory.get(t + 1) {
        Some((s, _)) => s.clone(),
        None => world::step(&trajectory[t].0, trajectory[t].1),
    }
}

fn validate_boundaries(boundaries: &[usize], n_subtasks: usize, len: usize) -> Result<(), OracleError> {
    if boundaries.len() != n_subtasks {
        return Err(OracleError::Integrity(format!(
            "{} boundaries for {n_subtasks} subtasks",
            boundaries.len()
        )));
    }
    if boundaries.first() != Some(&0) {
        return Err(OracleError::Integrity(String::from("boundaries must start at 0")));
    }
    if boundaries.windows(2).any(|w| w[1] < w[0]) {
        return Err(OracleError::Integrity(String::from("boundaries must be non-decreasing")));
    }
    if boundaries.last().is_some_and(|&b| b > len) {
        return Err(OracleError::Integrity(String::from("boundary past the end of the trajectory")));
    }
    Ok(())
}

/// One thought per step. Moving subtasks carry a direction label computed
/// from the gripper position at the end of the subtask's segment.
pub fn annotate(
    trajectory: &[(WorldState, Action)],
    plan: &[Subtask],
    boundaries: &[usize],
    cfg: &OracleConfig,
) -> Result<Vec<Thought>, OracleError> {
    validate_boundaries(boundaries, plan.len(), trajectory.len())?;
    let end_position = |j: usize| -> GridPos {
        let end = boundaries.get(j + 1).copied().unwrap_or(trajectory.len());
        if end < trajectory.len() {
            trajectory[end].0.gripper_pos
        } else {
            successor(trajectory, trajectory.len() - 1).gripper_pos
        }
    };
    let mut thoughts = Vec::with_capacity(trajectory.len());
    let mut j = 0;
    for (t, (state, _)) in trajectory.iter().enumerate() {
        while j + 1 < boundaries.len() && boundaries[j + 1] <= t {
            j += 1;
        }
        let subtask = &plan[j];
        let move_label = subtask.kind.is_moving().then(|| {
            let end = end_position(j);
            move_label(end.x - state.gripper_pos.x, end.y - state.gripper_pos.y, cfg.d_close)
        });
        let plan_text = (cfg.thought_format == ThoughtFormat::Extended).then(|| plan_summary(plan, j));
        thoughts.push(Thought { subtask_text: subtask.text.clone(), move_label, plan_text });
    }
    Ok(thoughts)
}

/// Rolls the plan to success. With `annotate` off the thoughts are left empty.
pub fn demo(
    world_cfg: &WorldConfig,
    cfg: &OracleConfig,
    family: TaskFamily,
    n_objects: usize,
    seed: u64,
    annotate_steps: bool,
) -> Result<Demonstration, OracleError> {
    let mut state = world::reset(world_cfg, family, n_objects, seed)?;
    let task = state.task.clone();
    let subtasks = plan(&task, &state)?;
    let budget = 4 * world_cfg.grid_size as usize * n_objects;

    let mut steps: Vec<DemoStep> = Vec::new();
    let mut boundaries = alloc::vec![0usize];
    let mut index = 0usize;
    while !check_success(&state) {
        if steps.len() >= budget {
            return Err(OracleError::StepBudget { budget, seed });
        }
        while index + 1 < subtasks.len() && subtask_done(&state, &subtasks[index]) {
            index += 1;
            boundaries.push(steps.len());
        }
        let action = act(&state, &subtasks[index]);
        let next = world::step(&state, action);
        steps.push(DemoStep { observation: state, action, thought: None, subtask_index: index as u32 });
        state = next;
    }
    while boundaries.len() < subtasks.len() {
        boundaries.push(steps.len());
    }

    if annotate_steps {
        let trajectory: Vec<(WorldState, Action)> = steps.iter().map(|s| (s.observation.clone(), s.action)).collect();
        let thoughts = annotate(&trajectory, &subtasks, &boundaries, cfg)?;
        for (step, thought) in steps.iter_mut().zip(thoughts) {
            step.thought = Some(thought);
        }
    }
    Ok(Demonstration { task, steps, success: true, seed })
}

/// Subtask boundaries recorded in a demonstration (first step of each subtask).
pub fn demo_boundaries(demo: &Demonstration, n_subtasks: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n_subtasks);
    for j in 0..n_subtasks {
        let b = demo
            .steps
            .iter()
            .position(|s| s.subtask_index as usize >= j)
            .unwrap_or(demo.steps.len());
        out.push(b);
    }
    out
}

/// Subtask the oracle would pursue from an arbitrary live state, or `None`
/// once the task is solved. States the scripted solver cannot recover from
/// (wrong object in hand, buried objects) are reported as planning errors.
pub fn current_subtask(state: &WorldState) -> Result<Option<Subtask>, OracleError> {
    if check_success(state) {
        return Ok(None);
    }
    let task = &state.task;
    let stuck = |why: &str| Err(OracleError::Plan(format!("cannot plan from live state: {why}")));
    let (mover, reference, relation) = match task.family {
        TaskFamily::PlaceAt | TaskFamily::PlaceOnTop => {
            let Some(reference) = task.reference else {
                return stuck("task without reference");
            };
            (task.subject, reference, task.relation)
        }
        TaskFamily::StackTower => {
            let order = &task.object_order;
            let Some(base) = order.first() else {
                return stuck("empty stack order");
            };
            let Some(Location::Stack { pos, level: 0 }) = state.locate(*base) else {
                return stuck("tower base is not on the table");
            };
            let stack = &state.stack_at(pos).expect("located").objects;
            let built = stack.iter().zip(order).take_while(|(a, b)| a == b).count();
            if stack.len() > built {
                return stuck("foreign object on the tower");
            }
            (order[built], order[built - 1], None)
        }
    };
    if let Some(held) = state.held {
        if held != mover {
            return stuck("holding the wrong object");
        }
        let target = placement_cell(state, reference, relation)
            .ok_or_else(|| OracleError::Plan(String::from("reference object missing")))?;
        if !target.in_bounds(state.grid_size) {
            return stuck("placement cell off the grid");
        }
        let kind = if state.gripper_pos == target { SubtaskKind::Place } else { SubtaskKind::CarryTo };
        return Ok(Some(Subtask::new(kind, mover, Some(reference), relation, &state.objects)));
    }
    let Some(Location::Stack { pos, level }) = state.locate(mover) else {
        return stuck("object to move is missing");
    };
    if level + 1 != state.stack_height(pos) {
        return stuck("object to move is buried");
    }
    if relation.is_none() {
        if let Some(Location::Stack { pos: rp, level: rl }) = state.locate(reference) {
            if rl + 1 != state.stack_height(rp) {
                return stuck("placement reference is covered");
            }
        }
    }
    let kind = if state.gripper_pos == pos { SubtaskKind::PickUp } else { SubtaskKind::MoveTo };
    Ok(Some(Subtask::new(kind, mover, None, None, &state.objects)))
}

/// Oracle thought for a live state. Direction labels use the remaining
/// displacement to the subtask's goal cell.
pub fn live_thought(state: &WorldState, cfg: &OracleConfig) -> Result<Option<(Subtask, Thought)>, OracleError> {
    let Some(subtask) = current_subtask(state)? else {
        return Ok(None);
    };
    let move_label = match remaining_target(state, &subtask)? {
        Some(target) if subtask.kind.is_moving() => Some(move_label(
            target.x - state.gripper_pos.x,
            target.y - state.gripper_pos.y,
            cfg.d_close,
        )),
        _ => None,
    };
    let plan_text = (cfg.thought_format == ThoughtFormat::Extended).then(|| {
        let kinds = [SubtaskKind::MoveTo, SubtaskKind::PickUp, SubtaskKind::CarryTo, SubtaskKind::Place];
        let from = kinds.iter().position(|&k| k == subtask.kind).unwrap_or(0);
        let words: Vec<&str> = kinds[from..].iter().map(|k| k.verb()).collect();
        words.join(" ")
    });
    let thought = Thought { subtask_text: subtask.text.clone(), move_label, plan_text };
    Ok(Some((subtask, thought)))
}

/// Four-segment boundaries `[0, reach, grasp, reach_release]` of a single
/// pick-and-place trajectory. The grasp keyframe is the first observation in
/// which the object is held.
pub fn extract_keyframes(trajectory: &[(WorldState, Action)], d_key: i32) -> Result<Vec<usize>, OracleError> {
    let mut grasps = Vec::new();
    let mut releases = Vec::new();
    for t in 0..trajectory.len() {
        let before = trajectory[t].0.held;
        let after = successor(trajectory, t);
        match (before, after.held) {
            (None, Some(_)) => grasps.push((t + 1, after.gripper_pos)),
            (Some(_), None) => releases.push((t + 1, after.gripper_pos)),
            _ => {}
        }
    }
    let (&[(grasp_step, grasp_pos)], &[(release_step, release_pos)]) = (grasps.as_slice(), releases.as_slice())
    else {
        return Err(OracleError::Segmentation { grasps: grasps.len(), releases: releases.len() });
    };
    if release_step <= grasp_step {
        return Err(OracleError::Segmentation { grasps: grasps.len(), releases: releases.len() });
    }
    let first_within = |from: usize, to: usize, pos: GridPos| {
        (from..to)
            .find(|&t| trajectory[t].0.gripper_pos.chebyshev(pos) <= d_key)
            .unwrap_or(to)
    };
    let reach = first_within(0, grasp_step, grasp_pos);
    let reach_release = first_within(grasp_step, release_step, release_pos);
    Ok(alloc::vec![0, reach, grasp_step, reach_release])
}

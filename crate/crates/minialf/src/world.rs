//! World state, the action grammar, affordances and transitions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{EnvError, Result};
use crate::tasks::TaskSpec;
use crate::types::{Obj, Recep, TaskType};

pub const GRID: usize = 5;
/// Cell the agent starts in; never holds a receptacle.
pub const START_CELL: (usize, usize) = (2, 2);
pub const DEFAULT_STEP_CAP: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    GoTo(Recep),
    Open(Recep),
    Close(Recep),
    Take(Obj, Recep),
    Put(Obj, Recep),
    Heat(Obj, Recep),
    Cool(Obj, Recep),
    Clean(Obj, Recep),
    Use(Recep),
    Done,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Action::GoTo(r) => write!(f, "go to {}", r.name()),
            Action::Open(r) => write!(f, "open {}", r.name()),
            Action::Close(r) => write!(f, "close {}", r.name()),
            Action::Take(o, r) => write!(f, "take {} from {}", o.name(), r.name()),
            Action::Put(o, r) => write!(f, "put {} in {}", o.name(), r.name()),
            Action::Heat(o, r) => write!(f, "heat {} with {}", o.name(), r.name()),
            Action::Cool(o, r) => write!(f, "cool {} with {}", o.name(), r.name()),
            Action::Clean(o, r) => write!(f, "clean {} with {}", o.name(), r.name()),
            Action::Use(r) => write!(f, "use {}", r.name()),
            Action::Done => write!(f, "done"),
        }
    }
}

impl Action {
    /// Parses one grammar string; anything else is a parse error.
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let bad = || EnvError::Parse(text.to_string());
        let r = |w: &str| Recep::parse(w).ok_or_else(bad);
        let o = |w: &str| Obj::parse(w).ok_or_else(bad);
        Ok(match words.as_slice() {
            ["go", "to", x] => Action::GoTo(r(x)?),
            ["open", x] => Action::Open(r(x)?),
            ["close", x] => Action::Close(r(x)?),
            ["take", a, "from", x] => Action::Take(o(a)?, r(x)?),
            ["put", a, "in", x] => Action::Put(o(a)?, r(x)?),
            ["heat", a, "with", x] => Action::Heat(o(a)?, r(x)?),
            ["cool", a, "with", x] => Action::Cool(o(a)?, r(x)?),
            ["clean", a, "with", x] => Action::Clean(o(a)?, r(x)?),
            ["use", x] => Action::Use(r(x)?),
            ["done"] => Action::Done,
            _ => return Err(bad()),
        })
    }

    /// Every string the grammar can produce, in a fixed order.
    pub fn grammar() -> Vec<Action> {
        let mut out = Vec::new();
        for r in Recep::ALL {
            out.extend([
                Action::GoTo(r),
                Action::Open(r),
                Action::Close(r),
                Action::Use(r),
            ]);
            for o in Obj::ALL {
                out.extend([
                    Action::Take(o, r),
                    Action::Put(o, r),
                    Action::Heat(o, r),
                    Action::Cool(o, r),
                    Action::Clean(o, r),
                ]);
            }
        }
        out.push(Action::Done);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Receptacle {
    pub kind: Recep,
    pub cell: (usize, usize),
    pub open: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Location {
    In(usize),
    Held,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub kind: Obj,
    pub loc: Location,
    pub heated: bool,
    pub cooled: bool,
    pub cleaned: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WorldState {
    pub receptacles: Vec<Receptacle>,
    pub objects: Vec<Object>,
    /// Index of the receptacle the agent stands at and faces.
    pub agent: Option<usize>,
    pub lamp_on: bool,
    pub steps: usize,
    pub cap: usize,
    pub done: bool,
}

impl WorldState {
    pub fn from_task(task: &TaskSpec, cap: usize) -> Self {
        let receptacles: Vec<Receptacle> = task
            .receptacles
            .iter()
            .map(|&(kind, (r, c))| Receptacle {
                kind,
                cell: (r, c),
                open: false,
            })
            .collect();
        let objects = task
            .placements
            .iter()
            .map(|&(kind, at)| Object {
                kind,
                loc: Location::In(
                    receptacles
                        .iter()
                        .position(|r| r.kind == at)
                        .expect("placement in scene"),
                ),
                heated: false,
                cooled: false,
                cleaned: false,
            })
            .collect();
        WorldState {
            receptacles,
            objects,
            agent: None,
            lamp_on: false,
            steps: 0,
            cap,
            done: false,
        }
    }

    pub fn recep_index(&self, kind: Recep) -> Option<usize> {
        self.receptacles.iter().position(|r| r.kind == kind)
    }

    pub fn held(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.loc == Location::Held)
    }

    pub fn facing(&self) -> Option<&Receptacle> {
        self.agent.map(|i| &self.receptacles[i])
    }

    /// Contents are visible when the receptacle is open or cannot be closed.
    pub fn contents_visible(&self, idx: usize) -> bool {
        let r = &self.receptacles[idx];
        r.open || !r.kind.openable()
    }

    /// Object indices inside receptacle `idx`, in placement order.
    pub fn contents(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        self.objects
            .iter()
            .enumerate()
            .filter(move |(_, o)| o.loc == Location::In(idx))
            .map(|(i, _)| i)
    }

    fn at(&self, kind: Recep) -> Option<usize> {
        self.agent.filter(|&i| self.receptacles[i].kind == kind)
    }

    fn holding(&self, kind: Obj) -> Option<usize> {
        self.held().filter(|&i| self.objects[i].kind == kind)
    }

    fn find_in(&self, kind: Obj, idx: usize) -> Option<usize> {
        self.contents(idx).find(|&i| self.objects[i].kind == kind)
    }

    /// Single source of truth for executability.
    pub fn is_affordable(&self, a: Action) -> bool {
        match a {
            Action::GoTo(r) => self.recep_index(r).is_some_and(|i| self.agent != Some(i)),
            Action::Open(r) => self
                .at(r)
                .is_some_and(|i| r.openable() && !self.receptacles[i].open),
            Action::Close(r) => self
                .at(r)
                .is_some_and(|i| r.openable() && self.receptacles[i].open),
            Action::Take(o, r) => self.at(r).is_some_and(|i| {
                self.held().is_none() && self.contents_visible(i) && self.find_in(o, i).is_some()
            }),
            Action::Put(o, r) => self.at(r).is_some_and(|i| {
                r.holds_objects() && self.contents_visible(i) && self.holding(o).is_some()
            }),
            Action::Heat(o, r) => {
                r == Recep::Microwave
                    && self.at(r).is_some()
                    && self
                        .holding(o)
                        .is_some_and(|i| o.heatable() && !self.objects[i].heated)
            }
            Action::Cool(o, r) => {
                r == Recep::Fridge
                    && self.at(r).is_some()
                    && self
                        .holding(o)
                        .is_some_and(|i| o.coolable() && !self.objects[i].cooled)
            }
            Action::Clean(o, r) => {
                r == Recep::Sink
                    && self.at(r).is_some()
                    && self
                        .holding(o)
                        .is_some_and(|i| o.cleanable() && !self.objects[i].cleaned)
            }
            Action::Use(r) => r == Recep::Desklamp && self.at(r).is_some() && !self.lamp_on,
            Action::Done => true,
        }
    }

    /// The exact executable set, in grammar order.
    pub fn affordable_actions(&self) -> Vec<Action> {
        Action::grammar()
            .into_iter()
            .filter(|&a| self.is_affordable(a))
            .collect()
    }

    /// Applies `a`. Unaffordable actions only advance the step counter.
    pub fn step(&mut self, a: Action) -> Result<bool> {
        if self.done || self.steps >= self.cap {
            return Err(EnvError::EpisodeOver);
        }
        self.steps += 1;
        if !self.is_affordable(a) {
            return Ok(false);
        }
        match a {
            Action::GoTo(r) => self.agent = self.recep_index(r),
            Action::Open(_) => self.receptacles[self.agent.expect("affordable")].open = true,
            Action::Close(_) => self.receptacles[self.agent.expect("affordable")].open = false,
            Action::Take(o, _) => {
                let i = self
                    .find_in(o, self.agent.expect("affordable"))
                    .expect("affordable");
                self.objects[i].loc = Location::Held;
            }
            Action::Put(o, _) => {
                let i = self.holding(o).expect("affordable");
                self.objects[i].loc = Location::In(self.agent.expect("affordable"));
            }
            Action::Heat(o, _) => {
                let i = self.holding(o).expect("affordable");
                self.objects[i].heated = true;
            }
            Action::Cool(o, _) => {
                let i = self.holding(o).expect("affordable");
                self.objects[i].cooled = true;
            }
            Action::Clean(o, _) => {
                let i = self.holding(o).expect("affordable");
                self.objects[i].cleaned = true;
            }
            Action::Use(_) => self.lamp_on = true,
            Action::Done => self.done = true,
        }
        Ok(true)
    }

    /// Parses then applies an action string.
    pub fn step_text(&mut self, text: &str) -> Result<bool> {
        let a = Action::parse(text)?;
        self.step(a)
    }

    /// Equality ignoring the step counter.
    pub fn same_modulo_steps(&self, other: &WorldState) -> bool {
        WorldState {
            steps: 0,
            ..self.clone()
        } == WorldState {
            steps: 0,
            ..other.clone()
        }
    }

    pub fn is_success(&self, task: &TaskSpec) -> bool {
        let o = task.object;
        if task.task_type == TaskType::ExamineInLight {
            return self.lamp_on && self.holding(o).is_some();
        }
        let Some(target) = task.target.and_then(|t| self.recep_index(t)) else {
            return false;
        };
        let ok = |ob: &Object| match task.task_type {
            TaskType::HeatPlace => ob.heated,
            TaskType::CoolPlace => ob.cooled,
            TaskType::CleanPlace => ob.cleaned,
            _ => true,
        };
        let n = self
            .objects
            .iter()
            .filter(|ob| ob.kind == o && ob.loc == Location::In(target) && ok(ob))
            .count();
        n >= task.task_type.instances()
    }
}

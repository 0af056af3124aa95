//! Receptacle and object vocabularies with their colours and affordances.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recep {
    Fridge,
    Microwave,
    Sink,
    Cabinet,
    Drawer,
    Countertop,
    Desklamp,
    Garbagecan,
}

impl Recep {
    /// Canonical order; scenes list their receptacles in this order.
    pub const ALL: [Recep; 8] = [
        Recep::Fridge,
        Recep::Microwave,
        Recep::Sink,
        Recep::Cabinet,
        Recep::Drawer,
        Recep::Countertop,
        Recep::Desklamp,
        Recep::Garbagecan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recep::Fridge => "fridge",
            Recep::Microwave => "microwave",
            Recep::Sink => "sink",
            Recep::Cabinet => "cabinet",
            Recep::Drawer => "drawer",
            Recep::Countertop => "countertop",
            Recep::Desklamp => "desklamp",
            Recep::Garbagecan => "garbagecan",
        }
    }

    pub fn parse(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == word)
    }

    pub fn openable(self) -> bool {
        matches!(
            self,
            Recep::Fridge | Recep::Microwave | Recep::Cabinet | Recep::Drawer
        )
    }

    /// Whether objects can be placed in it.
    pub fn holds_objects(self) -> bool {
        self != Recep::Desklamp
    }

    pub fn color(self) -> [u8; 3] {
        match self {
            Recep::Fridge => [70, 130, 230],
            Recep::Microwave => [150, 150, 150],
            Recep::Sink => [60, 200, 200],
            Recep::Cabinet => [150, 90, 40],
            Recep::Drawer => [210, 150, 90],
            Recep::Countertop => [120, 200, 120],
            Recep::Desklamp => [230, 210, 60],
            Recep::Garbagecan => [100, 100, 50],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Obj {
    Apple,
    Bread,
    Egg,
    Potato,
    Mug,
    Plate,
    Book,
    Pen,
}

impl Obj {
    pub const ALL: [Obj; 8] = [
        Obj::Apple,
        Obj::Bread,
        Obj::Egg,
        Obj::Potato,
        Obj::Mug,
        Obj::Plate,
        Obj::Book,
        Obj::Pen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Obj::Apple => "apple",
            Obj::Bread => "bread",
            Obj::Egg => "egg",
            Obj::Potato => "potato",
            Obj::Mug => "mug",
            Obj::Plate => "plate",
            Obj::Book => "book",
            Obj::Pen => "pen",
        }
    }

    pub fn parse(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == word)
    }

    pub fn heatable(self) -> bool {
        matches!(
            self,
            Obj::Apple | Obj::Bread | Obj::Egg | Obj::Potato | Obj::Mug
        )
    }

    pub fn coolable(self) -> bool {
        matches!(
            self,
            Obj::Apple | Obj::Bread | Obj::Egg | Obj::Potato | Obj::Mug | Obj::Plate
        )
    }

    pub fn cleanable(self) -> bool {
        matches!(self, Obj::Apple | Obj::Potato | Obj::Mug | Obj::Plate)
    }

    pub fn examinable(self) -> bool {
        matches!(self, Obj::Book | Obj::Pen | Obj::Mug)
    }

    pub fn color(self) -> [u8; 3] {
        match self {
            Obj::Apple => [235, 30, 30],
            Obj::Bread => [245, 165, 50],
            Obj::Egg => [250, 250, 190],
            Obj::Potato => [120, 80, 30],
            Obj::Mug => [40, 40, 230],
            Obj::Plate => [205, 205, 205],
            Obj::Book => [20, 140, 20],
            Obj::Pen => [200, 40, 200],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    PickPlace,
    HeatPlace,
    CoolPlace,
    CleanPlace,
    ExamineInLight,
    PickTwoPlace,
}

impl TaskType {
    pub const ALL: [TaskType; 6] = [
        TaskType::PickPlace,
        TaskType::HeatPlace,
        TaskType::CoolPlace,
        TaskType::CleanPlace,
        TaskType::ExamineInLight,
        TaskType::PickTwoPlace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::PickPlace => "pick-place",
            TaskType::HeatPlace => "heat-place",
            TaskType::CoolPlace => "cool-place",
            TaskType::CleanPlace => "clean-place",
            TaskType::ExamineInLight => "examine-in-light",
            TaskType::PickTwoPlace => "pick-two-place",
        }
    }

    /// Receptacle that transforms or reveals the object, if any.
    pub fn tool(self) -> Option<Recep> {
        match self {
            TaskType::HeatPlace => Some(Recep::Microwave),
            TaskType::CoolPlace => Some(Recep::Fridge),
            TaskType::CleanPlace => Some(Recep::Sink),
            TaskType::ExamineInLight => Some(Recep::Desklamp),
            TaskType::PickPlace | TaskType::PickTwoPlace => None,
        }
    }

    pub fn accepts(self, o: Obj) -> bool {
        match self {
            TaskType::HeatPlace => o.heatable(),
            TaskType::CoolPlace => o.coolable(),
            TaskType::CleanPlace => o.cleanable(),
            TaskType::ExamineInLight => o.examinable(),
            TaskType::PickPlace | TaskType::PickTwoPlace => true,
        }
    }

    pub fn has_target(self) -> bool {
        self != TaskType::ExamineInLight
    }

    pub fn instances(self) -> usize {
        if self == TaskType::PickTwoPlace {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "eval-ID")]
    EvalId,
    #[serde(rename = "eval-OD")]
    EvalOd,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::EvalId, Split::EvalOd];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::EvalId => "eval-ID",
            Split::EvalOd => "eval-OD",
        }
    }
}

/// Goal sentence for a task.
pub fn goal_text(task: TaskType, obj: Obj, target: Option<Recep>) -> String {
    let o = obj.name();
    let t = target.map_or("", Recep::name);
    match task {
        TaskType::PickPlace => format!("put a {o} in {t}"),
        TaskType::HeatPlace => format!("heat some {o} and put it in {t}"),
        TaskType::CoolPlace => format!("cool some {o} and put it in {t}"),
        TaskType::CleanPlace => format!("clean some {o} and put it in {t}"),
        TaskType::ExamineInLight => format!("examine the {o} with the desklamp"),
        TaskType::PickTwoPlace => format!("put two {o} in {t}"),
    }
}

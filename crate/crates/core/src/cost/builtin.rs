use super::task::{parse_task, TaskSpec};

const SOURCES: [(&str, &str); 5] = [
    (
        "pendulum_swingup",
        include_str!("../../tasks/pendulum_swingup.toml"),
    ),
    (
        "cartpole_swingup",
        include_str!("../../tasks/cartpole_swingup.toml"),
    ),
    ("biped_stand", include_str!("../../tasks/biped_stand.toml")),
    ("biped_trot", include_str!("../../tasks/biped_trot.toml")),
    ("biped_walk", include_str!("../../tasks/biped_walk.toml")),
];

pub const BUILTIN_TASK_NAMES: [&str; SOURCES.len()] = {
    let mut names = [""; SOURCES.len()];
    let mut i = 0;
    while i < SOURCES.len() {
        names[i] = SOURCES[i].0;
        i += 1;
    }
    names
};

/// Every shipped task, parsed.
pub fn builtin_tasks() -> Vec<TaskSpec> {
    SOURCES
        .iter()
        .map(|(name, text)| parse_task(text).unwrap_or_else(|e| panic!("builtin task {name}: {e}")))
        .collect()
}

pub fn builtin_task(name: &str) -> Option<TaskSpec> {
    SOURCES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| parse_task(text).expect("builtin task parses"))
}

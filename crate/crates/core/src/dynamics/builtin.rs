use super::file::parse_model;
use super::model::ModelSpec;

const SOURCES: [(&str, &str); 4] = [
    ("pendulum", include_str!("../../models/pendulum.toml")),
    ("cartpole", include_str!("../../models/cartpole.toml")),
    ("hopper", include_str!("../../models/hopper.toml")),
    ("biped", include_str!("../../models/biped.toml")),
];

pub const BUILTIN_MODEL_NAMES: [&str; 4] = ["pendulum", "cartpole", "hopper", "biped"];

/// The shipped benchmark models: pendulum, cartpole, planar hopper and
/// planar biped.
pub fn builtin_models() -> Vec<ModelSpec> {
    SOURCES
        .iter()
        .map(|(name, text)| {
            parse_model(text).unwrap_or_else(|e| panic!("builtin model '{name}' is invalid: {e}"))
        })
        .collect()
}

pub fn builtin_model(name: &str) -> Option<ModelSpec> {
    SOURCES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| parse_model(text).expect("builtin models parse"))
}

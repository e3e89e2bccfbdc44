//! Model configs shipped with the crate.

/// `(name, json)` for every shipped preset.
pub const PRESETS: [(&str, &str); 4] = [
    ("linear-ou", include_str!("../presets/linear-ou.json")),
    ("linear-asym", include_str!("../presets/linear-asym.json")),
    ("cubic", include_str!("../presets/cubic.json")),
    ("varsigma", include_str!("../presets/varsigma.json")),
];

/// Looks a preset up by name, with or without the `.json` suffix.
pub fn preset(name: &str) -> Option<&'static str> {
    let stem = name.strip_suffix(".json").unwrap_or(name);
    PRESETS.iter().find(|(n, _)| *n == stem).map(|(_, json)| *json)
}

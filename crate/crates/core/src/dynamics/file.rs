//! TOML model definition files.
//!
//! Links are referenced by name. Omitted joint anchors default to the distal
//! end of the parent link (the hip point `(0, -length/2)` for a planar base
//! body, the origin for the world); omitted contact-point offsets default to
//! the distal end of their link. Errors carry the 1-based line of the
//! offending table.

use serde::{Deserialize, Serialize};
use toml::Spanned;

use super::contact::ContactParams;
use super::model::{BaseKind, JointKind, JointSpec, LinkSpec, ModelSpec, PdGains, PointSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ModelFileError {
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    name: String,
    base: BaseKind,
    #[serde(default = "default_gravity")]
    gravity: f64,
    home: Vec<f64>,
    contact: Option<Spanned<ContactParams>>,
    links: Vec<Spanned<LinkSpec>>,
    #[serde(default)]
    joints: Vec<Spanned<JointEntry>>,
    #[serde(default)]
    contact_points: Vec<Spanned<PointEntry>>,
    head: Option<Spanned<PointEntry>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointEntry {
    name: String,
    kind: JointKind,
    parent: Option<String>,
    anchor: Option<[f64; 2]>,
    #[serde(default = "default_axis")]
    axis: [f64; 2],
    limits: [f64; 2],
    #[serde(default)]
    damping: f64,
    pd: Option<PdGains>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointEntry {
    #[serde(default)]
    name: String,
    link: String,
    offset: Option<[f64; 2]>,
}

fn default_gravity() -> f64 {
    9.81
}

fn default_axis() -> [f64; 2] {
    [1.0, 0.0]
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())]
        .bytes()
        .filter(|&b| b == b'\n')
        .count()
        + 1
}

/// Parses and validates a model definition.
pub fn parse_model(text: &str) -> Result<ModelSpec, ModelFileError> {
    let file: ModelFile = toml::from_str(text).map_err(|e| ModelFileError {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let line = |span: std::ops::Range<usize>| Some(line_of(text, span.start));

    let link_index = |name: &str, at: std::ops::Range<usize>| {
        file.links
            .iter()
            .position(|l| l.get_ref().name == name)
            .ok_or_else(|| ModelFileError {
                line: line(at),
                message: format!("unknown link '{name}'"),
            })
    };
    let roots = match file.base {
        BaseKind::Fixed => 0,
        BaseKind::Planar => 1,
    };

    let mut joints = Vec::with_capacity(file.joints.len());
    for entry in &file.joints {
        let j = entry.get_ref();
        let parent = j
            .parent
            .as_deref()
            .map(|p| link_index(p, entry.span()))
            .transpose()?;
        let anchor = j.anchor.unwrap_or_else(|| match parent {
            Some(p) => [0.0, -file.links[p].get_ref().length],
            None if roots == 1 => [0.0, -0.5 * file.links[0].get_ref().length],
            None => [0.0, 0.0],
        });
        joints.push(JointSpec {
            name: j.name.clone(),
            kind: j.kind,
            parent,
            anchor,
            axis: j.axis,
            limits: j.limits,
            damping: j.damping,
            pd: j.pd,
        });
    }
    let point = |entry: &Spanned<PointEntry>| -> Result<PointSpec, ModelFileError> {
        let p = entry.get_ref();
        let link = link_index(&p.link, entry.span())?;
        let length = file.links[link].get_ref().length;
        Ok(PointSpec {
            name: if p.name.is_empty() {
                p.link.clone()
            } else {
                p.name.clone()
            },
            link,
            offset: p.offset.unwrap_or([0.0, -length]),
        })
    };
    let contact_points = file
        .contact_points
        .iter()
        .map(point)
        .collect::<Result<Vec<_>, _>>()?;
    let head = file.head.as_ref().map(point).transpose()?;

    let spec = ModelSpec {
        name: file.name.clone(),
        base: file.base,
        links: file.links.iter().map(|l| l.get_ref().clone()).collect(),
        joints,
        contact_points,
        head,
        contact: file
            .contact
            .as_ref()
            .map(|c| *c.get_ref())
            .unwrap_or_default(),
        gravity: file.gravity,
        home: file.home.clone(),
    };

    spec.validate().map_err(|err| {
        let span_of = |prefix: &str, items: &[std::ops::Range<usize>]| {
            let rest = err.field.strip_prefix(prefix)?;
            let idx: usize = rest.split(']').next()?.parse().ok()?;
            items.get(idx).cloned()
        };
        let links: Vec<_> = file.links.iter().map(|l| l.span()).collect();
        let joints: Vec<_> = file.joints.iter().map(|l| l.span()).collect();
        let points: Vec<_> = file.contact_points.iter().map(|l| l.span()).collect();
        let span = span_of("links[", &links)
            .or_else(|| span_of("joints[", &joints))
            .or_else(|| span_of("contact_points[", &points))
            .or_else(|| {
                err.field
                    .starts_with("contact.")
                    .then(|| file.contact.as_ref().map(|c| c.span()))
                    .flatten()
            });
        ModelFileError {
            line: span.and_then(line),
            message: err.to_string(),
        }
    })?;
    Ok(spec)
}

/// Serializes a model into the file format accepted by [`parse_model`].
pub fn model_to_toml(spec: &ModelSpec) -> String {
    let link_name = |i: usize| spec.links[i].name.clone();
    let point = |p: &PointSpec| {
        Spanned::new(
            0..0,
            PointEntry {
                name: p.name.clone(),
                link: link_name(p.link),
                offset: Some(p.offset),
            },
        )
    };
    let file = ModelFile {
        name: spec.name.clone(),
        base: spec.base,
        gravity: spec.gravity,
        home: spec.home.clone(),
        contact: Some(Spanned::new(0..0, spec.contact)),
        links: spec
            .links
            .iter()
            .map(|l| Spanned::new(0..0, l.clone()))
            .collect(),
        joints: spec
            .joints
            .iter()
            .map(|j| {
                Spanned::new(
                    0..0,
                    JointEntry {
                        name: j.name.clone(),
                        kind: j.kind,
                        parent: j.parent.map(link_name),
                        anchor: Some(j.anchor),
                        axis: j.axis,
                        limits: j.limits,
                        damping: j.damping,
                        pd: j.pd,
                    },
                )
            })
            .collect(),
        contact_points: spec.contact_points.iter().map(point).collect(),
        head: spec.head.as_ref().map(point),
    };
    toml::to_string(&file).expect("model serializes to TOML")
}

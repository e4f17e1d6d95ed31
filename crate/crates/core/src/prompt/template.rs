//! Minimal template language for the verifier prompts.
//!
//! * `{a | b}` picks the alternative bound to the environment profile. These
//!   are resolved when a template is loaded; a template whose groups have no
//!   alternative for the profile fails to load.
//! * `{{name}}` substitutes text.
//! * `{{@name}}` splices a list of message parts (text and images).
//! * `{{#flag}}...{{/flag}}` and `{{^flag}}...{{/flag}}` include a span when
//!   the flag is set (respectively unset).

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use std::sync::LazyLock;
use thiserror::Error;

use super::Part;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{0}` is missing its front-matter header")]
    MissingHeader(String),
    #[error("template `{name}`: no alternative {index} in pipe group `{group}`")]
    MissingBinding { name: String, group: String, index: usize },
    #[error("template `{name}` uses pipe groups but profile `{profile}` has no phrase bindings")]
    UnboundProfile { name: String, profile: String },
    #[error("template `{name}`: unbalanced section `{section}`")]
    Unbalanced { name: String, section: String },
    #[error("template `{name}`: no value for `{{{{{var}}}}}`")]
    MissingValue { name: String, var: String },
}

static PIPE_GROUP: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([^{}]*\|[^{}]*)\}").expect("static regex"));

#[derive(Debug, Clone, PartialEq, Eq)]
enum Node {
    Text(String),
    Var(String),
    Slot(String),
    Section { flag: String, inverted: bool, body: Vec<Node> },
}

#[derive(Debug, Clone)]
pub struct Template {
    pub name: String,
    pub profiles: Vec<String>,
    pub version: u32,
    nodes: Vec<Node>,
}

/// Values available while rendering one template.
#[derive(Debug, Default, Clone)]
pub struct Context {
    vars: BTreeMap<String, String>,
    slots: BTreeMap<String, Vec<Part>>,
    flags: BTreeSet<String>,
}

impl Context {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(mut self, name: &str, value: impl Into<String>) -> Self {
        self.vars.insert(name.to_string(), value.into());
        self
    }

    pub fn slot(mut self, name: &str, parts: Vec<Part>) -> Self {
        self.slots.insert(name.to_string(), parts);
        self
    }

    pub fn flag(mut self, name: &str, on: bool) -> Self {
        if on {
            self.flags.insert(name.to_string());
        } else {
            self.flags.remove(name);
        }
        self
    }
}

impl Template {
    /// Parses a template file, resolving pipe groups with `binding`.
    ///
    /// `binding` is the alternative index for the profile, or `None` when the
    /// profile has no phrase bindings.
    pub fn parse(source: &str, binding: Option<usize>, profile: &str) -> Result<Self, TemplateError> {
        let rest = source
            .strip_prefix("---\n")
            .ok_or_else(|| TemplateError::MissingHeader(source.lines().next().unwrap_or("").into()))?;
        let end = rest.find("\n---\n").ok_or_else(|| TemplateError::MissingHeader("?".into()))?;
        let (header, body) = (&rest[..end], &rest[end + 5..]);
        let mut name = String::new();
        let mut profiles = Vec::new();
        let mut version = 0;
        for line in header.lines() {
            if let Some((k, v)) = line.split_once(':') {
                let v = v.trim();
                match k.trim() {
                    "name" => name = v.to_string(),
                    "profiles" => profiles = v.split_whitespace().map(str::to_string).collect(),
                    "version" => version = v.parse().unwrap_or(0),
                    _ => {}
                }
            }
        }
        if name.is_empty() {
            return Err(TemplateError::MissingHeader(header.into()));
        }
        let body = body.strip_suffix('\n').unwrap_or(body);
        let resolved = resolve_pipes(&name, body, binding, profile)?;
        let nodes = parse_nodes(&name, &resolved)?;
        Ok(Self { name, profiles, version, nodes })
    }

    pub fn render(&self, ctx: &Context) -> Result<Vec<Part>, TemplateError> {
        let mut out = Vec::new();
        render_nodes(&self.name, &self.nodes, ctx, &mut out)?;
        Ok(super::merge_text(out))
    }

    /// Renders a template that has no image slots to a plain string.
    pub fn render_text(&self, ctx: &Context) -> Result<String, TemplateError> {
        Ok(self
            .render(ctx)?
            .into_iter()
            .map(|p| match p {
                Part::Text(t) => t,
                Part::Image(i) => format!("[image:{}]", i.uri),
            })
            .collect())
    }
}

fn resolve_pipes(
    name: &str,
    body: &str,
    binding: Option<usize>,
    profile: &str,
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(body.len());
    let mut last = 0;
    for cap in PIPE_GROUP.captures_iter(body) {
        let whole = cap.get(0).expect("group 0");
        // `{{...}}` markers are never pipe groups
        if body[..whole.start()].ends_with('{') || body[whole.end()..].starts_with('}') {
            continue;
        }
        let index = binding.ok_or_else(|| TemplateError::UnboundProfile {
            name: name.into(),
            profile: profile.into(),
        })?;
        let alternatives: Vec<&str> = cap[1].split('|').map(str::trim).collect();
        let chosen = alternatives.get(index).ok_or_else(|| TemplateError::MissingBinding {
            name: name.into(),
            group: cap[1].to_string(),
            index,
        })?;
        out.push_str(&body[last..whole.start()]);
        out.push_str(chosen);
        last = whole.end();
    }
    out.push_str(&body[last..]);
    Ok(out)
}

fn parse_nodes(name: &str, src: &str) -> Result<Vec<Node>, TemplateError> {
    // stack of (flag, inverted, nodes)
    let mut stack: Vec<(String, bool, Vec<Node>)> = vec![(String::new(), false, Vec::new())];
    let mut rest = src;
    while let Some(open) = rest.find("{{") {
        if open > 0 {
            push_text(&mut stack, &rest[..open]);
        }
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or_else(|| TemplateError::Unbalanced {
            name: name.into(),
            section: after.chars().take(16).collect(),
        })?;
        let tag = &after[..close];
        rest = &after[close + 2..];
        if let Some(flag) = tag.strip_prefix('#') {
            stack.push((flag.to_string(), false, Vec::new()));
        } else if let Some(flag) = tag.strip_prefix('^') {
            stack.push((flag.to_string(), true, Vec::new()));
        } else if let Some(flag) = tag.strip_prefix('/') {
            let (open_flag, inverted, body) = stack.pop().expect("root never popped");
            if open_flag != flag || stack.is_empty() {
                return Err(TemplateError::Unbalanced { name: name.into(), section: flag.into() });
            }
            stack
                .last_mut()
                .expect("checked non-empty")
                .2
                .push(Node::Section { flag: open_flag, inverted, body });
        } else if let Some(slot) = tag.strip_prefix('@') {
            stack.last_mut().expect("root").2.push(Node::Slot(slot.to_string()));
        } else {
            stack.last_mut().expect("root").2.push(Node::Var(tag.to_string()));
        }
    }
    if !rest.is_empty() {
        push_text(&mut stack, rest);
    }
    if stack.len() != 1 {
        let (flag, _, _) = stack.pop().expect("len > 1");
        return Err(TemplateError::Unbalanced { name: name.into(), section: flag });
    }
    Ok(stack.pop().expect("root").2)
}

fn push_text(stack: &mut [(String, bool, Vec<Node>)], text: &str) {
    stack.last_mut().expect("root").2.push(Node::Text(text.to_string()));
}

fn render_nodes(
    name: &str,
    nodes: &[Node],
    ctx: &Context,
    out: &mut Vec<Part>,
) -> Result<(), TemplateError> {
    for node in nodes {
        match node {
            Node::Text(t) => out.push(Part::Text(t.clone())),
            Node::Var(v) => {
                let value = ctx
                    .vars
                    .get(v)
                    .ok_or_else(|| TemplateError::MissingValue { name: name.into(), var: v.clone() })?;
                out.push(Part::Text(value.clone()));
            }
            Node::Slot(s) => {
                let parts = ctx
                    .slots
                    .get(s)
                    .ok_or_else(|| TemplateError::MissingValue { name: name.into(), var: s.clone() })?;
                out.extend(parts.iter().cloned());
            }
            Node::Section { flag, inverted, body } => {
                let on = ctx.flags.contains(flag) || ctx.slots.get(flag).is_some_and(|p| !p.is_empty());
                if on != *inverted {
                    render_nodes(name, body, ctx, out)?;
                }
            }
        }
    }
    Ok(())
}

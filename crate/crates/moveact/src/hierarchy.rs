//! Multi-level action structure and composition consistency.
//!
//! Level 0 holds movement segments; levels `h >= 1` aggregate lower-level
//! intervals into composite actions. A [`HierarchySpec`] declares each
//! level's label set and composition table plus a catalog of required
//! child labels per composite label. [`psi_c`] scores one composite node's
//! consistency with its children; [`validate_hierarchy`] folds that over a
//! forest.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::allen::{
    check_configuration, parse_tables, tables_to_string, ActionInterval, AllenError,
    CompositionTable, Configuration, DefaultPolicy, Label, PairPolicy, TableMode,
};

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("label `{0}` has no catalog entry")]
    UnknownParentLabel(Label),
    #[error("two intervals cover t={t}: {first} and {second}")]
    Ambiguous { t: usize, first: Label, second: Label },
    #[error("node at level {0} cannot be scored as a composite (need level >= 1)")]
    NotComposite(u32),
    #[error("invalid hierarchy: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Allen(#[from] AllenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One hierarchy level: its label set and the composition table `M^h`
/// constraining pairs of child labels (level-0 tables constrain level-0
/// labels directly, for flat sequencing).
#[derive(Debug, Clone)]
pub struct LevelSpec {
    pub level: u32,
    pub labels: Vec<Label>,
    pub table: CompositionTable,
}

/// The full multi-level declaration: levels 0..=H plus, for each composite
/// label, the exact multiset of child labels it is composed of.
#[derive(Debug, Clone)]
pub struct HierarchySpec {
    levels: Vec<LevelSpec>,
    catalog: HashMap<Label, Vec<Label>>,
}

fn multiset(labels: &[Label]) -> BTreeMap<&Label, usize> {
    let mut counts = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts
}

impl HierarchySpec {
    /// Build and validate a spec. Level indices must be contiguous from 0,
    /// label sets non-empty, table entries must reference the constrained
    /// level's label set, and catalog entries must name a label at some
    /// level `h >= 1` with children from level `h - 1`.
    pub fn new(
        mut levels: Vec<LevelSpec>,
        catalog: HashMap<Label, Vec<Label>>,
    ) -> Result<Self, HierarchyError> {
        levels.sort_by_key(|l| l.level);
        for (i, level) in levels.iter().enumerate() {
            if level.level != i as u32 {
                return Err(HierarchyError::InvalidSpec(format!(
                    "level indices must be contiguous from 0, found {}",
                    level.level
                )));
            }
            if level.labels.is_empty() {
                return Err(HierarchyError::InvalidSpec(format!(
                    "level {} has an empty label set",
                    level.level
                )));
            }
            let constrained = if level.level == 0 { 0 } else { i - 1 };
            let allowed = &levels[constrained].labels;
            for (li, lj, _, _) in level.table.entries() {
                for l in [li, lj] {
                    if !allowed.contains(l) {
                        return Err(HierarchyError::InvalidSpec(format!(
                            "table for level {} references `{l}`, not a level-{} label",
                            level.level, constrained
                        )));
                    }
                }
            }
        }
        let spec = Self { levels, catalog };
        for (parent, children) in &spec.catalog {
            let h = spec.level_of_label(parent).ok_or_else(|| {
                HierarchyError::InvalidSpec(format!("catalog parent `{parent}` is not a label"))
            })?;
            if h == 0 {
                return Err(HierarchyError::InvalidSpec(format!(
                    "catalog parent `{parent}` is a level-0 label"
                )));
            }
            let child_labels = &spec.levels[(h - 1) as usize].labels;
            for c in children {
                if !child_labels.contains(c) {
                    return Err(HierarchyError::InvalidSpec(format!(
                        "catalog for `{parent}` names `{c}`, not a level-{} label",
                        h - 1
                    )));
                }
            }
        }
        Ok(spec)
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    pub fn level(&self, h: u32) -> Option<&LevelSpec> {
        self.levels.get(h as usize)
    }

    /// Required child-label multiset for a composite label, if declared.
    pub fn catalog(&self, parent: &Label) -> Option<&[Label]> {
        self.catalog.get(parent).map(Vec::as_slice)
    }

    fn level_of_label(&self, label: &Label) -> Option<u32> {
        self.levels
            .iter()
            .find(|l| l.labels.contains(label))
            .map(|l| l.level)
    }
}

/// A labelled interval at some level together with its child nodes
/// (empty at level 0).
///
/// Construction enforces that every child sits exactly one level below and
/// inside the parent's span; temporal admissibility and catalog matching
/// are scored by [`psi_c`], not enforced here.
#[derive(Debug, Clone)]
pub struct AnnotatedNode {
    interval: ActionInterval,
    level: u32,
    children: Vec<AnnotatedNode>,
}

impl AnnotatedNode {
    /// A level-0 leaf.
    pub fn leaf(interval: ActionInterval) -> Self {
        Self {
            interval,
            level: 0,
            children: Vec::new(),
        }
    }

    pub fn new(
        interval: ActionInterval,
        level: u32,
        children: Vec<AnnotatedNode>,
    ) -> Result<Self, HierarchyError> {
        for child in &children {
            if child.level + 1 != level {
                return Err(HierarchyError::InvalidSpec(format!(
                    "child {} at level {} under parent at level {level}",
                    child.interval, child.level
                )));
            }
            if child.interval.start() < interval.start() || child.interval.end() > interval.end() {
                return Err(HierarchyError::InvalidSpec(format!(
                    "child {} outside parent span {}",
                    child.interval, interval
                )));
            }
        }
        Ok(Self {
            interval,
            level,
            children,
        })
    }

    pub fn interval(&self) -> &ActionInterval {
        &self.interval
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn children(&self) -> &[AnnotatedNode] {
        &self.children
    }

    /// The same tree with every interval shifted by `delta` samples.
    pub fn shifted(&self, delta: i64) -> Result<Self, HierarchyError> {
        let shift = |iv: &ActionInterval| -> Result<ActionInterval, HierarchyError> {
            let s = iv.start() as i64 + delta;
            let e = iv.end() as i64 + delta;
            if s < 1 {
                return Err(HierarchyError::InvalidSpec(format!(
                    "shift by {delta} pushes {iv} before sample 1"
                )));
            }
            Ok(ActionInterval::new(iv.label().clone(), s as usize, e as usize)?)
        };
        let children = self
            .children
            .iter()
            .map(|c| c.shifted(delta))
            .collect::<Result<Vec<_>, _>>()?;
        AnnotatedNode::new(shift(&self.interval)?, self.level, children)
    }
}

impl fmt::Display for AnnotatedNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{} {}", self.level, self.interval)
    }
}

/// Map a time instant to the label of the unique covering interval.
///
/// Returns `Ok(None)` for uncovered instants and an `Ambiguous` error when
/// two intervals of the (single-chain) configuration cover `t`.
pub fn time_to_label(config: &Configuration, t: usize) -> Result<Option<Label>, HierarchyError> {
    let mut found: Option<&ActionInterval> = None;
    for iv in &config.intervals {
        if iv.covers(t) {
            if let Some(prev) = found {
                return Err(HierarchyError::Ambiguous {
                    t,
                    first: prev.label().clone(),
                    second: iv.label().clone(),
                });
            }
            found = Some(iv);
        }
    }
    Ok(found.map(|iv| iv.label().clone()))
}

/// Composition consistency of one composite node, checking all child pairs.
pub fn psi_c(parent: &AnnotatedNode, spec: &HierarchySpec) -> Result<f64, HierarchyError> {
    psi_c_with_pairs(parent, spec, &PairPolicy::AllPairs)
}

/// Composition consistency of one composite node against its declared
/// child catalog and the level's composition table.
///
/// The score is 0 unless (a) the child label multiset matches the catalog,
/// (b) every child span lies inside the parent span, and (c) the parent
/// span equals the hull of the child spans. When (a)-(c) hold the score is
/// the product of pairwise child plausibilities over `policy` (1 for hard
/// admissible patterns, a (0,1] product for soft tables). Structural
/// violations yield 0 even in soft mode.
pub fn psi_c_with_pairs(
    parent: &AnnotatedNode,
    spec: &HierarchySpec,
    policy: &PairPolicy,
) -> Result<f64, HierarchyError> {
    if parent.level == 0 {
        return Err(HierarchyError::NotComposite(0));
    }
    let required = spec
        .catalog(parent.interval.label())
        .ok_or_else(|| HierarchyError::UnknownParentLabel(parent.interval.label().clone()))?;

    // (a) exact child-label multiset.
    let have: Vec<Label> = parent
        .children
        .iter()
        .map(|c| c.interval.label().clone())
        .collect();
    if multiset(&have) != multiset(required) {
        return Ok(0.0);
    }

    // (b) containment and (c) hull. Containment is also a construction
    // invariant; rechecking keeps the score total on any input.
    if !parent.children.is_empty() {
        let hull_start = parent.children.iter().map(|c| c.interval.start()).min();
        let hull_end = parent.children.iter().map(|c| c.interval.end()).max();
        let inside = parent.children.iter().all(|c| {
            c.interval.start() >= parent.interval.start()
                && c.interval.end() <= parent.interval.end()
        });
        if !inside
            || hull_start != Some(parent.interval.start())
            || hull_end != Some(parent.interval.end())
        {
            return Ok(0.0);
        }
    }

    // (d) pairwise admissibility under the parent level's table.
    let table = &spec
        .level(parent.level)
        .ok_or_else(|| {
            HierarchyError::InvalidSpec(format!("no level {} in spec", parent.level))
        })?
        .table;
    let config = Configuration::new(
        parent.level - 1,
        parent.children.iter().map(|c| c.interval.clone()).collect(),
    );
    Ok(check_configuration(&config, table, policy).score)
}

/// One node whose composition score is 0, identified by its child-index
/// path from the forest root.
#[derive(Debug, Clone)]
pub struct NodeViolation {
    pub path: Vec<usize>,
    pub label: Label,
    pub score: f64,
}

/// Outcome of [`validate_hierarchy`]: the product of per-node composition
/// scores plus the list of violating nodes and non-fatal warnings.
#[derive(Debug, Clone)]
pub struct HierarchyReport {
    pub score: f64,
    pub violations: Vec<NodeViolation>,
    pub warnings: Vec<String>,
}

/// Score a forest of annotated trees: the product of [`psi_c`] over every
/// node at level >= 1, recursing to level 0. The empty forest scores 1.
///
/// Overlapping same-level intervals are reported as warnings, not
/// rejected.
pub fn validate_hierarchy(
    roots: &[AnnotatedNode],
    spec: &HierarchySpec,
) -> Result<HierarchyReport, HierarchyError> {
    fn walk(
        node: &AnnotatedNode,
        spec: &HierarchySpec,
        path: &mut Vec<usize>,
        report: &mut HierarchyReport,
    ) -> Result<(), HierarchyError> {
        if node.level >= 1 {
            let s = psi_c(node, spec)?;
            report.score *= s;
            if s == 0.0 {
                report.violations.push(NodeViolation {
                    path: path.clone(),
                    label: node.interval.label().clone(),
                    score: s,
                });
            }
        }
        for (i, child) in node.children.iter().enumerate() {
            path.push(i);
            walk(child, spec, path, report)?;
            path.pop();
        }
        Ok(())
    }

    let mut report = HierarchyReport {
        score: 1.0,
        violations: Vec::new(),
        warnings: Vec::new(),
    };
    let mut path = Vec::new();
    for (i, root) in roots.iter().enumerate() {
        path.push(i);
        walk(root, spec, &mut path, &mut report)?;
        path.pop();
    }

    // Warn on overlapping intervals at the same level (concurrent
    // composites are unusual but not rejected).
    let mut by_level: BTreeMap<u32, Vec<&ActionInterval>> = BTreeMap::new();
    fn collect<'a>(node: &'a AnnotatedNode, by_level: &mut BTreeMap<u32, Vec<&'a ActionInterval>>) {
        by_level.entry(node.level).or_default().push(&node.interval);
        for c in &node.children {
            collect(c, by_level);
        }
    }
    for root in roots {
        collect(root, &mut by_level);
    }
    for (level, intervals) in &by_level {
        if *level == 0 {
            continue;
        }
        for i in 0..intervals.len() {
            for j in (i + 1)..intervals.len() {
                let (a, b) = (intervals[i], intervals[j]);
                if a.start() <= b.end() && b.start() <= a.end() {
                    report.warnings.push(format!(
                        "level-{level} intervals {a} and {b} overlap"
                    ));
                }
            }
        }
    }
    Ok(report)
}

// --- hierarchy file format ------------------------------------------------
//
//   [level 0] labels=reach,grasp
//   [level 1] labels=handover
//   [catalog] parent=handover children=reach,grasp
//   mode=HARD default=ALL
//   1 reach grasp BEFORE 1.0

/// Parse a hierarchy spec from its sectioned text format.
pub fn parse_hierarchy(text: &str) -> Result<HierarchySpec, HierarchyError> {
    let mut level_labels: BTreeMap<u32, Vec<Label>> = BTreeMap::new();
    let mut catalog: HashMap<Label, Vec<Label>> = HashMap::new();
    let mut table_block = String::new();
    let mut header: Option<(TableMode, DefaultPolicy)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("[level") {
            let (h_str, tail) = rest.split_once(']').ok_or(HierarchyError::Parse {
                line: line_no,
                msg: "malformed [level h] section".into(),
            })?;
            let h: u32 = h_str.trim().parse().map_err(|_| HierarchyError::Parse {
                line: line_no,
                msg: format!("bad level index `{}`", h_str.trim()),
            })?;
            let labels_field = tail.trim().strip_prefix("labels=").ok_or(HierarchyError::Parse {
                line: line_no,
                msg: "expected labels=... after [level h]".into(),
            })?;
            let labels: Vec<Label> = labels_field
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(Label::from)
                .collect();
            level_labels.insert(h, labels);
        } else if let Some(rest) = line.strip_prefix("[catalog]") {
            let mut parent = None;
            let mut children = None;
            for field in rest.split_whitespace() {
                match field.split_once('=') {
                    Some(("parent", p)) => parent = Some(Label::from(p)),
                    Some(("children", c)) => {
                        children = Some(
                            c.split(',')
                                .map(str::trim)
                                .filter(|s| !s.is_empty())
                                .map(Label::from)
                                .collect::<Vec<_>>(),
                        )
                    }
                    _ => {
                        return Err(HierarchyError::Parse {
                            line: line_no,
                            msg: format!("unrecognised catalog field `{field}`"),
                        })
                    }
                }
            }
            match (parent, children) {
                (Some(p), Some(c)) => {
                    catalog.insert(p, c);
                }
                _ => {
                    return Err(HierarchyError::Parse {
                        line: line_no,
                        msg: "[catalog] needs parent= and children=".into(),
                    })
                }
            }
        } else {
            if line.starts_with("mode=") {
                let mut m = None;
                let mut d = None;
                for field in line.split_whitespace() {
                    match field.split_once('=') {
                        Some(("mode", "HARD")) => m = Some(TableMode::Hard),
                        Some(("mode", "SOFT")) => m = Some(TableMode::Soft),
                        Some(("default", "ALL")) => d = Some(DefaultPolicy::AllAdmissible),
                        Some(("default", "NONE")) => d = Some(DefaultPolicy::NoneAdmissible),
                        _ => {}
                    }
                }
                if let (Some(m), Some(d)) = (m, d) {
                    header = Some((m, d));
                }
            }
            table_block.push_str(line);
            table_block.push('\n');
        }
    }

    let (mode, default_policy) = header.unwrap_or((TableMode::Hard, DefaultPolicy::AllAdmissible));
    let mut tables = if table_block.is_empty() {
        BTreeMap::new()
    } else {
        parse_tables(&table_block)?
    };

    let levels = level_labels
        .into_iter()
        .map(|(h, labels)| LevelSpec {
            level: h,
            labels,
            table: tables
                .remove(&h)
                .unwrap_or_else(|| CompositionTable::new(mode, default_policy)),
        })
        .collect();
    HierarchySpec::new(levels, catalog)
}

/// Load a hierarchy spec from a file.
pub fn load_hierarchy(path: impl AsRef<Path>) -> Result<HierarchySpec, HierarchyError> {
    parse_hierarchy(&fs::read_to_string(path)?)
}

/// Serialize a spec back to the sectioned text format.
pub fn hierarchy_to_string(spec: &HierarchySpec) -> String {
    let mut out = String::new();
    for level in spec.levels() {
        let labels: Vec<&str> = level.labels.iter().map(Label::as_str).collect();
        out.push_str(&format!("[level {}] labels={}\n", level.level, labels.join(",")));
    }
    let mut parents: Vec<_> = spec.catalog.keys().collect();
    parents.sort();
    for parent in parents {
        let children: Vec<&str> = spec.catalog[parent].iter().map(Label::as_str).collect();
        out.push_str(&format!(
            "[catalog] parent={parent} children={}\n",
            children.join(",")
        ));
    }
    let tables: BTreeMap<u32, CompositionTable> = spec
        .levels()
        .iter()
        .map(|l| (l.level, l.table.clone()))
        .collect();
    out.push_str(&tables_to_string(&tables));
    out
}

//! Allen interval relations between labelled action intervals.
//!
//! An [`ActionInterval`] is a labelled span of inclusive sample indices.
//! Exactly one of the 13 Allen relations holds between any two valid
//! intervals, determined purely by endpoint comparisons. A
//! [`CompositionTable`] declares which relations are admissible between
//! ordered label pairs and scores them with hard (0/1) or soft (0,1]
//! plausibility weights; [`check_configuration`] multiplies those scores
//! over a selected set of interval pairs.
//!
//! Boundary convention: endpoints are inclusive, and `meets` holds when
//! `e_i == s_j`, so meeting intervals share one sample. Consequently two
//! back-to-back segments of a contiguous segmentation (`e_i + 1 == s_j`)
//! are related by `before`, not `meets`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

/// A discrete action label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(String);

impl Label {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for Label {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Errors from interval construction, table construction, and table I/O.
#[derive(Debug, Error)]
pub enum AllenError {
    #[error("invalid interval [{start}, {end}]: need 1 <= start < end")]
    InvalidInterval { start: usize, end: usize },
    #[error("invalid plausibility weight {weight}: need 0 < w <= 1")]
    InvalidWeight { weight: f64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A labelled time interval over inclusive sample indices.
///
/// Invariant: `1 <= start < end`, so every interval spans at least two
/// samples and `duration() >= 2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionInterval {
    label: Label,
    start: usize,
    end: usize,
}

impl ActionInterval {
    pub fn new(label: impl Into<Label>, start: usize, end: usize) -> Result<Self, AllenError> {
        if start < 1 || start >= end {
            return Err(AllenError::InvalidInterval { start, end });
        }
        Ok(Self {
            label: label.into(),
            start,
            end,
        })
    }

    pub fn label(&self) -> &Label {
        &self.label
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    /// Number of samples covered, `end - start + 1`.
    pub fn duration(&self) -> usize {
        self.end - self.start + 1
    }

    /// Whether sample index `t` falls inside the (inclusive) span.
    pub fn covers(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }
}

impl fmt::Display for ActionInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}, {}]", self.label, self.start, self.end)
    }
}

/// The 13 Allen relations. `Equals` is its own converse; the remaining
/// twelve pair off bijectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AllenRelation {
    Before,
    Meets,
    Overlaps,
    Starts,
    During,
    Finishes,
    Equals,
    After,
    MetBy,
    OverlappedBy,
    StartedBy,
    Contains,
    FinishedBy,
}

impl AllenRelation {
    /// All 13 relations in a fixed order.
    pub const ALL: [AllenRelation; 13] = [
        AllenRelation::Before,
        AllenRelation::Meets,
        AllenRelation::Overlaps,
        AllenRelation::Starts,
        AllenRelation::During,
        AllenRelation::Finishes,
        AllenRelation::Equals,
        AllenRelation::After,
        AllenRelation::MetBy,
        AllenRelation::OverlappedBy,
        AllenRelation::StartedBy,
        AllenRelation::Contains,
        AllenRelation::FinishedBy,
    ];

    /// The converse relation: `classify_relation(b, a) ==
    /// converse(classify_relation(a, b))`.
    pub fn converse(self) -> AllenRelation {
        match self {
            AllenRelation::Before => AllenRelation::After,
            AllenRelation::Meets => AllenRelation::MetBy,
            AllenRelation::Overlaps => AllenRelation::OverlappedBy,
            AllenRelation::Starts => AllenRelation::StartedBy,
            AllenRelation::During => AllenRelation::Contains,
            AllenRelation::Finishes => AllenRelation::FinishedBy,
            AllenRelation::Equals => AllenRelation::Equals,
            AllenRelation::After => AllenRelation::Before,
            AllenRelation::MetBy => AllenRelation::Meets,
            AllenRelation::OverlappedBy => AllenRelation::Overlaps,
            AllenRelation::StartedBy => AllenRelation::Starts,
            AllenRelation::Contains => AllenRelation::During,
            AllenRelation::FinishedBy => AllenRelation::Finishes,
        }
    }

    /// Upper-case name as used in composition-table files.
    pub fn name(self) -> &'static str {
        match self {
            AllenRelation::Before => "BEFORE",
            AllenRelation::Meets => "MEETS",
            AllenRelation::Overlaps => "OVERLAPS",
            AllenRelation::Starts => "STARTS",
            AllenRelation::During => "DURING",
            AllenRelation::Finishes => "FINISHES",
            AllenRelation::Equals => "EQUALS",
            AllenRelation::After => "AFTER",
            AllenRelation::MetBy => "MET_BY",
            AllenRelation::OverlappedBy => "OVERLAPPED_BY",
            AllenRelation::StartedBy => "STARTED_BY",
            AllenRelation::Contains => "CONTAINS",
            AllenRelation::FinishedBy => "FINISHED_BY",
        }
    }

    /// Classify the relation between two spans given as raw endpoints.
    ///
    /// Callers must guarantee `s < e` for both spans; [`classify_relation`]
    /// is the checked entry point.
    pub fn from_endpoints(s_a: usize, e_a: usize, s_b: usize, e_b: usize) -> AllenRelation {
        use std::cmp::Ordering::*;
        if e_a < s_b {
            return AllenRelation::Before;
        }
        if e_a == s_b {
            return AllenRelation::Meets;
        }
        if e_b < s_a {
            return AllenRelation::After;
        }
        if e_b == s_a {
            return AllenRelation::MetBy;
        }
        // Spans share more than a boundary sample.
        match (s_a.cmp(&s_b), e_a.cmp(&e_b)) {
            (Equal, Equal) => AllenRelation::Equals,
            (Equal, Less) => AllenRelation::Starts,
            (Equal, Greater) => AllenRelation::StartedBy,
            (Less, Less) => AllenRelation::Overlaps,
            (Less, Equal) => AllenRelation::FinishedBy,
            (Less, Greater) => AllenRelation::Contains,
            (Greater, Greater) => AllenRelation::OverlappedBy,
            (Greater, Equal) => AllenRelation::Finishes,
            (Greater, Less) => AllenRelation::During,
        }
    }
}

impl fmt::Display for AllenRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AllenRelation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AllenRelation::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown Allen relation `{s}`"))
    }
}

/// The unique Allen relation holding between `a` and `b`.
pub fn classify_relation(a: &ActionInterval, b: &ActionInterval) -> AllenRelation {
    AllenRelation::from_endpoints(a.start, a.end, b.start, b.end)
}

/// Hard tables force every stored weight to 1; soft tables keep weights in
/// (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableMode {
    Hard,
    Soft,
}

/// How a table resolves label pairs it has no entry for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefaultPolicy {
    /// Unconstrained pairs admit every relation with weight 1.
    AllAdmissible,
    /// Unconstrained pairs admit nothing.
    NoneAdmissible,
}

/// Admissible Allen relations per ordered label pair, with plausibility
/// weights.
///
/// Entries are stored for ordered pairs; admitting `r` for `(a, b)` does
/// not imply admitting `converse(r)` for `(b, a)`. [`Self::symmetry_warnings`]
/// flags tables where the implied converse entry is missing.
#[derive(Debug, Clone)]
pub struct CompositionTable {
    mode: TableMode,
    default_policy: DefaultPolicy,
    entries: HashMap<(Label, Label), HashMap<AllenRelation, f64>>,
}

impl CompositionTable {
    pub fn new(mode: TableMode, default_policy: DefaultPolicy) -> Self {
        Self {
            mode,
            default_policy,
            entries: HashMap::new(),
        }
    }

    pub fn mode(&self) -> TableMode {
        self.mode
    }

    pub fn default_policy(&self) -> DefaultPolicy {
        self.default_policy
    }

    /// Admit `rel` for the ordered pair `(li, lj)` with weight 1.
    pub fn allow(&mut self, li: impl Into<Label>, lj: impl Into<Label>, rel: AllenRelation) {
        self.allow_weighted(li, lj, rel, 1.0)
            .expect("weight 1 is always valid");
    }

    /// Admit `rel` for `(li, lj)` with the given weight. Hard tables force
    /// the stored weight to 1 regardless of the argument.
    pub fn allow_weighted(
        &mut self,
        li: impl Into<Label>,
        lj: impl Into<Label>,
        rel: AllenRelation,
        weight: f64,
    ) -> Result<(), AllenError> {
        if !(weight > 0.0 && weight <= 1.0) || !weight.is_finite() {
            return Err(AllenError::InvalidWeight { weight });
        }
        let stored = match self.mode {
            TableMode::Hard => 1.0,
            TableMode::Soft => weight,
        };
        self.entries
            .entry((li.into(), lj.into()))
            .or_default()
            .insert(rel, stored);
        Ok(())
    }

    /// Weight assigned to observing `rel` between labels `(la, lb)`:
    /// the stored weight if admitted, 0 if the pair has an entry excluding
    /// `rel`, and the default policy's value for absent pairs.
    pub fn relation_weight(&self, la: &Label, lb: &Label, rel: AllenRelation) -> f64 {
        match self.entries.get(&(la.clone(), lb.clone())) {
            Some(admitted) => admitted.get(&rel).copied().unwrap_or(0.0),
            None => match self.default_policy {
                DefaultPolicy::AllAdmissible => 1.0,
                DefaultPolicy::NoneAdmissible => 0.0,
            },
        }
    }

    /// Ordered label pairs whose converse entry is missing or mismatched.
    /// Asymmetry is legal; the warnings only surface it.
    pub fn symmetry_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort();
        for (li, lj) in keys {
            let admitted = &self.entries[&(li.clone(), lj.clone())];
            let mut rels: Vec<_> = admitted.keys().copied().collect();
            rels.sort();
            for rel in rels {
                let back = self
                    .entries
                    .get(&(lj.clone(), li.clone()))
                    .and_then(|m| m.get(&rel.converse()));
                if back.is_none() {
                    warnings.push(format!(
                        "({li}, {lj}) admits {rel} but ({lj}, {li}) does not admit {}",
                        rel.converse()
                    ));
                }
            }
        }
        warnings
    }

    /// Iterate stored entries in a deterministic order.
    pub fn entries(&self) -> impl Iterator<Item = (&Label, &Label, AllenRelation, f64)> {
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort();
        keys.into_iter().flat_map(move |pair| {
            let mut rels: Vec<_> = self.entries[pair].iter().map(|(r, w)| (*r, *w)).collect();
            rels.sort_by_key(|(r, _)| *r);
            rels.into_iter().map(move |(r, w)| (&pair.0, &pair.1, r, w))
        })
    }
}

/// Plausibility of the observed relation between `a` and `b` under `table`.
///
/// Hard tables yield 1 if the observed relation is admitted for
/// `(label(a), label(b))` and 0 otherwise; soft tables yield the stored
/// weight. Absent pairs resolve through the table's default policy.
pub fn plausibility(a: &ActionInterval, b: &ActionInterval, table: &CompositionTable) -> f64 {
    table.relation_weight(a.label(), b.label(), classify_relation(a, b))
}

/// A finite set of labelled intervals at one hierarchy level.
#[derive(Debug, Clone)]
pub struct Configuration {
    pub level: u32,
    pub intervals: Vec<ActionInterval>,
}

impl Configuration {
    pub fn new(level: u32, intervals: Vec<ActionInterval>) -> Self {
        Self { level, intervals }
    }
}

/// Which interval pairs a configuration check covers.
///
/// `AllPairs` and `ConsecutiveOnly` order intervals by `(start, end,
/// label)` first, so the outcome does not depend on list order. Explicit
/// pairs refer to indices in the given list.
#[derive(Debug, Clone)]
pub enum PairPolicy {
    AllPairs,
    ConsecutiveOnly,
    Explicit(Vec<(usize, usize)>),
}

/// One inadmissible pair: interval indices into the configuration's list
/// and the relation that was observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairViolation {
    pub i: usize,
    pub j: usize,
    pub relation: AllenRelation,
}

/// Outcome of [`check_configuration`].
#[derive(Debug, Clone)]
pub struct AdmissibilityReport {
    /// Product of pairwise plausibilities over the selected pairs.
    pub score: f64,
    /// Every selected pair that scored 0.
    pub violations: Vec<PairViolation>,
}

impl AdmissibilityReport {
    pub fn is_admissible(&self) -> bool {
        self.score > 0.0
    }
}

fn sorted_index_order(intervals: &[ActionInterval]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..intervals.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &intervals[i];
        let b = &intervals[j];
        (a.start, a.end, a.label())
            .cmp(&(b.start, b.end, b.label()))
    });
    order
}

/// Score a configuration as the product of pairwise plausibilities over
/// the pairs selected by `policy`, listing every zero-weight pair.
///
/// The empty product is 1, so an empty configuration (or empty pair set)
/// is admissible with score 1.
pub fn check_configuration(
    config: &Configuration,
    table: &CompositionTable,
    policy: &PairPolicy,
) -> AdmissibilityReport {
    let intervals = &config.intervals;
    let pairs: Vec<(usize, usize)> = match policy {
        PairPolicy::AllPairs => {
            let order = sorted_index_order(intervals);
            let mut pairs = Vec::new();
            for i in 0..order.len() {
                for j in (i + 1)..order.len() {
                    pairs.push((order[i], order[j]));
                }
            }
            pairs
        }
        PairPolicy::ConsecutiveOnly => {
            let order = sorted_index_order(intervals);
            order.windows(2).map(|w| (w[0], w[1])).collect()
        }
        PairPolicy::Explicit(list) => list.clone(),
    };

    let mut score = 1.0;
    let mut violations = Vec::new();
    for (i, j) in pairs {
        let w = plausibility(&intervals[i], &intervals[j], table);
        if w == 0.0 {
            violations.push(PairViolation {
                i,
                j,
                relation: classify_relation(&intervals[i], &intervals[j]),
            });
        }
        score *= w;
    }
    AdmissibilityReport { score, violations }
}

// --- composition-table file format --------------------------------------
//
// Line-oriented text, UTF-8:
//
//   mode=HARD|SOFT default=ALL|NONE
//   # comment
//   <level> <label_i> <label_j> <RELATION> <weight>

/// Parse composition tables (one per level) from file contents.
pub fn parse_tables(text: &str) -> Result<BTreeMap<u32, CompositionTable>, AllenError> {
    let mut mode = None;
    let mut default_policy = None;
    let mut tables: BTreeMap<u32, CompositionTable> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with("mode=") {
            let mut m = None;
            let mut d = None;
            for field in line.split_whitespace() {
                match field.split_once('=') {
                    Some(("mode", "HARD")) => m = Some(TableMode::Hard),
                    Some(("mode", "SOFT")) => m = Some(TableMode::Soft),
                    Some(("default", "ALL")) => d = Some(DefaultPolicy::AllAdmissible),
                    Some(("default", "NONE")) => d = Some(DefaultPolicy::NoneAdmissible),
                    _ => {
                        return Err(AllenError::Parse {
                            line: line_no,
                            msg: format!("unrecognised header field `{field}`"),
                        })
                    }
                }
            }
            mode = m;
            default_policy = d;
            if mode.is_none() || default_policy.is_none() {
                return Err(AllenError::Parse {
                    line: line_no,
                    msg: "header must set both mode= and default=".into(),
                });
            }
            continue;
        }

        let (mode, default_policy) = match (mode, default_policy) {
            (Some(m), Some(d)) => (m, d),
            _ => {
                return Err(AllenError::Parse {
                    line: line_no,
                    msg: "entry before `mode=... default=...` header".into(),
                })
            }
        };

        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(AllenError::Parse {
                line: line_no,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let level: u32 = fields[0].parse().map_err(|_| AllenError::Parse {
            line: line_no,
            msg: format!("bad level `{}`", fields[0]),
        })?;
        let rel: AllenRelation = fields[3].parse().map_err(|msg| AllenError::Parse {
            line: line_no,
            msg,
        })?;
        let weight: f64 = fields[4].parse().map_err(|_| AllenError::Parse {
            line: line_no,
            msg: format!("bad weight `{}`", fields[4]),
        })?;

        tables
            .entry(level)
            .or_insert_with(|| CompositionTable::new(mode, default_policy))
            .allow_weighted(fields[1], fields[2], rel, weight)
            .map_err(|e| AllenError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
    }
    Ok(tables)
}

/// Load composition tables from a file in the line-oriented text format.
pub fn load_tables(path: impl AsRef<Path>) -> Result<BTreeMap<u32, CompositionTable>, AllenError> {
    parse_tables(&fs::read_to_string(path)?)
}

/// Serialize tables back to the file format. All tables must share one
/// mode and default policy, which become the file header.
pub fn tables_to_string(tables: &BTreeMap<u32, CompositionTable>) -> String {
    let mut out = String::new();
    let (mode, default_policy) = tables
        .values()
        .next()
        .map(|t| (t.mode, t.default_policy))
        .unwrap_or((TableMode::Hard, DefaultPolicy::AllAdmissible));
    out.push_str(&format!(
        "mode={} default={}\n",
        match mode {
            TableMode::Hard => "HARD",
            TableMode::Soft => "SOFT",
        },
        match default_policy {
            DefaultPolicy::AllAdmissible => "ALL",
            DefaultPolicy::NoneAdmissible => "NONE",
        }
    ));
    for (level, table) in tables {
        for (li, lj, rel, w) in table.entries() {
            out.push_str(&format!("{level} {li} {lj} {rel} {w}\n"));
        }
    }
    out
}

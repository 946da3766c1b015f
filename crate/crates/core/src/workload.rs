//! Lattice-surgery workloads: a 2-D logical-qubit layout plus a layered stream
//! of low-level instructions (LLI).
//!
//! The text form is line oriented:
//!
//! ```text
//! # comment
//! NAME bell4
//! DESCRIPTION hand-written fixture
//! LAYOUT 2 2
//! QUBIT q0 0 0
//! QUBIT q1 0 1
//! LAYER 0
//!   OP MERGE q0 q1
//! LAYER 1
//!   CRITICAL q0
//! ```
//!
//! Patches that have no explicit instruction in a layer idle implicitly. The
//! layer count is one past the highest `LAYER` index. `CRITICAL q` marks the
//! instruction covering `q` in the current layer.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<WorkloadError>,
    },
    #[error("qubit `{name}` at ({row}, {col}) lies outside the {rows}x{cols} layout")]
    OutOfBounds {
        name: String,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("qubits `{first}` and `{second}` share coordinate ({row}, {col})")]
    DuplicateCoordinate {
        first: String,
        second: String,
        row: usize,
        col: usize,
    },
    #[error("qubit `{0}` declared twice")]
    DuplicateQubit(String),
    #[error("unknown qubit `{0}`")]
    UnknownQubit(String),
    #[error("layer {layer}: MERGE route {patches:?} is not 4-connected")]
    DisconnectedRoute { layer: usize, patches: Vec<String> },
    #[error("layer {layer}: patch `{qubit}` appears in more than one instruction")]
    DuplicatePatch { layer: usize, qubit: String },
    #[error("layer {layer}: {kind} takes {expected} patch(es), got {got}")]
    Arity {
        layer: usize,
        kind: OpKind,
        expected: &'static str,
        got: usize,
    },
    #[error("layer {layer}: patch `{qubit}` has no instruction")]
    MissingPatch { layer: usize, qubit: String },
    #[error("layout must have positive dimensions and at least one qubit")]
    EmptyLayout,
    #[error("workload declares no layers")]
    NoLayers,
    #[error("{critical} critical instructions exceed the {layers} layers of the workload")]
    CriticalOverflow { critical: usize, layers: usize },
    #[error("infeasible generator parameters: {0}")]
    InfeasibleParams(String),
}

impl WorkloadError {
    fn at(self, line: usize) -> Self {
        match self {
            e @ (WorkloadError::Syntax { .. } | WorkloadError::AtLine { .. }) => e,
            e => WorkloadError::AtLine {
                line,
                source: Box::new(e),
            },
        }
    }
}

/// Lattice-surgery instruction kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Idle,
    Merge,
    Rotate,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Idle => "IDLE",
            OpKind::Merge => "MERGE",
            OpKind::Rotate => "ROTATE",
        }
    }

    fn parse(token: &str) -> Option<Self> {
        match token {
            "IDLE" => Some(OpKind::Idle),
            "MERGE" => Some(OpKind::Merge),
            "ROTATE" => Some(OpKind::Rotate),
            _ => None,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn is_adjacent(self, other: Coord) -> bool {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col) == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QubitDecl {
    pub name: String,
    pub coord: Coord,
}

/// A `rows x cols` grid holding named logical qubits at distinct cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicalLayout {
    rows: usize,
    cols: usize,
    qubits: Vec<QubitDecl>,
    grid: Vec<Option<usize>>,
}

impl LogicalLayout {
    pub fn new(rows: usize, cols: usize, qubits: Vec<QubitDecl>) -> Result<Self, WorkloadError> {
        if rows == 0 || cols == 0 || qubits.is_empty() {
            return Err(WorkloadError::EmptyLayout);
        }
        let mut grid = vec![None::<usize>; rows * cols];
        let mut names = BTreeMap::new();
        for (idx, q) in qubits.iter().enumerate() {
            if names.insert(q.name.as_str(), idx).is_some() {
                return Err(WorkloadError::DuplicateQubit(q.name.clone()));
            }
            if q.coord.row >= rows || q.coord.col >= cols {
                return Err(WorkloadError::OutOfBounds {
                    name: q.name.clone(),
                    row: q.coord.row,
                    col: q.coord.col,
                    rows,
                    cols,
                });
            }
            let cell = &mut grid[q.coord.row * cols + q.coord.col];
            if let Some(prev) = *cell {
                return Err(WorkloadError::DuplicateCoordinate {
                    first: qubits[prev].name.clone(),
                    second: q.name.clone(),
                    row: q.coord.row,
                    col: q.coord.col,
                });
            }
            *cell = Some(idx);
        }
        Ok(Self {
            rows,
            cols,
            qubits,
            grid,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn qubits(&self) -> &[QubitDecl] {
        &self.qubits
    }

    pub fn n_qubits(&self) -> usize {
        self.qubits.len()
    }

    pub fn coord(&self, qubit: usize) -> Coord {
        self.qubits[qubit].coord
    }

    pub fn name(&self, qubit: usize) -> &str {
        &self.qubits[qubit].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.qubits.iter().position(|q| q.name == name)
    }

    /// Qubit occupying `(row, col)`, if any. Out-of-range coordinates yield `None`.
    pub fn at(&self, row: isize, col: isize) -> Option<usize> {
        if row < 0 || col < 0 || row as usize >= self.rows || col as usize >= self.cols {
            return None;
        }
        self.grid[row as usize * self.cols + col as usize]
    }

    /// Grid neighbours of `qubit` that hold a qubit, in up/down/left/right order.
    pub fn grid_neighbors(&self, qubit: usize) -> impl Iterator<Item = usize> + '_ {
        let c = self.coord(qubit);
        let (r, k) = (c.row as isize, c.col as isize);
        [(r - 1, k), (r + 1, k), (r, k - 1), (r, k + 1)]
            .into_iter()
            .filter_map(move |(rr, cc)| self.at(rr, cc))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub kind: OpKind,
    /// Qubit indices into the layout. MERGE routes hold two or more.
    pub patches: Vec<usize>,
    /// Pauli-frame synchronization point.
    pub critical: bool,
}

impl Instruction {
    pub fn idle(qubit: usize) -> Self {
        Self {
            kind: OpKind::Idle,
            patches: vec![qubit],
            critical: false,
        }
    }

    pub fn merge(patches: Vec<usize>) -> Self {
        Self {
            kind: OpKind::Merge,
            patches,
            critical: false,
        }
    }

    fn sort_key(&self) -> usize {
        self.patches.iter().copied().min().unwrap_or(usize::MAX)
    }
}

/// A validated workload. Every `(qubit, layer)` pair is covered by exactly one
/// instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub name: String,
    pub description: String,
    layout: LogicalLayout,
    layers: Vec<Vec<Instruction>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorkloadStats {
    pub n_lqubits: usize,
    pub n_layers: usize,
    pub n_critical: usize,
    /// `n_critical / n_layers` rounded to four decimals.
    pub critical_density: f64,
}

impl fmt::Display for WorkloadStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lqubits={} layers={} critical={} density={:.2}%",
            self.n_lqubits,
            self.n_layers,
            self.n_critical,
            self.critical_density * 100.0
        )
    }
}

impl Workload {
    /// Builds a workload, filling implicit IDLE instructions and checking every
    /// invariant.
    pub fn new(
        name: impl Into<String>,
        layout: LogicalLayout,
        layers: Vec<Vec<Instruction>>,
    ) -> Result<Self, WorkloadError> {
        if layers.is_empty() {
            return Err(WorkloadError::NoLayers);
        }
        let mut w = Workload {
            name: name.into(),
            description: String::new(),
            layout,
            layers,
        };
        w.fill_and_canonicalize()?;
        Ok(w)
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    fn fill_and_canonicalize(&mut self) -> Result<(), WorkloadError> {
        let n = self.layout.n_qubits();
        let mut n_critical = 0;
        for (t, layer) in self.layers.iter_mut().enumerate() {
            let mut covered = vec![false; n];
            for ins in layer.iter() {
                check_instruction(&self.layout, t, ins)?;
                for &p in &ins.patches {
                    if covered[p] {
                        return Err(WorkloadError::DuplicatePatch {
                            layer: t,
                            qubit: self.layout.name(p).to_string(),
                        });
                    }
                    covered[p] = true;
                }
                n_critical += usize::from(ins.critical);
            }
            for q in (0..n).filter(|&q| !covered[q]) {
                layer.push(Instruction::idle(q));
            }
            layer.sort_by_key(Instruction::sort_key);
        }
        if n_critical > self.layers.len() {
            return Err(WorkloadError::CriticalOverflow {
                critical: n_critical,
                layers: self.layers.len(),
            });
        }
        Ok(())
    }

    pub fn layout(&self) -> &LogicalLayout {
        &self.layout
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Vec<Instruction>] {
        &self.layers
    }

    pub fn layer(&self, t: usize) -> &[Instruction] {
        &self.layers[t]
    }

    /// The instruction covering `qubit` in layer `t`.
    pub fn instruction_of(&self, t: usize, qubit: usize) -> &Instruction {
        self.layers[t]
            .iter()
            .find(|ins| ins.patches.contains(&qubit))
            .expect("workload invariant: every qubit is covered in every layer")
    }

    pub fn stats(&self) -> WorkloadStats {
        workload_stats(self)
    }

    /// Canonical LLI text: layers ascending, instructions ordered by their
    /// lowest declared patch, plain IDLEs left implicit.
    pub fn to_lli(&self) -> String {
        let mut out = String::new();
        if !self.name.is_empty() {
            let _ = writeln!(out, "NAME {}", self.name);
        }
        if !self.description.is_empty() {
            let _ = writeln!(out, "DESCRIPTION {}", self.description);
        }
        let _ = writeln!(out, "LAYOUT {} {}", self.layout.rows, self.layout.cols);
        for q in &self.layout.qubits {
            let _ = writeln!(out, "QUBIT {} {} {}", q.name, q.coord.row, q.coord.col);
        }
        for (t, layer) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "LAYER {t}");
            for ins in layer {
                let first = self.layout.name(ins.patches[0]);
                if ins.kind != OpKind::Idle {
                    let names: Vec<&str> = ins.patches.iter().map(|&p| self.layout.name(p)).collect();
                    let _ = writeln!(out, "  OP {} {}", ins.kind, names.join(" "));
                }
                if ins.critical {
                    let _ = writeln!(out, "  CRITICAL {first}");
                }
            }
        }
        out
    }
}

fn check_instruction(layout: &LogicalLayout, t: usize, ins: &Instruction) -> Result<(), WorkloadError> {
    let n = layout.n_qubits();
    if let Some(&bad) = ins.patches.iter().find(|&&p| p >= n) {
        return Err(WorkloadError::UnknownQubit(format!("#{bad}")));
    }
    match ins.kind {
        OpKind::Idle | OpKind::Rotate if ins.patches.len() != 1 => Err(WorkloadError::Arity {
            layer: t,
            kind: ins.kind,
            expected: "exactly 1",
            got: ins.patches.len(),
        }),
        OpKind::Merge if ins.patches.len() < 2 => Err(WorkloadError::Arity {
            layer: t,
            kind: ins.kind,
            expected: "at least 2",
            got: ins.patches.len(),
        }),
        OpKind::Merge if !is_connected(layout, &ins.patches) => Err(WorkloadError::DisconnectedRoute {
            layer: t,
            patches: ins.patches.iter().map(|&p| layout.name(p).to_string()).collect(),
        }),
        _ => Ok(()),
    }
}

fn is_connected(layout: &LogicalLayout, patches: &[usize]) -> bool {
    let mut seen = vec![false; patches.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        let ci = layout.coord(patches[i]);
        for (j, &pj) in patches.iter().enumerate() {
            if !seen[j] && ci.is_adjacent(layout.coord(pj)) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub fn workload_stats(w: &Workload) -> WorkloadStats {
    let n_critical = w.layers.iter().flatten().filter(|ins| ins.critical).count();
    let n_layers = w.n_layers();
    let density = n_critical as f64 / n_layers as f64;
    WorkloadStats {
        n_lqubits: w.layout.n_qubits(),
        n_layers,
        n_critical,
        critical_density: (density * 1e4).round() / 1e4,
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct Tokens<'a> {
    line: usize,
    items: Vec<(usize, &'a str)>,
}

impl<'a> Tokens<'a> {
    fn new(line: usize, text: &'a str) -> Self {
        let mut items = Vec::new();
        let mut start = None;
        for (i, ch) in text.char_indices() {
            match (ch.is_whitespace(), start) {
                (true, Some(s)) => {
                    items.push((s, &text[s..i]));
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            items.push((s, &text[s..]));
        }
        Self { line, items }
    }

    fn err(&self, idx: usize, message: impl Into<String>) -> WorkloadError {
        let column = self
            .items
            .get(idx)
            .or(self.items.last())
            .map_or(1, |(c, tok)| if idx < self.items.len() { c + 1 } else { c + tok.len() + 1 });
        WorkloadError::Syntax {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn get(&self, idx: usize, what: &str) -> Result<&'a str, WorkloadError> {
        self.items
            .get(idx)
            .map(|(_, t)| *t)
            .ok_or_else(|| self.err(idx, format!("expected {what}")))
    }

    fn number(&self, idx: usize, what: &str) -> Result<usize, WorkloadError> {
        let tok = self.get(idx, what)?;
        tok.parse()
            .map_err(|_| self.err(idx, format!("expected {what}, found `{tok}`")))
    }

    fn expect_len(&self, n: usize) -> Result<(), WorkloadError> {
        if self.items.len() > n {
            Err(self.err(n, "unexpected trailing token"))
        } else {
            Ok(())
        }
    }
}

#[derive(Default)]
struct PendingLayer {
    index: usize,
    ops: Vec<(usize, Instruction)>,
    critical: Vec<(usize, usize)>,
}

/// Parses an LLI document into a validated [`Workload`].
pub fn parse_workload(text: &str) -> Result<Workload, WorkloadError> {
    let mut name = String::new();
    let mut description = String::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut decls: Vec<QubitDecl> = Vec::new();
    let mut decl_lines: Vec<usize> = Vec::new();
    let mut layout: Option<LogicalLayout> = None;
    let mut layers: Vec<Vec<Instruction>> = Vec::new();
    let mut current: Option<PendingLayer> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("");
        let toks = Tokens::new(line, content);
        let Some(&(kw_col, keyword)) = toks.items.first() else {
            continue;
        };
        match keyword {
            "NAME" | "DESCRIPTION" => {
                let rest = content[kw_col + keyword.len()..].trim().to_string();
                if keyword == "NAME" {
                    name = rest;
                } else {
                    description = rest;
                }
            }
            "LAYOUT" => {
                if dims.is_some() {
                    return Err(toks.err(0, "LAYOUT declared twice"));
                }
                let rows = toks.number(1, "row count")?;
                let cols = toks.number(2, "column count")?;
                toks.expect_len(3)?;
                if rows == 0 || cols == 0 {
                    return Err(toks.err(1, "layout dimensions must be positive"));
                }
                dims = Some((rows, cols, line));
            }
            "QUBIT" => {
                if dims.is_none() {
                    return Err(toks.err(0, "QUBIT before LAYOUT"));
                }
                if layout.is_some() {
                    return Err(toks.err(0, "QUBIT after the first LAYER"));
                }
                let qname = toks.get(1, "qubit name")?.to_string();
                let row = toks.number(2, "row")?;
                let col = toks.number(3, "column")?;
                toks.expect_len(4)?;
                decls.push(QubitDecl {
                    name: qname,
                    coord: Coord::new(row, col),
                });
                decl_lines.push(line);
            }
            "LAYER" => {
                if layout.is_none() {
                    let (rows, cols, layout_line) =
                        dims.ok_or_else(|| toks.err(0, "LAYER before LAYOUT"))?;
                    layout = Some(build_layout(rows, cols, &decls, &decl_lines, layout_line)?);
                }
                let t = toks.number(1, "layer index")?;
                toks.expect_len(2)?;
                let lay = layout.as_ref().expect("layout built above");
                if let Some(prev) = current.take() {
                    if t <= prev.index {
                        return Err(toks.err(1, format!("layer {t} does not follow layer {}", prev.index)));
                    }
                    flush_layer(lay, prev, &mut layers)?;
                }
                current = Some(PendingLayer {
                    index: t,
                    ..Default::default()
                });
            }
            "OP" => {
                let lay = layout.as_ref().ok_or_else(|| toks.err(0, "OP outside a LAYER"))?;
                let cur = current.as_mut().ok_or_else(|| toks.err(0, "OP outside a LAYER"))?;
                let kind_tok = toks.get(1, "instruction kind")?;
                let kind = OpKind::parse(kind_tok)
                    .ok_or_else(|| toks.err(1, format!("unknown instruction kind `{kind_tok}`")))?;
                let mut patches = Vec::new();
                for idx in 2..toks.items.len() {
                    let qn = toks.items[idx].1;
                    let q = lay
                        .index_of(qn)
                        .ok_or_else(|| toks.err(idx, format!("unknown qubit `{qn}`")))?;
                    patches.push(q);
                }
                if patches.is_empty() {
                    return Err(toks.err(2, "expected at least one qubit"));
                }
                let ins = Instruction {
                    kind,
                    patches,
                    critical: false,
                };
                check_instruction(lay, cur.index, &ins).map_err(|e| e.at(line))?;
                cur.ops.push((line, ins));
            }
            "CRITICAL" => {
                let lay = layout.as_ref().ok_or_else(|| toks.err(0, "CRITICAL outside a LAYER"))?;
                let cur = current
                    .as_mut()
                    .ok_or_else(|| toks.err(0, "CRITICAL outside a LAYER"))?;
                let qn = toks.get(1, "qubit name")?;
                toks.expect_len(2)?;
                let q = lay
                    .index_of(qn)
                    .ok_or_else(|| toks.err(1, format!("unknown qubit `{qn}`")))?;
                cur.critical.push((line, q));
            }
            other => return Err(toks.err(0, format!("unknown directive `{other}`"))),
        }
    }

    let layout = match (layout, dims) {
        (Some(l), _) => l,
        (None, Some((rows, cols, line))) => build_layout(rows, cols, &decls, &decl_lines, line)?,
        (None, None) => return Err(WorkloadError::EmptyLayout),
    };
    match current.take() {
        Some(last) => flush_layer(&layout, last, &mut layers)?,
        None => return Err(WorkloadError::NoLayers),
    }
    Ok(Workload::new(name, layout, layers)?.with_description(description))
}

fn build_layout(
    rows: usize,
    cols: usize,
    decls: &[QubitDecl],
    decl_lines: &[usize],
    layout_line: usize,
) -> Result<LogicalLayout, WorkloadError> {
    LogicalLayout::new(rows, cols, decls.to_vec()).map_err(|e| {
        let line = match &e {
            WorkloadError::OutOfBounds { name, .. } | WorkloadError::DuplicateQubit(name) => {
                decls.iter().rposition(|d| &d.name == name).map(|i| decl_lines[i])
            }
            WorkloadError::DuplicateCoordinate { second, .. } => {
                decls.iter().rposition(|d| &d.name == second).map(|i| decl_lines[i])
            }
            _ => None,
        };
        e.at(line.unwrap_or(layout_line))
    })
}

fn flush_layer(
    layout: &LogicalLayout,
    pending: PendingLayer,
    layers: &mut Vec<Vec<Instruction>>,
) -> Result<(), WorkloadError> {
    while layers.len() < pending.index {
        layers.push(Vec::new());
    }
    let t = pending.index;
    let mut owner: Vec<Option<usize>> = vec![None; layout.n_qubits()];
    let mut instrs: Vec<Instruction> = Vec::with_capacity(pending.ops.len());
    for (line, ins) in pending.ops {
        for &p in &ins.patches {
            if owner[p].is_some() {
                return Err(WorkloadError::DuplicatePatch {
                    layer: t,
                    qubit: layout.name(p).to_string(),
                }
                .at(line));
            }
            owner[p] = Some(instrs.len());
        }
        instrs.push(ins);
    }
    for (_, q) in pending.critical {
        match owner[q] {
            Some(i) => instrs[i].critical = true,
            None => {
                owner[q] = Some(instrs.len());
                let mut ins = Instruction::idle(q);
                ins.critical = true;
                instrs.push(ins);
            }
        }
    }
    layers.push(instrs);
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Knobs for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub n_lqubits: usize,
    pub n_layers: usize,
    pub critical_density: f64,
    pub merge_probability: f64,
    pub route_length_max: usize,
    #[serde(default)]
    pub rotate_probability: f64,
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InfeasibleParams(m));
        if self.n_lqubits == 0 {
            return bad("n_lqubits must be at least 1".into());
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        for (name, v) in [
            ("critical_density", self.critical_density),
            ("merge_probability", self.merge_probability),
            ("rotate_probability", self.rotate_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.route_length_max > self.n_lqubits {
            return bad(format!(
                "route_length_max = {} exceeds n_lqubits = {}",
                self.route_length_max, self.n_lqubits
            ));
        }
        if self.merge_probability > 0.0 && self.route_length_max < 2 {
            return bad("merges need route_length_max >= 2".into());
        }
        Ok(())
    }

    fn describe(&self, seed: u64) -> String {
        format!(
            "synthetic seed={seed} n_lqubits={} n_layers={} critical_density={} merge_probability={} route_length_max={} rotate_probability={}",
            self.n_lqubits,
            self.n_layers,
            self.critical_density,
            self.merge_probability,
            self.route_length_max,
            self.rotate_probability
        )
    }
}

/// Deterministic random workload.
///
/// Exactly `round(critical_density * n_layers)` layers carry one critical
/// instruction each. On multi-qubit layouts a critical patch always took part
/// in a MERGE within the three preceding layers; a merge is forced into the
/// previous layer when none exists.
pub fn generate_synthetic(params: &SyntheticParams, seed: u64) -> Result<Workload, WorkloadError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.n_lqubits;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let decls = (0..n)
        .map(|i| QubitDecl {
            name: format!("q{i}"),
            coord: Coord::new(i / cols, i % cols),
        })
        .collect();
    let layout = LogicalLayout::new(rows, cols, decls)?;

    // owner[t][q] indexes into layers[t]
    let mut layers: Vec<Vec<Instruction>> = Vec::with_capacity(params.n_layers);
    let mut owners: Vec<Vec<usize>> = Vec::with_capacity(params.n_layers);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..params.n_layers {
        let mut owner = vec![usize::MAX; n];
        let mut instrs = Vec::new();
        order.shuffle(&mut rng);
        for &q in &order {
            if owner[q] != usize::MAX {
                continue;
            }
            if n >= 2 && params.merge_probability > 0.0 && rng.random_bool(params.merge_probability) {
                let target = rng.random_range(2..=params.route_length_max);
                let mut route = vec![q];
                owner[q] = instrs.len();
                while route.len() < target {
                    let mut frontier: Vec<usize> = route
                        .iter()
                        .flat_map(|&m| layout.grid_neighbors(m))
                        .filter(|&c| owner[c] == usize::MAX)
                        .collect();
                    frontier.sort_unstable();
                    frontier.dedup();
                    let Some(&next) = frontier.get(rng.random_range(0..frontier.len().max(1))) else {
                        break;
                    };
                    owner[next] = instrs.len();
                    route.push(next);
                }
                if route.len() >= 2 {
                    instrs.push(Instruction::merge(route));
                    continue;
                }
                owner[q] = usize::MAX;
            }
            owner[q] = instrs.len();
            let kind = if params.rotate_probability > 0.0 && rng.random_bool(params.rotate_probability) {
                OpKind::Rotate
            } else {
                OpKind::Idle
            };
            instrs.push(Instruction {
                kind,
                patches: vec![q],
                critical: false,
            });
        }
        layers.push(instrs);
        owners.push(owner);
    }

    let k = ((params.critical_density * params.n_layers as f64).round() as usize).min(params.n_layers);
    let mut critical_layers: Vec<usize> = if n >= 2 && k < params.n_layers {
        let mut pool: Vec<usize> = (1..params.n_layers).collect();
        pool.shuffle(&mut rng);
        pool.truncate(k);
        pool
    } else {
        let mut pool: Vec<usize> = (0..params.n_layers).collect();
        pool.shuffle(&mut rng);
        pool.truncate(k);
        pool
    };
    critical_layers.sort_unstable();

    for &t in &critical_layers {
        let q = if n >= 2 && t > 0 {
            let recent: Vec<usize> = (0..n)
                .filter(|&q| {
                    (t.saturating_sub(3)..t).any(|s| layers[s][owners[s][q]].kind == OpKind::Merge)
                })
                .collect();
            if recent.is_empty() {
                let q = rng.random_range(0..n);
                force_merge(&layout, &mut layers[t - 1], &mut owners[t - 1], q, &mut rng);
                q
            } else {
                recent[rng.random_range(0..recent.len())]
            }
        } else {
            rng.random_range(0..n)
        };
        let idx = owners[t][q];
        layers[t][idx].critical = true;
    }

    Ok(Workload::new("synthetic", layout, layers)?.with_description(params.describe(seed)))
}

fn force_merge(
    layout: &LogicalLayout,
    layer: &mut Vec<Instruction>,
    owner: &mut [usize],
    q: usize,
    rng: &mut ChaCha8Rng,
) {
    let mut nbrs: Vec<usize> = layout.grid_neighbors(q).collect();
    nbrs.shuffle(rng);
    let single = nbrs.iter().copied().find(|&nb| layer[owner[nb]].kind != OpKind::Merge);
    let q_idx = owner[q];
    let q_critical = layer[q_idx].critical;
    match single {
        Some(nb) => {
            let nb_idx = owner[nb];
            let critical = q_critical || layer[nb_idx].critical;
            layer[nb_idx] = Instruction {
                kind: OpKind::Merge,
                patches: vec![nb, q],
                critical,
            };
            owner[q] = nb_idx;
        }
        None => {
            let m_idx = owner[nbrs[0]];
            layer[m_idx].patches.push(q);
            layer[m_idx].critical |= q_critical;
            owner[q] = m_idx;
        }
    }
    // drop q's old single-patch instruction and reindex
    layer.remove(q_idx);
    for o in owner.iter_mut() {
        if *o > q_idx {
            *o -= 1;
        }
    }
}

//! Text file formats and atomic writes.
//!
//! Every file written here starts with a `#comorbid-<kind>\tv<N>` line.
//! Readers accept files without that line (hand-written inputs) but reject
//! a mismatched kind or version.
//!
//! | file    | body line                                   |
//! |---------|---------------------------------------------|
//! | docs    | `user_id<TAB>text`                          |
//! | labels  | `user_id<TAB>task<TAB>0\|1`                 |
//! | folds   | `user_id<TAB>fold<TAB>train\|dev\|test`     |
//! | vocab   | `order<TAB>ngram<TAB>count<TAB>slot`        |
//! | matrix  | `user_id<TAB>v_0<TAB>...<TAB>v_{d-1}`       |
//!
//! Text fields escape backslash, tab, newline and carriage return as
//! `\\`, `\t`, `\n`, `\r`. The labels header may carry
//! `tasks=name:role,...` to fix the task order; the vocab file carries its
//! featurizer settings on a `#config` line; the matrix file has one column
//! header row (`user_id` then one label per slot) before its data rows.
//! Matrix values use the shortest decimal form that parses back to the
//! identical `f64`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::featurizer::{Document, FeaturizerConfig, Vocabulary};
use crate::models::TaskRegistry;
use crate::numerics::{CsrMatrix, Label, LabelMatrix};

pub const FORMAT_VERSION: &str = "v1";

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

pub(crate) fn magic_line(kind: &str) -> String {
    format!("#comorbid-{kind}\t{FORMAT_VERSION}")
}

/// Splits off and checks the magic line. Returns the remaining header
/// fields (after kind and version) and the body lines with 1-based numbers.
fn parse_body<'a>(
    text: &'a str,
    kind: &str,
    origin: &str,
) -> Result<(Vec<&'a str>, Vec<(usize, &'a str)>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    let mut extra = Vec::new();
    if let Some((_, first)) = lines.peek() {
        if let Some(rest) = first.strip_prefix("#comorbid-") {
            let mut fields = rest.split('\t');
            let found_kind = fields.next().unwrap_or_default();
            if found_kind != kind {
                return Err(Error::format(
                    origin,
                    format!("expected a {kind} file, found {found_kind}"),
                ));
            }
            let version = fields.next().unwrap_or_default();
            if version != FORMAT_VERSION {
                return Err(Error::Version {
                    path: origin.to_string(),
                    found: version.to_string(),
                    expected: FORMAT_VERSION.to_string(),
                });
            }
            extra = fields.collect();
            lines.next();
        }
    }
    Ok((extra, lines.filter(|(_, l)| !l.is_empty()).collect()))
}

fn line_err(origin: &str, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::format(format!("{origin}:{line}"), msg.to_string())
}

pub fn format_docs(docs: &[Document]) -> String {
    let mut out = magic_line("docs");
    out.push('\n');
    for d in docs {
        let _ = writeln!(out, "{}\t{}", escape(&d.user_id), escape(&d.text));
    }
    out
}

pub fn parse_docs(text: &str, origin: &str) -> Result<Vec<Document>> {
    let (_, body) = parse_body(text, "docs", origin)?;
    let mut seen = BTreeSet::new();
    body.into_iter()
        .map(|(n, line)| {
            let (id, txt) = line
                .split_once('\t')
                .ok_or_else(|| line_err(origin, n, "expected user_id<TAB>text"))?;
            let id = unescape(id).ok_or_else(|| line_err(origin, n, "bad escape in user id"))?;
            if !seen.insert(id.clone()) {
                return Err(line_err(origin, n, format!("duplicate user `{id}`")));
            }
            let txt = unescape(txt).ok_or_else(|| line_err(origin, n, "bad escape in text"))?;
            Ok(Document::new(id, txt))
        })
        .collect()
}

/// Labels keyed by user, over a fixed task registry.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable {
    pub tasks: TaskRegistry,
    pub by_user: HashMap<String, Vec<Label>>,
}

impl LabelTable {
    /// Label matrix aligned with `user_ids`; users without entries are fully masked.
    pub fn matrix_for(&self, user_ids: &[String]) -> LabelMatrix {
        let mut m = LabelMatrix::masked(user_ids.len(), self.tasks.len());
        for (r, id) in user_ids.iter().enumerate() {
            if let Some(row) = self.by_user.get(id) {
                for (t, &l) in row.iter().enumerate() {
                    m.set(r, t, l);
                }
            }
        }
        m
    }
}

pub fn format_labels(tasks: &TaskRegistry, user_ids: &[String], labels: &LabelMatrix) -> String {
    let mut out = format!(
        "{}\ttasks={}\n",
        magic_line("labels"),
        tasks.to_spec_string()
    );
    for (r, id) in user_ids.iter().enumerate() {
        for (t, name) in tasks.names().enumerate() {
            match labels.get(r, t) {
                Label::Positive => {
                    let _ = writeln!(out, "{}\t{name}\t1", escape(id));
                }
                Label::Negative => {
                    let _ = writeln!(out, "{}\t{name}\t0", escape(id));
                }
                Label::Masked => {}
            }
        }
    }
    out
}

pub fn parse_labels(text: &str, origin: &str) -> Result<LabelTable> {
    let (extra, body) = parse_body(text, "labels", origin)?;
    let declared = extra
        .iter()
        .find_map(|f| f.strip_prefix("tasks="))
        .map(TaskRegistry::parse_spec)
        .transpose()
        .map_err(|e| Error::format(origin, e.to_string()))?;
    let mut triples = Vec::with_capacity(body.len());
    for (n, line) in body {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(line_err(origin, n, "expected user_id<TAB>task<TAB>0|1"));
        }
        let id = unescape(fields[0]).ok_or_else(|| line_err(origin, n, "bad escape"))?;
        let value = match fields[2] {
            "0" => Label::Negative,
            "1" => Label::Positive,
            other => {
                return Err(line_err(
                    origin,
                    n,
                    format!("label must be 0 or 1, got {other:?}"),
                ))
            }
        };
        triples.push((n, id, fields[1].to_string(), value));
    }
    let tasks = match declared {
        Some(t) => t,
        None => {
            let names: BTreeSet<&str> = triples.iter().map(|t| t.2.as_str()).collect();
            TaskRegistry::from_names(&names.into_iter().collect::<Vec<_>>())
                .map_err(|e| Error::format(origin, e.to_string()))?
        }
    };
    let mut by_user: HashMap<String, Vec<Label>> = HashMap::new();
    for (n, id, task, value) in triples {
        let t = tasks
            .index_of(&task)
            .ok_or_else(|| line_err(origin, n, format!("task `{task}` not declared in header")))?;
        let row = by_user
            .entry(id)
            .or_insert_with(|| vec![Label::Masked; tasks.len()]);
        if row[t] != Label::Masked && row[t] != value {
            return Err(line_err(
                origin,
                n,
                format!("conflicting labels for task `{task}`"),
            ));
        }
        row[t] = value;
    }
    Ok(LabelTable { tasks, by_user })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FoldRole {
    Train,
    Dev,
    Test,
}

impl FoldRole {
    pub fn as_str(self) -> &'static str {
        match self {
            FoldRole::Train => "train",
            FoldRole::Dev => "dev",
            FoldRole::Test => "test",
        }
    }
}

impl std::str::FromStr for FoldRole {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(FoldRole::Train),
            "dev" => Ok(FoldRole::Dev),
            "test" => Ok(FoldRole::Test),
            _ => Err(format!("unknown fold role {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldRecord {
    pub user_id: String,
    pub fold: usize,
    pub role: FoldRole,
}

pub fn format_folds(records: &[FoldRecord]) -> String {
    let mut out = magic_line("folds");
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            escape(&r.user_id),
            r.fold,
            r.role.as_str()
        );
    }
    out
}

pub fn parse_folds(text: &str, origin: &str) -> Result<Vec<FoldRecord>> {
    let (_, body) = parse_body(text, "folds", origin)?;
    body.into_iter()
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(line_err(origin, n, "expected user_id<TAB>fold<TAB>role"));
            }
            Ok(FoldRecord {
                user_id: unescape(fields[0]).ok_or_else(|| line_err(origin, n, "bad escape"))?,
                fold: fields[1]
                    .parse()
                    .map_err(|_| line_err(origin, n, "fold must be an integer"))?,
                role: fields[2].parse().map_err(|e| line_err(origin, n, e))?,
            })
        })
        .collect()
}

pub fn format_vocab(vocab: &Vocabulary) -> String {
    let cfg = vocab.config();
    let orders: Vec<String> = cfg.orders.iter().map(usize::to_string).collect();
    let mut out = magic_line("vocab");
    let _ = writeln!(
        out,
        "\n#config\torders={}\ttop_k={}\tlowercase={}\tcollapse_whitespace={}",
        orders.join(","),
        cfg.top_k,
        cfg.lowercase,
        cfg.collapse_whitespace
    );
    for (order, entries) in vocab.blocks() {
        for e in entries {
            let _ = writeln!(
                out,
                "{order}\t{}\t{}\t{}",
                escape(&e.ngram),
                e.count,
                e.slot
            );
        }
    }
    out
}

pub fn parse_vocab(text: &str, origin: &str) -> Result<Vocabulary> {
    let (_, body) = parse_body(text, "vocab", origin)?;
    let mut cfg = FeaturizerConfig::default();
    let mut saw_config = false;
    let mut entries = Vec::new();
    for (n, line) in body {
        if let Some(rest) = line.strip_prefix("#config\t") {
            for field in rest.split('\t') {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| line_err(origin, n, "expected key=value"))?;
                let bad = |_| line_err(origin, n, format!("bad value for {k}"));
                match k {
                    "orders" => {
                        cfg.orders = v
                            .split(',')
                            .map(|o| o.parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| line_err(origin, n, "bad orders"))?
                    }
                    "top_k" => {
                        cfg.top_k = v.parse().map_err(|_| line_err(origin, n, "bad top_k"))?
                    }
                    "lowercase" => cfg.lowercase = v.parse().map_err(bad)?,
                    "collapse_whitespace" => cfg.collapse_whitespace = v.parse().map_err(bad)?,
                    other => {
                        return Err(line_err(origin, n, format!("unknown config key {other}")))
                    }
                }
            }
            saw_config = true;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(line_err(
                origin,
                n,
                "expected order<TAB>ngram<TAB>count<TAB>slot",
            ));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<u64>()
                .map_err(|_| line_err(origin, n, format!("bad {what}")))
        };
        entries.push((
            parse(fields[0], "order")? as usize,
            unescape(fields[1]).ok_or_else(|| line_err(origin, n, "bad escape"))?,
            parse(fields[2], "count")?,
            parse(fields[3], "slot")? as usize,
        ));
    }
    if !saw_config {
        return Err(Error::format(origin, "missing #config line"));
    }
    Vocabulary::from_entries(cfg, entries).map_err(|e| Error::format(origin, e.to_string()))
}

/// Users by features, as stored in a matrix file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub user_ids: Vec<String>,
    pub columns: Vec<String>,
    pub features: CsrMatrix,
}

pub fn format_matrix(table: &FeatureTable) -> String {
    let m = &table.features;
    let mut out = format!(
        "{}\trows={}\tcols={}\nuser_id",
        magic_line("matrix"),
        m.rows(),
        m.cols()
    );
    for c in &table.columns {
        out.push('\t');
        out.push_str(&escape(c));
    }
    out.push('\n');
    for (r, id) in table.user_ids.iter().enumerate() {
        out.push_str(&escape(id));
        let mut next = 0;
        for (c, v) in m.row(r) {
            for _ in next..c {
                out.push_str("\t0");
            }
            let _ = write!(out, "\t{v}");
            next = c + 1;
        }
        for _ in next..m.cols() {
            out.push_str("\t0");
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str, origin: &str) -> Result<FeatureTable> {
    let (_, body) = parse_body(text, "matrix", origin)?;
    let mut lines = body.into_iter();
    let (hn, header) = lines
        .next()
        .ok_or_else(|| Error::format(origin, "missing column header row"))?;
    let mut cols = header.split('\t');
    if cols.next() != Some("user_id") {
        return Err(line_err(origin, hn, "header row must start with user_id"));
    }
    let columns = cols
        .map(|c| unescape(c).ok_or_else(|| line_err(origin, hn, "bad escape in column label")))
        .collect::<Result<Vec<_>>>()?;
    let mut features = CsrMatrix::empty(columns.len());
    let mut user_ids = Vec::new();
    for (n, line) in lines {
        let mut fields = line.split('\t');
        let id = unescape(fields.next().unwrap_or_default())
            .ok_or_else(|| line_err(origin, n, "bad escape"))?;
        let mut row = Vec::new();
        let mut width = 0;
        for (c, f) in fields.enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| line_err(origin, n, format!("bad value {f:?}")))?;
            if !v.is_finite() {
                return Err(line_err(origin, n, "non-finite value"));
            }
            if v != 0.0 {
                row.push((c, v));
            }
            width = c + 1;
        }
        if width != columns.len() {
            return Err(line_err(
                origin,
                n,
                format!("expected {} values, found {width}", columns.len()),
            ));
        }
        features.push_row(row)?;
        user_ids.push(id);
    }
    Ok(FeatureTable {
        user_ids,
        columns,
        features,
    })
}

/// `iteration,train_loss,dev_loss` rows.
pub fn format_curve(rows: &[(usize, f64, f64)]) -> String {
    let mut out = magic_line("curve");
    out.push_str("\niteration,train_loss,dev_loss\n");
    for (i, tr, dv) in rows {
        let _ = writeln!(out, "{i},{tr},{dv}");
    }
    out
}

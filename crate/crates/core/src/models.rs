//! Logistic regression, single-task MLP and multi-task network topologies,
//! their initialization, scoring and the binary model file.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{CsrMatrix, Dense, Matrix, Network};
use crate::seed;

pub const MODEL_MAGIC: &[u8; 8] = b"CMBDMODL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskRole {
    /// A diagnosed condition.
    Condition,
    /// The "no condition" control flag.
    Control,
    /// An author attribute such as gender.
    Demographic,
}

impl TaskRole {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskRole::Condition => "condition",
            TaskRole::Control => "control",
            TaskRole::Demographic => "demographic",
        }
    }

    fn code(self) -> u8 {
        match self {
            TaskRole::Condition => 0,
            TaskRole::Control => 1,
            TaskRole::Demographic => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => TaskRole::Condition,
            1 => TaskRole::Control,
            2 => TaskRole::Demographic,
            _ => return None,
        })
    }
}

impl std::str::FromStr for TaskRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "condition" => Ok(TaskRole::Condition),
            "control" => Ok(TaskRole::Control),
            "demographic" => Ok(TaskRole::Demographic),
            _ => Err(Error::InvalidValue {
                key: "role".into(),
                msg: format!("unknown task role `{s}`"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Task {
    pub name: String,
    pub role: TaskRole,
}

/// Ordered task list; a task's position is its output-head index.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskRegistry {
    tasks: Vec<Task>,
}

pub const NEUROTYPICAL: &str = "neurotypical";
pub const GENDER: &str = "gender";

impl TaskRegistry {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Invalid("task registry is empty".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.name.is_empty()
                || t.name
                    .contains(|c: char| c.is_whitespace() || c == ',' || c == ':')
            {
                return Err(Error::Invalid(format!("invalid task name {:?}", t.name)));
            }
            if tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Invalid(format!("duplicate task `{}`", t.name)));
            }
        }
        Ok(TaskRegistry { tasks })
    }

    /// Guesses roles from names: `neurotypical` is the control flag,
    /// `gender` a demographic, everything else a condition.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| {
                    let name = n.as_ref().to_string();
                    let role = match name.as_str() {
                        NEUROTYPICAL => TaskRole::Control,
                        GENDER => TaskRole::Demographic,
                        _ => TaskRole::Condition,
                    };
                    Task { name, role }
                })
                .collect(),
        )
    }

    /// The ten prediction targets of the clinical setup.
    pub fn standard() -> Self {
        Self::from_names(&[
            NEUROTYPICAL,
            "anxiety",
            "depression",
            "suicide_attempt",
            "eating",
            "schizophrenia",
            "panic",
            "ptsd",
            "bipolar",
            GENDER,
        ])
        .expect("valid names")
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|t| t.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn get(&self, i: usize) -> &Task {
        &self.tasks[i]
    }

    /// Sub-registry with the given names, in the given order.
    pub fn subset<S: AsRef<str>>(&self, names: &[S]) -> Result<TaskRegistry> {
        let tasks = names
            .iter()
            .map(|n| self.require(n.as_ref()).map(|i| self.tasks[i].clone()))
            .collect::<Result<Vec<_>>>()?;
        TaskRegistry::new(tasks)
    }

    /// Indices of the tasks with `role`, in registry order.
    pub fn with_role(&self, role: TaskRole) -> Vec<usize> {
        (0..self.tasks.len())
            .filter(|&i| self.tasks[i].role == role)
            .collect()
    }

    /// `name:role` list, comma separated.
    pub fn to_spec_string(&self) -> String {
        self.tasks
            .iter()
            .map(|t| format!("{}:{}", t.name, t.role.as_str()))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Parses `name[:role],...`; missing roles are inferred from the name.
    pub fn parse_spec(s: &str) -> Result<Self> {
        let mut tasks = Vec::new();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            match item.split_once(':') {
                Some((name, role)) => tasks.push(Task {
                    name: name.to_string(),
                    role: role.parse()?,
                }),
                None => tasks.extend(Self::from_names(&[item])?.tasks),
            }
        }
        Self::new(tasks)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Lr,
    Stl,
    Mtl,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::Stl => "stl",
            ModelKind::Mtl => "mtl",
        }
    }

    fn code(self) -> u8 {
        match self {
            ModelKind::Lr => 0,
            ModelKind::Stl => 1,
            ModelKind::Mtl => 2,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(ModelKind::Lr),
            "stl" => Ok(ModelKind::Stl),
            "mtl" => Ok(ModelKind::Mtl),
            _ => Err(Error::InvalidValue {
                key: "model".into(),
                msg: format!("`{s}` is not one of lr, stl, mtl"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MtlTopology {
    pub input_dim: usize,
    pub shared_widths: Vec<usize>,
    pub task_hidden_width: usize,
    pub n_tasks: usize,
}

impl MtlTopology {
    pub fn new(input_dim: usize, width: usize, shared_depth: usize, n_tasks: usize) -> Self {
        MtlTopology {
            input_dim,
            shared_widths: vec![width; shared_depth],
            task_hidden_width: width,
            n_tasks,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut total = 0;
        for &w in &self.shared_widths {
            total += fan_in * w + w;
            fan_in = w;
        }
        let h = self.task_hidden_width;
        total + self.n_tasks * (fan_in * h + h + h + 1)
    }
}

/// Two equal-width hidden layers and one sigmoid unit, per task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StlTopology {
    pub input_dim: usize,
    pub hidden_widths: [usize; 2],
}

impl StlTopology {
    pub fn param_count(&self) -> usize {
        let [a, b] = self.hidden_widths;
        self.input_dim * a + a + a * b + b + b + 1
    }
}

/// Parameters of a single-task model with both hidden widths `w`.
pub fn stl_param_count(input_dim: usize, w: usize) -> usize {
    StlTopology {
        input_dim,
        hidden_widths: [w, w],
    }
    .param_count()
}

pub fn lr_param_count(input_dim: usize) -> usize {
    input_dim + 1
}

/// Largest equal-width two-hidden-layer model whose parameter count does
/// not exceed `mtl_params`, within 5% of it. Returns the topology and its
/// achieved count.
pub fn build_stl_matched(input_dim: usize, mtl_params: usize) -> Result<(StlTopology, usize)> {
    let infeasible = || Error::NoFeasibleWidth {
        budget: mtl_params,
        input_dim,
    };
    if stl_param_count(input_dim, 1) > mtl_params {
        return Err(infeasible());
    }
    // count(w) is strictly increasing, so bisect on w.
    let (mut lo, mut hi) = (1usize, 2usize);
    while stl_param_count(input_dim, hi) <= mtl_params {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if stl_param_count(input_dim, mid) <= mtl_params {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let count = stl_param_count(input_dim, lo);
    if (mtl_params - count) as f64 > 0.05 * mtl_params as f64 {
        return Err(infeasible());
    }
    Ok((
        StlTopology {
            input_dim,
            hidden_widths: [lo, lo],
        },
        count,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModelMeta {
    pub seed: u64,
    pub config_hash: String,
}

/// Trained or freshly initialized parameters of one model class.
///
/// LR and MTL hold a single network with one head per task; STL holds one
/// single-head network per task so the models share nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub tasks: TaskRegistry,
    pub nets: Vec<Network>,
    pub meta: ModelMeta,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    Train { dropout_rate: f64 },
}

fn mtl_network<R: Rng + ?Sized>(topology: &MtlTopology, rng: &mut R) -> Network {
    let mut fan_in = topology.input_dim;
    let mut trunk = Vec::with_capacity(topology.shared_widths.len());
    for &w in &topology.shared_widths {
        trunk.push(Dense::glorot(fan_in, w, rng));
        fan_in = w;
    }
    let h = topology.task_hidden_width;
    let heads = (0..topology.n_tasks)
        .map(|_| vec![Dense::glorot(fan_in, h, rng), Dense::glorot(h, 1, rng)])
        .collect();
    Network { trunk, heads }
}

/// Shared ReLU stack of `shared_depth` layers, then per task a ReLU layer
/// and a sigmoid unit. All hidden layers have `width` units.
pub fn build_mtl<R: Rng + ?Sized>(
    input_dim: usize,
    width: usize,
    shared_depth: usize,
    registry: &TaskRegistry,
    rng: &mut R,
) -> Result<ModelParams> {
    if input_dim == 0 || width == 0 || shared_depth == 0 {
        return Err(Error::Invalid(
            "MTL needs input_dim, width and shared_depth >= 1".into(),
        ));
    }
    let topo = MtlTopology::new(input_dim, width, shared_depth, registry.len());
    Ok(ModelParams {
        kind: ModelKind::Mtl,
        tasks: registry.clone(),
        nets: vec![mtl_network(&topo, rng)],
        meta: ModelMeta::default(),
    })
}

/// One independent single-task network per task. Task `t`'s weights are
/// drawn from a stream derived from `seed` and the task name, so a task's
/// model does not depend on which other tasks are present.
pub fn build_stl(topology: StlTopology, registry: &TaskRegistry, seed: u64) -> Result<ModelParams> {
    let [a, b] = topology.hidden_widths;
    if topology.input_dim == 0 || a == 0 || b == 0 {
        return Err(Error::Invalid(
            "STL needs input_dim and hidden widths >= 1".into(),
        ));
    }
    let nets = registry
        .names()
        .map(|name| {
            let mut rng = seed::derive_rng(seed, &format!("stl-init/{name}"));
            Network {
                trunk: Vec::new(),
                heads: vec![vec![
                    Dense::glorot(topology.input_dim, a, &mut rng),
                    Dense::glorot(a, b, &mut rng),
                    Dense::glorot(b, 1, &mut rng),
                ]],
            }
        })
        .collect();
    Ok(ModelParams {
        kind: ModelKind::Stl,
        tasks: registry.clone(),
        nets,
        meta: ModelMeta {
            seed,
            config_hash: String::new(),
        },
    })
}

/// Independent zero-initialized logistic regression per task.
pub fn build_lr(input_dim: usize, registry: &TaskRegistry) -> Result<ModelParams> {
    if input_dim == 0 {
        return Err(Error::Invalid("LR needs input_dim >= 1".into()));
    }
    Ok(ModelParams {
        kind: ModelKind::Lr,
        tasks: registry.clone(),
        nets: vec![Network {
            trunk: Vec::new(),
            heads: (0..registry.len())
                .map(|_| vec![Dense::zeros(input_dim, 1)])
                .collect(),
        }],
        meta: ModelMeta::default(),
    })
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.nets[0].input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(Network::param_count).sum()
    }

    /// (network index, head index) that predicts task `t`.
    pub fn locate(&self, t: usize) -> (usize, usize) {
        match self.kind {
            ModelKind::Stl => (t, 0),
            _ => (0, t),
        }
    }

    /// Per-(user, task) probabilities. Train mode applies inverted dropout
    /// to the input; eval mode is deterministic and ignores `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &CsrMatrix,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Matrix> {
        let dropped;
        let x = match mode {
            Mode::Train { dropout_rate } if dropout_rate > 0.0 => {
                let mut copy = x.clone();
                copy.apply_dropout(dropout_rate, rng)?;
                dropped = copy;
                &dropped
            }
            Mode::Train { dropout_rate } => {
                crate::numerics::check_dropout_rate(dropout_rate)?;
                x
            }
            Mode::Eval => x,
        };
        self.predict(x)
    }

    /// Deterministic scores (eval mode).
    pub fn predict(&self, x: &CsrMatrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("{} input columns", self.input_dim()),
                format!("{}", x.cols()),
            ));
        }
        match self.kind {
            ModelKind::Stl => {
                let mut out = Matrix::zeros(x.rows(), self.tasks.len());
                for (t, net) in self.nets.iter().enumerate() {
                    for (r, p) in net.forward_head(x, 0)?.into_iter().enumerate() {
                        out.set(r, t, p);
                    }
                }
                Ok(out)
            }
            _ => self.nets[0].forward(x),
        }
    }

    pub fn header(&self) -> ModelHeader {
        let net = &self.nets[0];
        let head = &net.heads[0];
        ModelHeader {
            version: MODEL_VERSION,
            kind: self.kind,
            input_dim: self.input_dim(),
            trunk_widths: net.trunk.iter().map(Dense::fan_out).collect(),
            head_widths: head[..head.len() - 1].iter().map(Dense::fan_out).collect(),
            tasks: self.tasks.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Little-endian binary container: header, then every tensor in
    /// declaration order as 64-bit floats.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.header().write(&mut out).expect("writing to a Vec");
        for net in &self.nets {
            net.for_each_tensor(|_, values| {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            });
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut cursor = bytes;
        let header = ModelHeader::read(&mut cursor, origin)?;
        let mut nets = Vec::new();
        let n_nets = match header.kind {
            ModelKind::Stl => header.tasks.len(),
            _ => 1,
        };
        let heads_per_net = match header.kind {
            ModelKind::Stl => 1,
            _ => header.tasks.len(),
        };
        let mut take = |fan_in: usize, fan_out: usize| -> Result<Dense> {
            let w = read_f64s(&mut cursor, fan_in * fan_out, origin)?;
            let b = read_f64s(&mut cursor, fan_out, origin)?;
            Ok(Dense {
                weights: Matrix::from_vec(fan_in, fan_out, w)?,
                bias: b,
            })
        };
        for _ in 0..n_nets {
            let mut fan_in = header.input_dim;
            let mut trunk = Vec::new();
            for &w in &header.trunk_widths {
                trunk.push(take(fan_in, w)?);
                fan_in = w;
            }
            let mut heads = Vec::new();
            for _ in 0..heads_per_net {
                let mut f = fan_in;
                let mut layers = Vec::new();
                for &w in header.head_widths.iter().chain(std::iter::once(&1)) {
                    layers.push(take(f, w)?);
                    f = w;
                }
                heads.push(layers);
            }
            let net = Network { trunk, heads };
            net.validate()?;
            nets.push(net);
        }
        if !cursor.is_empty() {
            return Err(Error::format(
                origin,
                format!("{} trailing bytes after tensors", cursor.len()),
            ));
        }
        Ok(ModelParams {
            kind: header.kind,
            tasks: header.tasks,
            nets,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn read_f64s(cursor: &mut &[u8], n: usize, origin: &str) -> Result<Vec<f64>> {
    let bytes = n * 8;
    if cursor.len() < bytes {
        return Err(Error::format(origin, "truncated tensor data"));
    }
    let (head, rest) = cursor.split_at(bytes);
    *cursor = rest;
    Ok(head
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Everything in a model file before the tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHeader {
    pub version: u32,
    pub kind: ModelKind,
    pub input_dim: usize,
    pub trunk_widths: Vec<usize>,
    /// Hidden widths inside each head (the sigmoid unit is implicit).
    pub head_widths: Vec<usize>,
    pub tasks: TaskRegistry,
    pub meta: ModelMeta,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

struct Reader<'a, 'b> {
    cursor: &'a mut &'b [u8],
    origin: &'a str,
}

impl Reader<'_, '_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.cursor
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.origin, "truncated model header"))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.bytes(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.bytes(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?)
            .map_err(|_| Error::format(self.origin, "non-UTF-8 string in header"))
    }

    fn widths(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.u64().map(|v| v as usize)).collect()
    }
}

impl ModelHeader {
    fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        put_u32(w, self.version)?;
        w.write_all(&[self.kind.code()])?;
        put_u64(w, self.input_dim as u64)?;
        for widths in [&self.trunk_widths, &self.head_widths] {
            put_u32(w, widths.len() as u32)?;
            for &x in widths.iter() {
                put_u64(w, x as u64)?;
            }
        }
        put_u32(w, self.tasks.len() as u32)?;
        for t in self.tasks.tasks() {
            w.write_all(&[t.role.code()])?;
            put_str(w, &t.name)?;
        }
        put_u64(w, self.meta.seed)?;
        put_str(w, &self.meta.config_hash)
    }

    pub fn read(cursor: &mut &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { cursor, origin };
        if r.bytes(8)? != MODEL_MAGIC {
            return Err(Error::format(origin, "not a model file (bad magic)"));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Version {
                path: origin.to_string(),
                found: version.to_string(),
                expected: MODEL_VERSION.to_string(),
            });
        }
        let kind = match r.u8()? {
            0 => ModelKind::Lr,
            1 => ModelKind::Stl,
            2 => ModelKind::Mtl,
            k => return Err(Error::format(origin, format!("unknown model kind {k}"))),
        };
        let input_dim = r.u64()? as usize;
        let trunk_widths = r.widths()?;
        let head_widths = r.widths()?;
        let n_tasks = r.u32()? as usize;
        let mut tasks = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let role = TaskRole::from_code(r.u8()?)
                .ok_or_else(|| Error::format(origin, "unknown task role"))?;
            tasks.push(Task {
                name: r.string()?,
                role,
            });
        }
        let tasks = TaskRegistry::new(tasks).map_err(|e| Error::format(origin, e.to_string()))?;
        let meta = ModelMeta {
            seed: r.u64()?,
            config_hash: r.string()?,
        };
        Ok(ModelHeader {
            version,
            kind,
            input_dim,
            trunk_widths,
            head_widths,
            tasks,
            meta,
        })
    }
}

impl fmt::Display for ModelHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        writeln!(f, "format_version\t{}", self.version)?;
        writeln!(f, "kind\t{}", self.kind)?;
        writeln!(f, "input_dim\t{}", self.input_dim)?;
        writeln!(f, "shared_widths\t{}", list(&self.trunk_widths))?;
        writeln!(f, "head_widths\t{}", list(&self.head_widths))?;
        writeln!(f, "tasks\t{}", self.tasks.to_spec_string())?;
        writeln!(f, "seed\t{}", self.meta.seed)?;
        write!(f, "config_hash\t{}", self.meta.config_hash)
    }
}

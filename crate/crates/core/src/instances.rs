//! Problem instances, synthetic generators, benchmark parsers and objective
//! evaluation.
//!
//! An [`Instance`] keeps the coordinates and demands exactly as they were
//! supplied (problem units) and, alongside them, a unit-square view used by
//! the models. Objectives reported to users are always computed on the raw
//! coordinates.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr_free::gaussian;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Tsp,
    Cvrp,
}

impl ProblemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Tsp => "tsp",
            ProblemKind::Cvrp => "cvrp",
        }
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsp" => Ok(ProblemKind::Tsp),
            "cvrp" => Ok(ProblemKind::Cvrp),
            other => Err(Error::InvalidInstance(format!("unknown problem kind `{other}`"))),
        }
    }
}

/// How edge lengths are measured when reporting an objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Plain Euclidean distance.
    #[default]
    Euclidean,
    /// TSPLIB `nint` rounding of every edge.
    Rounded,
}

/// Where an instance came from. TSPLIB/CVRPLIB files report rounded
/// objectives by convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Synthetic,
    Tsplib,
    Cvrplib,
}

/// Bounding box of the raw coordinates and the affine map onto the unit
/// square: `unit = (raw - min) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleNote {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
    pub scale: f64,
}

impl ScaleNote {
    fn identity() -> Self {
        Self { min_x: 0.0, min_y: 0.0, max_x: 1.0, max_y: 1.0, scale: 1.0 }
    }

    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] / self.scale + self.min_x, p[1] / self.scale + self.min_y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub kind: ProblemKind,
    pub name: String,
    /// Raw coordinates. For CVRP index 0 is the depot.
    pub coords: Vec<[f64; 2]>,
    /// Raw demands (CVRP only, `demands[0] == 0`).
    pub demands: Vec<f64>,
    /// Raw vehicle capacity (CVRP only).
    pub capacity: f64,
    pub source: Source,
    pub scale_note: ScaleNote,
    unit_coords: Vec<[f64; 2]>,
    unit_demands: Vec<f64>,
}

impl Instance {
    pub fn tsp(name: impl Into<String>, coords: Vec<[f64; 2]>) -> Result<Self> {
        Self::build(ProblemKind::Tsp, name.into(), coords, Vec::new(), 0.0, Source::Synthetic)
    }

    pub fn cvrp(
        name: impl Into<String>,
        coords: Vec<[f64; 2]>,
        demands: Vec<f64>,
        capacity: f64,
    ) -> Result<Self> {
        Self::build(ProblemKind::Cvrp, name.into(), coords, demands, capacity, Source::Synthetic)
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    fn build(
        kind: ProblemKind,
        name: String,
        coords: Vec<[f64; 2]>,
        demands: Vec<f64>,
        capacity: f64,
        source: Source,
    ) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidSize(format!("need at least 2 nodes, got {}", coords.len())));
        }
        if coords.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidInstance("non-finite coordinate".into()));
        }
        match kind {
            ProblemKind::Tsp => {
                if !demands.is_empty() {
                    return Err(Error::InvalidInstance("TSP instances carry no demands".into()));
                }
            }
            ProblemKind::Cvrp => {
                if !(capacity > 0.0 && capacity.is_finite()) {
                    return Err(Error::InvalidCapacity(format!("capacity must be positive, got {capacity}")));
                }
                if demands.len() != coords.len() {
                    return Err(Error::InvalidInstance(format!(
                        "{} demands for {} nodes",
                        demands.len(),
                        coords.len()
                    )));
                }
                if demands[0] != 0.0 {
                    return Err(Error::InvalidInstance("depot demand must be 0".into()));
                }
                if let Some((i, d)) =
                    demands.iter().enumerate().skip(1).find(|(_, &d)| !(d > 0.0 && d <= capacity))
                {
                    return Err(Error::InvalidCapacity(format!(
                        "customer {i} has demand {d}, outside (0, {capacity}]"
                    )));
                }
            }
        }

        let scale_note = unit_map(&coords);
        let unit_coords = coords
            .iter()
            .map(|p| [(p[0] - scale_note.min_x) * scale_note.scale, (p[1] - scale_note.min_y) * scale_note.scale])
            .collect();
        let unit_demands = demands.iter().map(|d| d / capacity).collect();
        Ok(Self { kind, name, coords, demands, capacity, source, scale_note, unit_coords, unit_demands })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Number of customers (CVRP) or cities (TSP).
    pub fn customers(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => self.len(),
            ProblemKind::Cvrp => self.len() - 1,
        }
    }

    /// Coordinates mapped into the unit square (identity when the raw
    /// coordinates already lie inside it).
    pub fn unit_coords(&self) -> &[[f64; 2]] {
        &self.unit_coords
    }

    /// Demands divided by capacity, so the vehicle capacity is 1.
    pub fn unit_demands(&self) -> &[f64] {
        &self.unit_demands
    }

    pub fn unit_dist(&self, i: usize, j: usize) -> f64 {
        euclid(self.unit_coords[i], self.unit_coords[j])
    }

    pub fn default_distance_mode(&self) -> DistanceMode {
        match self.source {
            Source::Synthetic => DistanceMode::Euclidean,
            Source::Tsplib | Source::Cvrplib => DistanceMode::Rounded,
        }
    }

    pub fn raw_dist(&self, i: usize, j: usize, mode: DistanceMode) -> f64 {
        let d = euclid(self.coords[i], self.coords[j]);
        match mode {
            DistanceMode::Euclidean => d,
            DistanceMode::Rounded => (d + 0.5).floor(),
        }
    }

    pub fn to_json(&self) -> InstanceFile {
        InstanceFile {
            kind: self.kind,
            name: self.name.clone(),
            coords: self.coords.clone(),
            demands: self.demands.clone(),
            capacity: (self.kind == ProblemKind::Cvrp).then_some(self.capacity),
            source: self.source,
        }
    }
}

fn unit_map(coords: &[[f64; 2]]) -> ScaleNote {
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in coords {
        min_x = min_x.min(p[0]);
        min_y = min_y.min(p[1]);
        max_x = max_x.max(p[0]);
        max_y = max_y.max(p[1]);
    }
    if min_x >= 0.0 && min_y >= 0.0 && max_x <= 1.0 && max_y <= 1.0 {
        return ScaleNote::identity();
    }
    let span = (max_x - min_x).max(max_y - min_y);
    let scale = if span > 0.0 { 1.0 / span } else { 1.0 };
    ScaleNote { min_x, min_y, max_x, max_y, scale }
}

#[inline]
pub fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// The native JSON interchange document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceFile {
    pub kind: ProblemKind,
    #[serde(default)]
    pub name: String,
    pub coords: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demands: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<f64>,
    #[serde(default)]
    pub source: Source,
}

impl TryFrom<InstanceFile> for Instance {
    type Error = Error;

    fn try_from(f: InstanceFile) -> Result<Self> {
        Instance::build(f.kind, f.name, f.coords, f.demands, f.capacity.unwrap_or(0.0), f.source)
    }
}

/// A TSP tour: a permutation of node indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tour {
    pub order: Vec<usize>,
}

impl Tour {
    pub fn new(order: Vec<usize>) -> Self {
        Self { order }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.order.len() != n {
            return Err(Error::InvalidTour(format!("tour has {} nodes, instance has {n}", self.order.len())));
        }
        let mut seen = vec![false; n];
        for &v in &self.order {
            if v >= n {
                return Err(Error::InvalidTour(format!("node {v} out of range")));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::InvalidTour(format!("node {v} repeated")));
            }
        }
        Ok(())
    }
}

/// CVRP solution; the depot is implicit at both ends of every route.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoutePlan {
    pub routes: Vec<Vec<usize>>,
}

impl RoutePlan {
    /// Splits a depot-delimited visit sequence (`0, a, b, 0, c, 0`) into routes.
    pub fn from_sequence(seq: &[usize]) -> Self {
        let mut routes = Vec::new();
        let mut cur = Vec::new();
        for &v in seq {
            if v == 0 {
                if !cur.is_empty() {
                    routes.push(std::mem::take(&mut cur));
                }
            } else {
                cur.push(v);
            }
        }
        if !cur.is_empty() {
            routes.push(cur);
        }
        Self { routes }
    }

    pub fn to_sequence(&self) -> Vec<usize> {
        let mut seq = vec![0];
        for r in &self.routes {
            seq.extend_from_slice(r);
            seq.push(0);
        }
        seq
    }
}

/// Closed-tour length with plain Euclidean edges.
pub fn tour_length(instance: &Instance, tour: &Tour) -> Result<f64> {
    tour_length_with(instance, tour, DistanceMode::Euclidean)
}

pub fn tour_length_with(instance: &Instance, tour: &Tour, mode: DistanceMode) -> Result<f64> {
    if instance.kind != ProblemKind::Tsp {
        return Err(Error::InvalidTour("tour_length needs a TSP instance".into()));
    }
    tour.validate(instance.len())?;
    Ok(closed_length(&tour.order, |a, b| instance.raw_dist(a, b, mode)))
}

/// Closed-tour length over the unit-square coordinates (the training reward scale).
pub fn unit_tour_length(instance: &Instance, order: &[usize]) -> f64 {
    closed_length(order, |a, b| instance.unit_dist(a, b))
}

pub(crate) fn closed_length(order: &[usize], dist: impl Fn(usize, usize) -> f64) -> f64 {
    if order.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for w in order.windows(2) {
        total += dist(w[0], w[1]);
    }
    total + dist(order[order.len() - 1], order[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    UnknownNode { node: usize },
    DepotInsideRoute { route: usize },
    EmptyRoute { route: usize },
    DuplicateCustomer { customer: usize },
    MissingCustomer { customer: usize },
    CapacityOverflow { route: usize, load: f64, capacity: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Total depot-to-depot route length plus every violated constraint.
pub fn route_cost(instance: &Instance, plan: &RoutePlan) -> (f64, FeasibilityReport) {
    route_cost_with(instance, plan, DistanceMode::Euclidean)
}

pub fn route_cost_with(instance: &Instance, plan: &RoutePlan, mode: DistanceMode) -> (f64, FeasibilityReport) {
    let n = instance.len();
    let mut report = FeasibilityReport::default();
    if instance.kind != ProblemKind::Cvrp {
        report.violations.push(Violation::UnknownNode { node: 0 });
        return (f64::NAN, report);
    }
    let mut seen = vec![0usize; n];
    let mut cost = 0.0;
    for (r, route) in plan.routes.iter().enumerate() {
        if route.is_empty() {
            report.violations.push(Violation::EmptyRoute { route: r });
            continue;
        }
        let mut load = 0.0;
        let mut prev = 0;
        for &c in route {
            if c >= n {
                report.violations.push(Violation::UnknownNode { node: c });
                continue;
            }
            if c == 0 {
                report.violations.push(Violation::DepotInsideRoute { route: r });
            } else {
                seen[c] += 1;
                load += instance.demands[c];
            }
            cost += instance.raw_dist(prev, c, mode);
            prev = c;
        }
        cost += instance.raw_dist(prev, 0, mode);
        if load > instance.capacity * (1.0 + 1e-9) {
            report.violations.push(Violation::CapacityOverflow { route: r, load, capacity: instance.capacity });
        }
    }
    for (c, &count) in seen.iter().enumerate().skip(1) {
        match count {
            0 => report.violations.push(Violation::MissingCustomer { customer: c }),
            1 => {}
            _ => report.violations.push(Violation::DuplicateCustomer { customer: c }),
        }
    }
    (cost, report)
}

/// Route-plan cost over unit coordinates.
pub fn unit_route_cost(instance: &Instance, seq: &[usize]) -> f64 {
    let mut total = 0.0;
    for w in seq.windows(2) {
        total += instance.unit_dist(w[0], w[1]);
    }
    if let (Some(&a), Some(&b)) = (seq.last(), seq.first()) {
        total += instance.unit_dist(a, b);
    }
    total
}

// ---------------------------------------------------------------------------
// Generators

pub const DEMAND_LOW: u32 = 1;
pub const DEMAND_HIGH: u32 = 9;
pub const DEFAULT_CAPACITY: f64 = 50.0;

/// Node count for a problem of `n` cities (TSP) or `n` customers (CVRP).
fn node_count(kind: ProblemKind, n: usize) -> usize {
    match kind {
        ProblemKind::Tsp => n,
        ProblemKind::Cvrp => n + 1,
    }
}

fn check_request(kind: ProblemKind, n: usize, capacity: Option<f64>) -> Result<Option<f64>> {
    if n < 2 {
        return Err(Error::InvalidSize(format!("n must be at least 2, got {n}")));
    }
    match (kind, capacity) {
        (ProblemKind::Tsp, None) => Ok(None),
        (ProblemKind::Tsp, Some(_)) => Err(Error::InvalidCapacity("TSP takes no capacity".into())),
        (ProblemKind::Cvrp, None) => Err(Error::InvalidCapacity("CVRP requires a capacity".into())),
        (ProblemKind::Cvrp, Some(c)) if c <= DEMAND_HIGH as f64 => Err(Error::InvalidCapacity(format!(
            "capacity {c} must exceed the maximum demand {DEMAND_HIGH}"
        ))),
        (ProblemKind::Cvrp, Some(c)) => Ok(Some(c)),
    }
}

fn draw_demands(rng: &mut ChaCha8Rng, nodes: usize) -> Vec<f64> {
    let mut demands = vec![0.0; nodes];
    for d in demands.iter_mut().skip(1) {
        *d = rng.gen_range(DEMAND_LOW..=DEMAND_HIGH) as f64;
    }
    demands
}

/// Points i.i.d. uniform in the unit square. For CVRP `n` counts customers;
/// the depot is an extra node at index 0.
pub fn generate_uniform(kind: ProblemKind, n: usize, capacity: Option<f64>, seed: u64) -> Result<Instance> {
    let capacity = check_request(kind, n, capacity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = node_count(kind, n);
    let coords: Vec<[f64; 2]> = (0..nodes).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
    finish(format!("{}-uniform-{n}-s{seed}", kind.as_str()), coords, capacity, &mut rng)
}

fn finish(
    name: String,
    coords: Vec<[f64; 2]>,
    capacity: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Instance> {
    match capacity {
        None => Instance::tsp(name, coords),
        Some(c) => {
            let demands = draw_demands(rng, coords.len());
            Instance::cvrp(name, coords, demands, c)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Cluster,
    Explosion,
    Implosion,
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cluster" => Ok(Pattern::Cluster),
            "explosion" => Ok(Pattern::Explosion),
            "implosion" => Ok(Pattern::Implosion),
            _ => Err(Error::InvalidPattern(s.to_string())),
        }
    }
}

pub const CLUSTER_SIGMA: f64 = 0.07;
pub const DISK_RADIUS: f64 = 0.3;
pub const IMPLOSION_FACTOR: f64 = 0.5;

pub fn generate_clustered(
    kind: ProblemKind,
    n: usize,
    pattern: Pattern,
    capacity: Option<f64>,
    seed: u64,
) -> Result<Instance> {
    let capacity = check_request(kind, n, capacity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = node_count(kind, n);
    let mut coords: Vec<[f64; 2]> = match pattern {
        Pattern::Cluster => {
            let c = rng.gen_range(3..=8);
            let centers: Vec<[f64; 2]> = (0..c).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
            (0..nodes)
                .map(|_| {
                    let ctr = centers[rng.gen_range(0..c)];
                    [
                        ctr[0] + CLUSTER_SIGMA * gaussian(&mut rng),
                        ctr[1] + CLUSTER_SIGMA * gaussian(&mut rng),
                    ]
                })
                .collect()
        }
        Pattern::Explosion => {
            // The disk stays inside the square so clamping cannot pull an
            // evacuated point back into it.
            let ctr = [rng.gen_range(DISK_RADIUS..=1.0 - DISK_RADIUS), rng.gen_range(DISK_RADIUS..=1.0 - DISK_RADIUS)];
            (0..nodes)
                .map(|_| {
                    let p = [rng.gen::<f64>(), rng.gen::<f64>()];
                    let r = euclid(p, ctr);
                    if r >= DISK_RADIUS {
                        return p;
                    }
                    let (ux, uy) = if r > 0.0 { ((p[0] - ctr[0]) / r, (p[1] - ctr[1]) / r) } else { (1.0, 0.0) };
                    let moved = 2.0 * DISK_RADIUS - r;
                    [ctr[0] + ux * moved, ctr[1] + uy * moved]
                })
                .collect()
        }
        Pattern::Implosion => {
            let ctr = [rng.gen::<f64>(), rng.gen::<f64>()];
            (0..nodes)
                .map(|_| {
                    let p = [rng.gen::<f64>(), rng.gen::<f64>()];
                    if euclid(p, ctr) < DISK_RADIUS {
                        [ctr[0] + IMPLOSION_FACTOR * (p[0] - ctr[0]), ctr[1] + IMPLOSION_FACTOR * (p[1] - ctr[1])]
                    } else {
                        p
                    }
                })
                .collect()
        }
    };
    for p in &mut coords {
        p[0] = p[0].clamp(0.0, 1.0);
        p[1] = p[1].clamp(0.0, 1.0);
    }
    let name = format!("{}-{:?}-{n}-s{seed}", kind.as_str(), pattern).to_lowercase();
    finish(name, coords, capacity, &mut rng)
}

mod rand_distr_free {
    use rand::Rng;

    /// Standard normal draw (Box-Muller).
    pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

// ---------------------------------------------------------------------------
// TSPLIB / CVRPLIB

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkFormat {
    Tsplib,
    Cvrplib,
}

#[derive(PartialEq)]
enum Section {
    Header,
    Coords,
    Demands,
    Depot,
    Skip,
}

/// Parses the EUC_2D subset of TSPLIB (TSP) or CVRPLIB (CVRP). CVRP nodes are
/// reordered so the depot becomes index 0.
pub fn parse_benchmark(text: &str, format: BenchmarkFormat) -> Result<Instance> {
    let mut name = String::new();
    let mut dimension: Option<usize> = None;
    let mut capacity: Option<f64> = None;
    let mut edge_weight: Option<String> = None;
    let mut coords: Vec<Option<[f64; 2]>> = Vec::new();
    let mut demands: Vec<Option<f64>> = Vec::new();
    let mut depots: Vec<usize> = Vec::new();
    let mut section = Section::Header;

    let err = |line: usize, msg: String| Error::Parse { line, msg };

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line == "EOF" {
            break;
        }
        let upper = line.to_ascii_uppercase();
        if upper.starts_with("NODE_COORD_SECTION") {
            section = Section::Coords;
            continue;
        }
        if upper.starts_with("DEMAND_SECTION") {
            section = Section::Demands;
            continue;
        }
        if upper.starts_with("DEPOT_SECTION") {
            section = Section::Depot;
            continue;
        }
        if upper.ends_with("_SECTION") {
            section = Section::Skip;
            continue;
        }
        if section == Section::Header || line.contains(':') && !line.starts_with(|c: char| c.is_ascii_digit() || c == '-') {
            let (key, value) = match line.split_once(':') {
                Some((k, v)) => (k.trim().to_ascii_uppercase(), v.trim().to_string()),
                None => {
                    let mut parts = line.splitn(2, char::is_whitespace);
                    let k = parts.next().unwrap_or_default().to_ascii_uppercase();
                    (k, parts.next().unwrap_or_default().trim().to_string())
                }
            };
            match key.as_str() {
                "NAME" => name = value,
                "TYPE" => {
                    let want = match format {
                        BenchmarkFormat::Tsplib => "TSP",
                        BenchmarkFormat::Cvrplib => "CVRP",
                    };
                    if !value.eq_ignore_ascii_case(want) {
                        return Err(err(lineno, format!("TYPE {value} does not match expected {want}")));
                    }
                }
                "DIMENSION" => {
                    let d: usize = value.parse().map_err(|_| err(lineno, format!("bad DIMENSION `{value}`")))?;
                    coords = vec![None; d];
                    demands = vec![None; d];
                    dimension = Some(d);
                }
                "CAPACITY" => {
                    capacity = Some(value.parse().map_err(|_| err(lineno, format!("bad CAPACITY `{value}`")))?)
                }
                "EDGE_WEIGHT_TYPE" => {
                    if !value.eq_ignore_ascii_case("EUC_2D") {
                        return Err(Error::UnsupportedEdgeWeight(value));
                    }
                    edge_weight = Some(value);
                }
                "COMMENT" | "EDGE_WEIGHT_FORMAT" | "NODE_COORD_TYPE" | "DISPLAY_DATA_TYPE" => {}
                other => {
                    if section == Section::Header {
                        return Err(err(lineno, format!("unknown header key `{other}`")));
                    }
                }
            }
            continue;
        }
        let dim = dimension.ok_or_else(|| err(lineno, "data section before DIMENSION".into()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let node = |s: &str| -> Result<usize> {
            let id: i64 = s.parse().map_err(|_| err(lineno, format!("bad node id `{s}`")))?;
            if id < 1 || id as usize > dim {
                return Err(err(lineno, format!("node id {id} outside 1..={dim}")));
            }
            Ok(id as usize - 1)
        };
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| err(lineno, format!("bad number `{s}`")))
        };
        match section {
            Section::Coords => {
                if fields.len() != 3 {
                    return Err(err(lineno, format!("expected `id x y`, got {} fields", fields.len())));
                }
                let i = node(fields[0])?;
                coords[i] = Some([num(fields[1])?, num(fields[2])?]);
            }
            Section::Demands => {
                if fields.len() != 2 {
                    return Err(err(lineno, format!("expected `id demand`, got {} fields", fields.len())));
                }
                let i = node(fields[0])?;
                demands[i] = Some(num(fields[1])?);
            }
            Section::Depot => {
                for f in fields {
                    if f == "-1" {
                        section = Section::Skip;
                        break;
                    }
                    depots.push(node(f)?);
                }
            }
            Section::Skip => {}
            Section::Header => unreachable!(),
        }
    }

    let lines = text.lines().count();
    let dim = dimension.ok_or_else(|| err(lines, "missing DIMENSION".into()))?;
    if edge_weight.is_none() {
        return Err(err(lines, "missing EDGE_WEIGHT_TYPE".into()));
    }
    let coords: Vec<[f64; 2]> = coords
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| err(lines, format!("missing coordinates for node {}", i + 1))))
        .collect::<Result<_>>()?;
    if name.is_empty() {
        name = format!("unnamed-{dim}");
    }
    match format {
        BenchmarkFormat::Tsplib => Ok(Instance::tsp(name, coords)?.with_source(Source::Tsplib)),
        BenchmarkFormat::Cvrplib => {
            let capacity = capacity.ok_or_else(|| err(lines, "missing CAPACITY".into()))?;
            let mut demands: Vec<f64> = demands
                .into_iter()
                .enumerate()
                .map(|(i, d)| d.ok_or_else(|| err(lines, format!("missing demand for node {}", i + 1))))
                .collect::<Result<_>>()?;
            let depot = match depots.as_slice() {
                [d] => *d,
                [] => 0,
                _ => return Err(err(lines, "multiple depots are not supported".into())),
            };
            let mut coords = coords;
            coords.swap(0, depot);
            demands.swap(0, depot);
            demands[0] = 0.0;
            Ok(Instance::cvrp(name, coords, demands, capacity)?.with_source(Source::Cvrplib))
        }
    }
}

/// Writes the instance in the subset accepted by [`parse_benchmark`].
pub fn serialize_benchmark(instance: &Instance) -> String {
    let mut out = String::new();
    let n = instance.len();
    let _ = writeln!(out, "NAME : {}", instance.name);
    match instance.kind {
        ProblemKind::Tsp => {
            let _ = writeln!(out, "TYPE : TSP");
        }
        ProblemKind::Cvrp => {
            let _ = writeln!(out, "TYPE : CVRP");
        }
    }
    let _ = writeln!(out, "DIMENSION : {n}");
    let _ = writeln!(out, "EDGE_WEIGHT_TYPE : EUC_2D");
    if instance.kind == ProblemKind::Cvrp {
        let _ = writeln!(out, "CAPACITY : {}", instance.capacity);
    }
    let _ = writeln!(out, "NODE_COORD_SECTION");
    for (i, p) in instance.coords.iter().enumerate() {
        let _ = writeln!(out, "{} {} {}", i + 1, p[0], p[1]);
    }
    if instance.kind == ProblemKind::Cvrp {
        let _ = writeln!(out, "DEMAND_SECTION");
        for (i, d) in instance.demands.iter().enumerate() {
            let _ = writeln!(out, "{} {}", i + 1, d);
        }
        let _ = writeln!(out, "DEPOT_SECTION\n1\n-1");
    }
    out.push_str("EOF\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Instance {
        Instance::tsp("sq", vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn unit_square_perimeter() {
        let len = tour_length(&square(), &Tour::new(vec![0, 1, 2, 3])).unwrap();
        assert!((len - 4.0).abs() < 1e-12);
    }

    #[test]
    fn two_nodes_out_and_back() {
        let inst = Instance::tsp("two", vec![[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(tour_length(&inst, &Tour::new(vec![1, 0])).unwrap(), 10.0);
    }

    #[test]
    fn rejects_non_permutation() {
        let err = tour_length(&square(), &Tour::new(vec![0, 1, 1, 3])).unwrap_err();
        assert!(matches!(err, Error::InvalidTour(_)));
        assert!(tour_length(&square(), &Tour::new(vec![0, 1, 2])).is_err());
    }

    #[test]
    fn single_customer_route() {
        let inst = Instance::cvrp("one", vec![[0.0, 0.0], [0.0, 1.0]], vec![0.0, 3.0], 10.0).unwrap();
        let (cost, report) = route_cost(&inst, &RoutePlan { routes: vec![vec![1]] });
        assert_eq!(cost, 2.0);
        assert!(report.is_feasible());
    }

    #[test]
    fn capacity_overflow_reported() {
        let inst =
            Instance::cvrp("two", vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]], vec![0.0, 30.0, 30.0], 50.0).unwrap();
        let (_, report) = route_cost(&inst, &RoutePlan { routes: vec![vec![1, 2]] });
        assert_eq!(
            report.violations,
            vec![Violation::CapacityOverflow { route: 0, load: 60.0, capacity: 50.0 }]
        );
    }

    #[test]
    fn missing_and_duplicate_customers() {
        let inst = generate_uniform(ProblemKind::Cvrp, 4, Some(50.0), 3).unwrap();
        let (_, report) = route_cost(&inst, &RoutePlan { routes: vec![vec![1, 2, 2], vec![3]] });
        assert!(report.violations.contains(&Violation::DuplicateCustomer { customer: 2 }));
        assert!(report.violations.contains(&Violation::MissingCustomer { customer: 4 }));
    }

    #[test]
    fn uniform_tsp_in_unit_square() {
        let inst = generate_uniform(ProblemKind::Tsp, 100, None, 7).unwrap();
        assert_eq!(inst.len(), 100);
        assert!(inst.coords.iter().all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])));
        assert_eq!(inst.unit_coords(), inst.coords.as_slice());
    }

    #[test]
    fn uniform_cvrp_demands() {
        let inst = generate_uniform(ProblemKind::Cvrp, 100, Some(50.0), 7).unwrap();
        assert_eq!(inst.len(), 101);
        assert_eq!(inst.demands[0], 0.0);
        for &d in &inst.demands[1..] {
            assert!((1.0..=9.0).contains(&d) && d.fract() == 0.0);
        }
        assert!((inst.unit_demands()[1] - inst.demands[1] / 50.0).abs() < 1e-15);
    }

    #[test]
    fn generator_errors() {
        assert!(matches!(generate_uniform(ProblemKind::Tsp, 1, None, 0), Err(Error::InvalidSize(_))));
        assert!(matches!(
            generate_uniform(ProblemKind::Cvrp, 10, Some(9.0), 0),
            Err(Error::InvalidCapacity(_))
        ));
        assert!(matches!("spiral".parse::<Pattern>(), Err(Error::InvalidPattern(_))));
    }

    #[test]
    fn generators_are_deterministic() {
        let a = generate_uniform(ProblemKind::Tsp, 50, None, 11).unwrap();
        let b = generate_uniform(ProblemKind::Tsp, 50, None, 11).unwrap();
        assert_eq!(a, b);
        for p in [Pattern::Cluster, Pattern::Explosion, Pattern::Implosion] {
            let a = generate_clustered(ProblemKind::Tsp, 1000, p, None, 3).unwrap();
            let b = generate_clustered(ProblemKind::Tsp, 1000, p, None, 3).unwrap();
            assert_eq!(a, b);
            assert!(a.coords.iter().all(|q| (0.0..=1.0).contains(&q[0]) && (0.0..=1.0).contains(&q[1])));
        }
    }

    #[test]
    fn explosion_clears_the_disk() {
        // Re-derive the disk center by replaying the generator's RNG stream.
        let seed = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctr = [rng.gen_range(DISK_RADIUS..=1.0 - DISK_RADIUS), rng.gen_range(DISK_RADIUS..=1.0 - DISK_RADIUS)];
        let inst = generate_clustered(ProblemKind::Tsp, 1000, Pattern::Explosion, None, seed).unwrap();
        assert!(inst.coords.iter().all(|&p| euclid(p, ctr) >= DISK_RADIUS - 1e-12));
    }

    #[test]
    fn parse_minimal_tsplib() {
        let text = "NAME : tri\nTYPE : TSP\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 3 0\n3 0 4\nEOF\n";
        let inst = parse_benchmark(text, BenchmarkFormat::Tsplib).unwrap();
        assert_eq!(inst.coords, vec![[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]]);
        assert_eq!(inst.name, "tri");
        assert_eq!(inst.default_distance_mode(), DistanceMode::Rounded);
        let len = tour_length(&inst, &Tour::new(vec![0, 1, 2])).unwrap();
        assert_eq!(len, 12.0);
    }

    #[test]
    fn parse_rejects_geo() {
        let text = "NAME : g\nTYPE : TSP\nDIMENSION : 2\nEDGE_WEIGHT_TYPE : GEO\nNODE_COORD_SECTION\n1 0 0\n2 1 1\nEOF\n";
        assert!(matches!(parse_benchmark(text, BenchmarkFormat::Tsplib), Err(Error::UnsupportedEdgeWeight(_))));
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "NAME : bad\nTYPE : TSP\nDIMENSION : 2\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 x 1\nEOF\n";
        match parse_benchmark(text, BenchmarkFormat::Tsplib) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_cvrplib_moves_depot_first() {
        let text = "NAME : c\nTYPE : CVRP\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : EUC_2D\nCAPACITY : 10\nNODE_COORD_SECTION\n1 5 5\n2 0 0\n3 9 9\nDEMAND_SECTION\n1 4\n2 0\n3 6\nDEPOT_SECTION\n2\n-1\nEOF\n";
        let inst = parse_benchmark(text, BenchmarkFormat::Cvrplib).unwrap();
        assert_eq!(inst.coords[0], [0.0, 0.0]);
        assert_eq!(inst.demands, vec![0.0, 4.0, 6.0]);
        assert_eq!(inst.capacity, 10.0);
        assert_eq!(inst.unit_coords()[2], [1.0, 1.0]);
    }

    #[test]
    fn route_plan_sequence_round_trip() {
        let plan = RoutePlan::from_sequence(&[0, 3, 1, 0, 2, 0]);
        assert_eq!(plan.routes, vec![vec![3, 1], vec![2]]);
        assert_eq!(plan.to_sequence(), vec![0, 3, 1, 0, 2, 0]);
    }
}

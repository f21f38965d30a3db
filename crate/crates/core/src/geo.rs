//! Location bookkeeping, orderings, exact nearest-neighbor search and the
//! neighbor DAG that defines the NNGP factorization.
//!
//! All searches are exact. Equidistant candidates are ranked by original id,
//! so the same inputs always produce the same DAG.

use std::collections::BinaryHeap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::par::{map_indexed, Execution};

/// A planar coordinate pair.
pub type Point = [f64; 2];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

/// An indexed set of distinct planar locations. Ids are `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationSet {
    coords: Vec<Point>,
}

impl LocationSet {
    /// Builds a location set, rejecting empty input, non-finite coordinates
    /// and coincident points.
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyLocations);
        }
        if let Some(i) = coords.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::NonFiniteLocation(i));
        }
        let mut idx: Vec<usize> = (0..coords.len()).collect();
        idx.sort_by(|&a, &b| {
            coords[a][0]
                .total_cmp(&coords[b][0])
                .then(coords[a][1].total_cmp(&coords[b][1]))
                .then(a.cmp(&b))
        });
        for w in idx.windows(2) {
            if coords[w[0]] == coords[w[1]] {
                let (first, second) = (w[0].min(w[1]), w[0].max(w[1]));
                return Err(Error::DuplicateLocation { first, second });
            }
        }
        Ok(Self { coords })
    }

    /// Builds a set that may be empty (used for query sets).
    pub fn new_allow_empty(coords: Vec<Point>) -> Result<Self> {
        if coords.is_empty() {
            return Ok(Self { coords });
        }
        Self::new(coords)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, id: usize) -> &Point {
        &self.coords[id]
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    /// Regular `nx × ny` grid over `[x0, x1] × [y0, y1]`, row-major in y.
    pub fn grid(nx: usize, ny: usize, x: (f64, f64), y: (f64, f64)) -> Result<Self> {
        let step = |n: usize, lo: f64, hi: f64, i: usize| {
            if n == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut coords = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                coords.push([step(nx, x.0, x.1, i), step(ny, y.0, y.1, j)]);
            }
        }
        Self::new(coords)
    }

    /// Index of the location whose coordinates equal `p` exactly.
    pub fn find(&self, p: &Point) -> Option<usize> {
        self.coords.iter().position(|c| c == p)
    }
}

/// Ordering strategy for the reference set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum OrderStrategy {
    ByX,
    ByY,
    #[default]
    ByCoordSum,
    /// Keep the input order.
    Given,
}

impl std::str::FromStr for OrderStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by_x" => Ok(Self::ByX),
            "by_y" => Ok(Self::ByY),
            "by_coord_sum" => Ok(Self::ByCoordSum),
            "given" => Ok(Self::Given),
            other => Err(Error::Validation(format!("unknown ordering '{other}'"))),
        }
    }
}

/// A total order on a location set: `permutation[position] = id`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ordering {
    pub strategy: OrderStrategy,
    permutation: Vec<usize>,
    position: Vec<usize>,
}

impl Ordering {
    pub fn from_permutation(strategy: OrderStrategy, permutation: Vec<usize>) -> Result<Self> {
        let n = permutation.len();
        let mut position = vec![usize::MAX; n];
        for (pos, &id) in permutation.iter().enumerate() {
            if id >= n || position[id] != usize::MAX {
                return Err(Error::Validation("ordering is not a permutation".into()));
            }
            position[id] = pos;
        }
        Ok(Self {
            strategy,
            permutation,
            position,
        })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Position of original id `id` in the order.
    pub fn position_of(&self, id: usize) -> usize {
        self.position[id]
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }
}

/// Sorts locations by the requested strategy; ties keep original id order.
pub fn order_locations(locs: &LocationSet, strategy: OrderStrategy) -> Ordering {
    let key = |p: &Point| match strategy {
        OrderStrategy::ByX => p[0],
        OrderStrategy::ByY => p[1],
        OrderStrategy::ByCoordSum => p[0] + p[1],
        OrderStrategy::Given => 0.0,
    };
    let mut perm: Vec<usize> = (0..locs.len()).collect();
    if strategy != OrderStrategy::Given {
        // stable sort: equal keys stay in id order
        perm.sort_by(|&a, &b| key(locs.point(a)).total_cmp(&key(locs.point(b))));
    }
    Ordering::from_permutation(strategy, perm).expect("sorted identity is a permutation")
}

/// Neighbor selection scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum NeighborScheme {
    #[default]
    Nearest,
    /// `⌈0.75 m⌉` nearest predecessors plus predecessors spread over the
    /// distance ranks up to the farthest one.
    SteinAlt,
}

impl std::str::FromStr for NeighborScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "stein_alt" => Ok(Self::SteinAlt),
            other => Err(Error::Validation(format!("unknown neighbor scheme '{other}'"))),
        }
    }
}

/// A node of the extended graph: either a reference position or a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeRef {
    Reference(usize),
    Query(usize),
}

/// The neighbor DAG over an ordered reference set, optionally extended with
/// query locations that hang off the reference nodes.
///
/// Reference nodes are indexed by *position* in the ordering. Neighbor lists
/// hold positions, nearest first.
#[derive(Clone, Debug)]
pub struct NeighborDag {
    m: usize,
    scheme: NeighborScheme,
    ordering: Ordering,
    /// Coordinates in position order.
    coords: Vec<Point>,
    neighbors: Vec<Vec<usize>>,
    query_coords: Vec<Point>,
    query_neighbors: Vec<Vec<usize>>,
    reverse: Vec<Vec<NodeRef>>,
}

impl NeighborDag {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn scheme(&self) -> NeighborScheme {
        self.scheme
    }

    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    /// Number of reference nodes `k`.
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn num_queries(&self) -> usize {
        self.query_neighbors.len()
    }

    /// Coordinates of reference position `pos`.
    pub fn coord(&self, pos: usize) -> &Point {
        &self.coords[pos]
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn query_coord(&self, j: usize) -> &Point {
        &self.query_coords[j]
    }

    pub fn query_coords(&self) -> &[Point] {
        &self.query_coords
    }

    pub fn node_coord(&self, node: NodeRef) -> &Point {
        match node {
            NodeRef::Reference(p) => &self.coords[p],
            NodeRef::Query(j) => &self.query_coords[j],
        }
    }

    /// Neighbor positions of reference position `pos`.
    pub fn neighbors(&self, pos: usize) -> &[usize] {
        &self.neighbors[pos]
    }

    /// Neighbor positions (in the reference set) of query `j`.
    pub fn query_neighbors(&self, j: usize) -> &[usize] {
        &self.query_neighbors[j]
    }

    pub fn node_neighbors(&self, node: NodeRef) -> &[usize] {
        match node {
            NodeRef::Reference(p) => &self.neighbors[p],
            NodeRef::Query(j) => &self.query_neighbors[j],
        }
    }

    /// `U(s)`: every reference or query node whose neighbor list contains
    /// reference position `pos`, references first, each group ascending.
    pub fn reverse(&self, pos: usize) -> &[NodeRef] {
        &self.reverse[pos]
    }

    /// Original id of reference position `pos`.
    pub fn id_of(&self, pos: usize) -> usize {
        self.ordering.permutation[pos]
    }

    pub fn position_of(&self, id: usize) -> usize {
        self.ordering.position_of(id)
    }

    /// Number of edges in the reference DAG.
    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Attaches query locations, each conditioned on its `m` nearest
    /// reference locations, and refreshes the reverse sets.
    pub fn attach_queries(&mut self, queries: &[Point], exec: Execution) -> Result<()> {
        if queries.is_empty() {
            self.query_coords.clear();
            self.query_neighbors.clear();
            self.rebuild_reverse();
            return Ok(());
        }
        let index = NeighborIndex::new(&self.coords);
        let m = self.m.min(self.coords.len());
        // index entries are positions; rank ties by original id
        let ids: Vec<usize> = self.ordering.permutation.clone();
        let lists = map_indexed(exec, queries.len(), |j| {
            index.nearest_with_ids(&queries[j], m, &ids, |_| true)
        });
        let mut out = Vec::with_capacity(queries.len());
        for list in lists {
            if let Some(&(d2, pos)) = list.first() {
                if d2 == 0.0 {
                    return Err(Error::QueryOnReference(self.id_of(pos)));
                }
            }
            out.push(list.into_iter().map(|(_, p)| p).collect());
        }
        self.query_coords = queries.to_vec();
        self.query_neighbors = out;
        self.rebuild_reverse();
        Ok(())
    }

    fn rebuild_reverse(&mut self) {
        let mut reverse = vec![Vec::new(); self.neighbors.len()];
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                reverse[j].push(NodeRef::Reference(i));
            }
        }
        for (t, list) in self.query_neighbors.iter().enumerate() {
            for &j in list {
                reverse[j].push(NodeRef::Query(t));
            }
        }
        self.reverse = reverse;
    }

    /// Diagnostic text dump: one line per node in order, `id: n1,n2,...`,
    /// using original ids.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for pos in 0..self.len() {
            let list: Vec<String> = self.neighbors[pos]
                .iter()
                .map(|&p| self.id_of(p).to_string())
                .collect();
            let _ = writeln!(s, "{}: {}", self.id_of(pos), list.join(","));
        }
        s
    }

    /// Removes reference node `pos` (which must have an empty reverse set)
    /// and returns the DAG on the remaining nodes with positions shifted.
    pub fn without_leaf(&self, pos: usize) -> Result<NeighborDag> {
        if !self.reverse[pos].is_empty() {
            return Err(Error::Validation(format!(
                "node at position {pos} has dependents and cannot be removed"
            )));
        }
        let shift = |p: usize| if p > pos { p - 1 } else { p };
        let mut perm = Vec::with_capacity(self.len() - 1);
        let removed_id = self.id_of(pos);
        for &id in self.ordering.permutation.iter() {
            if id != removed_id {
                perm.push(if id > removed_id { id - 1 } else { id });
            }
        }
        let ordering = Ordering::from_permutation(self.ordering.strategy, perm)?;
        let mut coords = self.coords.clone();
        coords.remove(pos);
        let mut neighbors = Vec::with_capacity(self.len() - 1);
        for (i, list) in self.neighbors.iter().enumerate() {
            if i != pos {
                neighbors.push(list.iter().map(|&p| shift(p)).collect());
            }
        }
        let query_neighbors = self
            .query_neighbors
            .iter()
            .map(|l| l.iter().map(|&p| shift(p)).collect())
            .collect();
        let mut dag = NeighborDag {
            m: self.m,
            scheme: self.scheme,
            ordering,
            coords,
            neighbors,
            query_coords: self.query_coords.clone(),
            query_neighbors,
            reverse: Vec::new(),
        };
        dag.rebuild_reverse();
        Ok(dag)
    }

    /// Builds a DAG from explicit neighbor lists (positions, each strictly
    /// preceding its node). Mostly useful for tests and custom schemes.
    pub fn from_lists(coords: Vec<Point>, neighbors: Vec<Vec<usize>>) -> Result<NeighborDag> {
        if coords.len() != neighbors.len() {
            return Err(Error::DimensionMismatch {
                context: "neighbor lists",
                expected: coords.len(),
                got: neighbors.len(),
            });
        }
        for (i, list) in neighbors.iter().enumerate() {
            let mut seen = list.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != list.len() || list.iter().any(|&j| j >= i) {
                return Err(Error::Validation(format!(
                    "neighbor list of node {i} must hold distinct predecessors"
                )));
            }
        }
        LocationSet::new(coords.clone())?;
        let m = neighbors.iter().map(Vec::len).max().unwrap_or(0);
        let ordering =
            Ordering::from_permutation(OrderStrategy::Given, (0..coords.len()).collect())?;
        let mut dag = NeighborDag {
            m,
            scheme: NeighborScheme::Nearest,
            ordering,
            coords,
            neighbors,
            query_coords: Vec::new(),
            query_neighbors: Vec::new(),
            reverse: Vec::new(),
        };
        dag.rebuild_reverse();
        Ok(dag)
    }
}

/// Builds the neighbor DAG: node at position `i` conditions on at most `m`
/// of its predecessors in `ordering`.
pub fn build_neighbor_dag(
    locs: &LocationSet,
    ordering: &Ordering,
    m: usize,
    scheme: NeighborScheme,
    exec: Execution,
) -> Result<NeighborDag> {
    if m == 0 {
        return Err(Error::Validation("neighbor count m must be at least 1".into()));
    }
    if ordering.len() != locs.len() {
        return Err(Error::DimensionMismatch {
            context: "ordering",
            expected: locs.len(),
            got: ordering.len(),
        });
    }
    let coords: Vec<Point> = ordering
        .permutation
        .iter()
        .map(|&id| *locs.point(id))
        .collect();
    let ids = ordering.permutation.clone();
    let k = coords.len();
    let neighbors: Vec<Vec<usize>> = match scheme {
        NeighborScheme::Nearest => {
            let index = NeighborIndex::new(&coords);
            map_indexed(exec, k, |i| {
                if i <= m {
                    let mut all: Vec<(f64, usize)> =
                        (0..i).map(|p| (dist2(&coords[i], &coords[p]), p)).collect();
                    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(ids[a.1].cmp(&ids[b.1])));
                    all.into_iter().map(|(_, p)| p).collect()
                } else {
                    index
                        .nearest_with_ids(&coords[i], m, &ids, |p| p < i)
                        .into_iter()
                        .map(|(_, p)| p)
                        .collect()
                }
            })
        }
        NeighborScheme::SteinAlt => map_indexed(exec, k, |i| stein_alt(&coords, &ids, i, m)),
    };
    let mut dag = NeighborDag {
        m,
        scheme,
        ordering: ordering.clone(),
        coords,
        neighbors,
        query_coords: Vec::new(),
        query_neighbors: Vec::new(),
        reverse: Vec::new(),
    };
    dag.rebuild_reverse();
    Ok(dag)
}

/// Predecessors of position `i` ranked by (distance, original id).
fn ranked_predecessors(coords: &[Point], ids: &[usize], i: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..i).map(|p| (dist2(&coords[i], &coords[p]), p)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(ids[a.1].cmp(&ids[b.1])));
    all.into_iter().map(|(_, p)| p).collect()
}

fn stein_alt(coords: &[Point], ids: &[usize], i: usize, m: usize) -> Vec<usize> {
    let ranked = ranked_predecessors(coords, ids, i);
    // one-based node index is i + 1, so there are i predecessors
    let preds = i;
    if preds <= m {
        return ranked;
    }
    let m_near = (0.75 * m as f64).ceil() as usize;
    let extra = m - m_near;
    let mut ranks: Vec<usize> = (1..=m_near).collect();
    for l in 1..=extra {
        // one-based rank m + ⌊l (i − m − 1) / (m − m′)⌋ with one-based i
        let r = m + (l * (preds - m)) / extra;
        ranks.push(r);
    }
    ranks.sort_unstable();
    ranks.dedup();
    // rank collisions happen when few predecessors lie beyond the m-th;
    // top up with the nearest unused ranks so |N| stays m
    let mut next = m_near + 1;
    while ranks.len() < m {
        if !ranks.contains(&next) {
            ranks.push(next);
        }
        next += 1;
    }
    ranks.sort_unstable();
    ranks.into_iter().map(|r| ranked[r - 1]).collect()
}

/// Exact k-nearest-neighbor index over a fixed point set, backed by a
/// uniform bucket grid searched in expanding rings.
pub struct NeighborIndex {
    points: Vec<Point>,
    origin: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

#[derive(PartialEq)]
struct Candidate {
    d2: f64,
    tie: usize,
    idx: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2.total_cmp(&other.d2).then(self.tie.cmp(&other.tie))
    }
}

impl NeighborIndex {
    pub fn new(points: &[Point]) -> Self {
        let n = points.len().max(1);
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in points {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        if points.is_empty() {
            (x0, y0, x1, y1) = (0.0, 0.0, 1.0, 1.0);
        }
        let w = (x1 - x0).max(0.0);
        let h = (y1 - y0).max(0.0);
        // about two points per bucket
        let mut cell = ((w * h) * 2.0 / n as f64).sqrt();
        if !(cell > 0.0) || !cell.is_finite() {
            cell = w.max(h) / n as f64;
        }
        if !(cell > 0.0) {
            cell = 1.0;
        }
        let nx = ((w / cell).floor() as usize + 1).min(4096);
        let ny = ((h / cell).floor() as usize + 1).min(4096);
        let cell = cell.max(w / nx as f64).max(h / ny as f64);
        let mut idx = Self {
            points: points.to_vec(),
            origin: [x0, y0],
            cell,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        };
        for (i, p) in points.iter().enumerate() {
            let (cx, cy) = idx.cell_of(p);
            idx.buckets[cy * nx + cx].push(i);
        }
        idx
    }

    fn cell_of(&self, p: &Point) -> (usize, usize) {
        let fx = ((p[0] - self.origin[0]) / self.cell).floor();
        let fy = ((p[1] - self.origin[1]) / self.cell).floor();
        let cx = fx.clamp(0.0, (self.nx - 1) as f64) as usize;
        let cy = fy.clamp(0.0, (self.ny - 1) as f64) as usize;
        (cx, cy)
    }

    /// The `k` nearest points to `q` among those passing `keep`, ranked by
    /// (squared distance, `tie_ids[idx]`). Returns `(d², idx)` pairs.
    pub fn nearest_with_ids<F: Fn(usize) -> bool>(
        &self,
        q: &Point,
        k: usize,
        tie_ids: &[usize],
        keep: F,
    ) -> Vec<(f64, usize)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        // the query may sit outside the grid; measure rings from its clamped cell
        let (cx, cy) = self.cell_of(q);
        let gap_x = (self.origin[0] - q[0])
            .max(q[0] - (self.origin[0] + self.nx as f64 * self.cell))
            .max(0.0);
        let gap_y = (self.origin[1] - q[1])
            .max(q[1] - (self.origin[1] + self.ny as f64 * self.cell))
            .max(0.0);
        let outside2 = gap_x * gap_x + gap_y * gap_y;
        let max_ring = self.nx.max(self.ny);
        for r in 0..=max_ring {
            let r_i = r as isize;
            let (cxi, cyi) = (cx as isize, cy as isize);
            let visit = |ix: isize, iy: isize, heap: &mut BinaryHeap<Candidate>| {
                if ix < 0 || iy < 0 || ix >= self.nx as isize || iy >= self.ny as isize {
                    return;
                }
                for &i in &self.buckets[iy as usize * self.nx + ix as usize] {
                    if !keep(i) {
                        continue;
                    }
                    let c = Candidate {
                        d2: dist2(q, &self.points[i]),
                        tie: tie_ids[i],
                        idx: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            };
            if r == 0 {
                visit(cxi, cyi, &mut heap);
            } else {
                for ix in (cxi - r_i)..=(cxi + r_i) {
                    visit(ix, cyi - r_i, &mut heap);
                    visit(ix, cyi + r_i, &mut heap);
                }
                for iy in (cyi - r_i + 1)..=(cyi + r_i - 1) {
                    visit(cxi - r_i, iy, &mut heap);
                    visit(cxi + r_i, iy, &mut heap);
                }
            }
            if heap.len() == k {
                // anything outside rings 0..=r is farther than r cells, plus
                // the offset when the query lies outside the grid
                let ring = r as f64 * self.cell;
                let worst = heap.peek().expect("heap is full").d2;
                if worst < (ring * ring + outside2) * (1.0 - 1e-9) {
                    break;
                }
            }
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.d2, c.idx)).collect()
    }
}

/// The `m` nearest reference locations to `u`, ties broken by id.
pub fn neighbors_for_query(reference: &LocationSet, u: &Point, m: usize) -> Result<Vec<usize>> {
    if m > reference.len() {
        return Err(Error::Validation(format!(
            "requested {m} neighbors from a reference set of {}",
            reference.len()
        )));
    }
    let index = NeighborIndex::new(reference.coords());
    let ids: Vec<usize> = (0..reference.len()).collect();
    let list = index.nearest_with_ids(u, m, &ids, |_| true);
    if let Some(&(d2, id)) = list.first() {
        if d2 == 0.0 {
            return Err(Error::QueryOnReference(id));
        }
    }
    Ok(list.into_iter().map(|(_, id)| id).collect())
}

//! Maximum-inner-product search over ad embeddings: an exact flat scan and
//! an HNSW graph.
//!
//! The graph is built over norm-augmented vectors `[x, sqrt(phi^2 - |x|^2)]`,
//! which all share the norm `phi`, so graph distances are cosine distances.
//! A query `[q, 0]` against an augmented item gives back `<q, x>` exactly,
//! which is why search ranks by the raw inner product.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{IndexConfig, IndexMode};
use crate::corpus::AdId;
use crate::error::{Error, Result};
use crate::heads::dot;

const MAGIC: &[u8; 8] = b"HENCANN\0";
const VERSION: u32 = 1;

/// One search hit: the ad and its true inner product with the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub ad: AdId,
    pub score: f64,
}

/// Score descending, then ad id ascending.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.ad.cmp(&b.ad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    sim: f64,
    node: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Graph {
    m: usize,
    ef_construction: usize,
    seed: u64,
    phi: f64,
    entry: u32,
    /// `links[node][level]` neighbor lists.
    links: Vec<Vec<Vec<u32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    dim: usize,
    ids: Vec<AdId>,
    vectors: Vec<f64>,
    /// Augmented vectors scaled to unit norm; graph mode only.
    unit: Vec<f64>,
    graph: Option<Graph>,
}

impl AnnIndex {
    /// Flat index; every search is a full scan.
    pub fn exact(items: &[(AdId, Vec<f64>)]) -> Result<Self> {
        let (dim, ids, vectors) = collect(items)?;
        Ok(Self {
            dim,
            ids,
            vectors,
            unit: Vec::new(),
            graph: None,
        })
    }

    /// HNSW index with max degree `m` (`2m` on the base layer) built by
    /// sequential insertion with a beam of `ef_construction`. Level draws
    /// come from a generator seeded with `seed`.
    pub fn hnsw(items: &[(AdId, Vec<f64>)], m: usize, ef_construction: usize, seed: u64) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config(format!("index.m {m} must be >= 2")));
        }
        let (dim, ids, vectors) = collect(items)?;
        let n = ids.len();
        let phi = vectors
            .chunks_exact(dim)
            .map(|v| dot(v, v).sqrt())
            .fold(0.0, f64::max);
        let unit = unit_vectors(&vectors, dim, phi);
        let mut index = Self {
            dim,
            ids,
            vectors,
            unit,
            graph: Some(Graph {
                m,
                ef_construction: ef_construction.max(1),
                seed,
                phi,
                entry: 0,
                links: Vec::with_capacity(n),
            }),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ml = 1.0 / (m as f64).ln();
        for node in 0..n {
            let u: f64 = rng.random::<f64>();
            let level = (-(1.0 - u).ln() * ml).floor() as usize;
            index.insert(node as u32, level);
        }
        Ok(index)
    }

    pub fn build(items: &[(AdId, Vec<f64>)], config: &IndexConfig, seed: u64) -> Result<Self> {
        match config.mode {
            IndexMode::Exact => Self::exact(items),
            IndexMode::Hnsw => Self::hnsw(items, config.m, config.ef_construction, seed),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> IndexMode {
        if self.graph.is_some() {
            IndexMode::Hnsw
        } else {
            IndexMode::Exact
        }
    }

    /// Norm-augmentation constant (graph mode), the largest stored norm.
    pub fn phi(&self) -> Option<f64> {
        self.graph.as_ref().map(|g| g.phi)
    }

    pub fn ids(&self) -> &[AdId] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::Data("search on an empty index".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Dimension {
                left: query.len(),
                right: self.dim,
            });
        }
        Ok(())
    }

    /// True top-`n` by inner product.
    pub fn exact_search(&self, query: &[f64], n: usize) -> Result<Vec<Hit>> {
        self.check_query(query)?;
        let mut hits: Vec<Hit> = (0..self.len())
            .map(|i| Hit {
                ad: self.ids[i],
                score: dot(query, self.vector(i)),
            })
            .collect();
        let n = n.min(hits.len());
        if n == 0 {
            return Ok(Vec::new());
        }
        if n < hits.len() {
            hits.select_nth_unstable_by(n - 1, rank_order);
            hits.truncate(n);
        }
        hits.sort_by(rank_order);
        Ok(hits)
    }

    /// Top-`n` by inner product: approximate in graph mode, exact otherwise.
    /// Returned scores are true inner products.
    pub fn search(&self, query: &[f64], n: usize, ef_search: usize) -> Result<Vec<Hit>> {
        let Some(graph) = &self.graph else {
            return self.exact_search(query, n);
        };
        self.check_query(query)?;
        if n >= self.len() {
            return self.exact_search(query, n);
        }
        let sim = |node: u32| dot(query, self.vector(node as usize));
        let top = graph.links[graph.entry as usize].len() - 1;
        let mut ep = Cand {
            sim: sim(graph.entry),
            node: graph.entry,
        };
        for level in (1..=top).rev() {
            ep = self.greedy(ep, level, &sim);
        }
        let found = self.search_layer(&[ep], ef_search.max(n), 0, &sim);
        let mut hits: Vec<Hit> = found
            .into_iter()
            .map(|c| Hit {
                ad: self.ids[c.node as usize],
                score: c.sim,
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(n);
        Ok(hits)
    }

    fn unit_sim(&self, a: u32, b: u32) -> f64 {
        let w = self.dim + 1;
        dot(
            &self.unit[a as usize * w..(a as usize + 1) * w],
            &self.unit[b as usize * w..(b as usize + 1) * w],
        )
    }

    fn greedy(&self, mut ep: Cand, level: usize, sim: &dyn Fn(u32) -> f64) -> Cand {
        let graph = self.graph.as_ref().expect("graph mode");
        loop {
            let mut best = ep;
            for &nb in &graph.links[ep.node as usize][level] {
                let c = Cand { sim: sim(nb), node: nb };
                if c > best {
                    best = c;
                }
            }
            if best == ep {
                return ep;
            }
            ep = best;
        }
    }

    /// Beam search on one layer; returns up to `ef` best nodes found.
    fn search_layer(&self, entries: &[Cand], ef: usize, level: usize, sim: &dyn Fn(u32) -> f64) -> Vec<Cand> {
        let graph = self.graph.as_ref().expect("graph mode");
        let mut visited = vec![false; graph.links.len()];
        let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
        let mut best: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        for &e in entries {
            if !std::mem::replace(&mut visited[e.node as usize], true) {
                frontier.push(e);
                best.push(Reverse(e));
            }
        }
        while let Some(c) = frontier.pop() {
            let worst = best.peek().expect("nonempty").0;
            if c < worst && best.len() >= ef {
                break;
            }
            for &nb in &graph.links[c.node as usize][level] {
                if std::mem::replace(&mut visited[nb as usize], true) {
                    continue;
                }
                let cand = Cand { sim: sim(nb), node: nb };
                let worst = best.peek().expect("nonempty").0;
                if best.len() < ef || cand > worst {
                    frontier.push(cand);
                    best.push(Reverse(cand));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_iter().map(|r| r.0).collect()
    }

    /// Neighbor selection heuristic: keep a candidate only if it is closer
    /// to the base than to every neighbor already kept, then top up with
    /// the best discarded ones.
    fn select(&self, mut cands: Vec<Cand>, keep: usize) -> Vec<u32> {
        cands.sort_by(|a, b| b.cmp(a));
        let mut chosen: Vec<Cand> = Vec::with_capacity(keep);
        let mut rejected = Vec::new();
        for c in cands {
            if chosen.len() >= keep {
                break;
            }
            if chosen.iter().all(|s| self.unit_sim(c.node, s.node) < c.sim) {
                chosen.push(c);
            } else {
                rejected.push(c);
            }
        }
        for c in rejected {
            if chosen.len() >= keep {
                break;
            }
            chosen.push(c);
        }
        chosen.into_iter().map(|c| c.node).collect()
    }

    fn insert(&mut self, node: u32, level: usize) {
        let graph = self.graph.as_mut().expect("graph mode");
        graph.links.push(vec![Vec::new(); level + 1]);
        if node == 0 {
            graph.entry = 0;
            return;
        }
        let (m, ef_c, entry) = (graph.m, graph.ef_construction, graph.entry);
        let top = graph.links[entry as usize].len() - 1;
        let sim = |other: u32| self.unit_sim(node, other);
        let mut ep = Cand {
            sim: sim(entry),
            node: entry,
        };
        for l in ((level + 1)..=top).rev() {
            ep = self.greedy(ep, l, &sim);
        }
        let mut entries = vec![ep];
        let mut updates: Vec<(usize, Vec<u32>)> = Vec::new();
        for l in (0..=level.min(top)).rev() {
            let found = self.search_layer(&entries, ef_c, l, &sim);
            let neighbors = self.select(found.clone(), m);
            updates.push((l, neighbors));
            entries = found;
        }
        let graph_links_len = |s: &Self, n: u32, l: usize| s.graph.as_ref().map_or(0, |g| g.links[n as usize][l].len());
        for (l, neighbors) in updates {
            let cap = if l == 0 { 2 * m } else { m };
            for &nb in &neighbors {
                self.graph.as_mut().expect("graph mode").links[nb as usize][l].push(node);
                if graph_links_len(self, nb, l) > cap {
                    let list = self.graph.as_ref().expect("graph mode").links[nb as usize][l].clone();
                    let cands = list
                        .into_iter()
                        .map(|o| Cand {
                            sim: self.unit_sim(nb, o),
                            node: o,
                        })
                        .collect();
                    let pruned = self.select(cands, cap);
                    self.graph.as_mut().expect("graph mode").links[nb as usize][l] = pruned;
                }
            }
            self.graph.as_mut().expect("graph mode").links[node as usize][l] = neighbors;
        }
        let graph = self.graph.as_mut().expect("graph mode");
        if level > top {
            graph.entry = node;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let (mode, m, efc, seed, phi) = match &self.graph {
            Some(g) => (1u8, g.m, g.ef_construction, g.seed, g.phi),
            None => (0u8, 0, 0, 0, 0.0),
        };
        buf.push(mode);
        for v in [self.dim as u64, self.len() as u64, m as u64, efc as u64, seed] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&phi.to_le_bytes());
        for id in &self.ids {
            buf.extend_from_slice(&id.0.to_le_bytes());
        }
        for v in &self.vectors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(g) = &self.graph {
            buf.extend_from_slice(&g.entry.to_le_bytes());
            for levels in &g.links {
                buf.extend_from_slice(&(levels.len() as u32).to_le_bytes());
                for list in levels {
                    buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
                    for nb in list {
                        buf.extend_from_slice(&nb.to_le_bytes());
                    }
                }
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not an index file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported index version {version}")));
        }
        let mode = r.take(1)?[0];
        let dim = r.u64()? as usize;
        let n = r.u64()? as usize;
        let m = r.u64()? as usize;
        let efc = r.u64()? as usize;
        let seed = r.u64()?;
        let phi = f64::from_bits(r.u64()?);
        let ids = (0..n).map(|_| r.u64().map(AdId)).collect::<Result<Vec<_>>>()?;
        let vectors = (0..n * dim)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        if mode == 0 {
            return Ok(Self {
                dim,
                ids,
                vectors,
                unit: Vec::new(),
                graph: None,
            });
        }
        let entry = r.u32()?;
        let mut links = Vec::with_capacity(n);
        for _ in 0..n {
            let levels = r.u32()? as usize;
            let mut node = Vec::with_capacity(levels);
            for _ in 0..levels {
                let len = r.u32()? as usize;
                node.push((0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
            }
            links.push(node);
        }
        Ok(Self {
            dim,
            unit: unit_vectors(&vectors, dim, phi),
            ids,
            vectors,
            graph: Some(Graph {
                m,
                ef_construction: efc,
                seed,
                phi,
                entry,
                links,
            }),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Data("index file truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// `[x, sqrt(phi^2 - |x|^2)] / phi` per row; all rows get unit norm.
fn unit_vectors(vectors: &[f64], dim: usize, phi: f64) -> Vec<f64> {
    let mut unit = Vec::with_capacity(vectors.len() / dim.max(1) * (dim + 1));
    for v in vectors.chunks_exact(dim.max(1)) {
        if phi > 0.0 {
            let extra = (phi * phi - dot(v, v)).max(0.0).sqrt();
            unit.extend(v.iter().map(|x| x / phi));
            unit.push(extra / phi);
        } else {
            unit.extend(std::iter::repeat_n(0.0, dim));
            unit.push(1.0);
        }
    }
    unit
}

fn collect(items: &[(AdId, Vec<f64>)]) -> Result<(usize, Vec<AdId>, Vec<f64>)> {
    let first = items
        .first()
        .ok_or_else(|| Error::Data("cannot index an empty item list".into()))?;
    let dim = first.1.len();
    let mut seen = std::collections::HashSet::with_capacity(items.len());
    let mut ids = Vec::with_capacity(items.len());
    let mut vectors = Vec::with_capacity(items.len() * dim);
    for (id, v) in items {
        if !seen.insert(*id) {
            return Err(Error::DuplicateId(id.0));
        }
        if v.len() != dim {
            return Err(Error::Dimension {
                left: v.len(),
                right: dim,
            });
        }
        ids.push(*id);
        vectors.extend_from_slice(v);
    }
    Ok((dim, ids, vectors))
}

/// Fraction of `truth` ids present in `found`.
pub fn recall(found: &[Hit], truth: &[Hit]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let set: std::collections::HashSet<AdId> = found.iter().map(|h| h.ad).collect();
    truth.iter().filter(|h| set.contains(&h.ad)).count() as f64 / truth.len() as f64
}

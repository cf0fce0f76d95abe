//! Interned, lazily expanded view of the tree used by the simulators.
//!
//! Vertices get dense `u32` ids on first contact; neighbor lists and the
//! boundary classification are computed once per vertex and cached. Ids are
//! an implementation detail: they depend on the order in which a run touches
//! the tree, so nothing observable may depend on their numeric values.

use std::collections::HashMap;

use crate::configs::{BoundarySpec, Site};
use crate::tree::{child, parent, TreeParams, VertexAddr};

pub type VertexId = u32;

const UNEXPANDED: VertexId = VertexId::MAX;

#[derive(Debug, Clone)]
pub struct Lattice {
    params: TreeParams,
    boundary: BoundarySpec,
    addrs: Vec<VertexAddr>,
    sites: Vec<Site>,
    index: HashMap<VertexAddr, VertexId>,
    // d slots per vertex: parent, then children; UNEXPANDED until first use.
    nbrs: Vec<VertexId>,
}

impl Lattice {
    pub fn new(params: TreeParams, boundary: BoundarySpec) -> Self {
        Self {
            params,
            boundary,
            addrs: Vec::new(),
            sites: Vec::new(),
            index: HashMap::new(),
            nbrs: Vec::new(),
        }
    }

    pub fn params(&self) -> TreeParams {
        self.params
    }

    pub fn boundary(&self) -> &BoundarySpec {
        &self.boundary
    }

    pub fn degree(&self) -> usize {
        self.params.degree() as usize
    }

    pub fn intern(&mut self, x: &VertexAddr) -> VertexId {
        if let Some(&id) = self.index.get(x) {
            return id;
        }
        let id = self.addrs.len() as VertexId;
        self.index.insert(x.clone(), id);
        self.sites.push(self.boundary.site(x));
        self.addrs.push(x.clone());
        self.nbrs.extend(std::iter::repeat_n(UNEXPANDED, self.degree()));
        id
    }

    pub fn lookup(&self, x: &VertexAddr) -> Option<VertexId> {
        self.index.get(x).copied()
    }

    pub fn addr(&self, id: VertexId) -> &VertexAddr {
        &self.addrs[id as usize]
    }

    pub fn site(&self, id: VertexId) -> Site {
        self.sites[id as usize]
    }

    pub fn len(&self) -> usize {
        self.addrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addrs.is_empty()
    }

    /// Neighbor `slot` of `id` (slot 0 is the parent).
    pub fn neighbor(&mut self, id: VertexId, slot: usize) -> VertexId {
        let d = self.degree();
        let at = id as usize * d + slot;
        let cached = self.nbrs[at];
        if cached != UNEXPANDED {
            return cached;
        }
        let x = self.addrs[id as usize].clone();
        let y = if slot == 0 { parent(&x) } else { child(&x, (slot - 1) as u8) };
        let yid = self.intern(&y);
        self.nbrs[at] = yid;
        yid
    }

    /// All `d` neighbors of `id`, parent first.
    pub fn neighbors(&mut self, id: VertexId) -> Neighbors {
        let d = self.degree();
        let mut out = Neighbors { ids: [0; 64], len: d };
        for slot in 0..d {
            out.ids[slot] = self.neighbor(id, slot);
        }
        out
    }
}

/// Fixed-capacity neighbor list (`d <= 64`).
#[derive(Clone, Copy)]
pub struct Neighbors {
    ids: [VertexId; 64],
    len: usize,
}

impl std::ops::Deref for Neighbors {
    type Target = [VertexId];
    fn deref(&self) -> &[VertexId] {
        &self.ids[..self.len]
    }
}

//! Reduce tree planning: latency model, degree selection, the canonical
//! slot tree, arrival-order slot assignment and failure repair.
//!
//! Slots are numbered in pre-order (the root is slot 0). Sources are placed
//! by arrival: the k-th source to become ready takes the k-th slot of the
//! generalized in-order traversal (first child, the node itself, then the
//! remaining children). Early arrivals fill whole subtrees first, so their
//! aggregates finish before the later sources show up.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::config::NetworkProfile;
use crate::error::{Error, Result};
use crate::id::{NodeId, ObjectId};
use crate::reduce::op::ReduceOpSpec;

pub type SlotId = u32;

/// Estimated reduce completion time for a tree of degree `d`.
///
/// A chain pays one latency per participant but streams the object once;
/// a degree-`d` tree pays one latency per level and `d` objects of ingress
/// at every interior node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyModel {
    pub profile: NetworkProfile,
    pub object_bytes: u64,
    pub participants: u32,
}

impl LatencyModel {
    pub fn new(profile: NetworkProfile, object_bytes: u64, participants: u32) -> Self {
        Self { profile, object_bytes, participants }
    }

    pub fn predict(&self, d: u32) -> f64 {
        let l = self.profile.latency_s;
        let xfer = self.profile.transmit_s(self.object_bytes);
        let n = f64::from(self.participants);
        if d <= 1 {
            n * l + xfer
        } else {
            l * n.ln() / f64::from(d).ln() + f64::from(d) * xfer
        }
    }
}

/// Degrees considered by [`choose_degree`], ascending and deduplicated.
pub fn candidate_degrees(n: u32) -> Vec<u32> {
    let mut c = vec![1, 2, n.max(1)];
    c.sort_unstable();
    c.dedup();
    c
}

/// Picks the degree in {1, 2, n} with the smallest predicted latency;
/// ties go to the smaller degree.
pub fn choose_degree(object_bytes: u64, n: u32, profile: &NetworkProfile) -> u32 {
    let model = LatencyModel::new(*profile, object_bytes, n);
    let mut best = (1, model.predict(1));
    for d in candidate_degrees(n).into_iter().skip(1) {
        let t = model.predict(d);
        if t < best.1 {
            best = (d, t);
        }
    }
    best.0
}

/// Smallest `h` with `d^h >= n`; the depth bound of a canonical tree.
pub fn ceil_log(d: u32, n: u32) -> u32 {
    if d <= 1 {
        return n.saturating_sub(1);
    }
    let (mut h, mut reach) = (0u32, 1u64);
    while reach < u64::from(n) {
        reach *= u64::from(d);
        h += 1;
    }
    h
}

/// Upper bound on slots cleared by one slot failure: the slot plus its
/// ancestors.
pub fn invalidation_bound(d: u32, n: u32) -> u32 {
    ceil_log(d, n) + 1
}

/// Strategy for picking the tree degree of a reduce.
pub trait DegreePolicy: Send + Sync {
    fn name(&self) -> &'static str;
    fn degree(&self, object_bytes: u64, n: u32, profile: &NetworkProfile) -> u32;
}

/// Minimizes the latency model over {1, 2, n}.
pub struct ModelDriven;

impl DegreePolicy for ModelDriven {
    fn name(&self) -> &'static str {
        "auto"
    }
    fn degree(&self, object_bytes: u64, n: u32, profile: &NetworkProfile) -> u32 {
        choose_degree(object_bytes, n, profile)
    }
}

/// Always the same tree shape.
pub struct FixedDegree {
    name: &'static str,
    /// `None` means a star of degree `n`.
    degree: Option<u32>,
}

impl DegreePolicy for FixedDegree {
    fn name(&self) -> &'static str {
        self.name
    }
    fn degree(&self, _object_bytes: u64, n: u32, _profile: &NetworkProfile) -> u32 {
        self.degree.unwrap_or(n).min(n.max(1))
    }
}

/// Name-indexed set of degree policies.
pub struct DegreeRegistry {
    policies: BTreeMap<&'static str, Box<dyn DegreePolicy>>,
}

impl DegreeRegistry {
    pub fn empty() -> Self {
        Self { policies: BTreeMap::new() }
    }

    /// `auto`, `chain` (d=1), `binary` (d=2) and `star` (d=n).
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(ModelDriven));
        r.register(Box::new(FixedDegree { name: "chain", degree: Some(1) }));
        r.register(Box::new(FixedDegree { name: "binary", degree: Some(2) }));
        r.register(Box::new(FixedDegree { name: "star", degree: None }));
        r
    }

    pub fn register(&mut self, policy: Box<dyn DegreePolicy>) {
        self.policies.insert(policy.name(), policy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn DegreePolicy> {
        self.policies.get(name).map(|p| p.as_ref()).ok_or_else(|| {
            Error::Config(format!(
                "unknown degree policy {name:?}; known: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.policies.keys().copied()
    }
}

/// Sizes of the (non-empty) child subtrees under a subtree of `size` slots.
fn child_sizes(size: u32, d: u32) -> impl Iterator<Item = u32> {
    let rest = size.saturating_sub(1);
    let d = d.max(1);
    let (q, r) = (rest / d, rest % d);
    (0..d).map(move |j| q + u32::from(j < r)).take_while(|s| *s > 0)
}

/// The canonical degree-`d` tree over `n` slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeShape {
    n: u32,
    d: u32,
    parent: Vec<Option<SlotId>>,
    children: Vec<Vec<SlotId>>,
    inorder: Vec<SlotId>,
}

impl TreeShape {
    pub fn new(n: u32, d: u32) -> Self {
        assert!(n >= 1 && d >= 1, "tree needs n >= 1 and d >= 1");
        let mut shape = Self {
            n,
            d,
            parent: vec![None; n as usize],
            children: vec![Vec::new(); n as usize],
            inorder: Vec::with_capacity(n as usize),
        };
        shape.build(n, 0, None);
        shape
    }

    fn build(&mut self, size: u32, base: SlotId, parent: Option<SlotId>) {
        self.parent[base as usize] = parent;
        let mut next = base + 1;
        let mut first = true;
        for s in child_sizes(size, self.d) {
            self.children[base as usize].push(next);
            self.build(s, next, Some(base));
            if first {
                self.inorder.push(base);
                first = false;
            }
            next += s;
        }
        if first {
            self.inorder.push(base);
        }
    }

    pub fn n(&self) -> u32 {
        self.n
    }
    pub fn d(&self) -> u32 {
        self.d
    }
    pub fn root(&self) -> SlotId {
        0
    }
    pub fn parent(&self, slot: SlotId) -> Option<SlotId> {
        self.parent[slot as usize]
    }
    pub fn children(&self, slot: SlotId) -> &[SlotId] {
        &self.children[slot as usize]
    }
    /// Slots in generalized in-order.
    pub fn inorder(&self) -> &[SlotId] {
        &self.inorder
    }

    /// The slot and all of its ancestors, bottom-up.
    pub fn path_to_root(&self, slot: SlotId) -> Vec<SlotId> {
        let mut path = vec![slot];
        let mut cur = slot;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path
    }

    pub fn height(&self) -> u32 {
        (0..self.n).map(|s| self.path_to_root(s).len() as u32 - 1).max().unwrap_or(0)
    }
}

/// Slot at in-order index `k` of the canonical tree, without building it.
pub fn assign_slot(k: u32, d: u32, n: u32) -> SlotId {
    assert!(k < n, "arrival index {k} out of range for {n} slots");
    let (mut size, mut base, mut k) = (n, 0u32, k);
    loop {
        let mut sizes = child_sizes(size, d);
        let Some(first) = sizes.next() else { return base };
        if k < first {
            base += 1;
            size = first;
            continue;
        }
        if k == first {
            return base;
        }
        k -= first + 1;
        let mut child_base = base + 1 + first;
        let mut found = false;
        for s in sizes {
            if k < s {
                base = child_base;
                size = s;
                found = true;
                break;
            }
            k -= s;
            child_base += s;
        }
        assert!(found, "in-order index beyond subtree");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotAssignment {
    pub source: ObjectId,
    pub host: NodeId,
}

/// Outcome of removing a failed host from a plan.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Repair {
    /// Slots that lost their source, with the source they held.
    pub vacated: Vec<(SlotId, ObjectId)>,
    /// Slots whose partial aggregates are stale, per vacated slot.
    pub invalidated: Vec<Vec<SlotId>>,
    /// Vacated slots refilled from the ready queue.
    pub replacements: Vec<(SlotId, SlotAssignment)>,
}

impl Repair {
    pub fn is_empty(&self) -> bool {
        self.vacated.is_empty()
    }

    pub fn all_invalidated(&self) -> BTreeSet<SlotId> {
        self.invalidated.iter().flatten().copied().collect()
    }
}

/// Placement of sources into slots for one reduce.
#[derive(Clone, Debug)]
pub struct ReducePlan {
    pub target: ObjectId,
    pub op: ReduceOpSpec,
    /// Candidate sources, in the caller's order.
    pub m: u32,
    shape: TreeShape,
    assignment: Vec<Option<SlotAssignment>>,
    epochs: Vec<u32>,
    /// Number of in-order positions opened so far.
    opened: u32,
}

impl ReducePlan {
    pub fn new(target: ObjectId, op: ReduceOpSpec, n: u32, m: u32, d: u32) -> Result<Self> {
        if n < 2 || n > m {
            return Err(Error::InvalidArgument(format!("reduce needs 2 <= n <= m, got n={n} m={m}")));
        }
        if !(d == 1 || d == 2 || d == n) {
            return Err(Error::InvalidArgument(format!("degree {d} is not one of 1, 2, {n}")));
        }
        Ok(Self {
            target,
            op,
            m,
            shape: TreeShape::new(n, d),
            assignment: vec![None; n as usize],
            epochs: vec![0; n as usize],
            opened: 0,
        })
    }

    pub fn n(&self) -> u32 {
        self.shape.n()
    }
    pub fn d(&self) -> u32 {
        self.shape.d()
    }
    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }
    pub fn epoch(&self, slot: SlotId) -> u32 {
        self.epochs[slot as usize]
    }
    pub fn assignment(&self, slot: SlotId) -> Option<SlotAssignment> {
        self.assignment[slot as usize]
    }

    pub fn is_full(&self) -> bool {
        self.assignment.iter().all(Option::is_some)
    }

    pub fn assigned_sources(&self) -> Vec<ObjectId> {
        self.shape
            .inorder()
            .iter()
            .filter_map(|s| self.assignment[*s as usize].map(|a| a.source))
            .collect()
    }

    pub fn slots_on(&self, host: NodeId) -> Vec<SlotId> {
        (0..self.n()).filter(|s| matches!(self.assignment(*s), Some(a) if a.host == host)).collect()
    }

    pub fn slot_of_source(&self, source: &ObjectId) -> Option<SlotId> {
        (0..self.n()).find(|s| matches!(self.assignment(*s), Some(a) if a.source == *source))
    }

    /// Places a newly ready source: a slot vacated by failure first, else the
    /// next in-order position. Returns `None` once the tree is full.
    pub fn assign_next(&mut self, source: ObjectId, host: NodeId) -> Option<SlotId> {
        let vacant = self.shape.inorder()[..self.opened as usize]
            .iter()
            .copied()
            .find(|s| self.assignment[*s as usize].is_none());
        let slot = match vacant {
            Some(s) => s,
            None if self.opened < self.n() => {
                let s = assign_slot(self.opened, self.d(), self.n());
                self.opened += 1;
                s
            }
            None => return None,
        };
        self.assignment[slot as usize] = Some(SlotAssignment { source, host });
        Some(slot)
    }

    /// Removes every slot hosted on `failed` and bumps the epoch of each such
    /// slot and its ancestors. Vacated slots are refilled from `ready` (in
    /// order). `outstanding` counts candidates that have not yet become ready
    /// and could still arrive; if the vacancies exceed what `ready` and
    /// `outstanding` can supply the reduce is unsatisfiable.
    pub fn repair(
        &mut self,
        failed: NodeId,
        ready: &mut impl Iterator<Item = SlotAssignment>,
        outstanding: usize,
    ) -> Result<Repair> {
        let slots = self.slots_on(failed);
        self.repair_slots(&slots, ready, outstanding)
    }

    /// Like [`ReducePlan::repair`] for an explicit set of assigned slots.
    pub fn repair_slots(
        &mut self,
        slots: &[SlotId],
        ready: &mut impl Iterator<Item = SlotAssignment>,
        outstanding: usize,
    ) -> Result<Repair> {
        let mut out = Repair::default();
        for &slot in slots {
            let lost = self.assignment[slot as usize].take().expect("slot was assigned");
            out.vacated.push((slot, lost.source));
            let path = self.shape.path_to_root(slot);
            for s in &path {
                self.epochs[*s as usize] += 1;
            }
            out.invalidated.push(path);
        }
        let mut unfilled = 0usize;
        for (slot, _) in out.vacated.clone() {
            match ready.next() {
                Some(a) => {
                    self.assignment[slot as usize] = Some(a);
                    out.replacements.push((slot, a));
                }
                None => unfilled += 1,
            }
        }
        if unfilled > outstanding {
            return Err(Error::Unsatisfiable(self.target));
        }
        Ok(out)
    }
}

impl fmt::Display for TreeShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn go(t: &TreeShape, s: SlotId, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write!(f, "{s}")?;
            if !t.children(s).is_empty() {
                f.write_str("(")?;
                for (i, c) in t.children(s).iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    go(t, *c, f)?;
                }
                f.write_str(")")?;
            }
            Ok(())
        }
        go(self, 0, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduce::op::{DType, ReduceOp};
    use proptest::prelude::*;

    fn profile(l: f64, b: f64) -> NetworkProfile {
        NetworkProfile::new(l, b).unwrap()
    }

    /// Explicit recursive in-order walk, independent of `assign_slot`.
    fn inorder_oracle(t: &TreeShape, s: SlotId, out: &mut Vec<SlotId>) {
        let kids = t.children(s);
        if let Some((first, rest)) = kids.split_first() {
            inorder_oracle(t, *first, out);
            out.push(s);
            for c in rest {
                inorder_oracle(t, *c, out);
            }
        } else {
            out.push(s);
        }
    }

    fn subtree_size(t: &TreeShape, s: SlotId) -> u32 {
        1 + t.children(s).iter().map(|c| subtree_size(t, *c)).sum::<u32>()
    }

    #[test]
    fn latency_model_examples() {
        let m = LatencyModel::new(profile(0.001, 1e9), 1_000_000_000, 16);
        assert!((m.predict(1) - 1.016).abs() < 1e-12);
        assert!((m.predict(2) - 2.004).abs() < 1e-12);
        assert!((m.predict(16) - 16.001).abs() < 1e-12);
        assert_eq!(choose_degree(1_000_000_000, 16, &profile(0.001, 1e9)), 1);

        let small = LatencyModel::new(profile(100e-6, 1.25e9), 1000, 16);
        // 100 us + 16 * 0.8 us
        assert!((small.predict(16) - 112.8e-6).abs() < 1e-12);
        assert!(small.predict(16) < small.predict(2));
        assert!(small.predict(16) < small.predict(1));
        assert_eq!(choose_degree(1000, 16, &profile(100e-6, 1.25e9)), 16);
    }

    #[test]
    fn two_participants_tie_goes_to_smaller_degree() {
        let p = profile(0.001, 1e9);
        // With S/B << L the chain loses; with n == 2 the binary tree is the star.
        let m = LatencyModel::new(p, 10, 2);
        assert!(m.predict(1) > m.predict(2));
        assert_eq!(choose_degree(10, 2, &p), 2);
        assert_eq!(candidate_degrees(2), vec![1, 2]);
    }

    #[test]
    fn acceptance_model_values() {
        let m = LatencyModel::new(profile(0.001, 1e9), 64_000_000, 16);
        assert!((m.predict(1) - 0.080).abs() < 1e-12);
        assert!((m.predict(2) - 0.132).abs() < 1e-12);
        assert!((m.predict(16) - 1.025).abs() < 1e-12);
    }

    #[test]
    fn canonical_shapes() {
        let t = TreeShape::new(6, 2);
        assert_eq!(t.to_string(), "0(1(2 3) 4(5))");
        // left-left leaf, left subroot, left-right leaf, root, right leaf, right subroot
        assert_eq!(t.inorder(), &[2, 1, 3, 0, 5, 4]);

        let t = TreeShape::new(3, 2);
        assert_eq!(t.inorder(), &[1, 0, 2]);

        let chain = TreeShape::new(4, 1);
        assert_eq!(chain.to_string(), "0(1(2(3)))");
        assert_eq!(chain.inorder(), &[3, 2, 1, 0]);

        let star = TreeShape::new(5, 5);
        assert_eq!(star.to_string(), "0(1 2 3 4)");
        assert_eq!(star.inorder(), &[1, 0, 2, 3, 4]);
    }

    #[test]
    fn assign_slot_examples() {
        let order: Vec<_> = (0..6).map(|k| assign_slot(k, 2, 6)).collect();
        assert_eq!(order, vec![2, 1, 3, 0, 5, 4]);
        assert_eq!(assign_slot(3, 2, 6), 0, "root is the 4th arrival");
        assert_eq!(assign_slot(0, 1, 4), 3, "chain grows upward");
        assert_eq!(assign_slot(3, 1, 4), 0);
    }

    #[test]
    fn invalidation_bounds() {
        assert_eq!(ceil_log(2, 6), 3);
        assert_eq!(ceil_log(2, 16), 4);
        assert_eq!(ceil_log(16, 16), 1);
        assert_eq!(invalidation_bound(2, 6), 4);
        assert_eq!(invalidation_bound(1, 6), 6);
    }

    #[test]
    fn registry_lookup() {
        let r = DegreeRegistry::builtin();
        let p = profile(0.001, 1e9);
        assert_eq!(r.get("chain").unwrap().degree(1, 8, &p), 1);
        assert_eq!(r.get("binary").unwrap().degree(1, 8, &p), 2);
        assert_eq!(r.get("star").unwrap().degree(1, 8, &p), 8);
        assert_eq!(r.get("auto").unwrap().degree(64_000_000, 16, &p), 1);
        assert!(r.get("ring").is_err());
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["auto", "binary", "chain", "star"]);
    }

    fn spec() -> ReduceOpSpec {
        ReduceOpSpec::new(ReduceOp::Sum, DType::I64, 4)
    }

    #[test]
    fn plan_fills_in_order_and_stops_at_n() {
        let mut plan = ReducePlan::new(ObjectId::from_name("t"), spec(), 3, 5, 2).unwrap();
        let slots: Vec<_> = (0..5)
            .map(|i| plan.assign_next(ObjectId::from_parts(0, i), NodeId(i as u32)))
            .collect();
        assert_eq!(slots, vec![Some(1), Some(0), Some(2), None, None]);
        assert!(plan.is_full());
        assert!(ReducePlan::new(ObjectId::from_name("t"), spec(), 1, 5, 1).is_err());
        assert!(ReducePlan::new(ObjectId::from_name("t"), spec(), 4, 3, 1).is_err());
        assert!(ReducePlan::new(ObjectId::from_name("t"), spec(), 6, 6, 3).is_err());
    }

    #[test]
    fn repair_internal_slot_matches_figure_example() {
        // Six of ten sources, binary tree, R1..R6 arrive in order; R2 fails
        // while R7 is ready.
        let mut plan = ReducePlan::new(ObjectId::from_name("t"), spec(), 6, 10, 2).unwrap();
        let src = |i: u32| ObjectId::from_name(&format!("R{i}"));
        for i in 1..=6 {
            plan.assign_next(src(i), NodeId(i));
        }
        assert_eq!(plan.slot_of_source(&src(2)), Some(1));
        assert_eq!(plan.slot_of_source(&src(4)), Some(0));
        let mut ready = vec![SlotAssignment { source: src(7), host: NodeId(7) }].into_iter();
        let rep = plan.repair(NodeId(2), &mut ready, 3).unwrap();
        assert_eq!(rep.vacated, vec![(1, src(2))]);
        assert_eq!(rep.invalidated, vec![vec![1, 0]]);
        assert_eq!(plan.slot_of_source(&src(7)), Some(1));
        assert_eq!(plan.epoch(1), 1);
        assert_eq!(plan.epoch(0), 1);
        assert_eq!(plan.epoch(4), 0);
        let mut included = plan.assigned_sources();
        included.sort();
        let mut expect: Vec<_> = [1, 3, 4, 5, 6, 7].iter().map(|i| src(*i)).collect();
        expect.sort();
        assert_eq!(included, expect);
    }

    #[test]
    fn repair_leaf_and_unsatisfiable() {
        let mut plan = ReducePlan::new(ObjectId::from_name("t"), spec(), 6, 6, 2).unwrap();
        for i in 0..6 {
            plan.assign_next(ObjectId::from_parts(1, i), NodeId(i as u32));
        }
        // Slot 2 (first arrival, host n0) is a depth-2 leaf.
        let rep = plan.repair(NodeId(0), &mut std::iter::empty(), 1).unwrap();
        assert_eq!(rep.invalidated, vec![vec![2, 1, 0]]);
        assert!(rep.replacements.is_empty());
        assert_eq!(plan.assign_next(ObjectId::from_parts(2, 0), NodeId(9)), Some(2));
        let err = plan.repair(NodeId(9), &mut std::iter::empty(), 0).unwrap_err();
        assert_eq!(err, Error::Unsatisfiable(ObjectId::from_name("t")));
        // A host with no slots changes nothing.
        assert!(plan.repair(NodeId(42), &mut std::iter::empty(), 0).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn assign_slot_matches_inorder_oracle(n in 1u32..80, d_sel in 0u8..4) {
            let d = match d_sel { 0 => 1, 1 => 2, 2 => 3, _ => n };
            let t = TreeShape::new(n, d);
            let mut walk = Vec::new();
            inorder_oracle(&t, 0, &mut walk);
            prop_assert_eq!(&walk, &t.inorder().to_vec());
            for k in 0..n {
                prop_assert_eq!(assign_slot(k, d, n), walk[k as usize]);
            }
        }

        #[test]
        fn subtree_sizes_follow_quotient_rule(n in 1u32..80, d in 1u32..6) {
            let t = TreeShape::new(n, d);
            for s in 0..n {
                let size = subtree_size(&t, s);
                let (q, r) = ((size - 1) / d, (size - 1) % d);
                let kids: Vec<u32> = t.children(s).iter().map(|c| subtree_size(&t, *c)).collect();
                let expect: Vec<u32> = (0..d).map(|j| q + u32::from(j < r)).filter(|x| *x > 0).collect();
                prop_assert_eq!(kids, expect);
            }
        }

        #[test]
        fn height_respects_invalidation_bound(n in 2u32..200, d_sel in 0u8..2) {
            let d = if d_sel == 0 { 2 } else { n };
            let t = TreeShape::new(n, d);
            for s in 0..n {
                prop_assert!(t.path_to_root(s).len() as u32 <= invalidation_bound(d, n));
            }
        }

        #[test]
        fn choose_degree_is_argmin(s in 1u64..2_000_000_000, n in 2u32..64, l in 1e-6f64..1e-2, b in 1e8f64..1e11) {
            let p = NetworkProfile::new(l, b).unwrap();
            let m = LatencyModel::new(p, s, n);
            let d = choose_degree(s, n, &p);
            for c in candidate_degrees(n) {
                prop_assert!(m.predict(d) <= m.predict(c));
                if c < d { prop_assert!(m.predict(c) > m.predict(d)); }
            }
        }
    }
}

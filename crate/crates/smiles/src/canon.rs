//! Canonical atom ranking by iterative invariant refinement with
//! deterministic tie-breaking, and a SMILES writer driven by any ranking.

use std::collections::{BTreeMap, HashMap};

use crate::graph::{BondOrder, Chirality, MolecularGraph, NeighborRef};
use crate::perceive::effective_chirality;

fn bond_code(order: BondOrder) -> u8 {
    match order {
        BondOrder::Single => 1,
        BondOrder::Double => 2,
        BondOrder::Triple => 3,
        BondOrder::Aromatic => 4,
    }
}

/// Dense ranks of `keys` (equal keys share a rank, ranks start at 0).
fn dense_rank<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).expect("key present"))
        .collect()
}

fn refine(g: &MolecularGraph, mut classes: Vec<usize>) -> Vec<usize> {
    let mut count = classes.iter().collect::<std::collections::BTreeSet<_>>().len();
    loop {
        let keys: Vec<(usize, Vec<(usize, u8)>)> = (0..g.num_atoms())
            .map(|i| {
                let mut nb: Vec<(usize, u8)> = g
                    .neighbors(i)
                    .iter()
                    .map(|&(j, k)| (classes[j], bond_code(g.bonds[k].order)))
                    .collect();
                nb.sort_unstable();
                (classes[i], nb)
            })
            .collect();
        let next = dense_rank(&keys);
        let next_count = next.iter().collect::<std::collections::BTreeSet<_>>().len();
        classes = next;
        if next_count == count {
            return classes;
        }
        count = next_count;
    }
}

fn initial_classes(g: &MolecularGraph) -> Vec<usize> {
    let inv: Vec<(u8, u16, i8, bool, u8, usize)> = g
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            (
                a.atomic_number(),
                a.isotope.unwrap_or(0),
                a.charge,
                a.aromatic,
                a.total_h(),
                g.degree(i),
            )
        })
        .collect();
    dense_rank(&inv)
}

/// Symmetry classes from invariant refinement (no tie-breaking). Higher
/// atomic number always sorts higher.
pub fn refined_classes(g: &MolecularGraph) -> Vec<usize> {
    refine(g, initial_classes(g))
}

/// A total order of atoms that depends only on the molecule, not on input
/// atom order (up to automorphism).
pub fn canonical_ranks(g: &MolecularGraph) -> Vec<usize> {
    let n = g.num_atoms();
    let mut classes = refined_classes(g);
    loop {
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in classes.iter().enumerate() {
            members.entry(c).or_default().push(i);
        }
        let Some((_, tied)) = members.iter().find(|(_, m)| m.len() > 1) else {
            return classes;
        };
        let chosen = tied[0];
        let keys: Vec<(usize, u8)> = (0..n)
            .map(|i| (classes[i], u8::from(i != chosen)))
            .collect();
        classes = refine(g, dense_rank(&keys));
    }
}

/// Canonical SMILES. Two graphs of the same molecule give the same string.
pub fn canonical_smiles(g: &MolecularGraph) -> String {
    write_smiles(g, &canonical_ranks(g))
}

struct Layout {
    /// Atoms in writing order.
    sequence: Vec<usize>,
    parent: Vec<Option<(usize, usize)>>,
    children: Vec<Vec<(usize, usize)>>,
    /// Ring-closure bonds opened at each atom, in discovery order.
    opens: Vec<Vec<(usize, usize)>>,
    /// Ring-closure bonds closed at each atom, in discovery order.
    closes: Vec<Vec<(usize, usize)>>,
    roots: Vec<usize>,
}

fn layout(g: &MolecularGraph, ranks: &[usize]) -> Layout {
    let n = g.num_atoms();
    let mut lay = Layout {
        sequence: Vec::with_capacity(n),
        parent: vec![None; n],
        children: vec![Vec::new(); n],
        opens: vec![Vec::new(); n],
        closes: vec![Vec::new(); n],
        roots: Vec::new(),
    };
    let mut visited = vec![false; n];
    let mut used = vec![false; g.num_bonds()];
    let mut by_rank: Vec<usize> = (0..n).collect();
    by_rank.sort_by_key(|&i| (ranks[i], i));

    for &root in &by_rank {
        if visited[root] {
            continue;
        }
        lay.roots.push(root);
        // Explicit stack of (atom, sorted neighbour list, cursor).
        let mut stack: Vec<(usize, Vec<(usize, usize)>, usize)> = Vec::new();
        let enter = |u: usize, visited: &mut Vec<bool>, lay: &mut Layout| {
            visited[u] = true;
            lay.sequence.push(u);
            let mut nb: Vec<(usize, usize)> = g.neighbors(u).to_vec();
            nb.sort_by_key(|&(v, k)| (ranks[v], v, k));
            (u, nb, 0usize)
        };
        stack.push(enter(root, &mut visited, &mut lay));
        while let Some(top) = stack.last_mut() {
            let (u, ref nb, ref mut cursor) = *top;
            if *cursor >= nb.len() {
                stack.pop();
                continue;
            }
            let (v, k) = nb[*cursor];
            *cursor += 1;
            if used[k] {
                continue;
            }
            used[k] = true;
            if visited[v] {
                lay.opens[v].push((u, k));
                lay.closes[u].push((v, k));
            } else {
                lay.parent[v] = Some((u, k));
                lay.children[u].push((v, k));
                stack.push(enter(v, &mut visited, &mut lay));
            }
        }
    }
    lay
}

/// Neighbour order implied by the written text at atom `u`.
fn written_order(g: &MolecularGraph, lay: &Layout, u: usize) -> Vec<NeighborRef> {
    let mut order = Vec::new();
    if let Some((p, _)) = lay.parent[u] {
        order.push(NeighborRef::Atom(p));
    }
    for _ in 0..g.atoms[u].total_h() {
        order.push(NeighborRef::ImplicitH);
    }
    for &(v, _) in lay.closes[u].iter().chain(&lay.opens[u]) {
        order.push(NeighborRef::Atom(v));
    }
    for &(v, _) in &lay.children[u] {
        order.push(NeighborRef::Atom(v));
    }
    order
}

/// Parity of the permutation taking `from` to `to`; `None` if they are not
/// permutations of each other (or contain duplicates other than H).
fn permutation_parity(from: &[NeighborRef], to: &[NeighborRef]) -> Option<bool> {
    if from.len() != to.len() {
        return None;
    }
    let mut used = vec![false; to.len()];
    let mut perm = Vec::with_capacity(from.len());
    for f in from {
        let j = (0..to.len()).find(|&j| !used[j] && to[j] == *f)?;
        used[j] = true;
        perm.push(j);
    }
    let mut odd = false;
    for i in 0..perm.len() {
        for j in i + 1..perm.len() {
            if perm[i] > perm[j] {
                odd = !odd;
            }
        }
    }
    Some(odd)
}

fn output_chirality(g: &MolecularGraph, lay: &Layout, u: usize) -> Chirality {
    let a = &g.atoms[u];
    let c = effective_chirality(a);
    if !matches!(c, Chirality::Clockwise | Chirality::CounterClockwise) || a.total_h() > 1 {
        return Chirality::Unspecified;
    }
    match permutation_parity(&a.neighbor_order, &written_order(g, lay, u)) {
        Some(false) => c,
        Some(true) => c.inverted(),
        None => Chirality::Unspecified,
    }
}

/// Whether reparsing an unbracketed token for atom `u` reproduces its
/// hydrogens and aromatic valence state.
fn writes_unbracketed(g: &MolecularGraph, u: usize) -> bool {
    let a = &g.atoms[u];
    if !a.element.is_organic_subset() || a.charge != 0 || a.isotope.is_some() {
        return false;
    }
    let kekule_sum: u8 = g.neighbors(u).iter().map(|&(_, k)| g.bonds[k].kekule).sum();
    let valences = a.element.default_valences();
    let implied = match valences.iter().copied().find(|&v| v >= kekule_sum) {
        Some(v) => v - kekule_sum,
        None => return false,
    };
    if implied != a.total_h() {
        return false;
    }
    if a.aromatic {
        let has_multiple = g.neighbors(u).iter().any(|&(_, k)| {
            matches!(g.bonds[k].order, BondOrder::Double | BondOrder::Triple)
        });
        let sigma: u8 = g
            .neighbors(u)
            .iter()
            .map(|&(_, k)| g.bonds[k].order.integral())
            .sum();
        let needs = !has_multiple
            && valences.iter().copied().find(|&v| v >= sigma).is_some_and(|v| v > sigma);
        let has_ring_double = g
            .neighbors(u)
            .iter()
            .any(|&(_, k)| g.bonds[k].order == BondOrder::Aromatic && g.bonds[k].kekule == 2);
        if needs != has_ring_double {
            return false;
        }
    }
    true
}

fn atom_token(g: &MolecularGraph, u: usize, chirality: Chirality) -> String {
    let a = &g.atoms[u];
    let symbol = if a.aromatic {
        a.element.symbol().to_ascii_lowercase()
    } else {
        a.element.symbol().to_string()
    };
    if chirality == Chirality::Unspecified && writes_unbracketed(g, u) {
        return symbol;
    }
    let mut s = String::from("[");
    if let Some(iso) = a.isotope {
        s.push_str(&iso.to_string());
    }
    s.push_str(&symbol);
    match chirality {
        Chirality::CounterClockwise => s.push('@'),
        Chirality::Clockwise => s.push_str("@@"),
        _ => {}
    }
    match a.total_h() {
        0 => {}
        1 => s.push('H'),
        h => {
            s.push('H');
            s.push_str(&h.to_string());
        }
    }
    match a.charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => {
            s.push('+');
            s.push_str(&c.to_string());
        }
        c => {
            s.push('-');
            s.push_str(&(-c).to_string());
        }
    }
    s.push(']');
    s
}

/// `/` or `\` marks for tree bonds, keyed by bond index; `true` is `/`
/// written in the parent → child direction.
fn direction_marks(g: &MolecularGraph, lay: &Layout) -> HashMap<usize, bool> {
    let mut position = vec![0usize; g.num_atoms()];
    for (p, &u) in lay.sequence.iter().enumerate() {
        position[u] = p;
    }
    let mut stereo: Vec<usize> = (0..g.num_bonds())
        .filter(|&k| g.bonds[k].stereo_refs.is_some())
        .collect();
    stereo.sort_by_key(|&k| {
        let b = &g.bonds[k];
        let (x, y) = (position[b.begin], position[b.end]);
        (x.min(y), x.max(y))
    });

    let mut marks: HashMap<usize, bool> = HashMap::new();
    for k in stereo {
        let b = &g.bonds[k];
        let refs = b.stereo_refs.expect("filtered");
        let pick = |center: usize, partner: usize| {
            let mut opts: Vec<(usize, usize)> = g
                .neighbors(center)
                .iter()
                .copied()
                .filter(|&(x, kk)| {
                    x != partner
                        && g.bonds[kk].order == BondOrder::Single
                        && (lay.parent[x] == Some((center, kk)) || lay.parent[center] == Some((x, kk)))
                })
                .collect();
            opts.sort_by_key(|&(x, _)| position[x]);
            opts.first().copied()
        };
        let (Some((x, kx)), Some((y, ky))) = (pick(b.begin, b.end), pick(b.end, b.begin)) else {
            continue;
        };
        let trans = refs.trans ^ (x != refs.left) ^ (y != refs.right);
        // Left value: direction of `begin` seen from `x`; right: `y` from `end`.
        let x_is_parent = lay.parent[b.begin] == Some((x, kx));
        let end_is_parent = lay.parent[y] == Some((b.end, ky));
        let left_from_mark = |m: bool| if x_is_parent { m } else { !m };
        let right_from_mark = |m: bool| if end_is_parent { m } else { !m };
        let (left, right) = match (marks.get(&kx).copied(), marks.get(&ky).copied()) {
            (Some(mx), Some(my)) => {
                let (l, r) = (left_from_mark(mx), right_from_mark(my));
                if (l == r) != trans {
                    continue;
                }
                (l, r)
            }
            (Some(mx), None) => {
                let l = left_from_mark(mx);
                (l, if trans { l } else { !l })
            }
            (None, Some(my)) => {
                let r = right_from_mark(my);
                (if trans { r } else { !r }, r)
            }
            (None, None) => {
                let written = |kk: usize| {
                    let bb = &g.bonds[kk];
                    position[bb.begin].max(position[bb.end])
                };
                if written(kx) <= written(ky) {
                    let l = left_from_mark(true);
                    (l, if trans { l } else { !l })
                } else {
                    let r = right_from_mark(true);
                    (if trans { r } else { !r }, r)
                }
            }
        };
        marks.insert(kx, if x_is_parent { left } else { !left });
        marks.insert(ky, if end_is_parent { right } else { !right });
    }
    marks
}

fn bond_symbol(g: &MolecularGraph, k: usize, mark: Option<bool>) -> &'static str {
    let b = &g.bonds[k];
    match b.order {
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic => {
            if g.atoms[b.begin].aromatic && g.atoms[b.end].aromatic {
                ""
            } else {
                ":"
            }
        }
        BondOrder::Single => match mark {
            Some(true) => "/",
            Some(false) => "\\",
            None if g.atoms[b.begin].aromatic && g.atoms[b.end].aromatic && b.in_ring => "-",
            None => "",
        },
    }
}

/// Writes SMILES visiting atoms by ascending `ranks` (roots and branch
/// order). Any total order gives a valid SMILES of the same molecule.
pub fn write_smiles(g: &MolecularGraph, ranks: &[usize]) -> String {
    assert_eq!(ranks.len(), g.num_atoms(), "one rank per atom");
    let lay = layout(g, ranks);
    let marks = direction_marks(g, &lay);
    let mut out = String::new();
    let mut digits: Vec<bool> = vec![false; 100];
    let mut ring_digit: HashMap<usize, usize> = HashMap::new();

    for (fi, &root) in lay.roots.iter().enumerate() {
        if fi > 0 {
            out.push('.');
        }
        // (atom, incoming bond symbol, closing parenthesis count)
        enum Step {
            Atom(usize),
            Text(&'static str),
            Close,
        }
        let mut work = vec![Step::Atom(root)];
        while let Some(step) = work.pop() {
            let u = match step {
                Step::Text(t) => {
                    out.push_str(t);
                    continue;
                }
                Step::Close => {
                    out.push(')');
                    continue;
                }
                Step::Atom(u) => u,
            };
            out.push_str(&atom_token(g, u, output_chirality(g, &lay, u)));
            for &(_, k) in &lay.closes[u] {
                let d = ring_digit.remove(&k).expect("ring opened before close");
                digits[d] = false;
                push_digit(&mut out, d);
            }
            for &(_, k) in &lay.opens[u] {
                let d = (1..100).find(|&d| !digits[d]).expect("fewer than 100 open rings");
                digits[d] = true;
                ring_digit.insert(k, d);
                out.push_str(bond_symbol(g, k, None));
                push_digit(&mut out, d);
            }
            let kids = &lay.children[u];
            // Pushed in reverse so the first child is written first.
            for (idx, &(v, k)) in kids.iter().enumerate().rev() {
                let last = idx + 1 == kids.len();
                if !last {
                    work.push(Step::Close);
                }
                work.push(Step::Atom(v));
                work.push(Step::Text(bond_symbol(g, k, marks.get(&k).copied())));
                if !last {
                    work.push(Step::Text("("));
                }
            }
        }
    }
    out
}

fn push_digit(out: &mut String, d: usize) {
    if d < 10 {
        out.push(char::from(b'0' + d as u8));
    } else {
        out.push('%');
        out.push_str(&format!("{d:02}"));
    }
}

//! Turns a raw parse into a chemically consistent [`MolecularGraph`].

use std::collections::BTreeSet;

use crate::canon;
use crate::element::Element;
use crate::error::{ParseError, ParseErrorKind};
use crate::graph::{
    Atom, Bond, BondOrder, BondStereo, Chirality, Direction, MolecularGraph, NeighborRef, StereoRefs,
};
use crate::parser::{BondSym, RawMolecule, Slot};

pub(crate) fn build(raw: RawMolecule) -> Result<MolecularGraph, ParseError> {
    let RawMolecule { atoms: raw_atoms, bonds: raw_bonds } = raw;

    // Explicit, uncharged, isotope-free [H] atoms with a single non-hydrogen
    // neighbour are folded into that neighbour's hydrogen count.
    let mut degree = vec![0usize; raw_atoms.len()];
    for b in &raw_bonds {
        degree[b.a] += 1;
        degree[b.b] += 1;
    }
    let foldable: Vec<Option<usize>> = raw_atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if a.element != Element::H
                || a.hcount != Some(0)
                || a.charge != 0
                || a.isotope.is_some()
                || degree[i] != 1
            {
                return None;
            }
            let b = raw_bonds.iter().find(|b| b.a == i || b.b == i)?;
            if !matches!(b.sym, None | Some(BondSym::Single) | Some(BondSym::Up) | Some(BondSym::Down)) {
                return None;
            }
            let other = if b.a == i { b.b } else { b.a };
            (raw_atoms[other].element != Element::H).then_some(other)
        })
        .collect();

    let mut new_index = vec![usize::MAX; raw_atoms.len()];
    let mut next = 0;
    for i in 0..raw_atoms.len() {
        if foldable[i].is_none() {
            new_index[i] = next;
            next += 1;
        }
    }

    let mut atoms: Vec<Atom> = Vec::with_capacity(next);
    for (i, a) in raw_atoms.iter().enumerate() {
        if foldable[i].is_some() {
            continue;
        }
        let folded = foldable.iter().filter(|f| **f == Some(i)).count() as u8;
        let neighbor_order = a
            .order
            .iter()
            .map(|s| match *s {
                Slot::Atom(j) if foldable[j].is_some() => NeighborRef::ImplicitH,
                Slot::Atom(j) => NeighborRef::Atom(new_index[j]),
                Slot::H => NeighborRef::ImplicitH,
                Slot::Ring(_) => unreachable!("ring slots are resolved by the parser"),
            })
            .collect();
        atoms.push(Atom {
            element: a.element,
            charge: a.charge,
            aromatic: a.aromatic,
            isotope: a.isotope,
            chirality: a.chirality,
            explicit_h: a.hcount.unwrap_or(0) + folded,
            implicit_h: 0,
            bracket: a.hcount.is_some(),
            neighbor_order,
            position: a.position,
        });
    }

    let mut implicit_bond = Vec::new();
    let mut bonds: Vec<Bond> = Vec::with_capacity(raw_bonds.len());
    for rb in &raw_bonds {
        if foldable[rb.a].is_some() || foldable[rb.b].is_some() {
            continue;
        }
        let (a, b) = (new_index[rb.a], new_index[rb.b]);
        let order = match rb.sym {
            Some(BondSym::Double) => BondOrder::Double,
            Some(BondSym::Triple) => BondOrder::Triple,
            Some(BondSym::Aromatic) => BondOrder::Aromatic,
            _ => BondOrder::Single,
        };
        let direction = match rb.sym {
            Some(BondSym::Up) | Some(BondSym::Down) => {
                let from = new_index[rb.written_from];
                Some(Direction {
                    from,
                    to: if from == a { b } else { a },
                    up: rb.sym == Some(BondSym::Up),
                })
            }
            _ => None,
        };
        implicit_bond.push(rb.sym.is_none());
        bonds.push(Bond {
            begin: a,
            end: b,
            order,
            stereo: BondStereo::None,
            in_ring: false,
            conjugated: false,
            kekule: order.integral(),
            direction,
            stereo_refs: None,
        });
    }

    let mut g = MolecularGraph::from_parts(atoms, bonds);
    mark_ring_bonds(&mut g);

    for (k, implicit) in implicit_bond.iter().enumerate() {
        if *implicit {
            let b = &g.bonds[k];
            if g.atoms[b.begin].aromatic && g.atoms[b.end].aromatic && b.in_ring {
                g.bonds[k].order = BondOrder::Aromatic;
            }
        }
    }
    for (i, a) in g.atoms.iter().enumerate() {
        if a.aromatic && !g.neighbors(i).iter().any(|&(_, k)| g.bonds[k].in_ring) {
            return Err(ParseError::new(ParseErrorKind::AromaticOutsideRing, a.position));
        }
    }

    kekulize(&mut g)?;
    assign_hydrogens(&mut g)?;
    perceive_aromaticity(&mut g);
    mark_conjugation(&mut g);
    assign_double_bond_stereo(&mut g);
    Ok(g)
}

/// A bond is in a ring iff its endpoints stay connected without it.
fn mark_ring_bonds(g: &mut MolecularGraph) {
    for k in 0..g.bonds.len() {
        let (s, t) = (g.bonds[k].begin, g.bonds[k].end);
        let mut seen = vec![false; g.atoms.len()];
        let mut stack = vec![s];
        seen[s] = true;
        let mut found = false;
        while let Some(u) = stack.pop() {
            if u == t {
                found = true;
                break;
            }
            for &(v, kk) in g.neighbors(u) {
                if kk != k && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        g.bonds[k].in_ring = found;
    }
}

fn bond_sum(g: &MolecularGraph, i: usize) -> u8 {
    g.neighbors(i).iter().map(|&(_, k)| g.bonds[k].kekule).sum()
}

/// Whether an aromatic atom must take one double bond in the Kekulé form.
fn needs_pi_bond(g: &MolecularGraph, i: usize) -> bool {
    let a = &g.atoms[i];
    let has_multiple = g.neighbors(i).iter().any(|&(_, k)| {
        matches!(g.bonds[k].order, BondOrder::Double | BondOrder::Triple)
    });
    if has_multiple {
        return false;
    }
    let sigma = bond_sum(g, i) + a.explicit_h;
    let valences = if a.bracket {
        match a.element.allowed_valences(a.charge) {
            Some(v) => v,
            None => return false,
        }
    } else {
        a.element.default_valences()
    };
    match valences.iter().copied().find(|&v| v >= sigma) {
        Some(v) => v > sigma,
        None => false,
    }
}

fn kekulize(g: &mut MolecularGraph) -> Result<(), ParseError> {
    let n = g.atoms.len();
    let candidate: Vec<bool> = (0..n)
        .map(|i| g.atoms[i].aromatic && needs_pi_bond(g, i))
        .collect();
    let edges: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|i| {
            if !candidate[i] {
                return Vec::new();
            }
            g.neighbors(i)
                .iter()
                .copied()
                .filter(|&(j, k)| candidate[j] && g.bonds[k].order == BondOrder::Aromatic)
                .collect()
        })
        .collect();

    let mut mate: Vec<Option<usize>> = vec![None; n];
    if !match_all(&candidate, &edges, &mut mate) {
        let pos = (0..n)
            .find(|&i| candidate[i])
            .map_or(0, |i| g.atoms[i].position);
        return Err(ParseError::new(ParseErrorKind::Kekulization, pos));
    }
    for (i, m) in mate.iter().enumerate() {
        if let Some(k) = m {
            if g.bonds[*k].begin == i || g.bonds[*k].end == i {
                g.bonds[*k].kekule = 2;
            }
        }
    }
    Ok(())
}

/// Backtracking perfect matching over candidate atoms, always branching on
/// the atom with the fewest free partners. `mate[i]` holds the bond index.
fn match_all(candidate: &[bool], edges: &[Vec<(usize, usize)>], mate: &mut [Option<usize>]) -> bool {
    let mut best: Option<(usize, usize)> = None;
    for i in 0..candidate.len() {
        if !candidate[i] || mate[i].is_some() {
            continue;
        }
        let free = edges[i].iter().filter(|&&(j, _)| mate[j].is_none()).count();
        if free == 0 {
            return false;
        }
        if best.is_none_or(|(_, f)| free < f) {
            best = Some((i, free));
        }
    }
    let Some((i, _)) = best else {
        return true;
    };
    for &(j, k) in &edges[i] {
        if mate[j].is_some() {
            continue;
        }
        mate[i] = Some(k);
        mate[j] = Some(k);
        if match_all(candidate, edges, mate) {
            return true;
        }
        mate[i] = None;
        mate[j] = None;
    }
    false
}

fn assign_hydrogens(g: &mut MolecularGraph) -> Result<(), ParseError> {
    for i in 0..g.atoms.len() {
        let sum = bond_sum(g, i) + g.atoms[i].explicit_h;
        let a = &g.atoms[i];
        let violation = || {
            ParseError::new(
                ParseErrorKind::Valence {
                    element: a.element.symbol().to_string(),
                    valence: sum,
                },
                a.position,
            )
        };
        if a.bracket {
            if let Some(allowed) = a.element.allowed_valences(a.charge) {
                if sum > *allowed.iter().max().unwrap_or(&0) {
                    return Err(violation());
                }
            }
        } else {
            let v = a
                .element
                .default_valences()
                .iter()
                .copied()
                .find(|&v| v >= sum)
                .ok_or_else(violation)?;
            let h = v - sum;
            g.atoms[i].implicit_h = h;
        }
    }
    Ok(())
}

fn is_pi_donor(element: Element) -> bool {
    matches!(element.atomic_number(), 7 | 8 | 15 | 16 | 33 | 34 | 52)
}

/// Smallest cycle through each ring bond, deduplicated by atom set.
pub(crate) fn ring_cycles(g: &MolecularGraph) -> Vec<Vec<usize>> {
    let mut seen = BTreeSet::new();
    let mut rings = Vec::new();
    for k in 0..g.bonds.len() {
        if !g.bonds[k].in_ring {
            continue;
        }
        let (s, t) = (g.bonds[k].begin, g.bonds[k].end);
        let mut prev = vec![usize::MAX; g.atoms.len()];
        prev[s] = s;
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            if u == t {
                break;
            }
            let mut nbrs: Vec<(usize, usize)> = g.neighbors(u).to_vec();
            nbrs.sort_unstable();
            for (v, kk) in nbrs {
                if kk != k && prev[v] == usize::MAX {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[t] == usize::MAX {
            continue;
        }
        let mut path = vec![t];
        let mut u = t;
        while u != s {
            u = prev[u];
            path.push(u);
        }
        let key: BTreeSet<usize> = path.iter().copied().collect();
        if seen.insert(key.into_iter().collect::<Vec<_>>()) {
            rings.push(path);
        }
    }
    rings
}

/// Marks Kekulé-drawn rings with 4n+2 pi electrons as aromatic, iterating so
/// fused rings can borrow aromaticity from already perceived neighbours.
fn perceive_aromaticity(g: &mut MolecularGraph) {
    let rings = ring_cycles(g);
    loop {
        let mut changed = false;
        for ring in &rings {
            let ring_bonds: Vec<usize> = (0..ring.len())
                .map(|p| {
                    g.bond_between(ring[p], ring[(p + 1) % ring.len()])
                        .expect("consecutive ring atoms are bonded")
                })
                .collect();
            if ring_bonds.iter().all(|&k| g.bonds[k].order == BondOrder::Aromatic) {
                continue;
            }
            if let Some(electrons) = pi_electrons(g, ring, &ring_bonds) {
                if electrons % 4 == 2 {
                    for &i in ring {
                        g.atoms[i].aromatic = true;
                    }
                    for &k in &ring_bonds {
                        g.bonds[k].order = BondOrder::Aromatic;
                    }
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

fn pi_electrons(g: &MolecularGraph, ring: &[usize], ring_bonds: &[usize]) -> Option<u32> {
    let mut total = 0;
    for &i in ring {
        let mut double_in_ring = false;
        let mut exo_double_to_aromatic = false;
        let mut exo_double = false;
        for &(j, k) in g.neighbors(i) {
            let b = &g.bonds[k];
            if b.kekule == 3 {
                return None;
            }
            if b.kekule == 2 {
                if ring_bonds.contains(&k) {
                    double_in_ring = true;
                } else if g.atoms[j].aromatic && b.in_ring {
                    exo_double_to_aromatic = true;
                } else {
                    exo_double = true;
                }
            }
        }
        let a = &g.atoms[i];
        let e = if double_in_ring || exo_double_to_aromatic {
            1
        } else if exo_double {
            0
        } else if g.lone_pairs(i).unwrap_or(0) > 0 && (is_pi_donor(a.element) || a.charge < 0) {
            2
        } else if a.charge > 0 && a.element == Element::C {
            0
        } else {
            return None;
        };
        total += e;
    }
    Some(total)
}

fn mark_conjugation(g: &mut MolecularGraph) {
    let unsaturated = |g: &MolecularGraph, i: usize, skip: usize| {
        g.atoms[i].aromatic
            || g.neighbors(i).iter().any(|&(_, k)| k != skip && g.bonds[k].kekule >= 2)
    };
    let donor = |g: &MolecularGraph, i: usize| {
        is_pi_donor(g.atoms[i].element) && g.lone_pairs(i).unwrap_or(0) > 0
    };
    let mut conj = vec![false; g.bonds.len()];
    for k in 0..g.bonds.len() {
        let b = &g.bonds[k];
        if b.order == BondOrder::Aromatic {
            conj[k] = true;
        } else if b.kekule == 1 {
            let (x, y) = (b.begin, b.end);
            let (ux, uy) = (unsaturated(g, x, k), unsaturated(g, y, k));
            conj[k] = (ux && uy) || (ux && donor(g, y)) || (uy && donor(g, x));
        }
    }
    for k in 0..g.bonds.len() {
        let b = &g.bonds[k];
        if b.order != BondOrder::Aromatic && b.kekule >= 2 {
            conj[k] = [b.begin, b.end].iter().any(|&a| {
                g.neighbors(a)
                    .iter()
                    .any(|&(_, kk)| kk != k && (conj[kk] || g.bonds[kk].order == BondOrder::Aromatic))
            });
        }
    }
    for (b, c) in g.bonds.iter_mut().zip(conj) {
        b.conjugated = c;
    }
}

/// Reads `/` and `\` marks around acyclic double bonds into a cis/trans
/// relation, then labels E/Z relative to the highest-ranked substituent on
/// each side (ranks from invariant refinement, atomic number first).
fn assign_double_bond_stereo(g: &mut MolecularGraph) {
    let classes = canon::refined_classes(g);
    for k in 0..g.bonds.len() {
        let b = &g.bonds[k];
        if b.order != BondOrder::Double || b.in_ring {
            continue;
        }
        let (a, c) = (b.begin, b.end);
        let marked = |center: usize| {
            g.neighbors(center).iter().find_map(|&(x, kk)| {
                if kk == k {
                    return None;
                }
                g.bonds[kk].direction.map(|d| (x, d))
            })
        };
        let (Some((x, dx)), Some((y, dy))) = (marked(a), marked(c)) else {
            continue;
        };
        let left_up = if dx.from == x { dx.up } else { !dx.up };
        let right_up = if dy.from == c { dy.up } else { !dy.up };
        let refs = StereoRefs {
            left: x,
            right: y,
            trans: left_up == right_up,
        };
        let label = match (priority_neighbor(g, &classes, a, c), priority_neighbor(g, &classes, c, a)) {
            (Some(pa), Some(pc)) => {
                let trans = refs.trans ^ (pa != x) ^ (pc != y);
                if trans {
                    BondStereo::E
                } else {
                    BondStereo::Z
                }
            }
            _ => BondStereo::None,
        };
        if label != BondStereo::None {
            g.bonds[k].stereo = label;
            g.bonds[k].stereo_refs = Some(refs);
        }
    }
}

/// The unique highest-ranked neighbour of `center` other than `partner`.
/// `None` when two substituents tie (the bond is not stereogenic) or when
/// there is no heavy substituent.
fn priority_neighbor(g: &MolecularGraph, classes: &[usize], center: usize, partner: usize) -> Option<usize> {
    let subs: Vec<usize> = g
        .neighbors(center)
        .iter()
        .map(|&(x, _)| x)
        .filter(|&x| x != partner)
        .collect();
    match subs.as_slice() {
        [x] => {
            if g.atoms[center].total_h() > 1 {
                None
            } else {
                Some(*x)
            }
        }
        [x, y] => match classes[*x].cmp(&classes[*y]) {
            std::cmp::Ordering::Greater => Some(*x),
            std::cmp::Ordering::Less => Some(*y),
            std::cmp::Ordering::Equal => None,
        },
        _ => None,
    }
}

/// Drops a chirality tag that cannot describe a tetrahedral centre.
pub(crate) fn effective_chirality(atom: &Atom) -> Chirality {
    if atom.neighbor_order.len() < 3 {
        Chirality::Unspecified
    } else {
        atom.chirality
    }
}

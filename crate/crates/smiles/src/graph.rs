use crate::element::Element;

/// Tetrahedral chirality as written in the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Chirality {
    #[default]
    Unspecified,
    /// `@@`
    Clockwise,
    /// `@`
    CounterClockwise,
    /// Any other chirality class (`@SP1`, `@TB5`, ...).
    Other,
}

impl Chirality {
    pub(crate) fn inverted(self) -> Chirality {
        match self {
            Chirality::Clockwise => Chirality::CounterClockwise,
            Chirality::CounterClockwise => Chirality::Clockwise,
            c => c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Order used for valence sums; aromatic bonds count 1.5 only after
    /// kekulization, so this is the sigma-bond view.
    pub(crate) fn integral(self) -> u8 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

/// Double-bond stereo label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BondStereo {
    #[default]
    None,
    Z,
    E,
    Cis,
    Trans,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hybridization {
    Sp,
    Sp2,
    Sp3,
    Sp3d,
    Sp3d2,
    Unknown,
}

/// A neighbour slot in the order that defines a chirality tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum NeighborRef {
    Atom(usize),
    ImplicitH,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub charge: i8,
    pub aromatic: bool,
    pub isotope: Option<u16>,
    pub chirality: Chirality,
    /// Hydrogens written inside brackets (or folded from explicit `[H]` atoms).
    pub explicit_h: u8,
    /// Hydrogens implied by the default valence of an unbracketed atom.
    pub implicit_h: u8,
    pub(crate) bracket: bool,
    pub(crate) neighbor_order: Vec<NeighborRef>,
    pub(crate) position: usize,
}

impl Atom {
    pub fn atomic_number(&self) -> u8 {
        self.element.atomic_number()
    }

    pub fn total_h(&self) -> u8 {
        self.explicit_h + self.implicit_h
    }
}

/// Which way a `/` or `\` bond was written: from `from` towards `to`,
/// with `up` true for `/`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Direction {
    pub from: usize,
    pub to: usize,
    pub up: bool,
}

/// Geometry of a stereo double bond relative to one substituent per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct StereoRefs {
    pub left: usize,
    pub right: usize,
    pub trans: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bond {
    pub begin: usize,
    pub end: usize,
    pub order: BondOrder,
    pub stereo: BondStereo,
    pub in_ring: bool,
    pub conjugated: bool,
    /// Integral order in the assigned Kekulé structure.
    pub(crate) kekule: u8,
    pub(crate) direction: Option<Direction>,
    pub(crate) stereo_refs: Option<StereoRefs>,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if atom == self.begin {
            self.end
        } else {
            self.begin
        }
    }

    /// Bond order in the Kekulé structure used for hydrogen assignment.
    pub fn kekule_order(&self) -> u8 {
        self.kekule
    }
}

/// A parsed molecule: heavy atoms (plus any hydrogens that could not be
/// folded), bonds, and perceived ring/aromatic/conjugation properties.
#[derive(Debug, Clone, PartialEq)]
pub struct MolecularGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub fragment_count: usize,
    pub(crate) adjacency: Vec<Vec<(usize, usize)>>,
}

impl MolecularGraph {
    pub(crate) fn from_parts(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Self {
        let mut g = MolecularGraph {
            atoms,
            bonds,
            fragment_count: 0,
            adjacency: Vec::new(),
        };
        g.rebuild_adjacency();
        g.fragment_count = g.count_fragments();
        g
    }

    pub(crate) fn rebuild_adjacency(&mut self) {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (k, b) in self.bonds.iter().enumerate() {
            adj[b.begin].push((b.end, k));
            adj[b.end].push((b.begin, k));
        }
        self.adjacency = adj;
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    /// `(neighbour atom, bond index)` pairs of atom `i`.
    pub fn neighbors(&self, i: usize) -> &[(usize, usize)] {
        &self.adjacency[i]
    }

    /// Number of explicit graph neighbours.
    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<usize> {
        self.adjacency[a].iter().find(|&&(n, _)| n == b).map(|&(_, k)| k)
    }

    /// Sum of Kekulé bond orders plus attached hydrogens.
    pub fn valence(&self, i: usize) -> u8 {
        let bonds: u8 = self.adjacency[i]
            .iter()
            .map(|&(_, k)| self.bonds[k].kekule)
            .sum();
        bonds + self.atoms[i].total_h()
    }

    pub fn net_charge(&self) -> i32 {
        self.atoms.iter().map(|a| a.charge as i32).sum()
    }

    pub fn has_charged_atom(&self) -> bool {
        self.atoms.iter().any(|a| a.charge != 0)
    }

    pub fn contains_element(&self, element: Element) -> bool {
        self.atoms.iter().any(|a| a.element == element)
    }

    /// Molecular weight in daltons, counting implicit and explicit hydrogens.
    pub fn molecular_weight(&self) -> f64 {
        let h = Element::H.mass();
        self.atoms
            .iter()
            .map(|a| a.element.mass() + a.total_h() as f64 * h)
            .sum()
    }

    /// Lone electron pairs left on atom `i` after bonding.
    pub fn lone_pairs(&self, i: usize) -> Option<u8> {
        let a = &self.atoms[i];
        let ve = a.element.valence_electrons()? as i16 - a.charge as i16;
        let used = self.valence(i) as i16;
        let free = ve - used;
        if free < 0 {
            Some(0)
        } else {
            Some((free / 2) as u8)
        }
    }

    /// Steric-number hybridization; aromatic atoms are always sp2.
    pub fn hybridization(&self, i: usize) -> Hybridization {
        if self.atoms[i].aromatic {
            return Hybridization::Sp2;
        }
        let Some(lp) = self.lone_pairs(i) else {
            return Hybridization::Unknown;
        };
        let steric = self.degree(i) + self.atoms[i].total_h() as usize + lp as usize;
        match steric {
            2 => Hybridization::Sp,
            3 => Hybridization::Sp2,
            4 => Hybridization::Sp3,
            5 => Hybridization::Sp3d,
            6 => Hybridization::Sp3d2,
            _ => Hybridization::Unknown,
        }
    }

    fn count_fragments(&self) -> usize {
        let n = self.atoms.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for b in &self.bonds {
            let (ra, rb) = (find(&mut parent, b.begin), find(&mut parent, b.end));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        (0..n).filter(|&i| find(&mut parent, i) == i).count()
    }

    /// Connected component id for each atom, numbered in order of first atom.
    pub fn fragment_ids(&self) -> Vec<usize> {
        let mut ids = vec![usize::MAX; self.atoms.len()];
        let mut next = 0;
        for start in 0..self.atoms.len() {
            if ids[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            ids[start] = next;
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adjacency[u] {
                    if ids[v] == usize::MAX {
                        ids[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        ids
    }
}

//! Daylight SMILES grammar subset: organic-subset and bracket atoms,
//! branches, ring closures (`1`-`9`, `%nn`), bond symbols and `.`.

use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{ParseError, ParseErrorKind};
use crate::graph::Chirality;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BondSym {
    Single,
    Double,
    Triple,
    Aromatic,
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Slot {
    Atom(usize),
    H,
    Ring(u32),
}

#[derive(Debug, Clone)]
pub(crate) struct RawAtom {
    pub element: Element,
    pub aromatic: bool,
    pub isotope: Option<u16>,
    pub chirality: Chirality,
    /// `Some` for bracket atoms.
    pub hcount: Option<u8>,
    pub charge: i8,
    pub position: usize,
    pub order: Vec<Slot>,
}

#[derive(Debug, Clone)]
pub(crate) struct RawBond {
    pub a: usize,
    pub b: usize,
    pub sym: Option<BondSym>,
    /// Atom the bond symbol was written after.
    pub written_from: usize,
}

#[derive(Debug, Default)]
pub(crate) struct RawMolecule {
    pub atoms: Vec<RawAtom>,
    pub bonds: Vec<RawBond>,
}

struct OpenRing {
    atom: usize,
    sym: Option<BondSym>,
    position: usize,
}

pub(crate) fn parse_raw(text: &str) -> Result<RawMolecule, ParseError> {
    if text.is_empty() {
        return Err(ParseError::new(ParseErrorKind::Empty, 0));
    }
    if let Some(p) = text.bytes().position(|b| !b.is_ascii()) {
        return Err(ParseError::new(ParseErrorKind::NonAscii, p));
    }
    let s = text.as_bytes();
    let mut mol = RawMolecule::default();
    let mut prev: Option<usize> = None;
    let mut branches: Vec<(usize, usize)> = Vec::new();
    let mut pending: Option<(BondSym, usize)> = None;
    let mut rings: BTreeMap<u32, OpenRing> = BTreeMap::new();
    let mut i = 0;

    while i < s.len() {
        let c = s[i];
        match c {
            b'(' => {
                let Some(p) = prev else {
                    return Err(ParseError::new(ParseErrorKind::UnexpectedChar('('), i));
                };
                if pending.is_some() {
                    return Err(ParseError::new(ParseErrorKind::DanglingBond, i));
                }
                branches.push((p, i));
                i += 1;
            }
            b')' => {
                if pending.is_some() {
                    return Err(ParseError::new(ParseErrorKind::DanglingBond, i));
                }
                let Some((p, _)) = branches.pop() else {
                    return Err(ParseError::new(ParseErrorKind::UnmatchedParen, i));
                };
                prev = Some(p);
                i += 1;
            }
            b'-' | b'=' | b'#' | b':' | b'/' | b'\\' | b'$' => {
                if pending.is_some() || prev.is_none() {
                    return Err(ParseError::new(ParseErrorKind::UnexpectedChar(c as char), i));
                }
                let sym = match c {
                    b'-' => BondSym::Single,
                    b'=' => BondSym::Double,
                    b'#' => BondSym::Triple,
                    b':' => BondSym::Aromatic,
                    b'/' => BondSym::Up,
                    b'\\' => BondSym::Down,
                    _ => return Err(ParseError::new(ParseErrorKind::UnsupportedBond('$'), i)),
                };
                pending = Some((sym, i));
                i += 1;
            }
            b'.' => {
                if pending.is_some() {
                    return Err(ParseError::new(ParseErrorKind::DanglingBond, i));
                }
                if prev.is_none() {
                    return Err(ParseError::new(ParseErrorKind::UnexpectedChar('.'), i));
                }
                prev = None;
                i += 1;
            }
            b'0'..=b'9' | b'%' => {
                let start = i;
                let num = if c == b'%' {
                    if i + 2 >= s.len() || !s[i + 1].is_ascii_digit() || !s[i + 2].is_ascii_digit() {
                        return Err(ParseError::new(ParseErrorKind::UnexpectedChar('%'), i));
                    }
                    i += 3;
                    ((s[start + 1] - b'0') * 10 + (s[start + 2] - b'0')) as u32
                } else {
                    i += 1;
                    (c - b'0') as u32
                };
                let Some(atom) = prev else {
                    return Err(ParseError::new(ParseErrorKind::UnexpectedChar(c as char), start));
                };
                let sym = pending.take().map(|(s, _)| s);
                match rings.remove(&num) {
                    None => {
                        mol.atoms[atom].order.push(Slot::Ring(num));
                        rings.insert(num, OpenRing { atom, sym, position: start });
                    }
                    Some(open) => {
                        if open.atom == atom
                            || mol.bonds.iter().any(|b| {
                                (b.a == open.atom && b.b == atom) || (b.b == open.atom && b.a == atom)
                            })
                        {
                            return Err(ParseError::new(ParseErrorKind::InvalidRingClosure(num), start));
                        }
                        let (bond_sym, from) = match (open.sym, sym) {
                            (Some(x), Some(y)) if x == y => (Some(x), open.atom),
                            (Some(x), Some(y)) => {
                                // Directional marks may legitimately differ in
                                // sense at the two ends; other conflicts are errors.
                                let directional = |s: BondSym| matches!(s, BondSym::Up | BondSym::Down);
                                if directional(x) && directional(y) {
                                    (Some(x), open.atom)
                                } else {
                                    return Err(ParseError::new(
                                        ParseErrorKind::ConflictingRingBond(num),
                                        start,
                                    ));
                                }
                            }
                            (Some(x), None) => (Some(x), open.atom),
                            (None, Some(y)) => (Some(y), atom),
                            (None, None) => (None, open.atom),
                        };
                        let slot = mol.atoms[open.atom]
                            .order
                            .iter()
                            .position(|s| *s == Slot::Ring(num))
                            .expect("open ring slot recorded");
                        mol.atoms[open.atom].order[slot] = Slot::Atom(atom);
                        mol.atoms[atom].order.push(Slot::Atom(open.atom));
                        mol.bonds.push(RawBond {
                            a: open.atom,
                            b: atom,
                            sym: bond_sym,
                            written_from: from,
                        });
                    }
                }
            }
            b'[' => {
                let close = s[i..]
                    .iter()
                    .position(|&b| b == b']')
                    .map(|p| p + i)
                    .ok_or_else(|| ParseError::new(ParseErrorKind::UnmatchedBracket, i))?;
                let atom = parse_bracket(&text[i + 1..close], i)?;
                add_atom(&mut mol, atom, &mut prev, &mut pending);
                i = close + 1;
            }
            b']' => return Err(ParseError::new(ParseErrorKind::UnmatchedBracket, i)),
            _ if c.is_ascii_alphabetic() || c == b'*' => {
                let (element, aromatic, len) = organic_atom(s, i)?;
                let atom = RawAtom {
                    element,
                    aromatic,
                    isotope: None,
                    chirality: Chirality::Unspecified,
                    hcount: None,
                    charge: 0,
                    position: i,
                    order: Vec::new(),
                };
                add_atom(&mut mol, atom, &mut prev, &mut pending);
                i += len;
            }
            _ => return Err(ParseError::new(ParseErrorKind::UnexpectedChar(c as char), i)),
        }
    }

    if let Some((_, p)) = pending {
        return Err(ParseError::new(ParseErrorKind::DanglingBond, p));
    }
    if let Some((num, open)) = rings.into_iter().next() {
        return Err(ParseError::new(ParseErrorKind::UnclosedRing(num), open.position));
    }
    if let Some(&(_, p)) = branches.last() {
        return Err(ParseError::new(ParseErrorKind::UnmatchedParen, p));
    }
    Ok(mol)
}

fn add_atom(
    mol: &mut RawMolecule,
    mut atom: RawAtom,
    prev: &mut Option<usize>,
    pending: &mut Option<(BondSym, usize)>,
) {
    let idx = mol.atoms.len();
    if let Some(p) = *prev {
        atom.order.push(Slot::Atom(p));
        mol.atoms[p].order.push(Slot::Atom(idx));
        mol.bonds.push(RawBond {
            a: p,
            b: idx,
            sym: pending.take().map(|(s, _)| s),
            written_from: p,
        });
    }
    // A bracket hydrogen follows the preceding atom in the chirality order.
    if atom.hcount.unwrap_or(0) > 0 {
        atom.order.push(Slot::H);
    }
    mol.atoms.push(atom);
    *prev = Some(idx);
}

fn organic_atom(s: &[u8], i: usize) -> Result<(Element, bool, usize), ParseError> {
    let c = s[i];
    let next = s.get(i + 1).copied();
    let (sym, aromatic, len): (&str, bool, usize) = match (c, next) {
        (b'C', Some(b'l')) => ("Cl", false, 2),
        (b'B', Some(b'r')) => ("Br", false, 2),
        (b'B', _) => ("B", false, 1),
        (b'C', _) => ("C", false, 1),
        (b'N', _) => ("N", false, 1),
        (b'O', _) => ("O", false, 1),
        (b'P', _) => ("P", false, 1),
        (b'S', _) => ("S", false, 1),
        (b'F', _) => ("F", false, 1),
        (b'I', _) => ("I", false, 1),
        (b'b', _) => ("B", true, 1),
        (b'c', _) => ("C", true, 1),
        (b'n', _) => ("N", true, 1),
        (b'o', _) => ("O", true, 1),
        (b'p', _) => ("P", true, 1),
        (b's', _) => ("S", true, 1),
        _ => {
            let end = s[i..]
                .iter()
                .skip(1)
                .position(|b| !b.is_ascii_lowercase())
                .map_or(s.len(), |p| p + i + 1);
            let name = String::from_utf8_lossy(&s[i..end.min(i + 2)]).into_owned();
            return Err(ParseError::new(ParseErrorKind::UnknownElement(name), i));
        }
    };
    let element = Element::from_symbol(sym).expect("organic subset symbols are in the table");
    Ok((element, aromatic, len))
}

fn parse_bracket(body: &str, offset: usize) -> Result<RawAtom, ParseError> {
    let b = body.as_bytes();
    let pos = offset;
    let malformed = || ParseError::new(ParseErrorKind::MalformedBracket, pos);
    let mut i = 0;

    let digits_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let isotope = if i > digits_start {
        Some(body[digits_start..i].parse::<u16>().map_err(|_| malformed())?)
    } else {
        None
    };

    if i >= b.len() {
        return Err(malformed());
    }
    let (element, aromatic) = if b[i].is_ascii_uppercase() {
        let two = if i + 1 < b.len() && b[i + 1].is_ascii_lowercase() {
            Element::from_symbol(&body[i..i + 2]).map(|e| (e, 2))
        } else {
            None
        };
        match two {
            Some((e, n)) => {
                i += n;
                (e, false)
            }
            None => {
                let e = Element::from_symbol(&body[i..i + 1]).ok_or_else(|| {
                    let end = if i + 1 < b.len() && b[i + 1].is_ascii_lowercase() { i + 2 } else { i + 1 };
                    ParseError::new(ParseErrorKind::UnknownElement(body[i..end].to_string()), pos)
                })?;
                // A lowercase letter after a one-letter symbol that did not
                // form a known element is an unknown element, not a suffix.
                if i + 1 < b.len() && b[i + 1].is_ascii_lowercase() {
                    return Err(ParseError::new(
                        ParseErrorKind::UnknownElement(body[i..i + 2].to_string()),
                        pos,
                    ));
                }
                i += 1;
                (e, false)
            }
        }
    } else if b[i].is_ascii_lowercase() {
        let two = if i + 1 < b.len() && b[i + 1].is_ascii_lowercase() {
            match &body[i..i + 2] {
                "se" => Some(("Se", 2)),
                "as" => Some(("As", 2)),
                "te" => Some(("Te", 2)),
                _ => None,
            }
        } else {
            None
        };
        let (sym, n) = match two {
            Some(x) => x,
            None => match b[i] {
                b'b' => ("B", 1),
                b'c' => ("C", 1),
                b'n' => ("N", 1),
                b'o' => ("O", 1),
                b'p' => ("P", 1),
                b's' => ("S", 1),
                _ => {
                    return Err(ParseError::new(
                        ParseErrorKind::UnknownElement(body[i..i + 1].to_string()),
                        pos,
                    ))
                }
            },
        };
        i += n;
        (Element::from_symbol(sym).expect("aromatic symbols are in the table"), true)
    } else if b[i] == b'*' {
        return Err(ParseError::new(ParseErrorKind::UnknownElement("*".into()), pos));
    } else {
        return Err(malformed());
    };

    let mut chirality = Chirality::Unspecified;
    if i < b.len() && b[i] == b'@' {
        i += 1;
        if i < b.len() && b[i] == b'@' {
            i += 1;
            chirality = Chirality::Clockwise;
        } else if i + 1 < b.len() && b[i].is_ascii_uppercase() && b[i + 1].is_ascii_uppercase() {
            let class = &body[i..i + 2];
            i += 2;
            let start = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            let n: u32 = body[start..i].parse().map_err(|_| malformed())?;
            chirality = match (class, n) {
                ("TH", 1) => Chirality::CounterClockwise,
                ("TH", 2) => Chirality::Clockwise,
                _ => Chirality::Other,
            };
        } else {
            chirality = Chirality::CounterClockwise;
        }
    }

    let mut hcount = 0u8;
    if i < b.len() && b[i] == b'H' {
        i += 1;
        hcount = 1;
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i > start {
            hcount = body[start..i].parse().map_err(|_| malformed())?;
        }
    }

    let mut charge: i32 = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        let sign = if b[i] == b'+' { 1 } else { -1 };
        let symbol = b[i];
        i += 1;
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i > start {
            charge = sign * body[start..i].parse::<i32>().map_err(|_| malformed())?;
        } else {
            charge = sign;
            while i < b.len() && b[i] == symbol {
                charge += sign;
                i += 1;
            }
        }
    }

    if i < b.len() && b[i] == b':' {
        i += 1;
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return Err(malformed());
        }
    }
    if i != b.len() {
        return Err(malformed());
    }
    if aromatic && !element.can_be_aromatic() {
        return Err(malformed());
    }
    let charge = i8::try_from(charge).map_err(|_| malformed())?;

    Ok(RawAtom {
        element,
        aromatic,
        isotope,
        chirality,
        hcount: Some(hcount),
        charge,
        position: offset,
        order: Vec::new(),
    })
}

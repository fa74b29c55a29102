//! Periodic-table data for the supported element set: hydrogen through
//! xenon, plus bismuth (which appears in the inorganic filter list).

use std::fmt;

/// (symbol, atomic number, standard atomic weight)
const TABLE: &[(&str, u8, f64)] = &[
    ("H", 1, 1.008),
    ("He", 2, 4.002_602),
    ("Li", 3, 6.94),
    ("Be", 4, 9.012_183),
    ("B", 5, 10.81),
    ("C", 6, 12.011),
    ("N", 7, 14.007),
    ("O", 8, 15.999),
    ("F", 9, 18.998_403),
    ("Ne", 10, 20.1797),
    ("Na", 11, 22.989_769),
    ("Mg", 12, 24.305),
    ("Al", 13, 26.981_538),
    ("Si", 14, 28.085),
    ("P", 15, 30.973_762),
    ("S", 16, 32.06),
    ("Cl", 17, 35.45),
    ("Ar", 18, 39.948),
    ("K", 19, 39.0983),
    ("Ca", 20, 40.078),
    ("Sc", 21, 44.955_908),
    ("Ti", 22, 47.867),
    ("V", 23, 50.9415),
    ("Cr", 24, 51.9961),
    ("Mn", 25, 54.938_044),
    ("Fe", 26, 55.845),
    ("Co", 27, 58.933_194),
    ("Ni", 28, 58.6934),
    ("Cu", 29, 63.546),
    ("Zn", 30, 65.38),
    ("Ga", 31, 69.723),
    ("Ge", 32, 72.630),
    ("As", 33, 74.921_595),
    ("Se", 34, 78.971),
    ("Br", 35, 79.904),
    ("Kr", 36, 83.798),
    ("Rb", 37, 85.4678),
    ("Sr", 38, 87.62),
    ("Y", 39, 88.905_84),
    ("Zr", 40, 91.224),
    ("Nb", 41, 92.906_37),
    ("Mo", 42, 95.95),
    ("Tc", 43, 98.0),
    ("Ru", 44, 101.07),
    ("Rh", 45, 102.905_50),
    ("Pd", 46, 106.42),
    ("Ag", 47, 107.8682),
    ("Cd", 48, 112.414),
    ("In", 49, 114.818),
    ("Sn", 50, 118.710),
    ("Sb", 51, 121.760),
    ("Te", 52, 127.60),
    ("I", 53, 126.904_47),
    ("Xe", 54, 131.293),
    ("Bi", 83, 208.980_40),
];

/// A chemical element identified by atomic number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Element(u8);

impl Element {
    pub const H: Element = Element(1);
    pub const C: Element = Element(6);
    pub const N: Element = Element(7);
    pub const O: Element = Element(8);
    pub const S: Element = Element(16);

    /// Looks up a supported element by atomic number.
    pub fn from_number(z: u8) -> Option<Element> {
        TABLE.iter().find(|e| e.1 == z).map(|e| Element(e.1))
    }

    /// Looks up a supported element by its (case-sensitive) symbol.
    pub fn from_symbol(symbol: &str) -> Option<Element> {
        TABLE.iter().find(|e| e.0 == symbol).map(|e| Element(e.1))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn symbol(self) -> &'static str {
        self.entry().0
    }

    /// Standard atomic weight in daltons.
    pub fn mass(self) -> f64 {
        self.entry().2
    }

    fn entry(self) -> &'static (&'static str, u8, f64) {
        TABLE
            .iter()
            .find(|e| e.1 == self.0)
            .expect("Element is only constructed from table entries")
    }

    /// Members of the SMILES organic subset may be written without brackets.
    pub fn is_organic_subset(self) -> bool {
        matches!(self.0, 5 | 6 | 7 | 8 | 9 | 15 | 16 | 17 | 35 | 53)
    }

    /// Elements that may be written as lowercase aromatic symbols.
    pub fn can_be_aromatic(self) -> bool {
        matches!(self.0, 5 | 6 | 7 | 8 | 15 | 16 | 33 | 34 | 52)
    }

    /// Normal valences used to infer implicit hydrogens on unbracketed atoms.
    pub fn default_valences(self) -> &'static [u8] {
        match self.0 {
            5 => &[3],
            6 => &[4],
            7 | 15 => &[3, 5],
            8 => &[2],
            16 => &[2, 4, 6],
            9 | 17 | 35 | 53 => &[1],
            _ => &[],
        }
    }

    /// Valence shell electrons for main-group elements.
    pub fn valence_electrons(self) -> Option<u8> {
        let z = self.0;
        let v = match z {
            1 => 1,
            2 => 2,
            3..=10 => z - 2,
            11..=18 => z - 10,
            19 | 20 => z - 18,
            31..=36 => z - 28,
            37 | 38 => z - 36,
            49..=54 => z - 46,
            83 => 5,
            _ => return None,
        };
        Some(v)
    }

    /// Allowed total valences for an atom of this element carrying `charge`,
    /// derived from the isoelectronic neutral element of the same period.
    /// `None` means the element is not valence-checked.
    pub fn allowed_valences(self, charge: i8) -> Option<&'static [u8]> {
        let z = self.0 as i16;
        let iso = z - charge as i16;
        let same_period = |a: i16, b: i16| period(a) == period(b);
        if !same_period(z, iso) {
            return None;
        }
        let v: &'static [u8] = match iso {
            1 => &[1],
            5 => &[3],
            6 => &[4],
            7 => &[3, 5],
            8 => &[2],
            9 => &[1],
            14 => &[4],
            15 => &[3, 5],
            16 => &[2, 4, 6],
            17 | 35 | 53 => &[1, 3, 5, 7],
            33 => &[3, 5],
            34 => &[2, 4, 6],
            _ => return None,
        };
        // Hypervalent states are only accepted for neutral atoms.
        Some(if charge == 0 { v } else { &v[..1] })
    }
}

fn period(z: i16) -> u8 {
    match z {
        1..=2 => 1,
        3..=10 => 2,
        11..=18 => 3,
        19..=36 => 4,
        37..=54 => 5,
        55..=86 => 6,
        _ => 0,
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

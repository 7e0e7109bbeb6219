//! SMILES reader and a bracket-atom writer.
//!
//! Supported: organic-subset and bracket atoms, charges, explicit hydrogen
//! counts, bond symbols `- = # :`, branches, ring closures (digits and `%nn`),
//! lowercase aromatic atoms, and `.` component separators. Chirality,
//! directional bonds, isotopes and atom classes are accepted and discarded.

use std::collections::BTreeMap;

use super::graph::{Atom, Bond, BondOrder, MolGraph};
use crate::error::{Error, Result};

const ELEMENTS: &[(&str, u32)] = &[
    ("H", 1),
    ("He", 2),
    ("Li", 3),
    ("Be", 4),
    ("B", 5),
    ("C", 6),
    ("N", 7),
    ("O", 8),
    ("F", 9),
    ("Ne", 10),
    ("Na", 11),
    ("Mg", 12),
    ("Al", 13),
    ("Si", 14),
    ("P", 15),
    ("S", 16),
    ("Cl", 17),
    ("Ar", 18),
    ("K", 19),
    ("Ca", 20),
    ("Ti", 22),
    ("Cr", 24),
    ("Mn", 25),
    ("Fe", 26),
    ("Co", 27),
    ("Ni", 28),
    ("Cu", 29),
    ("Zn", 30),
    ("Ga", 31),
    ("Ge", 32),
    ("As", 33),
    ("Se", 34),
    ("Br", 35),
    ("Kr", 36),
    ("Rb", 37),
    ("Sr", 38),
    ("Pd", 46),
    ("Ag", 47),
    ("Cd", 48),
    ("Sn", 50),
    ("Sb", 51),
    ("Te", 52),
    ("I", 53),
    ("Xe", 54),
    ("Cs", 55),
    ("Ba", 56),
    ("Pt", 78),
    ("Au", 79),
    ("Hg", 80),
    ("Pb", 82),
    ("Bi", 83),
];

/// Elements allowed outside brackets, longest symbols first.
const ORGANIC: &[&str] = &["Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I"];

/// Lowercase aromatic symbols, longest first.
const AROMATIC: &[(&str, &str)] =
    &[("se", "Se"), ("as", "As"), ("b", "B"), ("c", "C"), ("n", "N"), ("o", "O"), ("p", "P"), ("s", "S")];

fn element(symbol: &str) -> Option<(&'static str, u32)> {
    ELEMENTS.iter().find(|(s, _)| *s == symbol).copied()
}

/// Normal valences for implicit hydrogen assignment.
fn default_valences(symbol: &str) -> &'static [u32] {
    match symbol {
        "B" => &[3],
        "C" => &[4],
        "N" => &[3, 5],
        "O" => &[2],
        "P" => &[3, 5],
        "S" => &[2, 4, 6],
        "F" | "Cl" | "Br" | "I" => &[1],
        _ => &[],
    }
}

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Smiles { offset, message: message.into() }
}

struct PendingAtom {
    atom: Atom,
    /// Organic-subset atoms get implicit hydrogens after all bonds are known.
    implicit_h: bool,
}

struct RingOpen {
    atom: usize,
    bond: Option<BondOrder>,
    offset: usize,
}

struct Parser<'a> {
    s: &'a [u8],
    src: &'a str,
    pos: usize,
    atoms: Vec<PendingAtom>,
    bonds: Vec<Bond>,
    warnings: Vec<String>,
}

/// Parsed molecule plus notes about discarded stereo/isotope information.
#[derive(Debug, Clone)]
pub struct ParsedSmiles {
    pub graph: MolGraph,
    pub warnings: Vec<String>,
}

pub fn parse_smiles(s: &str) -> Result<MolGraph> {
    let parsed = parse_smiles_verbose(s)?;
    for w in &parsed.warnings {
        log::warn!("{s}: {w}");
    }
    Ok(parsed.graph)
}

pub fn parse_smiles_verbose(s: &str) -> Result<ParsedSmiles> {
    if s.trim().is_empty() {
        return Err(err(0, "empty SMILES"));
    }
    let mut p = Parser { s: s.as_bytes(), src: s, pos: 0, atoms: Vec::new(), bonds: Vec::new(), warnings: Vec::new() };
    p.run()?;
    p.finish()
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn run(&mut self) -> Result<()> {
        let mut prev: Option<usize> = None;
        let mut pending_bond: Option<(BondOrder, usize)> = None;
        let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
        let mut rings: BTreeMap<u32, RingOpen> = BTreeMap::new();

        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    let Some(p) = prev else { return Err(err(start, "branch without a preceding atom")) };
                    if pending_bond.is_some() {
                        return Err(err(start, "bond symbol before branch"));
                    }
                    branches.push((Some(p), start));
                    self.pos += 1;
                }
                b')' => {
                    let Some((p, _)) = branches.pop() else { return Err(err(start, "unbalanced `)`")) };
                    if pending_bond.is_some() {
                        return Err(err(start, "dangling bond before `)`"));
                    }
                    prev = p;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if prev.is_none() {
                        return Err(err(start, "bond without a preceding atom"));
                    }
                    if pending_bond.is_some() {
                        return Err(err(start, "two consecutive bond symbols"));
                    }
                    let order = match c {
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        b':' => BondOrder::Aromatic,
                        b'/' | b'\\' => {
                            self.warnings.push(format!("directional bond at byte {start} treated as single"));
                            BondOrder::Single
                        }
                        _ => BondOrder::Single,
                    };
                    pending_bond = Some((order, start));
                    self.pos += 1;
                }
                b'.' => {
                    if pending_bond.is_some() {
                        return Err(err(start, "dangling bond before `.`"));
                    }
                    prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let Some(cur) = prev else { return Err(err(start, "ring closure without an atom")) };
                    let label = self.ring_label()?;
                    let bond = pending_bond.take().map(|(o, _)| o);
                    match rings.remove(&label) {
                        None => {
                            rings.insert(label, RingOpen { atom: cur, bond, offset: start });
                        }
                        Some(open) => {
                            if open.atom == cur {
                                return Err(err(start, format!("ring bond {label} closes on its own atom")));
                            }
                            let order = match (open.bond, bond) {
                                (Some(a), Some(b)) if a != b => {
                                    return Err(err(start, format!("conflicting bond orders on ring bond {label}")));
                                }
                                (Some(a), _) | (None, Some(a)) => a,
                                (None, None) => self.implicit_order(open.atom, cur),
                            };
                            self.add_bond(open.atom, cur, order, start)?;
                        }
                    }
                }
                b'[' | b'A'..=b'Z' | b'a'..=b'z' | b'*' => {
                    let idx = if c == b'[' { self.bracket_atom()? } else { self.organic_atom()? };
                    if let Some(p) = prev {
                        let order = match pending_bond.take() {
                            Some((o, _)) => o,
                            None => self.implicit_order(p, idx),
                        };
                        self.add_bond(p, idx, order, start)?;
                    } else if let Some((_, off)) = pending_bond {
                        return Err(err(off, "bond without a preceding atom"));
                    }
                    prev = Some(idx);
                }
                _ => return Err(err(start, format!("unexpected character `{}`", c as char))),
            }
        }
        if let Some((_, off)) = pending_bond {
            return Err(err(off, "dangling bond at end of input"));
        }
        if let Some((_, off)) = branches.pop() {
            return Err(err(off, "unbalanced `(`"));
        }
        if let Some((label, open)) = rings.into_iter().next() {
            return Err(err(open.offset, format!("unclosed ring bond {label}")));
        }
        Ok(())
    }

    fn ring_label(&mut self) -> Result<u32> {
        let start = self.pos;
        if self.peek() == Some(b'%') {
            let digits = self.s.get(start + 1..start + 3).filter(|d| d.iter().all(u8::is_ascii_digit));
            let Some(d) = digits else { return Err(err(start, "`%` must be followed by two digits")) };
            self.pos += 3;
            Ok(((d[0] - b'0') * 10 + (d[1] - b'0')) as u32)
        } else {
            self.pos += 1;
            Ok((self.s[start] - b'0') as u32)
        }
    }

    fn implicit_order(&self, a: usize, b: usize) -> BondOrder {
        if self.atoms[a].atom.aromatic && self.atoms[b].atom.aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn add_bond(&mut self, a: usize, b: usize, order: BondOrder, offset: usize) -> Result<()> {
        if self.bonds.iter().any(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a)) {
            return Err(err(offset, format!("duplicate bond between atoms {a} and {b}")));
        }
        self.bonds.push(Bond { a, b, order });
        Ok(())
    }

    fn push_atom(
        &mut self,
        element: &'static str,
        z: u32,
        charge: i32,
        h: u32,
        aromatic: bool,
        implicit_h: bool,
    ) -> usize {
        self.atoms.push(PendingAtom {
            atom: Atom { element, atomic_number: z, charge, hydrogens: h, aromatic, in_ring: false },
            implicit_h,
        });
        self.atoms.len() - 1
    }

    fn organic_atom(&mut self) -> Result<usize> {
        let start = self.pos;
        let rest = &self.src[start..];
        if rest.starts_with('*') {
            return Err(err(start, "wildcard atoms are not supported"));
        }
        for sym in ORGANIC {
            if rest.starts_with(sym) {
                let (e, z) = element(sym).expect("organic subset is in the element table");
                self.pos += sym.len();
                return Ok(self.push_atom(e, z, 0, 0, false, true));
            }
        }
        for (lower, upper) in AROMATIC {
            // only b c n o p s are legal outside brackets
            if lower.len() == 1 && rest.starts_with(lower) {
                let (e, z) = element(upper).expect("aromatic symbol is in the element table");
                self.pos += 1;
                return Ok(self.push_atom(e, z, 0, 0, true, true));
            }
        }
        let end = rest.char_indices().nth(1).map(|(i, _)| i).unwrap_or(rest.len());
        Err(err(start, format!("unknown atom symbol `{}`", &rest[..end])))
    }

    fn bracket_atom(&mut self) -> Result<usize> {
        let open = self.pos;
        let close = self.src[open..].find(']').map(|i| open + i).ok_or_else(|| err(open, "unterminated `[`"))?;
        let body = &self.src[open + 1..close];
        let at = |i: usize| open + 1 + i;
        let bytes = body.as_bytes();
        let mut i = 0;

        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i > 0 {
            self.warnings.push(format!("isotope label at byte {} discarded", at(0)));
        }

        let sym_start = i;
        let (element, z, aromatic) = if bytes.get(i).is_some_and(u8::is_ascii_uppercase) {
            let two = body.get(i..i + 2).and_then(|s| {
                let b = s.as_bytes();
                (b[1].is_ascii_lowercase()).then(|| element(s)).flatten()
            });
            if let Some((e, z)) = two {
                i += 2;
                (e, z, false)
            } else if let Some((e, z)) = body.get(i..i + 1).and_then(element) {
                i += 1;
                (e, z, false)
            } else {
                return Err(err(at(sym_start), "unknown element in bracket atom"));
            }
        } else if let Some((lower, upper)) = AROMATIC.iter().find(|(l, _)| body[i..].starts_with(l)) {
            i += lower.len();
            let (e, z) = element(upper).expect("aromatic symbol is in the element table");
            (e, z, true)
        } else {
            return Err(err(at(sym_start), "missing element in bracket atom"));
        };

        if bytes.get(i) == Some(&b'@') {
            while i < bytes.len()
                && (bytes[i] == b'@' || bytes[i].is_ascii_uppercase() && bytes[i] != b'H' || bytes[i].is_ascii_digit())
            {
                i += 1;
            }
            self.warnings.push(format!("chirality at byte {} discarded", at(sym_start)));
        }

        let mut h = 0;
        if bytes.get(i) == Some(&b'H') {
            i += 1;
            h = 1;
            let d = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i > d {
                h = body[d..i].parse().map_err(|_| err(at(d), "bad hydrogen count"))?;
            }
        }

        let mut charge = 0i32;
        if let Some(&sign) = bytes.get(i).filter(|&&c| c == b'+' || c == b'-') {
            let unit = if sign == b'+' { 1 } else { -1 };
            i += 1;
            let d = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i > d {
                charge = unit * body[d..i].parse::<i32>().map_err(|_| err(at(d), "bad charge"))?;
            } else {
                charge = unit;
                while bytes.get(i) == Some(&sign) {
                    charge += unit;
                    i += 1;
                }
            }
        }

        if bytes.get(i) == Some(&b':') {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            self.warnings.push(format!("atom class at byte {} discarded", at(i)));
        }

        if i != bytes.len() {
            return Err(err(at(i), format!("unexpected `{}` in bracket atom", &body[i..])));
        }
        self.pos = close + 1;
        Ok(self.push_atom(element, z, charge, h, aromatic, false))
    }

    fn finish(self) -> Result<ParsedSmiles> {
        let mut valence = vec![0u32; self.atoms.len()];
        for b in &self.bonds {
            valence[b.a] += b.order.valence();
            valence[b.b] += b.order.valence();
        }
        let atoms = self
            .atoms
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut atom = p.atom;
                if p.implicit_h {
                    atom.hydrogens = implicit_hydrogens(atom.element, atom.aromatic, valence[i]);
                }
                atom
            })
            .collect();
        let graph = MolGraph::new(atoms, self.bonds)?;
        Ok(ParsedSmiles { graph, warnings: self.warnings })
    }
}

/// Smallest normal valence that fits the bonds. Aromatic atoms use only the
/// lowest valence and owe one extra bond to the delocalized system.
fn implicit_hydrogens(element: &str, aromatic: bool, bond_sum: u32) -> u32 {
    let vals = default_valences(element);
    if aromatic {
        return vals.first().map(|&v| v.saturating_sub(bond_sum + 1)).unwrap_or(0);
    }
    vals.iter().find(|&&v| v >= bond_sum).map(|&v| v - bond_sum).unwrap_or(0)
}

/// Serialize with explicit bracket atoms and bond symbols, so the output
/// re-parses to the same graph including hydrogen counts.
pub fn write_smiles(g: &MolGraph) -> String {
    let n = g.len();
    let inv = g.refined_invariants(n.max(1));
    let rank = |i: usize| (inv[i], i);

    // pass 1: DFS tree and ring-closure bonds
    let mut visited = vec![false; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n]; // bond indices
    let mut closures: Vec<usize> = Vec::new();
    let mut closure_seen = vec![false; g.bonds.len()];
    let mut roots = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| rank(i));
    for &root in &order {
        if visited[root] {
            continue;
        }
        roots.push(root);
        let mut stack: Vec<(usize, Option<usize>)> = vec![(root, None)];
        while let Some((u, via)) = stack.pop() {
            if visited[u] {
                if let Some(k) = via {
                    if !closure_seen[k] {
                        closure_seen[k] = true;
                        closures.push(k);
                    }
                }
                continue;
            }
            visited[u] = true;
            if let Some(k) = via {
                let parent = g.bonds[k].other(u);
                children[parent].push(k);
                closure_seen[k] = true;
            }
            let mut next: Vec<usize> = g.incident(u).iter().copied().filter(|&k| Some(k) != via).collect();
            next.sort_by_key(|&k| std::cmp::Reverse(rank(g.bonds[k].other(u))));
            for k in next {
                let v = g.bonds[k].other(u);
                if !closure_seen[k] {
                    stack.push((v, Some(k)));
                }
            }
        }
    }
    // a bond pushed twice may have become a tree edge; drop it from closures
    let tree: std::collections::HashSet<usize> = children.iter().flatten().copied().collect();
    closures.retain(|k| !tree.contains(k));

    let mut ring_at: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (label, bond)
    for (label, &k) in closures.iter().enumerate() {
        ring_at[g.bonds[k].a].push((label + 1, k));
        ring_at[g.bonds[k].b].push((label + 1, k));
    }

    fn atom_text(a: &Atom) -> String {
        let mut s = String::from("[");
        if a.aromatic {
            s.push_str(&a.element.to_ascii_lowercase());
        } else {
            s.push_str(a.element);
        }
        match a.hydrogens {
            0 => {}
            1 => s.push('H'),
            h => s.push_str(&format!("H{h}")),
        }
        match a.charge {
            0 => {}
            c if c > 0 => s.push_str(&format!("+{c}")),
            c => s.push_str(&format!("-{}", -c)),
        }
        s.push(']');
        s
    }

    fn label_text(l: usize) -> String {
        if l < 10 {
            l.to_string()
        } else {
            format!("%{l:02}")
        }
    }

    let mut opened = vec![false; g.bonds.len()];
    let mut out = String::new();
    for (ri, &root) in roots.iter().enumerate() {
        if ri > 0 {
            out.push('.');
        }
        // explicit stack of (atom, incoming bond) with branch markers
        enum Step {
            Atom(usize, Option<usize>),
            Open,
            Close,
        }
        let mut stack = vec![Step::Atom(root, None)];
        while let Some(step) = stack.pop() {
            match step {
                Step::Open => out.push('('),
                Step::Close => out.push(')'),
                Step::Atom(u, via) => {
                    if let Some(k) = via {
                        out.push(g.bonds[k].order.symbol());
                    }
                    out.push_str(&atom_text(&g.atoms[u]));
                    for &(label, k) in &ring_at[u] {
                        if !opened[k] {
                            opened[k] = true;
                            out.push(g.bonds[k].order.symbol());
                        }
                        out.push_str(&label_text(label));
                    }
                    let kids = &children[u];
                    // last child continues the chain; the rest are branches
                    for (ci, &k) in kids.iter().enumerate().rev() {
                        let v = g.bonds[k].other(u);
                        if ci + 1 == kids.len() {
                            stack.push(Step::Atom(v, Some(k)));
                        } else {
                            stack.push(Step::Close);
                            stack.push(Step::Atom(v, Some(k)));
                            stack.push(Step::Open);
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smiles_error_offset(s: &str) -> usize {
        match parse_smiles(s) {
            Err(Error::Smiles { offset, .. }) => offset,
            other => panic!("expected SMILES error for {s}, got {other:?}"),
        }
    }

    #[test]
    fn pentane_is_a_chain() {
        let g = parse_smiles("CCCCC").unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g.bonds.len(), 4);
        assert!(g.bonds.iter().all(|b| b.order == BondOrder::Single));
        assert!(g.atoms.iter().all(|a| !a.in_ring && a.element == "C"));
        let h: Vec<u32> = g.atoms.iter().map(|a| a.hydrogens).collect();
        assert_eq!(h, vec![3, 2, 2, 2, 3]);
    }

    #[test]
    fn benzene_is_aromatic_ring() {
        let g = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.bonds.len(), 6);
        assert!(g.bonds.iter().all(|b| b.order == BondOrder::Aromatic));
        assert!(g.atoms.iter().all(|a| a.in_ring && a.aromatic && a.hydrogens == 1));
    }

    #[test]
    fn branch_order_does_not_change_graph() {
        let a = parse_smiles("CC(C)CC").unwrap();
        let b = parse_smiles("C(C)(C)CC").unwrap();
        assert_eq!(a.invariant_signature(), b.invariant_signature());
        let c = parse_smiles("CCCCC").unwrap();
        assert_ne!(a.invariant_signature(), c.invariant_signature());
    }

    #[test]
    fn hydrogen_counts_follow_valence_rules() {
        let h = |s: &str| parse_smiles(s).unwrap().atoms.iter().map(|a| a.hydrogens).collect::<Vec<_>>();
        assert_eq!(h("CS(=O)C"), vec![3, 0, 0, 3]); // DMSO: S takes valence 4
        assert_eq!(h("O=C=O"), vec![0, 0, 0]);
        assert_eq!(h("CC#N"), vec![3, 0, 0]);
        assert_eq!(h("c1ccncc1"), vec![1, 1, 1, 0, 1, 1]);
        assert_eq!(h("c1ccsc1"), vec![1, 1, 1, 0, 1]);
        assert_eq!(h("ClC(Cl)Cl"), vec![0, 1, 0, 0]);
        assert_eq!(h("C[N+](C)(C)C"), vec![3, 0, 3, 3, 3]);
        assert_eq!(h("[nH]1cccc1"), vec![1, 1, 1, 1, 1]);
        assert_eq!(h("OP(=O)(O)O"), vec![1, 0, 0, 1, 1]);
    }

    #[test]
    fn bracket_atoms_and_discarded_stereo() {
        let p = parse_smiles_verbose("[13CH3][C@@H](O)/C=C/[O-]").unwrap();
        assert_eq!(p.warnings.len(), 4);
        let g = p.graph;
        assert_eq!(g.atoms[0].hydrogens, 3);
        assert_eq!(g.atoms[1].hydrogens, 1);
        assert_eq!(g.atoms[5].charge, -1);
        let g = parse_smiles("[NH4+].[Cl-]").unwrap();
        assert_eq!(g.atoms[0].charge, 1);
        assert_eq!(g.atoms[0].hydrogens, 4);
        assert!(g.bonds.is_empty());
        assert_eq!(parse_smiles("[Fe+++]").unwrap().atoms[0].charge, 3);
        assert_eq!(parse_smiles("[Cu-2]").unwrap().atoms[0].charge, -2);
    }

    #[test]
    fn percent_ring_labels() {
        let a = parse_smiles("C%12CCCCC%12").unwrap();
        let b = parse_smiles("C1CCCCC1").unwrap();
        assert_eq!(a.invariant_signature(), b.invariant_signature());
    }

    #[test]
    fn errors_carry_offsets() {
        assert_eq!(smiles_error_offset("CC(C"), 2);
        assert_eq!(smiles_error_offset("CC)C"), 2);
        assert_eq!(smiles_error_offset("C1CC"), 1);
        assert_eq!(smiles_error_offset("CCX"), 2);
        assert_eq!(smiles_error_offset("CC="), 2);
        assert_eq!(smiles_error_offset("C[Xx]"), 2);
        assert_eq!(smiles_error_offset("C11"), 2);
        assert!(parse_smiles("").is_err());
    }

    #[test]
    fn writer_round_trip_preserves_graph() {
        for s in [
            "CCO",
            "CC(C)CC",
            "c1ccccc1",
            "O=C1CCCN1C",
            "CS(C)=O",
            "ClC(Cl)Cl",
            "c1ccc2ccccc2c1",
            "C1CC2CCC1C2",
            "OCC(O)CO",
            "[NH4+].[Cl-]",
            "CC(=O)OCC",
            "c1ccncc1",
        ] {
            let g = parse_smiles(s).unwrap();
            let out = write_smiles(&g);
            let back = parse_smiles(&out).unwrap_or_else(|e| panic!("{s} -> {out}: {e}"));
            assert_eq!(back.len(), g.len(), "{s} -> {out}");
            assert_eq!(back.bonds.len(), g.bonds.len(), "{s} -> {out}");
            assert_eq!(back.invariant_signature(), g.invariant_signature(), "{s} -> {out}");
        }
    }
}

"""Independent generator for ecfp_golden.tsv.

Handles the organic subset only (no bracket atoms), which is all the
golden molecules need. Run: python3 ecfp_golden.py > ecfp_golden.tsv
"""

M64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

VALENCES = {"B": [3], "C": [4], "N": [3, 5], "O": [2], "P": [3, 5],
            "S": [2, 4, 6], "F": [1], "Cl": [1], "Br": [1], "I": [1]}
Z = {"B": 5, "C": 6, "N": 7, "O": 8, "F": 9, "P": 15, "S": 16,
     "Cl": 17, "Br": 35, "I": 53}
ORDER = {"-": 1, "=": 2, "#": 3, ":": 4}

MOLECULES = [
    "CCO", "C", "CC", "CCCCC", "c1ccccc1", "CC(=O)C", "ClC(Cl)Cl",
    "CS(C)=O", "C1CCOC1", "CC#N", "c1ccncc1", "OCCO", "CN(C)C=O",
    "CC(C)O", "Cc1ccccc1", "O=C1CCCC1", "CCOC(C)=O", "ClCCl",
]


def mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


def hash_words(words):
    h = GOLDEN
    for w in words:
        h = mix64(h ^ mix64((w + GOLDEN) & M64))
    return h


def parse(s):
    atoms, bonds = [], []  # atoms: [symbol, aromatic]; bonds: (a, b, code)
    prev, stack, rings, pending = None, [], {}, None
    i = 0
    while i < len(s):
        ch = s[i]
        if ch == "(":
            stack.append(prev)
        elif ch == ")":
            prev = stack.pop()
        elif ch in ORDER:
            pending = ORDER[ch]
        elif ch.isdigit():
            if ch in rings:
                other, code = rings.pop(ch)
                code = pending or code
                if code is None:
                    code = 4 if atoms[prev][1] and atoms[other][1] else 1
                bonds.append((other, prev, code))
            else:
                rings[ch] = (prev, pending)
            pending = None
        else:
            sym = s[i:i + 2] if s[i:i + 2] in ("Cl", "Br") else ch
            arom = sym.islower()
            atoms.append([sym.upper() if arom else sym, arom])
            cur = len(atoms) - 1
            if prev is not None:
                code = pending
                if code is None:
                    code = 4 if atoms[prev][1] and arom else 1
                bonds.append((prev, cur, code))
            pending = None
            prev = cur
            i += len(sym)
            continue
        i += 1
    return atoms, bonds


def connected_without(n, bonds, skip):
    a, b, _ = bonds[skip]
    adj = {k: [] for k in range(n)}
    for idx, (x, y, _) in enumerate(bonds):
        if idx != skip:
            adj[x].append(y)
            adj[y].append(x)
    seen, todo = {a}, [a]
    while todo:
        u = todo.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                todo.append(v)
    return b in seen


def fingerprint(s, radius=2, nbits=2048):
    atoms, bonds = parse(s)
    n = len(atoms)
    ring_bond = [connected_without(n, bonds, k) for k in range(len(bonds))]
    nbrs = [[] for _ in range(n)]
    in_ring = [False] * n
    for k, (a, b, code) in enumerate(bonds):
        nbrs[a].append((b, code))
        nbrs[b].append((a, code))
        if ring_bond[k]:
            in_ring[a] = in_ring[b] = True
    ids = []
    for i, (sym, arom) in enumerate(atoms):
        vsum = sum(3 if c == 3 else 2 if c == 2 else 1 for _, c in nbrs[i])
        vals = VALENCES[sym]
        if arom:
            h = max(vals[0] - vsum - 1, 0)
        else:
            h = next((v - vsum for v in vals if v >= vsum), 0)
        ids.append(hash_words([Z[sym], len(nbrs[i]), 0, h, int(arom), int(in_ring[i])]))
    bits = {x % nbits for x in ids}
    for r in range(1, radius + 1):
        ids = [hash_words([r, ids[i]] + [w for pair in sorted((c, ids[j]) for j, c in nbrs[i]) for w in pair])
               for i in range(n)]
        bits |= {x % nbits for x in ids}
    return sorted(bits)


if __name__ == "__main__":
    for smi in MOLECULES:
        print(smi + "\t" + " ".join(map(str, fingerprint(smi))))

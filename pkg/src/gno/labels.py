"""Entity-type conflict handling and BIO2 pseudo-label export.

Per-type extraction can assign one span several types; conflict groups are
connected components of the span-overlap graph that carry at least two
distinct types.  Resolution keeps one member per group, chosen by a seeded
RNG so exports are reproducible.  Surviving mentions are aligned to tokens
and written out as two-column CoNLL for the fine-tuning path.
"""
from dataclasses import dataclass
import hashlib
import random
from pathlib import Path

from .grounding import Token
from .schema import EntityMention


@dataclass(frozen=True)
class ConflictGroup:
    doc_id: str
    members: tuple[EntityMention, ...]


@dataclass
class Bio2Sequence:
    tokens: list[Token]
    tags: list[str]


def detect_conflicts(mentions: list[EntityMention]) -> list[ConflictGroup]:
    """Maximal overlap-connected groups carrying >= 2 distinct entity types.

    Overlap chains merge transitively; a group of same-typed overlapping
    mentions is not a conflict.
    """
    if not mentions:
        return []
    doc_id = mentions[0].doc_id
    order = sorted(range(len(mentions)), key=lambda i: (mentions[i].start, mentions[i].end))
    parent = list(range(len(mentions)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    # sorted sweep: overlapping intervals are adjacent in start order
    active: list[int] = []
    for i in order:
        m = mentions[i]
        active = [j for j in active if mentions[j].end > m.start]
        for j in active:
            union(i, j)
        active.append(i)

    groups: dict[int, list[EntityMention]] = {}
    for i, m in enumerate(mentions):
        groups.setdefault(find(i), []).append(m)
    result = []
    for members in groups.values():
        if len(members) >= 2 and len({m.etype for m in members}) >= 2:
            members.sort(key=lambda m: (m.start, m.end, m.etype))
            result.append(ConflictGroup(doc_id=doc_id, members=tuple(members)))
    result.sort(key=lambda g: (g.members[0].start, g.members[0].end))
    return result


def _group_digest(seed: int, group: ConflictGroup) -> int:
    """Stable across runs and platforms, unlike the builtin hash."""
    key = repr(
        (seed, group.doc_id, [(m.start, m.end, m.etype) for m in group.members])
    ).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def resolve_random(group: ConflictGroup, seed: int) -> EntityMention:
    """Pick the surviving mention of a conflict group, deterministically per seed."""
    rng = random.Random(_group_digest(seed, group))
    return rng.choice(list(group.members))


def resolve_all(mentions: list[EntityMention], seed: int) -> list[EntityMention]:
    """Apply random resolution until no conflict group remains.

    Each pass strictly removes mentions, so this terminates; identical-span
    conflicts finish in one pass.
    """
    current = list(mentions)
    while True:
        groups = detect_conflicts(current)
        if not groups:
            return current
        drop: set[tuple[int, int, str]] = set()
        for g in groups:
            keep = resolve_random(g, seed)
            for m in g.members:
                if (m.start, m.end, m.etype) != (keep.start, keep.end, keep.etype):
                    drop.add((m.start, m.end, m.etype))
        current = [m for m in current if (m.start, m.end, m.etype) not in drop]


def to_bio2(toks: list[Token], mentions: list[EntityMention]) -> Bio2Sequence:
    """Tag tokens with B-t/I-t/O; a partially covered token counts as inside.

    Mentions must be conflict-free; overlapping same-type mentions are
    assigned longest-first.
    """
    assert not detect_conflicts(mentions), "conflicting types must be resolved first"
    owner = [-1] * len(toks)
    order = sorted(
        range(len(mentions)),
        key=lambda i: (-(mentions[i].end - mentions[i].start), mentions[i].start),
    )
    for mi in order:
        m = mentions[mi]
        for ti, tok in enumerate(toks):
            if owner[ti] == -1 and tok.start < m.end and m.start < tok.end:
                owner[ti] = mi

    tags = []
    prev_owner = -1
    for ti in range(len(toks)):
        mi = owner[ti]
        if mi == -1:
            tags.append("O")
        elif mi == prev_owner:
            tags.append(f"I-{mentions[mi].etype}")
        else:
            tags.append(f"B-{mentions[mi].etype}")
        prev_owner = mi
    return Bio2Sequence(tokens=list(toks), tags=tags)


def export_conll(sequences: list[Bio2Sequence], path: str | Path) -> None:
    """Two-column token<TAB>tag lines, blank line after each sequence."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for seq in sequences:
            for tok, tag in zip(seq.tokens, seq.tags):
                f.write(f"{tok.text}\t{tag}\n")
            f.write("\n")


def import_conll(path: str | Path) -> list[list[tuple[str, str]]]:
    """Inverse of export_conll, losing offsets: [(token, tag), ...] per sequence."""
    sequences: list[list[tuple[str, str]]] = []
    current: list[tuple[str, str]] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            if current:
                sequences.append(current)
                current = []
            continue
        token, _, tag = line.partition("\t")
        current.append((token, tag))
    if current:
        sequences.append(current)
    return sequences

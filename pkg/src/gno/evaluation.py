"""Score predictions against gold mentions.

Span-level matching for NER (partial = type + any character overlap, full =
type + identical offsets) and n-ary tuple matching for RE (strict = every
constituent matches positionally; lenient = some grounded occurrence of each
predicted surface matches).  Matching is one-to-one: pairs are taken greedily
in a deterministic preference order and the match is then grown to maximum
cardinality, so counts never depend on accidents of input ordering and
tp + fp = |pred|, tp + fn = |gold| always hold.
"""
from dataclasses import dataclass, field
from enum import Enum

from .errors import GnoError
from .grounding import GroundingConfig, DEFAULT_CONFIG, ground
from .schema import Document, EntityMention, RelationMention, ReMatching


class Mode(str, Enum):
    PARTIAL = "partial"
    FULL = "full"


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def micro_f1(counts: MatchCounts) -> tuple[float, float, float]:
    """Micro-averaged precision, recall, F1; any 0/0 component is 0."""
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def macro_average(f1_values: list[float]) -> float:
    """Unweighted mean of per-dataset F1 values."""
    if not f1_values:
        raise GnoError("macro average needs at least one value")
    return sum(f1_values) / len(f1_values)


def _overlap(a: EntityMention, b: EntityMention) -> int:
    return max(0, min(a.end, b.end) - max(b.start, a.start))


def _max_one_to_one(
    n_pred: int,
    n_gold: int,
    pairs: list[tuple[int, int]],
) -> int:
    """Size of a maximum one-to-one matching over candidate (pred, gold) pairs.

    Greedy in the given preference order, then augmenting paths so the count
    equals the maximum-cardinality matching.
    """
    pred_match = [-1] * n_pred
    gold_match = [-1] * n_gold
    for p, g in pairs:
        if pred_match[p] == -1 and gold_match[g] == -1:
            pred_match[p] = g
            gold_match[g] = p
    adj: list[list[int]] = [[] for _ in range(n_pred)]
    for p, g in pairs:
        adj[p].append(g)

    def try_augment(p: int, seen: list[bool]) -> bool:
        for g in adj[p]:
            if seen[g]:
                continue
            seen[g] = True
            if gold_match[g] == -1 or try_augment(gold_match[g], seen):
                pred_match[p] = g
                gold_match[g] = p
                return True
        return False

    for p in range(n_pred):
        if pred_match[p] == -1 and adj[p]:
            try_augment(p, [False] * n_gold)
    return sum(1 for g in pred_match if g != -1)


def match_ner(
    pred: list[EntityMention], gold: list[EntityMention], mode: Mode
) -> MatchCounts:
    """One-to-one span matching for a single document's mentions."""
    doc_ids = {m.doc_id for m in pred} | {m.doc_id for m in gold}
    if len(doc_ids) > 1:
        raise GnoError(f"cross-document mention mixing: {sorted(doc_ids)}")

    candidates: list[tuple[int, int, int]] = []  # (overlap, pred idx, gold idx)
    for i, p in enumerate(pred):
        for j, g in enumerate(gold):
            if p.etype != g.etype:
                continue
            if mode is Mode.FULL:
                if p.start == g.start and p.end == g.end:
                    candidates.append((p.end - p.start, i, j))
            else:
                ov = _overlap(p, g)
                if ov >= 1:
                    candidates.append((ov, i, j))

    candidates.sort(
        key=lambda c: (
            -c[0],
            abs(pred[c[1]].start - gold[c[2]].start),
            pred[c[1]].start,
            pred[c[1]].end,
            gold[c[2]].start,
            gold[c[2]].end,
        )
    )
    tp = _max_one_to_one(len(pred), len(gold), [(i, j) for _, i, j in candidates])
    return MatchCounts(tp=tp, fp=len(pred) - tp, fn=len(gold) - tp)


def _span_matches(p: EntityMention, g: EntityMention, mode: Mode) -> bool:
    if mode is Mode.FULL:
        return p.start == g.start and p.end == g.end
    return _overlap(p, g) >= 1


def _occurrence_spans(
    mention: EntityMention, doc: Document, cfg: GroundingConfig
) -> list[tuple[int, int]]:
    spans = ground(mention.surface, doc, cfg=cfg)
    if mention.span() not in spans:
        spans = spans + [mention.span()]
    return spans


def match_re(
    pred: list[RelationMention],
    gold: list[RelationMention],
    mode: Mode,
    policy: ReMatching = ReMatching.STRICT,
    doc: Document | None = None,
    grounding_cfg: GroundingConfig = DEFAULT_CONFIG,
) -> MatchCounts:
    """One-to-one tuple matching for a single document's relations.

    Strict: constituent i must match constituent i under the mode's span rule.
    Lenient: every predicted constituent surface must have SOME occurrence in
    the paragraph that matches the gold constituent (requires the document).
    """
    doc_ids = {m.doc_id for m in pred} | {m.doc_id for m in gold}
    if len(doc_ids) > 1:
        raise GnoError(f"cross-document mention mixing: {sorted(doc_ids)}")
    if policy is ReMatching.LENIENT and doc is None:
        raise GnoError("lenient matching needs the source document")

    def compatible(p: RelationMention, g: RelationMention) -> tuple[bool, int]:
        if p.rtype != g.rtype:
            return False, 0
        if len(p.constituents) != len(g.constituents):
            raise GnoError(
                f"arity mismatch for relation {p.rtype!r}: "
                f"{len(p.constituents)} vs {len(g.constituents)}"
            )
        total = 0
        for pc, gc in zip(p.constituents, g.constituents):
            if policy is ReMatching.STRICT:
                if not _span_matches(pc, gc, mode):
                    return False, 0
                total += _overlap(pc, gc)
            else:
                occs = _occurrence_spans(pc, doc, grounding_cfg)  # type: ignore[arg-type]
                hits = [
                    (s, e)
                    for s, e in occs
                    if (
                        (s == gc.start and e == gc.end)
                        if mode is Mode.FULL
                        else max(0, min(e, gc.end) - max(s, gc.start)) >= 1
                    )
                ]
                if not hits:
                    return False, 0
                total += max(min(e, gc.end) - max(s, gc.start) for s, e in hits)
        return True, total

    candidates: list[tuple[int, int, int]] = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gold):
            ok, total = compatible(p, g)
            if ok:
                candidates.append((total, i, j))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    tp = _max_one_to_one(len(pred), len(gold), [(i, j) for _, i, j in candidates])
    return MatchCounts(tp=tp, fp=len(pred) - tp, fn=len(gold) - tp)


@dataclass
class ModeResult:
    per_type: dict[str, MatchCounts] = field(default_factory=dict)
    pooled: MatchCounts = field(default_factory=MatchCounts)
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    def finish(self) -> "ModeResult":
        self.precision, self.recall, self.f1 = micro_f1(self.pooled)
        return self

    def to_dict(self) -> dict:
        def counts_dict(c: MatchCounts) -> dict:
            p, r, f1 = micro_f1(c)
            return {"tp": c.tp, "fp": c.fp, "fn": c.fn, "precision": p, "recall": r, "f1": f1}

        return {
            "per_type": {t: counts_dict(c) for t, c in sorted(self.per_type.items())},
            "pooled": counts_dict(self.pooled),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class EvalReport:
    task: str
    partial: ModeResult
    full: ModeResult
    policy: str | None = None
    macro: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "task": self.task,
            "partial": self.partial.to_dict(),
            "full": self.full.to_dict(),
        }
        if self.policy is not None:
            out["policy"] = self.policy
        if self.macro is not None:
            out["macro"] = self.macro
        return out

    def to_markdown(self) -> str:
        lines = [
            "| mode | precision | recall | f1 |",
            "| --- | --- | --- | --- |",
        ]
        for mode, res in (("partial", self.partial), ("full", self.full)):
            lines.append(
                f"| {mode} | {res.precision:.4f} | {res.recall:.4f} | {res.f1:.4f} |"
            )
        per_type = sorted(set(self.partial.per_type) | set(self.full.per_type))
        if per_type:
            lines.append("")
            lines.append("| type | partial f1 | full f1 |")
            lines.append("| --- | --- | --- |")
            for t in per_type:
                pf = micro_f1(self.partial.per_type.get(t, MatchCounts()))[2]
                ff = micro_f1(self.full.per_type.get(t, MatchCounts()))[2]
                lines.append(f"| {t} | {pf:.4f} | {ff:.4f} |")
        return "\n".join(lines) + "\n"


def evaluate_ner(
    pred_by_doc: dict[str, list[EntityMention]],
    gold_by_doc: dict[str, list[EntityMention]],
) -> EvalReport:
    """Pool per-document, per-type counts across a corpus, both modes at once."""
    report = EvalReport("ner", ModeResult(), ModeResult())
    doc_ids = sorted(set(pred_by_doc) | set(gold_by_doc))
    for mode, result in ((Mode.PARTIAL, report.partial), (Mode.FULL, report.full)):
        for doc_id in doc_ids:
            pred = pred_by_doc.get(doc_id, [])
            gold = gold_by_doc.get(doc_id, [])
            types = sorted({m.etype for m in pred} | {m.etype for m in gold})
            for t in types:
                counts = match_ner(
                    [m for m in pred if m.etype == t],
                    [m for m in gold if m.etype == t],
                    mode,
                )
                result.per_type[t] = result.per_type.get(t, MatchCounts()) + counts
                result.pooled = result.pooled + counts
        result.finish()
    return report


def evaluate_re(
    pred_by_doc: dict[str, list[RelationMention]],
    gold_by_doc: dict[str, list[RelationMention]],
    policy: ReMatching = ReMatching.STRICT,
    documents: dict[str, Document] | None = None,
    grounding_cfg: GroundingConfig = DEFAULT_CONFIG,
) -> EvalReport:
    report = EvalReport("re", ModeResult(), ModeResult(), policy=policy.value)
    doc_ids = sorted(set(pred_by_doc) | set(gold_by_doc))
    for mode, result in ((Mode.PARTIAL, report.partial), (Mode.FULL, report.full)):
        for doc_id in doc_ids:
            pred = pred_by_doc.get(doc_id, [])
            gold = gold_by_doc.get(doc_id, [])
            doc = documents.get(doc_id) if documents else None
            types = sorted({m.rtype for m in pred} | {m.rtype for m in gold})
            for t in types:
                counts = match_re(
                    [m for m in pred if m.rtype == t],
                    [m for m in gold if m.rtype == t],
                    mode,
                    policy=policy,
                    doc=doc,
                    grounding_cfg=grounding_cfg,
                )
                result.per_type[t] = result.per_type.get(t, MatchCounts()) + counts
                result.pooled = result.pooled + counts
        result.finish()
    return report

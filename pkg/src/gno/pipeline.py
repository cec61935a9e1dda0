"""Orchestrate extraction runs: documents x targets, plans, parsing, grounding.

One conversation per (document, entity type) for per-type strategies, per
document for the all-at-once strategy, and per (document, relation type) for
RE.  Documents run with bounded parallelism; results merge in document order
so outputs are deterministic regardless of worker scheduling.  Model and
parsing failures are recorded per target, never thrown; the run aborts only
when the failed-target fraction exceeds the configured budget.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
import json
import os

from .backend import BackendProfile, ChatBackend, Transcript, save_transcripts
from .errors import ConfigError, FailureBudgetExceeded
from .grounding import GroundingConfig, DEFAULT_CONFIG, ground, tokenize
from .labels import detect_conflicts
from .prompting import (
    ALL_TYPES,
    TemplateSet,
    build_cr_plan,
    build_ner_plan,
    build_re_plan,
)
from .schema import (
    Corpus,
    DatasetPolicy,
    Document,
    EntityMention,
    RelationMention,
    Strategy,
    StrategyConfig,
    Task,
    TaskSchema,
    load_corpus,
    load_schema,
    rephrase,
)
from .structparse import (
    extract_entity_surfaces,
    extract_relation_rows,
    extract_typed_entities,
    parse_reply,
)


def default_jobs() -> int:
    return min(8, os.cpu_count() or 1)


@dataclass
class RunManifest:
    corpus: str
    schema: str
    strategy: StrategyConfig
    profile: BackendProfile
    outdir: str
    task: Task
    jobs: int = field(default_factory=default_jobs)
    failure_budget: float = 0.5
    grounding: GroundingConfig = DEFAULT_CONFIG
    templates_dir: str | None = None
    policy: DatasetPolicy = field(default_factory=DatasetPolicy)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"]["strategy"] = self.strategy.strategy.value
        d["task"] = self.task.value
        d["policy"]["re_matching"] = self.policy.re_matching.value
        return d


@dataclass
class ExtractionResult:
    doc_id: str
    task: Task
    mentions: list = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        if self.task is Task.NER:
            ms = [
                {
                    "start": m.start,
                    "end": m.end,
                    "type": m.etype,
                    "surface": m.surface,
                    "provenance": prov,
                }
                for m, prov in zip(self.mentions, self.provenance)
            ]
        else:
            ms = [
                {
                    "type": m.rtype,
                    "constituents": [
                        {"start": c.start, "end": c.end, "type": c.etype, "surface": c.surface}
                        for c in m.constituents
                    ],
                    "provenance": prov,
                }
                for m, prov in zip(self.mentions, self.provenance)
            ]
        return {
            "doc_id": self.doc_id,
            "task": self.task.value,
            "mentions": ms,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionResult":
        task = Task(d["task"])
        result = cls(doc_id=d["doc_id"], task=task, failures=d.get("failures", []))
        for m in d["mentions"]:
            if task is Task.NER:
                result.mentions.append(
                    EntityMention(
                        doc_id=d["doc_id"],
                        start=m["start"],
                        end=m["end"],
                        etype=m["type"],
                        surface=m["surface"],
                    )
                )
            else:
                constituents = tuple(
                    EntityMention(
                        doc_id=d["doc_id"],
                        start=c["start"],
                        end=c["end"],
                        etype=c["type"],
                        surface=c["surface"],
                    )
                    for c in m["constituents"]
                )
                result.mentions.append(
                    RelationMention(
                        doc_id=d["doc_id"], rtype=m["type"], constituents=constituents
                    )
                )
            result.provenance.append(m.get("provenance", ""))
        return result


def save_results(results: list[ExtractionResult], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


def load_results(path: str | Path) -> list[ExtractionResult]:
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(ExtractionResult.from_dict(json.loads(line)))
    return out


def _load_templates(manifest: RunManifest) -> TemplateSet:
    if manifest.templates_dir:
        return TemplateSet.from_dir(manifest.templates_dir)
    return TemplateSet.default()


def _write_outputs(
    manifest: RunManifest,
    results: list[ExtractionResult],
    transcripts: list[Transcript],
) -> None:
    outdir = Path(manifest.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_transcripts(transcripts, outdir / "transcripts.jsonl")
    save_results(results, outdir / "predictions.jsonl")
    with (outdir / "failures.jsonl").open("w", encoding="utf-8") as f:
        for r in results:
            for failure in r.failures:
                f.write(
                    json.dumps({"doc_id": r.doc_id, **failure}, ensure_ascii=False) + "\n"
                )


def write_manifest_snapshot(manifest: RunManifest) -> None:
    outdir = Path(manifest.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _check_budget(results: list[ExtractionResult], total_targets: int, budget: float) -> None:
    failed = sum(
        1 for r in results for f in r.failures if f.get("kind") == "target"
    )
    if total_targets and failed / total_targets > budget:
        raise FailureBudgetExceeded(failed, total_targets, budget)


def _ground_surface(
    surface: str,
    doc: Document,
    toks,
    cfg: GroundingConfig,
) -> list[tuple[int, int]]:
    return ground(surface, doc, toks=toks, cfg=cfg)


def _ner_mentions_from_reply(
    reply: str,
    doc: Document,
    toks,
    etype: str,
    schema: TaskSchema,
    cfg: GroundingConfig,
    target: str,
    failures: list[dict],
) -> list[EntityMention]:
    """Parse one organize reply into grounded mentions (single type or ALL)."""
    outcome = parse_reply(reply)
    if not outcome.tables and not outcome.list_items:
        failures.append(
            {"target": target, "reason": "no table and no list in final reply", "kind": "target"}
        )
        return []
    mentions: list[EntityMention] = []
    if etype == ALL_TYPES:
        for surface, label in extract_typed_entities(outcome):
            resolved = schema.resolve_entity_type(label)
            if resolved is None:
                failures.append(
                    {"target": target, "reason": f"unknown type label {label!r}", "kind": "mention"}
                )
                continue
            spans = _ground_surface(surface, doc, toks, cfg)
            if not spans:
                failures.append(
                    {"target": target, "reason": f"ungroundable surface {surface!r}", "kind": "mention"}
                )
                continue
            for start, end in spans:
                mentions.append(
                    EntityMention(doc.id, start, end, resolved.canonical, doc.text[start:end])
                )
    else:
        for surface in extract_entity_surfaces(outcome, "entity"):
            spans = _ground_surface(surface, doc, toks, cfg)
            if not spans:
                failures.append(
                    {"target": target, "reason": f"ungroundable surface {surface!r}", "kind": "mention"}
                )
                continue
            for start, end in spans:
                mentions.append(EntityMention(doc.id, start, end, etype, doc.text[start:end]))
    return mentions


def _dedup_entities(
    mentions: list[EntityMention], provenance: list[str]
) -> tuple[list[EntityMention], list[str]]:
    seen: set[tuple[int, int, str]] = set()
    out_m, out_p = [], []
    for m, p in zip(mentions, provenance):
        key = (m.start, m.end, m.etype)
        if key in seen:
            continue
        seen.add(key)
        out_m.append(m)
        out_p.append(p)
    return out_m, out_p


def run_ner(manifest: RunManifest) -> list[ExtractionResult]:
    """Extract entities for every document; returns one result per document."""
    schema = load_schema(manifest.schema)
    if not schema.entity_types:
        raise ConfigError("NER needs a schema with entity types")
    corpus = load_corpus(manifest.corpus, schema)
    templates = _load_templates(manifest)
    backend = ChatBackend(manifest.profile)
    cfg = manifest.strategy

    if cfg.strategy is Strategy.AEIO:
        targets = [ALL_TYPES]
    else:
        targets = [t.canonical for t in schema.entity_types]

    def work(doc: Document) -> tuple[ExtractionResult, list[Transcript]]:
        result = ExtractionResult(doc_id=doc.id, task=Task.NER)
        transcripts = []
        toks = tokenize(doc.text)
        for target in targets:
            plan = build_ner_plan(
                cfg, schema, target, doc, templates, manifest.profile.system_enabled
            )
            transcript = backend.run_plan(plan, cfg.sampling)
            transcripts.append(transcript)
            if not transcript.ok:
                reason = next(s.reason for s in transcript.stages if s.state == "failed")
                result.failures.append(
                    {"target": target, "reason": reason or "stage failed", "kind": "target"}
                )
                continue
            mentions = _ner_mentions_from_reply(
                transcript.last_reply() or "",
                doc,
                toks,
                target,
                schema,
                manifest.grounding,
                target,
                result.failures,
            )
            for m in mentions:
                result.mentions.append(m)
                result.provenance.append(f"{doc.id}/{target}")
        result.mentions, result.provenance = _dedup_entities(
            result.mentions, result.provenance
        )
        return result, transcripts

    with ThreadPoolExecutor(max_workers=manifest.jobs) as pool:
        merged = list(pool.map(work, corpus.documents))

    results = [r for r, _ in merged]
    transcripts = [t for _, ts in merged for t in ts]
    _check_budget(results, len(corpus.documents) * len(targets), manifest.failure_budget)

    if cfg.cr_pass:
        results = run_cr(manifest, results, transcripts, backend=backend)

    write_manifest_snapshot(manifest)
    _write_outputs(manifest, results, transcripts)
    return results


def run_re(manifest: RunManifest) -> list[ExtractionResult]:
    """Extract relation tuples for every document, one conversation per relation."""
    schema = load_schema(manifest.schema)
    if not schema.relation_types:
        raise ConfigError("RE needs a schema with relation types")
    corpus = load_corpus(manifest.corpus, schema)
    templates = _load_templates(manifest)
    backend = ChatBackend(manifest.profile)
    cfg = manifest.strategy

    def work(doc: Document) -> tuple[ExtractionResult, list[Transcript]]:
        result = ExtractionResult(doc_id=doc.id, task=Task.RE)
        transcripts = []
        toks = tokenize(doc.text)
        seen: set[tuple] = set()
        for rtype in schema.relation_types:
            plan = build_re_plan(
                cfg, rtype, doc, templates, manifest.profile.system_enabled
            )
            transcript = backend.run_plan(plan, cfg.sampling)
            transcripts.append(transcript)
            if not transcript.ok:
                reason = next(s.reason for s in transcript.stages if s.state == "failed")
                result.failures.append(
                    {"target": rtype.name, "reason": reason or "stage failed", "kind": "target"}
                )
                continue
            outcome = parse_reply(transcript.last_reply() or "")
            if not outcome.tables and not outcome.list_items:
                result.failures.append(
                    {
                        "target": rtype.name,
                        "reason": "no table and no list in final reply",
                        "kind": "target",
                    }
                )
                continue
            rows = extract_relation_rows(outcome, [r.canonical for r in rtype.roles])
            for row in rows:
                constituents = []
                for role, surface in zip(rtype.roles, row):
                    spans = _ground_surface(surface, doc, toks, manifest.grounding)
                    if not spans:
                        result.failures.append(
                            {
                                "target": rtype.name,
                                "reason": f"ungroundable constituent {surface!r}",
                                "kind": "mention",
                            }
                        )
                        constituents = None
                        break
                    start, end = spans[0]
                    constituents.append(
                        EntityMention(doc.id, start, end, role.canonical, doc.text[start:end])
                    )
                if constituents is None:
                    continue
                key = (rtype.name, tuple((c.start, c.end) for c in constituents))
                if key in seen:
                    continue
                seen.add(key)
                result.mentions.append(
                    RelationMention(doc.id, rtype.name, tuple(constituents))
                )
                result.provenance.append(f"{doc.id}/{rtype.name}")
        return result, transcripts

    with ThreadPoolExecutor(max_workers=manifest.jobs) as pool:
        merged = list(pool.map(work, corpus.documents))

    results = [r for r, _ in merged]
    transcripts = [t for _, ts in merged for t in ts]
    _check_budget(
        results, len(corpus.documents) * len(schema.relation_types), manifest.failure_budget
    )
    write_manifest_snapshot(manifest)
    _write_outputs(manifest, results, transcripts)
    return results


def run_cr(
    manifest: RunManifest,
    prior: list[ExtractionResult],
    transcripts: list[Transcript],
    backend: ChatBackend | None = None,
) -> list[ExtractionResult]:
    """Re-type conflicting spans with one extra conversation per conflicted doc.

    Non-conflicting mentions are untouched; any CR failure keeps the original
    conflicting mentions in place.
    """
    schema = load_schema(manifest.schema)
    if manifest.strategy.strategy is Strategy.AEIO:
        raise ConfigError("conflict resolution needs per-type conversations")
    corpus = load_corpus(manifest.corpus, schema)
    templates = _load_templates(manifest)
    if backend is None:
        backend = ChatBackend(manifest.profile)
    by_doc_target: dict[tuple[str, str], Transcript] = {
        (t.doc_id, t.target): t for t in transcripts
    }

    updated: list[ExtractionResult] = []
    cr_transcripts: list[Transcript] = []
    for result in prior:
        groups = detect_conflicts(result.mentions)
        if not groups:
            updated.append(result)
            continue
        doc = corpus.document(result.doc_id)
        conflicted_spans = {m.span() for g in groups for m in g.members}
        conflicted_keys = {(m.start, m.end, m.etype) for g in groups for m in g.members}
        conflicting_types = sorted({m.etype for g in groups for m in g.members})

        outputs: list[tuple[str, str]] = []
        for etype in conflicting_types:
            t = by_doc_target.get((result.doc_id, etype))
            reply = t.last_reply() if t else None
            if reply:
                outputs.append((rephrase(schema, etype), reply))

        new_result = ExtractionResult(
            doc_id=result.doc_id,
            task=Task.NER,
            failures=list(result.failures),
        )
        kept = [
            (m, p)
            for m, p in zip(result.mentions, result.provenance)
            if (m.start, m.end, m.etype) not in conflicted_keys
        ]

        resolved: list[tuple[EntityMention, str]] | None = None
        if len(outputs) >= 2:
            plan = build_cr_plan(outputs, doc, templates, manifest.profile.system_enabled)
            transcript = backend.run_plan(plan, manifest.strategy.sampling)
            cr_transcripts.append(transcript)
            if transcript.ok:
                outcome = parse_reply(transcript.last_reply() or "")
                pairs = extract_typed_entities(outcome)
                toks = tokenize(doc.text)
                candidates: list[tuple[EntityMention, str]] = []
                for surface, label in pairs:
                    etype = schema.resolve_entity_type(label)
                    if etype is None:
                        continue
                    for start, end in _ground_surface(
                        surface, doc, toks, manifest.grounding
                    ):
                        if (start, end) in conflicted_spans:
                            candidates.append(
                                (
                                    EntityMention(
                                        doc.id, start, end, etype.canonical, doc.text[start:end]
                                    ),
                                    f"{doc.id}/CR",
                                )
                            )
                if candidates:
                    resolved = candidates
                else:
                    new_result.failures.append(
                        {"target": "CR", "reason": "unparsable resolution reply", "kind": "cr"}
                    )
            else:
                reason = next(s.reason for s in transcript.stages if s.state == "failed")
                new_result.failures.append(
                    {"target": "CR", "reason": reason or "stage failed", "kind": "cr"}
                )
        else:
            new_result.failures.append(
                {"target": "CR", "reason": "prior per-type outputs unavailable", "kind": "cr"}
            )

        if resolved is None:
            # conservative fallback: keep the original conflicting mentions
            kept = list(zip(result.mentions, result.provenance))
        else:
            kept.extend(resolved)

        kept.sort(key=lambda mp: (mp[0].start, mp[0].end, mp[0].etype))
        for m, p in kept:
            new_result.mentions.append(m)
            new_result.provenance.append(p)
        new_result.mentions, new_result.provenance = _dedup_entities(
            new_result.mentions, new_result.provenance
        )
        updated.append(new_result)

    transcripts.extend(cr_transcripts)
    return updated

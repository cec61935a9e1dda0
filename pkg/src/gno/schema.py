"""Core domain types, task schema configuration, and the JSONL corpus format.

Single source of truth for the data shapes the rest of the pipeline consumes:
documents, typed mention spans, task schemas (entity/relation type inventories
with human-readable rephrasings), strategy configuration, and the loaders that
validate them on the way in.

All types are immutable after construction and safe to share across workers.
"""
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
import json

from .errors import CorpusFormatError, SchemaError, UnknownTypeError


@dataclass(frozen=True)
class Document:
    """One text instance with stable character offsets; the unit of extraction."""

    id: str
    text: str
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise CorpusFormatError("document id must be nonempty")
        if not self.text:
            raise CorpusFormatError("document text must be nonempty", doc_id=self.id)


@dataclass(frozen=True)
class EntityType:
    """A canonical entity type name plus the display name used in prompts."""

    canonical: str
    rephrased: str

    def __post_init__(self):
        if not self.canonical or not self.rephrased:
            raise SchemaError("entity type names must be nonempty")


@dataclass(frozen=True)
class RelationType:
    """A named n-ary relation with an ordered role list and its prompt text."""

    name: str
    roles: tuple[EntityType, ...]
    prompt_text: str

    def __post_init__(self):
        if len(self.roles) < 2:
            raise SchemaError(f"relation {self.name!r} needs arity >= 2")
        if not self.prompt_text:
            raise SchemaError(f"relation {self.name!r} has empty prompt text")

    @property
    def arity(self) -> int:
        return len(self.roles)


@dataclass(frozen=True)
class TaskSchema:
    """Entity and relation type inventory for one task."""

    entity_types: tuple[EntityType, ...]
    relation_types: tuple[RelationType, ...] = ()

    def __post_init__(self):
        names = [t.canonical for t in self.entity_types]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate canonical entity type names")
        rnames = [r.name for r in self.relation_types]
        if len(set(rnames)) != len(rnames):
            raise SchemaError("duplicate relation type names")

    def entity_type(self, canonical: str) -> EntityType:
        for t in self.entity_types:
            if t.canonical == canonical:
                return t
        raise UnknownTypeError(f"unknown entity type {canonical!r}")

    def relation_type(self, name: str) -> RelationType:
        for r in self.relation_types:
            if r.name == name:
                return r
        raise UnknownTypeError(f"unknown relation type {name!r}")

    def has_entity_type(self, canonical: str) -> bool:
        return any(t.canonical == canonical for t in self.entity_types)

    def resolve_entity_type(self, label: str) -> EntityType | None:
        """Map a model-emitted label (canonical or rephrased, any case) to a type."""
        label = label.strip().casefold()
        for t in self.entity_types:
            if label in (t.canonical.casefold(), t.rephrased.casefold()):
                return t
        return None


def rephrase(schema: TaskSchema, canonical: str) -> str:
    """Display name substituted into prompts for a canonical entity type."""
    return schema.entity_type(canonical).rephrased


@dataclass(frozen=True)
class EntityMention:
    """A typed character span in one document."""

    doc_id: str
    start: int
    end: int
    etype: str
    surface: str

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise CorpusFormatError(
                f"invalid span ({self.start}, {self.end})", doc_id=self.doc_id
            )

    def overlaps(self, other: "EntityMention") -> bool:
        return self.doc_id == other.doc_id and self.start < other.end and other.start < self.end

    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class RelationMention:
    """A typed tuple of entity mentions; constituent order follows the role order."""

    doc_id: str
    rtype: str
    constituents: tuple[EntityMention, ...]

    def __post_init__(self):
        if any(c.doc_id != self.doc_id for c in self.constituents):
            raise CorpusFormatError(
                f"relation {self.rtype!r} mixes documents", doc_id=self.doc_id
            )


class Strategy(str, Enum):
    GNO = "gno"
    ONESTEP = "onestep"
    AEIO = "aeio"


class Task(str, Enum):
    NER = "ner"
    RE = "re"


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if self.temperature < 0:
            raise SchemaError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise SchemaError("max_tokens must be positive")


@dataclass(frozen=True)
class StrategyConfig:
    strategy: Strategy = Strategy.GNO
    cot: bool = True
    cleanup: bool = True
    cr_pass: bool = False
    sampling: SamplingParams = field(default_factory=SamplingParams)
    seed: int = 0


class ReMatching(str, Enum):
    STRICT = "strict"
    LENIENT = "lenient"


@dataclass(frozen=True)
class DatasetPolicy:
    re_matching: ReMatching = ReMatching.STRICT


@dataclass
class GoldAnnotations:
    """Gold mentions for one document, validated against its text."""

    entities: list[EntityMention] = field(default_factory=list)
    relations: list[RelationMention] = field(default_factory=list)


@dataclass
class Corpus:
    documents: list[Document]
    gold: dict[str, GoldAnnotations]
    dropped_entities: int = 0  # gold mentions whose type the schema omits
    dropped_relations: int = 0

    def document(self, doc_id: str) -> Document:
        for d in self.documents:
            if d.id == doc_id:
                return d
        raise KeyError(doc_id)


def _validate_span(doc: Document, start: int, end: int, line_no: int | None) -> None:
    if not (isinstance(start, int) and isinstance(end, int)):
        raise CorpusFormatError("span offsets must be integers", line_no, doc.id)
    if not (0 <= start < end <= len(doc.text)):
        raise CorpusFormatError(
            f"span ({start}, {end}) outside text of length {len(doc.text)}",
            line_no,
            doc.id,
        )


def load_corpus(path: str | Path, schema: TaskSchema | None = None) -> Corpus:
    """Load a JSONL corpus, validating every gold span against its document.

    When a schema is given, gold mentions of types the schema omits are dropped
    (dataset preparation happens in the schema file, not in code); relations
    with a dropped constituent or an undeclared relation type are dropped too.
    """
    path = Path(path)
    documents: list[Document] = []
    gold: dict[str, GoldAnnotations] = {}
    dropped_e = 0
    dropped_r = 0
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"invalid JSON: {e}", line_no=line_no) from e
            if not isinstance(rec, dict) or "id" not in rec or "text" not in rec:
                raise CorpusFormatError("record needs 'id' and 'text'", line_no=line_no)
            doc = Document(
                id=str(rec["id"]),
                text=rec["text"],
                meta={str(k): str(v) for k, v in rec.get("meta", {}).items()},
            )
            if doc.id in gold:
                raise CorpusFormatError("duplicate document id", line_no, doc.id)

            ann = GoldAnnotations()
            pool: list[EntityMention | None] = []
            for ent in rec.get("entities", []):
                _validate_span(doc, ent.get("start"), ent.get("end"), line_no)
                etype = str(ent.get("type", ""))
                if not etype:
                    raise CorpusFormatError("entity missing 'type'", line_no, doc.id)
                mention = EntityMention(
                    doc_id=doc.id,
                    start=ent["start"],
                    end=ent["end"],
                    etype=etype,
                    surface=doc.text[ent["start"] : ent["end"]],
                )
                if schema is not None and not schema.has_entity_type(etype):
                    pool.append(None)
                    dropped_e += 1
                    continue
                pool.append(mention)
                ann.entities.append(mention)

            for rel in rec.get("relations", []):
                rtype = str(rel.get("type", ""))
                args = rel.get("args", [])
                if not isinstance(args, list) or len(args) < 2:
                    raise CorpusFormatError(
                        f"relation {rtype!r} needs >= 2 args", line_no, doc.id
                    )
                if any(not isinstance(i, int) or not (0 <= i < len(pool)) for i in args):
                    raise CorpusFormatError(
                        f"relation {rtype!r} has out-of-range arg index", line_no, doc.id
                    )
                constituents = [pool[i] for i in args]
                if schema is not None:
                    try:
                        rdecl = schema.relation_type(rtype)
                    except UnknownTypeError:
                        dropped_r += 1
                        continue
                    if len(args) != rdecl.arity or any(c is None for c in constituents):
                        dropped_r += 1
                        continue
                ann.relations.append(
                    RelationMention(
                        doc_id=doc.id,
                        rtype=rtype,
                        constituents=tuple(constituents),  # type: ignore[arg-type]
                    )
                )

            documents.append(doc)
            gold[doc.id] = ann
    return Corpus(documents, gold, dropped_e, dropped_r)


def dump_corpus(corpus: Corpus, path: str | Path) -> None:
    """Serialize a corpus back to the JSONL interchange format."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for doc in corpus.documents:
            ann = corpus.gold[doc.id]
            index = {m.span() + (m.etype,): i for i, m in enumerate(ann.entities)}
            rec: dict = {"id": doc.id, "text": doc.text}
            if doc.meta:
                rec["meta"] = doc.meta
            rec["entities"] = [
                {"start": m.start, "end": m.end, "type": m.etype} for m in ann.entities
            ]
            rec["relations"] = [
                {
                    "type": r.rtype,
                    "args": [index[c.span() + (c.etype,)] for c in r.constituents],
                }
                for r in ann.relations
            ]
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_schema(path: str | Path) -> TaskSchema:
    """Load a task schema file; relation prompt files resolve relative to it."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON: {e}") from e
    try:
        etypes = tuple(
            EntityType(canonical=e["canonical"], rephrased=e["rephrased"])
            for e in raw.get("entity_types", [])
        )
    except KeyError as e:
        raise SchemaError(f"{path}: entity type missing field {e}") from e
    by_name = {t.canonical: t for t in etypes}
    rtypes = []
    for r in raw.get("relation_types", []):
        try:
            roles = tuple(by_name[name] for name in r["roles"])
        except KeyError as e:
            raise SchemaError(f"{path}: relation role {e} not a declared entity type")
        prompt_file = path.parent / r["prompt_file"]
        if not prompt_file.exists():
            raise SchemaError(f"{path}: relation prompt file {prompt_file} not found")
        prompt_text = prompt_file.read_text(encoding="utf-8").strip()
        rtypes.append(RelationType(name=r["name"], roles=roles, prompt_text=prompt_text))
    return TaskSchema(entity_types=etypes, relation_types=tuple(rtypes))

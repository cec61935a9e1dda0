"""Turn a strategy, schema, and document into an ordered conversation plan.

Plans stage the generate-then-organize flow: a free-form identification turn,
an optional clean-up turn, and a structuring turn that requests a Markdown
table.  All wording lives in editable template files; builders only pick the
stage sequence and fill the slots.
"""
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
import re

from .errors import PlanError, TemplateError
from .schema import (
    Document,
    RelationType,
    Strategy,
    StrategyConfig,
    TaskSchema,
    rephrase,
)

ALL_TYPES = "ALL"

STAGE_IDENTIFY = "identify"
STAGE_CLEANUP = "cleanup"
STAGE_ORGANIZE = "organize"
STAGE_CR_IDENTIFY = "cr_identify"
STAGE_CR_ORGANIZE = "cr_organize"

_SLOT = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class Message:
    role: str  # system | user | assistant
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise PlanError(f"invalid message role {self.role!r}")
        if not self.content:
            raise PlanError("message content must be nonempty")


@dataclass
class ConversationPlan:
    stages: list[tuple[str, Message]]
    system: Message | None
    target: str
    doc_id: str = ""

    @property
    def stage_names(self) -> list[str]:
        return [name for name, _ in self.stages]


@dataclass
class TemplateSet:
    """Named prompt templates with {slot} placeholders.

    Names follow the file layout, e.g. ``gno/identify`` for
    ``templates/gno/identify.txt``.  Rendering fills every placeholder in a
    single pass; a placeholder with no value is an error, and inserted values
    are never re-scanned, so braces inside documents are inert.
    """

    templates: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dir(cls, root: str | Path) -> "TemplateSet":
        root = Path(root)
        if not root.is_dir():
            raise TemplateError(f"template directory {root} not found")
        templates = {}
        for path in sorted(root.rglob("*.txt")):
            name = path.relative_to(root).with_suffix("").as_posix()
            templates[name] = path.read_text(encoding="utf-8").rstrip("\n")
        return cls(templates)

    @classmethod
    def default(cls) -> "TemplateSet":
        root = resources.files("gno") / "templates"
        templates = {}
        for entry in sorted(root.rglob("*.txt"), key=lambda p: str(p)):
            name = str(entry)[len(str(root)) + 1 :].removesuffix(".txt")
            templates[name] = entry.read_text(encoding="utf-8").rstrip("\n")
        return cls(templates)

    def render(self, name: str, **slots: str) -> str:
        if name not in self.templates:
            raise TemplateError(f"no template named {name!r}")

        def fill(m: re.Match) -> str:
            slot = m.group(1)
            if slot not in slots:
                raise TemplateError(f"template {name!r}: no value for slot {{{slot}}}")
            return slots[slot]

        return _SLOT.sub(fill, self.templates[name]).strip()


def join_names(names: list[str]) -> str:
    """Human list: 'a', 'a and b', 'a, b, and c'."""
    if len(names) == 1:
        return names[0]
    if len(names) == 2:
        return f"{names[0]} and {names[1]}"
    return ", ".join(names[:-1]) + f", and {names[-1]}"


def _cot_suffix(cfg: StrategyConfig, templates: TemplateSet) -> str:
    if not cfg.cot:
        return ""
    return " " + templates.render("cot_suffix")


def _system_message(templates: TemplateSet, enabled: bool) -> Message | None:
    return Message("system", templates.render("system")) if enabled else None


def build_ner_plan(
    cfg: StrategyConfig,
    schema: TaskSchema,
    etype: str,
    doc: Document,
    templates: TemplateSet,
    system_enabled: bool,
) -> ConversationPlan:
    """Plan one NER conversation for a document and one entity type (or ALL)."""
    if (etype == ALL_TYPES) != (cfg.strategy is Strategy.AEIO):
        raise PlanError("target ALL is used exactly when the strategy asks all types at once")

    slots = {
        "text": doc.text,
        "cot_suffix": _cot_suffix(cfg, templates),
        "entity_types_list": join_names([t.rephrased for t in schema.entity_types]),
    }
    if etype != ALL_TYPES:
        slots["entity_type"] = rephrase(schema, etype)

    kind = cfg.strategy.value
    stages: list[tuple[str, Message]] = []
    if cfg.strategy is Strategy.ONESTEP:
        stages.append((STAGE_IDENTIFY, Message("user", templates.render(f"{kind}/identify", **slots))))
        if cfg.cleanup:
            stages.append((STAGE_CLEANUP, Message("user", templates.render(f"{kind}/cleanup", **slots))))
    else:  # gno and aeio share the three-stage shape
        stages.append((STAGE_IDENTIFY, Message("user", templates.render(f"{kind}/identify", **slots))))
        if cfg.cleanup:
            stages.append((STAGE_CLEANUP, Message("user", templates.render(f"{kind}/cleanup", **slots))))
        stages.append((STAGE_ORGANIZE, Message("user", templates.render(f"{kind}/organize", **slots))))

    return ConversationPlan(
        stages=stages,
        system=_system_message(templates, system_enabled),
        target=etype,
        doc_id=doc.id,
    )


def build_re_plan(
    cfg: StrategyConfig,
    rtype: RelationType,
    doc: Document,
    templates: TemplateSet,
    system_enabled: bool,
) -> ConversationPlan:
    """Plan one end-to-end RE conversation for a document and relation type.

    The structuring turn asks for one column per role plus a final presence
    column; clean-up is folded into that turn rather than staged separately.
    """
    if cfg.strategy is Strategy.AEIO:
        raise PlanError("the all-types-at-once strategy applies to NER only")
    role_names = [r.rephrased for r in rtype.roles]
    slots = {
        "text": doc.text,
        "cot_suffix": _cot_suffix(cfg, templates),
        "relation_prompt": rtype.prompt_text,
        "relation_type": rtype.name,
        "role_columns": ", ".join(f'"{n}"' for n in role_names),
        "head_type": role_names[0],
        "tail_type": role_names[-1],
    }

    if cfg.strategy is Strategy.ONESTEP:
        stages = [(STAGE_IDENTIFY, Message("user", templates.render("onestep/re_identify", **slots)))]
    else:
        stages = [
            (STAGE_IDENTIFY, Message("user", templates.render("gno/re_identify", **slots))),
            (STAGE_ORGANIZE, Message("user", templates.render("gno/re_organize", **slots))),
        ]
    return ConversationPlan(
        stages=stages,
        system=_system_message(templates, system_enabled),
        target=rtype.name,
        doc_id=doc.id,
    )


def build_cr_plan(
    conflict_outputs: list[tuple[str, str]],
    doc: Document,
    templates: TemplateSet,
    system_enabled: bool = True,
) -> ConversationPlan:
    """Plan a conflict-resolution conversation over prior per-type outputs.

    ``conflict_outputs`` pairs a display type name with the assistant text that
    proposed it; at least two outputs with distinct types are required.
    """
    if len(conflict_outputs) < 2 or len({t for t, _ in conflict_outputs}) < 2:
        raise PlanError("conflict resolution needs >= 2 prior outputs with distinct types")
    blocks = [
        f"NER Response {i} ({etype}):\n{text}"
        for i, (etype, text) in enumerate(conflict_outputs, start=1)
    ]
    slots = {"text": doc.text, "prior_outputs": "\n\n".join(blocks)}
    stages = [
        (STAGE_CR_IDENTIFY, Message("user", templates.render("cr/identify", **slots))),
        (STAGE_CR_ORGANIZE, Message("user", templates.render("cr/organize", **slots))),
    ]
    return ConversationPlan(
        stages=stages,
        system=_system_message(templates, system_enabled),
        target="CR",
        doc_id=doc.id,
    )


def default_base_re_prompt(rtype: RelationType) -> str:
    """Slot-filled starting prompt for a relation, before any LLM rewriting."""
    names = join_names([f"<{r.rephrased}>" for r in rtype.roles])
    return (
        f"Please identify the <{rtype.name}> relationships between the "
        f"{names} entities in the following paragraph."
    )


def build_re_prompt_request(
    base_prompt: str,
    examples: list[tuple[str, list[tuple[str, ...]]]],
    templates: TemplateSet,
) -> Message:
    """Meta-prompt asking a stronger model to rewrite a relation prompt.

    The reply is meant to be reviewed by a human and stored as the relation's
    prompt file; this function never executes the request itself.
    """
    if not examples:
        raise PlanError("prompt generation needs at least one example")
    rendered = []
    for i, (paragraph, tuples) in enumerate(examples, start=1):
        gold = "; ".join("(" + ", ".join(t) + ")" for t in tuples) or "(none)"
        rendered.append(f"Example {i}:\nParagraph: {paragraph}\nRelations: {gold}")
    content = templates.render(
        "re_prompt_gen", base_prompt=base_prompt, examples="\n\n".join(rendered)
    )
    return Message("user", content)

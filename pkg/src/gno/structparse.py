"""Extract structured rows from free-text LLM replies.

Tolerant Markdown table parsing (outer pipes optional, separator row dropped,
emphasis/backtick/quote wrappers stripped, short rows padded, long rows
truncated) with a bulleted/numbered list fallback, null-cell filtering, and
the presence-column filter used for relation rows.

Every tolerance applied is counted in ``ParseOutcome.repairs``; canonical
output from :func:`to_markdown` reparses with zero repairs.  One known
ambiguity: a data row whose every cell is made of dashes is indistinguishable
from a separator row and is dropped.
"""
from dataclasses import dataclass, field
import re
import unicodedata

NULL_CELLS = frozenset({"none", "n/a", "-", "", "null", "no entities", "no entities found"})
AFFIRMATIVE_CELLS = frozenset({"yes", "true", "y", "✓", "present", "1"})

_LIST_ITEM = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+(.*\S)\s*$")
_ENUM_PREFIX = re.compile(r"^\s*\d+[.)]\s+")
_SEPARATOR_CELL = re.compile(r"^:?-+:?$")

# wrapper pairs stripped from cell boundaries, longest first
_WRAPPERS = ("**", "__", "*", "_", "`", '"', "'", "“”", "‘’")


@dataclass
class Table:
    header: list[str]
    rows: list[list[str]]


@dataclass
class ParseOutcome:
    tables: list[Table] = field(default_factory=list)
    list_items: list[str] = field(default_factory=list)
    repairs: int = 0


def _split_cells(line: str) -> tuple[list[str], bool]:
    """Split a table line on unshielded pipes.

    Pipes inside backtick spans and pipes escaped with a backslash do not
    split.  Returns the raw cells and whether both outer pipes were present.
    """
    cells: list[str] = []
    buf: list[str] = []
    in_code = False
    i = 0
    n = len(line)
    while i < n:
        ch = line[i]
        if ch == "\\" and i + 1 < n and line[i + 1] == "|":
            buf.append("|")
            i += 2
            continue
        if ch == "`":
            in_code = not in_code
            buf.append(ch)
        elif ch == "|" and not in_code:
            cells.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
        i += 1
    cells.append("".join(buf))

    stripped = line.strip()
    has_outer = stripped.startswith("|") and stripped.endswith("|") and len(stripped) > 1
    # outer pipes produce empty boundary cells; drop them
    if cells and cells[0].strip() == "" and stripped.startswith("|"):
        cells = cells[1:]
    if cells and cells[-1].strip() == "" and stripped.endswith("|") and len(stripped) > 1:
        cells = cells[:-1]
    return cells, has_outer


def _clean_cell(cell: str) -> tuple[str, bool]:
    """Trim a cell and strip surrounding emphasis/backtick/quote wrappers."""
    text = cell.strip()
    repaired = False
    changed = True
    while changed and text:
        changed = False
        for wrap in _WRAPPERS:
            if len(wrap) == 2 and wrap not in ("**", "__"):
                open_m, close_m = wrap[0], wrap[1]
            else:
                open_m = close_m = wrap
            if (
                text.startswith(open_m)
                and text.endswith(close_m)
                and len(text) > len(open_m) + len(close_m) - 1
            ):
                inner = text[len(open_m) : len(text) - len(close_m)].strip()
                if inner:
                    text = inner
                    repaired = True
                    changed = True
                    break
    return text, repaired


def _has_table_pipe(line: str) -> bool:
    """A line belongs to a table block iff it contains an unshielded pipe."""
    in_code = False
    i = 0
    n = len(line)
    while i < n:
        ch = line[i]
        if ch == "\\" and i + 1 < n and line[i + 1] == "|":
            i += 2
            continue
        if ch == "`":
            in_code = not in_code
        elif ch == "|" and not in_code:
            return True
        i += 1
    return False


def _is_separator(cells: list[str]) -> bool:
    return len(cells) > 0 and all(_SEPARATOR_CELL.match(c.strip()) for c in cells)


def parse_reply(text: str) -> ParseOutcome:
    """Parse one LLM reply into tables and list items.

    Total over arbitrary input: prose is ignored and malformed structure is
    repaired rather than rejected.
    """
    outcome = ParseOutcome()
    block: list[str] = []

    def flush_block() -> None:
        if not block:
            return
        header: list[str] | None = None
        rows: list[list[str]] = []
        saw_separator = False
        for raw in block:
            cells, has_outer = _split_cells(raw)
            if _is_separator(cells):
                saw_separator = True
                continue
            if not has_outer:
                outcome.repairs += 1
            cleaned = []
            for c in cells:
                value, repaired = _clean_cell(c)
                if repaired:
                    outcome.repairs += 1
                cleaned.append(value)
            if header is None:
                header = cleaned
            else:
                if len(cleaned) < len(header):
                    cleaned = cleaned + [""] * (len(header) - len(cleaned))
                    outcome.repairs += 1
                elif len(cleaned) > len(header):
                    cleaned = cleaned[: len(header)]
                    outcome.repairs += 1
                rows.append(cleaned)
        if header is not None:
            if not saw_separator:
                outcome.repairs += 1
            outcome.tables.append(Table(header=header, rows=rows))
        block.clear()

    for line in text.splitlines():
        if _has_table_pipe(line):
            block.append(line)
            continue
        flush_block()
        m = _LIST_ITEM.match(line)
        if m:
            item, _ = _clean_cell(m.group(1))
            if item:
                outcome.list_items.append(item)
    flush_block()
    return outcome


def to_markdown(table: Table) -> str:
    """Canonical Markdown serialization; reparses to an equal table, repairs 0."""

    def escape(cell: str) -> str:
        return cell.replace("|", "\\|")

    lines = ["| " + " | ".join(escape(c) for c in table.header) + " |"]
    lines.append("| " + " | ".join("---" for _ in table.header) + " |")
    for row in table.rows:
        lines.append("| " + " | ".join(escape(c) for c in row) + " |")
    return "\n".join(lines)


def _is_null(cell: str) -> bool:
    return cell.strip().casefold() in NULL_CELLS


def extract_entity_surfaces(outcome: ParseOutcome, expected_header: str = "entity") -> list[str]:
    """Pull entity surface strings out of a parsed reply.

    Prefers columns whose header mentions ``expected_header`` (rows from all
    matching tables concatenated), then the last table's first column, then
    list items.  Null cells are dropped, exact repeats deduplicated, order
    preserved.
    """
    want = expected_header.casefold()
    values: list[str] = []
    matched = False
    for table in outcome.tables:
        col = next((i for i, h in enumerate(table.header) if want in h.casefold()), None)
        if col is None:
            continue
        matched = True
        for row in table.rows:
            if col < len(row):
                values.append(row[col])
    if not matched:
        if outcome.tables:
            values = [row[0] for row in outcome.tables[-1].rows if row]
        else:
            values = [_ENUM_PREFIX.sub("", item) for item in outcome.list_items]

    seen: set[str] = set()
    result: list[str] = []
    for v in values:
        v = v.strip()
        if _is_null(v) or v in seen:
            continue
        seen.add(v)
        result.append(v)
    return result


def extract_typed_entities(
    outcome: ParseOutcome,
    entity_header: str = "entity",
    type_header: str = "type",
) -> list[tuple[str, str]]:
    """(surface, type label) pairs from two-column Entity/Type tables.

    Columns are located by header match, falling back to positions 0 and 1.
    Null surfaces drop the row; exact (surface, label) repeats deduplicate.
    """
    pairs: list[tuple[str, str]] = []
    for table in outcome.tables:
        if len(table.header) < 2:
            continue
        ecol = next(
            (i for i, h in enumerate(table.header) if entity_header in h.casefold()), 0
        )
        tcol = next(
            (i for i, h in enumerate(table.header) if type_header in h.casefold()), None
        )
        if tcol is None or tcol == ecol:
            tcol = 1 if ecol != 1 else 0
        for row in table.rows:
            surface = row[ecol].strip()
            label = row[tcol].strip()
            if _is_null(surface) or _is_null(label):
                continue
            pairs.append((surface, label))
    seen: set[tuple[str, str]] = set()
    out = []
    for p in pairs:
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def _normalize_presence(cell: str) -> str:
    kept = "".join(
        ch for ch in cell if not unicodedata.category(ch).startswith("P")
    )
    return kept.strip().casefold()


def extract_relation_rows(
    outcome: ParseOutcome,
    roles: list[str],
    affirmative: frozenset[str] = AFFIRMATIVE_CELLS,
) -> list[tuple[str, ...]]:
    """Select presence-confirmed relation rows from a parsed reply.

    Rows come from tables with at least ``len(roles) + 1`` columns; the last
    column states whether the relation holds.  A row survives iff its presence
    cell is affirmative and none of its first ``len(roles)`` cells is null.
    """
    k = len(roles)
    if k < 2:
        raise ValueError("relations need at least 2 roles")
    result: list[tuple[str, ...]] = []
    for table in outcome.tables:
        if len(table.header) < k + 1:
            continue
        for row in table.rows:
            if len(row) < k + 1:
                continue
            if _normalize_presence(row[-1]) not in affirmative:
                continue
            constituents = tuple(c.strip() for c in row[:k])
            if any(_is_null(c) for c in constituents):
                continue
            result.append(constituents)
    return result

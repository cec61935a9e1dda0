"""Map extracted surface strings back to character spans in the source text.

Exact search first (case-sensitive, then case-insensitive), then fuzzy
alignment of token windows scored with difflib's gestalt ratio.  Returned
offsets always index the original text; normalization affects scoring only.
"""
from dataclasses import dataclass
from difflib import SequenceMatcher
import math
import re
import unicodedata

from .schema import Document


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class GroundingConfig:
    cutoff: float = 0.6
    window_slack: float = 0.5
    normalize: bool = True

    def __post_init__(self):
        if not (0.0 <= self.cutoff <= 1.0):
            raise ValueError("cutoff must be in [0, 1]")


DEFAULT_CONFIG = GroundingConfig()

_WS = re.compile(r"\S+")
_SPACES = re.compile(r"\s+")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[Token]:
    """Whitespace tokens with leading/trailing punctuation split off.

    Internal punctuation (hyphens, apostrophes) stays inside the token.
    """
    tokens: list[Token] = []
    for m in _WS.finditer(text):
        start, end = m.start(), m.end()
        while start < end and _is_punct(text[start]):
            tokens.append(Token(text[start], start, start + 1))
            start += 1
        trailing: list[Token] = []
        while end > start and _is_punct(text[end - 1]):
            trailing.append(Token(text[end - 1], end - 1, end))
            end -= 1
        if start < end:
            tokens.append(Token(text[start:end], start, end))
        tokens.extend(reversed(trailing))
    return tokens


def similarity(a: str, b: str) -> float:
    """Gestalt ratio 2*M/(|a|+|b|), M = recursively matched characters."""
    if not a and not b:
        return 1.0
    return SequenceMatcher(None, a, b, autojunk=False).ratio()


def normalize_for_match(s: str) -> str:
    """Scoring-side normalization: case-fold and collapse whitespace runs."""
    return _SPACES.sub(" ", s).strip().casefold()


def _exact_spans(text: str, query: str) -> list[tuple[int, int]]:
    spans = []
    i = 0
    while (j := text.find(query, i)) != -1:
        spans.append((j, j + len(query)))
        i = j + len(query)
    return spans


def ground(
    surface: str,
    doc: Document,
    toks: list[Token] | None = None,
    cfg: GroundingConfig = DEFAULT_CONFIG,
) -> list[tuple[int, int]]:
    """All non-overlapping spans of the document the surface grounds to.

    Pass 1: verbatim occurrences (never touches the fuzzy path).  Pass 2:
    token-aligned windows whose token count is within the slack band of the
    query's, scored against the cutoff, selected greedily by score.  Empty
    result means ungroundable; the caller records the failure.
    """
    surface = surface.strip()
    if not surface:
        return []

    spans = _exact_spans(doc.text, surface)
    if not spans:
        low_text = doc.text.lower()
        low_query = surface.lower()
        # .lower() can change lengths for exotic code points; offsets would lie
        if len(low_text) == len(doc.text) and len(low_query) == len(surface):
            spans = _exact_spans(low_text, low_query)
    if spans:
        return spans

    if toks is None:
        toks = tokenize(doc.text)
    if not toks:
        return []
    q = len(tokenize(surface))
    if q == 0:
        return []
    lo = max(1, math.ceil(q * (1 - cfg.window_slack)))
    hi = max(lo, math.floor(q * (1 + cfg.window_slack)))

    target = normalize_for_match(surface) if cfg.normalize else surface
    candidates: list[tuple[float, int, int]] = []
    for width in range(lo, hi + 1):
        for i in range(0, len(toks) - width + 1):
            start = toks[i].start
            end = toks[i + width - 1].end
            window = doc.text[start:end]
            if cfg.normalize:
                window = normalize_for_match(window)
            score = similarity(target, window)
            if score >= cfg.cutoff:
                candidates.append((score, start, end))

    candidates.sort(key=lambda c: (-c[0], c[1], c[2] - c[1]))
    chosen: list[tuple[int, int]] = []
    for _, start, end in candidates:
        if all(end <= s or e <= start for s, e in chosen):
            chosen.append((start, end))
    chosen.sort()
    return chosen

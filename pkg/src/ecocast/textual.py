"""Semantic text for records: key-value linearization, deterministic sentence
templates, a closed word/digit vocabulary, tokenization with [MASK] tracking,
and domain-instruction strings (dataset/task descriptions plus target stats)."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .dataset import FeatureSchema, Record

MASK_TOKEN = "[MASK]"
SPECIALS = ("[PAD]", MASK_TOKEN, "[SEP]", "[CLS]")
PAD_ID, MASK_ID, SEP_ID, CLS_ID = 0, 1, 2, 3

START_PROMPT = "<|start_prompt|>"
END_PROMPT = "<|end_prompt|>"

# words any template can emit, beyond schema/description/region tokens
_TEMPLATE_WORDS = (
    "On", "day", "in", "region", "the", "was",
    "Dataset", "description", "Task", "Target", "statistics",
    "min", "max", "median", "value", "trend", "of", "input", "is",
    "increasing", "decreasing", "stable", "unknown",
)
_PUNCT = (",", ".", ":", ";", "(", ")", "-")
_DIGITS = tuple(str(d) for d in range(10))

_TOKEN_RE = re.compile(
    r"<\|start_prompt\|>|<\|end_prompt\|>"
    r"|\[PAD\]|\[MASK\]|\[SEP\]|\[CLS\]"
    r"|[A-Za-z][A-Za-z0-9_\-]*"
    r"|[0-9.,:;()\-]"
)
_WORD_RE = re.compile(r"[A-Za-z][A-Za-z0-9_\-]*\Z")
_ATTACH = {",", ".", ":", ";", ")"}

# builtin domain descriptions, selectable from the run config
DATASET_DESCRIPTIONS = {
    "synthetic": "A synthetic environmental monitoring dataset with seasonal "
                 "daily drivers observed across a handful of regions.",
    "crw-flow": "The Christina River Watershed Flow (CRW-Flow) is a dataset "
                "containing streamflow observations from 16 river segments. It is "
                "worth noting that the streamflow becomes hundreds of times higher "
                "than usual when it rains.",
    "agr": "The Agriculture nitrous oxide (AGR) is a dataset containing "
           "agricultural nitrous oxide emission observations from 6 chambers.",
}
TASK_DESCRIPTIONS = {
    "synthetic": "predict the target variable given the observed drivers "
                 "represented in the image and text spaces",
    "crw-flow": "predict the streamflow given the observed meteorological "
                "features represented in the image and text spaces",
    "agr": "predict the nitrous oxide emission given the observed meteorological "
           "features represented in the image and text spaces",
}


class TextError(ValueError):
    pass


def format_value(x: float) -> str:
    """Fixed-notation rendering at 5 significant digits, trailing zeros trimmed."""
    return np.format_float_positional(float(x), precision=5, unique=False,
                                      fractional=False, trim="-")


def format_stat(x: float) -> str:
    """Fixed-notation rendering keeping all 5 significant digits (e.g. 1.0000)."""
    s = np.format_float_positional(float(x), precision=5, unique=False,
                                   fractional=False, trim="k")
    return s[:-1] if s.endswith(".") else s


# ---------------------------------------------------------------------------
# linearization and templating


@dataclass(frozen=True)
class Linearization:
    pairs: tuple[tuple[str, str], ...]  # (feature description, rendered value or [MASK])


def linearize(record: Record, schema: FeatureSchema) -> Linearization:
    if len(record.features) != schema.k:
        raise TextError(f"record has {len(record.features)} features, schema has {schema.k}")
    pairs = []
    for name, value, present in zip(schema.names, record.features, record.feature_present):
        pairs.append((name, format_value(value) if present else MASK_TOKEN))
    return Linearization(tuple(pairs))


def split_text(s: str) -> list[str]:
    """Split a template-produced string into tokens (words, digits, marks)."""
    out = []
    pos, n = 0, len(s)
    while pos < n:
        if s[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(s, pos)
        if m is None:
            raise TextError(f"untokenizable character {s[pos]!r} at offset {pos}")
        out.append(m.group())
        pos = m.end()
    return out


def join_tokens(tokens) -> str:
    """Inverse of split_text for template-produced token streams."""
    parts = []
    prev = None
    for tok in tokens:
        if prev is None:
            parts.append(tok)
        elif tok in _ATTACH or prev == "(" or (
                tok.isdigit() and (prev.isdigit() or prev in (".", "-"))):
            parts.append(tok)
        else:
            parts.append(" " + tok)
        prev = tok
    return "".join(parts)


def _header_tokens(region: str, day: int, trailing: str) -> list[str]:
    if not _WORD_RE.match(region):
        raise TextError(f"region id {region!r} is not a single word token")
    return ["On", "day", *str(int(day)), "in", "region", region, trailing]


def _clause_tokens(key: str, value: str) -> list[str]:
    toks = ["the", *key.split(), "was"]
    if value == MASK_TOKEN:
        toks.append(MASK_TOKEN)
    else:
        toks.extend(value)
    toks.append(".")
    return toks


def semantic_tokens(lin: Linearization, region: str, day: int) -> list[str]:
    """Token stream of the rendered sentence(s) for one record."""
    if not lin.pairs:
        return _header_tokens(region, day, ".")
    toks = _header_tokens(region, day, ",")
    for key, value in lin.pairs:
        toks.extend(_clause_tokens(key, value))
    return toks


def render_semantic(lin: Linearization, region: str, day: int) -> str:
    """Deterministic sentence rendering: header then one clause per pair."""
    return join_tokens(semantic_tokens(lin, region, day))


# ---------------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise TextError(f"token {token!r} not in vocabulary (closed)") from None

    def encode(self, tokens) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def build_vocabulary(schema: FeatureSchema, regions, dataset_desc: str,
                     task_desc: str) -> Vocabulary:
    """Closed vocabulary over everything the templates can emit for a dataset."""
    inventory: set[str] = set(_DIGITS) | set(_PUNCT)
    inventory.update((START_PROMPT, END_PROMPT))
    inventory.update(_TEMPLATE_WORDS)
    for name in schema.names:
        inventory.update(name.split())
    for region in regions:
        if not _WORD_RE.match(region):
            raise TextError(f"region id {region!r} cannot be a vocabulary word")
        inventory.add(region)
    inventory.update(split_text(dataset_desc))
    inventory.update(split_text(task_desc))
    tokens = list(SPECIALS) + sorted(inventory - set(SPECIALS))
    return Vocabulary({t: i for i, t in enumerate(tokens)}, tuple(tokens))


def save_vocabulary(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, tok in enumerate(vocab.id_to_token):
            fh.write(f"{tok}\t{i}\n")


def load_vocabulary(path) -> Vocabulary:
    id_to_token: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tok, _, idx = line.rstrip("\n").partition("\t")
            if int(idx) != len(id_to_token):
                raise TextError(f"{path}: non-dense vocabulary ids")
            id_to_token.append(tok)
    return Vocabulary({t: i for i, t in enumerate(id_to_token)}, tuple(id_to_token))


# ---------------------------------------------------------------------------
# token sequences


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    mask_positions: tuple[int, ...]

    @property
    def h(self) -> int:
        return len(self.mask_positions)

    def __len__(self) -> int:
        return len(self.ids)


def _to_seq(ids: list[int], max_seq_len: int | None) -> TokenSeq:
    if max_seq_len is not None and len(ids) > max_seq_len:
        if any(i == MASK_ID for i in ids[max_seq_len:]):
            raise TextError(
                f"truncation to {max_seq_len} tokens would drop a {MASK_TOKEN}")
        ids = ids[:max_seq_len]
    masks = tuple(p for p, i in enumerate(ids) if i == MASK_ID)
    return TokenSeq(tuple(ids), masks)


def tokenize(s: str, vocab: Vocabulary, max_seq_len: int | None = None) -> TokenSeq:
    return _to_seq(vocab.encode(split_text(s)), max_seq_len)


def detokenize(seq: TokenSeq, vocab: Vocabulary) -> str:
    return join_tokens(vocab.decode(seq.ids))


# ---------------------------------------------------------------------------
# record layouts (token ids plus per-feature slots, for imputation supervision)


@dataclass(frozen=True)
class SemanticLayout:
    """Tokenized record with the token slot of every feature's value.

    feature_slots[k] is a mask position (int) for an absent feature, or the
    (start, end) token span of the rendered value for a present one.
    """
    ids: tuple[int, ...]
    feature_slots: tuple[object, ...]
    feature_present: tuple[bool, ...]

    def token_seq(self) -> TokenSeq:
        masks = tuple(slot for slot, p in zip(self.feature_slots, self.feature_present) if not p)
        return TokenSeq(self.ids, masks)


def build_layout(record: Record, schema: FeatureSchema, vocab: Vocabulary,
                 max_seq_len: int | None = None) -> SemanticLayout:
    lin = linearize(record, schema)
    toks = _header_tokens(record.region_id, record.day_index, "," if lin.pairs else ".")
    slots: list[object] = []
    for key, value in lin.pairs:
        toks.extend(["the", *key.split(), "was"])
        if value == MASK_TOKEN:
            slots.append(len(toks))
            toks.append(MASK_TOKEN)
        else:
            start = len(toks)
            toks.extend(value)
            slots.append((start, len(toks)))
        toks.append(".")
    if max_seq_len is not None and len(toks) > max_seq_len:
        raise TextError(f"record renders to {len(toks)} tokens > max_seq_len={max_seq_len}")
    return SemanticLayout(tuple(vocab.encode(toks)), tuple(slots),
                          tuple(record.feature_present))


def apply_artificial_masks(layout: SemanticLayout, artificial: set[int]
                           ) -> tuple[TokenSeq, tuple[tuple[int, object], ...]]:
    """Collapse the value spans of `artificial` (present) features to [MASK].

    Returns the masked TokenSeq plus, aligned with its mask_positions, one
    (feature index, original value span or None) entry per mask; the span
    points into the unmasked layout for teacher-state extraction.
    """
    for k in artificial:
        if not layout.feature_present[k]:
            raise TextError(f"feature {k} is already absent; cannot mask artificially")
    ids: list[int] = []
    mask_meta: list[tuple[int, object]] = []
    mask_positions: list[int] = []
    cursor = 0
    for k, slot in enumerate(layout.feature_slots):
        if not layout.feature_present[k]:
            pos = slot
            ids.extend(layout.ids[cursor:pos])
            mask_positions.append(len(ids))
            mask_meta.append((k, None))
            ids.append(MASK_ID)
            cursor = pos + 1
        elif k in artificial:
            start, end = slot
            ids.extend(layout.ids[cursor:start])
            mask_positions.append(len(ids))
            mask_meta.append((k, (start, end)))
            ids.append(MASK_ID)
            cursor = end
    ids.extend(layout.ids[cursor:])
    return TokenSeq(tuple(ids), tuple(mask_positions)), tuple(mask_meta)


# ---------------------------------------------------------------------------
# domain instructions


def trend_label(window) -> str:
    """increasing / decreasing / stable via least-squares slope against a
    0.01 * population-std dead zone; unknown for an empty window."""
    vals = np.asarray(list(window), dtype=np.float64)
    if vals.size == 0:
        return "unknown"
    if vals.size < 2:
        return "stable"
    x = np.arange(vals.size, dtype=np.float64)
    slope = float(np.cov(x, vals, bias=True)[0, 1] / x.var())
    threshold = 0.01 * float(vals.std())
    if slope > threshold:
        return "increasing"
    if slope < -threshold:
        return "decreasing"
    return "stable"


def build_domain_instruction(dataset_desc: str, task_desc: str, target_window) -> str:
    """Prompt of dataset description, task description, and target statistics
    (min/max/median at 5 significant digits, plus the trend label) over the
    observed targets in the look-back window."""
    vals = np.asarray(list(target_window), dtype=np.float64)
    if vals.size == 0:
        mn = mx = md = "unknown"
    else:
        mn, mx, md = (format_stat(float(np.min(vals))),
                      format_stat(float(np.max(vals))),
                      format_stat(float(np.median(vals))))
    return (f"{START_PROMPT} Dataset description: {dataset_desc} "
            f"Task description: {task_desc} "
            f"Target statistics: min value {mn}, max value {mx}, "
            f"median value {md}, the trend of input is {trend_label(target_window)} "
            f"{END_PROMPT}")

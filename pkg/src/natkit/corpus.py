"""Vocabulary, tokenization, synthetic tasks, distillation, and batching.

Tokenization is plain whitespace; vocabularies are dense id maps with the
four specials pinned to ids 0-3. Everything here is a pure function of its
inputs plus an explicit seed.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .numerics import keyed_rng

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass
class Vocabulary:
    """Dense token<->id maps; specials occupy ids 0-3, the rest follow
    descending-frequency order with lexicographic tie-break."""

    tokens: list[str]
    id_of: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id_of:
            self.id_of = {t: i for i, t in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)


def build_vocab(pairs: list[tuple[str, str]], max_size: int) -> Vocabulary:
    """Shared source/target vocabulary over a raw corpus, capped at max_size ids."""
    if not pairs:
        raise DataError("build_vocab: empty corpus")
    if max_size < 8:
        raise ConfigError(f"build_vocab: max_size must be >= 8, got {max_size}")
    counts: Counter[str] = Counter()
    for src, tgt in pairs:
        counts.update(src.split())
        counts.update(tgt.split())
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ordered[: max_size - len(SPECIAL_TOKENS)]]
    return Vocabulary(list(SPECIAL_TOKENS) + keep)


@dataclass
class TargetVocabFilter:
    """Restriction of the vocabulary to tokens seen on the target side.

    ``keep`` is a length-v boolean vector (specials always kept);
    ``kept_ids`` lists the kept global ids in ascending order, so
    position k in the filtered space maps back to kept_ids[k].
    """

    keep: np.ndarray
    kept_ids: np.ndarray

    @property
    def size(self) -> int:
        return int(self.kept_ids.size)

    def to_filtered(self, global_id: int) -> int:
        idx = int(np.searchsorted(self.kept_ids, global_id))
        if idx >= self.kept_ids.size or self.kept_ids[idx] != global_id:
            raise ValueError(f"id {global_id} is not in the target-side vocabulary")
        return idx

    def filtered_targets(self, ids: np.ndarray) -> np.ndarray:
        """Vectorized global->filtered map; PAD and other non-kept ids pass
        through searchsorted unchecked, so only call on target-side ids."""
        return np.searchsorted(self.kept_ids, ids)


def build_target_filter(vocab: Vocabulary, pairs: list[tuple[str, str]]) -> TargetVocabFilter:
    """keep[t] is true iff t is a special or occurs on the target side."""
    keep = np.zeros(vocab.size, dtype=bool)
    keep[: len(SPECIAL_TOKENS)] = True
    for _, tgt in pairs:
        for tok in tgt.split():
            keep[vocab.id_of.get(tok, UNK)] = True
    return TargetVocabFilter(keep=keep, kept_ids=np.flatnonzero(keep))


def encode(vocab: Vocabulary, raw: str) -> list[int]:
    """Whitespace tokenization; unknown tokens map to UNK. No BOS/EOS added."""
    return [vocab.id_of.get(tok, UNK) for tok in raw.split()]


def decode(vocab: Vocabulary, ids: list[int] | np.ndarray) -> str:
    return " ".join(vocab.tokens[int(i)] for i in ids)


@dataclass
class SentencePair:
    src: list[int]
    tgt: list[int]


def encode_pairs(vocab: Vocabulary, pairs: list[tuple[str, str]]) -> list[SentencePair]:
    out = []
    for i, (src, tgt) in enumerate(pairs):
        s, t = encode(vocab, src), encode(vocab, tgt)
        if not s or not t:
            raise DataError(f"empty sentence at pair {i}")
        out.append(SentencePair(s, t))
    return out


# ----------------------------------------------------------- synthetic tasks


def homograph_rule(vocab_size: int) -> dict:
    """Token inventory and disambiguation rule for the homograph task.

    Content tokens split three ways: ambiguous source-only tokens h*, their
    target-only variants p*/r*, and ordinary tokens w* that map to
    themselves. An h translates to its p variant when the next source token
    is in the trigger set (first half of the ordinary tokens), otherwise to
    its r variant; sentence-final h takes the r branch.
    """
    content = vocab_size - len(SPECIAL_TOKENS)
    n_h = max(1, content // 6)
    n_ord = content - 3 * n_h
    if n_ord < 1:
        n_h = max(1, (content - 1) // 3)
        n_ord = content - 3 * n_h
    homographs = [f"h{i}" for i in range(n_h)]
    variant_p = {f"h{i}": f"p{i}" for i in range(n_h)}
    variant_r = {f"h{i}": f"r{i}" for i in range(n_h)}
    ordinary = [f"w{i:02d}" for i in range(n_ord)]
    triggers = set(ordinary[: max(1, n_ord // 2)])
    return {
        "homographs": homographs,
        "variant_p": variant_p,
        "variant_r": variant_r,
        "ordinary": ordinary,
        "triggers": triggers,
    }


def homograph_target(src_tokens: list[str], rule: dict) -> list[str]:
    """Apply the disambiguation rule to a source sentence."""
    out = []
    for i, tok in enumerate(src_tokens):
        if tok in rule["variant_p"]:
            nxt = src_tokens[i + 1] if i + 1 < len(src_tokens) else None
            branch = rule["variant_p"] if nxt in rule["triggers"] else rule["variant_r"]
            out.append(branch[tok])
        else:
            out.append(tok)
    return out


def make_synthetic_task(kind: str, vocab_size: int, len_range: tuple[int, int],
                        n_pairs: int, seed: int) -> list[tuple[str, str]]:
    """Deterministic toy corpora: copy, reverse, or homograph disambiguation."""
    lo, hi = len_range
    if vocab_size < 8:
        raise ConfigError(f"vocab_size must be >= 8, got {vocab_size}")
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid length range {len_range}")
    if kind not in ("copy", "reverse", "homograph"):
        raise ConfigError(f"unknown task kind: {kind}")

    rng = keyed_rng(seed, 0xC0DE)
    pairs: list[tuple[str, str]] = []
    if kind == "homograph":
        rule = homograph_rule(vocab_size)
        homs, ordinary = rule["homographs"], rule["ordinary"]
        for _ in range(n_pairs):
            n = int(rng.integers(lo, hi + 1))
            src = [
                homs[int(rng.integers(len(homs)))]
                if rng.random() < 0.35
                else ordinary[int(rng.integers(len(ordinary)))]
                for _ in range(n)
            ]
            pairs.append((" ".join(src), " ".join(homograph_target(src, rule))))
        return pairs

    content = [f"w{i:02d}" for i in range(vocab_size - len(SPECIAL_TOKENS))]
    for _ in range(n_pairs):
        n = int(rng.integers(lo, hi + 1))
        src = [content[int(rng.integers(len(content)))] for _ in range(n)]
        tgt = src if kind == "copy" else list(reversed(src))
        pairs.append((" ".join(src), " ".join(tgt)))
    return pairs


# ---------------------------------------------------------------- distill


def distill(teacher, pairs: list[SentencePair], vocab: Vocabulary) -> list[SentencePair]:
    """Replace each target with the teacher's greedy decode of its source.

    An empty decode falls back to a single UNK so corpus alignment and the
    T >= 1 invariant hold.
    """
    from .model import greedy_decode_batch

    if teacher.hyper.vocab_size != vocab.size:
        raise ConfigError(
            f"teacher vocabulary size {teacher.hyper.vocab_size} != corpus vocabulary {vocab.size}"
        )
    hyps = greedy_decode_batch(teacher, [p.src for p in pairs])
    return [SentencePair(p.src, h if h else [UNK]) for p, h in zip(pairs, hyps)]


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    """Padded id matrices plus true per-row lengths."""

    src_ids: np.ndarray  # (B, N_max) int64, PAD beyond src_len
    tgt_ids: np.ndarray  # (B, T_max)
    src_len: np.ndarray  # (B,)
    tgt_len: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return int(self.src_ids.shape[0])


def _pad_batch(group: list[SentencePair]) -> Batch:
    n_max = max(len(p.src) for p in group)
    t_max = max(len(p.tgt) for p in group)
    src = np.full((len(group), n_max), PAD, dtype=np.int64)
    tgt = np.full((len(group), t_max), PAD, dtype=np.int64)
    for i, p in enumerate(group):
        src[i, : len(p.src)] = p.src
        tgt[i, : len(p.tgt)] = p.tgt
    return Batch(
        src_ids=src,
        tgt_ids=tgt,
        src_len=np.array([len(p.src) for p in group], dtype=np.int64),
        tgt_len=np.array([len(p.tgt) for p in group], dtype=np.int64),
    )


def make_batches(pairs: list[SentencePair], batch_tokens: int, seed: int) -> list[Batch]:
    """Shuffle by seed, then group greedily under B * max(N_max, T_max) <= budget."""
    if not pairs:
        return []
    for i, p in enumerate(pairs):
        if max(len(p.src), len(p.tgt)) > batch_tokens:
            raise DataError(
                f"pair {i} needs {max(len(p.src), len(p.tgt))} tokens, over the "
                f"batch budget of {batch_tokens}"
            )
    order = keyed_rng(seed, 0xBA7C).permutation(len(pairs))
    batches: list[Batch] = []
    group: list[SentencePair] = []
    width = 0
    for idx in order:
        p = pairs[int(idx)]
        w = max(width, len(p.src), len(p.tgt))
        if group and (len(group) + 1) * w > batch_tokens:
            batches.append(_pad_batch(group))
            group, width = [], 0
            w = max(len(p.src), len(p.tgt))
        group.append(p)
        width = w
    if group:
        batches.append(_pad_batch(group))
    return batches


# ------------------------------------------------------------------- file IO


def write_parallel(prefix: Path, pairs: list[tuple[str, str]]) -> tuple[Path, Path]:
    src_path = prefix.with_suffix(".src")
    tgt_path = prefix.with_suffix(".tgt")
    src_path.write_text("\n".join(s for s, _ in pairs) + "\n", encoding="utf-8")
    tgt_path.write_text("\n".join(t for _, t in pairs) + "\n", encoding="utf-8")
    return src_path, tgt_path


def read_parallel(src_path: Path, tgt_path: Path) -> list[tuple[str, str]]:
    src_lines = src_path.read_text(encoding="utf-8").splitlines()
    tgt_lines = tgt_path.read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"line count mismatch: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}"
        )
    return list(zip(src_lines, tgt_lines))


def write_vocab(path: Path, vocab: Vocabulary) -> None:
    path.write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def read_vocab(path: Path) -> Vocabulary:
    tokens = path.read_text(encoding="utf-8").splitlines()
    if tokens[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
        raise DataError(f"vocabulary file {path} does not start with the special tokens")
    return Vocabulary(tokens)

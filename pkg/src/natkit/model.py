"""Transformer encoder-decoder with parallel and causal decoding.

Pre-LN blocks, sinusoidal positions, tied output projection onto the
target-filtered embedding rows, a length-offset classifier over the pooled
encoder states, and the attentive retargeting of copied decoder inputs into
the target embedding space (optionally through a learned compression of the
target rows).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import PAD, SPECIAL_TOKENS, TargetVocabFilter
from .errors import ConfigError
from .numerics import (
    Tensor, add, dropout, gather_positions, gather_rows, keyed_rng, layer_norm,
    matmul, mul, relu, reshape, scale, softmax, transpose, tsum,
)

NEG_INF = -1e9  # additive mask value; keeps gradients finite


@dataclass
class Hyper:
    """Model hyperparameters; serialized into checkpoint footers."""

    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 256
    max_offset: int = 20          # length head classifies offsets in [-C, C]
    t_max: int = 64
    dropout: float = 0.1
    use_it: bool = False
    compress_dim: int = 0         # 0 disables target-row compression
    scaled_it_softmax: bool = False
    share_embeddings: bool = True
    model_kind: str = "nat"       # "nat" | "at"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.compress_dim < 0:
            raise ConfigError(f"compress_dim must be >= 0, got {self.compress_dim}")


def sinusoidal_positions(t_max: int, d: int) -> np.ndarray:
    pos = np.arange(t_max)[:, None].astype(np.float64)
    i = np.arange(d)[None, :]
    angle = pos / (10000.0 ** (2 * (i // 2) / d))
    pe = np.zeros((t_max, d))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe.astype(np.float32)


@dataclass
class AttentionMask:
    """Validity pattern for decoder self-attention.

    ``causal`` forbids attention from position i to any j > i; ``full``
    allows every valid position. PAD keys are never attended to.
    """

    kind: str                 # "causal" | "full"
    valid: np.ndarray         # (B, T) bool, False at PAD

    def __post_init__(self):
        if self.kind not in ("causal", "full"):
            raise ConfigError(f"unknown mask kind: {self.kind}")

    def additive(self) -> np.ndarray:
        b, t = self.valid.shape
        m = np.where(self.valid[:, None, None, :], 0.0, NEG_INF).astype(np.float32)
        if self.kind == "causal":
            tri = np.where(np.arange(t)[:, None] < np.arange(t)[None, :], NEG_INF, 0.0)
            m = m + tri[None, None].astype(np.float32)
        return m


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    return np.where(valid[:, None, None, :], 0.0, NEG_INF).astype(np.float32)


def valid_from_lengths(lengths: np.ndarray, width: int) -> np.ndarray:
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


class DropoutPlan:
    """Counter-based dropout keys: (seed, step, call index) -> generator.

    One plan per training step makes forward stochasticity a pure function
    of the step, so interrupted runs resume bit-identically.
    """

    def __init__(self, p: float, seed: int, step: int):
        self.p = p
        self.seed = seed
        self.step = step
        self._calls = 0

    def next_rng(self):
        self._calls += 1
        return keyed_rng(self.seed, self.step, self._calls)


def _apply_dropout(x: Tensor, plan: DropoutPlan | None) -> Tensor:
    if plan is None or plan.p <= 0.0:
        return x
    return dropout(x, plan.p, plan.next_rng())


# ------------------------------------------------------------------- builder


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(np.float32)


class EmbeddingBank:
    """Shared token table plus the retargeting parameters.

    ``emb`` holds one row per token (v, d); the filtered target rows are the
    kept subset, and the optional compression matrix mixes them down to
    ``compress_dim`` rows while staying inside the target span.
    """

    def __init__(self, params: dict[str, Tensor], filt: TargetVocabFilter, hyper: Hyper):
        self.params = params
        self.filter = filt
        self.hyper = hyper

    @property
    def emb(self) -> Tensor:
        return self.params["emb"]

    @property
    def src_emb(self) -> Tensor:
        return self.params["emb" if self.hyper.share_embeddings else "src_emb"]

    def target_rows(self) -> Tensor:
        """Filtered embedding rows, shape (v', d)."""
        return gather_rows(self.emb, self.filter.kept_ids)

    def it_key_rows(self) -> Tensor:
        """Rows the retargeting attention selects from: compressed when enabled."""
        rows = self.target_rows()
        if self.hyper.compress_dim:
            rows = matmul(self.params["w_c"], rows)
        return rows


@dataclass
class ITState:
    """Intermediate tensors of the decoder-input retargeting."""

    z: Tensor            # (..., T, d) copied input
    query: Tensor        # (..., T, d) projected query
    weights: Tensor      # (..., T, v' or v*) row-stochastic attention
    transformed: Tensor  # (..., T, d) weighted sum of target rows


class Model:
    """Parameter container plus the forward operations."""

    def __init__(self, hyper: Hyper, filt: TargetVocabFilter, seed: int = 0):
        if filt.keep.size != hyper.vocab_size:
            raise ConfigError(
                f"filter covers {filt.keep.size} ids but vocab_size is {hyper.vocab_size}"
            )
        self.hyper = hyper
        self.filter = filt
        self.params: dict[str, Tensor] = {}
        rng = keyed_rng(seed, 0x1417)
        d, dff, v = hyper.d_model, hyper.d_ff, hyper.vocab_size

        def p(name: str, data: np.ndarray) -> None:
            self.params[name] = Tensor(data, requires_grad=True)

        p("emb", (rng.standard_normal((v, d)) * d ** -0.5).astype(np.float32))
        if not hyper.share_embeddings:
            p("src_emb", (rng.standard_normal((v, d)) * d ** -0.5).astype(np.float32))
        if hyper.use_it:
            p("w_q", _glorot(rng, d, d))
            if hyper.compress_dim:
                p("w_c", _glorot(rng, hyper.compress_dim, filt.size))
        elif hyper.compress_dim:
            raise ConfigError("compress_dim set without use_it")

        def attn_params(prefix: str) -> None:
            for nm in ("wq", "wk", "wv", "wo"):
                p(f"{prefix}.{nm}", _glorot(rng, d, d))
                p(f"{prefix}.{nm}_b", np.zeros(d, dtype=np.float32))

        def block(prefix: str, cross: bool) -> None:
            p(f"{prefix}.ln1.g", np.ones(d, dtype=np.float32))
            p(f"{prefix}.ln1.b", np.zeros(d, dtype=np.float32))
            attn_params(f"{prefix}.self")
            if cross:
                p(f"{prefix}.lnx.g", np.ones(d, dtype=np.float32))
                p(f"{prefix}.lnx.b", np.zeros(d, dtype=np.float32))
                attn_params(f"{prefix}.cross")
            p(f"{prefix}.ln2.g", np.ones(d, dtype=np.float32))
            p(f"{prefix}.ln2.b", np.zeros(d, dtype=np.float32))
            p(f"{prefix}.ff.w1", _glorot(rng, d, dff))
            p(f"{prefix}.ff.b1", np.zeros(dff, dtype=np.float32))
            p(f"{prefix}.ff.w2", _glorot(rng, dff, d))
            p(f"{prefix}.ff.b2", np.zeros(d, dtype=np.float32))

        for i in range(hyper.enc_layers):
            block(f"enc.{i}", cross=False)
        p("enc.ln.g", np.ones(d, dtype=np.float32))
        p("enc.ln.b", np.zeros(d, dtype=np.float32))
        for i in range(hyper.dec_layers):
            block(f"dec.{i}", cross=True)
        p("dec.ln.g", np.ones(d, dtype=np.float32))
        p("dec.ln.b", np.zeros(d, dtype=np.float32))
        p("len.w", _glorot(rng, d, 2 * hyper.max_offset + 1))
        p("len.b", np.zeros(2 * hyper.max_offset + 1, dtype=np.float32))

        self.bank = EmbeddingBank(self.params, filt, hyper)
        self.positions = sinusoidal_positions(hyper.t_max + 8, d)

    # -------------------------------------------------------------- pieces

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return add(matmul(x, self.params[name]), self.params[f"{name}_b"])

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attention(self, prefix: str, x_q: Tensor, x_kv: Tensor,
                   add_mask: np.ndarray, collect: list | None) -> Tensor:
        h = self.hyper.n_heads
        b, tq, d = x_q.shape
        tk = x_kv.shape[-2]
        dh = d // h

        def heads(t: Tensor, length: int) -> Tensor:
            return transpose(reshape(t, (b, length, h, dh)), (0, 2, 1, 3))

        q = heads(self._linear(x_q, f"{prefix}.wq"), tq)
        k = heads(self._linear(x_kv, f"{prefix}.wk"), tk)
        v = heads(self._linear(x_kv, f"{prefix}.wv"), tk)
        scores = add(scale(matmul(q, transpose(k, (0, 1, 3, 2))), dh ** -0.5), add_mask)
        probs = softmax(scores, axis=-1)
        if collect is not None:
            collect.append(np.array(probs.data, copy=True))
        ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (b, tq, d))
        return self._linear(ctx, f"{prefix}.wo")

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        hdn = relu(add(matmul(x, self.params[f"{prefix}.w1"]), self.params[f"{prefix}.b1"]))
        return add(matmul(hdn, self.params[f"{prefix}.w2"]), self.params[f"{prefix}.b2"])

    def _embed_positions(self, x: Tensor, plan: DropoutPlan | None) -> Tensor:
        t = x.shape[-2]
        if t > self.positions.shape[0]:
            raise ConfigError(f"sequence length {t} exceeds positional table for t_max={self.hyper.t_max}")
        x = add(scale(x, math.sqrt(self.hyper.d_model)), self.positions[:t])
        return _apply_dropout(x, plan)

    # ------------------------------------------------------------- encoder

    def encode(self, src_ids: np.ndarray, src_len: np.ndarray,
               plan: DropoutPlan | None = None) -> Tensor:
        """Source ids (B, N) -> encoder states (B, N, d). PAD keys are
        excluded from attention throughout."""
        src_ids = np.atleast_2d(np.asarray(src_ids))
        if src_ids.size and src_ids.max() >= self.hyper.vocab_size:
            raise ConfigError(f"source id {int(src_ids.max())} out of range")
        valid = valid_from_lengths(src_len, src_ids.shape[1])
        kmask = key_padding_mask(valid)
        x = self._embed_positions(gather_rows(self.bank.src_emb, src_ids), plan)
        for i in range(self.hyper.enc_layers):
            pre = f"enc.{i}"
            normed = self._ln(x, f"{pre}.ln1")
            a = self._attention(f"{pre}.self", normed, normed, kmask, None)
            x = add(x, _apply_dropout(a, plan))
            f = self._ffn(f"{pre}.ff", self._ln(x, f"{pre}.ln2"))
            x = add(x, _apply_dropout(f, plan))
        return self._ln(x, "enc.ln")

    # ------------------------------------------------------------- decoder

    def decode(self, decoder_input: Tensor, enc_states: Tensor, mask: AttentionMask,
               src_valid: np.ndarray, plan: DropoutPlan | None = None,
               collect_attention: list | None = None) -> Tensor:
        """Decoder input vectors (B, T, d) -> logits (B, T, v') over the
        filtered vocabulary via the tied projection onto the target rows."""
        if decoder_input.shape[-2] != mask.valid.shape[-1]:
            raise ConfigError(
                f"decoder input length {decoder_input.shape[-2]} != mask width {mask.valid.shape[-1]}"
            )
        self_mask = mask.additive()
        cross_mask = key_padding_mask(src_valid)
        x = self._embed_positions(decoder_input, plan)
        for i in range(self.hyper.dec_layers):
            pre = f"dec.{i}"
            normed = self._ln(x, f"{pre}.ln1")
            a = self._attention(f"{pre}.self", normed, normed, self_mask, collect_attention)
            x = add(x, _apply_dropout(a, plan))
            c = self._attention(f"{pre}.cross", self._ln(x, f"{pre}.lnx"),
                                enc_states, cross_mask, None)
            x = add(x, _apply_dropout(c, plan))
            f = self._ffn(f"{pre}.ff", self._ln(x, f"{pre}.ln2"))
            x = add(x, _apply_dropout(f, plan))
        states = self._ln(x, "dec.ln")
        return matmul(states, transpose(self.bank.target_rows()))

    def embed_target_ids(self, ids: np.ndarray) -> Tensor:
        return gather_rows(self.bank.emb, np.asarray(ids))

    # ---------------------------------------------------------- length head

    def predict_length(self, enc_states: Tensor, src_len: np.ndarray) -> Tensor:
        """Mean-pool non-PAD encoder states and score offsets in [-C, C].
        Returns raw logits (B, 2C+1); softmax/argmax happen downstream."""
        src_len = np.asarray(src_len)
        valid = valid_from_lengths(src_len, enc_states.shape[1]).astype(np.float32)
        pooled = tsum(mul(enc_states, valid[:, :, None]), axis=1)
        pooled = mul(pooled, (1.0 / src_len.astype(np.float32))[:, None])
        return add(matmul(pooled, self.params["len.w"]), self.params["len.b"])


def pick_lengths(length_logits: np.ndarray, src_len: np.ndarray, max_offset: int,
                 t_max: int) -> np.ndarray:
    """Argmax offset with ties broken toward 0 (then the negative side),
    clamped to [1, t_max]."""
    offsets = np.arange(-max_offset, max_offset + 1)
    order = np.lexsort((offsets, np.abs(offsets)))
    best = order[np.argmax(length_logits[:, order], axis=1)]
    return np.clip(np.asarray(src_len) + offsets[best], 1, t_max)


# ------------------------------------------------------- decoder-input build


def uniform_copy(src_emb: Tensor, t: int) -> Tensor:
    """Index-mapped copy: row t takes source row floor(t*N/T)."""
    n = src_emb.shape[0]
    idx = (np.arange(t) * n) // t
    return gather_rows(src_emb, idx)


def soft_copy(src_emb: Tensor, t: int, tau: float) -> Tensor:
    """Distance-weighted copy: row t mixes source rows with weights
    softmax_i(-|t - i*T/N| / tau)."""
    if tau <= 0:
        raise ConfigError(f"soft_copy temperature must be positive, got {tau}")
    n = src_emb.shape[0]
    dist = -np.abs(np.arange(t)[:, None] - np.arange(n)[None, :] * (t / n)) / tau
    return matmul(softmax(Tensor(dist.astype(np.float32)), axis=-1), src_emb)


def copy_indices(src_len: np.ndarray, tgt_len: np.ndarray, t_max: int) -> np.ndarray:
    """Batched uniform-copy index map (B, t_max); PAD rows point at 0."""
    b = src_len.shape[0]
    idx = np.zeros((b, t_max), dtype=np.int64)
    for i in range(b):
        t = int(tgt_len[i])
        idx[i, :t] = (np.arange(t) * int(src_len[i])) // t
    return idx


def it_transform(bank: EmbeddingBank, z: Tensor) -> ITState:
    """Retarget copied decoder inputs into the target embedding span.

    Query-projects z, attends over the (optionally compressed) target rows
    with an unscaled dot-product softmax, and returns the weighted sum of
    those rows; every output row is a convex combination of target rows.
    """
    if "w_q" not in bank.params:
        raise ConfigError("retargeting requested but the model was built without use_it")
    keys = bank.it_key_rows()
    query = matmul(z, transpose(bank.params["w_q"]))
    logits = matmul(query, transpose(keys))
    if bank.hyper.scaled_it_softmax:
        logits = scale(logits, bank.hyper.d_model ** -0.5)
    weights = softmax(logits, axis=-1)
    return ITState(z=z, query=query, weights=weights, transformed=matmul(weights, keys))


def compress_embedding(bank: EmbeddingBank) -> Tensor:
    """Compressed target embedding matrix, shape (d, v*)."""
    if "w_c" not in bank.params:
        raise ConfigError("compress_dim not configured for this model")
    return transpose(matmul(bank.params["w_c"], bank.target_rows()))


# ----------------------------------------------------------------- decoding


def strip_specials(ids: list[int]) -> list[int]:
    return [i for i in ids if i >= len(SPECIAL_TOKENS)]


def translate_batch(model: Model, sources: list[list[int]],
                    use_it: bool | None = None) -> list[list[int]]:
    """Parallel decode: predict lengths, build copied inputs, one full-mask
    pass, per-position argmax over the filtered vocabulary, strip specials."""
    from .numerics import no_grad

    if not sources:
        return []
    if use_it is None:
        use_it = model.hyper.use_it
    with no_grad():
        b = len(sources)
        n_max = max(len(s) for s in sources)
        src_ids = np.full((b, n_max), PAD, dtype=np.int64)
        for i, s in enumerate(sources):
            src_ids[i, : len(s)] = s
        src_len = np.array([len(s) for s in sources], dtype=np.int64)
        enc = model.encode(src_ids, src_len)
        len_logits = model.predict_length(enc, src_len).data
        t_hat = pick_lengths(len_logits, src_len, model.hyper.max_offset, model.hyper.t_max)
        t_width = int(t_hat.max())
        src_emb = gather_rows(model.bank.src_emb, src_ids)
        z = gather_positions(src_emb, copy_indices(src_len, t_hat, t_width))
        if use_it:
            z = it_transform(model.bank, z).transformed
        mask = AttentionMask("full", valid_from_lengths(t_hat, t_width))
        logits = model.decode(z, enc, mask, valid_from_lengths(src_len, n_max))
        picked = np.argmax(logits.data, axis=-1)
    out = []
    for i in range(b):
        filtered = picked[i, : int(t_hat[i])]
        out.append(strip_specials([int(model.filter.kept_ids[j]) for j in filtered]))
    return out


def translate(model: Model, source: list[int], use_it: bool | None = None) -> list[int]:
    return translate_batch(model, [source], use_it=use_it)[0]


def greedy_decode_batch(model: Model, sources: list[list[int]],
                        max_len: int | None = None) -> list[list[int]]:
    """Autoregressive greedy decode (teacher-forcing style, recomputing the
    prefix each step). Stops per sentence at EOS or max_len."""
    from .corpus import BOS, EOS
    from .numerics import no_grad

    if not sources:
        return []
    if max_len is None:
        max_len = model.hyper.t_max
    with no_grad():
        b = len(sources)
        n_max = max(len(s) for s in sources)
        src_ids = np.full((b, n_max), PAD, dtype=np.int64)
        for i, s in enumerate(sources):
            src_ids[i, : len(s)] = s
        src_len = np.array([len(s) for s in sources], dtype=np.int64)
        src_valid = valid_from_lengths(src_len, n_max)
        enc = model.encode(src_ids, src_len)
        out = np.full((b, max_len + 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        length = np.zeros(b, dtype=np.int64)
        for t in range(max_len):
            prefix = out[:, : t + 1]
            mask = AttentionMask("causal", np.ones((b, t + 1), dtype=bool))
            logits = model.decode(model.embed_target_ids(prefix), enc, mask, src_valid)
            nxt_filtered = np.argmax(logits.data[:, t, :], axis=-1)
            nxt = model.filter.kept_ids[nxt_filtered]
            active = ~done
            out[:, t + 1] = np.where(active, nxt, PAD)
            hit_eos = active & (nxt == EOS)
            length[active & ~hit_eos] = t + 1
            done |= hit_eos
            if done.all():
                break
    return [strip_specials([int(x) for x in out[i, 1 : 1 + int(length[i])]]) for i in range(b)]

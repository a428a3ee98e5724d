"""A small decoder-only transformer over the closed vocabulary.

Parameters live in one flat float64 vector (:class:`ParamVector`).  The
forward pass slices named views out of it, so the training code can treat
the model as a single array.  Layout, in order:

    tok_emb        (vocab, width)
    pos_emb        (context_length, width)
    for each layer l:
      l.qkv.w      (width, 3*width)     l.qkv.b   (3*width,)
      l.proj.w     (width, width)       l.proj.b  (width,)
      l.fc1.w      (width, 4*width)     l.fc1.b   (4*width,)
      l.fc2.w      (4*width, width)     l.fc2.b   (width,)
    head.w         (width, vocab)       head.b    (vocab,)

Matrices are row-major.  Layer norms carry no learnable gain or bias.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .vocab import BOS_ID, EOS_ID, PAD_ID, VOCAB_HASH, VOCAB_SIZE

__all__ = [
    "ModelConfig",
    "ParamVector",
    "Checkpoint",
    "CheckpointError",
    "CorruptCheckpointError",
    "VersionMismatchError",
    "VocabMismatchError",
    "SequenceTooLongError",
    "layout",
    "init",
    "response_logprob",
    "grad_response_logprob",
    "sequence_logprobs",
    "next_token_probs",
    "sample",
    "sample_batch",
    "greedy_decode",
    "greedy_decode_batch",
    "save",
    "load",
]

MAGIC = b"EXDPO1"
FORMAT_VERSION = 1
DEFAULT_MAX_LEN = 32


class SequenceTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    context_length: int = 128
    width: int = 64
    depth: int = 2
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if min(self.context_length, self.width, self.depth, self.heads) < 1:
            raise ValueError("model dimensions must be positive")


@lru_cache(maxsize=None)
def layout(config: ModelConfig) -> tuple[tuple[str, tuple[int, ...], int], ...]:
    """``(name, shape, offset)`` for every parameter block."""
    d, v = config.width, VOCAB_SIZE
    shapes = [("tok_emb", (v, d)), ("pos_emb", (config.context_length, d))]
    for layer in range(config.depth):
        shapes += [
            (f"{layer}.qkv.w", (d, 3 * d)), (f"{layer}.qkv.b", (3 * d,)),
            (f"{layer}.proj.w", (d, d)), (f"{layer}.proj.b", (d,)),
            (f"{layer}.fc1.w", (d, 4 * d)), (f"{layer}.fc1.b", (4 * d,)),
            (f"{layer}.fc2.w", (4 * d, d)), (f"{layer}.fc2.b", (d,)),
        ]
    shapes += [("head.w", (d, v)), ("head.b", (v,))]
    out, offset = [], 0
    for name, shape in shapes:
        out.append((name, shape, offset))
        offset += math.prod(shape)
    return tuple(out)


def n_params(config: ModelConfig) -> int:
    name, shape, offset = layout(config)[-1]
    return offset + math.prod(shape)


@dataclass(eq=False)
class ParamVector:
    config: ModelConfig
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (n_params(self.config),):
            raise ValueError(
                f"expected {n_params(self.config)} parameters, got {self.values.shape}")

    def copy(self) -> "ParamVector":
        return ParamVector(self.config, self.values.copy())

    def with_values(self, values) -> "ParamVector":
        return ParamVector(self.config, np.array(values, dtype=np.float64))

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.values)


def init(config: ModelConfig) -> ParamVector:
    """Scaled-uniform weights, zero biases.

    Embeddings draw from U(-0.5, 0.5); a matrix with ``fan_in`` rows draws
    from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    rng = np.random.default_rng(config.seed)
    values = np.zeros(n_params(config))
    for name, shape, offset in layout(config):
        size = math.prod(shape)
        if name.endswith(".b"):
            continue
        bound = 0.5 if name.endswith("_emb") else 1.0 / math.sqrt(shape[0])
        values[offset:offset + size] = rng.uniform(-bound, bound, size)
    return ParamVector(config, values)


def _views(flat: torch.Tensor, config: ModelConfig) -> dict[str, torch.Tensor]:
    return {
        name: flat[offset:offset + math.prod(shape)].view(shape)
        for name, shape, offset in layout(config)
    }


def _forward(flat: torch.Tensor, config: ModelConfig, ids: torch.Tensor, cache=None):
    """Logits for ``ids`` of shape (batch, time).

    ``cache`` is a per-layer list of (keys, values) from earlier positions,
    extended in place.  Right padding needs no mask: causal attention keeps
    trailing PAD from influencing earlier positions.
    """
    w = _views(flat, config)
    batch, steps = ids.shape
    start = cache[0][0].shape[2] if cache and cache[0] is not None else 0
    heads = config.heads
    d = config.width
    dh = d // heads
    h = w["tok_emb"][ids] + w["pos_emb"][start:start + steps]
    keys_len = start + steps
    mask = torch.arange(keys_len)[None, :] > (start + torch.arange(steps))[:, None]
    for layer in range(config.depth):
        z = F.layer_norm(h, (d,))
        qkv = z @ w[f"{layer}.qkv.w"] + w[f"{layer}.qkv.b"]
        q, k, v = (t.view(batch, steps, heads, dh).transpose(1, 2) for t in qkv.split(d, -1))
        if cache is not None:
            if cache[layer] is not None:
                k = torch.cat([cache[layer][0], k], dim=2)
                v = torch.cat([cache[layer][1], v], dim=2)
            cache[layer] = (k, v)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = att.masked_fill(mask, float("-inf")).softmax(-1)
        out = (att @ v).transpose(1, 2).reshape(batch, steps, d)
        h = h + out @ w[f"{layer}.proj.w"] + w[f"{layer}.proj.b"]
        z = F.layer_norm(h, (d,))
        h = h + F.gelu(z @ w[f"{layer}.fc1.w"] + w[f"{layer}.fc1.b"]) @ w[f"{layer}.fc2.w"] \
            + w[f"{layer}.fc2.b"]
    return F.layer_norm(h, (d,)) @ w["head.w"] + w["head.b"]


def _strip(response) -> list[int]:
    response = list(response)
    if EOS_ID in response:
        return response[:response.index(EOS_ID) + 1]
    raise ValueError("response must end with EOS")


def _check_length(config: ModelConfig, prompt, response) -> None:
    if len(prompt) + len(response) > config.context_length:
        raise SequenceTooLongError(
            f"prompt ({len(prompt)}) + response ({len(response)}) tokens exceed "
            f"context length {config.context_length}")


def sequence_logprobs(flat: torch.Tensor, config: ModelConfig, items) -> torch.Tensor:
    """Summed response log-probabilities for a batch of (prompt, response).

    Differentiable in ``flat``.  Prompt tokens contribute no terms; anything
    after the first EOS of a response is ignored.
    """
    items = [(list(p), _strip(r)) for p, r in items]
    for prompt, response in items:
        _check_length(config, prompt, response)
    width = max(len(p) + len(r) for p, r in items)
    inputs = torch.full((len(items), width), PAD_ID, dtype=torch.long)
    targets = torch.zeros((len(items), width), dtype=torch.long)
    weights = torch.zeros((len(items), width), dtype=torch.float64)
    for row, (prompt, response) in enumerate(items):
        seq = [BOS_ID] + prompt + response[:-1]
        inputs[row, :len(seq)] = torch.tensor(seq)
        span = slice(len(prompt), len(prompt) + len(response))
        targets[row, span] = torch.tensor(response)
        weights[row, span] = 1.0
    logp = _forward(flat, config, inputs).log_softmax(-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (picked * weights).sum(-1)


def response_logprob(params: ParamVector, prompt, response) -> float:
    """log pi(response | prompt), EOS included."""
    with torch.no_grad():
        return float(sequence_logprobs(params.tensor(), params.config, [(prompt, response)])[0])


def grad_response_logprob(params: ParamVector, prompt, response) -> np.ndarray:
    flat = params.tensor().clone().requires_grad_(True)
    sequence_logprobs(flat, params.config, [(prompt, response)])[0].backward()
    return flat.grad.numpy().copy()


def next_token_probs(params: ParamVector, prompt, prefix=(), temperature: float = 1.0,
                     mask_specials: bool = True) -> np.ndarray:
    """Distribution over the next response token after ``prompt + prefix``.

    With ``mask_specials`` PAD and BOS get probability zero; this is the
    distribution :func:`sample` draws from.
    """
    seq = [BOS_ID] + list(prompt) + list(prefix)
    if len(seq) > params.config.context_length:
        raise SequenceTooLongError("prefix exceeds context length")
    with torch.no_grad():
        logits = _forward(params.tensor(), params.config, torch.tensor([seq]))[0, -1]
    return _probs(logits[None], temperature, mask_specials)[0]


def _probs(logits: torch.Tensor, temperature: float, mask_specials: bool = True) -> np.ndarray:
    logits = logits / temperature
    if mask_specials:
        logits = logits.clone()
        logits[:, PAD_ID] = float("-inf")
        logits[:, BOS_ID] = float("-inf")
    return logits.softmax(-1).numpy()


def _check_budget(config: ModelConfig, prompt, max_len: int) -> None:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if len(prompt) + max_len > config.context_length:
        raise SequenceTooLongError("prompt + max_len exceeds context length")


def sample_batch(params: ParamVector, prompt, seeds, temperature: float = 1.0,
                 max_len: int = DEFAULT_MAX_LEN) -> list[list[int]]:
    """One sampled response per seed, all conditioned on the same prompt.

    Each row draws from its own ``numpy`` generator seeded by its entry in
    ``seeds``.  ``max_len`` bounds the returned length, EOS included; a row
    that reaches it without emitting EOS gets EOS appended.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    prompt = list(prompt)
    _check_budget(params.config, prompt, max_len)
    rngs = [np.random.default_rng(s) for s in seeds]
    rows = len(rngs)
    flat = params.tensor()
    cache = [None] * params.config.depth
    out: list[list[int]] = [[] for _ in range(rows)]
    done = [False] * rows
    step_input = torch.tensor([[BOS_ID] + prompt] * rows)
    with torch.no_grad():
        for _ in range(max_len - 1):
            logits = _forward(flat, params.config, step_input, cache)[:, -1]
            probs = _probs(logits, temperature)
            nxt = []
            for r in range(rows):
                token = EOS_ID
                if not done[r]:
                    cdf = np.cumsum(probs[r])
                    token = int(np.searchsorted(cdf, rngs[r].random() * cdf[-1], side="right"))
                    token = min(token, VOCAB_SIZE - 1)
                    out[r].append(token)
                    done[r] = token == EOS_ID
                nxt.append(token)
            if all(done):
                break
            step_input = torch.tensor(nxt)[:, None]
    for seq in out:
        if not seq or seq[-1] != EOS_ID:
            seq.append(EOS_ID)
    return out


def sample(params: ParamVector, prompt, temperature: float = 1.0, seed: int = 0,
           max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    return sample_batch(params, prompt, [seed], temperature, max_len)[0]


def greedy_decode_batch(params: ParamVector, prompts, max_len: int = DEFAULT_MAX_LEN,
                        chunk: int = 64) -> list[list[int]]:
    """Greedy responses for many prompts, batched by prompt length.

    Ties go to the lowest token id; PAD and BOS are never emitted.
    """
    prompts = [list(p) for p in prompts]
    for p in prompts:
        _check_budget(params.config, p, max_len)
    results: list[list[int] | None] = [None] * len(prompts)
    by_length: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_length.setdefault(len(p), []).append(i)
    flat = params.tensor()
    for length in sorted(by_length):
        members = by_length[length]
        for lo in range(0, len(members), chunk):
            idx = members[lo:lo + chunk]
            for i, seq in zip(idx, _greedy_rows(flat, params.config,
                                                [prompts[i] for i in idx], max_len)):
                results[i] = seq
    return results


def _greedy_rows(flat, config, prompts, max_len):
    rows = len(prompts)
    cache = [None] * config.depth
    out: list[list[int]] = [[] for _ in range(rows)]
    done = [False] * rows
    step_input = torch.tensor([[BOS_ID] + p for p in prompts])
    with torch.no_grad():
        for _ in range(max_len - 1):
            logits = _forward(flat, config, step_input, cache)[:, -1].clone()
            logits[:, PAD_ID] = float("-inf")
            logits[:, BOS_ID] = float("-inf")
            # numpy argmax returns the first maximal index.
            best = np.argmax(logits.numpy(), axis=-1)
            nxt = []
            for r in range(rows):
                token = EOS_ID
                if not done[r]:
                    token = int(best[r])
                    out[r].append(token)
                    done[r] = token == EOS_ID
                nxt.append(token)
            if all(done):
                break
            step_input = torch.tensor(nxt)[:, None]
    for seq in out:
        if not seq or seq[-1] != EOS_ID:
            seq.append(EOS_ID)
    return out


def greedy_decode(params: ParamVector, prompt, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    return greedy_decode_batch(params, [prompt], max_len)[0]


# -- checkpoints ------------------------------------------------------------

class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class VocabMismatchError(CheckpointError):
    pass


@dataclass(eq=False)
class Checkpoint:
    params: ParamVector
    role: str = "policy"
    vocab_hash: str = VOCAB_HASH
    format_version: int = FORMAT_VERSION

    @property
    def config(self) -> ModelConfig:
        return self.params.config


_HEADER_INT_FIELDS = ("context_length", "width", "depth", "heads", "seed")


def _header_text(ckpt: Checkpoint) -> str:
    fields = dict(asdict(ckpt.config))
    fields.update(role=ckpt.role, vocab_hash=ckpt.vocab_hash,
                  format_version=ckpt.format_version)
    return "".join(f"{k}={fields[k]}\n" for k in sorted(fields))


def dumps(ckpt: Checkpoint) -> bytes:
    header = _header_text(ckpt).encode("ascii")
    payload = ckpt.params.values.astype("<f8").tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def loads(data: bytes, expected_vocab_hash: str = VOCAB_HASH) -> Checkpoint:
    if len(data) < len(MAGIC) + 4:
        raise CorruptCheckpointError("file too short")
    magic = data[:len(MAGIC)]
    if magic != MAGIC:
        if magic[:5] == MAGIC[:5]:
            raise VersionMismatchError(f"unsupported format {magic!r}")
        raise CorruptCheckpointError("bad magic")
    (hlen,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if start + hlen > len(data):
        raise CorruptCheckpointError("truncated header")
    try:
        lines = data[start:start + hlen].decode("ascii").splitlines()
        fields = dict(line.split("=", 1) for line in lines)
        version = int(fields["format_version"])
        config = ModelConfig(**{k: int(fields[k]) for k in _HEADER_INT_FIELDS})
        role, vocab_hash = fields["role"], fields["vocab_hash"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from exc
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    if vocab_hash != expected_vocab_hash:
        raise VocabMismatchError(f"vocab hash {vocab_hash}, expected {expected_vocab_hash}")
    payload = data[start + hlen:]
    if len(payload) != 8 * n_params(config):
        raise CorruptCheckpointError(
            f"payload holds {len(payload)} bytes, expected {8 * n_params(config)}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise CorruptCheckpointError("non-finite parameter values")
    return Checkpoint(ParamVector(config, values), role, vocab_hash, version)


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path, expected_vocab_hash: str = VOCAB_HASH) -> Checkpoint:
    return loads(Path(path).read_bytes(), expected_vocab_hash)
